use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DepthGrid, GradientGrid};

use super::{read_text, round_sig9, write_file};

const GRADIENT_COLUMNS: &str = "i,j,g_x,g_y,mask";
const DEPTH_COLUMNS: &str = "i,j,z,mask";

fn header(s: &mut String, width: usize, height: usize, scale: f64, columns: &str) {
    writeln!(s, "width,height,scale\n{width},{height},{}\n{columns}", round_sig9(scale)).unwrap();
}

/// ```text
/// width,height,scale
/// 100,125,8
/// i,j,g_x,g_y,mask
/// 0,0,0.125,-0.5,1
/// ```
/// Cells row-major (`j` outer); `scale` (pixels per cell) may be omitted
/// from the first two lines and defaults to 1.
pub fn write_gradient_grid(path: &Path, g: &GradientGrid) -> Result<()> {
    let mut s = String::new();
    header(&mut s, g.width, g.height, g.scale, GRADIENT_COLUMNS);
    for k in 0..g.mask.len() {
        let (i, j) = (k % g.width, k / g.width);
        writeln!(s, "{i},{j},{},{},{}", round_sig9(g.gx[k]), round_sig9(g.gy[k]), u8::from(g.mask[k])).unwrap();
    }
    write_file(path, s)
}

pub fn write_depth_grid(path: &Path, d: &DepthGrid) -> Result<()> {
    let mut s = String::new();
    header(&mut s, d.width, d.height, d.scale, DEPTH_COLUMNS);
    for k in 0..d.mask.len() {
        let (i, j) = (k % d.width, k / d.width);
        writeln!(s, "{i},{j},{},{}", round_sig9(d.z[k]), u8::from(d.mask[k])).unwrap();
    }
    write_file(path, s)
}

struct Cells {
    width: usize,
    height: usize,
    scale: f64,
    values: Vec<Vec<f64>>,
    mask: Vec<bool>,
}

fn parse_cells(text: &str, path: &str, columns: &str) -> Result<Cells> {
    let err = |line: usize, detail: String| Error::Parse { path: path.to_string(), line, detail };
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
    let mut records = rdr.records();
    let mut next = |line: usize| -> Result<Vec<String>> {
        match records.next() {
            Some(Ok(r)) => Ok(r.iter().map(|f| f.trim().to_string()).collect()),
            Some(Err(e)) => Err(err(line, e.to_string())),
            None => Err(err(line, "unexpected end of file".into())),
        }
    };
    let head = next(1)?;
    let with_scale = match head.join(",").as_str() {
        "width,height" => false,
        "width,height,scale" => true,
        other => return Err(err(1, format!("expected `width,height[,scale]`, found `{other}`"))),
    };
    let dims = next(2)?;
    if dims.len() != head.len() {
        return Err(err(2, format!("{} values for {} header fields", dims.len(), head.len())));
    }
    let num = |s: &str, line: usize| s.parse::<f64>().map_err(|_| err(line, format!("`{s}` is not a number")));
    let int = |s: &str, line: usize| s.parse::<usize>().map_err(|_| err(line, format!("`{s}` is not a count")));
    let width = int(&dims[0], 2)?;
    let height = int(&dims[1], 2)?;
    let scale = if with_scale { num(&dims[2], 2)? } else { 1.0 };
    if next(3)?.join(",") != columns {
        return Err(err(3, format!("expected column header `{columns}`")));
    }
    let ncol = columns.split(',').count();
    let n = width * height;
    let (mut values, mut mask) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let line = k + 4;
        let row = next(line)?;
        if row.len() != ncol {
            return Err(err(line, format!("{} fields, expected {ncol}", row.len())));
        }
        let (i, j) = (int(&row[0], line)?, int(&row[1], line)?);
        if (i, j) != (k % width, k / width) {
            return Err(err(line, format!("cell ({i}, {j}) out of row-major order")));
        }
        let vals = row[2..ncol - 1].iter().map(|s| num(s, line)).collect::<Result<Vec<_>>>()?;
        values.push(vals);
        mask.push(match row[ncol - 1].as_str() {
            "0" => false,
            "1" => true,
            m => return Err(err(line, format!("mask `{m}` is not 0 or 1"))),
        });
    }
    if let Ok(extra) = next(n + 4) {
        return Err(err(n + 4, format!("trailing row `{}`", extra.join(","))));
    }
    Ok(Cells { width, height, scale, values, mask })
}

pub fn parse_gradient_grid(text: &str, path: &str) -> Result<GradientGrid> {
    let c = parse_cells(text, path, GRADIENT_COLUMNS)?;
    let gx = c.values.iter().map(|v| v[0]).collect();
    let gy = c.values.iter().map(|v| v[1]).collect();
    GradientGrid::new(c.width, c.height, c.scale, gx, gy, c.mask)
}

pub fn parse_depth_grid(text: &str, path: &str) -> Result<DepthGrid> {
    let c = parse_cells(text, path, DEPTH_COLUMNS)?;
    let z = c.values.iter().map(|v| v[0]).collect();
    DepthGrid::new(c.width, c.height, c.scale, z, c.mask)
}

pub fn read_gradient_grid(path: &Path) -> Result<GradientGrid> {
    parse_gradient_grid(&read_text(path)?, &path.display().to_string())
}

pub fn read_depth_grid(path: &Path) -> Result<DepthGrid> {
    parse_depth_grid(&read_text(path)?, &path.display().to_string())
}
