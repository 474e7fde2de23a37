use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Per-cell depth gradients over a masked grid.
///
/// Cell `(i, j)` (column, row) sits at pixel `(i·scale, j·scale)`; storage is
/// row-major. Gradients are in pixel/pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientGrid {
    pub width: usize,
    pub height: usize,
    /// Pixels per cell.
    pub scale: f64,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthGrid {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub z: Vec<f64>,
    pub mask: Vec<bool>,
}

fn check_dims(width: usize, height: usize, scale: f64, lens: &[usize]) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidMask("grid has zero extent".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("grid scale must be positive, got {scale}")));
    }
    if lens.iter().any(|&l| l != width * height) {
        return Err(Error::invalid(format!(
            "grid buffers do not match {width}x{height}"
        )));
    }
    Ok(())
}

/// Bilinear interpolation over the masked corners of the cell containing
/// `(x, y)`. The nearest cell must be on the mask.
fn bilinear(
    width: usize,
    height: usize,
    scale: f64,
    mask: &[bool],
    x: f64,
    y: f64,
    mut value: impl FnMut(usize) -> [f64; 2],
) -> Result<[f64; 2]> {
    let u = x / scale;
    let v = y / scale;
    let off = Error::OffMask { x, y };
    if !u.is_finite() || !v.is_finite() {
        return Err(off);
    }
    let (ni, nj) = (u.round(), v.round());
    if ni < 0.0 || nj < 0.0 || ni >= width as f64 || nj >= height as f64 {
        return Err(off);
    }
    if !mask[nj as usize * width + ni as usize] {
        return Err(off);
    }
    let i0 = u.floor().clamp(0.0, (width - 1) as f64) as usize;
    let j0 = v.floor().clamp(0.0, (height - 1) as f64) as usize;
    let fu = (u - i0 as f64).clamp(0.0, 1.0);
    let fv = (v - j0 as f64).clamp(0.0, 1.0);
    let mut acc = [0.0; 2];
    let mut wsum = 0.0;
    for (di, dj, w) in [
        (0, 0, (1.0 - fu) * (1.0 - fv)),
        (1, 0, fu * (1.0 - fv)),
        (0, 1, (1.0 - fu) * fv),
        (1, 1, fu * fv),
    ] {
        let (i, j) = (i0 + di, j0 + dj);
        if w == 0.0 || i >= width || j >= height {
            continue;
        }
        let idx = j * width + i;
        if !mask[idx] {
            continue;
        }
        let val = value(idx);
        acc[0] += w * val[0];
        acc[1] += w * val[1];
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(off);
    }
    Ok([acc[0] / wsum, acc[1] / wsum])
}

impl GradientGrid {
    pub fn new(
        width: usize,
        height: usize,
        scale: f64,
        gx: Vec<f64>,
        gy: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        check_dims(width, height, scale, &[gx.len(), gy.len(), mask.len()])?;
        for k in 0..mask.len() {
            if mask[k] && !(gx[k].is_finite() && gy[k].is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient at cell ({}, {})",
                    k % width,
                    k / width
                )));
            }
        }
        Ok(Self { width, height, scale, gx, gy, mask })
    }

    /// Builds a grid by evaluating `f(x_px, y_px)`; cells where `f` returns
    /// `None` are left off the mask.
    pub fn from_fn(
        width: usize,
        height: usize,
        scale: f64,
        mut f: impl FnMut(f64, f64) -> Option<(f64, f64)>,
    ) -> Result<Self> {
        let n = width * height;
        let (mut gx, mut gy, mut mask) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
        for j in 0..height {
            for i in 0..width {
                if let Some((a, b)) = f(i as f64 * scale, j as f64 * scale) {
                    let k = j * width + i;
                    gx[k] = a;
                    gy[k] = b;
                    mask[k] = true;
                }
            }
        }
        Self::new(width, height, scale, gx, gy, mask)
    }

    pub fn sample(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let [a, b] = bilinear(self.width, self.height, self.scale, &self.mask, x, y, |k| {
            [self.gx[k], self.gy[k]]
        })?;
        Ok((a, b))
    }
}

impl DepthGrid {
    pub fn new(width: usize, height: usize, scale: f64, z: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        check_dims(width, height, scale, &[z.len(), mask.len()])?;
        Ok(Self { width, height, scale, z, mask })
    }

    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        let [z, _] = bilinear(self.width, self.height, self.scale, &self.mask, x, y, |k| {
            [self.z[k], 0.0]
        })?;
        Ok(z)
    }

    pub fn masked_mean(&self) -> f64 {
        let (s, n) = self
            .z
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (z, _)| (s + z, n + 1));
        s / n.max(1) as f64
    }
}

fn is_single_component(width: usize, height: usize, mask: &[bool]) -> bool {
    let Some(start) = mask.iter().position(|&m| m) else {
        return false;
    };
    let mut seen = vec![false; mask.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut count = 1;
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % width, k / width);
        let mut visit = |n: usize| {
            if mask[n] && !seen[n] {
                seen[n] = true;
                count += 1;
                queue.push_back(n);
            }
        };
        if i > 0 {
            visit(k - 1);
        }
        if i + 1 < width {
            visit(k + 1);
        }
        if j > 0 {
            visit(k - width);
        }
        if j + 1 < height {
            visit(k + width);
        }
    }
    count == mask.iter().filter(|&&m| m).count()
}

/// Least-squares integration of a gradient field over its mask.
///
/// Each pair of 4-adjacent masked cells contributes the equation
/// `z_b − z_a = scale · (g_a + g_b) / 2` along the pair's axis; the normal
/// equations (a masked graph Laplacian with free boundary) are solved by
/// conjugate gradients and the result is shifted to zero mean over the mask.
pub fn integrate_depth(grid: &GradientGrid) -> Result<DepthGrid> {
    let (w, h) = (grid.width, grid.height);
    if !grid.mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask("mask is empty".into()));
    }
    if !is_single_component(w, h, &grid.mask) {
        return Err(Error::InvalidMask(
            "mask is not a single 4-connected component".into(),
        ));
    }

    // compact indexing of masked cells
    let mut index = vec![usize::MAX; w * h];
    let mut cells = Vec::new();
    for k in 0..w * h {
        if grid.mask[k] {
            index[k] = cells.len();
            cells.push(k);
        }
    }
    let n = cells.len();

    // edges (a, b, target difference z_b - z_a)
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for (a, &k) in cells.iter().enumerate() {
        let (i, j) = (k % w, k / w);
        if i + 1 < w && grid.mask[k + 1] {
            let d = grid.scale * 0.5 * (grid.gx[k] + grid.gx[k + 1]);
            edges.push((a, index[k + 1], d));
        }
        if j + 1 < h && grid.mask[k + w] {
            let d = grid.scale * 0.5 * (grid.gy[k] + grid.gy[k + w]);
            edges.push((a, index[k + w], d));
        }
    }

    // rhs = Dᵀ d, operator = DᵀD
    let mut rhs = vec![0.0; n];
    let mut degree = vec![0.0; n];
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b, d) in &edges {
        rhs[a] -= d;
        rhs[b] += d;
        degree[a] += 1.0;
        degree[b] += 1.0;
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for a in 0..n {
            let mut s = degree[a] * x[a];
            for &b in &adjacency[a] {
                s -= x[b];
            }
            out[a] = s;
        }
    };

    let z = conjugate_gradient(n, &rhs, apply, 1e-14, 20 * n + 100);

    let mean = z.iter().sum::<f64>() / n as f64;
    let mut full = vec![0.0; w * h];
    for (a, &k) in cells.iter().enumerate() {
        full[k] = z[a] - mean;
    }
    if full.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("integrated depth".into()));
    }
    DepthGrid::new(w, h, grid.scale, full, grid.mask.clone())
}

/// Plain CG on a symmetric positive semi-definite operator, with the iterate
/// kept orthogonal to the constant null space.
fn conjugate_gradient(
    n: usize,
    rhs: &[f64],
    apply: impl Fn(&[f64], &mut [f64]),
    rel_tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut b = rhs.to_vec();
    let mb = b.iter().sum::<f64>() / n as f64;
    b.iter_mut().for_each(|v| *v -= mb);

    let mut x = vec![0.0; n];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dotp(&r, &r);
    let stop = rel_tol * rel_tol * dotp(&b, &b).max(f64::MIN_POSITIVE);
    for _ in 0..max_iter {
        if rr <= stop {
            break;
        }
        apply(&p, &mut ap);
        let pap = dotp(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let step = rr / pap;
        for k in 0..n {
            x[k] += step * p[k];
            r[k] -= step * ap[k];
        }
        let rr_new = dotp(&r, &r);
        let beta = rr_new / rr;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        rr = rr_new;
    }
    x
}
