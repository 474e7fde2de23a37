use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::PaddedSet;

/// For each row of `features`, the `k` nearest other rows by Euclidean
/// distance, flattened row-major (`N·k` indices). Ties go to the lower index.
pub fn knn_indices(features: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if n < k + 1 {
        return Err(Error::TooFewNodes { have: n, need: k + 1 });
    }
    let d = features.cols();
    let data = features.data();
    // squared norms for ‖a‖² + ‖b‖² − 2ab would lose exactness; use direct sums
    let mut out = Vec::with_capacity(n * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dist.clear();
        let a = &data[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let b = &data[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            dist.push((s, j));
        }
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            dist.truncate(k);
        }
        dist.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        out.extend(dist.iter().take(k).map(|&(_, j)| j));
    }
    Ok(out)
}

/// Directed k-nearest-neighbour edges `(source, target)` among the valid rows
/// of a padded set, in padded-row numbering.
pub fn knn_graph(set: &PaddedSet, k: usize) -> Result<Vec<(usize, usize)>> {
    let (compact, rows) = set.compact();
    let idx = knn_indices(&compact, k)?;
    let mut edges = Vec::with_capacity(idx.len());
    for (i, &src) in rows.iter().enumerate() {
        for &j in &idx[i * k..(i + 1) * k] {
            edges.push((src, rows[j]));
        }
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let t = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]);
        assert_eq!(knn_indices(&t, 1).unwrap(), vec![1, 0, 1]);
    }

    #[test]
    fn too_few_nodes() {
        let t = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]);
        assert!(matches!(knn_indices(&t, 3), Err(Error::TooFewNodes { have: 3, need: 4 })));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let t = Tensor::matrix(3, 1, vec![0.0, -1.0, 1.0]);
        assert_eq!(&knn_indices(&t, 1).unwrap()[..1], &[1]);
    }

    #[test]
    fn padding_rows_never_appear() {
        let mut rows = vec![[0.0; 6]; 3];
        rows[1][0] = 1.0;
        rows[2][0] = 3.0;
        let set = PaddedSet::from_rows(&rows, 6, 10).unwrap();
        let e = knn_graph(&set, 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (2, 1)]);
    }
}
