use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{MatrixMode, OrientationMode};

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output entry contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Var {
    let t = g.value(x).clone();
    let w = g.constant(Tensor::new(
        t.shape().to_vec(),
        (0..t.len()).map(|_| rng.gen_range(0.5..1.5)).collect(),
    ));
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

fn check(g: &Graph, root: Var) -> GradCheck {
    let r = finite_difference_check(g, root, 1e-6, None).unwrap();
    assert!(r.checked > 0, "nothing compared");
    r
}

#[test]
fn linear_identity_is_passthrough() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]));
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = g.constant(Tensor::matrix(3, 3, eye));
    let b = g.constant(Tensor::row(vec![0.0; 3]));
    let y = g.matmul(x, w).unwrap();
    let y = g.add_row(y, b).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![-1.0, 2.0]));
    let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
    assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
}

#[test]
fn concat_shape_rule() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 5]));
    let c = g.concat_cols(&[a, b]).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 8]);
    let d = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.concat_cols(&[a, d]), Err(crate::Error::Shape { .. })));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("node 2") && msg.contains("matmul"), "{msg}");
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 2.0]), None);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn max_routes_to_argmax_lowest_index_on_tie() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 5.0, 2.0, 4.0]), None);
    let m = g.max_rows(x).unwrap();
    assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    let s = g.sum(m).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]), None);
    assert!(g.backward(x).is_err());
}

#[test]
fn linear_layer_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&mut rng, 4, 3), Some("x".into()));
    let w = g.leaf(rand_tensor(&mut rng, 3, 5), Some("w".into()));
    let b = g.leaf(rand_tensor(&mut rng, 1, 5), Some("b".into()));
    let y = g.matmul(x, w).unwrap();
    let y = g.add_row(y, b).unwrap();
    let s = g.sum(y).unwrap();
    assert!(check(&g, s).max_rel_error <= 1e-7);
}

#[test]
fn tie_coordinates_are_excluded() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::matrix(2, 1, vec![1.0, 1.0]), None);
    let m = g.max_rows(x).unwrap();
    let s = g.sum(m).unwrap();
    let r = finite_difference_check(&g, s, 1e-6, None).unwrap();
    // perturbing the losing tied entry upward flips the winner
    assert!(r.skipped_kinks >= 1);
    assert!(r.max_rel_error <= 1e-7);
}

#[test]
fn norm_output_is_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, 50, 4));
    let gamma = g.constant(Tensor::row(vec![1.0; 4]));
    let beta = g.constant(Tensor::row(vec![0.0; 4]));
    let y = g.norm_batch(x, gamma, beta, "n").unwrap();
    let t = g.value(y);
    for j in 0..4 {
        let col: Vec<f64> = (0..50).map(|i| t.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
    }
}

#[test]
fn forward_backward_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 6, 4), None);
        let w = g.leaf(rand_tensor(&mut rng, 4, 4), None);
        let y = g.matmul(x, w).unwrap();
        let y = g.leaky_relu(y, LEAKY_SLOPE).unwrap();
        let m = g.max_rows(y).unwrap();
        let s = g.sum(m).unwrap();
        let gr = g.backward(s).unwrap();
        (g.value(s).clone(), gr.get(x).unwrap().clone(), gr.get(w).unwrap().clone())
    };
    let a = build();
    let b = build();
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

/// Every differentiable op under a random shape, checked against central
/// differences.
fn per_op_check(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(2..6);
    let c = rng.gen_range(1..5);
    let mut out = Vec::new();

    let mut run = |name: &'static str, build: &dyn Fn(&mut Graph, &mut ChaCha8Rng) -> Var| {
        let mut g = Graph::new();
        let mut local = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(name.len() as u64));
        let y = build(&mut g, &mut local);
        let s = weighted_sum(&mut g, y, &mut local);
        out.push((name, check(&g, s).max_rel_error));
    };

    run("matmul", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let b = g.leaf(rand_tensor(rng, c, r + 1), None);
        g.matmul(a, b).unwrap()
    });
    run("add_row", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let b = g.leaf(rand_tensor(rng, 1, c), None);
        g.add_row(a, b).unwrap()
    });
    run("add_sub_mul_scale", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let b = g.leaf(rand_tensor(rng, r, c), None);
        let s = g.add(a, b).unwrap();
        let s = g.mul(s, a).unwrap();
        let d = g.sub(s, b).unwrap();
        let d = g.scale(d, -1.7).unwrap();
        let d = g.add(d, a).unwrap();
        g.add_scalar(d, 0.3).unwrap()
    });
    run("leaky_relu", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        g.leaky_relu(a, LEAKY_SLOPE).unwrap()
    });
    run("gather_rows", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let idx: Vec<usize> = (0..2 * r).map(|_| rng.gen_range(0..r)).collect();
        g.gather_rows(a, idx).unwrap()
    });
    run("edge_sum", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let b = g.leaf(rand_tensor(rng, r, c), None);
        let idx: Vec<usize> = (0..3 * r).map(|_| rng.gen_range(0..r)).collect();
        g.edge_sum(a, b, idx, 3).unwrap()
    });
    run("slices", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c + 1), None);
        let s = g.slice_rows(a, 1, r).unwrap();
        g.slice_cols(s, 1, c + 1).unwrap()
    });
    run("group_max", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, 2 * r, c), None);
        g.group_max(a, 2).unwrap()
    });
    run("mean_rows", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        g.mean_rows(a).unwrap()
    });
    run("concat", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let b = g.leaf(rand_tensor(rng, r, 2), None);
        g.concat_cols(&[a, b, a]).unwrap()
    });
    run("norm_batch", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r + 2, c), None);
        let gm = g.leaf(rand_tensor(rng, 1, c), None);
        let bt = g.leaf(rand_tensor(rng, 1, c), None);
        g.norm_batch(a, gm, bt, "n").unwrap()
    });
    run("norm_fixed", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        let gm = g.leaf(rand_tensor(rng, 1, c), None);
        let bt = g.leaf(rand_tensor(rng, 1, c), None);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        g.norm_fixed(a, gm, bt, &mean, &var).unwrap()
    });
    run("bounded_tanh", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        g.bounded_tanh(a, (0..c).map(|j| 1.0 + j as f64).collect()).unwrap()
    });
    run("row_norm", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c), None);
        g.row_norm(a).unwrap()
    });
    run("normalize_rows", &|g, rng| {
        let a = g.leaf(rand_tensor(rng, r, c + 1), None);
        g.normalize_rows(a).unwrap()
    });
    for mode in [OrientationMode::AsPrinted, OrientationMode::RotateOnly] {
        run("rigid3", &|g, rng| {
            let a = g.leaf(rand_tensor(rng, r, 6), None);
            let p = g.leaf(rand_tensor(rng, 1, 6), None);
            g.rigid3(a, p, mode).unwrap()
        });
    }
    for mode in [MatrixMode::AsPrinted, MatrixMode::ProperRotation] {
        run("rigid2", &|g, rng| {
            // angles kept away from the wrap point so ±ε stays continuous
            let mut t = rand_tensor(rng, r, 3);
            for i in 0..r {
                t.data_mut()[i * 3 + 2] = rng.gen_range(1.0..5.0);
            }
            let a = g.leaf(t, None);
            let p = g.leaf(Tensor::row(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)]), None);
            g.rigid2(a, p, mode).unwrap()
        });
    }
    out
}

#[test]
fn every_op_passes_gradient_check_over_fifty_seeds() {
    for seed in 0..50 {
        for (name, err) in per_op_check(seed) {
            assert!(err <= 1e-4, "seed {seed}: {name} relative error {err}");
        }
    }
}
