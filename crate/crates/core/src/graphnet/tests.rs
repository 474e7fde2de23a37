use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_difference_check;
use crate::geometry::Minutia3D;

fn random_template(n: usize, seed: u64) -> Template3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let minutiae = (0..n)
        .map(|_| {
            let p = [rng.gen_range(-300.0..300.0), rng.gen_range(-400.0..400.0), rng.gen_range(0.0..200.0)];
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let ph: f64 = rng.gen_range(0.3..2.8);
            let o = [25.0 * ph.sin() * th.cos(), 25.0 * ph.sin() * th.sin(), 25.0 * ph.cos()];
            Minutia3D { p, o }
        })
        .collect();
    Template3D {
        template_id: format!("t{seed}"),
        finger_id: "f".into(),
        pose_label: "front".into(),
        yaw: 0.0,
        minutiae,
    }
}

fn tiny_cfg(norm: Normalization) -> NetworkConfig {
    NetworkConfig {
        k: 4,
        edgeconv_widths: vec![4, 4, 6, 6, 8],
        concat_width: 28,
        stn_mlp_widths: vec![8, 8, 6, 6, 6],
        embed_mlp_widths: vec![12, EMBEDDING_DIM],
        normalization: norm,
        ..NetworkConfig::desk_3d()
    }
}

fn randomize_stn_head(p: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = p.get_mut("stn.mlp5.w").unwrap();
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
}

#[test]
fn output_has_embedding_width() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 1).unwrap();
    let e = correct_and_embed(&random_template(30, 2), &p.stn, &p.embed, &cfg).unwrap();
    assert_eq!(e.0.len(), EMBEDDING_DIM);
    assert!(e.is_finite());
}

#[test]
fn transformer_starts_at_identity() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 3).unwrap();
    let set = PaddedSet::from_template(&random_template(25, 4), &cfg, 200).unwrap();
    let pose = spatial_transform(&set, &p.stn, &cfg).unwrap();
    assert_eq!(pose, Pose::identity());
}

#[test]
fn padding_is_invisible() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 5).unwrap();
    let tpl = random_template(40, 6);
    let a = embed(&PaddedSet::from_template(&tpl, &cfg, 200).unwrap(), &p.embed, &cfg).unwrap();
    let b = embed(&PaddedSet::from_template(&tpl, &cfg, 400).unwrap(), &p.embed, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn permutation_invariant() {
    for norm in [Normalization::Instance, Normalization::None] {
        let cfg = NetworkConfig { normalization: norm, ..NetworkConfig::desk_3d() };
        let mut p = init_params(&cfg, 7).unwrap();
        randomize_stn_head(&mut p.stn, 8);
        let tpl = random_template(35, 9);
        let mut shuffled = tpl.clone();
        shuffled.minutiae.reverse();
        shuffled.minutiae.swap(3, 17);
        let a = correct_and_embed(&tpl, &p.stn, &p.embed, &cfg).unwrap();
        let b = correct_and_embed(&shuffled, &p.stn, &p.embed, &cfg).unwrap();
        let diff = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{norm:?}: {diff}");
    }
}

#[test]
fn four_minutiae_run() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 10).unwrap();
    let e = correct_and_embed(&random_template(4, 11), &p.stn, &p.embed, &cfg).unwrap();
    assert!(e.is_finite());
    let err = correct_and_embed(&random_template(3, 12), &p.stn, &p.embed, &cfg);
    assert!(err.is_err());
}

#[test]
fn neighbours_follow_layer_features() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 13).unwrap();
    let set = PaddedSet::from_template(&random_template(30, 14), &cfg, 200).unwrap();
    let (_, trace) = embed_traced(&set, &p.embed, &cfg).unwrap();
    assert_eq!(trace.neighbors.len(), NUM_EDGECONV);
    for l in 0..NUM_EDGECONV {
        assert_eq!(trace.neighbors[l], knn_indices(&trace.input[l], trace.k).unwrap());
    }
    assert_ne!(trace.neighbors[0], trace.neighbors[4]);
}

#[test]
fn batch_norm_switches_to_running_stats() {
    let cfg = NetworkConfig::desk_3d();
    let cfg = NetworkConfig { normalization: Normalization::Batch, ..cfg };
    let mut p = init_params(&cfg, 15).unwrap();
    let set = PaddedSet::from_template(&random_template(30, 16), &cfg, 200).unwrap();
    let before = embed(&set, &p.embed, &cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(input_tensor(&set, &cfg).unwrap());
    Builder::new(&cfg, Mode::Train).embedder(&mut g, &p.embed, x).unwrap();
    assert_eq!(g.norm_stats().len(), NUM_EDGECONV);
    update_running_stats(&mut p.embed, g.norm_stats(), 0.5);
    let after = embed(&set, &p.embed, &cfg).unwrap();
    assert_ne!(before, after);
}

#[test]
fn full_graph_gradients_match_finite_differences() {
    let planar = NetworkConfig {
        input_dim: 3,
        stn_mlp_widths: vec![8, 8, 6, 6, 3],
        angle_bounds: vec![std::f64::consts::PI],
        ..tiny_cfg(Normalization::Instance)
    };
    let cases = [
        (20, tiny_cfg(Normalization::Batch)),
        (21, tiny_cfg(Normalization::Instance)),
        (22, tiny_cfg(Normalization::None)),
        (23, planar),
    ];
    for (seed, cfg) in cases {
        let norm = cfg.normalization;
        let mut p = init_params(&cfg, seed).unwrap();
        randomize_stn_head(&mut p.stn, seed + 100);
        let set = PaddedSet::from_template(&random_template(8, seed + 200), &cfg, 8).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input_tensor(&set, &cfg).unwrap());
        let (_, e) = Builder::new(&cfg, Mode::Train).corrected(&mut g, &p.stn, &p.embed, x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(Tensor::row((0..EMBEDDING_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let m = g.mul(e, w).unwrap();
        let root = g.sum(m).unwrap();
        let grads = g.backward(root).unwrap();
        let stn_leaf = g.params().find(|(n, _)| n.starts_with("stn.ec1.w")).unwrap().1;
        assert!(grads.get(stn_leaf).unwrap().data().iter().any(|v| v.abs() > 0.0));
        let check = finite_difference_check(&g, root, 1e-4, Some(12)).unwrap();
        assert!(check.checked > 100);
        assert!(check.max_rel_error <= 1e-4, "{norm:?}: {}", check.max_rel_error);
    }
}
