use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{ParamSet, Tensor};
use crate::geometry::{scale_orientation, Minutia3D, SphericalOrientation, Template3D};
use crate::graphnet::{init_params, NetworkConfig};

fn random_templates(n: usize, seed: u64) -> Vec<Template3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Template3D {
            template_id: format!("t{i}"),
            finger_id: format!("f{}", i / 3),
            pose_label: ["front", "left", "right"][i % 3].into(),
            yaw: rng.gen_range(-60.0..60.0),
            minutiae: (0..rng.gen_range(0..30))
                .map(|_| {
                    let s = SphericalOrientation { theta: rng.gen_range(0.0..6.28), phi: rng.gen_range(0.0..3.14) };
                    Minutia3D {
                        p: [rng.gen_range(0.0..800.0), rng.gen_range(0.0..1000.0), rng.gen_range(-300.0..300.0)],
                        o: scale_orientation(&s, 25.0).unwrap(),
                    }
                })
                .collect(),
        })
        .collect()
}

#[test]
fn templates_round_trip() {
    assert!(parse_templates("", "x").unwrap().is_empty());
    let ts = random_templates(100, 1);
    let text = templates_to_string(&ts, 25.0);
    let back = parse_templates(&text, "x").unwrap();
    assert_eq!(back.len(), ts.len());
    for (a, b) in ts.iter().zip(&back) {
        assert_eq!(a.template_id, b.template_id);
        assert_eq!(a.minutiae.len(), b.minutiae.len());
        for (ma, mb) in a.minutiae.iter().zip(&b.minutiae) {
            for (x, y) in ma.as_row().iter().zip(mb.as_row()) {
                assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
            }
        }
    }
    // writing the parsed templates reproduces the file
    assert_eq!(templates_to_string(&back, 25.0), text);
}

#[test]
fn template_errors_name_line_and_template() {
    let ts = random_templates(3, 2);
    let text = templates_to_string(&ts, 25.0);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = r#"{"template_id":"t1","finger_id":"f","pose_label":"front","yaw":0,"minutiae":[[1,2,3,4,5]]}"#.into();
    match parse_templates(&lines.join("\n"), "x") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let bad = r#"{"template_id":"short","finger_id":"f","pose_label":"front","yaw":0,"minutiae":[[1,2,3,4,5,6]]}"#;
    match parse_templates(bad, "x") {
        Err(Error::Template { template_id, .. }) => assert_eq!(template_id, "short"),
        other => panic!("{other:?}"),
    }
    let extra = r#"{"template_id":"t","finger_id":"f","pose_label":"front","yaw":0,"minutiae":[],"colour":1}"#;
    assert!(parse_templates(extra, "x").is_err());
}

#[test]
fn alpha_header_overrides_check() {
    let mut ts = random_templates(4, 3);
    for t in &mut ts {
        for m in &mut t.minutiae {
            m.o = m.o.map(|v| v * 2.0);
        }
    }
    assert!(parse_templates(&templates_to_string(&ts, 25.0), "x").is_err());
    let text = templates_to_string(&ts, 50.0);
    assert!(text.starts_with("{\"alpha\":50"));
    assert_eq!(parse_templates(&text, "x").unwrap().len(), 4);
}

#[test]
fn grids_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = GradientGrid::from_fn(7, 5, 8.0, |x, y| if x + y < 60.0 { Some((x * 0.01, -y / 3.0)) } else { None }).unwrap();
    let p = dir.path().join("g.csv");
    write_gradient_grid(&p, &g).unwrap();
    let back = read_gradient_grid(&p).unwrap();
    assert_eq!(back.mask, g.mask);
    assert_eq!(back.scale, 8.0);
    for (a, b) in g.gy.iter().zip(&back.gy) {
        assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
    }
    let d = DepthGrid::new(2, 2, 1.0, vec![1.0, 2.0, 3.0, 4.0], vec![true, true, false, true]).unwrap();
    let p = dir.path().join("d.csv");
    write_depth_grid(&p, &d).unwrap();
    assert_eq!(read_depth_grid(&p).unwrap(), d);
    // scale column may be omitted
    let text = "width,height\n2,1\ni,j,z,mask\n0,0,1.5,1\n1,0,2,0\n";
    assert_eq!(parse_depth_grid(text, "x").unwrap().scale, 1.0);
    for bad in [
        "width,height\n2,1\ni,j,z,mask\n0,0,1.5,1\n",
        "width,height\n2,1\ni,j,z,mask\n1,0,1.5,1\n0,0,2,0\n",
        "width,height\n2,1\ni,j,z,mask\n0,0,1.5,2\n1,0,2,0\n",
        "width,height\n2,1\ni,j,z,mask\n0,0,1.5,1\n1,0,2,0\n0,1,2,0\n",
    ] {
        assert!(parse_depth_grid(bad, "x").is_err(), "{bad}");
    }
}

use crate::geometry::{DepthGrid, GradientGrid};

#[test]
fn checkpoint_round_trip_at_f32() {
    let cfg = NetworkConfig::desk_3d();
    let p = init_params(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_network(&path, &cfg, &p).unwrap();
    let (cfg2, q) = load_network(&path).unwrap();
    assert_eq!(cfg2, cfg);
    for (a, b) in [(&p.stn, &q.stn), (&p.embed, &q.embed)] {
        assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
        for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
    }
    // a second save of the loaded network is byte-identical
    let path2 = dir.path().join("net2.ckpt");
    save_network(&path2, &cfg2, &q).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_damage() {
    let mut ps = ParamSet::new();
    ps.insert("a.w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    ps.insert("b.w", Tensor::row(vec![0.5; 40]));
    let ck = Checkpoint { config: "{}".into(), params: ps };
    let bytes = encode_checkpoint(&ck);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("version"));
    let cut = &bytes[..bytes.len() - 10];
    let msg = decode_checkpoint(cut).unwrap_err().to_string();
    assert!(msg.contains("b.w"), "{msg}");
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
}

#[test]
fn config_defaults_and_overrides() {
    let cfg = parse_config("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.pretrain.adam.lr, 0.001);
    assert_eq!(cfg.finetune.adam.beta1, 0.9);
    assert_eq!((cfg.pretrain.n_pad, cfg.finetune.n_pad), (200, 400));
    assert_eq!((cfg.pretrain.batch_size, cfg.finetune.batch_size), (128, 64));
    assert_eq!((cfg.pretrain.epochs, cfg.finetune.epochs), (80, 100));
    assert_eq!(cfg.alpha, 25.0);
    assert_eq!(cfg.sphere_c, 70000.0);
    assert!(parse_config("alpha = -1").is_err());
    let cfg = parse_config("[network]\nk = 10\n").unwrap();
    assert_eq!(cfg.network.k, 10);
    assert_eq!(cfg.network.edgeconv_widths, NetworkConfig::full_3d().edgeconv_widths);
    let cfg = parse_config("[network]\npreset = \"desk\"\n[finetune.adam]\nlr = 0.01\n").unwrap();
    assert_eq!(cfg.network, NetworkConfig::desk_3d());
    assert_eq!(cfg.finetune.adam.lr, 0.01);
    assert_eq!(cfg.finetune.adam.beta2, 0.999);
    let cfg = parse_config("alpha = 30").unwrap();
    assert_eq!(cfg.synth.finger.alpha, 30.0);
    let e = parse_config("[network]\nk = \"ten\"\n").unwrap_err().to_string();
    assert!(e.contains("network.k"), "{e}");
    let e = parse_config("[pretrain]\nbogus = 1\n").unwrap_err().to_string();
    assert!(e.contains("pretrain") && e.contains("bogus"), "{e}");
    assert!(parse_config("extra = 1").is_err());
}

#[test]
fn manifest_checks_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.jsonl"), "").unwrap();
    let rec = |id: &str, file: &str| ManifestRecord {
        template_id: id.into(),
        finger_id: "f".into(),
        pose_label: "front".into(),
        yaw: 0.0,
        template: file.into(),
        minutiae_2d: None,
        gradient: None,
        depth: None,
    };
    let m = DatasetManifest { name: "d".into(), seed: 1, records: vec![rec("a", "t.jsonl"), rec("b", "t.jsonl")] };
    let p = dir.path().join("manifest.json");
    save_manifest(&p, &m).unwrap();
    assert_eq!(load_manifest(&p).unwrap(), m);
    let dup = DatasetManifest { records: vec![rec("a", "t.jsonl"), rec("a", "t.jsonl")], ..m.clone() };
    save_manifest(&p, &dup).unwrap();
    assert!(load_manifest(&p).is_err());
    let missing = DatasetManifest { records: vec![rec("a", "nope.jsonl")], ..m };
    save_manifest(&p, &missing).unwrap();
    assert!(load_manifest(&p).is_err());
}

#[test]
fn scores_round_trip_and_external_rules() {
    let rows = vec![
        ScoreRow { probe_id: "a".into(), gallery_id: "b".into(), score: 0.1 + 0.2 },
        ScoreRow { probe_id: "a".into(), gallery_id: "c".into(), score: 0.0 },
    ];
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    write_scores(&p, &rows).unwrap();
    let back = parse_scores(&std::fs::read_to_string(&p).unwrap(), "s").unwrap();
    assert_eq!(back, rows);
    let ext = read_external_scores(&p).unwrap();
    assert_eq!(ext.get("b", "a"), Some(0.1 + 0.2));
    assert_eq!(ext.get("b", "c"), None);
    assert!(parse_scores("probe_id,gallery_id,score\na,b,x\n", "s").is_err());
    assert!(parse_scores("p,g,s\n", "s").is_err());
    std::fs::write(&p, "probe_id,gallery_id,score\na,b,1\nb,a,2\n").unwrap();
    assert!(read_external_scores(&p).is_err());
    std::fs::write(&p, "probe_id,gallery_id,score\na,b,-1\n").unwrap();
    assert!(read_external_scores(&p).is_err());
}
