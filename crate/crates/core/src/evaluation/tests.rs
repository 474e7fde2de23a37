use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::Minutia3D;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn match_score_examples() {
    let a = [1.0, 2.0, -3.0];
    assert!(close(match_score(&a, &a).unwrap(), 1.0, 1e-15));
    assert!(close(match_score(&a, &[-1.0, -2.0, 3.0]).unwrap(), 0.0, 1e-15));
    assert_eq!(match_score(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.5);
    assert!(match_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(match_score(&[f64::NAN, 0.0], &[1.0, 0.0]).is_err());
    let b = [0.3, -7.0, 2.5];
    assert_eq!(match_score(&a, &b).unwrap(), match_score(&b, &a).unwrap());
}

#[test]
fn fusion_examples() {
    assert!(close(fuse_dual(0.5, 0.8).unwrap(), 0.62, 1e-15));
    for s1 in [0.0, 0.3, 1.0] {
        assert_eq!(fuse_dual(s1, 0.6).unwrap(), 0.6);
    }
    assert!(close(fuse_dual(0.7, 0.7).unwrap(), 0.7, 1e-15));
    assert!(fuse_dual(1.1, 0.5).is_err());
    assert!(fuse_dual(0.5, -0.1).is_err());
    assert_eq!(fuse_external(0.0, 0.0).unwrap(), 0.0);
    assert_eq!(fuse_external(500.0, 300.0).unwrap(), 1.5);
    assert!(fuse_external(-1.0, 3.0).is_err());
}

#[test]
fn eer_examples() {
    let e = compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
    assert_eq!(e.eer, 0.0);
    let same = [0.1, 0.4, 0.4, 0.7, 0.9];
    assert!(close(compute_eer(&same, &same).unwrap().eer, 0.5, 1e-12));
    assert!(compute_eer(&[], &[0.1]).is_err());
    assert!(compute_eer(&[0.1], &[]).is_err());
}

/// Quadratic re-count of both error rates at every candidate threshold.
fn eer_oracle(gen: &[f64], imp: &[f64]) -> f64 {
    let mut t: Vec<f64> = gen.iter().chain(imp).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = t
        .iter()
        .map(|&th| {
            let fmr = imp.iter().filter(|&&s| s >= th).count() as f64 / imp.len() as f64;
            let fnmr = gen.iter().filter(|&&s| s < th).count() as f64 / gen.len() as f64;
            (fmr, fnmr)
        })
        .collect();
    let k = rates.iter().position(|(a, b)| b - a >= 0.0).unwrap();
    let (fmr, fnmr) = rates[k];
    if fnmr == fmr {
        return fmr;
    }
    let (pa, pb) = rates[k - 1];
    let dp = pb - pa;
    let dk = fnmr - fmr;
    let a = dp / (dp - dk);
    pa + a * (fmr - pa)
}

#[test]
fn eer_matches_oracle_on_random_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let gen: Vec<f64> = (0..500).map(|_| (rng.gen::<f64>() * 0.7 + 0.3 * rng.gen::<f64>()).min(1.0)).collect();
        let imp: Vec<f64> = (0..500).map(|_| rng.gen::<f64>() * 0.8).collect();
        let e = compute_eer(&gen, &imp).unwrap();
        assert!(close(e.eer, eer_oracle(&gen, &imp), 1e-9));
        assert!((0.0..=0.5).contains(&e.eer));
    }
}

fn matrix(scores: Vec<f64>, np: usize, ng: usize, genuine_col: &[usize]) -> ScoreMatrix {
    ScoreMatrix {
        mode: ProtocolMode::Identification,
        probe_ids: (0..np).map(|p| format!("p{p}")).collect(),
        probe_fingers: genuine_col.iter().map(|g| format!("f{g}")).collect(),
        gallery_ids: (0..ng).map(|g| format!("g{g}")).collect(),
        gallery_fingers: (0..ng).map(|g| format!("f{g}")).collect(),
        missing: vec![false; scores.len()],
        scores,
    }
}

#[test]
fn cmc_examples() {
    let diag = matrix(vec![0.9, 0.1, 0.2, 0.8], 2, 2, &[0, 1]);
    assert_eq!(compute_cmc(&diag).unwrap().rank1, 1.0);
    let second = matrix(vec![0.5, 0.9, 0.1, 0.9, 0.5, 0.1], 2, 3, &[0, 1]);
    let c = compute_cmc(&second).unwrap();
    assert_eq!(c.points[0], (1, 0.0));
    assert_eq!(c.points[1], (2, 1.0));
    // ties go to the lower gallery index
    let tie = matrix(vec![0.5, 0.5], 1, 2, &[1]);
    assert_eq!(compute_cmc(&tie).unwrap().rank1, 0.0);
    let lost = matrix(vec![0.5, 0.5, 0.9, 0.1], 2, 2, &[7, 0]);
    let c = compute_cmc(&lost).unwrap();
    assert_eq!(c.excluded, vec!["p0".to_string()]);
    assert_eq!(c.rank1, 1.0);
}

#[test]
fn cmc_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let (np, ng) = (10, 8);
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..np * ng).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
        let cols: Vec<usize> = (0..np).map(|_| rng.gen_range(0..ng)).collect();
        let m = matrix(scores.clone(), np, ng, &cols);
        let c = compute_cmc(&m).unwrap();
        let mut ranks = Vec::new();
        for p in 0..np {
            let mut order: Vec<usize> = (0..ng).collect();
            order.sort_by(|&a, &b| scores[p * ng + b].total_cmp(&scores[p * ng + a]).then(a.cmp(&b)));
            ranks.push(order.iter().position(|&g| g == cols[p]).unwrap() + 1);
        }
        for &(r, h) in &c.points {
            let want = ranks.iter().filter(|&&k| k <= r).count() as f64 / np as f64;
            assert!(close(h, want, 1e-12));
        }
        assert!(c.points.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(c.points.last().unwrap().1, 1.0);
    }
}

/// Embeds a template as a one-hot of its finger number; templates with a
/// `bad` id fail.
struct OneHot;

impl Matcher for OneHot {
    fn name(&self) -> &str {
        "one-hot"
    }
    fn encode(&self, t: &Template3D) -> Result<Encoded> {
        if t.template_id.contains("bad") {
            return Err(Error::invalid("bad"));
        }
        let k: usize = t.finger_id[1..].parse().unwrap();
        let mut v = vec![0.0; 8];
        v[k] = 1.0;
        Ok(Encoded { template_id: t.template_id.clone(), codes: vec![v] })
    }
    fn score(&self, a: &Encoded, b: &Encoded) -> Result<f64> {
        match_score(&a.codes[0], &b.codes[0])
    }
}

fn dataset(fingers: usize, yaws: &[f64]) -> Vec<Template3D> {
    let mut out = Vec::new();
    for f in 0..fingers {
        for &y in yaws {
            out.push(Template3D {
                template_id: format!("f{f}_y{y}"),
                finger_id: format!("f{f}"),
                pose_label: "front".into(),
                yaw: y,
                minutiae: vec![Minutia3D { p: [0.0; 3], o: [25.0, 0.0, 0.0] }; 4],
            });
        }
    }
    out
}

#[test]
fn all_vs_all_counts() {
    let ds = dataset(3, &[0.0, 20.0]);
    let (report, m) = run_protocol(&ds, &ProtocolSpec::all_vs_all(), &OneHot).unwrap();
    assert_eq!(report.genuine_count + report.impostor_count, 6 * 5 / 2);
    assert_eq!(report.genuine_count, 3);
    assert_eq!(report.eer, 0.0);
    assert!(report.rank1.is_none());
    assert_eq!(m.entries().count(), 15);
    for p in 0..6 {
        for g in 0..6 {
            assert_eq!(m.get(p, g), m.get(g, p));
        }
    }
    // general closed form: F fingers × P poses
    let ds = dataset(5, &[0.0, 20.0, 40.0]);
    let (r, _) = run_protocol(&ds, &ProtocolSpec::all_vs_all(), &OneHot).unwrap();
    assert_eq!(r.genuine_count, 5 * 3);
    assert_eq!(r.impostor_count, 15 * 14 / 2 - 15);
}

#[test]
fn identification_with_perfect_matcher() {
    let ds = dataset(4, &[20.0, 0.0, -40.0]);
    let (r, m) = run_protocol(&ds, &ProtocolSpec::identification(), &OneHot).unwrap();
    assert_eq!(r.rank1, Some(1.0));
    assert_eq!(m.gallery_ids.len(), 4);
    assert!(m.gallery_ids.iter().all(|id| id.ends_with("_y0")));
    assert_eq!(r.probe_count, 8);
    assert!(r.cmc.iter().all(|p| p.1 == 1.0));
    let bad = ProtocolSpec { mode: ProtocolMode::Identification, gallery: Some(vec!["nope".into()]) };
    assert!(run_protocol(&ds, &bad, &OneHot).is_err());
}

#[test]
fn failed_encodings_score_zero() {
    let mut ds = dataset(3, &[0.0, 20.0]);
    ds[1].template_id = "bad".into();
    let (r, m) = run_protocol(&ds, &ProtocolSpec::all_vs_all(), &OneHot).unwrap();
    assert_eq!(r.failed_templates, vec!["bad".to_string()]);
    for g in 0..6 {
        if g != 1 {
            assert_eq!(m.get(1, g), 0.0);
            assert!(m.missing[g * 6 + 1]);
        }
    }
    // the failed genuine pair counts as a genuine score of 0
    assert_eq!(r.genuine_count, 3);
    assert!(r.eer > 0.0);
}

#[test]
fn curves_round_trip_and_parse_as_xml() {
    let ds = dataset(4, &[0.0, 20.0]);
    let (r, _) = run_protocol(&ds, &ProtocolSpec::identification(), &OneHot).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_curves(&r, dir.path()).unwrap();
    assert_eq!(files.len(), 6);
    let (k, pts) = read_curve_csv(&std::fs::read_to_string(dir.path().join("det.csv")).unwrap()).unwrap();
    assert_eq!(k, CurveKind::Det);
    assert_eq!(pts, r.det);
    let (_, pts) = read_curve_csv(&std::fs::read_to_string(dir.path().join("cmc.csv")).unwrap()).unwrap();
    assert!(pts.iter().all(|p| p.1 == 1.0));
    for f in files.iter().filter(|f| f.extension().unwrap() == "svg") {
        let text = std::fs::read_to_string(f).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }
    // awkward floats survive
    let pts = vec![(0.1 + 0.2, 1.0 / 3.0), (1e-300, 5e-324)];
    let (_, back) = read_curve_csv(&write_curve_csv(CurveKind::Roc, &pts)).unwrap();
    assert_eq!(back, pts);
}
