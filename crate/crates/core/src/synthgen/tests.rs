use super::*;
use crate::geometry::{integrate_depth, lift_minutia_with, NormalConvention, DEFAULT_SPHERE_C};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn fingers_are_deterministic() {
    let p = FingerParams::default();
    assert_eq!(generate_finger(3, &p).unwrap(), generate_finger(3, &p).unwrap());
    assert_ne!(generate_finger(3, &p).unwrap(), generate_finger(4, &p).unwrap());
}

#[test]
fn minutiae_sit_on_the_surface_and_are_tangent() {
    let p = FingerParams { minutiae: 60, ..FingerParams::default() };
    for seed in 0..20 {
        let f = generate_finger(seed, &p).unwrap();
        assert_eq!(f.minutiae.len(), 60);
        for m in &f.minutiae {
            assert!(f.surface_residual(&m.p).abs() < 1e-12);
            let n = f.normal_at(&m.p);
            assert!((dot(&m.o, &n) / p.alpha).abs() < 1e-9);
            assert!((norm(&m.o) - p.alpha).abs() < 1e-9);
            assert!(m.p[2] > 0.0);
        }
    }
}

#[test]
fn minutiae_count_bounds() {
    let p = FingerParams { minutiae: 19, ..FingerParams::default() };
    assert!(generate_finger(0, &p).is_err());
    let p = FingerParams { minutiae: 201, ..FingerParams::default() };
    assert!(generate_finger(0, &p).is_err());
}

#[test]
fn frontal_noise_free_view_is_canonical() {
    let f = generate_finger(5, &FingerParams::default()).unwrap();
    let t = observe_template(&f, &ObservationSpec::default()).unwrap();
    assert_eq!(t.minutiae, f.canonical_template().minutiae);
}

#[test]
fn visibility_shrinks_with_yaw() {
    let f = generate_finger(6, &FingerParams::default()).unwrap();
    let mut last = usize::MAX;
    for yaw in (0..=60).step_by(5) {
        let spec = ObservationSpec { yaw: yaw as f64, ..Default::default() };
        let n = observe_template(&f, &spec).unwrap().len();
        assert!(n <= last, "yaw {yaw}: {n} > {last}");
        let neg = observe_template(&f, &ObservationSpec { yaw: -(yaw as f64), ..Default::default() }).unwrap();
        assert!(neg.len() <= f.minutiae.len());
        last = n;
    }
    let at40 = observe_template(&f, &ObservationSpec { yaw: 40.0, ..Default::default() }).unwrap();
    assert!(at40.len() < f.minutiae.len());
}

#[test]
fn invalid_observations_are_rejected() {
    let f = generate_finger(7, &FingerParams::default()).unwrap();
    assert!(observe(&f, &ObservationSpec { yaw: 61.0, ..Default::default() }).is_err());
    assert!(observe(&f, &ObservationSpec { dropout: 0.6, ..Default::default() }).is_err());
}

#[test]
fn observations_are_deterministic() {
    let f = generate_finger(8, &FingerParams::default()).unwrap();
    let spec = ObservationSpec { yaw: 20.0, dropout: 0.2, position_sigma: 3.0, orientation_sigma: 0.1, seed: 9 };
    assert_eq!(observe(&f, &spec).unwrap(), observe(&f, &spec).unwrap());
}

fn round_trip_errors(obs: &Observation, depth: &DepthGrid) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut ang) = (Vec::new(), Vec::new());
    for (m2, truth) in obs.minutiae_2d.iter().zip(&obs.template.minutiae) {
        let Ok(l) = lift_minutia_with(m2, &obs.gradient, depth, DEFAULT_ALPHA, NormalConvention::Physical) else {
            continue;
        };
        pos.push(norm(&[l.p[0] - truth.p[0], l.p[1] - truth.p[1], l.p[2] - truth.p[2]]));
        let c = (dot(&l.o, &truth.o) / (norm(&l.o) * norm(&truth.o))).clamp(-1.0, 1.0);
        ang.push(c.acos().to_degrees());
    }
    (pos, ang)
}

#[test]
fn lifting_rendered_grids_recovers_the_surface() {
    for (seed, yaw) in [(10, 0.0), (11, 20.0), (12, -40.0)] {
        let f = generate_finger(seed, &FingerParams::default()).unwrap();
        let obs = observe(&f, &ObservationSpec { yaw, ..Default::default() }).unwrap();
        let (pos, ang) = round_trip_errors(&obs, &obs.depth);
        assert!(pos.len() * 10 >= obs.template.len() * 9);
        assert!(median(pos) <= 2.0);
        assert!(median(ang) <= 5.0);

        // integrated depth, aligned by its free constant
        let mut z = integrate_depth(&obs.gradient).unwrap();
        let off = obs.depth.masked_mean() - z.masked_mean();
        z.z.iter_mut().for_each(|v| *v += off);
        let (pos, ang) = round_trip_errors(&obs, &z);
        assert!(median(pos) <= 2.0, "yaw {yaw}");
        assert!(median(ang) <= 5.0);
    }
}

#[test]
fn contact_sets() {
    let params = ContactParams { identities: 6, impressions: 3, ..Default::default() };
    let a = generate_contact_set(1, &params).unwrap();
    assert_eq!(a, generate_contact_set(1, &params).unwrap());
    assert_eq!(a.len(), 18);
    for imp in &a {
        let t = imp.lift(DEFAULT_SPHERE_C, DEFAULT_ALPHA).unwrap();
        let r2max = imp.minutiae.iter().map(|m| m.x * m.x + m.y * m.y).fold(0.0, f64::max);
        for m in &t.minutiae {
            let r2 = m.p.iter().map(|v| v * v).sum::<f64>();
            assert!((r2 - (r2max + DEFAULT_SPHERE_C)).abs() <= 1e-6 * r2);
        }
    }
    for x in &a {
        for y in &a {
            if x.identity == y.identity {
                let shared = x.source.iter().filter(|s| y.source.contains(s)).count();
                assert!(shared * 10 >= 7 * params.finger.minutiae);
            }
        }
    }
}

#[test]
fn dataset_layout() {
    let spec = DatasetSpec { fingers: 3, first_finger: 10, ..Default::default() };
    let d = generate_dataset(&spec).unwrap();
    assert_eq!(d.len(), 9);
    assert_eq!(d[0].finger_id, "finger00010");
    assert_eq!(d[4].template_id, "finger00011_yaw20");
    assert_eq!(d[5].pose_label, "right");
    assert_eq!(d, generate_dataset(&spec).unwrap());
}
