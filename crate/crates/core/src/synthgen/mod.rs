//! Synthetic fingers: ellipsoid surfaces carrying tangent minutiae, posed
//! observations with visibility, noise and rendered grids, and contact-style
//! 2D impressions for pretraining.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose_2d, dot, mat_vec, norm, rotation_y, spherical_lift, DepthGrid, GradientGrid, MatrixMode,
    Minutia2D, Minutia3D, Template3D, Vec3, DEFAULT_ALPHA, MIN_TEMPLATE_MINUTIAE,
};

pub const IMAGE_WIDTH: usize = 800;
pub const IMAGE_HEIGHT: usize = 1000;
/// Pixels per grid cell.
pub const GRID_SCALE: usize = 8;
/// Image position of the finger centre.
pub const IMAGE_CENTER: [f64; 2] = [400.0, 500.0];
/// Grid cells whose unit normal has a smaller camera component are masked out.
pub const GRID_MIN_FACING: f64 = 0.05;

/// splitmix64 of `base ^ tag`, offset by `index`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerParams {
    pub minutiae: usize,
    /// Semi-axes along x (across the finger), y (along it) and z (depth), px.
    pub semi_axes: Vec3,
    /// Minutiae are kept within this fraction of the y semi-axis.
    pub length_fraction: f64,
    /// Minimum distance between two minutiae, px.
    pub min_spacing: f64,
    pub alpha: f64,
}

impl Default for FingerParams {
    fn default() -> Self {
        Self {
            minutiae: 50,
            semi_axes: [300.0, 450.0, 260.0],
            length_fraction: 0.8,
            min_spacing: 12.0,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl FingerParams {
    pub fn validate(&self) -> Result<()> {
        if !(20..=200).contains(&self.minutiae) {
            return Err(Error::invalid(format!("{} minutiae requested, need 20..=200", self.minutiae)));
        }
        if self.semi_axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::invalid("semi-axes must be positive"));
        }
        if !(self.length_fraction > 0.0 && self.length_fraction <= 1.0) {
            return Err(Error::invalid("length_fraction must lie in (0, 1]"));
        }
        if !(self.min_spacing >= 0.0) || !(self.alpha > 0.0) {
            return Err(Error::invalid("min_spacing must be ≥ 0 and alpha > 0"));
        }
        Ok(())
    }
}

/// One synthetic identity in its own frame (centre at the origin, z toward the
/// camera).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFinger {
    pub finger_id: String,
    pub semi_axes: Vec3,
    pub minutiae: Vec<Minutia3D>,
    pub seed: u64,
}

fn normalize3(v: Vec3) -> Vec3 {
    let n = norm(&v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

impl SyntheticFinger {
    /// Outward unit normal at a surface point (finger frame).
    pub fn normal_at(&self, p: &Vec3) -> Vec3 {
        let [a, b, c] = self.semi_axes;
        normalize3([p[0] / (a * a), p[1] / (b * b), p[2] / (c * c)])
    }

    /// `pᵀ D p − 1`; zero on the surface.
    pub fn surface_residual(&self, p: &Vec3) -> f64 {
        let [a, b, c] = self.semi_axes;
        (p[0] / a).powi(2) + (p[1] / b).powi(2) + (p[2] / c).powi(2) - 1.0
    }

    /// The frontal, noise-free template in image coordinates.
    pub fn canonical_template(&self) -> Template3D {
        let minutiae = self.minutiae.iter().map(|m| to_image(m.p, m.o)).collect();
        Template3D {
            template_id: format!("{}_canonical", self.finger_id),
            finger_id: self.finger_id.clone(),
            pose_label: pose_label_for_yaw(0.0).into(),
            yaw: 0.0,
            minutiae,
        }
    }
}

fn to_image(p: Vec3, o: Vec3) -> Minutia3D {
    Minutia3D { p: [p[0] + IMAGE_CENTER[0], p[1] + IMAGE_CENTER[1], p[2]], o }
}

pub fn finger_id_for(index: usize) -> String {
    format!("finger{index:05}")
}

/// Samples minutiae on the camera-facing half of the ellipsoid with uniformly
/// random directions in the tangent plane.
pub fn generate_finger(seed: u64, params: &FingerParams) -> Result<SyntheticFinger> {
    generate_finger_with_id(seed, params, format!("synthetic{seed}"))
}

pub fn generate_finger_with_id(seed: u64, params: &FingerParams, finger_id: String) -> Result<SyntheticFinger> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let [a, b, c] = params.semi_axes;
    let mut finger = SyntheticFinger { finger_id, semi_axes: params.semi_axes, minutiae: Vec::new(), seed };
    let max_attempts = 1000 * params.minutiae;
    let mut attempts = 0;
    while finger.minutiae.len() < params.minutiae {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::invalid(format!(
                "could not place {} minutiae {} px apart",
                params.minutiae, params.min_spacing
            )));
        }
        let u: Vec3 = [gauss.sample(&mut rng), gauss.sample(&mut rng), gauss.sample(&mut rng)];
        let omega = rng.gen_range(0.0..std::f64::consts::TAU);
        let n = norm(&u);
        if n < 1e-12 {
            continue;
        }
        let u = [u[0] / n, u[1] / n, u[2].abs() / n];
        if u[1].abs() > params.length_fraction || u[2] <= 0.0 {
            continue;
        }
        let p = [a * u[0], b * u[1], c * u[2]];
        if finger.minutiae.iter().any(|m| {
            let d = [m.p[0] - p[0], m.p[1] - p[1], m.p[2] - p[2]];
            norm(&d) < params.min_spacing
        }) {
            continue;
        }
        let nrm = finger.normal_at(&p);
        let ey = [0.0, 1.0, 0.0];
        let t1 = normalize3([ey[0] - nrm[1] * nrm[0], ey[1] - nrm[1] * nrm[1], ey[2] - nrm[1] * nrm[2]]);
        let t2 = cross(&nrm, &t1);
        let (s, co) = omega.sin_cos();
        let mut o = [0.0; 3];
        for k in 0..3 {
            o[k] = params.alpha * (co * t1[k] + s * t2[k]);
        }
        // remove the rounding-level normal component
        let along = dot(&o, &nrm);
        for k in 0..3 {
            o[k] -= along * nrm[k];
        }
        finger.minutiae.push(Minutia3D { p, o });
    }
    Ok(finger)
}

/// Direction class of a yaw angle: `front` within ±10°, else `left`/`right`.
pub fn pose_label_for_yaw(yaw: f64) -> &'static str {
    if yaw.abs() <= 10.0 {
        "front"
    } else if yaw < 0.0 {
        "left"
    } else {
        "right"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSpec {
    /// Degrees about the vertical (y) axis.
    pub yaw: f64,
    pub dropout: f64,
    pub position_sigma: f64,
    /// Radians, rotation about the surface normal.
    pub orientation_sigma: f64,
    pub seed: u64,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        Self { yaw: 0.0, dropout: 0.0, position_sigma: 0.0, orientation_sigma: 0.0, seed: 0 }
    }
}

impl ObservationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.yaw.abs() <= 60.0) {
            return Err(Error::invalid(format!("yaw {}° outside ±60°", self.yaw)));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 0.5]", self.dropout)));
        }
        if !(self.position_sigma >= 0.0) || !(self.orientation_sigma >= 0.0) {
            return Err(Error::invalid("noise sigmas must be non-negative"));
        }
        Ok(())
    }
}

/// A posed capture: the 3D template, its image-plane minutiae and the
/// rendered surface grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub template: Template3D,
    pub minutiae_2d: Vec<Minutia2D>,
    pub gradient: GradientGrid,
    pub depth: DepthGrid,
}

fn yaw_label(yaw: f64) -> String {
    if yaw.fract() == 0.0 {
        format!("{}", yaw as i64)
    } else {
        format!("{yaw}")
    }
}

/// Rotates the finger by `yaw`, drops minutiae facing away from the camera,
/// then applies jitter and dropout.
pub fn observe_template(finger: &SyntheticFinger, spec: &ObservationSpec) -> Result<Template3D> {
    spec.validate()?;
    let r = rotation_y(spec.yaw.to_radians());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pos = Normal::new(0.0, spec.position_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let ang = Normal::new(0.0, spec.orientation_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut minutiae = Vec::new();
    for m in &finger.minutiae {
        // draw every variate so visibility does not shift the stream
        let jitter = [pos.sample(&mut rng), pos.sample(&mut rng), pos.sample(&mut rng)];
        let turn: f64 = ang.sample(&mut rng);
        let keep = rng.gen::<f64>() >= spec.dropout;
        let n = mat_vec(&r, &finger.normal_at(&m.p));
        if n[2] <= 0.0 || !keep {
            continue;
        }
        let mut p = mat_vec(&r, &m.p);
        let mut o = mat_vec(&r, &m.o);
        if spec.position_sigma > 0.0 {
            for k in 0..3 {
                p[k] += jitter[k];
            }
        }
        if spec.orientation_sigma > 0.0 {
            let (s, c) = turn.sin_cos();
            let no = cross(&n, &o);
            for k in 0..3 {
                o[k] = c * o[k] + s * no[k];
            }
        }
        minutiae.push(to_image(p, o));
    }
    let template = Template3D {
        template_id: format!("{}_yaw{}", finger.finger_id, yaw_label(spec.yaw)),
        finger_id: finger.finger_id.clone(),
        pose_label: pose_label_for_yaw(spec.yaw).into(),
        yaw: spec.yaw,
        minutiae,
    };
    if template.len() < MIN_TEMPLATE_MINUTIAE {
        return Err(Error::TooFewNodes { have: template.len(), need: MIN_TEMPLATE_MINUTIAE });
    }
    Ok(template)
}

/// Depth and depth gradient of the visible surface of the yawed finger,
/// sampled every [`GRID_SCALE`] pixels.
pub fn render_grids(finger: &SyntheticFinger, yaw: f64) -> Result<(GradientGrid, DepthGrid)> {
    let r = rotation_y(yaw.to_radians());
    let [a, b, c] = finger.semi_axes;
    let d = [1.0 / (a * a), 1.0 / (b * b), 1.0 / (c * c)];
    // M = R D Rᵀ
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| r[i][k] * d[k] * r[j][k]).sum();
        }
    }
    let (w, h) = (IMAGE_WIDTH / GRID_SCALE, IMAGE_HEIGHT / GRID_SCALE);
    let mut z = vec![0.0; w * h];
    let mut depth_mask = vec![false; w * h];
    let gradient = GradientGrid::from_fn(w, h, GRID_SCALE as f64, |px, py| {
        let x = px - IMAGE_CENTER[0];
        let y = py - IMAGE_CENTER[1];
        let qa = m[2][2];
        let qb = 2.0 * (m[0][2] * x + m[1][2] * y);
        let qc = m[0][0] * x * x + 2.0 * m[0][1] * x * y + m[1][1] * y * y - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc <= 0.0 {
            return None;
        }
        let zs = (-qb + disc.sqrt()) / (2.0 * qa);
        let p = [x, y, zs];
        let n = [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
        ];
        if n[2] / norm(&n) < GRID_MIN_FACING {
            return None;
        }
        let k = (py as usize / GRID_SCALE) * w + px as usize / GRID_SCALE;
        z[k] = zs;
        depth_mask[k] = true;
        Some((-n[0] / n[2], -n[1] / n[2]))
    })?;
    let depth = DepthGrid::new(w, h, GRID_SCALE as f64, z, depth_mask)?;
    Ok((gradient, depth))
}

pub fn observe(finger: &SyntheticFinger, spec: &ObservationSpec) -> Result<Observation> {
    let template = observe_template(finger, spec)?;
    let (gradient, depth) = render_grids(finger, spec.yaw)?;
    let minutiae_2d = template.minutiae.iter().map(crate::geometry::project_to_2d).collect();
    Ok(Observation { template, minutiae_2d, gradient, depth })
}

/// A corpus of posed observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub fingers: usize,
    /// Index of the first finger; disjoint ranges give disjoint identities.
    pub first_finger: usize,
    pub poses: Vec<f64>,
    pub finger: FingerParams,
    pub dropout: f64,
    pub position_sigma: f64,
    pub orientation_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            fingers: 100,
            first_finger: 0,
            poses: vec![0.0, 20.0, 40.0],
            finger: FingerParams::default(),
            dropout: 0.1,
            position_sigma: 3.0,
            orientation_sigma: 0.1,
            seed: 0,
        }
    }
}

const FINGER_TAG: u64 = 1;
const OBSERVATION_TAG: u64 = 2;
const CONTACT_TAG: u64 = 3;
const IMPRESSION_TAG: u64 = 4;

pub fn dataset_finger(spec: &DatasetSpec, index: usize) -> Result<SyntheticFinger> {
    let seed = derive_seed(spec.seed, FINGER_TAG, index as u64);
    generate_finger_with_id(seed, &spec.finger, finger_id_for(index))
}

pub fn dataset_observation_spec(spec: &DatasetSpec, index: usize, pose: usize) -> ObservationSpec {
    ObservationSpec {
        yaw: spec.poses[pose],
        dropout: spec.dropout,
        position_sigma: spec.position_sigma,
        orientation_sigma: spec.orientation_sigma,
        seed: derive_seed(spec.seed, OBSERVATION_TAG, (index * 64 + pose) as u64),
    }
}

/// Templates for every finger and pose, finger-major.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Template3D>> {
    let mut out = Vec::with_capacity(spec.fingers * spec.poses.len());
    for index in spec.first_finger..spec.first_finger + spec.fingers {
        let finger = dataset_finger(spec, index)?;
        for pose in 0..spec.poses.len() {
            out.push(observe_template(&finger, &dataset_observation_spec(spec, index, pose))?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactParams {
    pub identities: usize,
    pub impressions: usize,
    pub finger: FingerParams,
    /// Uniform in-plane rotation range, ± degrees.
    pub rotation_deg: f64,
    /// Uniform translation range, ± px.
    pub translation: f64,
    pub position_sigma: f64,
    pub orientation_sigma: f64,
    /// Fraction of the identity's minutiae removed from each impression.
    pub dropout: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            identities: 200,
            impressions: 2,
            finger: FingerParams::default(),
            rotation_deg: 20.0,
            translation: 30.0,
            position_sigma: 2.0,
            orientation_sigma: 0.05,
            dropout: 0.15,
        }
    }
}

/// A flat impression; `source[i]` is the identity minutia behind `minutiae[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactImpression {
    pub identity: usize,
    pub impression: usize,
    pub minutiae: Vec<Minutia2D>,
    pub source: Vec<usize>,
}

impl ContactImpression {
    pub fn finger_id(&self) -> String {
        format!("contact{:05}", self.identity)
    }

    /// The impression lifted onto its sphere.
    pub fn lift(&self, c: f64, alpha: f64) -> Result<Template3D> {
        Ok(Template3D {
            template_id: format!("{}_imp{}", self.finger_id(), self.impression),
            finger_id: self.finger_id(),
            pose_label: "contact".into(),
            yaw: 0.0,
            minutiae: spherical_lift(&self.minutiae, c, alpha)?,
        })
    }
}

/// Contact-style impressions, coordinates relative to the print centre. Each
/// impression drops exactly `⌊dropout·N⌋` minutiae, so two impressions of an
/// identity share at least `N − 2⌊dropout·N⌋`.
pub fn generate_contact_set(seed: u64, params: &ContactParams) -> Result<Vec<ContactImpression>> {
    params.finger.validate()?;
    if !(0.0..0.5).contains(&params.dropout) {
        return Err(Error::invalid("contact dropout must lie in [0, 0.5)"));
    }
    let pos = Normal::new(0.0, params.position_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let ang = Normal::new(0.0, params.orientation_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(params.identities * params.impressions);
    for id in 0..params.identities {
        let finger = generate_finger(derive_seed(seed, CONTACT_TAG, id as u64), &params.finger)?;
        let master: Vec<Minutia2D> =
            finger.minutiae.iter().map(crate::geometry::project_to_2d).collect();
        let n = master.len();
        let n_drop = (params.dropout * n as f64).floor() as usize;
        for imp in 0..params.impressions {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, IMPRESSION_TAG, (id * 1024 + imp) as u64));
            let mut keep = sample(&mut rng, n, n - n_drop).into_vec();
            keep.sort_unstable();
            let theta = rng.gen_range(-params.rotation_deg..=params.rotation_deg).to_radians();
            let t = [
                rng.gen_range(-params.translation..=params.translation),
                rng.gen_range(-params.translation..=params.translation),
            ];
            let kept: Vec<Minutia2D> = keep.iter().map(|&i| master[i]).collect();
            let moved = apply_pose_2d(&kept, theta, t, MatrixMode::ProperRotation);
            let minutiae = moved
                .into_iter()
                .map(|m| {
                    let dx = pos.sample(&mut rng);
                    let dy = pos.sample(&mut rng);
                    let dt = ang.sample(&mut rng);
                    Minutia2D::new(m.x + dx, m.y + dy, m.theta + dt)
                })
                .collect();
            out.push(ContactImpression { identity: id, impression: imp, minutiae, source: keep });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
