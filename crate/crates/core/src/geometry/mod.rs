//! Closed-form 3D minutiae geometry: orientation lifting from surface
//! gradients, depth integration, spherical lifting of contact prints and
//! rigid pose transforms.

mod depth;
mod pose;

pub use depth::{integrate_depth, DepthGrid, GradientGrid};
pub use pose::{
    apply_pose, apply_pose_2d, mat_mul, mat_vec, rotation_from_euler, rotation_x, rotation_y, rotation_z, Mat3,
    MatrixMode, OrientationMode, Pose,
};

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Orientation scale used for 3D minutiae direction vectors.
pub const DEFAULT_ALPHA: f64 = 25.0;

/// Radicand offset of the spherical contact-print lift, in px².
pub const DEFAULT_SPHERE_C: f64 = 70000.0;

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can return TAU itself for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minutia2D {
    pub x: f64,
    pub y: f64,
    /// Full-angle direction in `[0, 2π)`.
    pub theta: f64,
}

impl Minutia2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }
}

/// Azimuth `theta` and polar angle `phi ∈ [0, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalOrientation {
    pub theta: f64,
    pub phi: f64,
}

impl SphericalOrientation {
    pub fn unit_vector(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [sp * ct, sp * st, cp]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Minutia3D {
    /// Position `(x, y, z)` in pixels.
    pub p: Vec3,
    /// Direction scaled to length alpha.
    pub o: Vec3,
}

impl Minutia3D {
    pub fn as_row(&self) -> [f64; 6] {
        [self.p[0], self.p[1], self.p[2], self.o[0], self.o[1], self.o[2]]
    }
}

/// One capture: an id-tagged set of 3D minutiae with its pose label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template3D {
    pub template_id: String,
    pub finger_id: String,
    pub pose_label: String,
    /// Yaw of the capture in degrees (0 for frontal).
    pub yaw: f64,
    pub minutiae: Vec<Minutia3D>,
}

/// Templates with fewer minutiae than this are refused by the embedder.
pub const MIN_TEMPLATE_MINUTIAE: usize = 4;

impl Template3D {
    pub fn len(&self) -> usize {
        self.minutiae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.minutiae.is_empty()
    }

    pub fn check_usable(&self) -> Result<()> {
        if self.minutiae.len() < MIN_TEMPLATE_MINUTIAE {
            return Err(Error::Template {
                template_id: self.template_id.clone(),
                detail: format!(
                    "{} minutiae, at least {} required",
                    self.minutiae.len(),
                    MIN_TEMPLATE_MINUTIAE
                ),
            });
        }
        Ok(())
    }
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Lifts a 2D direction onto the tangent plane of the surface with depth
/// gradient `g = (∂z/∂x, ∂z/∂y)`, keeping the azimuth.
///
/// Solves `sinφ cosθ g_x + sinφ sinθ g_y + cosφ = 0` on the branch
/// `sin φ ≥ 0`, so the projection onto the image plane points along
/// `(cos θ, sin θ)`.
pub fn solve_3d_orientation(theta2d: f64, g: (f64, f64)) -> SphericalOrientation {
    let (st, ct) = theta2d.sin_cos();
    let s = g.0 * ct + g.1 * st;
    // (sin φ, cos φ) ∝ (1, -s)
    let phi = if s == 0.0 { PI / 2.0 } else { 1.0f64.atan2(-s) };
    SphericalOrientation {
        theta: theta2d,
        phi,
    }
}

pub fn scale_orientation(s: &SphericalOrientation, alpha: f64) -> Result<Vec3> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "orientation scale must be positive, got {alpha}"
        )));
    }
    let u = s.unit_vector();
    Ok([alpha * u[0], alpha * u[1], alpha * u[2]])
}

/// Which vector the lifted orientation is made orthogonal to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalConvention {
    /// `(g_x, g_y, 1)`.
    #[default]
    AsPrinted,
    /// `(−g_x, −g_y, 1)`, the geometric normal of the depth surface `z(x, y)`.
    Physical,
}

/// Lifts an image-space minutia using gradient and depth grids sampled at its
/// position.
pub fn lift_minutia(
    m: &Minutia2D,
    grid: &GradientGrid,
    depth: &DepthGrid,
    alpha: f64,
) -> Result<Minutia3D> {
    lift_minutia_with(m, grid, depth, alpha, NormalConvention::AsPrinted)
}

pub fn lift_minutia_with(
    m: &Minutia2D,
    grid: &GradientGrid,
    depth: &DepthGrid,
    alpha: f64,
    convention: NormalConvention,
) -> Result<Minutia3D> {
    let (gx, gy) = grid.sample(m.x, m.y)?;
    let z = depth.sample(m.x, m.y)?;
    let g = match convention {
        NormalConvention::AsPrinted => (gx, gy),
        NormalConvention::Physical => (-gx, -gy),
    };
    let o = scale_orientation(&solve_3d_orientation(m.theta, g), alpha)?;
    Ok(Minutia3D {
        p: [m.x, m.y, z],
        o,
    })
}

/// Projects contact-style minutiae (coordinates relative to the print centre)
/// onto a sphere whose radius² is `max r² + c`.
///
/// Orientations are lifted with `g = (x/z, y/z)`, for which `(g_x, g_y, 1)` is
/// parallel to the sphere's outward normal, so every direction is tangent.
pub fn spherical_lift(ms: &[Minutia2D], c: f64, alpha: f64) -> Result<Vec<Minutia3D>> {
    if ms.is_empty() {
        return Err(Error::invalid("spherical lift of an empty minutiae set"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid(format!("sphere offset c must be positive, got {c}")));
    }
    let r2max = ms
        .iter()
        .map(|m| m.x * m.x + m.y * m.y)
        .fold(0.0f64, f64::max);
    ms.iter()
        .map(|m| {
            let z = (r2max + c - m.x * m.x - m.y * m.y).sqrt();
            let g = (m.x / z, m.y / z);
            let o = scale_orientation(&solve_3d_orientation(m.theta, g), alpha)?;
            Ok(Minutia3D {
                p: [m.x, m.y, z],
                o,
            })
        })
        .collect()
}

/// Orthographic projection of a 3D minutia back to the image plane.
pub fn project_to_2d(m: &Minutia3D) -> Minutia2D {
    Minutia2D::new(m.p[0], m.p[1], m.o[1].atan2(m.o[0]))
}
