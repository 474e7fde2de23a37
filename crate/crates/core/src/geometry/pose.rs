use serde::{Deserialize, Serialize};

use super::{normalize_angle, Minutia2D, Minutia3D, Template3D, Vec3};

pub type Mat3 = [[f64; 3]; 3];

/// Rigid pose: translation plus the three Euler angles `(θ_t, ψ_t, φ_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub t: Vec3,
    pub euler: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }
}

/// How orientation vectors are moved by a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationMode {
    /// `o ↦ R·o + t`, the correction formula taken literally.
    #[default]
    AsPrinted,
    /// `o ↦ R·o`, a rigid motion of direction vectors.
    RotateOnly,
}

/// Matrix used by the 2D pose correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixMode {
    /// `[[-cos, sin], [sin, cos]]` (determinant −1).
    AsPrinted,
    /// `[[cos, -sin], [sin, cos]]`.
    #[default]
    ProperRotation,
}

/// First factor, parameterised by `θ_t`; acts in the xy-plane.
pub fn rotation_x(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Second factor, parameterised by `ψ_t`; acts in the xz-plane.
pub fn rotation_y(psi: f64) -> Mat3 {
    let (s, c) = psi.sin_cos();
    [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]]
}

/// Third factor, parameterised by `φ_t`; acts in the yz-plane.
pub fn rotation_z(phi: f64) -> Mat3 {
    let (s, c) = phi.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(r: &Mat3, v: &Vec3) -> Vec3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// `R = R_z(φ_t) · R_y(ψ_t) · R_x(θ_t)` for `euler = (θ_t, ψ_t, φ_t)`.
pub fn rotation_from_euler(euler: [f64; 3]) -> Mat3 {
    mat_mul(
        &mat_mul(&rotation_z(euler[2]), &rotation_y(euler[1])),
        &rotation_x(euler[0]),
    )
}

fn add(a: Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn apply_pose(tpl: &Template3D, pose: &Pose, mode: OrientationMode) -> Template3D {
    let r = rotation_from_euler(pose.euler);
    let minutiae = tpl
        .minutiae
        .iter()
        .map(|m| {
            let o = mat_vec(&r, &m.o);
            Minutia3D {
                p: add(mat_vec(&r, &m.p), &pose.t),
                o: match mode {
                    OrientationMode::AsPrinted => add(o, &pose.t),
                    OrientationMode::RotateOnly => o,
                },
            }
        })
        .collect();
    Template3D {
        minutiae,
        ..tpl.clone()
    }
}

pub fn apply_pose_2d(ms: &[Minutia2D], theta: f64, t: [f64; 2], mode: MatrixMode) -> Vec<Minutia2D> {
    let (s, c) = theta.sin_cos();
    let m = match mode {
        MatrixMode::AsPrinted => [[-c, s], [s, c]],
        MatrixMode::ProperRotation => [[c, -s], [s, c]],
    };
    ms.iter()
        .map(|p| Minutia2D {
            x: m[0][0] * p.x + m[0][1] * p.y + t[0],
            y: m[1][0] * p.x + m[1][1] * p.y + t[1],
            theta: normalize_angle(p.theta + theta),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn det(r: &Mat3) -> f64 {
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    #[test]
    fn zero_angles_give_identity() {
        let r = rotation_from_euler([0.0; 3]);
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn first_factor_turns_x_into_y() {
        let r = rotation_from_euler([PI / 2.0, 0.0, 0.0]);
        let v = mat_vec(&r, &[1.0, 0.0, 0.0]);
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
    }

    #[test]
    fn composed_rotation_matches_triple_product() {
        let (a, b, c) = (PI / 6.0, PI / 4.0, PI / 3.0);
        let r = rotation_from_euler([a, b, c]);
        // independent oracle: explicit sums over the three printed factors
        let (rx, ry, rz) = (rotation_x(a), rotation_y(b), rotation_z(c));
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += rz[i][k] * ry[k][l] * rx[l][j];
                    }
                }
                assert!((r[i][j] - s).abs() < 1e-12);
            }
        }
        assert!((det(&r) - 1.0).abs() < 1e-12);
    }

    fn tpl() -> Template3D {
        Template3D {
            template_id: "a".into(),
            finger_id: "f".into(),
            pose_label: "front".into(),
            yaw: 0.0,
            minutiae: (0..6)
                .map(|i| {
                    let f = i as f64;
                    Minutia3D {
                        p: [f * 10.0, 5.0 - f, f * f],
                        o: [25.0 * f.cos(), 25.0 * f.sin(), 0.0],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn identity_pose_is_a_no_op() {
        let t = tpl();
        for mode in [OrientationMode::AsPrinted, OrientationMode::RotateOnly] {
            assert_eq!(apply_pose(&t, &Pose::identity(), mode), t);
        }
    }

    #[test]
    fn translation_only_shifts_positions_in_rotate_only_mode() {
        let t = tpl();
        let pose = Pose { t: [10.0, 0.0, 0.0], euler: [0.0; 3] };
        let moved = apply_pose(&t, &pose, OrientationMode::RotateOnly);
        for (a, b) in t.minutiae.iter().zip(&moved.minutiae) {
            assert_eq!(b.p, [a.p[0] + 10.0, a.p[1], a.p[2]]);
            assert_eq!(a.o, b.o);
        }
        let printed = apply_pose(&t, &pose, OrientationMode::AsPrinted);
        for (a, b) in t.minutiae.iter().zip(&printed.minutiae) {
            assert_eq!(b.o, [a.o[0] + 10.0, a.o[1], a.o[2]]);
        }
    }

    #[test]
    fn two_d_pose_examples() {
        let ms = [Minutia2D::new(1.0, 0.0, 0.5), Minutia2D::new(-2.0, 3.0, 6.0)];
        let same = apply_pose_2d(&ms, 0.0, [0.0, 0.0], MatrixMode::ProperRotation);
        assert_eq!(same, ms.to_vec());

        let flipped = apply_pose_2d(&ms, 0.0, [0.0, 0.0], MatrixMode::AsPrinted);
        assert_eq!(flipped[0].x, -1.0);
        assert_eq!(flipped[1].x, 2.0);
        assert_eq!(flipped[1].y, 3.0);

        let turned = apply_pose_2d(&ms[..1], PI / 2.0, [5.0, 5.0], MatrixMode::ProperRotation);
        assert!((turned[0].x - 5.0).abs() < 1e-12 && (turned[0].y - 6.0).abs() < 1e-12);
        assert!((turned[0].theta - (0.5 + PI / 2.0)).abs() < 1e-12);
    }
}
