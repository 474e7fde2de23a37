use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mat_vec, rotation_from_euler, Minutia3D, Template3D, MIN_TEMPLATE_MINUTIAE};

/// Random rigid motion and minutia dropping for one pose-gap class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentBranch {
    /// ± degrees for the three Euler factors `(θ, ψ, φ)`; `ψ` is the yaw
    /// about the vertical axis.
    pub rotation_deg: [f64; 3],
    /// ± pixels on every axis.
    pub translation: f64,
    pub drop_fraction: f64,
}

impl AugmentBranch {
    pub fn none() -> Self {
        Self { rotation_deg: [0.0; 3], translation: 0.0, drop_fraction: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_deg.iter().any(|r| !(*r >= 0.0)) || !(self.translation >= 0.0) {
            return Err(Error::Config("augmentation ranges must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(format!("drop fraction {} outside [0, 1)", self.drop_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Pairs whose yaw gap is at most this many degrees use `small_gap`.
    pub small_gap_max_yaw: f64,
    pub small_gap: AugmentBranch,
    pub large_gap: AugmentBranch,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            small_gap_max_yaw: 10.0,
            small_gap: AugmentBranch { rotation_deg: [30.0, 90.0, 30.0], translation: 300.0, drop_fraction: 0.25 },
            large_gap: AugmentBranch { rotation_deg: [0.0; 3], translation: 100.0, drop_fraction: 1.0 / 6.0 },
        }
    }
}

impl AugmentPolicy {
    pub fn branch(&self, yaw_gap: f64) -> &AugmentBranch {
        if yaw_gap.abs() <= self.small_gap_max_yaw {
            &self.small_gap
        } else {
            &self.large_gap
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.small_gap.validate()?;
        self.large_gap.validate()
    }
}

/// Rotates about the positional centroid (orientations rotate only),
/// translates, then removes `⌊drop_fraction·N⌋` minutiae, never going below
/// the usable minimum.
pub fn augment<R: Rng>(tpl: &Template3D, branch: &AugmentBranch, rng: &mut R) -> Result<Template3D> {
    tpl.check_usable()?;
    let mut angles = [0.0; 3];
    for (a, r) in angles.iter_mut().zip(branch.rotation_deg) {
        *a = rng.gen_range(-r..=r).to_radians();
    }
    let mut t = [0.0; 3];
    for v in t.iter_mut() {
        *v = rng.gen_range(-branch.translation..=branch.translation);
    }
    let n = tpl.len();
    let n_drop = ((branch.drop_fraction * n as f64).floor() as usize).min(n - MIN_TEMPLATE_MINUTIAE);
    let mut keep = sample(rng, n, n - n_drop).into_vec();
    keep.sort_unstable();

    let rotate = angles.iter().any(|a| *a != 0.0);
    let r = rotation_from_euler(angles);
    let mut c = [0.0; 3];
    if rotate {
        for m in &tpl.minutiae {
            for k in 0..3 {
                c[k] += m.p[k] / n as f64;
            }
        }
    }
    let minutiae = keep
        .into_iter()
        .map(|i| {
            let m = &tpl.minutiae[i];
            if !rotate {
                return Minutia3D { p: [m.p[0] + t[0], m.p[1] + t[1], m.p[2] + t[2]], o: m.o };
            }
            let rel = [m.p[0] - c[0], m.p[1] - c[1], m.p[2] - c[2]];
            let q = mat_vec(&r, &rel);
            Minutia3D { p: [q[0] + c[0] + t[0], q[1] + c[1] + t[1], q[2] + c[2] + t[2]], o: mat_vec(&r, &m.o) }
        })
        .collect();
    Ok(Template3D { minutiae, ..tpl.clone() })
}
