use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Template3D;

/// Two templates of one finger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenuinePair {
    pub a: usize,
    pub b: usize,
    pub class: String,
    /// Absolute yaw difference, degrees.
    pub yaw_gap: f64,
    pub same_pose: bool,
}

/// How genuine pairs are bucketed for sampling weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScheme {
    /// `gap<=10`, `gap10-45`, `gap>45` by absolute yaw difference.
    YawGap,
    /// `same-direction` or the sorted labels joined by `-` (`front-left`).
    Direction,
    /// Every pair in one class.
    Single(String),
}

pub fn yaw_gap_class(gap: f64) -> &'static str {
    let gap = gap.abs();
    if gap <= 10.0 {
        "gap<=10"
    } else if gap <= 45.0 {
        "gap10-45"
    } else {
        "gap>45"
    }
}

pub fn direction_class(a: &str, b: &str) -> String {
    if a == b {
        "same-direction".into()
    } else {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        format!("{x}-{y}")
    }
}

/// Every unordered pair of templates sharing a finger id, in index order.
pub fn genuine_pairs(templates: &[Template3D], scheme: &PairScheme) -> Vec<GenuinePair> {
    let mut by_finger: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in templates.iter().enumerate() {
        by_finger.entry(&t.finger_id).or_default().push(i);
    }
    let mut out = Vec::new();
    for i in 0..templates.len() {
        for &j in &by_finger[templates[i].finger_id.as_str()] {
            if j <= i {
                continue;
            }
            let (ta, tb) = (&templates[i], &templates[j]);
            let yaw_gap = (ta.yaw - tb.yaw).abs();
            let class = match scheme {
                PairScheme::YawGap => yaw_gap_class(yaw_gap).to_string(),
                PairScheme::Direction => direction_class(&ta.pose_label, &tb.pose_label),
                PairScheme::Single(c) => c.clone(),
            };
            out.push(GenuinePair { a: i, b: j, class, yaw_gap, same_pose: ta.pose_label == tb.pose_label });
        }
    }
    out
}

/// Sampling multiplicity per pair class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairWeightTable(pub BTreeMap<String, usize>);

impl Default for PairWeightTable {
    fn default() -> Self {
        Self::yaw_gap()
    }
}

impl PairWeightTable {
    /// ×3 up to 10°, ×6 up to 45°, ×3 beyond.
    pub fn yaw_gap() -> Self {
        Self(BTreeMap::from([("gap<=10".into(), 3), ("gap10-45".into(), 6), ("gap>45".into(), 3)]))
    }

    /// ×3 same direction, ×2 front–left and front–right, ×1 left–right.
    pub fn direction() -> Self {
        Self(BTreeMap::from([
            ("same-direction".into(), 3),
            ("front-left".into(), 2),
            ("front-right".into(), 2),
            ("left-right".into(), 1),
        ]))
    }

    pub fn uniform<S: Into<String>>(classes: impl IntoIterator<Item = S>) -> Self {
        Self(classes.into_iter().map(|c| (c.into(), 1)).collect())
    }

    pub fn multiplicity(&self, class: &str) -> Result<usize> {
        self.0.get(class).copied().ok_or_else(|| Error::UnknownPoseClass(class.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|(_, &m)| m == 0) {
            Some((c, _)) => Err(Error::Config(format!("multiplicity of `{c}` must be at least 1"))),
            None => Ok(()),
        }
    }
}

/// Indices into `pairs`, each repeated by its class multiplicity, shuffled.
pub fn build_epoch<R: Rng>(pairs: &[GenuinePair], table: &PairWeightTable, rng: &mut R) -> Result<Vec<usize>> {
    table.validate()?;
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let m = table.multiplicity(&p.class)?;
        out.extend(std::iter::repeat(i).take(m));
    }
    out.shuffle(rng);
    Ok(out)
}
