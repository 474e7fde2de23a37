use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MatrixMode, OrientationMode};

pub const EMBEDDING_DIM: usize = 256;
pub const NUM_EDGECONV: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Statistics over the template's edges while training, running averages
    /// at inference.
    #[default]
    Batch,
    /// Statistics over the template's edges in both modes.
    Instance,
}

/// Shape and behaviour of one graph network (spatial transformer + embedder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub k: usize,
    /// 6 for 3D minutiae `(x, y, z, dx, dy, dz)`, 3 for `(x, y, θ)`.
    pub input_dim: usize,
    pub edgeconv_widths: Vec<usize>,
    pub concat_width: usize,
    pub stn_mlp_widths: Vec<usize>,
    pub embed_mlp_widths: Vec<usize>,
    /// 1-based EdgeConv layers that carry a residual connection.
    pub residual_layers: Vec<usize>,
    pub normalization: Normalization,
    /// Bounds of the predicted rotation angles, one per angle.
    pub angle_bounds: Vec<f64>,
    pub orientation_mode: OrientationMode,
    pub matrix_mode: MatrixMode,
    /// Subtract the positional centroid of the valid rows before scaling.
    pub center_input: bool,
    /// Multiplier applied to raw input positions before the network.
    pub input_scale: f64,
    /// Multiplier applied to 3D orientation vectors.
    pub orientation_scale: f64,
    pub norm_momentum: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full_3d()
    }
}

impl NetworkConfig {
    /// Full-width 3D network: EdgeConv 64-64-128-256-512 (concat 1024).
    pub fn full_3d() -> Self {
        Self {
            k: 20,
            input_dim: 6,
            edgeconv_widths: vec![64, 64, 128, 256, 512],
            concat_width: 1024,
            stn_mlp_widths: vec![512, 256, 128, 64, 6],
            embed_mlp_widths: vec![512, EMBEDDING_DIM],
            residual_layers: vec![1, 3],
            normalization: Normalization::Batch,
            angle_bounds: vec![FRAC_PI_2, PI, FRAC_PI_2],
            orientation_mode: OrientationMode::AsPrinted,
            matrix_mode: MatrixMode::ProperRotation,
            center_input: true,
            input_scale: 1.0,
            orientation_scale: 1.0,
            norm_momentum: 0.1,
        }
    }

    /// 2D-minutiae baseline with the same backbone and a 3-dof transformer.
    pub fn full_2d() -> Self {
        Self {
            input_dim: 3,
            stn_mlp_widths: vec![512, 256, 128, 64, 3],
            angle_bounds: vec![PI],
            ..Self::full_3d()
        }
    }

    /// Narrow variant sized for single-core CPU training runs.
    pub fn desk_3d() -> Self {
        Self {
            k: 10,
            edgeconv_widths: vec![16, 16, 32, 32, 64],
            concat_width: 160,
            stn_mlp_widths: vec![64, 32, 32, 16, 6],
            embed_mlp_widths: vec![128, EMBEDDING_DIM],
            normalization: Normalization::Instance,
            input_scale: 0.01,
            orientation_scale: 0.1,
            ..Self::full_3d()
        }
    }

    pub fn desk_2d() -> Self {
        Self {
            input_dim: 3,
            stn_mlp_widths: vec![64, 32, 32, 16, 3],
            angle_bounds: vec![PI],
            ..Self::desk_3d()
        }
    }

    pub fn is_3d(&self) -> bool {
        self.input_dim == 6
    }

    /// Number of pose outputs of the transformer head.
    pub fn pose_dim(&self) -> usize {
        if self.is_3d() {
            6
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_dim != 6 && self.input_dim != 3 {
            return err(format!("input_dim must be 6 or 3, got {}", self.input_dim));
        }
        if self.k == 0 {
            return err("k must be positive".into());
        }
        if self.edgeconv_widths.len() != NUM_EDGECONV || self.edgeconv_widths.contains(&0) {
            return err(format!("need {NUM_EDGECONV} positive EdgeConv widths"));
        }
        let sum: usize = self.edgeconv_widths.iter().sum();
        if sum != self.concat_width {
            return err(format!(
                "EdgeConv widths sum to {sum}, declared concat width is {}",
                self.concat_width
            ));
        }
        if self.stn_mlp_widths.len() != 5 || self.stn_mlp_widths.last() != Some(&self.pose_dim()) {
            return err(format!("transformer head needs 5 widths ending in {}", self.pose_dim()));
        }
        if self.embed_mlp_widths.len() != 2 || self.embed_mlp_widths.last() != Some(&EMBEDDING_DIM) {
            return err(format!("embedding head needs 2 widths ending in {EMBEDDING_DIM}"));
        }
        if self.residual_layers.iter().any(|&l| l == 0 || l > NUM_EDGECONV) {
            return err("residual layers are 1-based EdgeConv indices".into());
        }
        if self.angle_bounds.len() != self.pose_dim() / 2 || self.angle_bounds.iter().any(|b| !(*b > 0.0)) {
            return err(format!("need {} positive angle bounds", self.pose_dim() / 2));
        }
        if !(self.input_scale > 0.0) || !(self.orientation_scale > 0.0) {
            return err("input scales must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return err("norm_momentum must lie in [0, 1]".into());
        }
        Ok(())
    }
}
