//! Dynamic EdgeConv graph network over minutiae sets: a spatial transformer
//! predicting a rigid pose and an embedder producing the 256-d code.

mod config;
mod knn;

pub use config::{NetworkConfig, Normalization, EMBEDDING_DIM, NUM_EDGECONV};
pub use knn::{knn_graph, knn_indices};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormStats, ParamSet, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geometry::{project_to_2d, Pose, Template3D, MIN_TEMPLATE_MINUTIAE};

pub const STN_PREFIX: &str = "stn";
pub const EMBED_PREFIX: &str = "emb";

/// Fixed-length code of one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Minutiae rows padded to a fixed count, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSet {
    pub features: Tensor,
    pub valid: Vec<bool>,
}

impl PaddedSet {
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], dim: usize, n_pad: usize) -> Result<Self> {
        if rows.len() > n_pad {
            return Err(Error::invalid(format!("{} minutiae exceed padding {n_pad}", rows.len())));
        }
        let mut data = vec![0.0; n_pad * dim];
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::invalid(format!("row {i} has {} features, expected {dim}", r.len())));
            }
            data[i * dim..(i + 1) * dim].copy_from_slice(r);
        }
        let mut valid = vec![false; n_pad];
        valid[..rows.len()].iter_mut().for_each(|v| *v = true);
        Ok(Self { features: Tensor::matrix(n_pad, dim, data), valid })
    }

    pub fn from_template(tpl: &Template3D, cfg: &NetworkConfig, n_pad: usize) -> Result<Self> {
        Self::from_rows(&template_rows(tpl, cfg), cfg.input_dim, n_pad)
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Valid rows packed densely, with their padded-row indices.
    pub fn compact(&self) -> (Tensor, Vec<usize>) {
        let d = self.features.cols();
        let rows: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(self.features.row_slice(r));
        }
        (Tensor::matrix(rows.len(), d, data), rows)
    }
}

/// Network input rows of a template: `(x, y, z, dx, dy, dz)` for 3D networks,
/// the orthographic `(x, y, θ)` for 2D ones.
pub fn template_rows(tpl: &Template3D, cfg: &NetworkConfig) -> Vec<Vec<f64>> {
    tpl.minutiae
        .iter()
        .map(|m| {
            if cfg.is_3d() {
                m.as_row().to_vec()
            } else {
                let p = project_to_2d(m);
                vec![p.x, p.y, p.theta]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Inputs and neighbour lists seen by each EdgeConv layer.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    pub input: Vec<Tensor>,
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
}

/// Parameters of both sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub stn: ParamSet,
    pub embed: ParamSet,
}

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt();
    Tensor::matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn init_backbone(p: &mut ParamSet, prefix: &str, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) {
    let mut d_in = cfg.input_dim;
    for (l, &w) in cfg.edgeconv_widths.iter().enumerate() {
        let name = format!("{prefix}.ec{}", l + 1);
        p.insert(format!("{name}.w"), kaiming(rng, 2 * d_in, w));
        if cfg.normalization == Normalization::None {
            p.insert(format!("{name}.b"), Tensor::zeros(&[1, w]));
        } else {
            p.insert(format!("{name}.norm.gamma"), Tensor::filled(&[1, w], 1.0));
            p.insert(format!("{name}.norm.beta"), Tensor::zeros(&[1, w]));
        }
        if cfg.normalization == Normalization::Batch {
            p.insert(format!("{name}.norm.running_mean"), Tensor::zeros(&[1, w]));
            p.insert(format!("{name}.norm.running_var"), Tensor::filled(&[1, w], 1.0));
        }
        if cfg.residual_layers.contains(&(l + 1)) && d_in != w {
            p.insert(format!("{name}.skip.w"), kaiming(rng, d_in, w));
        }
        d_in = w;
    }
}

fn init_head(p: &mut ParamSet, prefix: &str, d_in: usize, widths: &[usize], rng: &mut ChaCha8Rng, zero_last: bool) {
    let mut d = d_in;
    for (i, &w) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        let weight = if last && zero_last { Tensor::zeros(&[d, w]) } else { kaiming(rng, d, w) };
        p.insert(format!("{prefix}.mlp{}.w", i + 1), weight);
        p.insert(format!("{prefix}.mlp{}.b", i + 1), Tensor::zeros(&[1, w]));
        d = w;
    }
}

pub fn init_embedder(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_backbone(&mut p, EMBED_PREFIX, cfg, &mut rng);
    init_head(&mut p, EMBED_PREFIX, 2 * cfg.concat_width, &cfg.embed_mlp_widths, &mut rng, false);
    Ok(p)
}

/// Transformer parameters; the last layer is zero so the initial pose is the
/// identity.
pub fn init_stn(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    init_backbone(&mut p, STN_PREFIX, cfg, &mut rng);
    init_head(&mut p, STN_PREFIX, 2 * cfg.concat_width, &cfg.stn_mlp_widths, &mut rng, true);
    Ok(p)
}

pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    Ok(NetworkParams {
        stn: init_stn(cfg, seed.wrapping_mul(2).wrapping_add(1))?,
        embed: init_embedder(cfg, seed.wrapping_mul(2))?,
    })
}

/// Builds graph nodes for one network over a dense (compacted) minutiae set.
pub struct Builder<'a> {
    pub cfg: &'a NetworkConfig,
    pub mode: Mode,
    pub trace: Option<&'a mut LayerTrace>,
}

impl<'a> Builder<'a> {
    pub fn new(cfg: &'a NetworkConfig, mode: Mode) -> Self {
        Self { cfg, mode, trace: None }
    }

    fn normalize(&self, g: &mut Graph, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
        if self.cfg.normalization == Normalization::None {
            return Ok(x);
        }
        let gamma = g.param(params, &format!("{name}.gamma"))?;
        let beta = g.param(params, &format!("{name}.beta"))?;
        match (self.cfg.normalization, self.mode) {
            (Normalization::Batch, Mode::Infer) => {
                let get = |s: &str| {
                    params
                        .get(&format!("{name}.{s}"))
                        .map(|t| t.data().to_vec())
                        .ok_or_else(|| Error::MissingParam(format!("{name}.{s}")))
                };
                let (mean, var) = (get("running_mean")?, get("running_var")?);
                g.norm_fixed(x, gamma, beta, &mean, &var)
            }
            _ => g.norm_batch(x, gamma, beta, name),
        }
    }

    /// One EdgeConv layer: `max_j σ(N(W·[x_i ‖ x_j − x_i] + b))` over the `k`
    /// nearest neighbours of each node in the current feature space.
    pub fn edge_conv(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        name: &str,
        x: Var,
        neighbors: &[usize],
        k: usize,
    ) -> Result<Var> {
        let d = g.value(x).cols();
        let w = g.param(params, &format!("{name}.w"))?;
        if g.value(w).rows() != 2 * d {
            return Err(Error::Shape {
                node: w.index(),
                op: "edge_conv",
                detail: format!("weight has {} rows for {d}-wide features", g.value(w).rows()),
            });
        }
        // W·[x_i ‖ x_j − x_i] = (W₁ − W₂)·x_i + W₂·x_j
        let w1 = g.slice_rows(w, 0, d)?;
        let w2 = g.slice_rows(w, d, 2 * d)?;
        let u = g.matmul(x, w1)?;
        let v = g.matmul(x, w2)?;
        let center = g.sub(u, v)?;
        let e = g.edge_sum(center, v, neighbors.to_vec(), k)?;
        // a bias ahead of normalisation would cancel, so it exists only without one
        let e = match params.get(&format!("{name}.b")) {
            Some(_) => {
                let b = g.param(params, &format!("{name}.b"))?;
                g.add_row(e, b)?
            }
            None => e,
        };
        let e = self.normalize(g, params, &format!("{name}.norm"), e)?;
        // the activation is increasing, so it commutes with the max
        let e = g.group_max(e, k)?;
        g.leaky_relu(e, LEAKY_SLOPE)
    }

    /// Five dynamic EdgeConv layers, channel concatenation and max ‖ mean
    /// pooling: `N×d → 1×2C`.
    pub fn backbone(&mut self, g: &mut Graph, params: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if n < MIN_TEMPLATE_MINUTIAE {
            return Err(Error::TooFewNodes { have: n, need: MIN_TEMPLATE_MINUTIAE });
        }
        let k = self.cfg.k.min(n - 1);
        if let Some(t) = self.trace.as_deref_mut() {
            t.k = k;
        }
        let mut feats = x;
        let mut outs = Vec::with_capacity(NUM_EDGECONV);
        for l in 1..=NUM_EDGECONV {
            let neighbors = knn_indices(g.value(feats), k)?;
            if let Some(t) = self.trace.as_deref_mut() {
                t.input.push(g.value(feats).clone());
                t.neighbors.push(neighbors.clone());
            }
            let name = format!("{prefix}.ec{l}");
            let mut y = self.edge_conv(g, params, &name, feats, &neighbors, k)?;
            if self.cfg.residual_layers.contains(&l) {
                let skip = match params.get(&format!("{name}.skip.w")) {
                    Some(_) => {
                        let p = g.param(params, &format!("{name}.skip.w"))?;
                        g.matmul(feats, p)?
                    }
                    None => feats,
                };
                y = g.add(y, skip)?;
            }
            outs.push(y);
            feats = y;
        }
        let cat = g.concat_cols(&outs)?;
        let mx = g.max_rows(cat)?;
        let mean = g.mean_rows(cat)?;
        g.concat_cols(&[mx, mean])
    }

    pub fn mlp(&self, g: &mut Graph, params: &ParamSet, prefix: &str, x: Var, layers: usize) -> Result<Var> {
        let mut h = x;
        for i in 1..=layers {
            let w = g.param(params, &format!("{prefix}.mlp{i}.w"))?;
            let b = g.param(params, &format!("{prefix}.mlp{i}.b"))?;
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if i < layers {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    pub fn embedder(&mut self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let pooled = self.backbone(g, params, EMBED_PREFIX, x)?;
        let layers = self.cfg.embed_mlp_widths.len();
        self.mlp(g, params, EMBED_PREFIX, pooled, layers)
    }

    /// Pose row: translation followed by bounded angles.
    pub fn transformer(&mut self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let pooled = self.backbone(g, params, STN_PREFIX, x)?;
        let layers = self.cfg.stn_mlp_widths.len();
        let raw = self.mlp(g, params, STN_PREFIX, pooled, layers)?;
        let pd = self.cfg.pose_dim();
        let nt = pd - self.cfg.angle_bounds.len();
        let t = g.slice_cols(raw, 0, nt)?;
        let a = g.slice_cols(raw, nt, pd)?;
        let a = g.bounded_tanh(a, self.cfg.angle_bounds.clone())?;
        g.concat_cols(&[t, a])
    }

    pub fn apply_pose(&self, g: &mut Graph, x: Var, pose: Var) -> Result<Var> {
        if self.cfg.is_3d() {
            g.rigid3(x, pose, self.cfg.orientation_mode)
        } else {
            g.rigid2(x, pose, self.cfg.matrix_mode)
        }
    }

    /// Transformer, pose correction, embedder. Returns `(pose, embedding)`.
    pub fn corrected(
        &mut self,
        g: &mut Graph,
        stn: &ParamSet,
        embed: &ParamSet,
        x: Var,
    ) -> Result<(Var, Var)> {
        let trace = self.trace.take();
        let pose = self.transformer(g, stn, x)?;
        self.trace = trace;
        let moved = self.apply_pose(g, x, pose)?;
        let e = self.embedder(g, embed, moved)?;
        Ok((pose, e))
    }
}

/// Raw input rows in network units: positions optionally centred and scaled,
/// 3D orientations scaled separately, 2D angles left alone.
pub fn input_tensor(set: &PaddedSet, cfg: &NetworkConfig) -> Result<Tensor> {
    if set.features.cols() != cfg.input_dim {
        return Err(Error::invalid(format!(
            "set has {} features, network expects {}",
            set.features.cols(),
            cfg.input_dim
        )));
    }
    let n = set.num_valid();
    if n < MIN_TEMPLATE_MINUTIAE {
        return Err(Error::TooFewNodes { have: n, need: MIN_TEMPLATE_MINUTIAE });
    }
    let (mut t, _) = set.compact();
    let d = cfg.input_dim;
    let (pos_cols, scaled_cols) = if cfg.is_3d() { (3, 6) } else { (2, 2) };
    if cfg.center_input {
        let mut c = [0.0; 3];
        for row in t.data().chunks(d) {
            for k in 0..pos_cols {
                c[k] += row[k] / n as f64;
            }
        }
        for row in t.data_mut().chunks_mut(d) {
            for k in 0..pos_cols {
                row[k] -= c[k];
            }
        }
    }
    for row in t.data_mut().chunks_mut(d) {
        row[..pos_cols].iter_mut().for_each(|v| *v *= cfg.input_scale);
        row[pos_cols..scaled_cols].iter_mut().for_each(|v| *v *= cfg.orientation_scale);
    }
    Ok(t)
}

fn to_embedding(g: &Graph, v: Var) -> Result<Embedding> {
    let e = Embedding(g.value(v).data().to_vec());
    if !e.is_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(e)
}

pub fn embed(set: &PaddedSet, params: &ParamSet, cfg: &NetworkConfig) -> Result<Embedding> {
    let mut g = Graph::new();
    let x = g.constant(input_tensor(set, cfg)?);
    let e = Builder::new(cfg, Mode::Infer).embedder(&mut g, params, x)?;
    to_embedding(&g, e)
}

/// [`embed`] with the per-layer kNN inputs recorded.
pub fn embed_traced(set: &PaddedSet, params: &ParamSet, cfg: &NetworkConfig) -> Result<(Embedding, LayerTrace)> {
    let mut g = Graph::new();
    let x = g.constant(input_tensor(set, cfg)?);
    let mut trace = LayerTrace::default();
    let mut b = Builder { cfg, mode: Mode::Infer, trace: Some(&mut trace) };
    let e = b.embedder(&mut g, params, x)?;
    let e = to_embedding(&g, e)?;
    Ok((e, trace))
}

fn pose_from_row(row: &[f64], cfg: &NetworkConfig) -> Pose {
    let s = cfg.input_scale;
    if cfg.is_3d() {
        Pose { t: [row[0] / s, row[1] / s, row[2] / s], euler: [row[3], row[4], row[5]] }
    } else {
        // planar rotation acts in the xy-plane like the first Euler factor
        Pose { t: [row[0] / s, row[1] / s, 0.0], euler: [row[2], 0.0, 0.0] }
    }
}

/// Pose predicted by the transformer, translation in input pixels of the
/// (centred) network frame.
pub fn spatial_transform(set: &PaddedSet, params: &ParamSet, cfg: &NetworkConfig) -> Result<Pose> {
    let mut g = Graph::new();
    let x = g.constant(input_tensor(set, cfg)?);
    let p = Builder::new(cfg, Mode::Infer).transformer(&mut g, params, x)?;
    Ok(pose_from_row(g.value(p).data(), cfg))
}

/// The full matcher forward pass for one template.
pub fn correct_and_embed(
    tpl: &Template3D,
    stn: &ParamSet,
    embed_params: &ParamSet,
    cfg: &NetworkConfig,
) -> Result<Embedding> {
    tpl.check_usable()?;
    let set = PaddedSet::from_template(tpl, cfg, tpl.len())?;
    let mut g = Graph::new();
    let x = g.constant(input_tensor(&set, cfg)?);
    let (_, e) = Builder::new(cfg, Mode::Infer).corrected(&mut g, stn, embed_params, x)?;
    to_embedding(&g, e)
}

/// Folds batch statistics recorded in training graphs into the running
/// averages, in the order given.
pub fn update_running_stats(params: &mut ParamSet, stats: &[NormStats], momentum: f64) {
    if stats.is_empty() {
        return;
    }
    let mut names: Vec<&str> = Vec::new();
    for s in stats {
        if !names.contains(&s.name.as_str()) {
            names.push(&s.name);
        }
    }
    for name in names {
        let group: Vec<&NormStats> = stats.iter().filter(|s| s.name == name).collect();
        let c = group[0].mean.len();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in &group {
            for j in 0..c {
                mean[j] += s.mean[j] / group.len() as f64;
                var[j] += s.var[j] / group.len() as f64;
            }
        }
        for (suffix, batch) in [("running_mean", &mean), ("running_var", &var)] {
            if let Some(t) = params.get_mut(&format!("{name}.{suffix}")) {
                for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
