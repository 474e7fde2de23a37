//! Batch-hard triplet training of the graph networks: contact-print
//! pretraining of the embedder, then joint finetuning with the transformer.

mod augment;
mod pairs;

pub use augment::{augment, AugmentBranch, AugmentPolicy};
pub use pairs::{
    build_epoch, direction_class, genuine_pairs, yaw_gap_class, GenuinePair, PairScheme, PairWeightTable,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_update, AdamConfig, AdamState, Graph, NormStats, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Template3D;
use crate::graphnet::{
    init_stn, input_tensor, update_running_stats, Builder, Mode, NetworkConfig, NetworkParams, Normalization,
    PaddedSet, EMBED_PREFIX, STN_PREFIX,
};
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Embedder only, on contact-style templates.
    Pretrain,
    /// Transformer and embedder jointly.
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_pad: usize,
    pub adam: AdamConfig,
    pub augment: Option<AugmentPolicy>,
    pub pair_weights: PairWeightTable,
    pub seed: u64,
    /// Worker threads for per-template passes; 0 lets rayon decide.
    pub threads: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            gamma: 0.2,
            batch_size: 128,
            epochs: 80,
            n_pad: 200,
            adam: AdamConfig::default(),
            augment: None,
            pair_weights: PairWeightTable::uniform(["contact"]),
            seed: 0,
            threads: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 64,
            epochs: 100,
            n_pad: 400,
            augment: Some(AugmentPolicy::default()),
            pair_weights: PairWeightTable::yaw_gap(),
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.n_pad < crate::geometry::MIN_TEMPLATE_MINUTIAE {
            return Err(Error::Config("n_pad below the usable template size".into()));
        }
        if !(self.adam.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.pair_weights.validate()
    }
}

/// `max(‖a − p‖ − ‖a − n‖ + γ, 0)`.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], gamma: f64) -> f64 {
    (l2(a, p) - l2(a, n) + gamma).max(0.0)
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// For each anchor, the closest pool element with a different finger id
/// (lowest index on ties).
pub fn mine_hard_negatives<A: AsRef<[f64]>, P: AsRef<[f64]>>(
    anchors: &[A],
    anchor_ids: &[&str],
    pool: &[P],
    pool_ids: &[&str],
) -> Result<Vec<usize>> {
    if anchors.len() != anchor_ids.len() || pool.len() != pool_ids.len() {
        return Err(Error::invalid("embeddings and finger ids differ in length"));
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, p) in pool.iter().enumerate() {
                if pool_ids[j] == anchor_ids[i] {
                    continue;
                }
                let d = l2(a.as_ref(), p.as_ref());
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j));
                }
            }
            best.map(|(_, j)| j).ok_or(Error::NoNegative(i))
        })
        .collect()
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub active_triplet_fraction: f64,
}

struct Forward {
    graph: Graph,
    out: Var,
}

fn forward(tpl: &Template3D, net: &NetworkConfig, params: &NetworkParams, stage: Stage, n_pad: usize) -> Result<Forward> {
    let set = PaddedSet::from_template(tpl, net, n_pad).map_err(|e| Error::Template {
        template_id: tpl.template_id.clone(),
        detail: e.to_string(),
    })?;
    let mut graph = Graph::new();
    let x = graph.constant(input_tensor(&set, net)?);
    let mut b = Builder::new(net, Mode::Train);
    let out = match stage {
        Stage::Pretrain => b.embedder(&mut graph, &params.embed, x)?,
        Stage::Finetune => b.corrected(&mut graph, &params.stn, &params.embed, x)?.1,
    };
    Ok(Forward { graph, out })
}

/// Per-parameter gradients of one template graph, keyed like the ParamSets.
fn template_grads(f: &Forward, seed: Tensor) -> Result<Vec<(String, Tensor)>> {
    let grads = f.graph.backward_with_seed(&[(f.out, seed)])?;
    let mut out: Vec<(String, Tensor)> = f
        .graph
        .params()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.clone())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

struct BatchResult {
    loss: f64,
    anchors: usize,
    active: usize,
}

/// Batch-hard loss over L2-normalised embeddings: anchors are the first
/// elements, negatives are mined among the second elements of other fingers.
/// Returns the mean loss and its gradient with respect to every raw embedding.
fn batch_loss(
    ea: &[Vec<f64>],
    ep: &[Vec<f64>],
    ids: &[&str],
    gamma: f64,
) -> Result<Option<(BatchResult, Vec<Tensor>, Vec<Tensor>)>> {
    let b = ea.len();
    let dim = ea[0].len();
    let mut g = Graph::new();
    let flat = |e: &[Vec<f64>]| Tensor::matrix(e.len(), dim, e.iter().flatten().copied().collect());
    let la = g.leaf(flat(ea), None);
    let lp = g.leaf(flat(ep), None);
    let na = g.normalize_rows(la)?;
    let np = g.normalize_rows(lp)?;
    let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect::<Vec<_>>();
    let (ra, rp) = (rows(g.value(na)), rows(g.value(np)));
    // anchors whose batch holds no other finger contribute nothing
    let usable: Vec<usize> = (0..b).filter(|&i| ids.iter().any(|id| *id != ids[i])).collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let anchor_rows: Vec<&Vec<f64>> = usable.iter().map(|&i| &ra[i]).collect();
    let anchor_ids: Vec<&str> = usable.iter().map(|&i| ids[i]).collect();
    let neg = mine_hard_negatives(&anchor_rows, &anchor_ids, &rp, ids)?;
    let a_sel = g.gather_rows(na, usable.clone())?;
    let p_sel = g.gather_rows(np, usable.clone())?;
    let n_sel = g.gather_rows(np, neg)?;
    let dap = g.sub(a_sel, p_sel)?;
    let dap = g.row_norm(dap)?;
    let dan = g.sub(a_sel, n_sel)?;
    let dan = g.row_norm(dan)?;
    let diff = g.sub(dap, dan)?;
    let margin = g.add_scalar(diff, gamma)?;
    let hinge = g.relu(margin)?;
    let active = g.value(hinge).data().iter().filter(|&&v| v > 0.0).count();
    let total = g.sum(hinge)?;
    let loss = g.scale(total, 1.0 / usable.len() as f64)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let split = |v: Var| -> Vec<Tensor> {
        let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&[b, dim]));
        (0..b).map(|i| Tensor::row(t.row_slice(i).to_vec())).collect()
    };
    Ok(Some((BatchResult { loss: value, anchors: usable.len(), active }, split(la), split(lp))))
}

fn accumulate(into: &mut ParamSet, name: &str, g: &Tensor) {
    match into.get_mut(name) {
        Some(t) => t.add_assign(g),
        None => into.insert(name, g.clone()),
    }
}

const EPOCH_TAG: u64 = 11;

/// Callback invoked after every completed epoch with the current parameters.
pub type EpochHook<'a> = dyn FnMut(&EpochStats, &NetworkParams) -> Result<()> + 'a;

/// Trains `params` in place. On a non-finite loss or gradient the parameters
/// are rolled back to the end of the last good epoch and an error returned.
pub fn train(
    templates: &[Template3D],
    pairs: &[GenuinePair],
    cfg: &TrainConfig,
    net: &NetworkConfig,
    params: &mut NetworkParams,
    mut hook: Option<&mut EpochHook<'_>>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    net.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    for p in pairs {
        if p.a >= templates.len() || p.b >= templates.len() {
            return Err(Error::invalid(format!("pair ({}, {}) outside the template list", p.a, p.b)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut stn_state = AdamState::new();
    let mut emb_state = AdamState::new();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let good = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EPOCH_TAG, epoch as u64));
        let order = build_epoch(pairs, &cfg.pair_weights, &mut rng)?;
        let (mut loss_sum, mut batches, mut anchors, mut active) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            // augmentation draws stay sequential so the stream is thread-independent
            let mut inputs = Vec::with_capacity(2 * chunk.len());
            for &pi in chunk {
                let p = &pairs[pi];
                for &t in &[p.a, p.b] {
                    let tpl = &templates[t];
                    inputs.push(match &cfg.augment {
                        Some(policy) => augment(tpl, policy.branch(p.yaw_gap), &mut rng)?,
                        None => tpl.clone(),
                    });
                }
            }
            let snapshot = &*params;
            let fwd: Result<Vec<Forward>> = pool.install(|| {
                inputs.par_iter().map(|t| forward(t, net, snapshot, cfg.stage, cfg.n_pad)).collect()
            });
            let fwd = match fwd {
                Ok(f) => f,
                Err(Error::NonFinite(detail)) => {
                    *params = good;
                    return Err(Error::Diverged { epoch, detail });
                }
                Err(e) => return Err(e),
            };
            let emb: Vec<Vec<f64>> = fwd.iter().map(|f| f.graph.value(f.out).data().to_vec()).collect();
            let ea: Vec<Vec<f64>> = emb.iter().step_by(2).cloned().collect();
            let ep: Vec<Vec<f64>> = emb.iter().skip(1).step_by(2).cloned().collect();
            let ids: Vec<&str> = chunk.iter().map(|&pi| templates[pairs[pi].a].finger_id.as_str()).collect();
            let Some((res, ga, gp)) = batch_loss(&ea, &ep, &ids, cfg.gamma)? else {
                continue;
            };
            if !res.loss.is_finite() {
                *params = good;
                return Err(Error::Diverged { epoch, detail: format!("loss {}", res.loss) });
            }
            let seeds: Vec<Tensor> = ga.into_iter().zip(gp).flat_map(|(a, p)| [a, p]).collect();
            let per_template: Vec<Vec<(String, Tensor)>> = pool.install(|| {
                fwd.par_iter().zip(seeds.into_par_iter()).map(|(f, s)| template_grads(f, s)).collect::<Result<_>>()
            })?;
            let (mut g_stn, mut g_emb) = (ParamSet::new(), ParamSet::new());
            for grads in &per_template {
                for (name, g) in grads {
                    if name.starts_with(&format!("{STN_PREFIX}.")) {
                        accumulate(&mut g_stn, name, g);
                    } else {
                        accumulate(&mut g_emb, name, g);
                    }
                }
            }
            let stats: Vec<NormStats> = fwd.iter().flat_map(|f| f.graph.norm_stats().iter().cloned()).collect();
            drop(fwd);
            let step = (|| -> Result<()> {
                adam_update(&mut params.embed, &g_emb, &mut emb_state, &cfg.adam)?;
                if cfg.stage == Stage::Finetune {
                    adam_update(&mut params.stn, &g_stn, &mut stn_state, &cfg.adam)?;
                }
                Ok(())
            })();
            if let Err(e) = step {
                *params = good;
                return Err(Error::Diverged { epoch, detail: e.to_string() });
            }
            if net.normalization == Normalization::Batch {
                let (s_stn, s_emb): (Vec<NormStats>, Vec<NormStats>) =
                    stats.into_iter().partition(|s| s.name.starts_with(&format!("{STN_PREFIX}.")));
                update_running_stats(&mut params.embed, &s_emb, net.norm_momentum);
                if cfg.stage == Stage::Finetune {
                    update_running_stats(&mut params.stn, &s_stn, net.norm_momentum);
                }
            }
            loss_sum += res.loss;
            batches += 1;
            anchors += res.anchors;
            active += res.active;
        }
        let stats = EpochStats {
            epoch,
            stage: cfg.stage,
            mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            active_triplet_fraction: if anchors > 0 { active as f64 / anchors as f64 } else { 0.0 },
        };
        if let Some(h) = hook.as_deref_mut() {
            h(&stats, params)?;
        }
        trace.push(stats);
    }
    Ok(trace)
}

/// Stage-two starting point: the pretrained embedder and a fresh transformer
/// with identity output.
pub fn finetune_init(pretrained_embed: &ParamSet, net: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
    let mut embed = ParamSet::new();
    embed.copy_prefix_from(pretrained_embed, &format!("{EMBED_PREFIX}."));
    Ok(NetworkParams { stn: init_stn(net, seed)?, embed })
}

/// Networks trained on all weighted pairs (A) and on same-orientation pairs
/// only (B).
#[derive(Debug, Clone)]
pub struct DualOutcome {
    pub all_pose: NetworkParams,
    pub same_pose: NetworkParams,
    pub all_pose_trace: Vec<EpochStats>,
    pub same_pose_trace: Vec<EpochStats>,
    pub same_pose_pairs: usize,
}

pub fn same_pose_pairs(pairs: &[GenuinePair]) -> Vec<GenuinePair> {
    pairs.iter().filter(|p| p.same_pose).cloned().collect()
}

pub fn train_dual(
    templates: &[Template3D],
    pairs: &[GenuinePair],
    cfg: &TrainConfig,
    net: &NetworkConfig,
    init: &NetworkParams,
) -> Result<DualOutcome> {
    let same = same_pose_pairs(pairs);
    if same.is_empty() {
        return Err(Error::invalid("no same-orientation pairs for the second network"));
    }
    let mut a = init.clone();
    let all_pose_trace = train(templates, pairs, cfg, net, &mut a, None)?;
    let mut b = init.clone();
    let same_pose_trace = train(templates, &same, cfg, net, &mut b, None)?;
    Ok(DualOutcome { all_pose: a, same_pose: b, all_pose_trace, same_pose_trace, same_pose_pairs: same.len() })
}
