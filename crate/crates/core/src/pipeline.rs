//! The complete experiment: contact pretraining, cross-pose finetuning of the
//! 3D and 2D networks, and evaluation on held-out fingers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{emit_curves, run_protocol, MetricsReport, ProtocolSpec, ScoreMatrix};
use crate::geometry::{Template3D, DEFAULT_ALPHA, DEFAULT_SPHERE_C};
use crate::graphnet::{init_params, NetworkConfig, NetworkParams};
use crate::io;
use crate::registry::{DualMatcher, GraphMatcher, Matcher};
use crate::synthgen::{derive_seed, generate_contact_set, generate_dataset, ContactParams, DatasetSpec};
use crate::training::{
    finetune_init, genuine_pairs, same_pose_pairs, train, EpochStats, PairScheme, TrainConfig,
};

const DATA_TAG: u64 = 21;
const CONTACT_TAG: u64 = 22;
const INIT_TAG: u64 = 23;
const PRETRAIN_TAG: u64 = 24;
const FINETUNE_TAG: u64 = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub alpha: f64,
    pub sphere_c: f64,
    pub train: DatasetSpec,
    pub heldout: DatasetSpec,
    pub contact: ContactParams,
    pub net_3d: NetworkConfig,
    pub net_2d: NetworkConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl ExperimentSpec {
    /// 100 training and 50 held-out fingers at yaw 0/20/40 with the narrow
    /// networks and short schedules, single-threaded.
    pub fn desk(seed: u64) -> Self {
        let data_seed = derive_seed(seed, DATA_TAG, 0);
        let train = DatasetSpec { fingers: 100, first_finger: 0, seed: data_seed, ..DatasetSpec::default() };
        let heldout = DatasetSpec { fingers: 50, first_finger: 100, ..train.clone() };
        Self {
            seed,
            alpha: DEFAULT_ALPHA,
            sphere_c: DEFAULT_SPHERE_C,
            train,
            heldout,
            contact: ContactParams::default(),
            net_3d: NetworkConfig::desk_3d(),
            net_2d: NetworkConfig::desk_2d(),
            pretrain: TrainConfig { epochs: 10, batch_size: 32, threads: 1, ..TrainConfig::pretrain() },
            finetune: TrainConfig { epochs: 9, batch_size: 32, threads: 1, ..TrainConfig::finetune() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.sphere_c > 0.0) {
            return Err(Error::Config("alpha and sphere_c must be positive".into()));
        }
        if self.net_3d.input_dim != 6 || self.net_2d.input_dim != 3 {
            return Err(Error::Config("net_3d needs input_dim 6 and net_2d input_dim 3".into()));
        }
        self.net_3d.validate()?;
        self.net_2d.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let (a, b) = (&self.train, &self.heldout);
        if a.first_finger < b.first_finger + b.fingers && b.first_finger < a.first_finger + a.fingers {
            return Err(Error::Config("training and held-out finger ranges overlap".into()));
        }
        Ok(())
    }
}

/// Contact impressions lifted onto their spheres.
pub fn contact_templates(spec: &ExperimentSpec) -> Result<Vec<Template3D>> {
    let mut params = spec.contact.clone();
    params.finger.alpha = spec.alpha;
    generate_contact_set(derive_seed(spec.seed, CONTACT_TAG, 0), &params)?
        .iter()
        .map(|c| c.lift(spec.sphere_c, spec.alpha))
        .collect()
}

pub fn dataset(spec: &DatasetSpec, alpha: f64) -> Result<Vec<Template3D>> {
    let mut s = spec.clone();
    s.finger.alpha = alpha;
    generate_dataset(&s)
}

#[derive(Debug, Clone)]
pub struct TrainedNetworks {
    pub pretrained_3d: NetworkParams,
    pub pretrained_2d: NetworkParams,
    /// Network A: all weighted cross-pose pairs.
    pub all_pose: NetworkParams,
    /// Network B: same-orientation pairs only.
    pub same_pose: NetworkParams,
    pub baseline_2d: NetworkParams,
    /// Loss traces keyed by network role.
    pub traces: BTreeMap<String, Vec<EpochStats>>,
}

fn seeded(cfg: &TrainConfig, tag: u64, seed: u64, index: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(seed, tag, index), ..cfg.clone() }
}

pub fn pretrain(spec: &ExperimentSpec, contact: &[Template3D], net: &NetworkConfig, index: u64) -> Result<(NetworkParams, Vec<EpochStats>)> {
    let pairs = genuine_pairs(contact, &PairScheme::Single("contact".into()));
    let mut params = init_params(net, derive_seed(spec.seed, INIT_TAG, index))?;
    let cfg = seeded(&spec.pretrain, PRETRAIN_TAG, spec.seed, index);
    let trace = train(contact, &pairs, &cfg, net, &mut params, None)?;
    Ok((params, trace))
}

/// Finetunes from a pretrained embedder with a fresh transformer. With
/// `same_pose_only` the pair list is restricted to same-orientation pairs.
pub fn finetune(
    spec: &ExperimentSpec,
    templates: &[Template3D],
    net: &NetworkConfig,
    pretrained: &NetworkParams,
    index: u64,
    same_pose_only: bool,
) -> Result<(NetworkParams, Vec<EpochStats>)> {
    let mut pairs = genuine_pairs(templates, &PairScheme::YawGap);
    if same_pose_only {
        pairs = same_pose_pairs(&pairs);
        if pairs.is_empty() {
            return Err(Error::invalid("no same-orientation pairs for the second network"));
        }
    }
    let mut params = finetune_init(&pretrained.embed, net, derive_seed(spec.seed, INIT_TAG, 16 + index))?;
    let cfg = seeded(&spec.finetune, FINETUNE_TAG, spec.seed, index);
    let trace = train(templates, &pairs, &cfg, net, &mut params, None)?;
    Ok((params, trace))
}

pub fn train_networks(spec: &ExperimentSpec, train_set: &[Template3D], contact: &[Template3D]) -> Result<TrainedNetworks> {
    spec.validate()?;
    let mut traces = BTreeMap::new();
    let (pre3, t) = pretrain(spec, contact, &spec.net_3d, 0)?;
    traces.insert("pretrain-3d".to_string(), t);
    let (pre2, t) = pretrain(spec, contact, &spec.net_2d, 1)?;
    traces.insert("pretrain-2d".to_string(), t);
    let (a, t) = finetune(spec, train_set, &spec.net_3d, &pre3, 0, false)?;
    traces.insert("all-pose".to_string(), t);
    let (b, t) = finetune(spec, train_set, &spec.net_3d, &pre3, 1, true)?;
    traces.insert("same-pose".to_string(), t);
    let (c, t) = finetune(spec, train_set, &spec.net_2d, &pre2, 2, false)?;
    traces.insert("baseline-2d".to_string(), t);
    Ok(TrainedNetworks { pretrained_3d: pre3, pretrained_2d: pre2, all_pose: a, same_pose: b, baseline_2d: c, traces })
}

/// Headline numbers of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub eer_3d: f64,
    pub eer_2d: f64,
    pub rank1_all_pose: f64,
    pub rank1_same_pose: f64,
    pub rank1_dual: f64,
    pub rank1_2d: f64,
}

/// Every matcher's report and matrix keyed `"{matcher}.{protocol}"`.
pub type Evaluations = BTreeMap<String, (MetricsReport, ScoreMatrix)>;

pub fn evaluate_networks(spec: &ExperimentSpec, heldout: &[Template3D], nets: &TrainedNetworks) -> Result<(Evaluations, ExperimentSummary)> {
    let matchers: Vec<Box<dyn Matcher>> = vec![
        Box::new(GraphMatcher::new("graph3d", spec.net_3d.clone(), nets.all_pose.clone())),
        Box::new(GraphMatcher::new("same-pose", spec.net_3d.clone(), nets.same_pose.clone())),
        Box::new(DualMatcher::new(spec.net_3d.clone(), nets.all_pose.clone(), nets.same_pose.clone())),
        Box::new(GraphMatcher::new("graph2d", spec.net_2d.clone(), nets.baseline_2d.clone())),
    ];
    let mut out = BTreeMap::new();
    for m in &matchers {
        for (tag, proto) in [("all-vs-all", ProtocolSpec::all_vs_all()), ("identification", ProtocolSpec::identification())] {
            out.insert(format!("{}.{tag}", m.name()), run_protocol(heldout, &proto, m.as_ref())?);
        }
    }
    let eer = |k: &str| out[&format!("{k}.all-vs-all")].0.eer;
    let rank1 = |k: &str| out[&format!("{k}.identification")].0.rank1.unwrap_or(0.0);
    let summary = ExperimentSummary {
        eer_3d: eer("graph3d"),
        eer_2d: eer("graph2d"),
        rank1_all_pose: rank1("graph3d"),
        rank1_same_pose: rank1("same-pose"),
        rank1_dual: rank1("dual"),
        rank1_2d: rank1("graph2d"),
    };
    Ok((out, summary))
}

/// Roles of the trained networks, in the order they are written.
pub const NETWORK_ROLES: [&str; 5] = ["pretrain-3d", "pretrain-2d", "all-pose", "same-pose", "baseline-2d"];

/// Runs the whole experiment and writes every artifact under `dir`:
///
/// ```text
/// spec.json
/// train/{manifest.json,templates.jsonl}   heldout/…   contact/…
/// checkpoints/<role>.ckpt                  traces/<role>.csv
/// scores/<matcher>.<protocol>.csv          reports/<matcher>.<protocol>.json
/// curves/<matcher>.<protocol>/{det,roc,cmc}.{csv,svg}
/// summary.json
/// ```
pub fn run_experiment(spec: &ExperimentSpec, dir: &Path) -> Result<ExperimentSummary> {
    spec.validate()?;
    let mut text = serde_json::to_string_pretty(spec)?;
    text.push('\n');
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("spec.json"), text)?;
    let train_set = dataset(&spec.train, spec.alpha)?;
    let heldout = dataset(&spec.heldout, spec.alpha)?;
    let contact = contact_templates(spec)?;
    io::save_dataset(&dir.join("train"), "train", spec.train.seed, &train_set, spec.alpha)?;
    io::save_dataset(&dir.join("heldout"), "heldout", spec.heldout.seed, &heldout, spec.alpha)?;
    io::save_dataset(&dir.join("contact"), "contact", spec.seed, &contact, spec.alpha)?;

    let nets = train_networks(spec, &train_set, &contact)?;
    let roles = [
        (&spec.net_3d, &nets.pretrained_3d),
        (&spec.net_2d, &nets.pretrained_2d),
        (&spec.net_3d, &nets.all_pose),
        (&spec.net_3d, &nets.same_pose),
        (&spec.net_2d, &nets.baseline_2d),
    ];
    for (role, (cfg, params)) in NETWORK_ROLES.iter().zip(roles) {
        io::save_network(&dir.join("checkpoints").join(format!("{role}.ckpt")), cfg, params)?;
        io::write_loss_trace(&dir.join("traces").join(format!("{role}.csv")), &nets.traces[*role])?;
    }

    let (evals, summary) = evaluate_networks(spec, &heldout, &nets)?;
    for (key, (report, matrix)) in &evals {
        io::write_scores(&dir.join("scores").join(format!("{key}.csv")), &io::score_rows(matrix))?;
        io::write_report(&dir.join("reports").join(format!("{key}.json")), report)?;
        emit_curves(report, &dir.join("curves").join(key))?;
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(summary)
}
