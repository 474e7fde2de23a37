use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use g3dm_core::evaluation::{emit_curves, fuse_dual, fuse_external, run_protocol, MetricsReport, ProtocolMode, ProtocolSpec};
use g3dm_core::geometry::{integrate_depth, lift_minutia_with, Minutia3D, NormalConvention, Template3D};
use g3dm_core::graphnet::{correct_and_embed, init_params, NetworkConfig, NetworkParams};
use g3dm_core::io::{self, ManifestRecord, RunConfig, ScoreRow, Template2D};
use g3dm_core::pipeline::{contact_templates, run_experiment, ExperimentSpec};
use g3dm_core::registry::{MatcherContext, MatcherRegistry};
use g3dm_core::synthgen::{dataset_finger, dataset_observation_spec, generate_dataset, observe};
use g3dm_core::training::{finetune_init, genuine_pairs, same_pose_pairs, train, PairScheme};
use g3dm_core::{Error, Result};

const FORMATS: &str = "\
FILE FORMATS

  templates (.jsonl)   One JSON object per line:
                         {\"template_id\":\"…\",\"finger_id\":\"…\",\"pose_label\":\"front\",\"yaw\":20,
                          \"minutiae\":[[x,y,z,dx,dy,dz],…]}
                       ‖(dx,dy,dz)‖ must equal alpha (25 unless a first line {\"alpha\":…} says
                       otherwise). Numbers carry 9 significant digits.
  2D minutiae (.jsonl) Same layout with rows [x,y,theta], theta in radians.
  manifest (.json)     {\"name\":…,\"seed\":…,\"records\":[{\"template_id\",\"finger_id\",\"pose_label\",
                       \"yaw\",\"template\",[\"minutiae_2d\",\"gradient\",\"depth\"]}]}; paths are
                       relative to the manifest.
  gradient grid (.csv) width,height,scale / W,H,S / i,j,g_x,g_y,mask then one row per cell,
                       row-major (j outer). Cell (i,j) sits at pixel (i·scale, j·scale).
  depth grid (.csv)    As above with columns i,j,z,mask.
  checkpoint (.ckpt)   \"G3DM\", u32 version, u32 length + network config JSON, u32 tensor
                       count, then per tensor: u32 name length, name, u32 rank, u64 extents,
                       f32 data. All little-endian.
  scores (.csv)        probe_id,gallery_id,score
  loss trace (.csv)    epoch,stage,mean_loss,active_triplet_fraction
  report (.json)       matcher, protocol, eer, eer_threshold, rank1, counts, det, roc, cmc.
  curves               det/roc/cmc as .csv (two named columns) and .svg.
  config (.toml)       Any subset of: seed, alpha, sphere_c, [network] and [network_2d]
                       (preset = \"full\" | \"desk\" plus overrides), [pretrain], [finetune],
                       [synth], [contact]. Unknown keys are errors.

ENVIRONMENT
  G3DM_THREADS         Caps the worker threads used for encoding and scoring.
";

#[derive(Parser)]
#[command(name = "g3dm", version, about = "3D minutiae graph matching toolkit", after_long_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic posed dataset.
    Synth(SynthArgs),
    /// Lift image-space minutiae to 3D with their gradient (and depth) grids.
    Lift(LiftArgs),
    /// Train an embedder on contact-style templates.
    Pretrain(PretrainArgs),
    /// Train transformer and embedder on posed templates.
    Finetune(FinetuneArgs),
    /// Write the embedding of every template.
    Embed(EmbedArgs),
    /// Score every template pair.
    Match(MatchArgs),
    /// Run a verification or identification protocol.
    Evaluate(EvaluateArgs),
    /// Combine two score files.
    Fuse(FuseArgs),
    /// Draw DET/ROC/CMC curves from a report.
    Report(ReportArgs),
    /// Synthesise, train and evaluate the desk-scale experiment end to end.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (manifest.json, templates.jsonl, …).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fingers: Option<usize>,
    #[arg(long)]
    first_finger: Option<usize>,
    /// Comma-separated yaw angles in degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    poses: Option<Vec<f64>>,
    /// Also write image-space minutiae and gradient/depth grids.
    #[arg(long)]
    grids: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normal {
    AsPrinted,
    Physical,
}

#[derive(Args)]
struct LiftArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest whose records carry minutiae_2d and gradient (depth optional).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Normal used to lift orientations: (g_x, g_y, 1) or (−g_x, −g_y, 1).
    #[arg(long, value_enum, default_value = "as-printed")]
    normal: Normal,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dim {
    #[value(name = "3d")]
    Three,
    #[value(name = "2d")]
    Two,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "3d")]
    network: Dim,
    /// Training templates; defaults to the configured contact set.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Pretrained checkpoint; its embedder is the starting point.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train only on pairs sharing a pose label.
    #[arg(long)]
    same_pose: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON Lines of {"template_id", "embedding"}.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct MatcherArgs {
    /// graph3d, graph2d, dual or external.
    #[arg(long, default_value = "graph3d")]
    matcher: String,
    /// 3D network (graph3d, dual).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// 2D network (graph2d).
    #[arg(long)]
    checkpoint_2d: Option<PathBuf>,
    /// Same-orientation network (dual).
    #[arg(long)]
    same_pose_checkpoint: Option<PathBuf>,
    /// External scores fused by `external`.
    #[arg(long)]
    external: Option<PathBuf>,
    /// Matcher wrapped by `external`.
    #[arg(long)]
    inner: Option<String>,
}

#[derive(Args)]
struct MatchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    matcher: MatcherArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    matcher: MatcherArgs,
    #[arg(long, default_value = "all-vs-all")]
    protocol: ProtocolMode,
    /// Gallery template ids, one per line (identification only).
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the scored pairs.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseMode {
    /// 0.6·s1 + 0.4·s2 when s2 ≥ 0.7, else s2.
    Dual,
    /// s3/1000 + s/300 with s = 300 × internal score.
    External,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: FuseMode,
    /// dual: all-pose scores s1; external: internal scores.
    #[arg(long)]
    first: PathBuf,
    /// dual: same-pose scores s2; external: external scores s3.
    #[arg(long)]
    second: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    report: PathBuf,
    /// Directory for det/roc/cmc .csv and .svg.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
}

fn load_run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => io::load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = load_run_config(&a.common)?;
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    spec.finger.alpha = cfg.alpha;
    if let Some(n) = a.fingers {
        spec.fingers = n;
    }
    if let Some(f) = a.first_finger {
        spec.first_finger = f;
    }
    if let Some(p) = a.poses {
        spec.poses = p;
    }
    if !a.grids {
        let templates = generate_dataset(&spec)?;
        io::save_dataset(&a.out, "synthetic", cfg.seed, &templates, cfg.alpha)?;
        return Ok(());
    }
    let mut templates = Vec::new();
    let mut flat = Vec::new();
    let mut records = Vec::new();
    for index in spec.first_finger..spec.first_finger + spec.fingers {
        let finger = dataset_finger(&spec, index)?;
        for pose in 0..spec.poses.len() {
            let obs = observe(&finger, &dataset_observation_spec(&spec, index, pose))?;
            let t = &obs.template;
            let gradient = format!("grids/{}.gradient.csv", t.template_id);
            let depth = format!("grids/{}.depth.csv", t.template_id);
            io::write_gradient_grid(&a.out.join(&gradient), &obs.gradient)?;
            io::write_depth_grid(&a.out.join(&depth), &obs.depth)?;
            records.push(ManifestRecord {
                template_id: t.template_id.clone(),
                finger_id: t.finger_id.clone(),
                pose_label: t.pose_label.clone(),
                yaw: t.yaw,
                template: io::TEMPLATES_FILE.into(),
                minutiae_2d: Some("minutiae_2d.jsonl".into()),
                gradient: Some(gradient),
                depth: Some(depth),
            });
            flat.push(Template2D {
                template_id: t.template_id.clone(),
                finger_id: t.finger_id.clone(),
                pose_label: t.pose_label.clone(),
                yaw: t.yaw,
                minutiae: obs.minutiae_2d.clone(),
            });
            templates.push(obs.template);
        }
    }
    io::save_templates(&a.out.join(io::TEMPLATES_FILE), &templates, cfg.alpha)?;
    io::save_templates_2d(&a.out.join("minutiae_2d.jsonl"), &flat)?;
    let m = io::DatasetManifest { name: "synthetic".into(), seed: cfg.seed, records };
    io::save_manifest(&a.out.join(io::MANIFEST_FILE), &m)
}

fn lift(a: LiftArgs) -> Result<()> {
    let cfg = load_run_config(&a.common)?;
    let convention = match a.normal {
        Normal::AsPrinted => NormalConvention::AsPrinted,
        Normal::Physical => NormalConvention::Physical,
    };
    let m = io::load_manifest(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let mut files: HashMap<String, HashMap<String, Template2D>> = HashMap::new();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for r in &m.records {
        let (Some(m2d), Some(grad)) = (&r.minutiae_2d, &r.gradient) else {
            return Err(Error::Protocol(format!("`{}` has no minutiae_2d/gradient to lift", r.template_id)));
        };
        if !files.contains_key(m2d) {
            let ts = io::load_templates_2d(&base.join(m2d))?;
            files.insert(m2d.clone(), ts.into_iter().map(|t| (t.template_id.clone(), t)).collect());
        }
        let t2 = files[m2d]
            .get(&r.template_id)
            .ok_or_else(|| Error::Protocol(format!("`{}` not found in `{m2d}`", r.template_id)))?;
        let gradient = io::read_gradient_grid(&base.join(grad))?;
        let depth = match &r.depth {
            Some(d) => io::read_depth_grid(&base.join(d))?,
            None => integrate_depth(&gradient)?,
        };
        let mut minutiae: Vec<Minutia3D> = Vec::with_capacity(t2.minutiae.len());
        for mn in &t2.minutiae {
            match lift_minutia_with(mn, &gradient, &depth, cfg.alpha, convention) {
                Ok(m3) => minutiae.push(m3),
                Err(Error::OffMask { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        out.push(Template3D {
            template_id: t2.template_id.clone(),
            finger_id: t2.finger_id.clone(),
            pose_label: t2.pose_label.clone(),
            yaw: t2.yaw,
            minutiae,
        });
    }
    if skipped > 0 {
        eprintln!("lift: {skipped} minutiae outside the grid masks were dropped");
    }
    io::save_templates(&a.out, &out, cfg.alpha)
}

fn write_trace(path: &Option<PathBuf>, trace: &[g3dm_core::training::EpochStats]) -> Result<()> {
    match path {
        Some(p) => io::write_loss_trace(p, trace),
        None => Ok(()),
    }
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let cfg = load_run_config(&a.common)?;
    cfg.validate()?;
    let net = match a.network {
        Dim::Three => cfg.network.clone(),
        Dim::Two => cfg.network_2d.clone(),
    };
    let templates = match &a.manifest {
        Some(m) => io::load_dataset(m)?,
        None => {
            let mut spec = ExperimentSpec::desk(cfg.seed);
            spec.alpha = cfg.alpha;
            spec.sphere_c = cfg.sphere_c;
            spec.contact = cfg.contact.clone();
            contact_templates(&spec)?
        }
    };
    let pairs = genuine_pairs(&templates, &PairScheme::Single("contact".into()));
    let mut tc = cfg.pretrain.clone();
    tc.seed = cfg.seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let mut params = init_params(&net, cfg.seed)?;
    let trace = train(&templates, &pairs, &tc, &net, &mut params, None)?;
    io::save_network(&a.out, &net, &params)?;
    write_trace(&a.trace, &trace)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let cfg = load_run_config(&a.common)?;
    let (net, pre) = io::load_network(&a.init)?;
    let templates = io::load_dataset(&a.manifest)?;
    let mut pairs = genuine_pairs(&templates, &PairScheme::YawGap);
    if a.same_pose {
        pairs = same_pose_pairs(&pairs);
    }
    let mut tc = cfg.finetune.clone();
    tc.seed = cfg.seed;
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    let mut params = finetune_init(&pre.embed, &net, cfg.seed)?;
    let trace = train(&templates, &pairs, &tc, &net, &mut params, None)?;
    io::save_network(&a.out, &net, &params)?;
    write_trace(&a.trace, &trace)
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    template_id: &'a str,
    embedding: Vec<f64>,
}

fn embed(a: EmbedArgs) -> Result<()> {
    let (net, params) = io::load_network(&a.checkpoint)?;
    let templates = io::load_dataset(&a.manifest)?;
    let mut s = String::new();
    for t in &templates {
        let e = correct_and_embed(t, &params.stn, &params.embed, &net)?;
        let line = EmbeddingLine { template_id: &t.template_id, embedding: e.0.iter().map(|&v| io::round_sig9(v)).collect() };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, s)?;
    Ok(())
}

fn matcher_context(m: &MatcherArgs) -> Result<MatcherContext> {
    let mut networks: BTreeMap<String, (NetworkConfig, NetworkParams)> = BTreeMap::new();
    for (role, path) in [("3d", &m.checkpoint), ("2d", &m.checkpoint_2d), ("same-pose", &m.same_pose_checkpoint)] {
        if let Some(p) = path {
            networks.insert(role.into(), io::load_network(p)?);
        }
    }
    let external = match &m.external {
        Some(p) => Some(io::read_external_scores(p)?),
        None => None,
    };
    Ok(MatcherContext { networks, external, inner: m.inner.clone() })
}

fn evaluate_with(
    manifest: &Path,
    m: &MatcherArgs,
    spec: &ProtocolSpec,
) -> Result<(MetricsReport, g3dm_core::evaluation::ScoreMatrix)> {
    let templates = io::load_dataset(manifest)?;
    let ctx = matcher_context(m)?;
    let matcher = MatcherRegistry::with_builtin().create(&m.matcher, &ctx)?;
    let (report, matrix) = run_protocol(&templates, spec, matcher.as_ref())?;
    if !report.failed_templates.is_empty() {
        eprintln!("{}: {} templates could not be encoded and score 0", m.matcher, report.failed_templates.len());
    }
    Ok((report, matrix))
}

fn do_match(a: MatchArgs) -> Result<()> {
    let (_, matrix) = evaluate_with(&a.manifest, &a.matcher, &ProtocolSpec::all_vs_all())?;
    io::write_scores(&a.out, &io::score_rows(&matrix))
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gallery = match &a.gallery {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        }
        None => None,
    };
    if gallery.is_some() && a.protocol != ProtocolMode::Identification {
        return Err(Error::InvalidArgument("--gallery applies to the identification protocol".into()));
    }
    let spec = ProtocolSpec { mode: a.protocol, gallery };
    let (report, matrix) = evaluate_with(&a.manifest, &a.matcher, &spec)?;
    io::write_report(&a.out, &report)?;
    if let Some(p) = &a.scores {
        io::write_scores(p, &io::score_rows(&matrix))?;
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let text = std::fs::read_to_string(path)?;
    io::parse_scores(&text, &path.display().to_string())
}

fn fuse(a: FuseArgs) -> Result<()> {
    let first = read_scores(&a.first)?;
    let second = read_scores(&a.second)?;
    let mut lookup: HashMap<(&str, &str), f64> = HashMap::new();
    for r in &second {
        lookup.insert((&r.probe_id, &r.gallery_id), r.score);
    }
    let find = |r: &ScoreRow| {
        lookup
            .get(&(r.probe_id.as_str(), r.gallery_id.as_str()))
            .or_else(|| lookup.get(&(r.gallery_id.as_str(), r.probe_id.as_str())))
            .copied()
    };
    let mut out = Vec::with_capacity(first.len());
    for r in &first {
        let score = match a.mode {
            FuseMode::Dual => {
                let s2 = find(r).ok_or_else(|| {
                    Error::Protocol(format!("pair ({}, {}) missing from {}", r.probe_id, r.gallery_id, a.second.display()))
                })?;
                fuse_dual(r.score, s2)?
            }
            FuseMode::External => fuse_external(find(r).unwrap_or(0.0), 300.0 * r.score)?,
        };
        out.push(ScoreRow { probe_id: r.probe_id.clone(), gallery_id: r.gallery_id.clone(), score });
    }
    io::write_scores(&a.out, &out)
}

fn report(a: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report)?;
    let r: MetricsReport = serde_json::from_str(&text)?;
    emit_curves(&r, &a.out)?;
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let seed = a.common.seed.unwrap_or(7);
    let mut spec = ExperimentSpec::desk(seed);
    if let Some(e) = a.pretrain_epochs {
        spec.pretrain.epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        spec.finetune.epochs = e;
    }
    let s = run_experiment(&spec, &a.out)?;
    println!(
        "EER 3D {:.4}  2D {:.4}  Rank-1 all-pose {:.4}  same-pose {:.4}  dual {:.4}  2D {:.4}",
        s.eer_3d, s.eer_2d, s.rank1_all_pose, s.rank1_same_pose, s.rank1_dual, s.rank1_2d
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("G3DM_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("G3DM_THREADS=`{v}` is not a count")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Lift(a) => lift(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Finetune(a) => finetune(a),
        Cmd::Embed(a) => embed(a),
        Cmd::Match(a) => do_match(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Fuse(a) => fuse(a),
        Cmd::Report(a) => report(a),
        Cmd::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
