//! Command-line front end. Tables go to stdout, machine-readable reports to files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::{generate_world, load_world, save_world, PayloadDtype, WorldFiles, WorldSpec, WORLD_SPEC_FILE};
use crate::dataset::{ClassId, FewShotDataset};
use crate::episodes::{
    evaluate, meta_train, prototype_similarity_report, rank_curve_report, EpisodeConfig, EvalReport,
    MetaTrainConfig, Pipeline, PrototypeMode, DEFAULT_EPISODES, DEFAULT_N_WAY, DEFAULT_QUERIES,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, DEFAULT_LAMBDA, DEFAULT_VARIANCE_FLOOR};
use crate::io::write_atomic;
use crate::knowledge::{compute_attribute_stats, compute_base_prototypes, inject_knowledge_noise, AttributeStats};
use crate::linalg;
use crate::nn::SgdConfig;
use crate::protocomnet::{
    load_model, save_model, sidecar_path, train_completion, ArchConfig, CompletionTrainConfig, ProtoComNet,
    TrainingMetadata, DEFAULT_INITIAL_SCALE,
};

#[derive(Debug, Parser)]
#[command(name = "protofuse", version, about = "Prototype completion and fusion for few-shot classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding world.
    Gen(GenArgs),
    /// Train the completion network on base classes.
    TrainCompletion(TrainCompletionArgs),
    /// Episodically fine-tune a trained completion network.
    MetaTrain(MetaTrainArgs),
    /// Evaluate one prototype mode.
    Eval(EvalArgs),
    /// Evaluate every prototype mode for several shot counts.
    Ablate(AblateArgs),
    /// Evaluate under randomly corrupted class-attribute associations.
    NoiseSweep(NoiseSweepArgs),
    /// Prototype similarity and rank-curve diagnostics.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 300)]
    pub semantic_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub base_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub val_classes: usize,
    #[arg(long, default_value_t = 20)]
    pub novel_classes: usize,
    #[arg(long, default_value_t = 48)]
    pub attributes: usize,
    #[arg(long, default_value_t = 3)]
    pub min_attributes: usize,
    #[arg(long, default_value_t = 6)]
    pub max_attributes: usize,
    #[arg(long, default_value_t = 100)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long)]
    pub novel_noise_std: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub dropout_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub offset_scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub semantic_noise: f64,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
    /// Replace an existing world in `--out`.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    /// World directory produced by `gen` or laid out the same way.
    #[arg(long)]
    pub world: PathBuf,
    /// Knowledge file overriding `<world>/knowledge.json`.
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FusionArgs {
    /// Soft-assignment sharpness.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = DEFAULT_VARIANCE_FLOOR)]
    pub variance_floor: f64,
}

impl FusionArgs {
    fn config(&self) -> Result<FusionConfig> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("--lambda must be positive, got {}", self.lambda)));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "--variance-floor must be positive, got {}",
                self.variance_floor
            )));
        }
        Ok(FusionConfig {
            lambda: self.lambda,
            variance_floor: self.variance_floor,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainCompletionArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    /// Checkpoint to write; its sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Support samples averaged into each incomplete prototype.
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    /// Tasks per epoch (default: four per base class).
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    /// Initial classifier scale.
    #[arg(long, default_value_t = DEFAULT_INITIAL_SCALE)]
    pub scale: f64,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct MetaTrainArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = DEFAULT_N_WAY)]
    pub n_way: usize,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[arg(long, default_value_t = DEFAULT_QUERIES)]
    pub queries: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes_per_epoch: usize,
    #[command(flatten)]
    pub fusion: FusionArgs,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Novel,
    Val,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_N_WAY)]
    pub n_way: usize,
    #[arg(long, default_value_t = DEFAULT_QUERIES)]
    pub queries: usize,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    pub episodes: usize,
    /// Evaluation split.
    #[arg(long, value_enum, default_value = "novel")]
    pub split: SplitArg,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "gauss-fusion")]
    pub mode: PrototypeMode,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    /// Probability of flipping each class-attribute association.
    #[arg(long, default_value_t = 0.0)]
    pub gamma_noise: f64,
    /// Seed for knowledge corruption (default: `--seed`).
    #[arg(long)]
    pub noise_seed: Option<u64>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub k_shot: Vec<usize>,
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoiseSweepArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    pub gamma_noise: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[command(flatten)]
    pub episodes: EpisodeArgs,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory receiving `similarity.json` and `rank_curve.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_N_WAY)]
    pub n_way: usize,
    #[arg(long, default_value_t = 1)]
    pub k_shot: usize,
    #[arg(long, default_value_t = DEFAULT_QUERIES)]
    pub queries: usize,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
    /// Moving-average window of the rank curve.
    #[arg(long, default_value_t = 50)]
    pub window: usize,
    #[arg(long, value_enum, default_value = "novel")]
    pub split: SplitArg,
    #[command(flatten)]
    pub fusion: FusionArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::TrainCompletion(a) => cmd_train_completion(&a),
        Command::MetaTrain(a) => cmd_meta_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::NoiseSweep(a) => cmd_noise_sweep(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

// ---------------------------------------------------------------------------
// Path checks, run before any work
// ---------------------------------------------------------------------------

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} {} does not exist", path.display())))
    }
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn check_output(path: &Path) -> Result<()> {
    require_dir(parent_dir(path), "output directory")
}

fn check_new_checkpoint(path: &Path, overwrite: bool) -> Result<()> {
    check_output(path)?;
    if !overwrite && (path.exists() || sidecar_path(path).exists()) {
        return Err(Error::InvalidArgument(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn check_world(args: &WorldArgs) -> Result<()> {
    require_dir(&args.world, "world")?;
    if let Some(k) = &args.knowledge {
        require_file(k, "knowledge file")?;
    }
    Ok(())
}

fn check_checkpoint(path: &Path) -> Result<()> {
    require_file(path, "checkpoint")?;
    require_file(&sidecar_path(path), "checkpoint sidecar")
}

fn check_fraction(v: f64, flag: &str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{flag} must lie in [0, 1], got {v}")))
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value).expect("report serializes");
    json.push('\n');
    write_atomic(path, json.as_bytes())
}

struct Loaded {
    world: WorldFiles,
    stats: AttributeStats,
}

fn load(args: &WorldArgs) -> Result<Loaded> {
    let world = load_world(&args.world, args.knowledge.as_deref())?;
    let stats = compute_attribute_stats(&world.base, &world.knowledge)?;
    Ok(Loaded { world, stats })
}

fn load_net(path: &Path, loaded: &Loaded) -> Result<(ProtoComNet, TrainingMetadata)> {
    let (net, sidecar) = load_model(path)?;
    if sidecar.embed_dim != loaded.world.base.dim() {
        return Err(Error::dim("checkpoint embedding dimension", loaded.world.base.dim(), sidecar.embed_dim));
    }
    if sidecar.semantic_dim != loaded.world.knowledge.semantic_dim() {
        return Err(Error::dim(
            "checkpoint semantic dimension",
            loaded.world.knowledge.semantic_dim(),
            sidecar.semantic_dim,
        ));
    }
    Ok((net, sidecar.training))
}

fn eval_split(world: &WorldFiles, split: SplitArg) -> Result<&FewShotDataset> {
    match split {
        SplitArg::Novel => Ok(&world.novel),
        SplitArg::Val => world
            .val
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("world has no validation split".into())),
    }
}

fn episode_config(args: &EpisodeArgs, k_shot: usize) -> EpisodeConfig {
    EpisodeConfig {
        n_way: args.n_way,
        k_shot,
        m_query: args.queries,
        episodes: args.episodes,
        seed: args.seed,
    }
}

fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn print_eval_header() {
    println!("{:<16} {:>3} {:>3} {:>9} {:>9} {:>8}", "mode", "N", "K", "episodes", "accuracy", "ci95");
}

fn print_eval_row(r: &EvalReport) {
    println!(
        "{:<16} {:>3} {:>3} {:>9} {:>9} {:>8}",
        r.mode.as_str(),
        r.n_way,
        r.k_shot,
        r.episodes,
        percent(r.mean_acc),
        format!("±{}", percent(r.ci95))
    );
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    if args.out.join(WORLD_SPEC_FILE).exists() && !args.overwrite {
        return Err(Error::InvalidArgument(format!(
            "{} already holds a world; pass --overwrite to replace it",
            args.out.display()
        )));
    }
    let spec = WorldSpec {
        embed_dim: args.embed_dim,
        semantic_dim: args.semantic_dim,
        num_base_classes: args.base_classes,
        num_val_classes: args.val_classes,
        num_novel_classes: args.novel_classes,
        num_attributes: args.attributes,
        attributes_per_class: (args.min_attributes, args.max_attributes),
        samples_per_class: args.samples_per_class,
        noise_std: args.noise_std,
        novel_noise_std: args.novel_noise_std,
        dropout_rate: args.dropout_rate,
        offset_scale: args.offset_scale,
        semantic_noise: args.semantic_noise,
        seed: args.seed,
    };
    spec.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let world = generate_world(&spec)?;
    let dtype = match args.dtype {
        DtypeArg::F32 => PayloadDtype::F32le,
        DtypeArg::F64 => PayloadDtype::F64le,
    };
    save_world(&world, &args.out, dtype)?;
    println!(
        "world written to {}: {} base / {} val / {} novel samples, d = {}, {} attributes",
        args.out.display(),
        world.base.len(),
        world.val.as_ref().map_or(0, FewShotDataset::len),
        world.novel.len(),
        spec.embed_dim,
        spec.num_attributes
    );
    Ok(())
}

pub fn cmd_train_completion(args: &TrainCompletionArgs) -> Result<()> {
    check_world(&args.world)?;
    check_new_checkpoint(&args.out, args.overwrite)?;
    let sgd = SgdConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
    };
    sgd.validate()?;
    let loaded = load(&args.world)?;
    let table = compute_base_prototypes(&loaded.world.base)?;
    let arch = ArchConfig::new(loaded.world.base.dim(), loaded.world.knowledge.semantic_dim());
    let mut net = ProtoComNet::new(arch, args.seed);
    net.set_scale(args.scale)?;
    let config = CompletionTrainConfig {
        sgd,
        k_shot: args.k_shot,
        tasks_per_epoch: args.tasks_per_epoch,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let losses = train_completion(&mut net, &loaded.world.knowledge, &loaded.stats, &loaded.world.base, &table, &config)?;
    let meta = TrainingMetadata {
        completion_seed: Some(args.seed),
        completion_epochs: args.epochs,
        completion_losses: losses.clone(),
        ..TrainingMetadata::default()
    };
    save_model(&net, &meta, &args.out)?;
    println!("{:>6} {:>12}", "epoch", "loss");
    for (i, l) in losses.iter().enumerate() {
        if i == 0 || (i + 1) % 10 == 0 || i + 1 == losses.len() {
            println!("{:>6} {:>12.6}", i + 1, l);
        }
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

pub fn cmd_meta_train(args: &MetaTrainArgs) -> Result<()> {
    check_world(&args.world)?;
    check_checkpoint(&args.checkpoint)?;
    check_new_checkpoint(&args.out, args.overwrite)?;
    let sgd = SgdConfig {
        learning_rate: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
    };
    sgd.validate()?;
    let fusion = args.fusion.config()?;
    let loaded = load(&args.world)?;
    let (mut net, mut meta) = load_net(&args.checkpoint, &loaded)?;
    let config = MetaTrainConfig {
        sgd,
        n_way: args.n_way,
        k_shot: args.k_shot,
        m_query: args.queries,
        episodes_per_epoch: args.episodes_per_epoch,
        fusion,
        seed: args.seed,
    };
    let losses = meta_train(&mut net, &loaded.world.knowledge, &loaded.stats, &loaded.world.base, &config)?;
    meta.meta_seed = Some(args.seed);
    meta.meta_epochs = args.epochs;
    meta.meta_losses = losses.clone();
    save_model(&net, &meta, &args.out)?;
    println!("{:>6} {:>12}", "epoch", "loss");
    for (i, l) in losses.iter().enumerate() {
        println!("{:>6} {:>12.6}", i + 1, l);
    }
    println!("scale {:.4}; checkpoint written to {}", net.scale(), args.out.display());
    Ok(())
}

fn check_eval_inputs(world: &WorldArgs, checkpoint: &Path, report: Option<&Path>) -> Result<()> {
    check_world(world)?;
    check_checkpoint(checkpoint)?;
    if let Some(r) = report {
        check_output(r)?;
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    check_eval_inputs(&args.world, &args.checkpoint, args.report.as_deref())?;
    check_fraction(args.gamma_noise, "--gamma-noise")?;
    let fusion = args.episodes.fusion.config()?;
    let loaded = load(&args.world)?;
    let (net, _) = load_net(&args.checkpoint, &loaded)?;
    let knowledge = inject_knowledge_noise(
        &loaded.world.knowledge,
        args.gamma_noise,
        args.noise_seed.unwrap_or(args.episodes.seed),
    )?;
    let pipeline = Pipeline {
        net: &net,
        knowledge: &knowledge,
        stats: &loaded.stats,
        fusion,
    };
    let dataset = eval_split(&loaded.world, args.episodes.split)?;
    let report = evaluate(&pipeline, dataset, args.mode, &episode_config(&args.episodes, args.k_shot))?;
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    print_eval_header();
    print_eval_row(&report);
    Ok(())
}

#[derive(Debug, Serialize)]
struct AblationReport<'a> {
    seed: u64,
    rows: &'a [EvalReport],
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    check_eval_inputs(&args.world, &args.checkpoint, args.report.as_deref())?;
    if args.k_shot.is_empty() {
        return Err(Error::InvalidArgument("--k-shot needs at least one value".into()));
    }
    let fusion = args.episodes.fusion.config()?;
    let loaded = load(&args.world)?;
    let (net, _) = load_net(&args.checkpoint, &loaded)?;
    let pipeline = Pipeline {
        net: &net,
        knowledge: &loaded.world.knowledge,
        stats: &loaded.stats,
        fusion,
    };
    let dataset = eval_split(&loaded.world, args.episodes.split)?;
    let mut rows = Vec::new();
    for &k in &args.k_shot {
        for mode in PrototypeMode::ALL {
            rows.push(evaluate(&pipeline, dataset, mode, &episode_config(&args.episodes, k))?);
        }
    }
    if let Some(path) = &args.report {
        write_json(
            path,
            &AblationReport {
                seed: args.episodes.seed,
                rows: &rows,
            },
        )?;
    }
    print_eval_header();
    for r in &rows {
        print_eval_row(r);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoiseRow {
    gamma_noise: f64,
    reports: Vec<EvalReport>,
}

#[derive(Debug, Serialize)]
struct NoiseSweepReport<'a> {
    seed: u64,
    noise_seed: u64,
    rows: &'a [NoiseRow],
}

pub fn cmd_noise_sweep(args: &NoiseSweepArgs) -> Result<()> {
    check_eval_inputs(&args.world, &args.checkpoint, args.report.as_deref())?;
    if args.gamma_noise.is_empty() {
        return Err(Error::InvalidArgument("--gamma-noise needs at least one value".into()));
    }
    for &g in &args.gamma_noise {
        check_fraction(g, "--gamma-noise")?;
    }
    let fusion = args.episodes.fusion.config()?;
    let loaded = load(&args.world)?;
    let (net, _) = load_net(&args.checkpoint, &loaded)?;
    let dataset = eval_split(&loaded.world, args.episodes.split)?;
    let noise_seed = args.noise_seed.unwrap_or(args.episodes.seed);
    let config = episode_config(&args.episodes, args.k_shot);
    let modes = [PrototypeMode::CompletedOnly, PrototypeMode::GaussFusion];
    let mut rows = Vec::new();
    for &g in &args.gamma_noise {
        let knowledge = inject_knowledge_noise(&loaded.world.knowledge, g, noise_seed)?;
        let pipeline = Pipeline {
            net: &net,
            knowledge: &knowledge,
            stats: &loaded.stats,
            fusion,
        };
        let reports = modes
            .iter()
            .map(|&m| evaluate(&pipeline, dataset, m, &config))
            .collect::<Result<Vec<_>>>()?;
        rows.push(NoiseRow { gamma_noise: g, reports });
    }
    if let Some(path) = &args.report {
        write_json(
            path,
            &NoiseSweepReport {
                seed: args.episodes.seed,
                noise_seed,
                rows: &rows,
            },
        )?;
    }
    println!("{:>6} {:>16} {:>16}", "gamma", modes[0].as_str(), modes[1].as_str());
    let base: Vec<f64> = rows[0].reports.iter().map(|r| r.mean_acc).collect();
    for row in &rows {
        println!(
            "{:>6.2} {:>16} {:>16}",
            row.gamma_noise,
            percent(row.reports[0].mean_acc),
            percent(row.reports[1].mean_acc)
        );
    }
    let last = rows.last().expect("non-empty");
    println!(
        "{:>6} {:>16} {:>16}",
        "drop",
        percent(base[0] - last.reports[0].mean_acc),
        percent(base[1] - last.reports[1].mean_acc)
    );
    Ok(())
}

/// True centers from the world when present, otherwise full-class means.
fn centers_for(world: &WorldFiles, dataset: &FewShotDataset) -> Result<std::collections::BTreeMap<ClassId, Vec<f64>>> {
    if let Some(c) = &world.centers {
        return Ok(c.clone());
    }
    log::warn!("world has no ground-truth centers; using full-class means");
    dataset
        .classes()
        .map(|c| Ok((c, linalg::mean_of(dataset.rows_of(c), dataset.dim())?)))
        .collect()
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    check_world(&args.world)?;
    check_checkpoint(&args.checkpoint)?;
    require_dir(&args.out_dir, "output directory")?;
    let fusion = args.fusion.config()?;
    let loaded = load(&args.world)?;
    let (net, _) = load_net(&args.checkpoint, &loaded)?;
    let dataset = eval_split(&loaded.world, args.split)?;
    let centers = centers_for(&loaded.world, dataset)?;
    let pipeline = Pipeline {
        net: &net,
        knowledge: &loaded.world.knowledge,
        stats: &loaded.stats,
        fusion,
    };
    let config = EpisodeConfig {
        n_way: args.n_way,
        k_shot: args.k_shot,
        m_query: args.queries,
        episodes: args.episodes,
        seed: args.seed,
    };
    let sim = prototype_similarity_report(&pipeline, dataset, &centers, &config)?;
    let curve = rank_curve_report(&pipeline, dataset, &centers, args.window)?;
    write_json(&args.out_dir.join("similarity.json"), &sim)?;
    write_atomic(&args.out_dir.join("rank_curve.csv"), curve.to_csv().as_bytes())?;

    println!("{:<24} {:>10}", "prototype", "cos(center)");
    println!("{:<24} {:>10.4}", "mean-based", sim.mean_based);
    println!("{:<24} {:>10.4}", "completed", sim.completed);
    println!("{:<24} {:>10.4}", "fused", sim.fused);
    if let (Some(first), Some(last)) = (curve.raw.first(), curve.raw.last()) {
        let (cf, cl) = (curve.completed[0], curve.completed[curve.completed.len() - 1]);
        println!(
            "rank curve ({} points, window {}): raw {first:.4} -> {last:.4}, completed {cf:.4} -> {cl:.4}",
            curve.raw.len(),
            curve.window
        );
    }
    Ok(())
}
