use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ccreid::checkpoint;
use ccreid::config::RunConfig;
use ccreid::data::synthetic::generate_synthetic;
use ccreid::data::{file_hash, Split};
use ccreid::eval::{self, Protocol, ProtocolMode};
use ccreid::model::{Model, ModuleFlags};
use ccreid::pipeline::{self, RunInfo, RunPaths};
use ccreid::trainer::LrSchedule;
use ccreid::{Error, Result};

const OUTPUT_ROOT_ENV: &str = "CCREID_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "ccreid", version, about = "Cloth-changing person re-identification: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Run stage 1, stage 2 or both.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write report files.
    Eval(EvalArgs),
    /// Write the cosine similarity matrix of query and gallery features.
    ExportSimilarity(ExportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration. Without it the desk preset is used.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `output_dir` from the config, then to
    /// `$CCREID_OUTPUT_ROOT/seed-<seed>`, then to `runs/seed-<seed>`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Read the dataset from a directory written by `generate`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Train and evaluate without CIS, BGA and DHP.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    outfits: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Seed of the generator (independent of the run seed).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "both")]
    stage: StageArg,
    #[arg(long)]
    epochs1: Option<usize>,
    #[arg(long)]
    epochs2: Option<usize>,
    /// Stage-1 checkpoint to start stage 2 from. Defaults to the one in the
    /// output directory.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Validate the configuration and print the learning-rate schedule.
    #[arg(long)]
    dry_run: bool,
    #[arg(long, hide = true)]
    tamper_frozen_at: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    ClothChanging,
    SameClothes,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    protocol: Option<ModeArg>,
    #[arg(long)]
    exclude_same_camera: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write a grayscale heatmap with this many pixels per cell.
    #[arg(long)]
    heatmap_cell: Option<u32>,
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    if common.baseline {
        cfg.model.modules = ModuleFlags::NONE;
    }
    let out = match (&common.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("seed-{}", cfg.seed))
        }
    };
    Ok((cfg, out))
}

/// Exclusive ownership of a run directory for the lifetime of the value.
struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => {
                    Error::config(format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))
                }
                _ => Error::Io(e),
            })?;
        Ok(RunLock { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let (mut cfg, out) = resolve(&a.common)?;
    let spec = &mut cfg.data.synthetic;
    if let Some(v) = a.identities {
        spec.num_identities = v;
    }
    if let Some(v) = a.outfits {
        spec.outfits_per_identity = v;
    }
    if let Some(v) = a.images {
        spec.images_per_outfit = v;
    }
    if let Some(v) = a.cameras {
        spec.cameras = v;
    }
    if let Some(v) = a.data_seed {
        spec.seed = v;
    }
    spec.validate()?;
    let _lock = RunLock::acquire(&out)?;
    let ds = generate_synthetic(spec)?;
    ds.save(&out)?;
    let count = |s| ds.split(s).len();
    println!(
        "{} samples ({} train, {} query, {} gallery), {} identities, {} clothing labels",
        ds.len(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        ds.num_identities,
        ds.num_clothes
    );
    println!("manifest sha256 {}", file_hash(&out.join(ccreid::data::MANIFEST_FILE))?);
    Ok(())
}

fn print_schedule(stage: u8, schedule: &LrSchedule, epochs: usize, steps_per_epoch: usize) {
    println!("stage {stage}: {epochs} epochs, {steps_per_epoch} steps per epoch");
    println!("{:>6} {:>14}", "epoch", "lr");
    for e in 1..=epochs {
        println!("{e:>6} {:>14.6e}", schedule.lr(e, (e - 1) * steps_per_epoch));
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, out) = resolve(&a.common)?;
    if let Some(e) = a.epochs1 {
        cfg.stage1.epochs = e;
    }
    if let Some(e) = a.epochs2 {
        cfg.stage2.epochs = e;
    }
    cfg.validate()?;
    let paths = RunPaths::new(&out);
    let from = a.from.clone().unwrap_or_else(|| paths.stage1());
    let (do1, do2) = match a.stage {
        StageArg::One => (true, false),
        StageArg::Two => (false, true),
        StageArg::Both => (true, true),
    };
    let data = pipeline::load_dataset(&cfg)?;
    if a.dry_run {
        let per_pass = data.identities(Split::Train).len().div_ceil(cfg.stage1.ids_per_batch);
        let plan1 = cfg.plan1(per_pass)?;
        let plan2 = cfg.plan2()?;
        if do1 {
            print_schedule(1, &plan1.schedule, plan1.epochs, per_pass * plan1.passes_per_epoch);
        }
        if do2 {
            let per = data.identities(Split::Train).len().div_ceil(cfg.stage2.ids_per_batch) * plan2.passes_per_epoch;
            print_schedule(2, &plan2.schedule, plan2.epochs, per);
        }
        return Ok(());
    }
    if do2 && !do1 && !from.exists() {
        return Err(Error::config(format!("stage 2 needs a stage-1 checkpoint; {} does not exist", from.display())));
    }
    let _lock = RunLock::acquire(&out)?;
    fs::write(paths.config(), cfg.to_toml()?)?;
    let info = RunInfo {
        seed: cfg.seed,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_hash: data.content_hash(),
        num_samples: data.len(),
    };
    fs::write(paths.run_info(), serde_json::to_vec_pretty(&info)?)?;
    let mut opts = pipeline::train_options(&cfg)?;
    opts.tamper_frozen_at = a.tamper_frozen_at;
    let model = if do1 {
        if paths.log().exists() {
            fs::remove_file(paths.log())?;
        }
        let model = Model::new(&pipeline::model_config_for(&cfg, &data), cfg.seed)?;
        pipeline::run_stage1(&cfg, &model, &data, &opts, pipeline::new_log(Some(&paths))?)?;
        checkpoint::save(&paths.stage1(), &model, &pipeline::manifest(&cfg, &model, "stage1")?, None)?;
        println!("wrote {}", paths.stage1().display());
        model
    } else {
        let (model, loaded) = checkpoint::load_model(&from)?;
        if loaded.manifest.stage != "stage1" {
            return Err(Error::config(format!("{} is a {} checkpoint, not stage1", from.display(), loaded.manifest.stage)));
        }
        model
    };
    if do2 {
        pipeline::run_stage2(&cfg, &model, &data, &opts, pipeline::new_log(Some(&paths))?)?;
        checkpoint::save(&paths.stage2(), &model, &pipeline::manifest(&cfg, &model, "stage2")?, None)?;
        println!("wrote {}", paths.stage2().display());
    }
    Ok(())
}

fn protocol_of(cfg: &RunConfig, mode: Option<ModeArg>, exclude_same_camera: bool) -> Protocol {
    let mut p = cfg.eval.protocol;
    if let Some(m) = mode {
        p.mode = match m {
            ModeArg::Standard => ProtocolMode::Standard,
            ModeArg::ClothChanging => ProtocolMode::ClothChanging,
            ModeArg::SameClothes => ProtocolMode::SameClothes,
        };
    }
    p.exclude_same_camera |= exclude_same_camera;
    p
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, out) = resolve(&a.common)?;
    cfg.validate()?;
    let data = pipeline::load_dataset(&cfg)?;
    let (model, _) = checkpoint::load_model(&a.checkpoint)?;
    let protocol = protocol_of(&cfg, a.protocol, a.exclude_same_camera);
    let report = eval::evaluate(&model, &data, protocol, &cfg.data.augment, cfg.seed, cfg.eval.max_rank)?;
    let paths = RunPaths::new(&out);
    fs::create_dir_all(&out)?;
    fs::write(paths.report(), serde_json::to_vec_pretty(&report)?)?;
    fs::write(paths.cmc(), report.cmc_csv())?;
    println!(
        "{}: rank-1 {:.4}, mAP {:.4} over {} queries ({} dropped)",
        report.protocol, report.rank1(), report.map, report.num_valid_queries, report.num_dropped_queries
    );
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let (cfg, out) = resolve(&a.common)?;
    cfg.validate()?;
    let data = pipeline::load_dataset(&cfg)?;
    let (model, _) = checkpoint::load_model(&a.checkpoint)?;
    let mut idx = data.split(Split::Query);
    idx.extend(data.split(Split::Gallery));
    let feats = eval::extract_features(&model, &data, &idx, &cfg.data.augment, cfg.seed, 32)?;
    fs::create_dir_all(&out)?;
    let csv = out.join("similarity.csv");
    let png = out.join("similarity.png");
    let m = eval::export_similarity_matrix(&feats, &csv, a.heatmap_cell.map(|c| (png.as_path(), c)))?;
    println!("wrote {}x{} matrix to {}", m.nrows(), m.ncols(), csv.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportSimilarity(a) => cmd_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
