//! Command-line entry points: dataset generation, mask preview,
//! pretraining, finetuning, evaluation and report emission.
//!
//! Every run directory is replayable from its `config.resolved.json`; a
//! `run.json` manifest records the resolved config path, an input content
//! hash, timestamps and the outputs written. Errors surface as one
//! machine-readable JSON line on stderr with a nonzero exit code.

use std::path::{Path, PathBuf};
use std::sync::Once;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TcsError};
use crate::eval::{evaluate_segmentation, recon_ssim_report, MetricReport};
use crate::imaging::HuSlice;
use crate::io::{csv_float, read_volume, write_pgm, CsvWriter};
use crate::losses::SsimLossForm;
use crate::masking::{
    build_patch_mask, build_tissue_mask, PatchMaskSpec, TissueMaskSpec,
};
use crate::model::{HeadKind, Model};
use crate::phantom::{generate_dataset, load_dataset, PhantomSpec};
use crate::training::{
    finetune, pretrain, FinetuneConfig, InitSource, MaskKind, MaskResample, PretrainConfig,
    SplitSpec, PAPER_FINETUNE_LR,
};

static POOL_INIT: Once = Once::new();

/// Cap rayon workers at TCSMAE_THREADS when set; call once per process.
pub fn init_thread_pool() {
    POOL_INIT.call_once(|| {
        if let Ok(value) = std::env::var("TCSMAE_THREADS") {
            if let Ok(threads) = value.parse::<usize>() {
                if threads >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build_global();
                }
            }
        }
    });
}

/// Render an error as the single-line machine-readable form the binary
/// prints on stderr.
pub fn error_json(e: &TcsError) -> String {
    serde_json::json!({"error": e.to_string()}).to_string()
}

#[derive(Parser, Debug)]
#[command(
    name = "tcsmae",
    about = "Tissue-contrastive semi-masked autoencoder pretraining on synthetic chest CT phantoms",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Tissue / patch mask inspection.
    Mask {
        #[command(subcommand)]
        command: MaskCommand,
    },
    /// Dual-branch semi-masked pretraining.
    Pretrain(PretrainArgs),
    /// Downstream segmentation finetuning.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset (segmentation metrics or
    /// reconstruction SSIM).
    Eval(EvalArgs),
    /// Combine run outputs into comparison CSV curves and optional plots.
    Report(ReportArgs),
    /// Model inspection.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand, Debug)]
pub enum PhantomCommand {
    /// Generate a dataset of single-slice phantom volumes with masks.
    Gen(PhantomGenArgs),
}

#[derive(Args, Debug)]
pub struct PhantomGenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of slices to generate.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Slice resolution (multiple of 32).
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// Global seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability that a slice carries a lesion.
    #[arg(long, default_value_t = 0.0)]
    pub lesion_prob: f64,
}

#[derive(Subcommand, Debug)]
pub enum MaskCommand {
    /// Emit a mask as PGM plus a JSON record of the random choice.
    Preview(MaskPreviewArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskModeArg {
    Tissue,
    Patch,
}

#[derive(Args, Debug)]
pub struct MaskPreviewArgs {
    /// Input volume (raw + JSON sidecar).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Slice index within the volume.
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Masking strategy.
    #[arg(long, value_enum, default_value_t = MaskModeArg::Tissue)]
    pub mask: MaskModeArg,
    /// Number of HU intervals (tissue masking).
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Mask ratio in (0, 1).
    #[arg(long, default_value_t = 0.75)]
    pub rho: f64,
    /// Patch side length (patch masking).
    #[arg(long, default_value_t = 16)]
    pub patch_size: usize,
    /// Mask RNG seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SsimFormArg {
    Sum,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskResampleArg {
    PerImage,
    PerBatch,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Dataset directory (from `phantom gen`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Masking strategy for the masked branch.
    #[arg(long, value_enum)]
    pub mask: Option<MaskModeArg>,
    /// Number of HU intervals (tissue masking).
    #[arg(long)]
    pub k: Option<usize>,
    /// Mask ratio in (0, 1).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Patch side length (patch masking).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Contrastive embedding scales arm: 0..=3.
    #[arg(long)]
    pub scales: Option<usize>,
    /// Contrastive loss weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Initial contrastive temperature.
    #[arg(long)]
    pub gamma_init: Option<f64>,
    /// Reconstruction loss form.
    #[arg(long, value_enum)]
    pub ssim_form: Option<SsimFormArg>,
    /// When the masked interval/block choice is redrawn.
    #[arg(long, value_enum)]
    pub mask_resample: Option<MaskResampleArg>,
    /// Apply seeded horizontal-flip augmentation.
    #[arg(long, default_value_t = false)]
    pub hflip: bool,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Labeled dataset directory (from `phantom gen`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `scratch` or a pretraining run directory to inherit the trunk from.
    #[arg(long)]
    pub from: String,
    /// JSON config file; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the paper's finetuning learning rate (1e-6) instead of the
    /// desk-scale default.
    #[arg(long, default_value_t = false)]
    pub paper_lr: bool,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Segmentation classes: 2 = binary head, >2 = softmax head.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Holdout validation fraction (ignored with --folds).
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Enable k-fold cross-validation with this many folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold index used for validation (with --folds).
    #[arg(long)]
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    /// DSC / Hausdorff against ground-truth masks.
    Seg,
    /// Per-sample reconstruction SSIM, masked vs unmasked inputs.
    Recon,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (checkpoint.bin + manifest.json).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Seg)]
    pub mode: EvalMode,
    /// Tissue-mask intervals for recon mode.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Tissue-mask ratio for recon mode.
    #[arg(long, default_value_t = 0.75)]
    pub rho: f64,
    /// Mask seed for recon mode.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to combine (repeat the flag per run).
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also render PPM line plots of the curves.
    #[arg(long, default_value_t = false)]
    pub plot: bool,
}

#[derive(Subcommand, Debug)]
pub enum ModelCommand {
    /// Print the layer/shape table of a checkpoint or a fresh config.
    Describe(ModelDescribeArgs),
}

#[derive(Args, Debug)]
pub struct ModelDescribeArgs {
    /// Checkpoint directory to describe; omitted = fresh default model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Contrastive scales arm for a fresh model.
    #[arg(long, default_value_t = 2)]
    pub scales: usize,
    /// Resolution for a fresh model.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

/// Run manifest written as `run.json` into each run directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub resolved_config: String,
    /// SHA-256 over the input manifest and resolved config.
    pub input_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_run_manifest(
    dir: &Path,
    subcommand: &str,
    input_hash: String,
    started: u64,
    outputs: &[&str],
) -> Result<()> {
    for name in outputs {
        let path = dir.join(name);
        if !path.exists() {
            return Err(TcsError::Malformed {
                path: path.display().to_string(),
                message: "declared run output missing at exit".into(),
            });
        }
    }
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        resolved_config: "config.resolved.json".to_string(),
        input_hash,
        started_unix: started,
        finished_unix: now_unix(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let path = dir.join("run.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| TcsError::io(&path, e))
}

fn write_resolved_config<T: Serialize>(dir: &Path, config: &T) -> Result<Vec<u8>> {
    std::fs::create_dir_all(dir).map_err(|e| TcsError::io(dir, e))?;
    let bytes = serde_json::to_vec_pretty(config).expect("config serializes");
    let path = dir.join("config.resolved.json");
    std::fs::write(&path, &bytes).map_err(|e| TcsError::io(&path, e))?;
    Ok(bytes)
}

fn read_dataset_manifest_bytes(dir: &Path) -> Result<Vec<u8>> {
    let path = dir.join("dataset.json");
    std::fs::read(&path).map_err(|e| TcsError::io(&path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    init_thread_pool();
    match cli.command {
        Command::Phantom { command } => match command {
            PhantomCommand::Gen(args) => run_phantom_gen(args),
        },
        Command::Mask { command } => match command {
            MaskCommand::Preview(args) => run_mask_preview(args),
        },
        Command::Pretrain(args) => run_pretrain(args),
        Command::Finetune(args) => run_finetune(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::Model { command } => match command {
            ModelCommand::Describe(args) => run_model_describe(args),
        },
    }
}

fn run_phantom_gen(args: PhantomGenArgs) -> Result<()> {
    let spec = PhantomSpec::new(args.resolution, args.seed, args.lesion_prob)?;
    let manifest = generate_dataset(&spec, args.n, &args.out)?;
    println!(
        "wrote {} slices to {} ({} with lesions)",
        manifest.entries.len(),
        args.out.display(),
        manifest.entries.iter().filter(|e| e.has_lesion).count()
    );
    Ok(())
}

/// JSON record emitted next to the mask preview PGM.
#[derive(Debug, Serialize)]
struct MaskPreviewRecord {
    seed: u64,
    mask: String,
    k: Option<usize>,
    patch_size: Option<usize>,
    rho: f64,
    masked_intervals: Vec<usize>,
    masked_fraction: f64,
}

fn run_mask_preview(args: MaskPreviewArgs) -> Result<()> {
    let slices = read_volume(&args.input)?;
    let slice = slices.get(args.slice).ok_or_else(|| {
        TcsError::InvalidInput(format!(
            "slice index {} out of range ({} slices)",
            args.slice,
            slices.len()
        ))
    })?;
    std::fs::create_dir_all(&args.out).map_err(|e| TcsError::io(&args.out, e))?;
    let mask = match args.mask {
        MaskModeArg::Tissue => {
            let norm = crate::imaging::normalize_hu(
                slice,
                crate::imaging::DEFAULT_HU_MIN,
                crate::imaging::DEFAULT_HU_MAX,
            )?;
            build_tissue_mask(&norm, &TissueMaskSpec::new(args.k, args.rho, args.seed)?)?
        }
        MaskModeArg::Patch => build_patch_mask(
            slice.height(),
            slice.width(),
            &PatchMaskSpec::new(args.patch_size, args.rho, args.seed)?,
        )?,
    };
    let pgm_path = args.out.join("mask.pgm");
    write_pgm(&pgm_path, &mask.bits().mapv(|b| b as f64))?;
    let record = MaskPreviewRecord {
        seed: args.seed,
        mask: format!("{:?}", args.mask).to_lowercase(),
        k: (args.mask == MaskModeArg::Tissue).then_some(args.k),
        patch_size: (args.mask == MaskModeArg::Patch).then_some(args.patch_size),
        rho: args.rho,
        masked_intervals: mask.masked_indices().to_vec(),
        masked_fraction: mask.masked_fraction(),
    };
    let json_path = args.out.join("mask.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )
    .map_err(|e| TcsError::io(&json_path, e))?;
    println!(
        "mask: {} of {} indices chosen, masked fraction {:.4}",
        record.masked_intervals.len(),
        record.k.or(record.patch_size).unwrap_or(0),
        record.masked_fraction
    );
    Ok(())
}

fn load_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| TcsError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TcsError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn resolve_pretrain_config(args: &PretrainArgs) -> Result<PretrainConfig> {
    let mut cfg: PretrainConfig = match &args.config {
        Some(path) => load_json_config(path)?,
        None => PretrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.lr_decay {
        cfg.lr_decay = v;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(v) = args.scales {
        cfg.scales = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.gamma_init {
        cfg.gamma_init = v;
    }
    if let Some(v) = args.ssim_form {
        cfg.ssim_form = match v {
            SsimFormArg::Sum => SsimLossForm::Sum,
            SsimFormArg::Ratio => SsimLossForm::Ratio,
        };
    }
    if let Some(v) = args.mask_resample {
        cfg.mask_resample = match v {
            MaskResampleArg::PerImage => MaskResample::PerImageEpoch,
            MaskResampleArg::PerBatch => MaskResample::PerBatchEpoch,
        };
    }
    if args.hflip {
        cfg.hflip_augment = true;
    }
    // mask strategy: flag picks the mode; k/rho/patch-size refine it
    let base = match (args.mask, cfg.mask) {
        (Some(MaskModeArg::Tissue), MaskKind::Patch { rho, .. }) => MaskKind::Tissue { k: 8, rho },
        (Some(MaskModeArg::Patch), MaskKind::Tissue { rho, .. }) => {
            MaskKind::Patch { patch_size: 16, rho }
        }
        (_, current) => current,
    };
    cfg.mask = match base {
        MaskKind::Tissue { k, rho } => MaskKind::Tissue {
            k: args.k.unwrap_or(k),
            rho: args.rho.unwrap_or(rho),
        },
        MaskKind::Patch { patch_size, rho } => MaskKind::Patch {
            patch_size: args.patch_size.unwrap_or(patch_size),
            rho: args.rho.unwrap_or(rho),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let started = now_unix();
    let cfg = resolve_pretrain_config(&args)?;
    let data = load_dataset(&args.data)?;
    let slices: Vec<HuSlice> = data.into_iter().map(|(s, _)| s).collect();
    let config_bytes = write_resolved_config(&args.out, &cfg)?;
    let input_hash = sha256_hex(&[&read_dataset_manifest_bytes(&args.data)?, &config_bytes]);

    let output = pretrain(&slices, &cfg, &args.out)?;
    write_run_manifest(
        &args.out,
        "pretrain",
        input_hash,
        started,
        &[
            "config.resolved.json",
            "losses.csv",
            "checkpoint.bin",
            "manifest.json",
        ],
    )?;
    let first = crate::training::epoch_mean_ssim(&output.records, 0).unwrap_or(f64::NAN);
    let last =
        crate::training::epoch_mean_ssim(&output.records, cfg.epochs - 1).unwrap_or(f64::NAN);
    println!(
        "pretrained {} epochs x {} steps; epoch-mean L_ssim {first:.4} -> {last:.4}",
        cfg.epochs,
        output.records.len() / cfg.epochs
    );
    Ok(())
}

fn resolve_finetune_config(args: &FinetuneArgs) -> Result<FinetuneConfig> {
    let mut cfg: FinetuneConfig = match &args.config {
        Some(path) => load_json_config(path)?,
        None => FinetuneConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if args.paper_lr {
        cfg.learning_rate = PAPER_FINETUNE_LR;
    }
    if let Some(v) = args.resolution {
        cfg.resolution = v;
    }
    if let Some(classes) = args.classes {
        cfg.head = if classes <= 2 {
            HeadKind::SegBinary
        } else {
            HeadKind::SegMulti { classes }
        };
    }
    cfg.init = if args.from == "scratch" {
        InitSource::Scratch
    } else {
        InitSource::Checkpoint(PathBuf::from(&args.from))
    };
    if let Some(folds) = args.folds {
        cfg.split = SplitSpec::Fold {
            folds,
            index: args.fold.unwrap_or(0),
        };
    } else if let Some(val_fraction) = args.val_fraction {
        cfg.split = SplitSpec::Holdout { val_fraction };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_finetune(args: FinetuneArgs) -> Result<()> {
    let started = now_unix();
    let cfg = resolve_finetune_config(&args)?;
    let data = load_dataset(&args.data)?;
    let config_bytes = write_resolved_config(&args.out, &cfg)?;
    let input_hash = sha256_hex(&[&read_dataset_manifest_bytes(&args.data)?, &config_bytes]);

    let output = finetune(&data, &cfg, &args.out)?;
    write_run_manifest(
        &args.out,
        "finetune",
        input_hash,
        started,
        &[
            "config.resolved.json",
            "metrics.csv",
            "checkpoint.bin",
            "manifest.json",
        ],
    )?;
    if let Some(last) = output.epochs.last() {
        println!(
            "finetuned {} epochs; final val DSC {:.2}% (HD {})",
            cfg.epochs,
            last.report.dsc_mean,
            last.report
                .hd_mean
                .map(|v| format!("{v:.2}px"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReconSummary {
    samples: usize,
    mean_ssim_masked: f64,
    mean_ssim_unmasked: f64,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let started = now_unix();
    let model = Model::load(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| TcsError::io(&args.out, e))?;
    let config_bytes = write_resolved_config(
        &args.out,
        &serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "data": args.data.display().to_string(),
            "mode": format!("{:?}", args.mode).to_lowercase(),
            "k": args.k,
            "rho": args.rho,
            "seed": args.seed,
        }),
    )?;
    let input_hash = sha256_hex(&[&read_dataset_manifest_bytes(&args.data)?, &config_bytes]);

    match args.mode {
        EvalMode::Seg => {
            let classes = match model.config().head {
                HeadKind::SegBinary => 2,
                HeadKind::SegMulti { classes } => classes,
                HeadKind::Recon => {
                    return Err(TcsError::InvalidInput(
                        "seg evaluation needs a segmentation checkpoint; \
                         this one has a reconstruction head"
                            .into(),
                    ))
                }
            };
            let samples = evaluate_segmentation(&model, &data, classes)?;
            let mut csv = CsvWriter::create(&args.out.join("metrics.csv"), &["id", "dsc", "hd"])?;
            for row in crate::training::metrics_to_rows(&samples) {
                csv.row(&row)?;
            }
            csv.flush()?;
            let report = MetricReport::from_samples(&samples)?;
            let path = args.out.join("summary.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )
            .map_err(|e| TcsError::io(&path, e))?;
            write_run_manifest(
                &args.out,
                "eval",
                input_hash,
                started,
                &["config.resolved.json", "metrics.csv", "summary.json"],
            )?;
            println!(
                "evaluated {} samples: DSC {:.2}% +/- {:.2}",
                report.samples, report.dsc_mean, report.dsc_std
            );
        }
        EvalMode::Recon => {
            if model.config().head != HeadKind::Recon {
                return Err(TcsError::InvalidInput(
                    "recon evaluation needs a reconstruction checkpoint".into(),
                ));
            }
            let slices: Vec<HuSlice> = data.into_iter().map(|(s, _)| s).collect();
            let rows = recon_ssim_report(&model, &slices, args.k, args.rho, args.seed)?;
            let mut csv =
                CsvWriter::create(&args.out.join("recon_ssim.csv"), &["id", "condition", "ssim"])?;
            for row in &rows {
                csv.row(&[
                    row.id.to_string(),
                    row.condition.clone(),
                    csv_float(row.ssim),
                ])?;
            }
            csv.flush()?;
            let mean_of = |cond: &str| {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.condition == cond)
                    .map(|r| r.ssim)
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            };
            let summary = ReconSummary {
                samples: slices.len(),
                mean_ssim_masked: mean_of("masked"),
                mean_ssim_unmasked: mean_of("unmasked"),
            };
            let path = args.out.join("summary.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&summary).expect("summary serializes"),
            )
            .map_err(|e| TcsError::io(&path, e))?;
            write_run_manifest(
                &args.out,
                "eval",
                input_hash,
                started,
                &["config.resolved.json", "recon_ssim.csv", "summary.json"],
            )?;
            println!(
                "recon SSIM over {} samples: masked {:.4}, unmasked {:.4}",
                summary.samples, summary.mean_ssim_masked, summary.mean_ssim_unmasked
            );
        }
    }
    Ok(())
}

fn run_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn run_report(args: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| TcsError::io(&args.out, e))?;
    // per-epoch mean losses across runs
    let mut loss_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut dsc_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut losses_csv = CsvWriter::create(
        &args.out.join("losses_by_epoch.csv"),
        &["run", "epoch", "l_ssim", "l_con", "l_total"],
    )?;
    let mut metrics_csv = CsvWriter::create(
        &args.out.join("metrics_by_epoch.csv"),
        &["run", "epoch", "val_dsc_mean", "val_hd_mean"],
    )?;
    for run in &args.runs {
        let name = run_name(run);
        let losses_path = run.join("losses.csv");
        if losses_path.exists() {
            let (header, rows) = crate::io::read_csv(&losses_path)?;
            let col = |n: &str| header.iter().position(|h| h == n);
            let (Some(ce), Some(cs), Some(cc), Some(ct)) = (
                col("epoch"),
                col("l_ssim"),
                col("l_con"),
                col("l_total"),
            ) else {
                return Err(TcsError::Malformed {
                    path: losses_path.display().to_string(),
                    message: "missing expected loss columns".into(),
                });
            };
            let mut per_epoch: std::collections::BTreeMap<usize, Vec<(f64, Option<f64>, f64)>> =
                Default::default();
            for row in rows {
                let epoch: usize = row[ce].parse().unwrap_or(0);
                let l_ssim: f64 = row[cs].parse().unwrap_or(f64::NAN);
                let l_con: Option<f64> = row[cc].parse().ok();
                let l_total: f64 = row[ct].parse().unwrap_or(f64::NAN);
                per_epoch.entry(epoch).or_default().push((l_ssim, l_con, l_total));
            }
            let mut curve = Vec::new();
            for (epoch, vals) in &per_epoch {
                let n = vals.len() as f64;
                let ssim = vals.iter().map(|v| v.0).sum::<f64>() / n;
                let con: Vec<f64> = vals.iter().filter_map(|v| v.1).collect();
                let total = vals.iter().map(|v| v.2).sum::<f64>() / n;
                losses_csv.row(&[
                    name.clone(),
                    epoch.to_string(),
                    csv_float(ssim),
                    if con.is_empty() {
                        String::new()
                    } else {
                        csv_float(con.iter().sum::<f64>() / con.len() as f64)
                    },
                    csv_float(total),
                ])?;
                curve.push((*epoch as f64, ssim));
            }
            loss_series.push((name.clone(), curve));
        }
        let metrics_path = run.join("metrics.csv");
        if metrics_path.exists() {
            let (header, rows) = crate::io::read_csv(&metrics_path)?;
            let col = |n: &str| header.iter().position(|h| h == n);
            let (Some(ce), Some(cd), Some(ch)) =
                (col("epoch"), col("val_dsc_mean"), col("val_hd_mean"))
            else {
                return Err(TcsError::Malformed {
                    path: metrics_path.display().to_string(),
                    message: "missing expected metric columns".into(),
                });
            };
            let mut curve = Vec::new();
            for row in rows {
                let epoch: usize = row[ce].parse().unwrap_or(0);
                let dsc: f64 = row[cd].parse().unwrap_or(f64::NAN);
                metrics_csv.row(&[
                    name.clone(),
                    epoch.to_string(),
                    row[cd].clone(),
                    row[ch].clone(),
                ])?;
                curve.push((epoch as f64, dsc));
            }
            dsc_series.push((name.clone(), curve));
        }
    }
    losses_csv.flush()?;
    metrics_csv.flush()?;
    if args.plot {
        if !loss_series.is_empty() {
            plot_lines(&args.out.join("plot_l_ssim.ppm"), &loss_series)?;
        }
        if !dsc_series.is_empty() {
            plot_lines(&args.out.join("plot_val_dsc.ppm"), &dsc_series)?;
        }
    }
    println!(
        "report over {} runs written to {}",
        args.runs.len(),
        args.out.display()
    );
    Ok(())
}

fn run_model_describe(args: ModelDescribeArgs) -> Result<()> {
    let model = match &args.checkpoint {
        Some(dir) => Model::load(dir)?,
        None => Model::new(
            crate::model::ModelConfig {
                encoder: Default::default(),
                mep: crate::model::MepConfig::from_scale_count(args.scales)?,
                head: HeadKind::Recon,
                resolution: args.resolution,
            },
            0,
        )?,
    };
    print!("{}", model.describe());
    Ok(())
}

const PLOT_COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [52, 94, 203],
    [38, 157, 74],
    [221, 148, 37],
    [142, 68, 173],
    [30, 30, 30],
];

/// Minimal PPM line plot: one polyline per named series over shared axes.
fn plot_lines(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    const W: usize = 480;
    const H: usize = 320;
    const MARGIN: usize = 24;
    let mut canvas = vec![255u8; 3 * W * H];
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return Err(TcsError::InvalidInput("plot of empty series".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let map = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * (W - 2 * MARGIN) as f64;
        let py = (H - MARGIN) as f64 - (y - y0) / (y1 - y0) * (H - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };
    let mut set = |x: i64, y: i64, color: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            let base = 3 * (y as usize * W + x as usize);
            canvas[base..base + 3].copy_from_slice(&color);
        }
    };
    // axes
    for x in MARGIN..W - MARGIN {
        set(x as i64, (H - MARGIN) as i64, [120, 120, 120]);
    }
    for y in MARGIN..H - MARGIN {
        set(MARGIN as i64, y as i64, [120, 120, 120]);
    }
    for (s, (_, pts)) in series.iter().enumerate() {
        let color = PLOT_COLORS[s % PLOT_COLORS.len()];
        for pair in pts.windows(2) {
            let (ax, ay) = map(pair[0].0, pair[0].1);
            let (bx, by) = map(pair[1].0, pair[1].1);
            // Bresenham segment
            let (dx, dy) = ((bx - ax).abs(), -(by - ay).abs());
            let (sx, sy) = (if ax < bx { 1 } else { -1 }, if ay < by { 1 } else { -1 });
            let (mut x, mut y, mut err) = (ax, ay, dx + dy);
            loop {
                set(x, y, color);
                if x == bx && y == by {
                    break;
                }
                let e2 = 2 * err;
                if e2 >= dy {
                    err += dy;
                    x += sx;
                }
                if e2 <= dx {
                    err += dx;
                    y += sy;
                }
            }
        }
    }
    crate::io::write_ppm_bytes(path, H, W, &canvas)
}
