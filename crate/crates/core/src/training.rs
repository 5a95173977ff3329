//! Dual-branch semi-masked pretraining and downstream finetuning.
//!
//! Pretraining feeds every batch image twice through the same model: once
//! masked, once as-is. Both reconstructions are scored against the intact
//! (lung, mediastinal) target, the MEP embeddings of the two branches are
//! pulled together by InfoNCE, and the summed loss takes one backward and
//! one Adam step per batch. Finetuning swaps the head for a segmentation
//! one, optionally inherits the pretrained trunk, and tracks DSC/HD on a
//! deterministic validation split every epoch.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffengine::{backward, AdamState, ParamSet};
use crate::error::{Result, TcsError};
use crate::eval::{
    evaluate_segmentation, rgb_to_tensor, two_channel_target, MetricReport, SampleMetrics,
};
use crate::imaging::{build_rgb, normalize_hu, HuSlice, NormSlice, RgbSlice, DEFAULT_HU_MAX, DEFAULT_HU_MIN};
use crate::io::{csv_float, CsvWriter};
use crate::losses::{
    ce_dice_loss_batch, contrastive_loss, ssim_loss, total_loss, ContrastParams, Labels,
    SsimLossForm, SsimParams,
};
use crate::masking::{
    apply_mask, build_patch_mask, build_tissue_mask, PatchMaskSpec, TissueMaskSpec,
};
use crate::model::{EncoderConfig, HeadKind, MepConfig, Model, ModelConfig};
use crate::rng::{derive_seed, rng_from_seed, Role};

/// Which masking strategy the masked branch uses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskKind {
    Tissue { k: usize, rho: f64 },
    Patch { patch_size: usize, rho: f64 },
}

impl Default for MaskKind {
    fn default() -> Self {
        MaskKind::Tissue { k: 8, rho: 0.75 }
    }
}

/// When the random interval/block choice is redrawn.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskResample {
    /// Fresh choice per image per epoch.
    #[default]
    PerImageEpoch,
    /// One choice shared by all images of a batch, fresh per epoch.
    PerBatchEpoch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch exponential decay: lr(e) = lr0 * decay^e.
    pub lr_decay: f64,
    pub resolution: usize,
    pub mask: MaskKind,
    /// MEP ablation arm 0..=3.
    pub scales: usize,
    pub lambda: f64,
    pub gamma_init: f64,
    pub seed: u64,
    pub ssim_form: SsimLossForm,
    pub mask_resample: MaskResample,
    pub hflip_augment: bool,
    pub channels: [usize; 5],
}

impl Default for PretrainConfig {
    /// Desk-scale defaults; the paper-scale regime (256x256, batch 30,
    /// 60 epochs) stays reachable through the same fields.
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-4,
            lr_decay: 0.96,
            resolution: 64,
            mask: MaskKind::default(),
            scales: 2,
            lambda: 1.0,
            gamma_init: ContrastParams::DEFAULT_GAMMA_INIT,
            seed: 0,
            ssim_form: SsimLossForm::Sum,
            mask_resample: MaskResample::default(),
            hflip_augment: false,
            channels: EncoderConfig::default().channels,
        }
    }
}

impl PretrainConfig {
    /// The paper's full-scale hyperparameters.
    pub fn paper_scale() -> Self {
        PretrainConfig {
            epochs: 60,
            batch_size: 30,
            resolution: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TcsError::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TcsError::config("batch_size", "must be at least 1"));
        }
        if self.resolution % 32 != 0 || self.resolution == 0 {
            return Err(TcsError::config(
                "resolution",
                format!("must be a positive multiple of 32, got {}", self.resolution),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TcsError::config("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TcsError::config("lr_decay", "must lie in (0, 1]"));
        }
        if self.lambda < 0.0 {
            return Err(TcsError::config("lambda", "must be non-negative"));
        }
        match self.mask {
            MaskKind::Tissue { k, rho } => {
                TissueMaskSpec::new(k, rho, 0)?;
            }
            MaskKind::Patch { patch_size, rho } => {
                let spec = PatchMaskSpec::new(patch_size, rho, 0)?;
                if spec.patch_size > self.resolution {
                    return Err(TcsError::config(
                        "patch_size",
                        format!("{patch_size} exceeds resolution {}", self.resolution),
                    ));
                }
            }
        }
        MepConfig::from_scale_count(self.scales)?;
        Ok(())
    }

    /// The learning rate used during epoch `e` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                channels: self.channels,
            },
            mep: MepConfig::from_scale_count(self.scales)?,
            head: HeadKind::Recon,
            resolution: self.resolution,
        })
    }
}

/// A training image with its precomputed normalized view.
pub struct TrainImage {
    pub rgb: RgbSlice,
    pub norm: NormSlice,
}

/// Precompute RGB and normalized views, validating resolution.
pub fn prepare_images(slices: &[HuSlice], resolution: usize) -> Result<Vec<TrainImage>> {
    slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.height() != resolution || s.width() != resolution {
                return Err(TcsError::InvalidInput(format!(
                    "slice {i} is {}x{}, config expects {resolution}x{resolution}",
                    s.height(),
                    s.width()
                )));
            }
            Ok(TrainImage {
                rgb: build_rgb(s)?,
                norm: normalize_hu(s, DEFAULT_HU_MIN, DEFAULT_HU_MAX)?,
            })
        })
        .collect()
}

fn hflip_plane(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(i, j)| plane[(i, w - 1 - j)])
}

fn hflip(image: &TrainImage) -> Result<TrainImage> {
    Ok(TrainImage {
        rgb: RgbSlice::new([
            hflip_plane(image.rgb.channel(0)),
            hflip_plane(image.rgb.channel(1)),
            hflip_plane(image.rgb.channel(2)),
        ])?,
        norm: NormSlice(hflip_plane(&image.norm.0)),
    })
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_ssim: f64,
    /// Absent when contrastive learning is disabled (Scales 0).
    pub l_con: Option<f64>,
    pub l_total: f64,
    pub gamma: Option<f64>,
}

/// Shared training state across pretraining steps.
pub struct PretrainState {
    pub model: Model,
    pub contrast: ContrastParams,
    pub adam: AdamState,
    train_params: ParamSet,
    ssim_params: SsimParams,
}

impl PretrainState {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model_config()?, cfg.seed)?;
        let contrast = ContrastParams::new(cfg.gamma_init, cfg.lambda)?;
        let mut train_params = ParamSet::new();
        for (name, t) in model.params().iter() {
            train_params.insert(name, t.clone())?;
        }
        if cfg.scales > 0 {
            train_params.insert("loss.log_gamma", contrast.log_gamma_param().clone())?;
        }
        let adam = AdamState::new(cfg.learning_rate);
        Ok(PretrainState {
            model,
            contrast,
            adam,
            train_params,
            ssim_params: SsimParams::default(),
        })
    }
}

/// Build the mask for one image under the configured strategy and seeds.
fn mask_for(
    cfg: &PretrainConfig,
    norm: &NormSlice,
    image_index: usize,
    batch_index: usize,
    epoch: usize,
) -> Result<crate::masking::TissueMask> {
    let stream = match cfg.mask_resample {
        MaskResample::PerImageEpoch => image_index as u64,
        MaskResample::PerBatchEpoch => batch_index as u64,
    };
    let seed = derive_seed(cfg.seed, Role::Mask, stream, epoch as u64);
    match cfg.mask {
        MaskKind::Tissue { k, rho } => {
            build_tissue_mask(norm, &TissueMaskSpec::new(k, rho, seed)?)
        }
        MaskKind::Patch { patch_size, rho } => build_patch_mask(
            norm.0.nrows(),
            norm.0.ncols(),
            &PatchMaskSpec::new(patch_size, rho, seed)?,
        ),
    }
}

/// One optimizer step over a batch: mask, run both branches through the
/// shared weights, combine SSIM and contrastive terms, one backward, one
/// Adam update. `batch` carries (dataset index, image) pairs.
pub fn pretrain_step(
    state: &mut PretrainState,
    cfg: &PretrainConfig,
    batch: &[(usize, &TrainImage)],
    epoch: usize,
    batch_index: usize,
    step: usize,
) -> Result<StepRecord> {
    let scales_on = cfg.scales > 0;
    let mut recon_masked = Vec::with_capacity(batch.len());
    let mut recon_orig = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    // per level, per sample embeddings
    let n_levels = state.model.config().mep.scales.len();
    let mut proj_masked = vec![Vec::with_capacity(batch.len()); n_levels];
    let mut proj_orig = vec![Vec::with_capacity(batch.len()); n_levels];

    let located = |e: TcsError| -> TcsError {
        TcsError::InvalidInput(format!("pretrain step {step} (epoch {epoch}): {e}"))
    };

    for &(image_index, image) in batch {
        let flipped;
        let image = if cfg.hflip_augment
            && derive_seed(cfg.seed, Role::Augment, image_index as u64, epoch as u64) & 1 == 1
        {
            flipped = hflip(image)?;
            &flipped
        } else {
            image
        };
        let mask = mask_for(cfg, &image.norm, image_index, batch_index, epoch)?;
        let masked = apply_mask(&image.rgb, &mask)?;

        let x_masked = rgb_to_tensor(&masked)?;
        let x_orig = rgb_to_tensor(&image.rgb)?;
        let f_masked = state.model.encode(&x_masked).map_err(located)?;
        let f_orig = state.model.encode(&x_orig).map_err(located)?;
        recon_masked.push(state.model.decode(&f_masked).map_err(located)?);
        recon_orig.push(state.model.decode(&f_orig).map_err(located)?);
        targets.push(two_channel_target(&image.rgb)?);
        if scales_on {
            for (l, e) in state.model.project(&f_masked)?.into_iter().enumerate() {
                proj_masked[l].push(e);
            }
            for (l, e) in state.model.project(&f_orig)?.into_iter().enumerate() {
                proj_orig[l].push(e);
            }
        }
    }

    let l_ssim = ssim_loss(
        &recon_masked,
        &recon_orig,
        &targets,
        &state.ssim_params,
        cfg.ssim_form,
    )
    .map_err(located)?;
    let (l_total, l_con_value) = if scales_on {
        let l_con = contrastive_loss(&proj_masked, &proj_orig, &state.contrast).map_err(located)?;
        let value = l_con.item()?;
        (total_loss(&l_ssim, &l_con, cfg.lambda).map_err(located)?, Some(value))
    } else {
        (l_ssim.clone(), None)
    };

    state.train_params.zero_grad();
    backward(&l_total).map_err(located)?;
    state.adam.step(&state.train_params).map_err(located)?;

    Ok(StepRecord {
        epoch,
        step,
        l_ssim: l_ssim.item()?,
        l_con: l_con_value,
        l_total: l_total.item()?,
        gamma: scales_on.then(|| state.contrast.gamma()),
    })
}

pub struct PretrainOutput {
    pub records: Vec<StepRecord>,
    pub checkpoint_dir: PathBuf,
}

/// Mean L_ssim of one epoch's steps.
pub fn epoch_mean_ssim(records: &[StepRecord], epoch: usize) -> Option<f64> {
    let vals: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == epoch)
        .map(|r| r.l_ssim)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Full pretraining run: writes `losses.csv` plus `checkpoint.bin` /
/// `manifest.json` into `out_dir` and returns the per-step records.
pub fn pretrain(slices: &[HuSlice], cfg: &PretrainConfig, out_dir: &Path) -> Result<PretrainOutput> {
    cfg.validate()?;
    if slices.is_empty() {
        return Err(TcsError::InvalidInput("pretrain: empty dataset".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TcsError::io(out_dir, e))?;
    let images = prepare_images(slices, cfg.resolution)?;
    let mut state = PretrainState::new(cfg)?;

    let mut csv = CsvWriter::create(
        &out_dir.join("losses.csv"),
        &["epoch", "step", "l_ssim", "l_con", "l_total", "gamma"],
    )?;
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        state.adam.set_learning_rate(cfg.lr_at_epoch(epoch));
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, Role::Shuffle, epoch as u64, 0));
        shuffle(&mut order, &mut rng);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(usize, &TrainImage)> =
                chunk.iter().map(|&i| (i, &images[i])).collect();
            let record = pretrain_step(&mut state, cfg, &batch, epoch, batch_index, step)?;
            csv.row(&[
                record.epoch.to_string(),
                record.step.to_string(),
                csv_float(record.l_ssim),
                record.l_con.map(csv_float).unwrap_or_default(),
                csv_float(record.l_total),
                record.gamma.map(csv_float).unwrap_or_default(),
            ])?;
            records.push(record);
            step += 1;
        }
    }
    csv.flush()?;
    state.model.save(out_dir)?;
    Ok(PretrainOutput {
        records,
        checkpoint_dir: out_dir.to_path_buf(),
    })
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Where finetuning starts from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", content = "path")]
pub enum InitSource {
    Scratch,
    Checkpoint(PathBuf),
}

/// Validation split strategy: deterministic holdout by seeded shuffle, or
/// one fold of a k-fold partition (cross-validation harness mode).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    Holdout { val_fraction: f64 },
    Fold { folds: usize, index: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Holdout { val_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub head: HeadKind,
    pub init: InitSource,
    pub split: SplitSpec,
    pub seed: u64,
    pub resolution: usize,
    pub channels: [usize; 5],
}

impl Default for FinetuneConfig {
    /// Desk-scale defaults. The paper's finetuning rate (1e-6) is
    /// impractically small at this scale; it stays available through
    /// `learning_rate` (CLI `--paper-lr`).
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-4,
            head: HeadKind::SegBinary,
            init: InitSource::Scratch,
            split: SplitSpec::default(),
            seed: 0,
            resolution: 64,
            channels: EncoderConfig::default().channels,
        }
    }
}

/// The paper's finetuning learning rate.
pub const PAPER_FINETUNE_LR: f64 = 1e-6;

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TcsError::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TcsError::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TcsError::config("learning_rate", "must be positive"));
        }
        if self.resolution % 32 != 0 || self.resolution == 0 {
            return Err(TcsError::config(
                "resolution",
                format!("must be a positive multiple of 32, got {}", self.resolution),
            ));
        }
        match self.head {
            HeadKind::Recon => {
                return Err(TcsError::config(
                    "head",
                    "finetuning requires a segmentation head",
                ))
            }
            HeadKind::SegMulti { classes } if classes < 2 => {
                return Err(TcsError::config("head.classes", "must be at least 2"));
            }
            _ => {}
        }
        match self.split {
            SplitSpec::Holdout { val_fraction } => {
                if !(val_fraction > 0.0 && val_fraction < 1.0) {
                    return Err(TcsError::config(
                        "split.val_fraction",
                        format!("must lie in (0, 1), got {val_fraction}"),
                    ));
                }
            }
            SplitSpec::Fold { folds, index } => {
                if folds < 2 || index >= folds {
                    return Err(TcsError::config(
                        "split",
                        format!("need folds >= 2 and index < folds, got {folds}/{index}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self.head {
            HeadKind::SegMulti { classes } => classes,
            _ => 2,
        }
    }
}

/// Per-epoch finetuning metrics on the validation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub report: MetricReport,
    /// Per-foreground-class mean DSC (percent), multiclass only.
    pub per_class_dsc: Vec<f64>,
}

pub struct FinetuneOutput {
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint_dir: PathBuf,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Deterministic train/validation partition of `0..n`.
pub fn split_indices(n: usize, split: SplitSpec, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(seed, Role::Shuffle, u64::MAX, 0));
    shuffle(&mut order, &mut rng);
    match split {
        SplitSpec::Holdout { val_fraction } => {
            let n_val = ((n as f64) * val_fraction).round().max(1.0) as usize;
            let n_val = n_val.min(n.saturating_sub(1)).max(1);
            let val = order.split_off(n - n_val);
            (order, val)
        }
        SplitSpec::Fold { folds, index } => {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for (i, idx) in order.into_iter().enumerate() {
                if i % folds == index {
                    val.push(idx);
                } else {
                    train.push(idx);
                }
            }
            (train, val)
        }
    }
}

/// Finetune on labeled slices: per epoch, CE+Dice steps over the train
/// split and a DSC/HD evaluation on the validation split. Writes
/// `metrics.csv` and the final checkpoint into `out_dir`.
pub fn finetune(
    data: &[(HuSlice, Array2<u8>)],
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(TcsError::InvalidInput(
            "finetune: need at least 2 labeled slices".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TcsError::io(out_dir, e))?;
    let classes = cfg.classes();
    for (i, (slice, labels)) in data.iter().enumerate() {
        if (slice.height(), slice.width()) != labels.dim() {
            return Err(TcsError::ShapeMismatch(format!(
                "finetune: slice {i} is {}x{} but labels are {:?}",
                slice.height(),
                slice.width(),
                labels.dim()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| (v as usize) >= classes) {
            return Err(TcsError::InvalidInput(format!(
                "finetune: slice {i} label {v} outside class range 0..{classes}"
            )));
        }
    }

    let mut model = Model::new(
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                channels: cfg.channels,
            },
            mep: MepConfig::from_scale_count(0)?,
            head: cfg.head,
            resolution: cfg.resolution,
        },
        cfg.seed,
    )?;
    if let InitSource::Checkpoint(path) = &cfg.init {
        model.load_trunk_from(path)?;
    }

    let slices: Vec<HuSlice> = data.iter().map(|(s, _)| s.clone()).collect();
    let images = prepare_images(&slices, cfg.resolution)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.split, cfg.seed);
    let val_data: Vec<(HuSlice, Array2<u8>)> =
        val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut adam = AdamState::new(cfg.learning_rate);
    let mut csv_header = vec![
        "epoch".to_string(),
        "train_loss".to_string(),
        "val_dsc_mean".to_string(),
        "val_dsc_std".to_string(),
        "val_hd_mean".to_string(),
        "val_hd_std".to_string(),
        "hd_undefined".to_string(),
    ];
    if classes > 2 {
        for c in 1..classes {
            csv_header.push(format!("dsc_class_{c}"));
        }
    }
    let header_refs: Vec<&str> = csv_header.iter().map(String::as_str).collect();
    let mut csv = CsvWriter::create(&out_dir.join("metrics.csv"), &header_refs)?;

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, Role::Shuffle, epoch as u64, 1));
        shuffle(&mut order, &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let logits = {
                    let x = rgb_to_tensor(&images[i].rgb)?;
                    model.decode_logits(&model.encode(&x)?)?
                };
                let labels = if classes == 2 {
                    Labels::Binary(data[i].1.clone())
                } else {
                    Labels::Multi {
                        map: data[i].1.clone(),
                        classes,
                    }
                };
                items.push((logits, labels));
            }
            let loss = ce_dice_loss_batch(&items)?;
            model.params().zero_grad();
            backward(&loss)?;
            adam.step(model.params())?;
            losses.push(loss.item()?);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;

        let samples = evaluate_segmentation(&model, &val_data, classes)?;
        let report = MetricReport::from_samples(&samples)?;
        let per_class_dsc = if classes > 2 {
            per_class_validation_dsc(&model, &val_data, classes)?
        } else {
            Vec::new()
        };
        let mut row = vec![
            epoch.to_string(),
            csv_float(train_loss),
            csv_float(report.dsc_mean),
            csv_float(report.dsc_std),
            report.hd_mean.map(csv_float).unwrap_or_default(),
            report.hd_std.map(csv_float).unwrap_or_default(),
            report.hd_undefined.to_string(),
        ];
        for v in &per_class_dsc {
            row.push(csv_float(*v));
        }
        csv.row(&row)?;
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            report,
            per_class_dsc,
        });
    }
    csv.flush()?;
    model.save(out_dir)?;
    Ok(FinetuneOutput {
        epochs,
        checkpoint_dir: out_dir.to_path_buf(),
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

fn per_class_validation_dsc(
    model: &Model,
    val: &[(HuSlice, Array2<u8>)],
    classes: usize,
) -> Result<Vec<f64>> {
    use crate::eval::{dsc_per_class, prediction_to_mask, SegMask};
    let mut sums = vec![0.0; classes - 1];
    for (slice, gt_map) in val {
        let x = rgb_to_tensor(&build_rgb(slice)?)?;
        let pred = prediction_to_mask(&model.decode(&model.encode(&x)?)?)?;
        let gt = SegMask::new(gt_map.clone(), classes)?;
        for (acc, v) in sums.iter_mut().zip(dsc_per_class(&pred, &gt)?) {
            *acc += 100.0 * v;
        }
    }
    Ok(sums.into_iter().map(|s| s / val.len() as f64).collect())
}

/// Per-sample metric rows for `eval`-style CSV output.
pub fn metrics_to_rows(samples: &[SampleMetrics]) -> Vec<Vec<String>> {
    samples
        .iter()
        .map(|s| {
            vec![
                s.id.to_string(),
                csv_float(s.dsc),
                s.hd.map(csv_float).unwrap_or_default(),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_slice, PhantomSpec};

    fn tiny_cfg(scales: usize, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: 1,
            batch_size: 4,
            resolution: 32,
            scales,
            seed,
            ..Default::default()
        }
    }

    fn phantom_slices(n: usize, res: usize, lesion_prob: f64, seed: u64) -> Vec<HuSlice> {
        let spec = PhantomSpec::new(res, seed, lesion_prob).unwrap();
        (0..n as u64)
            .map(|i| generate_slice(&spec, i).unwrap().0)
            .collect()
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let cfg = PretrainConfig::default();
        for e in [0usize, 1, 7, 19] {
            let want = 1e-4 * 0.96f64.powi(e as i32);
            let got = cfg.lr_at_epoch(e);
            assert!((got - want).abs() / want < 1e-12);
        }
    }

    #[test]
    fn one_step_descends_on_the_batch() {
        let cfg = tiny_cfg(2, 41);
        let slices = phantom_slices(4, 32, 0.0, 77);
        let images = prepare_images(&slices, 32).unwrap();
        let mut state = PretrainState::new(&cfg).unwrap();
        let batch: Vec<(usize, &TrainImage)> = images.iter().enumerate().collect();

        let eval_total = |state: &PretrainState| -> f64 {
            // re-evaluate the step's loss on the same batch and masks
            let mut recon_m = Vec::new();
            let mut recon_o = Vec::new();
            let mut targets = Vec::new();
            let n_levels = state.model.config().mep.scales.len();
            let mut pm = vec![Vec::new(); n_levels];
            let mut po = vec![Vec::new(); n_levels];
            for (i, image) in images.iter().enumerate() {
                let mask = mask_for(&cfg, &image.norm, i, 0, 0).unwrap();
                let masked = apply_mask(&image.rgb, &mask).unwrap();
                let fm = state.model.encode(&rgb_to_tensor(&masked).unwrap()).unwrap();
                let fo = state
                    .model
                    .encode(&rgb_to_tensor(&image.rgb).unwrap())
                    .unwrap();
                recon_m.push(state.model.decode(&fm).unwrap());
                recon_o.push(state.model.decode(&fo).unwrap());
                targets.push(two_channel_target(&image.rgb).unwrap());
                for (l, e) in state.model.project(&fm).unwrap().into_iter().enumerate() {
                    pm[l].push(e);
                }
                for (l, e) in state.model.project(&fo).unwrap().into_iter().enumerate() {
                    po[l].push(e);
                }
            }
            let ls = ssim_loss(
                &recon_m,
                &recon_o,
                &targets,
                &SsimParams::default(),
                SsimLossForm::Sum,
            )
            .unwrap();
            let lc = contrastive_loss(&pm, &po, &state.contrast).unwrap();
            total_loss(&ls, &lc, cfg.lambda).unwrap().item().unwrap()
        };

        let before = eval_total(&state);
        let record = pretrain_step(&mut state, &cfg, &batch, 0, 0, 0).unwrap();
        assert!((record.l_total - before).abs() < 1e-9);
        let after = eval_total(&state);
        assert!(
            after < before,
            "one small step should descend: {before} -> {after}"
        );
    }

    #[test]
    fn scales_zero_trains_without_contrastive_term() {
        let cfg = tiny_cfg(0, 43);
        let slices = phantom_slices(4, 32, 0.0, 78);
        let out = tempfile::tempdir().unwrap();
        let result = pretrain(&slices, &cfg, out.path()).unwrap();
        assert_eq!(result.records.len(), 1);
        assert!(result.records[0].l_con.is_none());
        assert!(result.records[0].gamma.is_none());
        assert!((result.records[0].l_total - result.records[0].l_ssim).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_give_identical_trajectories() {
        let slices = phantom_slices(6, 32, 0.0, 79);
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 3,
            resolution: 32,
            scales: 1,
            seed: 44,
            ..Default::default()
        };
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        let a = pretrain(&slices, &cfg, out_a.path()).unwrap();
        let b = pretrain(&slices, &cfg, out_b.path()).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.l_total.to_bits(), rb.l_total.to_bits());
            assert_eq!(ra.l_ssim.to_bits(), rb.l_ssim.to_bits());
        }
        let bytes_a = std::fs::read(out_a.path().join("checkpoint.bin")).unwrap();
        let bytes_b = std::fs::read(out_b.path().join("checkpoint.bin")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let csv_a = std::fs::read(out_a.path().join("losses.csv")).unwrap();
        let csv_b = std::fs::read(out_b.path().join("losses.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
    }

    #[test]
    fn bookkeeping_one_epoch_one_batch() {
        let slices = phantom_slices(3, 32, 0.0, 80);
        let cfg = PretrainConfig {
            epochs: 1,
            batch_size: 8,
            resolution: 32,
            scales: 0,
            seed: 45,
            ..Default::default()
        };
        let out = tempfile::tempdir().unwrap();
        let result = pretrain(&slices, &cfg, out.path()).unwrap();
        assert_eq!(result.records.len(), 1); // ceil(3/8) batches x 1 epoch
        let (_, rows) = crate::io::read_csv(&out.path().join("losses.csv")).unwrap();
        assert_eq!(rows.len(), 1);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train, val) = split_indices(10, SplitSpec::Holdout { val_fraction: 0.2 }, 7);
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        let (train2, val2) = split_indices(10, SplitSpec::Holdout { val_fraction: 0.2 }, 7);
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        // fold mode covers every index exactly once across folds
        let mut seen = vec![0usize; 10];
        for index in 0..5 {
            let (_, val) = split_indices(10, SplitSpec::Fold { folds: 5, index }, 7);
            for v in val {
                seen[v] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn finetune_runs_scratch_and_multiclass_bookkeeping() {
        let spec = PhantomSpec::new(32, 81, 1.0).unwrap();
        let data: Vec<(HuSlice, Array2<u8>)> = (0..6u64)
            .map(|i| generate_slice(&spec, i).unwrap())
            .collect();
        let out = tempfile::tempdir().unwrap();
        let cfg = FinetuneConfig {
            epochs: 1,
            batch_size: 4,
            resolution: 32,
            seed: 46,
            ..Default::default()
        };
        let result = finetune(&data, &cfg, out.path()).unwrap();
        assert_eq!(result.epochs.len(), 1);
        assert!(out.path().join("metrics.csv").exists());
        assert!(out.path().join("checkpoint.bin").exists());

        // multiclass: relabel lesions as class 2 of 3
        let data3: Vec<(HuSlice, Array2<u8>)> = data
            .iter()
            .map(|(s, m)| (s.clone(), m.mapv(|v| v * 2)))
            .collect();
        let cfg3 = FinetuneConfig {
            epochs: 1,
            batch_size: 4,
            resolution: 32,
            head: HeadKind::SegMulti { classes: 3 },
            seed: 47,
            ..Default::default()
        };
        let out3 = tempfile::tempdir().unwrap();
        let result3 = finetune(&data3, &cfg3, out3.path()).unwrap();
        assert_eq!(result3.epochs[0].per_class_dsc.len(), 2);
        let (header, _) = crate::io::read_csv(&out3.path().join("metrics.csv")).unwrap();
        assert!(header.contains(&"dsc_class_2".to_string()));
    }

    #[test]
    fn finetune_inherits_pretrained_trunk() {
        let slices = phantom_slices(4, 32, 0.0, 82);
        let pre_cfg = tiny_cfg(0, 48);
        let pre_out = tempfile::tempdir().unwrap();
        pretrain(&slices, &pre_cfg, pre_out.path()).unwrap();

        let spec = PhantomSpec::new(32, 83, 1.0).unwrap();
        let data: Vec<(HuSlice, Array2<u8>)> = (0..4u64)
            .map(|i| generate_slice(&spec, i).unwrap())
            .collect();
        let ft_out = tempfile::tempdir().unwrap();
        let cfg = FinetuneConfig {
            epochs: 1,
            batch_size: 4,
            resolution: 32,
            init: InitSource::Checkpoint(pre_out.path().to_path_buf()),
            seed: 49,
            ..Default::default()
        };
        // loads cleanly and trains
        finetune(&data, &cfg, ft_out.path()).unwrap();

        // architecture mismatch is surfaced with names
        let bad_cfg = FinetuneConfig {
            channels: [4, 8, 16, 32, 64],
            ..cfg
        };
        let err = finetune(&data, &bad_cfg, ft_out.path()).unwrap_err().to_string();
        assert!(err.contains("enc.l1.down.weight"), "{err}");
    }
}
