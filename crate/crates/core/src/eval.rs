//! Segmentation metrics (DSC, symmetric Hausdorff distance over boundary
//! pixels) and the reconstruction-SSIM report comparing masked against
//! unmasked inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{Result, TcsError};
use crate::imaging::{build_rgb, normalize_hu, HuSlice, RgbSlice, DEFAULT_HU_MAX, DEFAULT_HU_MIN};
use crate::losses::{ssim_2ch, SsimParams};
use crate::masking::{apply_mask, build_tissue_mask, TissueMaskSpec};
use crate::model::Model;

/// A labeled segmentation raster; binary masks use classes = 2.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub labels: Array2<u8>,
    pub classes: usize,
}

impl SegMask {
    pub fn new(labels: Array2<u8>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(TcsError::InvalidInput(
                "SegMask needs at least 2 classes".into(),
            ));
        }
        if let Some(v) = labels.iter().find(|&&v| (v as usize) >= classes) {
            return Err(TcsError::InvalidInput(format!(
                "label {v} outside class range 0..{classes}"
            )));
        }
        Ok(SegMask { labels, classes })
    }

    pub fn binary(labels: Array2<u8>) -> Result<Self> {
        Self::new(labels, 2)
    }

    fn class_mask(&self, c: u8) -> Array2<bool> {
        self.labels.mapv(|v| v == c)
    }
}

/// Dice coefficient of two boolean masks: 2|P∩G| / (|P|+|G|).
/// Both empty gives 1.0; exactly one empty gives 0.0.
pub fn dsc_binary(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let p: usize = pred.iter().filter(|&&v| v).count();
    let g: usize = gt.iter().filter(|&&v| v).count();
    if p == 0 && g == 0 {
        return 1.0;
    }
    if p == 0 || g == 0 {
        return 0.0;
    }
    let inter = pred
        .iter()
        .zip(gt.iter())
        .filter(|&(&a, &b)| a && b)
        .count();
    2.0 * inter as f64 / (p + g) as f64
}

/// Foreground pixels 4-adjacent to background; pixels on the image border
/// count as boundary (outside the image is background).
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for ((i, j), &fg) in mask.indexed_iter() {
        if !fg {
            continue;
        }
        let touches_bg = (i == 0 || !mask[(i - 1, j)])
            || (i + 1 == h || !mask[(i + 1, j)])
            || (j == 0 || !mask[(i, j - 1)])
            || (j + 1 == w || !mask[(i, j + 1)]);
        if touches_bg {
            out.push((i, j));
        }
    }
    out
}

fn directed_hausdorff_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ai, aj) in from {
        let mut best = f64::INFINITY;
        for &(bi, bj) in to {
            let di = ai as f64 - bi as f64;
            let dj = aj as f64 - bj as f64;
            let d = di * di + dj * dj;
            if d < best {
                best = d;
                if best <= worst {
                    // cannot raise the running maximum any further
                    break;
                }
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

/// Symmetric Hausdorff distance (pixels, Euclidean) between the boundary
/// point sets of two boolean masks. `None` when either mask is empty.
pub fn hausdorff_binary(pred: &Array2<bool>, gt: &Array2<bool>) -> Option<f64> {
    let a = boundary_pixels(pred);
    let b = boundary_pixels(gt);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let fwd = directed_hausdorff_sq(&a, &b);
    let bwd = directed_hausdorff_sq(&b, &a);
    Some(fwd.max(bwd).sqrt())
}

fn check_shapes(pred: &SegMask, gt: &SegMask) -> Result<()> {
    if pred.labels.dim() != gt.labels.dim() {
        return Err(TcsError::ShapeMismatch(format!(
            "metric: pred {:?} vs gt {:?}",
            pred.labels.dim(),
            gt.labels.dim()
        )));
    }
    if pred.classes != gt.classes {
        return Err(TcsError::ShapeMismatch(format!(
            "metric: pred classes {} vs gt classes {}",
            pred.classes, gt.classes
        )));
    }
    Ok(())
}

/// DSC as a fraction in [0, 1]; multiclass macro-averages over the
/// foreground classes 1..C.
pub fn dsc(pred: &SegMask, gt: &SegMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let per_class: Vec<f64> = (1..pred.classes as u8)
        .map(|c| dsc_binary(&pred.class_mask(c), &gt.class_mask(c)))
        .collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Per-foreground-class DSC values, for multiclass reporting.
pub fn dsc_per_class(pred: &SegMask, gt: &SegMask) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    Ok((1..pred.classes as u8)
        .map(|c| dsc_binary(&pred.class_mask(c), &gt.class_mask(c)))
        .collect())
}

/// Symmetric Hausdorff distance in pixels; multiclass macro-averages the
/// per-class distances over classes where both masks are nonempty, and is
/// undefined when no class qualifies.
pub fn hausdorff(pred: &SegMask, gt: &SegMask) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let distances: Vec<f64> = (1..pred.classes as u8)
        .filter_map(|c| hausdorff_binary(&pred.class_mask(c), &gt.class_mask(c)))
        .collect();
    if distances.is_empty() {
        Ok(None)
    } else {
        Ok(Some(distances.iter().sum::<f64>() / distances.len() as f64))
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    /// DSC in percent.
    pub dsc: f64,
    /// Hausdorff distance in pixels; `None` = undefined (empty mask).
    pub hd: Option<f64>,
}

/// Aggregate metric summary: DSC in percent, HD in pixels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    /// Samples whose HD was undefined and excluded from the aggregates.
    pub hd_undefined: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_samples(samples: &[SampleMetrics]) -> Result<MetricReport> {
        if samples.is_empty() {
            return Err(TcsError::InvalidInput("no samples to aggregate".into()));
        }
        let dscs: Vec<f64> = samples.iter().map(|s| s.dsc).collect();
        let (dsc_mean, dsc_std) = mean_std(&dscs);
        let hds: Vec<f64> = samples.iter().filter_map(|s| s.hd).collect();
        let (hd_mean, hd_std) = if hds.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&hds);
            (Some(m), Some(s))
        };
        Ok(MetricReport {
            samples: samples.len(),
            dsc_mean,
            dsc_std,
            hd_mean,
            hd_std,
            hd_undefined: samples.len() - hds.len(),
        })
    }
}

/// Threshold sigmoid scores / argmax softmax scores into a SegMask.
pub fn prediction_to_mask(scores: &Tensor) -> Result<SegMask> {
    let shape = scores.shape();
    if shape.len() != 3 {
        return Err(TcsError::ShapeMismatch(format!(
            "prediction_to_mask: expected [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let v = scores.values();
    let v3 = v.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let labels = if c == 1 {
        Array2::from_shape_fn((h, w), |(i, j)| u8::from(v3[(0, i, j)] >= 0.5))
    } else {
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0usize;
            let mut best_v = v3[(0, i, j)];
            for k in 1..c {
                if v3[(k, i, j)] > best_v {
                    best_v = v3[(k, i, j)];
                    best = k;
                }
            }
            best as u8
        })
    };
    SegMask::new(labels, if c == 1 { 2 } else { c })
}

/// Segment every slice with the model and score against ground truth.
pub fn evaluate_segmentation(
    model: &Model,
    data: &[(HuSlice, Array2<u8>)],
    classes: usize,
) -> Result<Vec<SampleMetrics>> {
    let mut out = Vec::with_capacity(data.len());
    for (id, (slice, gt_map)) in data.iter().enumerate() {
        let rgb = build_rgb(slice)?;
        let x = rgb_to_tensor(&rgb)?;
        let scores = model.decode(&model.encode(&x)?)?;
        let pred = prediction_to_mask(&scores)?;
        let gt = SegMask::new(gt_map.clone(), classes)?;
        let d = dsc(&pred, &gt)?;
        let hd = hausdorff(&pred, &gt)?;
        out.push(SampleMetrics {
            id,
            dsc: 100.0 * d,
            hd,
        });
    }
    Ok(out)
}

pub fn rgb_to_tensor(rgb: &RgbSlice) -> Result<Tensor> {
    Tensor::from_vec(&[3, rgb.height(), rgb.width()], rgb.to_chw())
}

/// One row of the reconstruction-SSIM report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconSsimRow {
    pub id: usize,
    /// "masked" or "unmasked" model input.
    pub condition: String,
    pub ssim: f64,
}

/// For every slice, reconstruct from the masked and from the unmasked
/// input and record the SSIM against the (lung, mediastinal) target
/// channels. Two rows per sample. Deterministic in (model, data, spec).
pub fn recon_ssim_report(
    model: &Model,
    data: &[HuSlice],
    k_intervals: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<Vec<ReconSsimRow>> {
    let ssim_params = SsimParams::default();
    let mut rows = Vec::with_capacity(data.len() * 2);
    for (id, slice) in data.iter().enumerate() {
        let rgb = build_rgb(slice)?;
        let norm = normalize_hu(slice, DEFAULT_HU_MIN, DEFAULT_HU_MAX)?;
        let mask_seed = crate::rng::derive_seed(seed, crate::rng::Role::Mask, id as u64, 0);
        let spec = TissueMaskSpec::new(k_intervals, mask_ratio, mask_seed)?;
        let mask = build_tissue_mask(&norm, &spec)?;
        let masked = apply_mask(&rgb, &mask)?;

        let target = two_channel_target(&rgb)?;
        for (condition, input) in [("masked", &masked), ("unmasked", &rgb)] {
            let x = rgb_to_tensor(input)?;
            let recon = model.decode(&model.encode(&x)?)?;
            let s = ssim_2ch(&recon, &target, &ssim_params)?.item()?;
            rows.push(ReconSsimRow {
                id,
                condition: condition.to_string(),
                ssim: s,
            });
        }
    }
    Ok(rows)
}

/// The reconstruction target: lung and mediastinal channels of the input.
pub fn two_channel_target(rgb: &RgbSlice) -> Result<Tensor> {
    let (h, w) = (rgb.height(), rgb.width());
    let mut data = Vec::with_capacity(2 * h * w);
    data.extend(rgb.channel(RgbSlice::LUNG).iter().copied());
    data.extend(rgb.channel(RgbSlice::MEDIASTINAL).iter().copied());
    Tensor::from_vec(&[2, h, w], data)
}
