//! Differentiable training objectives: global-statistics SSIM, the
//! multi-scale InfoNCE contrastive term, their weighted sum, and the
//! CE+Dice segmentation loss used for finetuning.

use ndarray::{ArrayD, IxDyn};

use crate::diffengine::{add_all, mean_all, Tensor};
use crate::error::{Result, TcsError};

/// Stabilizer constants of the SSIM formula. Defaults are the standard
/// (0.01)^2 and (0.03)^2 on a [0,1] dynamic range.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SsimParams {
    pub tau1: f64,
    pub tau2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            tau1: 0.01 * 0.01,
            tau2: 0.03 * 0.03,
        }
    }
}

impl SsimParams {
    pub fn new(tau1: f64, tau2: f64) -> Result<Self> {
        if !(tau1 > 0.0 && tau2 > 0.0) {
            return Err(TcsError::InvalidInput(format!(
                "SSIM stabilizers must be positive, got tau1={tau1}, tau2={tau2}"
            )));
        }
        Ok(SsimParams { tau1, tau2 })
    }
}

/// Contrastive loss parameters. The temperature is stored as its logarithm
/// in a learnable 0-d tensor so that gamma = exp(log_gamma) stays positive
/// under gradient updates.
pub struct ContrastParams {
    log_gamma: Tensor,
    /// Weight of the contrastive term in the total loss.
    pub lambda: f64,
}

impl ContrastParams {
    pub const DEFAULT_GAMMA_INIT: f64 = 0.07;

    pub fn new(gamma_init: f64, lambda: f64) -> Result<Self> {
        if !(gamma_init > 0.0) {
            return Err(TcsError::InvalidInput(format!(
                "temperature must be positive, got {gamma_init}"
            )));
        }
        if lambda < 0.0 {
            return Err(TcsError::InvalidInput(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        Ok(ContrastParams {
            log_gamma: Tensor::parameter(
                ArrayD::from_elem(IxDyn(&[]), gamma_init.ln()),
                "loss.log_gamma",
            )?,
            lambda,
        })
    }

    /// The learnable log-temperature leaf, for optimizer registration.
    pub fn log_gamma_param(&self) -> &Tensor {
        &self.log_gamma
    }

    /// Current temperature value.
    pub fn gamma(&self) -> f64 {
        self.log_gamma.values()[IxDyn(&[])].exp()
    }

    /// Temperature as a graph node, for use inside the loss.
    fn gamma_tensor(&self) -> Result<Tensor> {
        self.log_gamma.exp()
    }
}

/// Global-statistics SSIM between two same-shape planes in [0,1]:
/// one image-wide mean, variance and covariance per operand (population
/// convention), not the windowed variant.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TcsError::ShapeMismatch(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mu_a = a.mean()?;
    let mu_b = b.mean()?;
    let da = a.sub(&mu_a)?;
    let db = b.sub(&mu_b)?;
    let var_a = da.mul(&da)?.mean()?;
    let var_b = db.mul(&db)?.mean()?;
    let cov = da.mul(&db)?.mean()?;

    let lum_num = mu_a.mul(&mu_b)?.mul_scalar(2.0)?.add_scalar(p.tau1)?;
    let lum_den = mu_a
        .mul(&mu_a)?
        .add(&mu_b.mul(&mu_b)?)?
        .add_scalar(p.tau1)?;
    let str_num = cov.mul_scalar(2.0)?.add_scalar(p.tau2)?;
    let str_den = var_a.add(&var_b)?.add_scalar(p.tau2)?;
    lum_num.mul(&str_num)?.div(&lum_den.mul(&str_den)?)
}

/// SSIM of a 2-channel reconstruction against a 2-channel target, averaged
/// over the channels.
pub fn ssim_2ch(recon: &Tensor, target: &Tensor, p: &SsimParams) -> Result<Tensor> {
    let per_channel = [
        ssim(&recon.select_channel(0)?, &target.select_channel(0)?, p)?,
        ssim(&recon.select_channel(1)?, &target.select_channel(1)?, p)?,
    ];
    mean_all(&per_channel)
}

/// How the two per-branch (1 - SSIM) terms combine per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimLossForm {
    /// Sum of the masked-branch and original-branch terms: realizes the
    /// objective of maximizing both SSIM scores.
    Sum,
    /// The literal printed fraction of the two terms, offered for
    /// comparison runs only; the denominator is floored at epsilon.
    Ratio,
}

/// Reconstruction loss over a batch: per sample,
/// (1 - SSIM(R_m, I_o)) combined with (1 - SSIM(R_o, I_o)) per `form`,
/// averaged over the batch. All tensors are 2-channel (lung, mediastinal).
pub fn ssim_loss(
    recon_masked: &[Tensor],
    recon_orig: &[Tensor],
    targets: &[Tensor],
    p: &SsimParams,
    form: SsimLossForm,
) -> Result<Tensor> {
    if recon_masked.len() != recon_orig.len() || recon_masked.len() != targets.len() {
        return Err(TcsError::ShapeMismatch(format!(
            "ssim_loss: batch sizes {} / {} / {}",
            recon_masked.len(),
            recon_orig.len(),
            targets.len()
        )));
    }
    if recon_masked.is_empty() {
        return Err(TcsError::InvalidInput("ssim_loss on an empty batch".into()));
    }
    let mut per_sample = Vec::with_capacity(targets.len());
    for ((rm, ro), io) in recon_masked.iter().zip(recon_orig).zip(targets) {
        let term_m = ssim_2ch(rm, io, p)?.rsub_scalar(1.0)?;
        let term_o = ssim_2ch(ro, io, p)?.rsub_scalar(1.0)?;
        let combined = match form {
            SsimLossForm::Sum => term_m.add(&term_o)?,
            SsimLossForm::Ratio => term_m.div(&term_o.add_scalar(1e-12)?)?,
        };
        per_sample.push(combined);
    }
    mean_all(&per_sample)
}

/// Multi-scale InfoNCE over the two branches' embeddings.
///
/// `p_masked[l][n]` and `p_orig[l][n]` hold the level-l embedding of sample
/// n from the masked and original branch. Per level, each masked-branch
/// anchor attracts its original-branch counterpart against the pooled 2N-1
/// other embeddings of both branches (the anchor itself excluded). Levels
/// are summed, samples averaged.
pub fn contrastive_loss(
    p_masked: &[Vec<Tensor>],
    p_orig: &[Vec<Tensor>],
    params: &ContrastParams,
) -> Result<Tensor> {
    if p_masked.len() != p_orig.len() {
        return Err(TcsError::ShapeMismatch(format!(
            "contrastive_loss: {} vs {} levels",
            p_masked.len(),
            p_orig.len()
        )));
    }
    if p_masked.is_empty() {
        return Tensor::scalar(0.0);
    }
    let n = p_masked[0].len();
    if n == 0 {
        return Err(TcsError::InvalidInput(
            "contrastive_loss on an empty batch".into(),
        ));
    }
    let gamma = params.gamma_tensor()?;
    let mut per_anchor_terms = Vec::with_capacity(n * p_masked.len());
    for (level_m, level_o) in p_masked.iter().zip(p_orig) {
        if level_m.len() != n || level_o.len() != n {
            return Err(TcsError::ShapeMismatch(format!(
                "contrastive_loss: branch batch sizes {} / {} (expected {n})",
                level_m.len(),
                level_o.len()
            )));
        }
        let unit_m: Vec<Tensor> = level_m
            .iter()
            .map(|e| e.l2_normalize())
            .collect::<Result<_>>()?;
        let unit_o: Vec<Tensor> = level_o
            .iter()
            .map(|e| e.l2_normalize())
            .collect::<Result<_>>()?;
        for anchor_idx in 0..n {
            let anchor = &unit_m[anchor_idx];
            let sim = |other: &Tensor| -> Result<Tensor> {
                anchor.mul(other)?.sum()?.div(&gamma)
            };
            let positive = sim(&unit_o[anchor_idx])?;
            // Candidate pool: every embedding of both branches except the
            // anchor itself; the positive is among them.
            let mut candidate_exps = Vec::with_capacity(2 * n - 1);
            for other in &unit_o {
                candidate_exps.push(sim(other)?.exp()?);
            }
            for (k, other) in unit_m.iter().enumerate() {
                if k == anchor_idx {
                    continue;
                }
                candidate_exps.push(sim(other)?.exp()?);
            }
            let denom = add_all(&candidate_exps)?;
            // -log(exp(pos)/denom) = log(denom) - pos
            per_anchor_terms.push(denom.log()?.sub(&positive)?);
        }
    }
    // sum over levels, mean over samples: total / N
    add_all(&per_anchor_terms)?.mul_scalar(1.0 / n as f64)
}

/// L_total = L_ssim + lambda * L_con.
pub fn total_loss(l_ssim: &Tensor, l_con: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(TcsError::InvalidInput(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    l_ssim.add(&l_con.mul_scalar(lambda)?)
}

/// Log-domain floor keeping CE finite when a probability underflows.
const CE_EPSILON: f64 = 1e-12;
/// Soft-Dice denominator stabilizer.
const DICE_EPSILON: f64 = 1e-7;

/// Segmentation labels for the finetuning loss and metrics.
#[derive(Debug, Clone)]
pub enum Labels {
    /// Binary foreground map (values 0/1), shape [H, W].
    Binary(ndarray::Array2<u8>),
    /// Class index per pixel, shape [H, W], values in [0, classes).
    Multi {
        map: ndarray::Array2<u8>,
        classes: usize,
    },
}

/// Cross-entropy plus soft-Dice, equal weight.
///
/// Binary mode expects [1, H, W] logits (sigmoid applied here); multiclass
/// expects [C, H, W] logits (softmax applied here) and averages Dice over
/// the foreground classes 1..C.
pub fn ce_dice_loss(logits: &Tensor, labels: &Labels) -> Result<Tensor> {
    match labels {
        Labels::Binary(map) => {
            let shape = logits.shape();
            if shape.len() != 3 || shape[0] != 1 || (shape[1], shape[2]) != map.dim() {
                return Err(TcsError::ShapeMismatch(format!(
                    "ce_dice_loss binary: logits {shape:?} vs labels {:?}",
                    map.dim()
                )));
            }
            if let Some(v) = map.iter().find(|&&v| v > 1) {
                return Err(TcsError::InvalidInput(format!(
                    "binary labels must be 0/1, found {v}"
                )));
            }
            let probs = logits.select_channel(0)?.sigmoid()?;
            let g = Tensor::constant(map.mapv(|v| v as f64).into_dyn())?;
            // BCE = -mean(g log p + (1-g) log(1-p))
            let log_p = probs.add_scalar(CE_EPSILON)?.log()?;
            let log_q = probs.rsub_scalar(1.0)?.add_scalar(CE_EPSILON)?.log()?;
            let ce = g
                .mul(&log_p)?
                .add(&g.rsub_scalar(1.0)?.mul(&log_q)?)?
                .mean()?
                .neg()?;
            let dice = soft_dice(&probs, &g)?;
            ce.add(&dice.rsub_scalar(1.0)?)
        }
        Labels::Multi { map, classes } => {
            let shape = logits.shape();
            if shape.len() != 3 || shape[0] != *classes || (shape[1], shape[2]) != map.dim() {
                return Err(TcsError::ShapeMismatch(format!(
                    "ce_dice_loss multiclass: logits {shape:?} vs labels {:?} with {classes} classes",
                    map.dim()
                )));
            }
            if let Some(v) = map.iter().find(|&&v| (v as usize) >= *classes) {
                return Err(TcsError::InvalidInput(format!(
                    "label {v} outside class range 0..{classes}"
                )));
            }
            let probs = logits.softmax_channel()?;
            let log_p = probs.add_scalar(CE_EPSILON)?.log()?;
            // one-hot selection of the labeled class per pixel
            let mut onehot = ArrayD::zeros(IxDyn(&shape));
            for ((i, j), &c) in map.indexed_iter() {
                onehot[IxDyn(&[c as usize, i, j])] = 1.0;
            }
            let onehot = Tensor::constant(onehot)?;
            let n_pixels = (shape[1] * shape[2]) as f64;
            let ce = onehot.mul(&log_p)?.sum()?.mul_scalar(-1.0 / n_pixels)?;
            // macro-average soft Dice over foreground classes
            let mut dice_terms = Vec::with_capacity(classes - 1);
            for c in 1..*classes {
                let pc = probs.select_channel(c)?;
                let gc = onehot.select_channel(c)?;
                dice_terms.push(soft_dice(&pc, &gc)?);
            }
            let dice = if dice_terms.is_empty() {
                Tensor::scalar(1.0)?
            } else {
                mean_all(&dice_terms)?
            };
            ce.add(&dice.rsub_scalar(1.0)?)
        }
    }
}

/// 2*sum(p*g) / (sum(p) + sum(g) + eps).
fn soft_dice(probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let numerator = probs.mul(truth)?.sum()?.mul_scalar(2.0)?;
    let denominator = probs.sum()?.add(&truth.sum()?)?.add_scalar(DICE_EPSILON)?;
    numerator.div(&denominator)
}

/// Mean ce_dice over a batch of (logits, labels) pairs.
pub fn ce_dice_loss_batch(items: &[(Tensor, Labels)]) -> Result<Tensor> {
    if items.is_empty() {
        return Err(TcsError::InvalidInput(
            "ce_dice_loss_batch on an empty batch".into(),
        ));
    }
    let per_sample: Vec<Tensor> = items
        .iter()
        .map(|(logits, labels)| ce_dice_loss(logits, labels))
        .collect::<Result<_>>()?;
    mean_all(&per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::constant(Array2::from_shape_fn((h, w), |(i, j)| f(i, j)).into_dyn()).unwrap()
    }

    /// Plain-scalar SSIM oracle over the same global statistics.
    fn oracle_ssim(a: &[f64], b: &[f64], tau1: f64, tau2: f64) -> f64 {
        let n = a.len() as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let var_a = a.iter().map(|x| (x - mu_a).powi(2)).sum::<f64>() / n;
        let var_b = b.iter().map(|x| (x - mu_b).powi(2)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        ((2.0 * mu_a * mu_b + tau1) * (2.0 * cov + tau2))
            / ((mu_a * mu_a + mu_b * mu_b + tau1) * (var_a + var_b + tau2))
    }

    #[test]
    fn ssim_self_is_one() {
        let p = SsimParams::default();
        let x = plane(6, 6, |i, j| ((i * 7 + j * 3) % 10) as f64 / 10.0);
        let s = ssim(&x, &x, &p).unwrap().item().unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetry_and_oracle_agreement() {
        let p = SsimParams::default();
        let a = plane(5, 7, |i, j| ((i * 13 + j * 5) % 11) as f64 / 11.0);
        let b = plane(5, 7, |i, j| ((i * 5 + j * 17) % 13) as f64 / 13.0);
        let sab = ssim(&a, &b, &p).unwrap().item().unwrap();
        let sba = ssim(&b, &a, &p).unwrap().item().unwrap();
        assert!((sab - sba).abs() < 1e-12);
        let av: Vec<f64> = a.values().iter().copied().collect();
        let bv: Vec<f64> = b.values().iter().copied().collect();
        let want = oracle_ssim(&av, &bv, p.tau1, p.tau2);
        assert!((sab - want).abs() < 1e-10);
        assert!(sab <= 1.0);
    }

    #[test]
    fn ssim_anticorrelated_approaches_minus_one() {
        // x half zeros / half ones vs 1-x: as tau -> 0 the negative
        // covariance dominates and SSIM tends to -1.
        let p = SsimParams::new(1e-12, 1e-12).unwrap();
        let x = plane(2, 2, |i, _| if i == 0 { 0.0 } else { 1.0 });
        let y = plane(2, 2, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let s = ssim(&x, &y, &p).unwrap().item().unwrap();
        assert!(s < -0.999, "got {s}");
    }

    #[test]
    fn ssim_constant_planes() {
        let p = SsimParams::default();
        let a = plane(4, 4, |_, _| 0.3);
        let b = plane(4, 4, |_, _| 0.3);
        assert!((ssim(&a, &b, &p).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        let c = plane(4, 4, |_, _| 0.6);
        // variance terms collapse to tau2/tau2 = 1
        let want = (2.0 * 0.3 * 0.6 + p.tau1) / (0.09 + 0.36 + p.tau1);
        let got = ssim(&a, &c, &p).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    fn two_channel(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(2 * h * w);
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(c, i, j));
                }
            }
        }
        Tensor::from_vec(&[2, h, w], data).unwrap()
    }

    #[test]
    fn ssim_loss_perfect_reconstruction_is_zero() {
        let p = SsimParams::default();
        let io = two_channel(6, 6, |c, i, j| ((c + i * 3 + j) % 7) as f64 / 7.0);
        let loss = ssim_loss(
            &[io.clone()],
            &[io.clone()],
            &[io.clone()],
            &p,
            SsimLossForm::Sum,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn ssim_loss_one_term_vanishes() {
        let p = SsimParams::default();
        let io = two_channel(6, 6, |c, i, j| ((c + i * 3 + j) % 7) as f64 / 7.0);
        let rm = two_channel(6, 6, |c, i, j| ((c + i + j * 2) % 5) as f64 / 5.0);
        let loss = ssim_loss(
            &[rm.clone()],
            &[io.clone()],
            &[io.clone()],
            &p,
            SsimLossForm::Sum,
        )
        .unwrap()
        .item()
        .unwrap();
        let s = ssim_2ch(&rm, &io, &p).unwrap().item().unwrap();
        assert!((loss - (1.0 - s)).abs() < 1e-12);
    }

    #[test]
    fn ssim_loss_batch_mean() {
        // With R_o = I_o the per-sample loss is 1 - SSIM(R_m, I_o); the
        // batch loss is the arithmetic mean of the per-sample values.
        let p = SsimParams::default();
        let io1 = two_channel(6, 6, |c, i, j| ((c + i + j) % 4) as f64 / 4.0);
        let io2 = two_channel(6, 6, |c, i, j| ((c * 2 + i + j) % 6) as f64 / 6.0);
        let rm1 = two_channel(6, 6, |_, i, j| ((i * j) % 3) as f64 / 3.0);
        let rm2 = two_channel(6, 6, |_, i, j| ((i + 2 * j) % 5) as f64 / 5.0);
        let l1 = ssim_loss(
            &[rm1.clone()],
            &[io1.clone()],
            &[io1.clone()],
            &p,
            SsimLossForm::Sum,
        )
        .unwrap()
        .item()
        .unwrap();
        let l2 = ssim_loss(
            &[rm2.clone()],
            &[io2.clone()],
            &[io2.clone()],
            &p,
            SsimLossForm::Sum,
        )
        .unwrap()
        .item()
        .unwrap();
        let batch = ssim_loss(
            &[rm1, rm2],
            &[io1.clone(), io2.clone()],
            &[io1, io2],
            &p,
            SsimLossForm::Sum,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((batch - 0.5 * (l1 + l2)).abs() < 1e-12);
    }

    fn embedding(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn contrastive_all_identical_equals_log_2n_minus_1() {
        let params = ContrastParams::new(0.07, 1.0).unwrap();
        for n in [1usize, 2, 4] {
            let e: Vec<Tensor> = (0..n).map(|_| embedding(&[0.3, -0.1, 0.7])).collect();
            let loss = contrastive_loss(&[e.clone()], &[e.clone()], &params)
                .unwrap()
                .item()
                .unwrap();
            let want = ((2 * n - 1) as f64).ln();
            assert!(
                (loss - want).abs() < 1e-12,
                "n={n}: got {loss}, want {want}"
            );
        }
    }

    #[test]
    fn contrastive_orthogonal_negatives_case() {
        // positive aligned (sim 1), negatives orthogonal (sim 0), gamma=1,
        // N=2, one level: each anchor sees denominator e + 2 and the loss
        // is -log(e/(e+2)).
        let params = ContrastParams::new(1.0, 1.0).unwrap();
        let m = vec![
            embedding(&[1.0, 0.0, 0.0, 0.0]),
            embedding(&[0.0, 1.0, 0.0, 0.0]),
        ];
        let o = vec![
            embedding(&[1.0, 0.0, 0.0, 0.0]),
            embedding(&[0.0, 1.0, 0.0, 0.0]),
        ];
        let loss = contrastive_loss(&[m], &[o], &params)
            .unwrap()
            .item()
            .unwrap();
        let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - want).abs() < 1e-10, "got {loss}, want {want}");
        assert!((want - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn contrastive_scale_invariance() {
        let params = ContrastParams::new(0.5, 1.0).unwrap();
        let m = vec![embedding(&[0.4, 0.3, -0.2]), embedding(&[-0.1, 0.8, 0.2])];
        let o = vec![embedding(&[0.5, 0.1, -0.1]), embedding(&[-0.2, 0.7, 0.4])];
        let base = contrastive_loss(&[m.clone()], &[o.clone()], &params)
            .unwrap()
            .item()
            .unwrap();
        let scaled_m: Vec<Tensor> = m.iter().map(|e| e.mul_scalar(37.5).unwrap()).collect();
        let scaled = contrastive_loss(&[scaled_m], &[o], &params)
            .unwrap()
            .item()
            .unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn contrastive_levels_sum() {
        let params = ContrastParams::new(0.07, 1.0).unwrap();
        let e1 = vec![embedding(&[1.0, 0.0]), embedding(&[0.0, 1.0])];
        let e2 = vec![embedding(&[0.5, 0.5]), embedding(&[0.5, -0.5])];
        let one = contrastive_loss(&[e1.clone()], &[e1.clone()], &params)
            .unwrap()
            .item()
            .unwrap();
        let two = contrastive_loss(&[e2.clone()], &[e2.clone()], &params)
            .unwrap()
            .item()
            .unwrap();
        let both = contrastive_loss(&[e1.clone(), e2.clone()], &[e1, e2], &params)
            .unwrap()
            .item()
            .unwrap();
        assert!((both - (one + two)).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_zero_norm_and_allows_empty_scales() {
        let params = ContrastParams::new(0.07, 1.0).unwrap();
        let zero = vec![embedding(&[0.0, 0.0])];
        assert!(contrastive_loss(&[zero.clone()], &[zero], &params).is_err());
        // no levels -> zero loss (contrastive learning disabled)
        let empty: Vec<Vec<Tensor>> = Vec::new();
        let loss = contrastive_loss(&empty, &[], &params)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let a = Tensor::scalar(0.4).unwrap();
        let b = Tensor::scalar(0.6).unwrap();
        assert!((total_loss(&a, &b, 1.0).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert!((total_loss(&a, &b, 2.0).unwrap().item().unwrap() - 1.6).abs() < 1e-15);
        assert!((total_loss(&a, &b, 0.0).unwrap().item().unwrap() - 0.4).abs() < 1e-15);
        assert!(total_loss(&a, &b, -0.1).is_err());
    }

    #[test]
    fn ce_dice_perfect_confident_prediction() {
        let labels = Array2::from_shape_fn((4, 4), |(i, _)| u8::from(i < 2));
        let logits = Tensor::from_vec(
            &[1, 4, 4],
            labels
                .iter()
                .map(|&v| if v == 1 { 30.0 } else { -30.0 })
                .collect(),
        )
        .unwrap();
        let loss = ce_dice_loss(&logits, &Labels::Binary(labels))
            .unwrap()
            .item()
            .unwrap();
        assert!(loss.abs() < 1e-6, "got {loss}");
    }

    #[test]
    fn ce_dice_uniform_prediction_has_log2_ce() {
        let labels = Array2::from_shape_fn((4, 4), |(i, _)| u8::from(i < 2));
        let logits = Tensor::from_vec(&[1, 4, 4], vec![0.0; 16]).unwrap();
        let loss = ce_dice_loss(&logits, &Labels::Binary(labels))
            .unwrap()
            .item()
            .unwrap();
        // CE component is exactly log 2; dice term 1 - 2*0.5*8/(8+8+eps)
        let dice_term = 1.0 - (2.0 * 0.5 * 8.0) / (8.0 + 8.0 + DICE_EPSILON);
        assert!((loss - (2f64.ln() + dice_term)).abs() < 1e-9, "got {loss}");
    }

    #[test]
    fn soft_dice_hand_case() {
        // p=[1,1,0,0], g=[1,0,0,0] -> dice = 2/3, term 1 - 2/3
        let p = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let dice = soft_dice(&p, &g).unwrap().item().unwrap();
        assert!((1.0 - dice - (1.0 - 2.0 / 3.0)).abs() < 1e-7);
    }

    #[test]
    fn ce_dice_multiclass_validation() {
        let map = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 3) as u8);
        let logits =
            Tensor::from_vec(&[3, 4, 4], (0..48).map(|i| (i % 5) as f64 * 0.1).collect()).unwrap();
        assert!(ce_dice_loss(
            &logits,
            &Labels::Multi {
                map: map.clone(),
                classes: 3
            }
        )
        .is_ok());
        // label outside class range
        let mut bad = map.clone();
        bad[(0, 0)] = 7;
        assert!(ce_dice_loss(
            &logits,
            &Labels::Multi {
                map: bad,
                classes: 3
            }
        )
        .is_err());
    }

    #[test]
    fn gamma_stays_positive_under_updates() {
        use ndarray::{ArrayD, IxDyn};
        let params = ContrastParams::new(0.07, 1.0).unwrap();
        assert!((params.gamma() - 0.07).abs() < 1e-15);
        params
            .log_gamma_param()
            .set_values(ArrayD::from_elem(IxDyn(&[]), -20.0))
            .unwrap();
        assert!(params.gamma() > 0.0);
    }
}
