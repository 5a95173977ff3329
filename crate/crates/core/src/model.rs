//! The shared-weight encoder-decoder and the multi-scale projection heads.
//!
//! Desk-scale architecture: a plain convolutional pyramid (stride-2
//! downsample plus one 3x3 conv per level, ReLU) with a mirrored
//! nearest-neighbor-upsample decoder and U-Net skip concatenations. Both
//! training branches call the same `Model` instance, so weight sharing is
//! object identity rather than a synchronization protocol.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::diffengine::{load_checkpoint, save_checkpoint, ParamSet, Tensor};
use crate::error::{Result, TcsError};
use crate::rng::{derive_seed, rng_from_seed, Role};

/// Number of pyramid levels; level l halves the spatial size l times.
pub const LEVELS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub channels: [usize; LEVELS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            channels: [8, 16, 32, 64, 128],
        }
    }
}

/// Which pyramid levels feed contrastive learning, and the embedding size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MepConfig {
    /// Subset of {3, 4, 5}, ascending.
    pub scales: Vec<usize>,
    pub embed_dim: usize,
}

impl MepConfig {
    pub const DEFAULT_EMBED_DIM: usize = 128;

    /// The ablation arms: 0 = none, 1 = {F5}, 2 = {F4,F5}, 3 = {F3,F4,F5}.
    pub fn from_scale_count(count: usize) -> Result<Self> {
        let scales = match count {
            0 => vec![],
            1 => vec![5],
            2 => vec![4, 5],
            3 => vec![3, 4, 5],
            other => {
                return Err(TcsError::config(
                    "scales",
                    format!("must be 0..=3, got {other}"),
                ))
            }
        };
        Ok(MepConfig {
            scales,
            embed_dim: Self::DEFAULT_EMBED_DIM,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|s| !(3..=5).contains(s)) {
            return Err(TcsError::config(
                "scales",
                format!("levels must lie in 3..=5, got {:?}", self.scales),
            ));
        }
        if self.embed_dim == 0 {
            return Err(TcsError::config("embed_dim", "must be positive"));
        }
        Ok(())
    }
}

impl Default for MepConfig {
    fn default() -> Self {
        Self::from_scale_count(2).expect("2 is a valid scale count")
    }
}

/// Output head wiring; exactly one is active.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// 2 channels (lung, mediastinal) + sigmoid, for pretraining.
    Recon,
    /// 1 channel + sigmoid.
    SegBinary,
    /// `classes` channels + channelwise softmax (background included).
    SegMulti { classes: usize },
}

impl HeadKind {
    pub fn out_channels(&self) -> usize {
        match self {
            HeadKind::Recon => 2,
            HeadKind::SegBinary => 1,
            HeadKind::SegMulti { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mep: MepConfig,
    pub head: HeadKind,
    /// Training resolution; the flatten-then-linear projection ties the MEP
    /// input size to it, so projection is resolution-specific.
    pub resolution: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 32 != 0 || self.resolution == 0 {
            return Err(TcsError::config(
                "resolution",
                format!("must be a positive multiple of 32, got {}", self.resolution),
            ));
        }
        if let HeadKind::SegMulti { classes } = self.head {
            if classes < 2 {
                return Err(TcsError::config(
                    "head.classes",
                    "multiclass head needs at least 2 classes",
                ));
            }
        }
        self.mep.validate()
    }
}

/// The five per-level feature maps of one branch, level l at H/2^l.
pub struct PyramidFeatures {
    levels: Vec<Tensor>,
}

impl PyramidFeatures {
    /// Level index 1..=5.
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.levels.iter()
    }
}

pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
}

fn conv_init(
    rng: &mut rand_chacha::ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> ArrayD<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let n = c_out * c_in * k * k;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[c_out, c_in, k, k]), data).expect("init size")
}

fn linear_init(rng: &mut rand_chacha::ChaCha8Rng, d_out: usize, d_in: usize) -> ArrayD<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let std = (1.0 / d_in as f64).sqrt();
    let data: Vec<f64> = (0..d_out * d_in)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[d_out, d_in]), data).expect("init size")
}

fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

impl Model {
    /// Build a model with freshly initialized weights, deterministic in
    /// (config, seed).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, Role::WeightInit, 0, 0));
        let mut params = ParamSet::new();
        let ch = cfg.encoder.channels;

        let add = |params: &mut ParamSet, name: String, values: ArrayD<f64>| -> Result<()> {
            params.insert(name.clone(), Tensor::parameter(values, name)?)
        };

        // encoder: per level a stride-2 downsample conv then a 3x3 conv
        let mut c_prev = cfg.encoder.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            let l = i + 1;
            add(
                &mut params,
                format!("enc.l{l}.down.weight"),
                conv_init(&mut rng, c, c_prev, 3),
            )?;
            add(&mut params, format!("enc.l{l}.down.bias"), zeros(&[c]))?;
            add(
                &mut params,
                format!("enc.l{l}.conv.weight"),
                conv_init(&mut rng, c, c, 3),
            )?;
            add(&mut params, format!("enc.l{l}.conv.bias"), zeros(&[c]))?;
            c_prev = c;
        }
        // decoder: upsample, concat skip, conv; dec.l{k} emits level-k maps
        for k in (1..LEVELS).rev() {
            let c_in = ch[k] + ch[k - 1]; // upsampled deeper map + skip
            let c_out = ch[k - 1];
            add(
                &mut params,
                format!("dec.l{k}.conv.weight"),
                conv_init(&mut rng, c_out, c_in, 3),
            )?;
            add(&mut params, format!("dec.l{k}.conv.bias"), zeros(&[c_out]))?;
        }
        // final full-resolution stage, no skip (there is no level-0 map)
        add(
            &mut params,
            "dec.l0.conv.weight".to_string(),
            conv_init(&mut rng, ch[0], ch[0], 3),
        )?;
        add(&mut params, "dec.l0.conv.bias".to_string(), zeros(&[ch[0]]))?;

        // MEP projection heads, one per contrastive level
        for &level in &cfg.mep.scales {
            let spatial = cfg.resolution >> level;
            let d_in = ch[level - 1] * spatial * spatial;
            add(
                &mut params,
                format!("mep.l{level}.weight"),
                linear_init(&mut rng, cfg.mep.embed_dim, d_in),
            )?;
            add(
                &mut params,
                format!("mep.l{level}.bias"),
                zeros(&[cfg.mep.embed_dim]),
            )?;
        }

        // output head
        let c_out = cfg.head.out_channels();
        add(
            &mut params,
            "head.conv.weight".to_string(),
            conv_init(&mut rng, c_out, ch[0], 3),
        )?;
        add(&mut params, "head.conv.bias".to_string(), zeros(&[c_out]))?;

        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("model parameter `{name}` missing"))
    }

    /// Run the encoder over a [3, H, W] input; H and W must be divisible
    /// by 32 so each of the five levels halves exactly.
    pub fn encode(&self, x: &Tensor) -> Result<PyramidFeatures> {
        let shape = x.shape();
        if shape.len() != 3 || shape[0] != self.cfg.encoder.in_channels {
            return Err(TcsError::ShapeMismatch(format!(
                "encode: input {shape:?}, expected [{}, H, W]",
                self.cfg.encoder.in_channels
            )));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(TcsError::InvalidInput(format!(
                "encode: spatial size {}x{} not divisible by 32",
                shape[1], shape[2]
            )));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        let mut h = x.clone();
        for l in 1..=LEVELS {
            h = h
                .conv2d(
                    self.param(&format!("enc.l{l}.down.weight")),
                    Some(self.param(&format!("enc.l{l}.down.bias"))),
                    2,
                    1,
                )?
                .relu()?;
            h = h
                .conv2d(
                    self.param(&format!("enc.l{l}.conv.weight")),
                    Some(self.param(&format!("enc.l{l}.conv.bias"))),
                    1,
                    1,
                )?
                .relu()?;
            levels.push(h.clone());
        }
        Ok(PyramidFeatures { levels })
    }

    fn decode_trunk(&self, features: &PyramidFeatures) -> Result<Tensor> {
        let mut d = features.level(LEVELS).clone();
        for k in (1..LEVELS).rev() {
            d = d.upsample_nearest2x()?;
            d = d.concat_channel(features.level(k))?;
            d = d
                .conv2d(
                    self.param(&format!("dec.l{k}.conv.weight")),
                    Some(self.param(&format!("dec.l{k}.conv.bias"))),
                    1,
                    1,
                )?
                .relu()?;
        }
        d = d.upsample_nearest2x()?;
        d.conv2d(
            self.param("dec.l0.conv.weight"),
            Some(self.param("dec.l0.conv.bias")),
            1,
            1,
        )?
        .relu()
    }

    /// Raw head logits before the output activation.
    pub fn decode_logits(&self, features: &PyramidFeatures) -> Result<Tensor> {
        let d = self.decode_trunk(features)?;
        d.conv2d(
            self.param("head.conv.weight"),
            Some(self.param("head.conv.bias")),
            1,
            1,
        )
    }

    /// Decode the pyramid through the active head: recon gives [2, H, W]
    /// in (0,1); seg gives [1, H, W] sigmoid scores or [C, H, W] softmax.
    pub fn decode(&self, features: &PyramidFeatures) -> Result<Tensor> {
        let logits = self.decode_logits(features)?;
        match self.cfg.head {
            HeadKind::Recon | HeadKind::SegBinary => logits.sigmoid(),
            HeadKind::SegMulti { .. } => logits.softmax_channel(),
        }
    }

    /// Project the configured pyramid levels to embed_dim embeddings:
    /// flatten then one fully connected layer, no nonlinearity. Returns an
    /// empty list when no scales are configured.
    pub fn project(&self, features: &PyramidFeatures) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.cfg.mep.scales.len());
        for &level in &self.cfg.mep.scales {
            let flat = features.level(level).flatten()?;
            let expect = {
                let spatial = self.cfg.resolution >> level;
                self.cfg.encoder.channels[level - 1] * spatial * spatial
            };
            if flat.len() != expect {
                return Err(TcsError::ShapeMismatch(format!(
                    "project: level {level} flattens to {} values, projection expects {expect} \
                     (input resolution differs from configured {})",
                    flat.len(),
                    self.cfg.resolution
                )));
            }
            out.push(flat.fully_connected(
                self.param(&format!("mep.l{level}.weight")),
                self.param(&format!("mep.l{level}.bias")),
            )?);
        }
        Ok(out)
    }

    /// Replace the output head, preserving every trunk and MEP tensor
    /// bit-exactly; only head parameters are reinitialized.
    pub fn swap_head(&mut self, head: HeadKind, seed: u64) -> Result<()> {
        let mut rng = rng_from_seed(derive_seed(seed, Role::HeadInit, 0, 0));
        self.params.remove("head.conv.weight");
        self.params.remove("head.conv.bias");
        let c_out = head.out_channels();
        let c_in = self.cfg.encoder.channels[0];
        let w = conv_init(&mut rng, c_out, c_in, 3);
        self.params
            .insert("head.conv.weight", Tensor::parameter(w, "head.conv.weight")?)?;
        self.params.insert(
            "head.conv.bias",
            Tensor::parameter(zeros(&[c_out]), "head.conv.bias")?,
        )?;
        self.cfg.head = head;
        Ok(())
    }

    /// Architecture descriptor stored in checkpoint manifests.
    pub fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        save_checkpoint(dir, &self.params, self.arch_json())
    }

    /// Load a checkpoint as saved: architecture and every parameter must
    /// match the manifest exactly.
    pub fn load(dir: &std::path::Path) -> Result<Model> {
        let loaded = load_checkpoint(dir)?;
        let cfg: ModelConfig =
            serde_json::from_value(loaded.arch.clone()).map_err(|e| TcsError::Malformed {
                path: dir.join("manifest.json").display().to_string(),
                message: format!("arch descriptor: {e}"),
            })?;
        let model = Model::new(cfg, 0)?;
        let expected: Vec<String> = model.params.names().map(String::from).collect();
        let mut offending = Vec::new();
        for name in &expected {
            match loaded.get(name) {
                Some(values) if values.shape() == model.param(name).shape() => {
                    model.param(name).set_values(values.clone())?;
                }
                Some(values) => offending.push(format!(
                    "{name} (shape {:?} vs expected {:?})",
                    values.shape(),
                    model.param(name).shape()
                )),
                None => offending.push(format!("{name} (missing)")),
            }
        }
        for (name, _) in &loaded.tensors {
            if !expected.iter().any(|n| n == name) {
                offending.push(format!("{name} (unexpected)"));
            }
        }
        if !offending.is_empty() {
            return Err(TcsError::CheckpointMismatch(offending.join(", ")));
        }
        Ok(model)
    }

    /// Initialize this model's trunk (encoder + decoder, not the head and
    /// not the MEP projections) from a pretraining checkpoint. Mismatched
    /// or missing trunk tensors are an error listing the offending names.
    pub fn load_trunk_from(&mut self, dir: &std::path::Path) -> Result<()> {
        let loaded = load_checkpoint(dir)?;
        let mut offending = Vec::new();
        let trunk_names: Vec<String> = self
            .params
            .names()
            .filter(|n| n.starts_with("enc.") || n.starts_with("dec."))
            .map(String::from)
            .collect();
        for name in &trunk_names {
            match loaded.get(name) {
                Some(values) if values.shape() == self.param(name).shape() => {
                    self.param(name).set_values(values.clone())?;
                }
                Some(values) => offending.push(format!(
                    "{name} (shape {:?} vs expected {:?})",
                    values.shape(),
                    self.param(name).shape()
                )),
                None => offending.push(format!("{name} (missing)")),
            }
        }
        if !offending.is_empty() {
            return Err(TcsError::CheckpointMismatch(offending.join(", ")));
        }
        Ok(())
    }

    /// Checksum over trunk parameters, for head-isolation assertions.
    pub fn trunk_checksum(&self) -> u64 {
        self.params.checksum("enc.") ^ self.params.checksum("dec.")
    }

    /// Human-readable layer/shape table.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>18} {:>10}\n",
            "parameter", "shape", "values"
        ));
        let mut total = 0usize;
        for (name, t) in self.params.iter() {
            let shape = t.shape();
            total += t.len();
            out.push_str(&format!(
                "{:<22} {:>18} {:>10}\n",
                name,
                format!("{shape:?}"),
                t.len()
            ));
        }
        out.push_str(&format!("total parameters: {total}\n"));
        out
    }
}
