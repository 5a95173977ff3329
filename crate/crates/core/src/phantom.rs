//! Deterministic synthetic chest-like HU slices with exact ground-truth
//! lesion masks. Ellipse composites, not anatomy: air background, a soft
//! tissue body, two lungs, a rib band and vertebra in bone, vessel dots,
//! and an optional lesion blob painted last so its mask is exact.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::imaging::HuSlice;
use crate::io::{write_labels, write_volume};
use crate::rng::{derive_seed, rng_from_seed, Role};

/// Mean and standard deviation of one tissue's HU distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TissueHu {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TissuePalette {
    pub air: TissueHu,
    pub lung: TissueHu,
    pub soft: TissueHu,
    pub bone: TissueHu,
    pub lesion: TissueHu,
}

impl Default for TissuePalette {
    fn default() -> Self {
        TissuePalette {
            air: TissueHu { mean: -1000.0, sigma: 10.0 },
            lung: TissueHu { mean: -800.0, sigma: 40.0 },
            soft: TissueHu { mean: 40.0, sigma: 20.0 },
            bone: TissueHu { mean: 400.0, sigma: 60.0 },
            lesion: TissueHu { mean: -50.0, sigma: 60.0 },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub resolution: usize,
    pub seed: u64,
    pub palette: TissuePalette,
    /// Relative jitter applied to ellipse centers and axes.
    pub geometry_jitter: f64,
    /// Probability that a slice carries a lesion.
    pub lesion_probability: f64,
    /// Lesion radius range as a fraction of the resolution.
    pub lesion_radius_range: (f64, f64),
}

impl PhantomSpec {
    pub fn new(resolution: usize, seed: u64, lesion_probability: f64) -> Result<Self> {
        let spec = PhantomSpec {
            resolution,
            seed,
            palette: TissuePalette::default(),
            geometry_jitter: 0.06,
            lesion_probability,
            lesion_radius_range: (0.05, 0.11),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution % 32 != 0 || self.resolution == 0 {
            return Err(TcsError::config(
                "resolution",
                format!("must be a positive multiple of 32, got {}", self.resolution),
            ));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(TcsError::config(
                "lesion_probability",
                format!("must lie in [0, 1], got {}", self.lesion_probability),
            ));
        }
        let palette = [
            self.palette.air,
            self.palette.lung,
            self.palette.soft,
            self.palette.bone,
            self.palette.lesion,
        ];
        for t in palette {
            if t.sigma < 0.0 || !(-1024.0..=1000.0).contains(&t.mean) {
                return Err(TcsError::config(
                    "palette",
                    format!("mean must lie in [-1024, 1000] with sigma >= 0, got {t:?}"),
                ));
            }
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && hi >= lo && hi < 0.5) {
            return Err(TcsError::config(
                "lesion_radius_range",
                format!("need 0 < lo <= hi < 0.5, got ({lo}, {hi})"),
            ));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn noise(rng: &mut ChaCha8Rng, t: TissueHu) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (t.mean + t.sigma * z).clamp(-1024.0, 3071.0)
}

/// Paint `tissue` over the ellipse; pixel centers at (col+0.5, row+0.5).
/// Optionally records painted pixels into a ground-truth mask.
fn paint(
    canvas: &mut Array2<f64>,
    ellipse: &Ellipse,
    tissue: TissueHu,
    rng: &mut ChaCha8Rng,
    mut gt: Option<&mut Array2<u8>>,
) {
    let (h, w) = canvas.dim();
    let r0 = ((ellipse.cy - ellipse.ay).floor().max(0.0)) as usize;
    let r1 = ((ellipse.cy + ellipse.ay).ceil().min(h as f64)) as usize;
    let c0 = ((ellipse.cx - ellipse.ax).floor().max(0.0)) as usize;
    let c1 = ((ellipse.cx + ellipse.ax).ceil().min(w as f64)) as usize;
    for i in r0..r1 {
        for j in c0..c1 {
            if ellipse.contains(j as f64 + 0.5, i as f64 + 0.5) {
                canvas[(i, j)] = noise(rng, tissue);
                if let Some(gt) = gt.as_deref_mut() {
                    gt[(i, j)] = 1;
                }
            }
        }
    }
}

/// Paint an elliptical annulus (between `inner` and `outer` scalings of a
/// base ellipse), restricted to rows above `max_row`.
fn paint_band(
    canvas: &mut Array2<f64>,
    base: &Ellipse,
    inner: f64,
    outer: f64,
    max_row: f64,
    tissue: TissueHu,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = canvas.dim();
    let big = Ellipse {
        cx: base.cx,
        cy: base.cy,
        ax: base.ax * outer,
        ay: base.ay * outer,
    };
    let small = Ellipse {
        cx: base.cx,
        cy: base.cy,
        ax: base.ax * inner,
        ay: base.ay * inner,
    };
    for i in 0..h {
        if (i as f64 + 0.5) > max_row {
            continue;
        }
        for j in 0..w {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            if big.contains(x, y) && !small.contains(x, y) {
                canvas[(i, j)] = noise(rng, tissue);
            }
        }
    }
}

fn jittered(rng: &mut ChaCha8Rng, base: f64, jitter: f64) -> f64 {
    base * (1.0 + jitter * (rng.gen::<f64>() * 2.0 - 1.0))
}

/// Generate one slice with its ground-truth lesion mask (1 = lesion).
/// Deterministic in (spec.seed, index).
pub fn generate_slice(spec: &PhantomSpec, index: u64) -> Result<(HuSlice, Array2<u8>)> {
    spec.validate()?;
    let res = spec.resolution;
    let mut rng = rng_from_seed(derive_seed(spec.seed, Role::Phantom, index, 0));
    let fres = res as f64;

    // air background
    let mut canvas = Array2::from_shape_fn((res, res), |_| noise(&mut rng, spec.palette.air));
    let mut gt = Array2::<u8>::zeros((res, res));

    let jit = spec.geometry_jitter;
    let body = Ellipse {
        cx: jittered(&mut rng, 0.50 * fres, jit * 0.4),
        cy: jittered(&mut rng, 0.54 * fres, jit * 0.4),
        ax: jittered(&mut rng, 0.42 * fres, jit),
        ay: jittered(&mut rng, 0.38 * fres, jit),
    };
    paint(&mut canvas, &body, spec.palette.soft, &mut rng, None);

    // rib band: bone annulus in the upper body
    paint_band(
        &mut canvas,
        &body,
        0.88,
        0.96,
        body.cy + 0.1 * fres,
        spec.palette.bone,
        &mut rng,
    );

    let mut lungs = Vec::with_capacity(2);
    for side in [-1.0, 1.0] {
        let lung = Ellipse {
            cx: jittered(&mut rng, (0.5 + side * 0.16) * fres, jit),
            cy: jittered(&mut rng, 0.50 * fres, jit),
            ax: jittered(&mut rng, 0.14 * fres, jit),
            ay: jittered(&mut rng, 0.23 * fres, jit),
        };
        paint(&mut canvas, &lung, spec.palette.lung, &mut rng, None);
        lungs.push(lung);
    }

    // vertebra analogue at the lower midline
    let vertebra = Ellipse {
        cx: body.cx,
        cy: jittered(&mut rng, 0.76 * fres, jit * 0.5),
        ax: jittered(&mut rng, 0.055 * fres, jit),
        ay: jittered(&mut rng, 0.050 * fres, jit),
    };
    paint(&mut canvas, &vertebra, spec.palette.bone, &mut rng, None);

    // vessel dots inside each lung
    for lung in &lungs {
        let n_vessels = rng.gen_range(4..=9);
        for _ in 0..n_vessels {
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            let radial = rng.gen::<f64>().sqrt() * 0.8;
            let dot = Ellipse {
                cx: lung.cx + angle.cos() * radial * lung.ax,
                cy: lung.cy + angle.sin() * radial * lung.ay,
                ax: rng.gen_range(0.6..1.6),
                ay: rng.gen_range(0.6..1.6),
            };
            paint(&mut canvas, &dot, spec.palette.soft, &mut rng, None);
        }
    }

    // lesion last, so no later paint can disturb its recorded mask
    if rng.gen::<f64>() < spec.lesion_probability {
        let lung = &lungs[rng.gen_range(0..lungs.len())];
        let (lo, hi) = spec.lesion_radius_range;
        let r = rng.gen_range(lo..=hi) * fres;
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        let radial = rng.gen::<f64>() * 0.5;
        let lesion = Ellipse {
            cx: lung.cx + angle.cos() * radial * lung.ax,
            cy: lung.cy + angle.sin() * radial * lung.ay,
            ax: r,
            ay: jittered(&mut rng, r, 0.25),
        };
        paint(
            &mut canvas,
            &lesion,
            spec.palette.lesion,
            &mut rng,
            Some(&mut gt),
        );
    }

    Ok((HuSlice::new(canvas)?, gt))
}

/// One dataset entry in `dataset.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: usize,
    pub volume: String,
    pub mask: String,
    pub has_lesion: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub entries: Vec<DatasetEntry>,
}

/// Generate `n` single-slice volumes with their ground-truth masks into
/// `dir`, plus a `dataset.json` manifest. Fully deterministic: repeating
/// the call with the same spec yields byte-identical files.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, dir: &std::path::Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(TcsError::InvalidInput("generate_dataset: n must be >= 1".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| TcsError::io(dir, e))?;

    use rayon::prelude::*;
    crate::cli::init_thread_pool();
    let slices: Vec<(HuSlice, Array2<u8>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_slice(spec, i))
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(n);
    for (i, (slice, gt)) in slices.iter().enumerate() {
        let volume = format!("slice_{i:04}.raw");
        let mask = format!("mask_{i:04}.raw");
        write_volume(&dir.join(&volume), std::slice::from_ref(slice), [1.0, 1.0, 1.0])?;
        write_labels(&dir.join(&mask), gt, 2)?;
        entries.push(DatasetEntry {
            id: i,
            volume,
            mask,
            has_lesion: gt.iter().any(|&v| v != 0),
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        entries,
    };
    let path = dir.join("dataset.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| TcsError::io(&path, e))?;
    Ok(manifest)
}

/// Load a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<(HuSlice, Array2<u8>)>> {
    let path = dir.join("dataset.json");
    let manifest: DatasetManifest = {
        let text = std::fs::read_to_string(&path).map_err(|e| TcsError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| TcsError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
    };
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let mut slices = crate::io::read_volume(&dir.join(&entry.volume))?;
        let slice = slices.pop().ok_or_else(|| TcsError::Malformed {
            path: entry.volume.clone(),
            message: "volume holds no slices".into(),
        })?;
        let (mask, _classes) = crate::io::read_labels(&dir.join(&entry.mask))?;
        out.push((slice, mask));
    }
    Ok(out)
}
