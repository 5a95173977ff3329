//! HU slice preprocessing: normalization, clinical windowing, Sobel edges
//! and the 3-channel (lung, mediastinal, edge) input representation.
//!
//! All operations here are pure functions on value-like data and may be
//! called from any number of workers.

use ndarray::Array2;

use crate::error::{Result, TcsError};

/// Lung window preset: level -500 HU, width 1200 HU.
pub const LUNG_WINDOW: WindowSpec = WindowSpec {
    level: -500.0,
    width: 1200.0,
};

/// Mediastinal window preset: level 30 HU, width 300 HU.
pub const MEDIASTINAL_WINDOW: WindowSpec = WindowSpec {
    level: 30.0,
    width: 300.0,
};

/// Default full-range normalization bounds; chest tissue spans roughly
/// -1000 HU (air) to 500 HU (bone).
pub const DEFAULT_HU_MIN: f64 = -1000.0;
pub const DEFAULT_HU_MAX: f64 = 500.0;

/// Horizontal Sobel kernel, applied by cross-correlation.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Vertical Sobel kernel; the transpose of [`SOBEL_X`].
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Largest gradient magnitude the Sobel kernels can produce on a [0,255]
/// image: |Gx| and |Gy| each peak at 4*255, so the magnitude peaks at
/// 4*sqrt(2)*255. Used to rescale edge images back into [0,255].
pub const SOBEL_MAX_MAGNITUDE: f64 = 1442.4978335817475; // 4 * sqrt(2) * 255

/// A 2D grid of Hounsfield-unit values, the raw CT input.
#[derive(Debug, Clone, PartialEq)]
pub struct HuSlice {
    values: Array2<f64>,
}

impl HuSlice {
    /// Wrap a grid of HU values. Rejects slices smaller than 8x8 and any
    /// non-finite value (reported with its pixel coordinate).
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h < 8 || w < 8 {
            return Err(TcsError::InvalidInput(format!(
                "HuSlice must be at least 8x8, got {h}x{w}"
            )));
        }
        for ((i, j), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(TcsError::NonFinite {
                    context: "HuSlice".into(),
                    detail: format!("value {v} at pixel ({i}, {j})"),
                });
            }
        }
        Ok(Self { values })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// A display window over the HU axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    /// Window level (center), in HU.
    pub level: f64,
    /// Window width, in HU; must be positive.
    pub width: f64,
}

impl WindowSpec {
    pub fn new(level: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite() && level.is_finite()) {
            return Err(TcsError::InvalidInput(format!(
                "window width must be positive and finite, got level={level} width={width}"
            )));
        }
        Ok(Self { level, width })
    }
}

/// A 2D grid normalized into [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NormSlice(pub Array2<f64>);

/// A 2D grid of gray values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GraySlice(pub Array2<f64>);

/// The 3-channel input image: lung window, mediastinal window, combined
/// Sobel edge image, each plane stored in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbSlice {
    channels: [Array2<f64>; 3],
}

impl RgbSlice {
    /// Channel order within [`RgbSlice`].
    pub const LUNG: usize = 0;
    pub const MEDIASTINAL: usize = 1;
    pub const EDGE: usize = 2;

    pub fn new(channels: [Array2<f64>; 3]) -> Result<Self> {
        let dim = channels[0].dim();
        for (c, plane) in channels.iter().enumerate() {
            if plane.dim() != dim {
                return Err(TcsError::ShapeMismatch(format!(
                    "RgbSlice channel {c} has shape {:?}, expected {:?}",
                    plane.dim(),
                    dim
                )));
            }
            if let Some(((i, j), v)) = plane.indexed_iter().find(|(_, &v)| !(0.0..=1.0).contains(&v))
            {
                return Err(TcsError::InvalidInput(format!(
                    "RgbSlice channel {c} value {v} at ({i}, {j}) outside [0, 1]"
                )));
            }
        }
        Ok(Self { channels })
    }

    pub fn height(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.channels[0].ncols()
    }

    pub fn channel(&self, c: usize) -> &Array2<f64> {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Array2<f64>; 3] {
        &self.channels
    }

    /// Flattened [3, H, W] view in channel-major order, for tensor
    /// construction.
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.height() * self.width());
        for plane in &self.channels {
            out.extend(plane.iter().copied());
        }
        out
    }
}

/// Affine-map HU values into [0, 1], clamping at the bounds.
pub fn normalize_hu(slice: &HuSlice, hu_min: f64, hu_max: f64) -> Result<NormSlice> {
    if !(hu_min < hu_max) {
        return Err(TcsError::InvalidInput(format!(
            "normalize_hu requires hu_min < hu_max, got {hu_min} >= {hu_max}"
        )));
    }
    let range = hu_max - hu_min;
    let out = slice.values().mapv(|v| ((v - hu_min) / range).clamp(0.0, 1.0));
    Ok(NormSlice(out))
}

/// Map HU values through a clinical window onto the [0, 255] display range,
/// clamping values outside the window.
pub fn apply_window(slice: &HuSlice, win: &WindowSpec) -> GraySlice {
    let WindowSpec { level, width } = *win;
    GraySlice(
        slice
            .values()
            .mapv(|v| (((v - level + 0.5 * width) / width) * 255.0).clamp(0.0, 255.0)),
    )
}

/// Cross-correlate a 3x3 kernel over the image with replicate-edge padding,
/// so the output keeps the input shape.
fn correlate3x3_replicate(img: &Array2<f64>, kernel: &[[f64; 3]; 3]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (di, row) in kernel.iter().enumerate() {
                let ii = (i + di).saturating_sub(1).min(h - 1);
                for (dj, &k) in row.iter().enumerate() {
                    let jj = (j + dj).saturating_sub(1).min(w - 1);
                    acc += k * img[(ii, jj)];
                }
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Raw Sobel responses (Gx, Gy) with replicate-edge padding; exposed so the
/// gradient components can be checked against an independent convolution.
pub fn sobel_gradients(gray: &GraySlice) -> (Array2<f64>, Array2<f64>) {
    let gx = correlate3x3_replicate(&gray.0, &SOBEL_X);
    let gy = correlate3x3_replicate(&gray.0, &SOBEL_Y);
    (gx, gy)
}

/// Sobel edge magnitude, rescaled into [0, 255] by the theoretical maximum
/// magnitude [`SOBEL_MAX_MAGNITUDE`].
pub fn sobel_edge(gray: &GraySlice) -> GraySlice {
    let (gx, gy) = sobel_gradients(gray);
    let mut mag = gx;
    mag.zip_mut_with(&gy, |a, &b| {
        *a = ((*a * *a + b * b).sqrt() / SOBEL_MAX_MAGNITUDE * 255.0).clamp(0.0, 255.0);
    });
    GraySlice(mag)
}

/// Pixelwise maximum of the two per-window edge images.
pub fn combine_edges(edge_lung: &GraySlice, edge_medi: &GraySlice) -> Result<GraySlice> {
    if edge_lung.0.dim() != edge_medi.0.dim() {
        return Err(TcsError::ShapeMismatch(format!(
            "combine_edges: {:?} vs {:?}",
            edge_lung.0.dim(),
            edge_medi.0.dim()
        )));
    }
    let mut out = edge_lung.0.clone();
    out.zip_mut_with(&edge_medi.0, |a, &b| *a = a.max(b));
    Ok(GraySlice(out))
}

/// Build the 3-channel input image from a HU slice: lung window,
/// mediastinal window, and the pixelwise max of the two Sobel edge images,
/// each divided by 255 to land in [0, 1].
pub fn build_rgb(slice: &HuSlice) -> Result<RgbSlice> {
    let lung = apply_window(slice, &LUNG_WINDOW);
    let medi = apply_window(slice, &MEDIASTINAL_WINDOW);
    let edge = combine_edges(&sobel_edge(&lung), &sobel_edge(&medi))?;
    RgbSlice::new([
        lung.0.mapv(|v| v / 255.0),
        medi.0.mapv(|v| v / 255.0),
        edge.0.mapv(|v| v / 255.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn flat_slice(h: usize, w: usize, v: f64) -> HuSlice {
        HuSlice::new(Array2::from_elem((h, w), v)).unwrap()
    }

    /// Brute-force 3x3 cross-correlation with replicate padding, written
    /// independently of the implementation's index arithmetic.
    fn oracle_correlate(img: &Array2<f64>, k: &[[f64; 3]; 3]) -> Array2<f64> {
        let (h, w) = img.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                    acc += k[(di + 1) as usize][(dj + 1) as usize] * img[(ii, jj)];
                }
            }
            acc
        })
    }

    #[test]
    fn hu_slice_rejects_small_and_nonfinite() {
        assert!(HuSlice::new(Array2::zeros((4, 16))).is_err());
        let mut bad = Array2::zeros((8, 8));
        bad[(2, 3)] = f64::NAN;
        let err = HuSlice::new(bad).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "error should locate the pixel: {err}");
    }

    #[test]
    fn normalize_hu_boundaries() {
        let s = HuSlice::new(Array2::from_shape_fn((8, 8), |(i, _)| match i {
            0 => -1000.0,
            1 => 500.0,
            2 => -250.0,
            _ => -2000.0,
        }))
        .unwrap();
        let n = normalize_hu(&s, -1000.0, 500.0).unwrap();
        assert_eq!(n.0[(0, 0)], 0.0);
        assert_eq!(n.0[(1, 0)], 1.0);
        assert_eq!(n.0[(2, 0)], 0.5);
        assert_eq!(n.0[(3, 0)], 0.0); // clamped below
        assert!(normalize_hu(&s, 500.0, -1000.0).is_err());
    }

    #[test]
    fn apply_window_center_and_clamps() {
        let vals = [(-500.0, 127.5), (-1100.0, 0.0), (-1101.0, 0.0)];
        for (hu, expect) in vals {
            let g = apply_window(&flat_slice(8, 8, hu), &LUNG_WINDOW);
            assert_eq!(g.0[(0, 0)], expect, "hu={hu}");
        }
        // at the mediastinal ceiling l + 0.5 w = 180
        let g = apply_window(&flat_slice(8, 8, 180.0), &MEDIASTINAL_WINDOW);
        assert_eq!(g.0[(3, 3)], 255.0);
        let g = apply_window(&flat_slice(8, 8, 1000.0), &MEDIASTINAL_WINDOW);
        assert_eq!(g.0[(3, 3)], 255.0);
    }

    #[test]
    fn apply_window_is_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for step in 0..60 {
            let hu = -1200.0 + 30.0 * step as f64;
            let g = apply_window(&flat_slice(8, 8, hu), &LUNG_WINDOW);
            let v = g.0[(0, 0)];
            assert!(v >= prev, "window map must be monotone at hu={hu}");
            prev = v;
        }
    }

    #[test]
    fn sobel_constant_image_is_zero() {
        let g = GraySlice(Array2::from_elem((8, 8), 200.0));
        let e = sobel_edge(&g);
        assert!(e.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_constant_offset_invariance() {
        let img = Array2::from_shape_fn((9, 9), |(i, j)| ((i * 31 + j * 7) % 97) as f64);
        let a = sobel_edge(&GraySlice(img.clone()));
        let b = sobel_edge(&GraySlice(img + 50.0));
        assert!(a
            .0
            .iter()
            .zip(b.0.iter())
            .all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn sobel_step_edge_interior_response() {
        // 5x5 vertical step: columns 0..2 are 0, columns 2.. are 255.
        let img = Array2::from_shape_fn((5, 5), |(_, j)| if j >= 2 { 255.0 } else { 0.0 });
        let (gx, gy) = sobel_gradients(&GraySlice(img.clone()));
        // Interior columns adjacent to the step see the full 4*255 response.
        for i in 1..4 {
            assert_eq!(gx[(i, 1)], 4.0 * 255.0);
            assert_eq!(gx[(i, 2)], 4.0 * 255.0);
        }
        assert!(gy.iter().all(|&v| v == 0.0));
        // Against the independent correlation oracle on the whole image.
        let ox = oracle_correlate(&img, &SOBEL_X);
        assert_eq!(gx, ox);
    }

    #[test]
    fn sobel_transpose_symmetry() {
        let img = Array2::from_shape_fn((8, 11), |(i, j)| ((i * 13 + j * 29) % 251) as f64);
        let e = sobel_edge(&GraySlice(img.clone()));
        let et = sobel_edge(&GraySlice(img.reversed_axes()));
        assert_eq!(e.0.t().to_owned(), et.0);
    }

    #[test]
    fn combine_edges_is_max() {
        let a = GraySlice(Array2::from_elem((8, 8), 10.0));
        let b = GraySlice(Array2::from_elem((8, 8), 200.0));
        let c = combine_edges(&a, &b).unwrap();
        assert!(c.0.iter().all(|&v| v == 200.0));
        // commutativity and identities
        let d = combine_edges(&b, &a).unwrap();
        assert_eq!(c.0, d.0);
        let z = GraySlice(Array2::zeros((8, 8)));
        assert_eq!(combine_edges(&a, &z).unwrap().0, a.0);
        assert_eq!(combine_edges(&a, &a).unwrap().0, a.0);
        let bad = GraySlice(Array2::zeros((8, 9)));
        assert!(combine_edges(&a, &bad).is_err());
    }

    #[test]
    fn build_rgb_all_air() {
        let rgb = build_rgb(&flat_slice(16, 16, -1000.0)).unwrap();
        let lung_expect = (-1000.0 + 500.0 + 600.0) / 1200.0;
        assert!(rgb
            .channel(RgbSlice::LUNG)
            .iter()
            .all(|&v| (v - lung_expect).abs() < 1e-12));
        assert!(rgb.channel(RgbSlice::MEDIASTINAL).iter().all(|&v| v == 0.0));
        assert!(rgb.channel(RgbSlice::EDGE).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_rgb_stays_in_unit_range_and_is_deterministic() {
        let s = HuSlice::new(Array2::from_shape_fn((16, 16), |(i, j)| {
            -1024.0 + ((i * 517 + j * 131) % 4096) as f64
        }))
        .unwrap();
        let a = build_rgb(&s).unwrap();
        for plane in a.channels() {
            assert!(plane.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let b = build_rgb(&s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn build_rgb_golden_checksums() {
        // Frozen from the pixelwise oracle path (window, replicate-pad
        // Sobel, max-combine) on a deterministic ramp slice.
        let s = HuSlice::new(Array2::from_shape_fn((16, 16), |(i, j)| {
            -1000.0 + ((i * 97 + j * 13) % 1500) as f64
        }))
        .unwrap();
        let rgb = build_rgb(&s).unwrap();
        let sums: Vec<f64> = rgb.channels().iter().map(|p| p.sum()).collect();
        let expect = [
            oracle_channel_sum(&s, 0),
            oracle_channel_sum(&s, 1),
            oracle_channel_sum(&s, 2),
        ];
        for (got, want) in sums.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    /// Pixelwise oracle for one output channel, composed of scalar window
    /// math and the brute-force correlation above.
    fn oracle_channel_sum(s: &HuSlice, c: usize) -> f64 {
        let win = |v: f64, l: f64, w: f64| (((v - l + 0.5 * w) / w) * 255.0).clamp(0.0, 255.0);
        let lung = s.values().mapv(|v| win(v, -500.0, 1200.0));
        let medi = s.values().mapv(|v| win(v, 30.0, 300.0));
        let edge_of = |img: &Array2<f64>| {
            let gx = oracle_correlate(img, &SOBEL_X);
            let gy = oracle_correlate(img, &SOBEL_Y);
            let mut m = gx;
            m.zip_mut_with(&gy, |a, &b| {
                *a = ((*a * *a + b * b).sqrt() / SOBEL_MAX_MAGNITUDE * 255.0).clamp(0.0, 255.0)
            });
            m
        };
        let el = edge_of(&lung);
        let em = edge_of(&medi);
        match c {
            0 => lung.mapv(|v| v / 255.0).sum(),
            1 => medi.mapv(|v| v / 255.0).sum(),
            _ => {
                let mut e = el;
                e.zip_mut_with(&em, |a, &b| *a = a.max(b));
                e.mapv(|v| v / 255.0).sum()
            }
        }
    }
}
