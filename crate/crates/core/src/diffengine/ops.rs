//! Forward operations and their gradient rules.
//!
//! Binary elementwise ops accept operands of identical shape, or a 0-d
//! scalar tensor on either side (broadcast); no other broadcasting exists.
//! Convolution is cross-correlation with zero padding, the usual deep
//! learning convention.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use crate::error::{Result, TcsError};

use super::tensor::Tensor;

/// Divisors with magnitude below this are rejected.
pub const DIV_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn classify(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.is_empty() {
        Ok(Broadcast::LeftScalar)
    } else if b.is_empty() {
        Ok(Broadcast::RightScalar)
    } else {
        Err(TcsError::ShapeMismatch(format!(
            "elementwise op on {a:?} vs {b:?} (only equal shapes or 0-d broadcast)"
        )))
    }
}

fn broadcast_forward(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    how: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    match how {
        Broadcast::Same => {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out
        }
        Broadcast::LeftScalar => {
            let av = a[IxDyn(&[])];
            b.mapv(|y| f(av, y))
        }
        Broadcast::RightScalar => {
            let bv = b[IxDyn(&[])];
            a.mapv(|x| f(x, bv))
        }
    }
}

/// Reduce an output-shaped gradient onto an operand that may be 0-d.
fn reduce_for(operand_is_scalar: bool, grad: ArrayD<f64>) -> ArrayD<f64> {
    if operand_is_scalar && grad.ndim() != 0 {
        ArrayD::from_elem(IxDyn(&[]), grad.sum())
    } else {
        grad
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let how = classify(&self.shape(), &other.shape())?;
        let out = broadcast_forward(&self.values(), &other.values(), how, |x, y| x + y);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let left_scalar = how == Broadcast::LeftScalar;
        let right_scalar = how == Broadcast::RightScalar;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                Ok(vec![
                    na.then(|| reduce_for(left_scalar, g.clone())),
                    nb.then(|| reduce_for(right_scalar, g.clone())),
                ])
            }),
            "add",
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let how = classify(&self.shape(), &other.shape())?;
        let out = broadcast_forward(&self.values(), &other.values(), how, |x, y| x - y);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let left_scalar = how == Broadcast::LeftScalar;
        let right_scalar = how == Broadcast::RightScalar;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                Ok(vec![
                    na.then(|| reduce_for(left_scalar, g.clone())),
                    nb.then(|| reduce_for(right_scalar, g.mapv(|v| -v))),
                ])
            }),
            "sub",
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let how = classify(&self.shape(), &other.shape())?;
        let out = broadcast_forward(&self.values(), &other.values(), how, |x, y| x * y);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.clone(), other.clone());
        let left_scalar = how == Broadcast::LeftScalar;
        let right_scalar = how == Broadcast::RightScalar;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = na.then(|| {
                    let gb = broadcast_forward(g, &b.values(), Broadcast::Same.pick(right_scalar), |x, y| x * y);
                    reduce_for(left_scalar, gb)
                });
                let gb = nb.then(|| {
                    let ga = broadcast_forward(g, &a.values(), Broadcast::Same.pick(left_scalar), |x, y| x * y);
                    reduce_for(right_scalar, ga)
                });
                Ok(vec![ga, gb])
            }),
            "mul",
        )
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let how = classify(&self.shape(), &other.shape())?;
        if other.values().iter().any(|v| v.abs() < DIV_EPSILON) {
            return Err(TcsError::InvalidInput(format!(
                "div: divisor magnitude below {DIV_EPSILON}"
            )));
        }
        let out = broadcast_forward(&self.values(), &other.values(), how, |x, y| x / y);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let (a, b) = (self.clone(), other.clone());
        let left_scalar = how == Broadcast::LeftScalar;
        let right_scalar = how == Broadcast::RightScalar;
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = na.then(|| {
                    let gb =
                        broadcast_forward(g, &b.values(), Broadcast::Same.pick(right_scalar), |x, y| x / y);
                    reduce_for(left_scalar, gb)
                });
                let gb = nb.then(|| {
                    // d(a/b)/db = -a / b^2
                    let num = broadcast_forward(g, &a.values(), Broadcast::Same.pick(left_scalar), |x, y| x * y);
                    let full = broadcast_forward(
                        &num,
                        &b.values(),
                        Broadcast::Same.pick(right_scalar),
                        |x, y| -x / (y * y),
                    );
                    reduce_for(right_scalar, full)
                });
                Ok(vec![ga, gb])
            }),
            "div",
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.values().mapv(|x| x + c);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| Ok(vec![need.then(|| g.clone())])),
            "add_scalar",
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.values().mapv(|x| x * c);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| Ok(vec![need.then(|| g.mapv(|v| v * c))])),
            "mul_scalar",
        )
    }

    /// c - x.
    pub fn rsub_scalar(&self, c: f64) -> Result<Tensor> {
        let out = self.values().mapv(|x| c - x);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| Ok(vec![need.then(|| g.mapv(|v| -v))])),
            "rsub_scalar",
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Result<Tensor> {
        let out = self.values().mapv(|x| x.max(0.0));
        let need = self.requires_grad();
        let parent = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                Ok(vec![need.then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&parent.values(), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    gx
                })])
            }),
            "relu",
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let out = self.values().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |y, g| {
                Ok(vec![need.then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    gx
                })])
            }),
            "sigmoid",
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let out = self.values().mapv(f64::exp);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |y, g| {
                Ok(vec![need.then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(y, |gv, &yv| *gv *= yv);
                    gx
                })])
            }),
            "exp",
        )
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.values().iter().any(|&v| v <= 0.0) {
            return Err(TcsError::InvalidInput(
                "log requires strictly positive input".into(),
            ));
        }
        let out = self.values().mapv(f64::ln);
        let need = self.requires_grad();
        let parent = self.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                Ok(vec![need.then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(&parent.values(), |gv, &x| *gv /= x);
                    gx
                })])
            }),
            "log",
        )
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.values().iter().any(|&v| v < 0.0) {
            return Err(TcsError::InvalidInput(
                "sqrt requires non-negative input".into(),
            ));
        }
        let out = self.values().mapv(f64::sqrt);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |y, g| {
                Ok(vec![need.then(|| {
                    let mut gx = g.clone();
                    gx.zip_mut_with(y, |gv, &yv| *gv /= 2.0 * yv);
                    gx
                })])
            }),
            "sqrt",
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.values().sum();
        let need = self.requires_grad();
        let shape = IxDyn(self.values().shape());
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            Box::new(move |_, g| {
                let gv = g[IxDyn(&[])];
                Ok(vec![need.then(|| ArrayD::from_elem(shape.clone(), gv))])
            }),
            "sum",
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.len();
        if n == 0 {
            return Err(TcsError::InvalidInput("mean of an empty tensor".into()));
        }
        let total = self.values().sum() / n as f64;
        let need = self.requires_grad();
        let shape = IxDyn(self.values().shape());
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[]), total),
            vec![self.clone()],
            Box::new(move |_, g| {
                let gv = g[IxDyn(&[])] / n as f64;
                Ok(vec![need.then(|| ArrayD::from_elem(shape.clone(), gv))])
            }),
            "mean",
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TcsError::ShapeMismatch(format!(
                "reshape {:?} -> {shape:?}",
                self.shape()
            )));
        }
        let data: Vec<f64> = self.values().iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), data).expect("len checked");
        let need = self.requires_grad();
        let back_shape = IxDyn(&self.shape());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                Ok(vec![need.then(|| {
                    let data: Vec<f64> = g.iter().copied().collect();
                    ArrayD::from_shape_vec(back_shape.clone(), data).expect("same len")
                })])
            }),
            "reshape",
        )
    }

    pub fn flatten(&self) -> Result<Tensor> {
        let n = self.len();
        self.reshape(&[n])
    }

    /// Concatenate along axis 0 (the channel axis for [C, H, W] maps).
    pub fn concat_channel(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(TcsError::ShapeMismatch(format!(
                "concat_channel on {sa:?} vs {sb:?}"
            )));
        }
        let out = ndarray::concatenate(Axis(0), &[self.values().view(), other.values().view()])
            .map_err(|e| TcsError::ShapeMismatch(format!("concat_channel: {e}")))?;
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        let split = sa[0];
        Tensor::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |_, g| {
                let ga = na.then(|| {
                    g.slice_axis(Axis(0), ndarray::Slice::from(0..split))
                        .to_owned()
                });
                let gb = nb.then(|| {
                    g.slice_axis(Axis(0), ndarray::Slice::from(split..))
                        .to_owned()
                });
                Ok(vec![ga, gb])
            }),
            "concat_channel",
        )
    }

    /// Drop to the [H, W] plane of channel `c` of a [C, H, W] tensor.
    pub fn select_channel(&self, c: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 || c >= shape[0] {
            return Err(TcsError::ShapeMismatch(format!(
                "select_channel({c}) on shape {shape:?}"
            )));
        }
        let out = self.values().index_axis(Axis(0), c).to_owned();
        let need = self.requires_grad();
        let full_shape = IxDyn(&shape);
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |_, g| {
                Ok(vec![need.then(|| {
                    let mut gx = ArrayD::zeros(full_shape.clone());
                    gx.index_axis_mut(Axis(0), c).assign(g);
                    gx
                })])
            }),
            "select_channel",
        )
    }

    /// Channelwise softmax of a [C, H, W] tensor (sums to 1 per pixel).
    pub fn softmax_channel(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(TcsError::ShapeMismatch(format!(
                "softmax_channel on shape {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let vals = self.values();
        let mut out = vals.clone();
        {
            let mut o3 = out.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            for i in 0..h {
                for j in 0..w {
                    let mut mx = f64::NEG_INFINITY;
                    for k in 0..c {
                        mx = mx.max(o3[(k, i, j)]);
                    }
                    let mut z = 0.0;
                    for k in 0..c {
                        let e = (o3[(k, i, j)] - mx).exp();
                        o3[(k, i, j)] = e;
                        z += e;
                    }
                    for k in 0..c {
                        o3[(k, i, j)] /= z;
                    }
                }
            }
        }
        drop(vals);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |y, g| {
                Ok(vec![need.then(|| {
                    let y3 = y.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut gx = ArrayD::zeros(y.raw_dim());
                    {
                        let mut gx3 =
                            gx.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        for i in 0..h {
                            for j in 0..w {
                                let mut dot = 0.0;
                                for k in 0..c {
                                    dot += g3[(k, i, j)] * y3[(k, i, j)];
                                }
                                for k in 0..c {
                                    gx3[(k, i, j)] = y3[(k, i, j)] * (g3[(k, i, j)] - dot);
                                }
                            }
                        }
                    }
                    gx
                })])
            }),
            "softmax_channel",
        )
    }

    /// Normalize a 1-d vector to unit Euclidean length.
    pub fn l2_normalize(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TcsError::ShapeMismatch(format!(
                "l2_normalize on shape {shape:?}"
            )));
        }
        let norm = self.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DIV_EPSILON {
            return Err(TcsError::InvalidInput(
                "l2_normalize: vector norm below epsilon".into(),
            ));
        }
        let out = self.values().mapv(|v| v / norm);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |y, g| {
                Ok(vec![need.then(|| {
                    let dot: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                    let mut gx = g.clone();
                    gx.zip_mut_with(y, |gv, &yv| *gv = (*gv - yv * dot) / norm);
                    gx
                })])
            }),
            "l2_normalize",
        )
    }

    /// Nearest-neighbor 2x upsample of a [C, H, W] tensor.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(TcsError::ShapeMismatch(format!(
                "upsample_nearest2x on shape {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let vals = self.values();
        let v3 = vals.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        {
            let mut o3 = out.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            for k in 0..c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        o3[(k, i, j)] = v3[(k, i / 2, j / 2)];
                    }
                }
            }
        }
        drop(vals);
        let need = self.requires_grad();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                Ok(vec![need.then(|| {
                    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                    let mut gx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    {
                        let mut gx3 =
                            gx.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        for k in 0..c {
                            for i in 0..2 * h {
                                for j in 0..2 * w {
                                    gx3[(k, i / 2, j / 2)] += g3[(k, i, j)];
                                }
                            }
                        }
                    }
                    gx
                })])
            }),
            "upsample_nearest2x",
        )
    }

    /// Affine layer on a 1-d input: `w @ x + b` with `w: [D_out, D_in]`.
    pub fn fully_connected(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (xs, ws, bs) = (self.shape(), weight.shape(), bias.shape());
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(TcsError::ShapeMismatch(format!(
                "fully_connected: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let x1 = self
            .values()
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let w2 = weight
            .values()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut out = w2.dot(&x1);
        {
            let b = bias.values();
            let b1 = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            out += &b1;
        }
        let (nx, nw, nb) = (
            self.requires_grad(),
            weight.requires_grad(),
            bias.requires_grad(),
        );
        let x_parent = self.clone();
        let w_parent = weight.clone();
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |_, g| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let gx = nx.then(|| {
                    let w = w_parent.values();
                    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    w2.t().dot(&g1).into_dyn()
                });
                let gw = nw.then(|| {
                    let x = x_parent.values();
                    let x1 = x.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let mut gw = Array2::<f64>::zeros((g1.len(), x1.len()));
                    for (i, gi) in g1.iter().enumerate() {
                        for (j, xj) in x1.iter().enumerate() {
                            gw[(i, j)] = gi * xj;
                        }
                    }
                    gw.into_dyn()
                });
                let gb = nb.then(|| g1.to_owned().into_dyn());
                Ok(vec![gx, gw, gb])
            }),
            "fully_connected",
        )
    }

    /// 2D cross-correlation of a [C_in, H, W] input with a
    /// [C_out, C_in, kh, kw] kernel, zero padding, stride 1 or 2.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if !(stride == 1 || stride == 2) {
            return Err(TcsError::InvalidInput(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(TcsError::ShapeMismatch(format!(
                "conv2d: input {xs:?} vs weight {ws:?}"
            )));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TcsError::ShapeMismatch(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TcsError::ShapeMismatch(format!(
                    "conv2d: bias {:?} vs C_out {c_out}",
                    b.shape()
                )));
            }
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;

        let cols = im2col(&self.values(), c_in, h, w, kh, kw, stride, padding, out_h, out_w);
        let w2 = {
            let wv = weight.values();
            Array2::from_shape_vec((c_out, c_in * kh * kw), wv.iter().copied().collect())
                .expect("weight is contiguous by construction")
        };
        let mut out2 = w2.dot(&cols); // [C_out, out_h*out_w]
        if let Some(b) = bias {
            let bv = b.values();
            let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (mut row, bval) in out2.outer_iter_mut().zip(b1.iter()) {
                row += *bval;
            }
        }
        let out = out2
            .into_shape_with_order(IxDyn(&[c_out, out_h, out_w]))
            .expect("conv output size");

        let nx = self.requires_grad();
        let nw = weight.requires_grad();
        let nb = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let x_parent = self.clone();
        let w_parent = weight.clone();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();

        Tensor::from_op(
            out,
            parents,
            Box::new(move |_, g| {
                let g2 = Array2::from_shape_vec(
                    (c_out, out_h * out_w),
                    g.iter().copied().collect(),
                )
                .expect("grad contiguous");
                let gx = nx.then(|| {
                    let wv = w_parent.values();
                    let w2 = Array2::from_shape_vec(
                        (c_out, c_in * kh * kw),
                        wv.iter().copied().collect(),
                    )
                    .expect("weight contiguous");
                    let dcols = w2.t().dot(&g2);
                    col2im(&dcols, c_in, h, w, kh, kw, stride, padding, out_h, out_w)
                });
                let gw = nw.then(|| {
                    // im2col is recomputed here rather than saved, trading
                    // a cheap O(n*k^2) pass for the large cols buffer.
                    let x = x_parent.values();
                    let cols =
                        im2col(&x, c_in, h, w, kh, kw, stride, padding, out_h, out_w);
                    g2.dot(&cols.t())
                        .into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
                        .expect("weight grad size")
                });
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(nb.then(|| {
                        Array1::from_iter(g2.outer_iter().map(|row| row.sum())).into_dyn()
                    }));
                }
                Ok(grads)
            }),
            "conv2d",
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &ArrayD<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let x3 = input.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let mut cols = Array2::<f64>::zeros((c_in * kh * kw, out_h * out_w));
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut col_row = cols.row_mut(row);
                for oi in 0..out_h {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue; // zero padding
                    }
                    for oj in 0..out_w {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        col_row[oi * out_w + oj] = x3[(c, ii as usize, jj as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> ArrayD<f64> {
    let mut dx = ArrayD::zeros(IxDyn(&[c_in, h, w]));
    {
        let mut d3 = dx.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
        for c in 0..c_in {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let col_row = dcols.row(row);
                    for oi in 0..out_h {
                        let ii = (oi * stride + ki) as isize - padding as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..out_w {
                            let jj = (oj * stride + kj) as isize - padding as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            d3[(c, ii as usize, jj as usize)] += col_row[oi * out_w + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Broadcast {
    /// `Same.pick(true)` swaps to the scalar-on-the-right case; used when a
    /// backward pass multiplies an output-shaped grad with a possibly 0-d
    /// saved operand.
    fn pick(self, other_is_scalar: bool) -> Broadcast {
        if other_is_scalar {
            Broadcast::RightScalar
        } else {
            Broadcast::Same
        }
    }
}

/// Sum a non-empty list of same-shaped tensors.
pub fn add_all(tensors: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = tensors
        .split_first()
        .ok_or_else(|| TcsError::InvalidInput("add_all of an empty list".into()))?;
    let mut acc = first.clone();
    for t in rest {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Arithmetic mean of a non-empty list of scalar tensors.
pub fn mean_all(tensors: &[Tensor]) -> Result<Tensor> {
    let total = add_all(tensors)?;
    total.mul_scalar(1.0 / tensors.len() as f64)
}
