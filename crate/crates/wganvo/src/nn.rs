//! Small layer kit with explicit forward/backward passes: strided and
//! fractionally-strided 4x4 convolutions, fully-connected layers,
//! piecewise-linear activations, tanh, and Adam.
//!
//! Besides the usual backward pass, critic-side layers support a second
//! accumulation pass used by the gradient penalty: for a piecewise-linear
//! critic, the parameter gradient of `vᵀ ∇_x D(x)` is obtained by pushing
//! `v` forward through the frozen activation masks and taking outer
//! products with the upstream gradients cached during the backward pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Batch of image-like tensors, layout (N, C, H, W).
pub type Batch = Array4<f64>;

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfolds one sample (C, H, W) into a (C·k·k, Ho·Wo) matrix.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut Array2<f64>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(out.shape(), [c * k * k, ho * wo]);
    out.fill(0.0);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out[(row, oh * wo + ow)] = x[(ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto (C, H, W).
fn col2im(
    cols: &ArrayView2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.shape(), [c * k * k, ho * wo]);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        out[(ci, ih as usize, iw as usize)] += cols[(row, oh * wo + ow)];
                    }
                }
            }
        }
    }
}

/// Strided convolution, weights (out, in, k, k).
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    cache_cols: Vec<Array2<f64>>,
    cache_t: Vec<Array2<f64>>,
    in_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        Conv2d {
            w: Array4::from_shape_fn((out_ch, in_ch, k, k), |_| normal.sample(rng)),
            b: Array1::zeros(out_ch),
            dw: Array4::zeros((out_ch, in_ch, k, k)),
            db: Array1::zeros(out_ch),
            stride,
            pad,
            cache_cols: Vec::new(),
            cache_t: Vec::new(),
            in_hw: (0, 0),
        }
    }

    fn k(&self) -> usize {
        self.w.shape()[2]
    }

    fn w_mat(&self) -> Array2<f64> {
        let (o, c, k, _) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((o, c * k * k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let (n, c, h, w) = x.dim();
        let (o, k) = (self.w.shape()[0], self.k());
        let ho = conv_out_dim(h, k, self.stride, self.pad);
        let wo = conv_out_dim(w, k, self.stride, self.pad);
        self.in_hw = (h, w);
        let w_mat = self.w_mat();
        let mut out = Array4::zeros((n, o, ho, wo));
        if train {
            self.cache_cols.clear();
        }
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for i in 0..n {
            im2col(&x.index_axis(Axis(0), i), k, self.stride, self.pad, &mut cols);
            let mut y = Array2::zeros((o, ho * wo));
            general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y);
            for (ch, mut plane) in y
                .view_mut()
                .axis_iter_mut(Axis(0))
                .enumerate()
                .map(|(ch, p)| (ch, p))
            {
                plane += self.b[ch];
            }
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((o, ho, wo)).unwrap());
            if train {
                self.cache_cols.push(cols.clone());
            }
        }
        out
    }

    /// Accumulates dW, db and returns the input gradient. With `keep_t`
    /// the upstream gradient is cached for a later penalty pass.
    pub fn backward(&mut self, dout: &Batch, keep_t: bool) -> Batch {
        let (n, o, ho, wo) = dout.dim();
        let (c, k) = (self.w.shape()[1], self.k());
        let (h, w) = self.in_hw;
        let w_mat = self.w_mat();
        let (ow, ckk) = (o, c * k * k);
        let mut dw_mat = Array2::zeros((ow, ckk));
        let mut din = Array4::zeros((n, c, h, w));
        if keep_t {
            self.cache_t.clear();
        }
        let mut dcols = Array2::zeros((ckk, ho * wo));
        for i in 0..n {
            let d = dout
                .index_axis(Axis(0), i)
                .into_shape_with_order((o, ho * wo))
                .unwrap()
                .to_owned();
            general_mat_mul(1.0, &d, &self.cache_cols[i].t().to_owned(), 1.0, &mut dw_mat);
            general_mat_mul(1.0, &w_mat.t().to_owned(), &d, 0.0, &mut dcols);
            col2im(
                &dcols.view(),
                k,
                self.stride,
                self.pad,
                &mut din.index_axis_mut(Axis(0), i),
            );
            for ch in 0..o {
                self.db[ch] += d.row(ch).sum();
            }
            if keep_t {
                self.cache_t.push(d);
            }
        }
        self.dw += &dw_mat.into_shape_with_order(self.w.dim()).unwrap();
        din
    }

    /// Penalty pass: propagates `p` through the convolution without bias
    /// and accumulates `dW += Σ_i t_i · im2col(p_i)ᵀ` with the cached
    /// upstream gradients.
    pub fn penalty_step(&mut self, p: &Batch) -> Batch {
        let (n, c, h, w) = p.dim();
        let (o, k) = (self.w.shape()[0], self.k());
        let ho = conv_out_dim(h, k, self.stride, self.pad);
        let wo = conv_out_dim(w, k, self.stride, self.pad);
        let w_mat = self.w_mat();
        let mut out = Array4::zeros((n, o, ho, wo));
        let mut dw_mat = Array2::zeros((o, c * k * k));
        let mut cols = Array2::zeros((c * k * k, ho * wo));
        for i in 0..n {
            im2col(&p.index_axis(Axis(0), i), k, self.stride, self.pad, &mut cols);
            let mut y = Array2::zeros((o, ho * wo));
            general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y);
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((o, ho, wo)).unwrap());
            general_mat_mul(1.0, &self.cache_t[i], &cols.t().to_owned(), 1.0, &mut dw_mat);
        }
        self.dw += &dw_mat.into_shape_with_order(self.w.dim()).unwrap();
        out
    }

    pub fn zero_grad(&mut self) {
        self.dw.fill(0.0);
        self.db.fill(0.0);
    }
}

/// Fractionally-strided (transposed) convolution, weights (in, out, k, k).
pub struct ConvTranspose2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    cache_in: Option<Batch>,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 0.02).unwrap();
        ConvTranspose2d {
            w: Array4::from_shape_fn((in_ch, out_ch, k, k), |_| normal.sample(rng)),
            b: Array1::zeros(out_ch),
            dw: Array4::zeros((in_ch, out_ch, k, k)),
            db: Array1::zeros(out_ch),
            stride,
            pad,
            cache_in: None,
        }
    }

    fn k(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.k();
        (
            (h - 1) * self.stride + k - 2 * self.pad,
            (w - 1) * self.stride + k - 2 * self.pad,
        )
    }

    fn w_mat(&self) -> Array2<f64> {
        let (i, o, k, _) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((i, o * k * k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let (n, ci, h, w) = x.dim();
        let (co, k) = (self.w.shape()[1], self.k());
        let (ho, wo) = self.out_hw(h, w);
        let w_mat = self.w_mat();
        let mut out = Array4::zeros((n, co, ho, wo));
        for i in 0..n {
            let xm = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((ci, h * w))
                .unwrap()
                .to_owned();
            let mut cols = Array2::zeros((co * k * k, h * w));
            general_mat_mul(1.0, &w_mat.t().to_owned(), &xm, 0.0, &mut cols);
            col2im(
                &cols.view(),
                k,
                self.stride,
                self.pad,
                &mut out.index_axis_mut(Axis(0), i),
            );
        }
        for ch in 0..co {
            let mut plane = out.index_axis_mut(Axis(1), ch);
            plane += self.b[ch];
        }
        if train {
            self.cache_in = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dout: &Batch) -> Batch {
        let x = self.cache_in.as_ref().expect("forward(train) before backward");
        let (n, ci, h, w) = x.dim();
        let (co, k) = (self.w.shape()[1], self.k());
        let w_mat = self.w_mat();
        let mut din = Array4::zeros((n, ci, h, w));
        let mut dw_mat = Array2::zeros((ci, co * k * k));
        let mut cols = Array2::zeros((co * k * k, h * w));
        for i in 0..n {
            let d = dout.index_axis(Axis(0), i);
            im2col(&d, k, self.stride, self.pad, &mut cols);
            let mut dx = Array2::zeros((ci, h * w));
            general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut dx);
            din.index_axis_mut(Axis(0), i)
                .assign(&dx.into_shape_with_order((ci, h, w)).unwrap());
            let xm = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((ci, h * w))
                .unwrap()
                .to_owned();
            general_mat_mul(1.0, &xm, &cols.t().to_owned(), 1.0, &mut dw_mat);
            for ch in 0..co {
                self.db[ch] += d.index_axis(Axis(0), ch).sum();
            }
        }
        self.dw += &dw_mat.into_shape_with_order(self.w.dim()).unwrap();
        din
    }

    pub fn zero_grad(&mut self) {
        self.dw.fill(0.0);
        self.db.fill(0.0);
    }
}

/// Fully-connected layer, weights (out, in).
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
    cache_in: Option<Array2<f64>>,
    cache_t: Option<Array2<f64>>,
}

impl Linear {
    /// Uniform fan-in initialization.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
            b: Array1::zeros(out_dim),
            dw: Array2::zeros((out_dim, in_dim)),
            db: Array1::zeros(out_dim),
            cache_in: None,
            cache_t: None,
        }
    }

    /// x: (N, in) → (N, out)
    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        if train {
            self.cache_in = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dout: &Array2<f64>, keep_t: bool) -> Array2<f64> {
        let x = self.cache_in.as_ref().expect("forward(train) before backward");
        self.dw += &dout.t().dot(x);
        self.db += &dout.sum_axis(Axis(0));
        if keep_t {
            self.cache_t = Some(dout.clone());
        }
        dout.dot(&self.w)
    }

    /// Penalty pass: `dW += tᵀ·p`, returns `p·Wᵀ` (no bias).
    pub fn penalty_step(&mut self, p: &Array2<f64>) -> Array2<f64> {
        let t = self.cache_t.as_ref().expect("backward(keep_t) before penalty");
        self.dw += &t.t().dot(p);
        p.dot(&self.w.t())
    }

    pub fn zero_grad(&mut self) {
        self.dw.fill(0.0);
        self.db.fill(0.0);
    }
}

/// Leaky rectifier with cached slope mask; slope 0 gives a plain rectifier.
pub struct LeakyRelu<D: Dimension> {
    pub slope: f64,
    mask: Option<ndarray::Array<f64, D>>,
}

impl<D: Dimension> LeakyRelu<D> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, mask: None }
    }

    pub fn forward(
        &mut self,
        x: &ndarray::Array<f64, D>,
        train: bool,
    ) -> ndarray::Array<f64, D> {
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { self.slope });
        let y = x * &mask;
        if train {
            self.mask = Some(mask);
        }
        y
    }

    pub fn backward(&self, dout: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        dout * self.mask.as_ref().expect("forward(train) before backward")
    }

    /// The penalty pass reuses the frozen mask.
    pub fn mask_apply(&self, p: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        self.backward(p)
    }
}

/// Tanh with cached output.
pub struct Tanh {
    cache_out: Option<Batch>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache_out: None }
    }

    pub fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let y = x.mapv(f64::tanh);
        if train {
            self.cache_out = Some(y.clone());
        }
        y
    }

    pub fn backward(&self, dout: &Batch) -> Batch {
        let y = self.cache_out.as_ref().expect("forward(train) before backward");
        dout * &y.mapv(|v| 1.0 - v * v)
    }
}

impl Default for Tanh {
    fn default() -> Self {
        Tanh::new()
    }
}

/// Visits (name, parameter slice, gradient slice) for every parameter.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut [f64], &[f64]) + 'a;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Momentum settings customary for gradient-penalty critics.
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter state keyed by name.
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// One update over all parameters exposed by `visit`.
    pub fn step(&mut self, visit: impl FnOnce(&mut ParamVisitor)) {
        self.t += 1;
        let c = self.config.clone();
        let b1t = 1.0 - c.beta1.powi(self.t as i32);
        let b2t = 1.0 - c.beta2.powi(self.t as i32);
        let state = &mut self.state;
        visit(&mut |name, p, g| {
            let (m, v) = state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        });
    }
}
