//! Layer primitives with explicit forward/backward passes.
//!
//! Activations are `[batch, channels, height, width]` in standard layout.
//! Convolutions go through an im2col/col2im pair so the heavy lifting is a
//! single GEMM per layer; the transposed convolution reuses the same pair
//! with the roles of the two grids swapped.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Dimension};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Trainable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub v: ArrayD<F>,
    pub g: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(v: ArrayD<F>) -> Self {
        let g = ArrayD::zeros(v.raw_dim());
        Param { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }
}

/// Gaussian(0, std) init used for every weight matrix.
pub fn gaussian_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    let s = F::from_f64c(std);
    ArrayD::from_shape_simple_fn(shape.to_vec(), || F::std_normal(rng) * s)
}

pub const INIT_STD: f64 = 1e-2;

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Contiguous row-major view of `a`, copying only when the layout differs.
macro_rules! c_order_slice {
    ($storage:ident, $a:expr) => {
        match $a.as_slice() {
            Some(s) => s,
            None => {
                $storage = $a.as_standard_layout().into_owned();
                $storage.as_slice().unwrap()
            }
        }
    };
}

/// Gather k x k patches of `x` into a `[c*k*k, b*oh*ow]` matrix.
///
/// Column index is `(b * oh + p) * ow + q`; row index is `(c * k + u) * k + v`.
pub fn im2col<F: Scalar>(x: &Array4<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((c * k * k, b * oh * ow));
    let storage;
    let xs = c_order_slice!(storage, x);
    let cs = cols.as_slice_mut().unwrap();
    let row_len = b * oh * ow;
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let out_base = row * row_len;
                for bi in 0..b {
                    let in_base = (bi * c + ci) * h * w;
                    for p in 0..oh {
                        let ih = (p * stride + u) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = in_base + ih as usize * w;
                        let dst_row = out_base + (bi * oh + p) * ow;
                        for q in 0..ow {
                            let iw = (q * stride + v) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[dst_row + q] = xs[src_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the transpose of [`im2col`]: columns back onto the `[b,c,h,w]` grid.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, b * oh * ow));
    let mut x = Array4::<F>::zeros((b, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let storage;
    let cs = c_order_slice!(storage, cols);
    let row_len = b * oh * ow;
    for ci in 0..c {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let src_base = row * row_len;
                for bi in 0..b {
                    let out_base = (bi * c + ci) * h * w;
                    for p in 0..oh {
                        let ih = (p * stride + u) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = out_base + ih as usize * w;
                        let src_row = src_base + (bi * oh + p) * ow;
                        for q in 0..ow {
                            let iw = (q * stride + v) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[dst_row + iw as usize] += cs[src_row + q];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// `[c, b*h*w]` view-order copy of a `[b,c,h,w]` tensor.
fn nchw_to_mat<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let mut m = Array2::<F>::zeros((c, b * h * w));
    let storage;
    let xs = c_order_slice!(storage, x);
    let ms = m.as_slice_mut().unwrap();
    let hw = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let src = (bi * c + ci) * hw;
            let dst = ci * b * hw + bi * hw;
            ms[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    m
}

/// Inverse of [`nchw_to_mat`].
fn mat_to_nchw<F: Scalar>(m: &Array2<F>, b: usize, c: usize, h: usize, w: usize) -> Array4<F> {
    let mut x = Array4::<F>::zeros((b, c, h, w));
    let ms = m.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().unwrap();
    let hw = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let src = ci * b * hw + bi * hw;
            let dst = (bi * c + ci) * hw;
            xs[dst..dst + hw].copy_from_slice(&ms[src..src + hw]);
        }
    }
    x
}

// ---------------------------------------------------------------------------
// Strided convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `[cout, cin*k*k]`, rows ordered to match [`im2col`].
    pub w: Param<F>,
    pub b: Param<F>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<F> {
    cols: Array2<F>,
    in_dim: (usize, usize, usize, usize),
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Param::new(gaussian_init(rng, &[cout, cin * k * k], INIT_STD)),
            b: Param::new(ArrayD::zeros(vec![cout])),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let oh = conv_out_size(h, self.k, self.stride, self.pad);
        let ow = conv_out_size(w, self.k, self.stride, self.pad);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let y_mat = self.w2().dot(&cols); // [cout, b*oh*ow]
        let mut y = mat_to_nchw(&y_mat, b, self.cout, oh, ow);
        let bias = self.b.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut ych, &bc) in y.axis_iter_mut(Axis(1)).zip(bias.iter()) {
            ych.mapv_inplace(|t| t + bc);
        }
        (y, Conv2dCache { cols, in_dim: (b, c, h, w) })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = cache.in_dim;
        let dy_mat = nchw_to_mat(dy); // [cout, b*oh*ow]
        let dw = dy_mat.dot(&cache.cols.t());
        self.w.g += &dw;
        let db = dy_mat.sum_axis(Axis(1));
        self.b.g += &db;
        let dcols = self.w2().t().dot(&dy_mat);
        col2im(&dcols, b, c, h, w, self.k, self.stride, self.pad)
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, F> {
        self.w.v.view().into_dimensionality().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Transposed convolution (x2 upsampling for stride 2)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Deconv2d<F> {
    /// `[cin, cout*k*k]`; the layer is the adjoint of a [`Conv2d`] with the
    /// same geometry, so output size is `stride * input` for stride 2, k 5, pad 2.
    pub w: Param<F>,
    pub b: Param<F>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Deconv2dCache<F> {
    x_mat: Array2<F>, // [cin, b*h*w]
    in_dim: (usize, usize, usize, usize),
}

impl<F: Scalar> Deconv2d<F> {
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Deconv2d {
            w: Param::new(gaussian_init(rng, &[cin, cout * k * k], INIT_STD)),
            b: Param::new(ArrayD::zeros(vec![cout])),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        input * self.stride
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Deconv2dCache<F>) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.cin);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let x_mat = nchw_to_mat(x);
        let cols = self.w2().t().dot(&x_mat); // [cout*k*k, b*h*w]
        let mut y = col2im(&cols, b, self.cout, oh, ow, self.k, self.stride, self.pad);
        let bias = self.b.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut ych, &bc) in y.axis_iter_mut(Axis(1)).zip(bias.iter()) {
            ych.mapv_inplace(|t| t + bc);
        }
        (y, Deconv2dCache { x_mat, in_dim: (b, c, h, w) })
    }

    pub fn backward(&mut self, cache: &Deconv2dCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = cache.in_dim;
        let dcols = im2col(dy, self.k, self.stride, self.pad); // [cout*k*k, b*h*w]
        let dw = cache.x_mat.dot(&dcols.t());
        self.w.g += &dw;
        let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
        self.b.g += &db;
        let dx_mat = self.w2().dot(&dcols); // [cin, b*h*w]
        mat_to_nchw(&dx_mat, b, c, h, w)
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, F> {
        self.w.v.view().into_dimensionality().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Batch normalization (per channel)
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub channels: usize,
}

pub struct BnCache<F> {
    xhat: Array4<F>,
    ivar: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
        }
    }

    /// Normalize with batch statistics. Running statistics are untouched;
    /// call [`Self::apply_momentum`] with the cache to fold them in.
    pub fn forward_train(&self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let m = F::from_usize(b * h * w).unwrap();
        let eps = F::from_f64c(BN_EPS);
        let mean = x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)) / m;
        let mut var = Array1::<F>::zeros(c);
        let mut xhat = x.clone();
        for ci in 0..c {
            let mu = mean[ci];
            let mut acc = F::zero();
            let mut lane = xhat.slice_mut(ndarray::s![.., ci, .., ..]);
            lane.mapv_inplace(|t| t - mu);
            for &t in lane.iter() {
                acc += t * t;
            }
            var[ci] = acc / m;
        }
        let ivar = var.mapv(|v| F::one() / (v + eps).sqrt());
        for ci in 0..c {
            let iv = ivar[ci];
            xhat.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|t| t * iv);
        }
        let mut y = xhat.clone();
        let gamma = self.gamma.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for ci in 0..c {
            let (g, be) = (gamma[ci], beta[ci]);
            y.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|t| t * g + be);
        }
        (
            y,
            BnCache { xhat, ivar, batch_mean: mean, batch_var: var },
        )
    }

    /// Normalize with running statistics (inference; works at batch size 1).
    pub fn forward_infer(&self, x: &Array4<F>) -> Array4<F> {
        let c = self.channels;
        let eps = F::from_f64c(BN_EPS);
        let mut y = x.clone();
        let gamma = self.gamma.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for ci in 0..c {
            let iv = F::one() / (self.running_var[ci] + eps).sqrt();
            let (mu, g, be) = (self.running_mean[ci], gamma[ci], beta[ci]);
            y.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|t| (t - mu) * iv * g + be);
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = dy.dim();
        let m = F::from_usize(b * h * w).unwrap();
        let gamma = self.gamma.v.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ci in 0..c {
            let dy_l = dy.slice(ndarray::s![.., ci, .., ..]);
            let xh_l = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            let mut sum_dy = F::zero();
            let mut sum_dy_xh = F::zero();
            for (&d, &xh) in dy_l.iter().zip(xh_l.iter()) {
                sum_dy += d;
                sum_dy_xh += d * xh;
            }
            dgamma[ci] = sum_dy_xh;
            dbeta[ci] = sum_dy;
            // dx = gamma*ivar/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
            let scale = gamma[ci] * cache.ivar[ci] / m;
            let mut dx_l = dx.slice_mut(ndarray::s![.., ci, .., ..]);
            ndarray::Zip::from(&mut dx_l).and(&dy_l).and(&xh_l).for_each(|o, &d, &xh| {
                *o = scale * (m * d - sum_dy - xh * sum_dy_xh);
            });
        }
        self.gamma.g += &dgamma.into_dyn();
        self.beta.g += &dbeta.into_dyn();
        dx
    }

    pub fn apply_momentum(&mut self, cache: &BnCache<F>) {
        let mom = F::from_f64c(BN_MOMENTUM);
        let one_m = F::one() - mom;
        ndarray::Zip::from(&mut self.running_mean)
            .and(&cache.batch_mean)
            .for_each(|r, &b| *r = mom * *r + one_m * b);
        ndarray::Zip::from(&mut self.running_var)
            .and(&cache.batch_var)
            .for_each(|r, &b| *r = mom * *r + one_m * b);
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense<F> {
    /// `[out, in]`
    pub w: Param<F>,
    pub b: Param<F>,
    pub n_in: usize,
    pub n_out: usize,
}

pub struct DenseCache<F> {
    x: Array2<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        Dense {
            w: Param::new(gaussian_init(rng, &[n_out, n_in], INIT_STD)),
            b: Param::new(ArrayD::zeros(vec![n_out])),
            n_in,
            n_out,
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, DenseCache<F>) {
        let y = self.forward_nocache(x);
        (y, DenseCache { x: x.clone() })
    }

    pub fn forward_nocache(&self, x: &Array2<F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.n_in);
        let mut y = x.dot(&self.w2().t()); // [b, out]
        let bias = self.b.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &bias;
        y
    }

    pub fn backward(&mut self, cache: &DenseCache<F>, dy: &Array2<F>) -> Array2<F> {
        self.backward_with_input(&cache.x, dy)
    }

    /// Backward against an input held by the caller (lets several heads share
    /// one cached input).
    pub fn backward_with_input(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = dy.t().dot(x); // [out, in]
        self.w.g += &dw;
        let db = dy.sum_axis(Axis(0));
        self.b.g += &db;
        dy.dot(&self.w2())
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, F> {
        self.w.v.view().into_dimensionality().unwrap()
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn leaky_relu<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>, slope: F) -> ndarray::Array<F, D> {
    x.mapv(|t| if t > F::zero() { t } else { slope * t })
}

/// Backward from the cached *output*; valid because the slope is positive so
/// the output sign matches the input sign.
pub fn leaky_relu_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
    slope: F,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = *d * slope;
        }
    });
    dx
}

pub fn tanh_forward<F: Scalar, D: Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|t| t.tanh())
}

pub fn tanh_backward<F: Scalar, D: Dimension>(
    y: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * (F::one() - yv * yv);
    });
    dx
}

pub fn sigmoid<F: Scalar>(x: &Array1<F>) -> Array1<F> {
    x.mapv(|t| F::one() / (F::one() + (-t).exp()))
}

/// Row-wise stable softmax.
pub fn softmax_rows<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|t| (t - mx).exp());
        let s: F = row.iter().cloned().sum();
        row.mapv_inplace(|t| t / s);
    }
    p
}

/// Jacobian-vector product of softmax rows: `dz = p .* (dp - sum(dp .* p))`.
pub fn softmax_backward_rows<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut dz = Array2::<F>::zeros(p.raw_dim());
    for ((mut dz_r, p_r), dp_r) in dz.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot: F = p_r.iter().zip(dp_r.iter()).map(|(&a, &b)| a * b).sum();
        ndarray::Zip::from(&mut dz_r).and(&p_r).and(&dp_r).for_each(|o, &pi, &di| {
            *o = pi * (di - dot);
        });
    }
    dz
}
