//! Encoder, decoder, and three-headed discriminator.
//!
//! All three nets share one convolutional family: stride-2 5x5 stages that
//! halve the spatial size until it reaches 4x4, so the stage count is
//! `log2(image_size) - 2`. Channel widths double per stage from
//! `base_channels`. `scale_factor` divides the fixed fully-connected widths
//! (the 256-unit discriminator trunk and the attack MLP hidden layers) so a
//! shrunk config stays proportionate.

pub mod layers;

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{normal_array, stream, StreamKind};
use crate::scalar::Scalar;
use layers::{
    leaky_relu, leaky_relu_backward, sigmoid, softmax_backward_rows, softmax_rows, tanh_backward,
    tanh_forward, BatchNorm2d, BnCache, Conv2d, Conv2dCache, Deconv2d, Deconv2dCache, Dense,
    Param,
};

/// Fully-connected width that `scale_factor` divides down from.
pub const FULL_FC_WIDTH: usize = 256;

pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const PAD: usize = 2;

/// Row-wise `[latent | one-hot code]` concatenation in row-major layout.
/// (`ndarray::concatenate` can hand back a column-major result, which the
/// reshape-heavy forward passes must not receive.)
pub fn concat_latent_code<F: Scalar>(f: &Array2<F>, c: &Array2<F>) -> Array2<F> {
    let (n, k) = f.dim();
    let mut z = Array2::<F>::zeros((n, k + c.ncols()));
    z.slice_mut(ndarray::s![.., ..k]).assign(f);
    z.slice_mut(ndarray::s![.., k..]).assign(c);
    z
}

/// Reshape `[b, c*16]` rows into `[b, c, 4, 4]`, copying if needed.
fn rows_to_nchw<F: Scalar>(m: &Array2<F>, c: usize) -> Array4<F> {
    m.to_shape((m.nrows(), c, 4, 4)).unwrap().to_owned()
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub n_identities: usize,
    pub n_expressions: usize,
    pub leaky_slope: f64,
    pub scale_factor: usize,
}

impl ArchConfig {
    /// Reference-scale config: 64x64 images, 32 base channels, 128-d latent.
    pub fn full() -> Self {
        ArchConfig {
            image_size: 64,
            base_channels: 32,
            latent_dim: 128,
            n_identities: 6,
            n_expressions: 7,
            leaky_slope: 0.2,
            scale_factor: 1,
        }
    }

    /// Shrunk config sized for single-core CPU runs: 32x32, 16 base channels.
    pub fn desk() -> Self {
        ArchConfig {
            image_size: 32,
            base_channels: 16,
            latent_dim: 32,
            n_identities: 6,
            n_expressions: 7,
            leaky_slope: 0.2,
            scale_factor: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Validation(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.latent_dim < 8 {
            return Err(Error::Validation(format!(
                "latent_dim must be >= 8, got {}",
                self.latent_dim
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Validation(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if self.base_channels < 2 {
            return Err(Error::Validation(format!(
                "base_channels must be >= 2, got {}",
                self.base_channels
            )));
        }
        if self.n_identities < 2 || self.n_expressions < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 identities and 2 expressions, got {} / {}",
                self.n_identities, self.n_expressions
            )));
        }
        if self.scale_factor == 0
            || FULL_FC_WIDTH % self.scale_factor != 0
            || FULL_FC_WIDTH / self.scale_factor < 8
        {
            return Err(Error::Validation(format!(
                "scale_factor must divide {FULL_FC_WIDTH} leaving at least 8, got {}",
                self.scale_factor
            )));
        }
        Ok(())
    }

    /// Number of stride-2 stages; the pre-flatten tensor is always 4x4.
    pub fn stages(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }

    /// Conv channel ladder, doubling per stage.
    pub fn conv_channels(&self) -> Vec<usize> {
        (0..self.stages()).map(|k| self.base_channels << k).collect()
    }

    /// Width of the flattened 4x4 tensor after the conv ladder.
    pub fn flat_width(&self) -> usize {
        (self.base_channels << (self.stages() - 1)) * 16
    }

    /// Channel count of the decoder's 4x4 reshape target.
    pub fn decoder_c0(&self) -> usize {
        self.base_channels << (self.stages() - 2)
    }

    /// Decoder deconv channel ladder, ending at 3 (RGB).
    pub fn deconv_channels(&self) -> Vec<usize> {
        let s = self.stages();
        let mut v: Vec<usize> = (0..s - 1).rev().map(|j| self.base_channels << (j + 1)).collect();
        v.push(3);
        v
    }

    /// Shared fully-connected width of the discriminator trunk.
    pub fn trunk_width(&self) -> usize {
        FULL_FC_WIDTH / self.scale_factor
    }
}

// ---------------------------------------------------------------------------
// Latent
// ---------------------------------------------------------------------------

/// Batch of diagonal Gaussian latents; row i is image i's (mean, log-variance).
#[derive(Debug, Clone)]
pub struct GaussianLatent<F> {
    pub mean: Array2<F>,
    pub log_variance: Array2<F>,
}

impl<F: Scalar> GaussianLatent<F> {
    pub fn batch_len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn validate_finite(&self) -> Result<()> {
        let ok = self.mean.iter().chain(self.log_variance.iter()).all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite latent parameters".into()))
        }
    }

    /// Reparameterized draw `mean + exp(log_variance / 2) * w` for given noise.
    pub fn sample_with_noise(&self, w: &Array2<F>) -> Array2<F> {
        let half = F::from_f64c(0.5);
        let mut out = self.mean.clone();
        ndarray::Zip::from(&mut out)
            .and(&self.log_variance)
            .and(w)
            .for_each(|o, &lv, &wv| *o = *o + (lv * half).exp() * wv);
        out
    }

    /// Reparameterized draw with fresh standard-normal noise.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Array2<F> {
        let w = normal_array(rng, self.mean.raw_dim());
        self.sample_with_noise(&w)
    }

    /// Deterministic mode: the mean itself.
    pub fn mode(&self) -> Array2<F> {
        self.mean.clone()
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Encoder<F> {
    pub convs: Vec<Conv2d<F>>,
    pub bns: Vec<BatchNorm2d<F>>,
    pub fc_mean: Dense<F>,
    pub fc_logvar: Dense<F>,
    slope: F,
}

pub struct EncoderCache<F> {
    conv: Vec<Conv2dCache<F>>,
    bn: Vec<BnCache<F>>,
    act: Vec<Array4<F>>,
    flat: Array2<F>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 3;
        for cout in arch.conv_channels() {
            convs.push(Conv2d::new(rng, cin, cout, KERNEL, STRIDE, PAD));
            bns.push(BatchNorm2d::new(cout));
            cin = cout;
        }
        let flat = arch.flat_width();
        Encoder {
            convs,
            bns,
            fc_mean: Dense::new(rng, flat, arch.latent_dim),
            fc_logvar: Dense::new(rng, flat, arch.latent_dim),
            slope: F::from_f64c(arch.leaky_slope),
        }
    }

    fn trunk<C>(&self, x: &Array4<F>, mut bn_fwd: C) -> (Array2<F>, Vec<Conv2dCache<F>>, Vec<BnCache<F>>, Vec<Array4<F>>)
    where
        C: FnMut(&BatchNorm2d<F>, &Array4<F>) -> (Array4<F>, Option<BnCache<F>>),
    {
        let mut conv_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut acts = Vec::new();
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let (y, cc) = conv.forward(&h);
            let (yn, bc) = bn_fwd(bn, &y);
            h = leaky_relu(&yn, self.slope);
            conv_caches.push(cc);
            if let Some(bc) = bc {
                bn_caches.push(bc);
            }
            acts.push(h.clone());
        }
        let (b, c, hh, ww) = h.dim();
        let flat = h.into_shape_with_order((b, c * hh * ww)).unwrap();
        (flat, conv_caches, bn_caches, acts)
    }

    pub fn forward_train(&self, x: &Array4<F>) -> (GaussianLatent<F>, EncoderCache<F>) {
        let (flat, conv, bn, act) = self.trunk(x, |b, y| {
            let (yn, c) = b.forward_train(y);
            (yn, Some(c))
        });
        let latent = GaussianLatent {
            mean: self.fc_mean.forward_nocache(&flat),
            log_variance: self.fc_logvar.forward_nocache(&flat),
        };
        (latent, EncoderCache { conv, bn, act, flat })
    }

    pub fn forward_infer(&self, x: &Array4<F>) -> GaussianLatent<F> {
        let (flat, ..) = self.trunk(x, |b, y| (b.forward_infer(y), None));
        GaussianLatent {
            mean: self.fc_mean.forward_nocache(&flat),
            log_variance: self.fc_logvar.forward_nocache(&flat),
        }
    }

    pub fn backward(
        &mut self,
        cache: &EncoderCache<F>,
        d_mean: &Array2<F>,
        d_logvar: &Array2<F>,
    ) -> Array4<F> {
        let mut dflat = self.fc_mean.backward_with_input(&cache.flat, d_mean);
        dflat += &self.fc_logvar.backward_with_input(&cache.flat, d_logvar);
        let c = self.convs.last().unwrap().cout;
        let mut d = rows_to_nchw(&dflat, c);
        for k in (0..self.convs.len()).rev() {
            let da = leaky_relu_backward(&cache.act[k], &d, self.slope);
            let dn = self.bns[k].backward(&cache.bn[k], &da);
            d = self.convs[k].backward(&cache.conv[k], &dn);
        }
        d
    }

    pub fn apply_bn_momentum(&mut self, cache: &EncoderCache<F>) {
        for (bn, bc) in self.bns.iter_mut().zip(&cache.bn) {
            bn.apply_momentum(bc);
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("enc.conv{i}.w"), &mut c.w);
            f(&format!("enc.conv{i}.b"), &mut c.b);
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("enc.bn{i}.gamma"), &mut bn.gamma);
            f(&format!("enc.bn{i}.beta"), &mut bn.beta);
        }
        f("enc.fc_mean.w", &mut self.fc_mean.w);
        f("enc.fc_mean.b", &mut self.fc_mean.b);
        f("enc.fc_logvar.w", &mut self.fc_logvar.w);
        f("enc.fc_logvar.b", &mut self.fc_logvar.b);
    }

    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("enc.conv{i}.w"), c.w.v.shape(), c.w.v.as_slice().unwrap());
            f(&format!("enc.conv{i}.b"), c.b.v.shape(), c.b.v.as_slice().unwrap());
        }
        for (i, bn) in self.bns.iter().enumerate() {
            f(&format!("enc.bn{i}.gamma"), bn.gamma.v.shape(), bn.gamma.v.as_slice().unwrap());
            f(&format!("enc.bn{i}.beta"), bn.beta.v.shape(), bn.beta.v.as_slice().unwrap());
            f(&format!("enc.bn{i}.rmean"), bn.running_mean.shape(), bn.running_mean.as_slice().unwrap());
            f(&format!("enc.bn{i}.rvar"), bn.running_var.shape(), bn.running_var.as_slice().unwrap());
        }
        f("enc.fc_mean.w", self.fc_mean.w.v.shape(), self.fc_mean.w.v.as_slice().unwrap());
        f("enc.fc_mean.b", self.fc_mean.b.v.shape(), self.fc_mean.b.v.as_slice().unwrap());
        f("enc.fc_logvar.w", self.fc_logvar.w.v.shape(), self.fc_logvar.w.v.as_slice().unwrap());
        f("enc.fc_logvar.b", self.fc_logvar.b.v.shape(), self.fc_logvar.b.v.as_slice().unwrap());
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("enc.conv{i}.w"), &c.w.v.shape().to_vec(), c.w.v.as_slice_mut().unwrap());
            f(&format!("enc.conv{i}.b"), &c.b.v.shape().to_vec(), c.b.v.as_slice_mut().unwrap());
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("enc.bn{i}.gamma"), &bn.gamma.v.shape().to_vec(), bn.gamma.v.as_slice_mut().unwrap());
            f(&format!("enc.bn{i}.beta"), &bn.beta.v.shape().to_vec(), bn.beta.v.as_slice_mut().unwrap());
            f(&format!("enc.bn{i}.rmean"), &[bn.running_mean.len()], bn.running_mean.as_slice_mut().unwrap());
            f(&format!("enc.bn{i}.rvar"), &[bn.running_var.len()], bn.running_var.as_slice_mut().unwrap());
        }
        f("enc.fc_mean.w", &self.fc_mean.w.v.shape().to_vec(), self.fc_mean.w.v.as_slice_mut().unwrap());
        f("enc.fc_mean.b", &self.fc_mean.b.v.shape().to_vec(), self.fc_mean.b.v.as_slice_mut().unwrap());
        f("enc.fc_logvar.w", &self.fc_logvar.w.v.shape().to_vec(), self.fc_logvar.w.v.as_slice_mut().unwrap());
        f("enc.fc_logvar.b", &self.fc_logvar.b.v.shape().to_vec(), self.fc_logvar.b.v.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Decoder<F> {
    pub fc: Dense<F>,
    pub deconvs: Vec<Deconv2d<F>>,
    pub bns: Vec<BatchNorm2d<F>>,
    slope: F,
}

pub struct DecoderCache<F> {
    z: Array2<F>,
    fc_act: Array2<F>,
    dc: Vec<Deconv2dCache<F>>,
    bn: Vec<BnCache<F>>,
    act: Vec<Array4<F>>,
    out: Array4<F>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> Self {
        let c0 = arch.decoder_c0();
        let fc = Dense::new(rng, arch.latent_dim + arch.n_identities, 16 * c0);
        let mut deconvs = Vec::new();
        let mut bns = Vec::new();
        let chans = arch.deconv_channels();
        let mut cin = c0;
        for (j, &cout) in chans.iter().enumerate() {
            deconvs.push(Deconv2d::new(rng, cin, cout, KERNEL, STRIDE, PAD));
            if j + 1 < chans.len() {
                bns.push(BatchNorm2d::new(cout));
            }
            cin = cout;
        }
        Decoder { fc, deconvs, bns, slope: F::from_f64c(arch.leaky_slope) }
    }

    fn run<C>(&self, z: &Array2<F>, mut bn_fwd: C) -> (Array4<F>, Array2<F>, Vec<Deconv2dCache<F>>, Vec<BnCache<F>>, Vec<Array4<F>>)
    where
        C: FnMut(usize, &BatchNorm2d<F>, &Array4<F>) -> (Array4<F>, Option<BnCache<F>>),
    {
        let pre = self.fc.forward_nocache(z);
        let fc_act = leaky_relu(&pre, self.slope);
        let c0 = fc_act.ncols() / 16;
        let mut h = rows_to_nchw(&fc_act, c0);
        let n = self.deconvs.len();
        let mut dc_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut acts = Vec::new();
        for (j, dc) in self.deconvs.iter().enumerate() {
            let (y, cache) = dc.forward(&h);
            dc_caches.push(cache);
            if j + 1 < n {
                let (yn, bc) = bn_fwd(j, &self.bns[j], &y);
                h = leaky_relu(&yn, self.slope);
                if let Some(bc) = bc {
                    bn_caches.push(bc);
                }
                acts.push(h.clone());
            } else {
                h = tanh_forward(&y);
            }
        }
        (h, fc_act, dc_caches, bn_caches, acts)
    }

    pub fn forward_train(&self, z: &Array2<F>) -> (Array4<F>, DecoderCache<F>) {
        let (out, fc_act, dc, bn, act) = self.run(z, |_, b, y| {
            let (yn, c) = b.forward_train(y);
            (yn, Some(c))
        });
        let cache = DecoderCache { z: z.clone(), fc_act, dc, bn, act, out: out.clone() };
        (out, cache)
    }

    pub fn forward_infer(&self, z: &Array2<F>) -> Array4<F> {
        self.run(z, |_, b, y| (b.forward_infer(y), None)).0
    }

    pub fn backward(&mut self, cache: &DecoderCache<F>, d_img: &Array4<F>) -> Array2<F> {
        let n = self.deconvs.len();
        let mut d = tanh_backward(&cache.out, d_img);
        d = self.deconvs[n - 1].backward(&cache.dc[n - 1], &d);
        for j in (0..n - 1).rev() {
            let da = leaky_relu_backward(&cache.act[j], &d, self.slope);
            let dn = self.bns[j].backward(&cache.bn[j], &da);
            d = self.deconvs[j].backward(&cache.dc[j], &dn);
        }
        let (b, c, _, _) = d.dim();
        let dflat = d.into_shape_with_order((b, c * 16)).unwrap();
        let dpre = leaky_relu_backward(&cache.fc_act, &dflat, self.slope);
        self.fc.backward_with_input(&cache.z, &dpre)
    }

    pub fn apply_bn_momentum(&mut self, cache: &DecoderCache<F>) {
        for (bn, bc) in self.bns.iter_mut().zip(&cache.bn) {
            bn.apply_momentum(bc);
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f("dec.fc.w", &mut self.fc.w);
        f("dec.fc.b", &mut self.fc.b);
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            f(&format!("dec.deconv{i}.w"), &mut d.w);
            f(&format!("dec.deconv{i}.b"), &mut d.b);
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("dec.bn{i}.gamma"), &mut bn.gamma);
            f(&format!("dec.bn{i}.beta"), &mut bn.beta);
        }
    }

    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f("dec.fc.w", self.fc.w.v.shape(), self.fc.w.v.as_slice().unwrap());
        f("dec.fc.b", self.fc.b.v.shape(), self.fc.b.v.as_slice().unwrap());
        for (i, d) in self.deconvs.iter().enumerate() {
            f(&format!("dec.deconv{i}.w"), d.w.v.shape(), d.w.v.as_slice().unwrap());
            f(&format!("dec.deconv{i}.b"), d.b.v.shape(), d.b.v.as_slice().unwrap());
        }
        for (i, bn) in self.bns.iter().enumerate() {
            f(&format!("dec.bn{i}.gamma"), bn.gamma.v.shape(), bn.gamma.v.as_slice().unwrap());
            f(&format!("dec.bn{i}.beta"), bn.beta.v.shape(), bn.beta.v.as_slice().unwrap());
            f(&format!("dec.bn{i}.rmean"), bn.running_mean.shape(), bn.running_mean.as_slice().unwrap());
            f(&format!("dec.bn{i}.rvar"), bn.running_var.shape(), bn.running_var.as_slice().unwrap());
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        f("dec.fc.w", &self.fc.w.v.shape().to_vec(), self.fc.w.v.as_slice_mut().unwrap());
        f("dec.fc.b", &self.fc.b.v.shape().to_vec(), self.fc.b.v.as_slice_mut().unwrap());
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            f(&format!("dec.deconv{i}.w"), &d.w.v.shape().to_vec(), d.w.v.as_slice_mut().unwrap());
            f(&format!("dec.deconv{i}.b"), &d.b.v.shape().to_vec(), d.b.v.as_slice_mut().unwrap());
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("dec.bn{i}.gamma"), &bn.gamma.v.shape().to_vec(), bn.gamma.v.as_slice_mut().unwrap());
            f(&format!("dec.bn{i}.beta"), &bn.beta.v.shape().to_vec(), bn.beta.v.as_slice_mut().unwrap());
            f(&format!("dec.bn{i}.rmean"), &[bn.running_mean.len()], bn.running_mean.as_slice_mut().unwrap());
            f(&format!("dec.bn{i}.rvar"), &[bn.running_var.len()], bn.running_var.as_slice_mut().unwrap());
        }
    }
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Batched discriminator readout; row i of each field belongs to image i.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<F> {
    /// P(real) per image (sigmoid head).
    pub real_prob: Array1<F>,
    /// Identity posterior per image (softmax head).
    pub identity_probs: Array2<F>,
    /// Expression posterior per image (softmax head).
    pub expression_probs: Array2<F>,
}

impl<F: Scalar> DiscriminatorOutput<F> {
    pub fn batch_len(&self) -> usize {
        self.real_prob.len()
    }

    pub fn validate(&self) -> Result<()> {
        let tol = F::from_f64c(1e-5);
        for &p in &self.real_prob {
            if !(p > F::zero() && p < F::one()) {
                return Err(Error::Numeric(format!("real_prob outside (0,1): {p}")));
            }
        }
        for probs in [&self.identity_probs, &self.expression_probs] {
            for row in probs.rows() {
                let s: F = row.iter().cloned().sum();
                if (s - F::one()).abs() > tol {
                    return Err(Error::Numeric(format!("head probabilities sum to {s}, not 1")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<F> {
    pub convs: Vec<Conv2d<F>>,
    pub bns: Vec<BatchNorm2d<F>>,
    pub trunk: Dense<F>,
    pub head_real: Dense<F>,
    pub head_id: Dense<F>,
    pub head_expr: Dense<F>,
    slope: F,
}

pub struct DiscriminatorCache<F> {
    conv: Vec<Conv2dCache<F>>,
    bn: Vec<BnCache<F>>,
    act: Vec<Array4<F>>,
    flat: Array2<F>,
    trunk_act: Array2<F>,
    out: DiscriminatorOutput<F>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 3;
        for cout in arch.conv_channels() {
            convs.push(Conv2d::new(rng, cin, cout, KERNEL, STRIDE, PAD));
            bns.push(BatchNorm2d::new(cout));
            cin = cout;
        }
        let w = arch.trunk_width();
        Discriminator {
            convs,
            bns,
            trunk: Dense::new(rng, arch.flat_width(), w),
            head_real: Dense::new(rng, w, 1),
            head_id: Dense::new(rng, w, arch.n_identities),
            head_expr: Dense::new(rng, w, arch.n_expressions),
            slope: F::from_f64c(arch.leaky_slope),
        }
    }

    fn heads(&self, trunk_act: &Array2<F>) -> DiscriminatorOutput<F> {
        let real_logit = self.head_real.forward_nocache(trunk_act);
        let real_prob = sigmoid(&real_logit.index_axis(Axis(1), 0).to_owned());
        let identity_probs = softmax_rows(&self.head_id.forward_nocache(trunk_act));
        let expression_probs = softmax_rows(&self.head_expr.forward_nocache(trunk_act));
        DiscriminatorOutput { real_prob, identity_probs, expression_probs }
    }

    fn conv_trunk<C>(&self, x: &Array4<F>, mut bn_fwd: C) -> (Array2<F>, Array2<F>, Vec<Conv2dCache<F>>, Vec<BnCache<F>>, Vec<Array4<F>>)
    where
        C: FnMut(&BatchNorm2d<F>, &Array4<F>) -> (Array4<F>, Option<BnCache<F>>),
    {
        let mut conv_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut acts = Vec::new();
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let (y, cc) = conv.forward(&h);
            let (yn, bc) = bn_fwd(bn, &y);
            h = leaky_relu(&yn, self.slope);
            conv_caches.push(cc);
            if let Some(bc) = bc {
                bn_caches.push(bc);
            }
            acts.push(h.clone());
        }
        let (b, c, hh, ww) = h.dim();
        let flat = h.into_shape_with_order((b, c * hh * ww)).unwrap();
        let trunk_act = leaky_relu(&self.trunk.forward_nocache(&flat), self.slope);
        (flat, trunk_act, conv_caches, bn_caches, acts)
    }

    pub fn forward_train(&self, x: &Array4<F>) -> (DiscriminatorOutput<F>, DiscriminatorCache<F>) {
        let (flat, trunk_act, conv, bn, act) = self.conv_trunk(x, |b, y| {
            let (yn, c) = b.forward_train(y);
            (yn, Some(c))
        });
        let out = self.heads(&trunk_act);
        let cache = DiscriminatorCache { conv, bn, act, flat, trunk_act, out: out.clone() };
        (out, cache)
    }

    pub fn forward_infer(&self, x: &Array4<F>) -> DiscriminatorOutput<F> {
        let (_, trunk_act, ..) = self.conv_trunk(x, |b, y| (b.forward_infer(y), None));
        self.heads(&trunk_act)
    }

    /// Backward from gradients with respect to the three probability outputs.
    pub fn backward(
        &mut self,
        cache: &DiscriminatorCache<F>,
        d_real: &Array1<F>,
        d_id: &Array2<F>,
        d_expr: &Array2<F>,
    ) -> Array4<F> {
        // sigmoid head: dlogit = dprob * p * (1 - p)
        let dlog_real = ndarray::Zip::from(d_real)
            .and(&cache.out.real_prob)
            .map_collect(|&d, &p| d * p * (F::one() - p))
            .insert_axis(Axis(1));
        let dlog_id = softmax_backward_rows(&cache.out.identity_probs, d_id);
        let dlog_expr = softmax_backward_rows(&cache.out.expression_probs, d_expr);
        let mut dtrunk = self.head_real.backward_with_input(&cache.trunk_act, &dlog_real);
        dtrunk += &self.head_id.backward_with_input(&cache.trunk_act, &dlog_id);
        dtrunk += &self.head_expr.backward_with_input(&cache.trunk_act, &dlog_expr);
        let dpre = leaky_relu_backward(&cache.trunk_act, &dtrunk, self.slope);
        let dflat = self.trunk.backward_with_input(&cache.flat, &dpre);
        let c = self.convs.last().unwrap().cout;
        let mut d = rows_to_nchw(&dflat, c);
        for k in (0..self.convs.len()).rev() {
            let da = leaky_relu_backward(&cache.act[k], &d, self.slope);
            let dn = self.bns[k].backward(&cache.bn[k], &da);
            d = self.convs[k].backward(&cache.conv[k], &dn);
        }
        d
    }

    pub fn apply_bn_momentum(&mut self, cache: &DiscriminatorCache<F>) {
        for (bn, bc) in self.bns.iter_mut().zip(&cache.bn) {
            bn.apply_momentum(bc);
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("disc.conv{i}.w"), &mut c.w);
            f(&format!("disc.conv{i}.b"), &mut c.b);
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("disc.bn{i}.gamma"), &mut bn.gamma);
            f(&format!("disc.bn{i}.beta"), &mut bn.beta);
        }
        f("disc.trunk.w", &mut self.trunk.w);
        f("disc.trunk.b", &mut self.trunk.b);
        f("disc.head_real.w", &mut self.head_real.w);
        f("disc.head_real.b", &mut self.head_real.b);
        f("disc.head_id.w", &mut self.head_id.w);
        f("disc.head_id.b", &mut self.head_id.b);
        f("disc.head_expr.w", &mut self.head_expr.w);
        f("disc.head_expr.b", &mut self.head_expr.b);
    }

    pub fn for_each_tensor(&self, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("disc.conv{i}.w"), c.w.v.shape(), c.w.v.as_slice().unwrap());
            f(&format!("disc.conv{i}.b"), c.b.v.shape(), c.b.v.as_slice().unwrap());
        }
        for (i, bn) in self.bns.iter().enumerate() {
            f(&format!("disc.bn{i}.gamma"), bn.gamma.v.shape(), bn.gamma.v.as_slice().unwrap());
            f(&format!("disc.bn{i}.beta"), bn.beta.v.shape(), bn.beta.v.as_slice().unwrap());
            f(&format!("disc.bn{i}.rmean"), bn.running_mean.shape(), bn.running_mean.as_slice().unwrap());
            f(&format!("disc.bn{i}.rvar"), bn.running_var.shape(), bn.running_var.as_slice().unwrap());
        }
        f("disc.trunk.w", self.trunk.w.v.shape(), self.trunk.w.v.as_slice().unwrap());
        f("disc.trunk.b", self.trunk.b.v.shape(), self.trunk.b.v.as_slice().unwrap());
        f("disc.head_real.w", self.head_real.w.v.shape(), self.head_real.w.v.as_slice().unwrap());
        f("disc.head_real.b", self.head_real.b.v.shape(), self.head_real.b.v.as_slice().unwrap());
        f("disc.head_id.w", self.head_id.w.v.shape(), self.head_id.w.v.as_slice().unwrap());
        f("disc.head_id.b", self.head_id.b.v.shape(), self.head_id.b.v.as_slice().unwrap());
        f("disc.head_expr.w", self.head_expr.w.v.shape(), self.head_expr.w.v.as_slice().unwrap());
        f("disc.head_expr.b", self.head_expr.b.v.shape(), self.head_expr.b.v.as_slice().unwrap());
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [F])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("disc.conv{i}.w"), &c.w.v.shape().to_vec(), c.w.v.as_slice_mut().unwrap());
            f(&format!("disc.conv{i}.b"), &c.b.v.shape().to_vec(), c.b.v.as_slice_mut().unwrap());
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("disc.bn{i}.gamma"), &bn.gamma.v.shape().to_vec(), bn.gamma.v.as_slice_mut().unwrap());
            f(&format!("disc.bn{i}.beta"), &bn.beta.v.shape().to_vec(), bn.beta.v.as_slice_mut().unwrap());
            f(&format!("disc.bn{i}.rmean"), &[bn.running_mean.len()], bn.running_mean.as_slice_mut().unwrap());
            f(&format!("disc.bn{i}.rvar"), &[bn.running_var.len()], bn.running_var.as_slice_mut().unwrap());
        }
        f("disc.trunk.w", &self.trunk.w.v.shape().to_vec(), self.trunk.w.v.as_slice_mut().unwrap());
        f("disc.trunk.b", &self.trunk.b.v.shape().to_vec(), self.trunk.b.v.as_slice_mut().unwrap());
        f("disc.head_real.w", &self.head_real.w.v.shape().to_vec(), self.head_real.w.v.as_slice_mut().unwrap());
        f("disc.head_real.b", &self.head_real.b.v.shape().to_vec(), self.head_real.b.v.as_slice_mut().unwrap());
        f("disc.head_id.w", &self.head_id.w.v.shape().to_vec(), self.head_id.w.v.as_slice_mut().unwrap());
        f("disc.head_id.b", &self.head_id.b.v.shape().to_vec(), self.head_id.b.v.as_slice_mut().unwrap());
        f("disc.head_expr.w", &self.head_expr.w.v.shape().to_vec(), self.head_expr.w.v.as_slice_mut().unwrap());
        f("disc.head_expr.b", &self.head_expr.b.v.shape().to_vec(), self.head_expr.b.v.as_slice_mut().unwrap());
    }
}

// ---------------------------------------------------------------------------
// Bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ModelBundle<F> {
    pub arch: ArchConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    pub discriminator: Discriminator<F>,
    pub d_steps: u64,
    pub g_steps: u64,
}

/// Build all three nets with Gaussian(0, 1e-2) weights and zero biases.
/// Each part draws from its own seed-derived stream, so equal seeds give
/// bit-identical bundles.
pub fn build_models<F: Scalar>(arch: &ArchConfig, init_seed: u64) -> Result<ModelBundle<F>> {
    arch.validate()?;
    let encoder = Encoder::new(&mut stream(init_seed, StreamKind::ModelInit, 0, 0), arch);
    let decoder = Decoder::new(&mut stream(init_seed, StreamKind::ModelInit, 1, 0), arch);
    let discriminator = Discriminator::new(&mut stream(init_seed, StreamKind::ModelInit, 2, 0), arch);
    Ok(ModelBundle { arch: arch.clone(), encoder, decoder, discriminator, d_steps: 0, g_steps: 0 })
}

impl<F: Scalar> ModelBundle<F> {
    fn check_images(&self, imgs: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = imgs.dim();
        let s = self.arch.image_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Validation(format!(
                "expected image batch [n, 3, {s}, {s}], got [{:?}]",
                imgs.dim()
            )));
        }
        Ok(())
    }

    /// Posterior parameters for an image batch (inference-mode batch norm).
    pub fn encode(&self, imgs: &Array4<F>) -> Result<GaussianLatent<F>> {
        self.check_images(imgs)?;
        let latent = self.encoder.forward_infer(imgs);
        latent.validate_finite()?;
        Ok(latent)
    }

    /// Decode latent rows paired with one-hot identity code rows.
    pub fn decode(&self, f: &Array2<F>, c: &Array2<F>) -> Result<Array4<F>> {
        if f.ncols() != self.arch.latent_dim {
            return Err(Error::Validation(format!(
                "latent width {} != latent_dim {}",
                f.ncols(),
                self.arch.latent_dim
            )));
        }
        if c.ncols() != self.arch.n_identities || c.nrows() != f.nrows() {
            return Err(Error::Validation(format!(
                "identity code batch [{:?}] does not match latent batch [{:?}]",
                c.dim(),
                f.dim()
            )));
        }
        Ok(self.decoder.forward_infer(&concat_latent_code(f, c)))
    }

    /// All three discriminator heads on an image batch (inference mode).
    pub fn discriminate(&self, imgs: &Array4<F>) -> Result<DiscriminatorOutput<F>> {
        self.check_images(imgs)?;
        Ok(self.discriminator.forward_infer(imgs))
    }

    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        let mut count = |_: &str, p: &mut Param<F>| n += p.len();
        self.encoder.for_each_param(&mut count);
        self.decoder.for_each_param(&mut count);
        self.discriminator.for_each_param(&mut count);
        n
    }

    /// SHA-256 over (name, shape, value bytes) of every parameter and running
    /// statistic of one part; detects any state change in that part.
    pub fn part_hashes(&self) -> PartHashes {
        PartHashes {
            encoder: tensor_hash(|f| self.encoder.for_each_tensor(f)),
            decoder: tensor_hash(|f| self.decoder.for_each_tensor(f)),
            discriminator: tensor_hash(|f| self.discriminator.for_each_tensor(f)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartHashes {
    pub encoder: [u8; 32],
    pub decoder: [u8; 32],
    pub discriminator: [u8; 32],
}

fn tensor_hash<F: Scalar>(visit: impl FnOnce(&mut dyn FnMut(&str, &[usize], &[F]))) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    visit(&mut |name, shape, data| {
        h.update(name.as_bytes());
        for &d in shape {
            h.update(d.to_le_bytes());
        }
        buf.clear();
        for &v in data {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    });
    h.finalize().into()
}

// ---------------------------------------------------------------------------
// Attack classifier architectures
// ---------------------------------------------------------------------------

/// Image classifier shaped like one discriminator head: the same conv ladder
/// and shared fully-connected trunk, with a single softmax readout.
#[derive(Debug, Clone)]
pub struct TrunkClassifier<F> {
    pub convs: Vec<Conv2d<F>>,
    pub bns: Vec<BatchNorm2d<F>>,
    pub trunk: Dense<F>,
    pub head: Dense<F>,
    slope: F,
}

pub struct TrunkClassifierCache<F> {
    conv: Vec<Conv2dCache<F>>,
    bn: Vec<BnCache<F>>,
    act: Vec<Array4<F>>,
    flat: Array2<F>,
    trunk_act: Array2<F>,
}

impl<F: Scalar> TrunkClassifier<F> {
    pub fn new(rng: &mut ChaCha8Rng, arch: &ArchConfig, n_classes: usize) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 3;
        for cout in arch.conv_channels() {
            convs.push(Conv2d::new(rng, cin, cout, KERNEL, STRIDE, PAD));
            bns.push(BatchNorm2d::new(cout));
            cin = cout;
        }
        let w = arch.trunk_width();
        TrunkClassifier {
            convs,
            bns,
            trunk: Dense::new(rng, arch.flat_width(), w),
            head: Dense::new(rng, w, n_classes),
            slope: F::from_f64c(arch.leaky_slope),
        }
    }

    pub fn forward_train(&self, x: &Array4<F>) -> (Array2<F>, TrunkClassifierCache<F>) {
        let mut conv_caches = Vec::new();
        let mut bn_caches = Vec::new();
        let mut acts = Vec::new();
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let (y, cc) = conv.forward(&h);
            let (yn, bc) = bn.forward_train(&y);
            h = leaky_relu(&yn, self.slope);
            conv_caches.push(cc);
            bn_caches.push(bc);
            acts.push(h.clone());
        }
        let (b, c, hh, ww) = h.dim();
        let flat = h.into_shape_with_order((b, c * hh * ww)).unwrap();
        let trunk_act = leaky_relu(&self.trunk.forward_nocache(&flat), self.slope);
        let logits = self.head.forward_nocache(&trunk_act);
        (logits, TrunkClassifierCache { conv: conv_caches, bn: bn_caches, act: acts, flat, trunk_act })
    }

    pub fn forward_infer(&self, x: &Array4<F>) -> Array2<F> {
        let mut h = x.clone();
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            let (y, _) = conv.forward(&h);
            h = leaky_relu(&bn.forward_infer(&y), self.slope);
        }
        let (b, c, hh, ww) = h.dim();
        let flat = h.into_shape_with_order((b, c * hh * ww)).unwrap();
        let trunk_act = leaky_relu(&self.trunk.forward_nocache(&flat), self.slope);
        self.head.forward_nocache(&trunk_act)
    }

    pub fn backward(&mut self, cache: &TrunkClassifierCache<F>, d_logits: &Array2<F>) {
        let dtrunk = self.head.backward_with_input(&cache.trunk_act, d_logits);
        let dpre = leaky_relu_backward(&cache.trunk_act, &dtrunk, self.slope);
        let dflat = self.trunk.backward_with_input(&cache.flat, &dpre);
        let c = self.convs.last().unwrap().cout;
        let mut d = rows_to_nchw(&dflat, c);
        for k in (0..self.convs.len()).rev() {
            let da = leaky_relu_backward(&cache.act[k], &d, self.slope);
            let dn = self.bns[k].backward(&cache.bn[k], &da);
            d = self.convs[k].backward(&cache.conv[k], &dn);
        }
    }

    pub fn apply_bn_momentum(&mut self, cache: &TrunkClassifierCache<F>) {
        for (bn, bc) in self.bns.iter_mut().zip(&cache.bn) {
            bn.apply_momentum(bc);
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("atk.conv{i}.w"), &mut c.w);
            f(&format!("atk.conv{i}.b"), &mut c.b);
        }
        for (i, bn) in self.bns.iter_mut().enumerate() {
            f(&format!("atk.bn{i}.gamma"), &mut bn.gamma);
            f(&format!("atk.bn{i}.beta"), &mut bn.beta);
        }
        f("atk.trunk.w", &mut self.trunk.w);
        f("atk.trunk.b", &mut self.trunk.b);
        f("atk.head.w", &mut self.head.w);
        f("atk.head.b", &mut self.head.b);
    }
}

/// Plain fully-connected classifier over latent vectors: three hidden
/// LeakyReLU layers of equal width, no batch norm, softmax readout.
#[derive(Debug, Clone)]
pub struct MlpClassifier<F> {
    pub hidden: Vec<Dense<F>>,
    pub head: Dense<F>,
    slope: F,
}

pub struct MlpClassifierCache<F> {
    x: Array2<F>,
    act: Vec<Array2<F>>,
}

impl<F: Scalar> MlpClassifier<F> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, width: usize, n_classes: usize, slope: f64) -> Self {
        let hidden = vec![
            Dense::new(rng, in_dim, width),
            Dense::new(rng, width, width),
            Dense::new(rng, width, width),
        ];
        MlpClassifier { hidden, head: Dense::new(rng, width, n_classes), slope: F::from_f64c(slope) }
    }

    pub fn forward_train(&self, x: &Array2<F>) -> (Array2<F>, MlpClassifierCache<F>) {
        let mut acts = Vec::new();
        let mut h = x.clone();
        for layer in &self.hidden {
            h = leaky_relu(&layer.forward_nocache(&h), self.slope);
            acts.push(h.clone());
        }
        let logits = self.head.forward_nocache(&h);
        (logits, MlpClassifierCache { x: x.clone(), act: acts })
    }

    pub fn forward_infer(&self, x: &Array2<F>) -> Array2<F> {
        let mut h = x.clone();
        for layer in &self.hidden {
            h = leaky_relu(&layer.forward_nocache(&h), self.slope);
        }
        self.head.forward_nocache(&h)
    }

    pub fn backward(&mut self, cache: &MlpClassifierCache<F>, d_logits: &Array2<F>) {
        let mut d = self.head.backward_with_input(cache.act.last().unwrap(), d_logits);
        for k in (0..self.hidden.len()).rev() {
            let dpre = leaky_relu_backward(&cache.act[k], &d, self.slope);
            let input = if k == 0 { &cache.x } else { &cache.act[k - 1] };
            d = self.hidden[k].backward_with_input(input, &dpre);
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            f(&format!("mlp.fc{i}.w"), &mut l.w);
            f(&format!("mlp.fc{i}.b"), &mut l.b);
        }
        f("mlp.head.w", &mut self.head.w);
        f("mlp.head.b", &mut self.head.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn tiny() -> ArchConfig {
        ArchConfig {
            image_size: 16,
            base_channels: 4,
            latent_dim: 8,
            n_identities: 3,
            n_expressions: 2,
            leaky_slope: 0.2,
            scale_factor: 32,
        }
    }

    fn one_hot_rows(n: usize, labels: &[usize]) -> Array2<f32> {
        let mut c = Array2::<f32>::zeros((labels.len(), n));
        for (i, &l) in labels.iter().enumerate() {
            c[[i, l]] = 1.0;
        }
        c
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        assert!(ArchConfig::full().validate().is_ok());
        assert!(ArchConfig::desk().validate().is_ok());
        let mut a = ArchConfig::desk();
        a.image_size = 48;
        assert!(a.validate().is_err());
        a = ArchConfig::desk();
        a.latent_dim = 4;
        assert!(a.validate().is_err());
        a = ArchConfig::desk();
        a.leaky_slope = 1.0;
        assert!(a.validate().is_err());
        a = ArchConfig::desk();
        a.scale_factor = 3;
        assert!(a.validate().is_err());
    }

    #[test]
    fn full_config_decoder_fc_width_is_2048() {
        let b = build_models::<f32>(&ArchConfig::full(), 1).unwrap();
        assert_eq!(b.decoder.fc.n_out, 2048);
        assert_eq!(b.decoder.fc.n_in, 128 + 6);
        assert_eq!(b.discriminator.trunk.n_out, 256);
    }

    #[test]
    fn desk_config_has_three_stages() {
        let arch = ArchConfig::desk();
        assert_eq!(arch.stages(), 3);
        let b = build_models::<f32>(&arch, 1).unwrap();
        assert_eq!(b.encoder.convs.len(), 3);
        assert_eq!(b.decoder.deconvs.len(), 3);
        assert_eq!(arch.conv_channels(), vec![16, 32, 64]);
        assert_eq!(arch.deconv_channels(), vec![64, 32, 3]);
    }

    #[test]
    fn equal_seeds_build_identical_models() {
        let a = build_models::<f32>(&ArchConfig::desk(), 7).unwrap();
        let b = build_models::<f32>(&ArchConfig::desk(), 7).unwrap();
        assert_eq!(a.part_hashes(), b.part_hashes());
        let c = build_models::<f32>(&ArchConfig::desk(), 8).unwrap();
        assert_ne!(a.part_hashes(), c.part_hashes());
    }

    #[test]
    fn param_count_is_frozen_per_config() {
        // Hand-summed from the layer shapes: conv = cout*(cin*25 + 1),
        // bn = 2*c, dense = out*(in + 1).
        let mut desk = build_models::<f32>(&ArchConfig::desk(), 1).unwrap();
        assert_eq!(desk.param_count(), 454_737);
        let mut full = build_models::<f32>(&ArchConfig::full(), 1).unwrap();
        assert_eq!(full.param_count(), 6_385_169);
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let b = build_models::<f32>(&tiny(), 3).unwrap();
        let imgs = Array4::<f32>::zeros((4, 3, 16, 16));
        let lat = b.encode(&imgs).unwrap();
        assert_eq!(lat.mean.dim(), (4, 8));
        assert_eq!(lat.log_variance.dim(), (4, 8));
        let again = build_models::<f32>(&tiny(), 3).unwrap().encode(&imgs).unwrap();
        assert_eq!(lat.mean, again.mean);
        assert_eq!(lat.log_variance, again.log_variance);
        // wrong spatial size is a validation error
        assert!(b.encode(&Array4::<f32>::zeros((1, 3, 8, 8))).is_err());
    }

    #[test]
    fn sample_latent_degenerate_variance_returns_mean() {
        let mut r = stream(1, StreamKind::LatentNoise, 0, 0);
        let mean = Array::from_shape_simple_fn((4, 8), || f64::std_normal(&mut r));
        let lat = GaussianLatent { mean: mean.clone(), log_variance: Array2::from_elem((4, 8), -50.0) };
        let s = lat.sample(&mut r);
        for (a, b) in s.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(lat.mode(), mean);
    }

    #[test]
    fn sample_latent_monte_carlo_variance() {
        // 1e5 draws of a standard-normal latent: per-dim variance within 5%.
        let mut r = stream(2, StreamKind::LatentNoise, 0, 0);
        let n = 100_000;
        let lat = GaussianLatent {
            mean: Array2::<f64>::zeros((n, 4)),
            log_variance: Array2::<f64>::zeros((n, 4)),
        };
        let s = lat.sample(&mut r);
        for d in 0..4 {
            let col = s.index_axis(Axis(1), d);
            let m: f64 = col.sum() / n as f64;
            let v: f64 = col.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n as f64;
            assert!((v - 1.0).abs() < 0.05, "dim {d}: var {v}");
            assert!(m.abs() < 0.02, "dim {d}: mean {m}");
        }
    }

    #[test]
    fn decode_concatenates_and_stays_in_tanh_range() {
        let arch = tiny();
        let b = build_models::<f32>(&arch, 4).unwrap();
        assert_eq!(b.decoder.fc.n_in, arch.latent_dim + arch.n_identities);
        let f = Array2::<f32>::from_elem((2, 8), 0.3);
        let c = one_hot_rows(3, &[0, 2]);
        let img = b.decode(&f, &c).unwrap();
        assert_eq!(img.dim(), (2, 3, 16, 16));
        assert!(img.iter().all(|&v| v > -1.0 && v < 1.0));
        let img2 = b.decode(&f, &c).unwrap();
        assert_eq!(img, img2);
        // mismatched code width is a validation error
        assert!(b.decode(&f, &one_hot_rows(4, &[0, 1])).is_err());
    }

    #[test]
    fn discriminate_outputs_valid_probabilities() {
        let b = build_models::<f32>(&tiny(), 5).unwrap();
        let mut r = stream(5, StreamKind::LatentNoise, 1, 0);
        let imgs = Array::from_shape_simple_fn((3, 3, 16, 16), || f32::std_normal(&mut r) * 0.5);
        let out = b.discriminate(&imgs).unwrap();
        out.validate().unwrap();
        assert_eq!(out.identity_probs.dim(), (3, 3));
        assert_eq!(out.expression_probs.dim(), (3, 2));
    }

    #[test]
    fn shared_trunk_isolates_head_perturbations() {
        let arch = tiny();
        let mut b = build_models::<f64>(&arch, 6).unwrap();
        let mut r = stream(6, StreamKind::LatentNoise, 2, 0);
        let imgs = Array::from_shape_simple_fn((2, 3, 16, 16), || f64::std_normal(&mut r) * 0.5);
        let base = b.discriminate(&imgs).unwrap();
        // nudging the real/fake head leaves the other two heads untouched
        b.discriminator.head_real.w.v += 0.1;
        let after_head = b.discriminate(&imgs).unwrap();
        assert_eq!(base.identity_probs, after_head.identity_probs);
        assert_eq!(base.expression_probs, after_head.expression_probs);
        assert_ne!(base.real_prob, after_head.real_prob);
        // nudging a shared conv moves all three heads
        b.discriminator.convs[0].w.v += 0.1;
        let after_conv = b.discriminate(&imgs).unwrap();
        assert_ne!(after_head.real_prob, after_conv.real_prob);
        assert_ne!(after_head.identity_probs, after_conv.identity_probs);
        assert_ne!(after_head.expression_probs, after_conv.expression_probs);
    }

    #[test]
    fn encode_decode_shape_duality() {
        for arch in [tiny(), ArchConfig::desk()] {
            let b = build_models::<f32>(&arch, 9).unwrap();
            let imgs = Array4::<f32>::zeros((2, 3, arch.image_size, arch.image_size));
            let lat = b.encode(&imgs).unwrap();
            let c = {
                let mut c = Array2::<f32>::zeros((2, arch.n_identities));
                c.column_mut(0).fill(1.0);
                c
            };
            let out = b.decode(&lat.mean, &c).unwrap();
            assert_eq!(out.dim(), imgs.dim());
        }
    }

    #[test]
    fn train_forwards_leave_parameters_untouched() {
        let arch = tiny();
        let b = build_models::<f32>(&arch, 11).unwrap();
        let before = b.part_hashes();
        let mut r = stream(11, StreamKind::LatentNoise, 3, 0);
        let imgs = Array::from_shape_simple_fn((2, 3, 16, 16), || f32::std_normal(&mut r) * 0.5);
        let (lat, _) = b.encoder.forward_train(&imgs);
        let z = concat_latent_code(&lat.mean, &one_hot_rows(3, &[0, 1]));
        let (img, _) = b.decoder.forward_train(&z);
        let _ = b.discriminator.forward_train(&img);
        assert_eq!(before, b.part_hashes());
    }
}
