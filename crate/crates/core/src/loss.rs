//! KL divergence and the two adversarial objectives.
//!
//! The discriminator objective is maximized; the generator objective is
//! minimized. Every probability is clamped to `[EPS, 1-EPS]` before the log,
//! and the matching gradient is zero outside the clamp interior, so both
//! objectives are total and their gradients bounded.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{DiscriminatorOutput, GaussianLatent};
use crate::scalar::Scalar;

/// Log-argument clamp bound.
pub const EPS: f64 = 1e-7;

/// Term weights for both objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { d1: 0.25, d2: 0.5, d3: 0.25, g1: 0.108, g2: 0.6, g3: 0.29, g4: 0.002 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d1, self.d2, self.d3, self.g1, self.g2, self.g3, self.g4];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Behavior switches for the adversarial terms, both off by default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossFlags {
    /// Generator minimizes `-log p` instead of `log(1 - p)` on its three
    /// adversarial terms (same optimum, stronger early gradient).
    pub non_saturating: bool,
    /// Discriminator identity/expression terms also average over synthetic
    /// images, labeled with their target identity and source expression.
    pub disc_labels_on_fake: bool,
}

fn clamp01<F: Scalar>(p: F) -> F {
    let lo = F::from_f64c(EPS);
    let hi = F::one() - lo;
    p.max(lo).min(hi)
}

fn clamped_ln<F: Scalar>(p: F) -> F {
    clamp01(p).ln()
}

/// d/dp of `ln(clamp(p))`: `1/p` inside the clamp interval, 0 outside.
fn clamped_ln_grad<F: Scalar>(p: F) -> F {
    let lo = F::from_f64c(EPS);
    let hi = F::one() - lo;
    if p >= lo && p <= hi {
        F::one() / p
    } else {
        F::zero()
    }
}

fn check_labels(labels: &[usize], n: usize, what: &str) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Validation(format!("{what} label {bad} out of range (< {n})")));
    }
    Ok(())
}

fn check_finite<'a, F: Scalar>(vals: impl IntoIterator<Item = &'a F>, what: &str) -> Result<()> {
    if vals.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

/// Closed-form KL of diagonal Gaussians against the standard normal,
/// summed per latent and averaged over the batch:
/// `mean_b sum_d 0.5 * (mu^2 + e^lv - 1 - lv)`.
pub fn kl_standard_normal<F: Scalar>(latent: &GaussianLatent<F>) -> Result<F> {
    check_finite(latent.mean.iter(), "latent mean")?;
    check_finite(latent.log_variance.iter(), "latent log-variance")?;
    let half = F::from_f64c(0.5);
    let mut total = F::zero();
    for (&mu, &lv) in latent.mean.iter().zip(latent.log_variance.iter()) {
        total += half * (mu * mu + lv.exp() - F::one() - lv);
    }
    Ok(total / F::from_usize(latent.batch_len()).unwrap())
}

/// KL value plus gradients with respect to mean and log-variance.
pub fn kl_with_grads<F: Scalar>(latent: &GaussianLatent<F>) -> Result<(F, Array2<F>, Array2<F>)> {
    let kl = kl_standard_normal(latent)?;
    let inv_b = F::one() / F::from_usize(latent.batch_len()).unwrap();
    let half = F::from_f64c(0.5);
    let d_mean = latent.mean.mapv(|mu| mu * inv_b);
    let d_logvar = latent.log_variance.mapv(|lv| half * (lv.exp() - F::one()) * inv_b);
    Ok((kl, d_mean, d_logvar))
}

// ---------------------------------------------------------------------------
// Discriminator objective (maximized)
// ---------------------------------------------------------------------------

/// `d1 * [mean ln D1(real) + mean ln(1 - D1(fake))] + d2 * mean ln D2_id(real)
/// + d3 * mean ln D3_expr(real)`; the label terms use real images only.
pub fn discriminator_objective<F: Scalar>(
    real_out: &DiscriminatorOutput<F>,
    fake_real_prob: &Array1<F>,
    ids: &[usize],
    exprs: &[usize],
    w: &LossWeights,
) -> Result<F> {
    w.validate()?;
    let b = real_out.batch_len();
    if ids.len() != b || exprs.len() != b || fake_real_prob.is_empty() {
        return Err(Error::Validation(format!(
            "inconsistent batch sizes: {} real, {} ids, {} exprs, {} fake",
            b,
            ids.len(),
            exprs.len(),
            fake_real_prob.len()
        )));
    }
    check_labels(ids, real_out.identity_probs.ncols(), "identity")?;
    check_labels(exprs, real_out.expression_probs.ncols(), "expression")?;
    check_finite(real_out.real_prob.iter(), "real probabilities")?;
    check_finite(fake_real_prob.iter(), "fake probabilities")?;

    let bf = F::from_usize(b).unwrap();
    let t_real: F = real_out.real_prob.iter().map(|&p| clamped_ln(p)).sum::<F>() / bf;
    let t_fake: F = fake_real_prob.iter().map(|&p| clamped_ln(F::one() - p)).sum::<F>()
        / F::from_usize(fake_real_prob.len()).unwrap();
    let mut t_id = F::zero();
    let mut t_expr = F::zero();
    for (i, (&yid, &ye)) in ids.iter().zip(exprs).enumerate() {
        t_id += clamped_ln(real_out.identity_probs[[i, yid]]);
        t_expr += clamped_ln(real_out.expression_probs[[i, ye]]);
    }
    t_id /= bf;
    t_expr /= bf;
    Ok(F::from_f64c(w.d1) * (t_real + t_fake) + F::from_f64c(w.d2) * t_id + F::from_f64c(w.d3) * t_expr)
}

/// Gradients of the discriminator objective with respect to each head
/// probability, split by which forward pass (real or fake) they belong to.
#[derive(Debug, Clone)]
pub struct DiscriminatorGrads<F> {
    pub real_real: Array1<F>,
    pub real_id: Array2<F>,
    pub real_expr: Array2<F>,
    pub fake_real: Array1<F>,
    pub fake_id: Array2<F>,
    pub fake_expr: Array2<F>,
}

/// Objective value and probability-level gradients for a discriminator step.
/// `fake_target_ids` are the identity codes the fakes were decoded with; they
/// only matter when `flags.disc_labels_on_fake` is set, which folds synthetic
/// images into the two label terms (the expectation then runs over the
/// combined real + fake sample set).
#[allow(clippy::too_many_arguments)]
pub fn discriminator_objective_grads<F: Scalar>(
    real_out: &DiscriminatorOutput<F>,
    fake_out: &DiscriminatorOutput<F>,
    ids: &[usize],
    exprs: &[usize],
    fake_target_ids: &[usize],
    w: &LossWeights,
    flags: LossFlags,
) -> Result<(F, DiscriminatorGrads<F>)> {
    let value = discriminator_objective(real_out, &fake_out.real_prob, ids, exprs, w)?;
    let b = real_out.batch_len();
    let bk = fake_out.batch_len();
    let bf = F::from_usize(b).unwrap();
    let bkf = F::from_usize(bk).unwrap();
    let (d1, d2, d3) = (F::from_f64c(w.d1), F::from_f64c(w.d2), F::from_f64c(w.d3));

    let real_real = real_out.real_prob.mapv(|p| d1 * clamped_ln_grad(p) / bf);
    // d/dp ln(1 - p) = -1 / (1 - p) inside the clamp
    let fake_real = fake_out.real_prob.mapv(|p| -d1 * clamped_ln_grad(F::one() - p) / bkf);
    let mut real_id = Array2::<F>::zeros(real_out.identity_probs.raw_dim());
    let mut real_expr = Array2::<F>::zeros(real_out.expression_probs.raw_dim());
    let mut fake_id = Array2::<F>::zeros(fake_out.identity_probs.raw_dim());
    let mut fake_expr = Array2::<F>::zeros(fake_out.expression_probs.raw_dim());

    if flags.disc_labels_on_fake {
        if fake_target_ids.len() != bk {
            return Err(Error::Validation(format!(
                "fake target ids {} do not match fake batch {bk}",
                fake_target_ids.len()
            )));
        }
        check_labels(fake_target_ids, fake_out.identity_probs.ncols(), "fake identity")?;
        // combined-sample label expectations replace the real-only value
        let m = F::from_usize(b + bk).unwrap();
        let mut t_id = F::zero();
        let mut t_expr = F::zero();
        for (i, (&yid, &ye)) in ids.iter().zip(exprs).enumerate() {
            t_id += clamped_ln(real_out.identity_probs[[i, yid]]);
            t_expr += clamped_ln(real_out.expression_probs[[i, ye]]);
            real_id[[i, yid]] = d2 * clamped_ln_grad(real_out.identity_probs[[i, yid]]) / m;
            real_expr[[i, ye]] = d3 * clamped_ln_grad(real_out.expression_probs[[i, ye]]) / m;
        }
        for (i, (&yid, &ye)) in fake_target_ids.iter().zip(exprs).enumerate() {
            t_id += clamped_ln(fake_out.identity_probs[[i, yid]]);
            t_expr += clamped_ln(fake_out.expression_probs[[i, ye]]);
            fake_id[[i, yid]] = d2 * clamped_ln_grad(fake_out.identity_probs[[i, yid]]) / m;
            fake_expr[[i, ye]] = d3 * clamped_ln_grad(fake_out.expression_probs[[i, ye]]) / m;
        }
        let mut t_real = F::zero();
        for &p in &real_out.real_prob {
            t_real += clamped_ln(p);
        }
        let mut t_fake = F::zero();
        for &p in &fake_out.real_prob {
            t_fake += clamped_ln(F::one() - p);
        }
        let value = d1 * (t_real / bf + t_fake / bkf) + d2 * t_id / m + d3 * t_expr / m;
        let grads = DiscriminatorGrads { real_real, real_id, real_expr, fake_real, fake_id, fake_expr };
        return Ok((value, grads));
    }

    for (i, (&yid, &ye)) in ids.iter().zip(exprs).enumerate() {
        real_id[[i, yid]] = d2 * clamped_ln_grad(real_out.identity_probs[[i, yid]]) / bf;
        real_expr[[i, ye]] = d3 * clamped_ln_grad(real_out.expression_probs[[i, ye]]) / bf;
    }
    let grads = DiscriminatorGrads { real_real, real_id, real_expr, fake_real, fake_id, fake_expr };
    Ok((value, grads))
}

// ---------------------------------------------------------------------------
// Generator objective (minimized)
// ---------------------------------------------------------------------------

/// `g1 * mean ln(1 - D1(fake)) + g2 * mean ln(1 - D2_target(fake))
/// + g3 * mean ln(1 - D3_expr(fake)) + g4 * kl`.
pub fn generator_objective<F: Scalar>(
    fake_out: &DiscriminatorOutput<F>,
    target_ids: &[usize],
    exprs: &[usize],
    kl: F,
    w: &LossWeights,
) -> Result<F> {
    generator_terms(fake_out, target_ids, exprs, kl, w, false).map(|(v, _, _, _)| v)
}

/// Gradients of the generator objective with respect to the fake batch's
/// discriminator probabilities.
#[derive(Debug, Clone)]
pub struct GeneratorGrads<F> {
    pub real: Array1<F>,
    pub id: Array2<F>,
    pub expr: Array2<F>,
}

pub fn generator_objective_grads<F: Scalar>(
    fake_out: &DiscriminatorOutput<F>,
    target_ids: &[usize],
    exprs: &[usize],
    kl: F,
    w: &LossWeights,
    non_saturating: bool,
) -> Result<(F, GeneratorGrads<F>)> {
    let (value, real, id, expr) = generator_terms(fake_out, target_ids, exprs, kl, w, non_saturating)?;
    Ok((value, GeneratorGrads { real, id, expr }))
}

fn generator_terms<F: Scalar>(
    fake_out: &DiscriminatorOutput<F>,
    target_ids: &[usize],
    exprs: &[usize],
    kl: F,
    w: &LossWeights,
    non_saturating: bool,
) -> Result<(F, Array1<F>, Array2<F>, Array2<F>)> {
    w.validate()?;
    let b = fake_out.batch_len();
    if target_ids.len() != b || exprs.len() != b {
        return Err(Error::Validation(format!(
            "inconsistent batch sizes: {b} fake, {} targets, {} exprs",
            target_ids.len(),
            exprs.len()
        )));
    }
    check_labels(target_ids, fake_out.identity_probs.ncols(), "target identity")?;
    check_labels(exprs, fake_out.expression_probs.ncols(), "expression")?;
    check_finite(fake_out.real_prob.iter(), "fake probabilities")?;
    if !kl.is_finite() || kl < F::zero() {
        return Err(Error::Numeric(format!("kl must be finite and >= 0, got {kl}")));
    }
    let bf = F::from_usize(b).unwrap();
    let (g1, g2, g3, g4) = (
        F::from_f64c(w.g1),
        F::from_f64c(w.g2),
        F::from_f64c(w.g3),
        F::from_f64c(w.g4),
    );
    // saturating: minimize ln(1 - p); non-saturating: minimize -ln(p)
    let term = |p: F| if non_saturating { -clamped_ln(p) } else { clamped_ln(F::one() - p) };
    let dterm = |p: F| {
        if non_saturating {
            -clamped_ln_grad(p)
        } else {
            -clamped_ln_grad(F::one() - p)
        }
    };

    let mut value = g4 * kl;
    let mut d_real = Array1::<F>::zeros(b);
    let mut d_id = Array2::<F>::zeros(fake_out.identity_probs.raw_dim());
    let mut d_expr = Array2::<F>::zeros(fake_out.expression_probs.raw_dim());
    for i in 0..b {
        let (p1, p2, p3) = (
            fake_out.real_prob[i],
            fake_out.identity_probs[[i, target_ids[i]]],
            fake_out.expression_probs[[i, exprs[i]]],
        );
        value += (g1 * term(p1) + g2 * term(p2) + g3 * term(p3)) / bf;
        d_real[i] = g1 * dterm(p1) / bf;
        d_id[[i, target_ids[i]]] = g2 * dterm(p2) / bf;
        d_expr[[i, exprs[i]]] = g3 * dterm(p3) / bf;
    }
    Ok((value, d_real, d_id, d_expr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};
    use crate::scalar::Scalar;
    use ndarray::Array;
    use proptest::prelude::*;

    fn latent1(mu: f64, lv: f64) -> GaussianLatent<f64> {
        GaussianLatent {
            mean: Array2::from_elem((1, 1), mu),
            log_variance: Array2::from_elem((1, 1), lv),
        }
    }

    /// Monte Carlo KL(N(mu, e^lv) || N(0,1)) from the log-density ratio.
    fn kl_monte_carlo(mu: f64, lv: f64, n: usize) -> f64 {
        let mut r = stream(99, StreamKind::LatentNoise, 7, 7);
        let sigma = (lv / 2.0).exp();
        let mut acc = 0.0;
        for _ in 0..n {
            let x = mu + sigma * f64::std_normal(&mut r);
            let log_q = -(x - mu) * (x - mu) / (2.0 * sigma * sigma) - 0.5 * lv;
            let log_p = -x * x / 2.0;
            acc += log_q - log_p;
        }
        acc / n as f64
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        // closed form vs 1e6-sample Monte Carlo, +-0.01
        let cases = [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.0, 4.0f64.ln(), 0.8068528194400547)];
        for (mu, lv, frozen) in cases {
            let mc = kl_monte_carlo(mu, lv, 1_000_000);
            let cf = kl_standard_normal(&latent1(mu, lv)).unwrap();
            assert!((cf - mc).abs() < 0.01, "mu={mu} lv={lv}: closed {cf} vs mc {mc}");
            assert!((cf - frozen).abs() < 1e-12, "mu={mu} lv={lv}: closed {cf} vs frozen {frozen}");
        }
    }

    #[test]
    fn kl_batch_average_and_grads() {
        let lat = GaussianLatent {
            mean: ndarray::array![[1.0, 0.0], [0.0, 0.0]],
            log_variance: ndarray::array![[0.0, 0.0], [0.0, 4.0f64.ln()]],
        };
        // rows contribute 0.5 and 0.80685...; batch mean halves the sum
        let kl = kl_standard_normal(&lat).unwrap();
        assert!((kl - (0.5 + 0.8068528194400547) / 2.0).abs() < 1e-12);
        let (_, dm, dlv) = kl_with_grads(&lat).unwrap();
        assert!((dm[[0, 0]] - 0.5).abs() < 1e-12); // mu / batch
        assert!((dlv[[1, 1]] - (4.0 - 1.0) / 4.0).abs() < 1e-12); // (e^lv - 1) / (2 batch)
        // finite-difference check on every coordinate
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let h = 1e-6;
            let mut lp = lat.clone();
            lp.mean[idx] += h;
            let mut lm = lat.clone();
            lm.mean[idx] -= h;
            let fd = (kl_standard_normal(&lp).unwrap() - kl_standard_normal(&lm).unwrap()) / (2.0 * h);
            assert!((fd - dm[idx]).abs() < 1e-6);
            let mut lp = lat.clone();
            lp.log_variance[idx] += h;
            let mut lm = lat.clone();
            lm.log_variance[idx] -= h;
            let fd = (kl_standard_normal(&lp).unwrap() - kl_standard_normal(&lm).unwrap()) / (2.0 * h);
            assert!((fd - dlv[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_rejects_non_finite() {
        assert!(kl_standard_normal(&latent1(f64::NAN, 0.0)).is_err());
        assert!(kl_standard_normal(&latent1(0.0, f64::INFINITY)).is_err());
    }

    fn out_const(b: usize, nid: usize, ne: usize, p: f64) -> DiscriminatorOutput<f64> {
        DiscriminatorOutput {
            real_prob: Array1::from_elem(b, p),
            identity_probs: Array2::from_elem((b, nid), p),
            expression_probs: Array2::from_elem((b, ne), p),
        }
    }

    #[test]
    fn discriminator_objective_frozen_values() {
        let w = LossWeights::default();
        let half = out_const(4, 6, 7, 0.5);
        let ids = [0, 1, 2, 3];
        let exprs = [0, 1, 2, 3];
        let fake = Array1::from_elem(4, 0.5);
        // all probabilities 1/2: (0.25*2 + 0.5 + 0.25) * ln(1/2)
        let v = discriminator_objective(&half, &fake, &ids, &exprs, &w).unwrap();
        assert!((v - (-0.8664339756999316)).abs() < 1e-12, "{v}");
        // perfect discriminator: supremum ~ 0 (only the eps clamp keeps it below)
        let perfect = out_const(4, 6, 7, 1.0);
        let v = discriminator_objective(&perfect, &Array1::from_elem(4, 0.0), &ids, &exprs, &w).unwrap();
        assert!(v.abs() < 1e-6 && v <= 0.0, "{v}");
        // zero weights
        let zero = LossWeights { d1: 0.0, d2: 0.0, d3: 0.0, g1: 0.0, g2: 0.0, g3: 0.0, g4: 0.0 };
        let v = discriminator_objective(&half, &fake, &ids, &exprs, &zero).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn generator_objective_frozen_values() {
        let w = LossWeights::default();
        let half = out_const(4, 6, 7, 0.5);
        let ids = [0, 1, 2, 3];
        let exprs = [0, 1, 2, 3];
        // all relevant probabilities 1/2, kl 0: 0.998 * ln(1/2)
        let v = generator_objective(&half, &ids, &exprs, 0.0, &w).unwrap();
        assert!((v - (-0.6917608861988254)).abs() < 1e-12, "{v}");
        // kl 10 adds 0.002 * 10
        let v = generator_objective(&half, &ids, &exprs, 10.0, &w).unwrap();
        assert!((v - (-0.6717608861988254)).abs() < 1e-12, "{v}");
        // perfectly fooled: all terms hit the clamp floor
        let fooled = out_const(4, 6, 7, 1.0);
        let v = generator_objective(&fooled, &ids, &exprs, 0.0, &w).unwrap();
        assert!((v - 0.998 * EPS.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn objectives_reject_bad_labels_and_sizes() {
        let w = LossWeights::default();
        let half = out_const(2, 3, 2, 0.5);
        let fake = Array1::from_elem(2, 0.5);
        assert!(discriminator_objective(&half, &fake, &[0, 3], &[0, 1], &w).is_err());
        assert!(discriminator_objective(&half, &fake, &[0], &[0, 1], &w).is_err());
        assert!(generator_objective(&half, &[0, 1], &[0, 2], 0.0, &w).is_err());
        assert!(generator_objective(&half, &[0, 1], &[0, 1], -1.0, &w).is_err());
        let bad = LossWeights { d1: -0.1, ..Default::default() };
        assert!(discriminator_objective(&half, &fake, &[0, 1], &[0, 1], &bad).is_err());
    }

    fn rand_out(r: &mut rand_chacha::ChaCha8Rng, b: usize, nid: usize, ne: usize) -> DiscriminatorOutput<f64> {
        let mut draw = |lo: f64, hi: f64| lo + (hi - lo) * f64::unit_uniform(r);
        DiscriminatorOutput {
            real_prob: Array::from_shape_simple_fn(b, || draw(0.05, 0.95)),
            identity_probs: Array::from_shape_simple_fn((b, nid), || draw(0.05, 0.95)),
            expression_probs: Array::from_shape_simple_fn((b, ne), || draw(0.05, 0.95)),
        }
    }

    /// Central differences over every probability entry against the analytic
    /// gradients, for both objectives and both flag settings.
    #[test]
    fn probability_gradients_match_finite_differences() {
        let w = LossWeights::default();
        let mut r = stream(5, StreamKind::LatentNoise, 1, 2);
        let (b, nid, ne) = (3, 4, 3);
        let real = rand_out(&mut r, b, nid, ne);
        let fake = rand_out(&mut r, b, nid, ne);
        let ids = [0, 2, 3];
        let exprs = [1, 0, 2];
        let tids = [3, 1, 0];
        let h = 1e-7;

        for flags in [LossFlags::default(), LossFlags { disc_labels_on_fake: true, non_saturating: false }] {
            let (_, g) =
                discriminator_objective_grads(&real, &fake, &ids, &exprs, &tids, &w, flags).unwrap();
            let eval = |real: &DiscriminatorOutput<f64>, fake: &DiscriminatorOutput<f64>| -> f64 {
                discriminator_objective_grads(real, fake, &ids, &exprs, &tids, &w, flags).unwrap().0
            };
            let check = |analytic: f64, fd: f64| {
                assert!((analytic - fd).abs() < 1e-5 * (1.0 + analytic.abs()), "{analytic} vs {fd}");
            };
            for i in 0..b {
                let mut hi = real.clone();
                hi.real_prob[i] += h;
                let mut lo = real.clone();
                lo.real_prob[i] -= h;
                check(g.real_real[i], (eval(&hi, &fake) - eval(&lo, &fake)) / (2.0 * h));
                let mut hi = fake.clone();
                hi.real_prob[i] += h;
                let mut lo = fake.clone();
                lo.real_prob[i] -= h;
                check(g.fake_real[i], (eval(&real, &hi) - eval(&real, &lo)) / (2.0 * h));
                for j in 0..nid {
                    let mut hi = real.clone();
                    hi.identity_probs[[i, j]] += h;
                    let mut lo = real.clone();
                    lo.identity_probs[[i, j]] -= h;
                    check(g.real_id[[i, j]], (eval(&hi, &fake) - eval(&lo, &fake)) / (2.0 * h));
                    let mut hi = fake.clone();
                    hi.identity_probs[[i, j]] += h;
                    let mut lo = fake.clone();
                    lo.identity_probs[[i, j]] -= h;
                    check(g.fake_id[[i, j]], (eval(&real, &hi) - eval(&real, &lo)) / (2.0 * h));
                }
            }
        }

        for ns in [false, true] {
            let (_, g) = generator_objective_grads(&fake, &tids, &exprs, 0.3, &w, ns).unwrap();
            let eval = |fake: &DiscriminatorOutput<f64>| -> f64 {
                generator_objective_grads(fake, &tids, &exprs, 0.3, &w, ns).unwrap().0
            };
            for i in 0..b {
                let mut hi = fake.clone();
                hi.real_prob[i] += h;
                let mut lo = fake.clone();
                lo.real_prob[i] -= h;
                let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                assert!((g.real[i] - fd).abs() < 1e-5, "{} vs {fd}", g.real[i]);
                for j in 0..nid {
                    let mut hi = fake.clone();
                    hi.identity_probs[[i, j]] += h;
                    let mut lo = fake.clone();
                    lo.identity_probs[[i, j]] -= h;
                    let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                    assert!((g.id[[i, j]] - fd).abs() < 1e-5);
                }
                for j in 0..ne {
                    let mut hi = fake.clone();
                    hi.expression_probs[[i, j]] += h;
                    let mut lo = fake.clone();
                    lo.expression_probs[[i, j]] -= h;
                    let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
                    assert!((g.expr[[i, j]] - fd).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn clamp_gradient_is_zero_outside_interior() {
        // saturated probabilities contribute a constant, so their gradient
        // vanishes instead of exploding
        let w = LossWeights::default();
        let fake = DiscriminatorOutput {
            real_prob: ndarray::array![1.0 - 1e-9, 0.5],
            identity_probs: ndarray::array![[1.0, 0.0], [0.5, 0.5]],
            expression_probs: ndarray::array![[0.5, 0.5], [0.5, 0.5]],
        };
        let (_, g) = generator_objective_grads(&fake, &[0, 0], &[0, 0], 0.0, &w, false).unwrap();
        assert_eq!(g.real[0], 0.0);
        assert_eq!(g.id[[0, 0]], 0.0);
        assert!(g.real[1] < 0.0);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-50.0f64..50.0, 3),
            lv in proptest::collection::vec(-20.0f64..6.0, 3),
        ) {
            let lat = GaussianLatent {
                mean: Array2::from_shape_vec((1, 3), mu.clone()).unwrap(),
                log_variance: Array2::from_shape_vec((1, 3), lv.clone()).unwrap(),
            };
            let kl = kl_standard_normal(&lat).unwrap();
            prop_assert!(kl >= 0.0);
            if mu.iter().any(|m| m.abs() > 1e-3) || lv.iter().any(|l| l.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn discriminator_objective_monotone(
            p in 0.01f64..0.95,
            delta in 0.001f64..0.04,
        ) {
            // strictly increasing in D1(real), D2_id, D3_expr; decreasing in D1(fake)
            let w = LossWeights::default();
            let ids = [0];
            let exprs = [0];
            let base = out_const(1, 2, 2, p);
            let fake = Array1::from_elem(1, p);
            let v0 = discriminator_objective(&base, &fake, &ids, &exprs, &w).unwrap();

            let mut up = base.clone();
            up.real_prob[0] = p + delta;
            prop_assert!(discriminator_objective(&up, &fake, &ids, &exprs, &w).unwrap() > v0);

            let mut up = base.clone();
            up.identity_probs[[0, 0]] = p + delta;
            prop_assert!(discriminator_objective(&up, &fake, &ids, &exprs, &w).unwrap() > v0);

            let mut up = base.clone();
            up.expression_probs[[0, 0]] = p + delta;
            prop_assert!(discriminator_objective(&up, &fake, &ids, &exprs, &w).unwrap() > v0);

            let fake_up = Array1::from_elem(1, p + delta);
            prop_assert!(discriminator_objective(&base, &fake_up, &ids, &exprs, &w).unwrap() < v0);
        }

        #[test]
        fn clamp_is_transparent_inside_safe_band(p in (2.0 * EPS)..(1.0 - 2.0 * EPS)) {
            prop_assert_eq!(clamped_ln(p), p.ln());
            prop_assert_eq!(clamped_ln_grad(p), 1.0 / p);
        }
    }
}
