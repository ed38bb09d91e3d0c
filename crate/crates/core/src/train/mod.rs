//! Alternating adversarial optimization: one ascent step on the
//! discriminator objective, then `g_steps_per_d_step` descent steps on the
//! generator objective, over seed-deterministic shuffled mini-batches.
//!
//! Parameter partition is strict: a discriminator step never mutates
//! encoder/decoder state (parameters or running statistics) and a generator
//! step never mutates discriminator state. Tests pin this with state hashes.

pub mod checkpoint;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{one_hot_batch, DatasetManifest, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::loss::{
    discriminator_objective_grads, generator_objective_grads, kl_with_grads, LossFlags,
    LossWeights,
};
use crate::nets::{build_models, concat_latent_code, ArchConfig, ModelBundle};
use crate::nets::layers::Param;
use crate::rng::{normal_array, stream, StreamKind};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// RMSprop squared-gradient decay.
    pub rmsprop_decay: f64,
    pub g_steps_per_d_step: usize,
    pub weights: LossWeights,
    pub flags: LossFlags,
    pub seed: u64,
    /// Exclude this (identity, expression) cell from the training stream;
    /// other identities keep the expression.
    pub left_out: Option<(usize, usize)>,
    /// Checkpoint every this many epochs (0 = only at completion).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 120,
            batch_size: 64,
            learning_rate: 0.0002,
            rmsprop_decay: 0.9,
            g_steps_per_d_step: 2,
            weights: LossWeights::default(),
            flags: LossFlags::default(),
            seed: 0,
            left_out: None,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be >= 2 for batch norm".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Validation(format!(
                "rmsprop_decay must lie in [0, 1), got {}",
                self.rmsprop_decay
            )));
        }
        if self.g_steps_per_d_step < 1 {
            return Err(Error::Validation("g_steps_per_d_step must be >= 1".into()));
        }
        self.weights.validate()
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// RMSprop without momentum; squared-gradient state is keyed by parameter
/// name so it survives across steps. Consumes (zeroes) the gradient.
pub struct RmsProp<F> {
    lr: F,
    decay: F,
    eps: F,
    state: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> RmsProp<F> {
    pub fn new(learning_rate: f64, decay: f64) -> Self {
        RmsProp {
            lr: F::from_f64c(learning_rate),
            decay: F::from_f64c(decay),
            eps: F::from_f64c(1e-8),
            state: HashMap::new(),
        }
    }

    pub fn update(&mut self, name: &str, p: &mut Param<F>) {
        let v = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| ArrayD::zeros(p.g.raw_dim()));
        let one = F::one();
        ndarray::Zip::from(&mut p.v).and(&mut *v).and(&p.g).for_each(|pv, sv, &g| {
            *sv = self.decay * *sv + (one - self.decay) * g * g;
            *pv = *pv - self.lr * g / (sv.sqrt() + self.eps);
        });
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-step observables. `wall_clock_s` is in-memory only; the serialized
/// log stays byte-reproducible across runs with equal seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub d_objective: f64,
    pub g_objective: f64,
    pub kl: f64,
    pub d1_real_mean: f64,
    pub d1_fake_mean: f64,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl StepMetrics {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl >= 0.0) {
            return Err(Error::Numeric(format!("kl must be >= 0, got {}", self.kl)));
        }
        for (n, p) in [("d1_real_mean", self.d1_real_mean), ("d1_fake_mean", self.d1_fake_mean)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Numeric(format!("{n} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub d_objective_mean: f64,
    pub g_objective_mean: f64,
    pub kl_mean: f64,
    pub kl_max: f64,
    pub d1_real_mean: f64,
    pub d1_fake_mean: f64,
    /// "d1_collapse" when the discriminator saturates; "kl_bound_exceeded"
    /// when kl_max passes 10x the first epoch's maximum.
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Single steps
// ---------------------------------------------------------------------------

fn sample_codes(rng: &mut ChaCha8Rng, n: usize, n_identities: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n_identities)).collect()
}

fn finite_or_diverged<F: Scalar>(value: F, step: u64, what: &str, extra: &str) -> Result<f64> {
    let v = value.to_f64c();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { step, detail: format!("{what} = {v}; {extra}") })
    }
}

/// One ascent step on the discriminator objective. Only discriminator
/// parameters and running statistics change. Returns (objective value,
/// mean D1 on real, mean D1 on fake).
pub fn discriminator_step<F: Scalar>(
    model: &mut ModelBundle<F>,
    batch: &LoadedDataset<F>,
    config: &TrainConfig,
    opt: &mut RmsProp<F>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let b = batch.len();
    let step = model.d_steps;
    let n_id = model.arch.n_identities;

    // synthesize fakes from the same real batch; generator stays in train
    // mode for batch statistics but its running stats are left untouched
    let (latent, _) = model.encoder.forward_train(&batch.images);
    latent
        .validate_finite()
        .map_err(|e| Error::Diverged { step, detail: format!("encoder output: {e}") })?;
    let w = normal_array::<F, _>(rng, (b, model.arch.latent_dim));
    let f = latent.sample_with_noise(&w);
    let codes = sample_codes(rng, b, n_id);
    let cmat = one_hot_batch::<F>(&codes, n_id)?;
    let (fake, _) = model.decoder.forward_train(&concat_latent_code(&f, &cmat));

    let (real_out, real_cache) = model.discriminator.forward_train(&batch.images);
    let (fake_out, fake_cache) = model.discriminator.forward_train(&fake);
    let (value, grads) = discriminator_objective_grads(
        &real_out,
        &fake_out,
        &batch.identities,
        &batch.expressions,
        &codes,
        &config.weights,
        config.flags,
    )?;
    let d1_real = real_out.real_prob.mean().unwrap().to_f64c();
    let d1_fake = fake_out.real_prob.mean().unwrap().to_f64c();
    let value = finite_or_diverged(
        value,
        step,
        "d_objective",
        &format!("d1_real_mean={d1_real}, d1_fake_mean={d1_fake}"),
    )?;

    // ascend by descending the negated objective
    model.discriminator.backward(
        &real_cache,
        &grads.real_real.mapv(|v| -v),
        &grads.real_id.mapv(|v| -v),
        &grads.real_expr.mapv(|v| -v),
    );
    model.discriminator.backward(
        &fake_cache,
        &grads.fake_real.mapv(|v| -v),
        &grads.fake_id.mapv(|v| -v),
        &grads.fake_expr.mapv(|v| -v),
    );
    model.discriminator.apply_bn_momentum(&real_cache);
    model.discriminator.apply_bn_momentum(&fake_cache);
    model.discriminator.for_each_param(&mut |n, p| opt.update(n, p));
    model.d_steps += 1;
    Ok((value, d1_real, d1_fake))
}

/// One descent step on the generator objective. Only encoder and decoder
/// parameters and running statistics change. Returns (objective value, kl).
pub fn generator_step<F: Scalar>(
    model: &mut ModelBundle<F>,
    batch: &LoadedDataset<F>,
    config: &TrainConfig,
    opt: &mut RmsProp<F>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let b = batch.len();
    let step = model.g_steps;
    let n_id = model.arch.n_identities;
    let latent_dim = model.arch.latent_dim;

    let (latent, enc_cache) = model.encoder.forward_train(&batch.images);
    latent
        .validate_finite()
        .map_err(|e| Error::Diverged { step, detail: format!("encoder output: {e}") })?;
    let w = normal_array::<F, _>(rng, (b, latent_dim));
    let f = latent.sample_with_noise(&w);
    let codes = sample_codes(rng, b, n_id);
    let cmat = one_hot_batch::<F>(&codes, n_id)?;
    let (fake, dec_cache) = model.decoder.forward_train(&concat_latent_code(&f, &cmat));
    // discriminator judges in train mode but its running stats stay frozen
    let (d_out, d_cache) = model.discriminator.forward_train(&fake);

    let (kl, dkl_mean, dkl_lv) = kl_with_grads(&latent)?;
    let (value, grads) = generator_objective_grads(
        &d_out,
        &codes,
        &batch.expressions,
        kl,
        &config.weights,
        config.flags.non_saturating,
    )?;
    let kl_v = finite_or_diverged(kl, step, "kl", "")?;
    let value = finite_or_diverged(value, step, "g_objective", &format!("kl={kl_v}"))?;

    let d_fake = model.discriminator.backward(&d_cache, &grads.real, &grads.id, &grads.expr);
    // that backward accumulated into discriminator grads as a side effect
    model.discriminator.for_each_param(&mut |_, p| p.zero_grad());

    let dz = model.decoder.backward(&dec_cache, &d_fake);
    let df = dz.slice(s![.., ..latent_dim]);
    let g4 = F::from_f64c(config.weights.g4);
    let half = F::from_f64c(0.5);
    // f = mean + exp(lv/2) * w, so d(lv) = df * w * exp(lv/2) / 2
    let d_mean: Array2<F> = &df + &dkl_mean.mapv(|v| v * g4);
    let sigma = latent.log_variance.mapv(|v| (v * half).exp());
    let d_lv: Array2<F> = &(&df.to_owned() * &w * &sigma * half) + &dkl_lv.mapv(|v| v * g4);
    model.encoder.backward(&enc_cache, &d_mean, &d_lv);

    model.encoder.apply_bn_momentum(&enc_cache);
    model.decoder.apply_bn_momentum(&dec_cache);
    model.encoder.for_each_param(&mut |n, p| opt.update(n, p));
    model.decoder.for_each_param(&mut |n, p| opt.update(n, p));
    model.g_steps += 1;
    Ok((value, kl_v))
}

/// One alternation unit: a discriminator step followed by
/// `g_steps_per_d_step` generator steps, all on the same real batch with
/// fresh identity codes and latent noise per step.
pub fn train_step<F: Scalar>(
    model: &mut ModelBundle<F>,
    batch: &LoadedDataset<F>,
    config: &TrainConfig,
    opt: &mut RmsProp<F>,
    rng: &mut ChaCha8Rng,
) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::Validation("batch must hold at least 2 images".into()));
    }
    let t0 = Instant::now();
    let step = model.d_steps;
    let (d_objective, d1_real_mean, d1_fake_mean) =
        discriminator_step(model, batch, config, opt, rng)?;
    let (mut g_objective, mut kl) = (0.0, 0.0);
    for _ in 0..config.g_steps_per_d_step {
        (g_objective, kl) = generator_step(model, batch, config, opt, rng)?;
    }
    let m = StepMetrics {
        step,
        d_objective,
        g_objective,
        kl,
        d1_real_mean,
        d1_fake_mean,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    m.validate()?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Full training run
// ---------------------------------------------------------------------------

/// Drop train-split records of the left-out (identity, expression) cell.
/// Test-split records are untouched; other identities keep the expression.
pub fn training_manifest(
    manifest: &DatasetManifest,
    left_out: Option<(usize, usize)>,
) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    if let Some((id, e)) = left_out {
        if id >= manifest.n_identities || e >= manifest.n_expressions {
            return Err(Error::Validation(format!(
                "left_out ({id}, {e}) outside ({}, {})",
                manifest.n_identities, manifest.n_expressions
            )));
        }
        out.records.retain(|r| {
            !(r.split == Split::Train && r.identity == id && r.expression == e)
        });
    }
    Ok(out)
}

#[derive(Debug)]
pub struct TrainArtifacts<F> {
    pub model: ModelBundle<F>,
    pub metrics: Vec<StepMetrics>,
    pub summaries: Vec<EpochSummary>,
    pub checkpoint_path: Option<PathBuf>,
}

struct MetricsLog {
    file: Option<std::fs::File>,
}

impl MetricsLog {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        let file = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::storage(d, e))?;
                let p = d.join(METRICS_FILE);
                Some(std::fs::File::create(&p).map_err(|e| Error::storage(&p, e))?)
            }
            None => None,
        };
        Ok(MetricsLog { file })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(record).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::storage(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

/// Train a fresh bundle on the manifest's train split. With `out_dir` set,
/// writes `metrics.jsonl` (step records interleaved with epoch summaries)
/// and `checkpoint.bin` at the configured interval and at completion. On
/// divergence the last written checkpoint is left in place and the error
/// carries the diagnostic snapshot.
pub fn train<F: Scalar>(
    manifest: &DatasetManifest,
    base_dir: &Path,
    arch: &ArchConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainArtifacts<F>> {
    arch.validate()?;
    config.validate()?;
    if manifest.n_identities != arch.n_identities
        || manifest.n_expressions != arch.n_expressions
        || manifest.image_size != (arch.image_size, arch.image_size)
    {
        return Err(Error::Validation(format!(
            "manifest ({} ids, {} exprs, {:?}) does not match architecture \
             ({} ids, {} exprs, {}px)",
            manifest.n_identities,
            manifest.n_expressions,
            manifest.image_size,
            arch.n_identities,
            arch.n_expressions,
            arch.image_size
        )));
    }

    let filtered = training_manifest(manifest, config.left_out)?;
    let data = crate::data::load_split::<F>(&filtered, base_dir, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    if config.epochs > 0 && data.len() < config.batch_size {
        return Err(Error::Validation(format!(
            "train split ({} records) smaller than one batch ({})",
            data.len(),
            config.batch_size
        )));
    }

    let mut model = build_models::<F>(arch, config.seed)?;
    let mut opt = RmsProp::<F>::new(config.learning_rate, config.rmsprop_decay);
    let mut log = MetricsLog::open(out_dir)?;
    let mut metrics = Vec::new();
    let mut summaries: Vec<EpochSummary> = Vec::new();
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let t_run = Instant::now();

    let steps_per_epoch = data.len() / config.batch_size;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut stream(config.seed, StreamKind::EpochShuffle, epoch as u64, 0));
        }
        let mut epoch_metrics = Vec::with_capacity(steps_per_epoch);
        for chunk in order.chunks_exact(config.batch_size) {
            let batch = data.subset(chunk);
            let mut rng = stream(config.seed, StreamKind::TrainStep, model.d_steps, 0);
            let m = train_step(&mut model, &batch, config, &mut opt, &mut rng)?;
            log.write(&m)?;
            epoch_metrics.push(m.clone());
            metrics.push(m);
        }

        let n = epoch_metrics.len().max(1) as f64;
        let mean = |sel: &dyn Fn(&StepMetrics) -> f64| {
            epoch_metrics.iter().map(|m| sel(m)).sum::<f64>() / n
        };
        let kl_max = epoch_metrics.iter().map(|m| m.kl).fold(0.0, f64::max);
        let mut warnings = Vec::new();
        let d1_real_mean = mean(&|m| m.d1_real_mean);
        let d1_fake_mean = mean(&|m| m.d1_fake_mean);
        if d1_real_mean > 0.98 && d1_fake_mean < 0.02 {
            warnings.push("d1_collapse".to_string());
        }
        if let Some(first) = summaries.first() {
            if kl_max > 10.0 * first.kl_max && first.kl_max > 0.0 {
                warnings.push("kl_bound_exceeded".to_string());
            }
        }
        for w in &warnings {
            log::warn!("epoch {epoch}: {w}");
        }
        let summary = EpochSummary {
            epoch,
            d_objective_mean: mean(&|m| m.d_objective),
            g_objective_mean: mean(&|m| m.g_objective),
            kl_mean: mean(&|m| m.kl),
            kl_max,
            d1_real_mean,
            d1_fake_mean,
            warnings,
        };
        log.write(&summary)?;
        summaries.push(summary);

        if let Some(p) = &ckpt_path {
            if config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0 {
                save_checkpoint(&model, p)?;
            }
        }
        log::info!(
            "epoch {epoch}: {} steps, {:.1}s elapsed",
            epoch_metrics.len(),
            t_run.elapsed().as_secs_f64()
        );
    }

    if let Some(p) = &ckpt_path {
        save_checkpoint(&model, p)?;
    }
    Ok(TrainArtifacts { model, metrics, summaries, checkpoint_path: ckpt_path })
}
