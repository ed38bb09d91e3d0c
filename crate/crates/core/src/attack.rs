//! Privacy and utility evaluation. Attacker classifiers are trained against
//! a frozen protected model under three knowledge levels, plus an
//! unconstrained baseline on raw images and an analytic chance baseline:
//!
//! - scenario I: attacker trains on raw images, probes protected test images;
//! - scenario II: attacker trains on protected training images with known
//!   source labels, probes protected test images;
//! - scenario III: attacker reads encoder means directly and trains a
//!   fully-connected classifier on them.
//!
//! In every scenario the identification truth is the probe's ORIGINAL
//! identity (never the replacement code), and the expression truth is the
//! source image's expression.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{load_split, DatasetManifest, LoadedDataset, Split};
use crate::error::{Error, Result};
use crate::nets::layers::softmax_rows;
use crate::nets::{ArchConfig, MlpClassifier, ModelBundle, TrunkClassifier};
use crate::rng::{stream, StreamKind};
use crate::scalar::Scalar;
use crate::train::RmsProp;

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "unconstrained")]
    Unconstrained,
    #[serde(rename = "random_baseline")]
    RandomBaseline,
    I,
    II,
    III,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Unconstrained => "unconstrained",
            Scenario::RandomBaseline => "random_baseline",
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: Scenario,
    pub identification_ccr: f64,
    pub expression_ccr: f64,
    /// Attacker training set size after any expansion.
    pub n_train: usize,
    /// Probe count after any expansion.
    pub n_test: usize,
    /// "conv_trunk", "latent_mlp", or "analytic".
    pub attacker: String,
    pub seed: u64,
    /// Provenance of the protected model ("none" for model-free rows).
    pub checkpoint: String,
}

impl AttackReport {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("identification_ccr", self.identification_ccr),
            ("expression_ccr", self.expression_ccr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!("{n} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::storage(path, e))
    }
}

/// Aggregate table, one row per report, mirroring the privacy/utility grid.
pub fn write_summary_csv(reports: &[AttackReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::storage(path, std::io::Error::other(e)))?;
    w.write_record([
        "scenario",
        "identification_ccr",
        "expression_ccr",
        "n_train",
        "n_test",
        "attacker",
    ])
    .map_err(|e| Error::storage(path, std::io::Error::other(e)))?;
    for r in reports {
        r.validate()?;
        w.write_record([
            r.scenario.as_str(),
            &format!("{:.6}", r.identification_ccr),
            &format!("{:.6}", r.expression_ccr),
            &r.n_train.to_string(),
            &r.n_test.to_string(),
            &r.attacker,
        ])
        .map_err(|e| Error::storage(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::storage(path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            // must comfortably outlast the batch-norm running-stat horizon
            // (~100 batches); the weights themselves plateau much earlier
            epochs: 80,
            batch_size: 64,
            learning_rate: 0.0002,
            rmsprop_decay: 0.9,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Validation("attack epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation("attack batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("attack learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Validation("attack rmsprop_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

/// Fraction of positions where `predicted == truth`.
pub fn ccr(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::Validation(format!(
            "ccr needs equal nonempty label lists, got {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Identity-replaced image: decode the deterministic encoder mean under the
/// chosen identity code.
pub fn protect<F: Scalar>(
    model: &ModelBundle<F>,
    image: &Array3<F>,
    code: usize,
) -> Result<Array3<F>> {
    crate::synth::replace_identity(model, image, code)
}

/// [`protect`] over a whole batch with one shared identity code.
pub fn protect_batch<F: Scalar>(
    model: &ModelBundle<F>,
    images: &Array4<F>,
    code: usize,
) -> Result<Array4<F>> {
    crate::synth::replace_identity_batch(model, images, code)
}

/// Every record re-rendered under every identity code: output length is
/// `n_identities * input length`, grouped by code. Labels stay those of the
/// SOURCE record; replacement codes are never the truth.
pub fn expand_protected<F: Scalar>(
    model: &ModelBundle<F>,
    data: &LoadedDataset<F>,
) -> Result<LoadedDataset<F>> {
    let n_id = model.arch.n_identities;
    let n = data.len();
    let (_, c, h, w) = data.images.dim();
    let means = model.encode(&data.images)?.mode();
    let mut images = Array4::zeros((n_id * n, c, h, w));
    let mut identities = Vec::with_capacity(n_id * n);
    let mut expressions = Vec::with_capacity(n_id * n);
    for code in 0..n_id {
        let codes = crate::data::one_hot_batch::<F>(&vec![code; n], n_id)?;
        let block = model.decode(&means, &codes)?;
        images.slice_mut(ndarray::s![code * n..(code + 1) * n, .., .., ..]).assign(&block);
        identities.extend_from_slice(&data.identities);
        expressions.extend_from_slice(&data.expressions);
    }
    Ok(LoadedDataset { images, identities, expressions })
}

// ---------------------------------------------------------------------------
// Attacker training harness
// ---------------------------------------------------------------------------

/// Mean cross-entropy over softmaxed logits and its logit gradient.
fn cross_entropy_grads<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    let b = logits.nrows();
    let probs = softmax_rows(logits);
    let bf = F::from_usize(b).unwrap();
    let floor = F::from_f64c(1e-12);
    let mut grads = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(floor).ln().to_f64c();
        grads[[i, y]] -= F::one();
    }
    grads.mapv_inplace(|v| v / bf);
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("attacker cross-entropy diverged: {loss}")));
    }
    Ok((loss, grads))
}

fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .unwrap()
                .0
        })
        .collect()
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let eff = batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks_exact(eff).map(|c| c.to_vec()).collect()
}

/// Train a conv-trunk image classifier; `tag` keys the RNG streams so each
/// (scenario, label kind) pair trains independently.
fn train_trunk_classifier<F: Scalar>(
    arch: &ArchConfig,
    n_classes: usize,
    data: &LoadedDataset<F>,
    labels: &[usize],
    cfg: &AttackConfig,
    tag: u64,
) -> Result<TrunkClassifier<F>> {
    let mut clf = TrunkClassifier::new(&mut stream(cfg.seed, StreamKind::AttackInit, tag, 0), arch, n_classes);
    let mut opt = RmsProp::<F>::new(cfg.learning_rate, cfg.rmsprop_decay);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, StreamKind::AttackShuffle, tag, epoch as u64);
        for idxs in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let batch = data.subset(&idxs);
            let batch_labels: Vec<usize> = idxs.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = clf.forward_train(&batch.images);
            let (_, dlogits) = cross_entropy_grads(&logits, &batch_labels)?;
            clf.backward(&cache, &dlogits);
            clf.apply_bn_momentum(&cache);
            clf.for_each_param(&mut |n, p| opt.update(n, p));
        }
    }
    Ok(clf)
}

fn train_mlp_classifier<F: Scalar>(
    arch: &ArchConfig,
    n_classes: usize,
    x: &Array2<F>,
    labels: &[usize],
    cfg: &AttackConfig,
    tag: u64,
) -> Result<MlpClassifier<F>> {
    let mut clf = MlpClassifier::new(
        &mut stream(cfg.seed, StreamKind::AttackInit, tag, 0),
        arch.latent_dim,
        arch.trunk_width(),
        n_classes,
        arch.leaky_slope,
    );
    let mut opt = RmsProp::<F>::new(cfg.learning_rate, cfg.rmsprop_decay);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, StreamKind::AttackShuffle, tag, epoch as u64);
        for idxs in epoch_batches(x.nrows(), cfg.batch_size, &mut rng) {
            let xb = x.select(Axis(0), &idxs);
            let batch_labels: Vec<usize> = idxs.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = clf.forward_train(&xb);
            let (_, dlogits) = cross_entropy_grads(&logits, &batch_labels)?;
            clf.backward(&cache, &dlogits);
            clf.for_each_param(&mut |n, p| opt.update(n, p));
        }
    }
    Ok(clf)
}

/// Inference in bounded chunks to keep convolution workspaces small.
fn predict_trunk<F: Scalar>(clf: &TrunkClassifier<F>, images: &Array4<F>) -> Vec<usize> {
    let n = images.dim().0;
    let mut out = Vec::with_capacity(n);
    let chunk = 128;
    let mut i = 0;
    while i < n {
        let j = (i + chunk).min(n);
        let logits = clf.forward_infer(&images.slice(ndarray::s![i..j, .., .., ..]).to_owned());
        out.extend(argmax_rows(&logits));
        i = j;
    }
    out
}

/// Train an expression classifier on raw images and return its predictions
/// for `probe`. Uses the same conv-trunk attacker architecture; intended as
/// an independent judge of synthesized expressions.
pub fn expression_judge_predictions<F: Scalar>(
    arch: &ArchConfig,
    train: &LoadedDataset<F>,
    probe: &Array4<F>,
    cfg: &AttackConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let clf = train_trunk_classifier(
        arch,
        arch.n_expressions,
        train,
        &train.expressions,
        cfg,
        8,
    )?;
    Ok(predict_trunk(&clf, probe))
}

/// Train identity and expression conv-trunk attackers on one dataset and
/// score them on another.
fn conv_attack<F: Scalar>(
    arch: &ArchConfig,
    train: &LoadedDataset<F>,
    probe: &LoadedDataset<F>,
    cfg: &AttackConfig,
    scenario_tag: u64,
) -> Result<(f64, f64)> {
    let id_clf = train_trunk_classifier(
        arch,
        arch.n_identities,
        train,
        &train.identities,
        cfg,
        scenario_tag * 2,
    )?;
    let ex_clf = train_trunk_classifier(
        arch,
        arch.n_expressions,
        train,
        &train.expressions,
        cfg,
        scenario_tag * 2 + 1,
    )?;
    let id_ccr = ccr(&predict_trunk(&id_clf, &probe.images), &probe.identities)?;
    let ex_ccr = ccr(&predict_trunk(&ex_clf, &probe.images), &probe.expressions)?;
    Ok((id_ccr, ex_ccr))
}

fn require_trained<F: Scalar>(model: &ModelBundle<F>) -> Result<()> {
    if model.d_steps == 0 || model.g_steps == 0 {
        return Err(Error::Validation(
            "protected model has no recorded training steps; train it first".into(),
        ));
    }
    Ok(())
}

fn load_both<F: Scalar>(
    manifest: &DatasetManifest,
    base: &Path,
) -> Result<(LoadedDataset<F>, LoadedDataset<F>)> {
    let train = load_split::<F>(manifest, base, Split::Train)?;
    let test = load_split::<F>(manifest, base, Split::Test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("attack needs nonempty train and test splits".into()));
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Scenario runners
// ---------------------------------------------------------------------------

/// Chance-level reference rates, computed analytically.
pub fn run_random_baseline(manifest: &DatasetManifest) -> AttackReport {
    let n_test = manifest.split_records(Split::Test).count();
    AttackReport {
        scenario: Scenario::RandomBaseline,
        identification_ccr: 1.0 / manifest.n_identities as f64,
        expression_ccr: 1.0 / manifest.n_expressions as f64,
        n_train: 0,
        n_test,
        attacker: "analytic".into(),
        seed: 0,
        checkpoint: "none".into(),
    }
}

/// Raw-image attacker: upper bound on both rates without any protection.
pub fn run_unconstrained<F: Scalar>(
    manifest: &DatasetManifest,
    base: &Path,
    arch: &ArchConfig,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    cfg.validate()?;
    let (train, test) = load_both::<F>(manifest, base)?;
    let (identification_ccr, expression_ccr) = conv_attack(arch, &train, &test, cfg, 0)?;
    Ok(AttackReport {
        scenario: Scenario::Unconstrained,
        identification_ccr,
        expression_ccr,
        n_train: train.len(),
        n_test: test.len(),
        attacker: "conv_trunk".into(),
        seed: cfg.seed,
        checkpoint: "none".into(),
    })
}

/// Attacker sees raw training data; probes are protected test images under
/// every identity code.
pub fn run_scenario_1<F: Scalar>(
    model: &ModelBundle<F>,
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &AttackConfig,
    checkpoint_ref: &str,
) -> Result<AttackReport> {
    cfg.validate()?;
    require_trained(model)?;
    let (train, test) = load_both::<F>(manifest, base)?;
    let probes = expand_protected(model, &test)?;
    let (identification_ccr, expression_ccr) = conv_attack(&model.arch, &train, &probes, cfg, 1)?;
    Ok(AttackReport {
        scenario: Scenario::I,
        identification_ccr,
        expression_ccr,
        n_train: train.len(),
        n_test: probes.len(),
        attacker: "conv_trunk".into(),
        seed: cfg.seed,
        checkpoint: checkpoint_ref.into(),
    })
}

/// Attacker sees protected training images with their source labels.
pub fn run_scenario_2<F: Scalar>(
    model: &ModelBundle<F>,
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &AttackConfig,
    checkpoint_ref: &str,
) -> Result<AttackReport> {
    cfg.validate()?;
    require_trained(model)?;
    let (train, test) = load_both::<F>(manifest, base)?;
    let train_probes = expand_protected(model, &train)?;
    let test_probes = expand_protected(model, &test)?;
    let (identification_ccr, expression_ccr) =
        conv_attack(&model.arch, &train_probes, &test_probes, cfg, 2)?;
    Ok(AttackReport {
        scenario: Scenario::II,
        identification_ccr,
        expression_ccr,
        n_train: train_probes.len(),
        n_test: test_probes.len(),
        attacker: "conv_trunk".into(),
        seed: cfg.seed,
        checkpoint: checkpoint_ref.into(),
    })
}

/// Attacker reads the encoder itself and classifies latent means; no
/// expansion anywhere.
pub fn run_scenario_3<F: Scalar>(
    model: &ModelBundle<F>,
    manifest: &DatasetManifest,
    base: &Path,
    cfg: &AttackConfig,
    checkpoint_ref: &str,
) -> Result<AttackReport> {
    cfg.validate()?;
    require_trained(model)?;
    let (train, test) = load_both::<F>(manifest, base)?;
    let f_train = model.encode(&train.images)?.mode();
    let f_test = model.encode(&test.images)?.mode();
    let id_clf =
        train_mlp_classifier(&model.arch, model.arch.n_identities, &f_train, &train.identities, cfg, 6)?;
    let ex_clf =
        train_mlp_classifier(&model.arch, model.arch.n_expressions, &f_train, &train.expressions, cfg, 7)?;
    let identification_ccr = ccr(&argmax_rows(&id_clf.forward_infer(&f_test)), &test.identities)?;
    let expression_ccr = ccr(&argmax_rows(&ex_clf.forward_infer(&f_test)), &test.expressions)?;
    Ok(AttackReport {
        scenario: Scenario::III,
        identification_ccr,
        expression_ccr,
        n_train: f_train.nrows(),
        n_test: f_test.nrows(),
        attacker: "latent_mlp".into(),
        seed: cfg.seed,
        checkpoint: checkpoint_ref.into(),
    })
}
