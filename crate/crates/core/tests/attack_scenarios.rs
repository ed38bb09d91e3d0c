//! Scenario harness checks on a small corpus: expansion arithmetic, label
//! semantics, model immutability, and report determinism. Rate quality under
//! a real training budget is covered by the acceptance suite.

use std::path::Path;

use veilface_core::attack::{
    run_random_baseline, run_scenario_1, run_scenario_2, run_scenario_3, run_unconstrained,
    AttackConfig, Scenario,
};
use veilface_core::data::toyfaces::{generate_toyfaces, ToyfacesSpec};
use veilface_core::data::{split_dataset, DatasetManifest, Split};
use veilface_core::nets::{ArchConfig, ModelBundle};
use veilface_core::train::{train, TrainConfig};

fn small_arch() -> ArchConfig {
    ArchConfig {
        image_size: 16,
        base_channels: 4,
        latent_dim: 8,
        n_identities: 3,
        n_expressions: 7,
        leaky_slope: 0.2,
        scale_factor: 16,
    }
}

fn corpus_and_model(dir: &Path) -> (DatasetManifest, ModelBundle<f32>) {
    let spec = ToyfacesSpec {
        n_identities: 3,
        samples_per_cell: 4,
        image_size: 16,
        seed: 21,
        ..ToyfacesSpec::default()
    };
    let manifest = split_dataset(&generate_toyfaces(&spec, dir).unwrap(), 0.75, 21).unwrap();
    let config = TrainConfig { epochs: 1, batch_size: 16, seed: 21, ..TrainConfig::default() };
    let art = train::<f32>(&manifest, dir, &small_arch(), &config, None).unwrap();
    (manifest, art.model)
}

fn quick_attack() -> AttackConfig {
    AttackConfig { epochs: 2, batch_size: 16, seed: 5, ..AttackConfig::default() }
}

#[test]
fn scenario_counts_follow_the_expansion_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = corpus_and_model(dir.path());
    let n_train = manifest.split_records(Split::Train).count();
    let n_test = manifest.split_records(Split::Test).count();
    assert_eq!((n_train, n_test), (63, 21));
    let cfg = quick_attack();

    let r1 = run_scenario_1(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(r1.scenario, Scenario::I);
    assert_eq!(r1.n_train, n_train, "scenario I trains on raw images");
    assert_eq!(r1.n_test, 3 * n_test, "scenario I probes are identity-expanded");

    let r2 = run_scenario_2(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(r2.n_train, 3 * n_train, "scenario II trains on expanded protected images");
    assert_eq!(r2.n_test, 3 * n_test);

    let r3 = run_scenario_3(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(r3.n_train, n_train, "scenario III skips expansion");
    assert_eq!(r3.n_test, n_test);
    assert_eq!(r3.attacker, "latent_mlp");

    let ru = run_unconstrained::<f32>(&manifest, dir.path(), &small_arch(), &cfg).unwrap();
    assert_eq!(ru.n_test, n_test);
    assert_eq!(ru.checkpoint, "none");

    for r in [&r1, &r2, &r3, &ru] {
        r.validate().unwrap();
    }
    let rb = run_random_baseline(&manifest);
    assert!((rb.identification_ccr - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn attacks_never_mutate_the_protected_model() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = corpus_and_model(dir.path());
    let cfg = quick_attack();
    let before = model.part_hashes();
    run_scenario_1(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    run_scenario_2(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    run_scenario_3(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(model.part_hashes(), before);
}

#[test]
fn equal_seeds_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, model) = corpus_and_model(dir.path());
    let cfg = quick_attack();
    let a = run_scenario_1(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    let b = run_scenario_1(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let mut other = cfg.clone();
    other.seed = 6;
    let c = run_scenario_3(&model, &manifest, dir.path(), &other, "ckpt").unwrap();
    let d = run_scenario_3(&model, &manifest, dir.path(), &cfg, "ckpt").unwrap();
    assert_eq!(c.n_test, d.n_test);
}

#[test]
fn untrained_bundle_is_rejected_by_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyfacesSpec {
        n_identities: 3,
        samples_per_cell: 4,
        image_size: 16,
        seed: 21,
        ..ToyfacesSpec::default()
    };
    let manifest = split_dataset(&generate_toyfaces(&spec, dir.path()).unwrap(), 0.75, 21).unwrap();
    let fresh = veilface_core::nets::build_models::<f32>(&small_arch(), 0).unwrap();
    let cfg = quick_attack();
    assert!(run_scenario_1(&fresh, &manifest, dir.path(), &cfg, "x").is_err());
    assert!(run_scenario_2(&fresh, &manifest, dir.path(), &cfg, "x").is_err());
    assert!(run_scenario_3(&fresh, &manifest, dir.path(), &cfg, "x").is_err());
}
