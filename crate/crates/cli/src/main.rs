//! Pipeline entry point. Four subcommands cover the full experiment cycle:
//! `data` renders the procedural corpus, `train` fits the identity-replacing
//! model, `attack` measures re-identification risk, `synth` emits image
//! applications. Every run drops a `run.json` with the resolved config.
//!
//! Exit codes: 1 validation/config, 2 file or image I/O, 3 numeric
//! divergence, 4 checkpoint or manifest mismatch, 5 invalid synth arguments.

mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_left_out, ExperimentConfig};
use veilface_core::attack::{
    run_random_baseline, run_scenario_1, run_scenario_2, run_scenario_3, run_unconstrained,
    write_summary_csv, AttackReport,
};
use veilface_core::data::toyfaces::generate_toyfaces;
use veilface_core::data::{load_png, save_png, split_dataset, DatasetManifest, Split};
use veilface_core::nets::ModelBundle;
use veilface_core::synth::{
    apply_mask, complete, compose_grid, morph, replace_identity_row, sample_from_prior,
    MaskRegion, MaskSpec,
};
use veilface_core::train::{load_checkpoint, train, METRICS_FILE};
use veilface_core::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "veilface", version, about = "Identity-replacing face synthesis pipeline")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file, applied before any flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for this command's artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Global seed driving corpus, training, and attack streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(flatten)]
    overrides: Overrides,
}

/// Per-field flags mirroring the config file keys; a flag wins over the file.
#[derive(clap::Args)]
struct Overrides {
    #[arg(long, global = true, help_heading = "Corpus")]
    n_identities: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus")]
    n_expressions: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus")]
    samples_per_cell: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus")]
    image_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Corpus")]
    jitter_position: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus")]
    jitter_scale: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus")]
    jitter_color: Option<f64>,
    #[arg(long, global = true, help_heading = "Corpus")]
    train_fraction: Option<f64>,

    #[arg(long, global = true, help_heading = "Architecture")]
    base_channels: Option<usize>,
    #[arg(long, global = true, help_heading = "Architecture")]
    latent_dim: Option<usize>,
    #[arg(long, global = true, help_heading = "Architecture")]
    leaky_slope: Option<f64>,
    #[arg(long, global = true, help_heading = "Architecture")]
    scale_factor: Option<usize>,

    #[arg(long, global = true, help_heading = "Training")]
    epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    learning_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    rmsprop_decay: Option<f64>,
    /// Generator updates per discriminator update.
    #[arg(long = "g-per-d", global = true, help_heading = "Training")]
    g_per_d: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    checkpoint_interval: Option<usize>,
    /// `identity,expression` cell to exclude from training, or `none`.
    #[arg(long, global = true, help_heading = "Training")]
    left_out: Option<String>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_d1: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_d2: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_d3: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_g1: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_g2: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_g3: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    lambda_g4: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    non_saturating: Option<bool>,
    #[arg(long, global = true, help_heading = "Training")]
    disc_labels_on_fake: Option<bool>,

    #[arg(long, global = true, help_heading = "Attack")]
    attack_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "Attack")]
    attack_batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Attack")]
    attack_learning_rate: Option<f64>,
    #[arg(long, global = true, help_heading = "Attack")]
    attack_rmsprop_decay: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural face corpus and write its split manifest.
    Data,
    /// Train the model on a manifest; writes checkpoint, metrics, loss curve.
    Train {
        /// Manifest CSV; images load from its directory.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run attack scenarios against a checkpoint; writes reports and a CSV.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma list from: unconstrained, random, 1, 2, 3.
        #[arg(long, default_value = "unconstrained,random,1,2,3")]
        scenarios: String,
    },
    /// Image applications of a trained checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(subcommand)]
        mode: SynthMode,
    },
}

#[derive(Subcommand)]
enum SynthMode {
    /// Re-render one input under every identity code (grid: input + codes).
    Replace {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode latents drawn from the prior; one row per sample. Without
    /// --code each row spans every identity code.
    Prior {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        code: Option<usize>,
    },
    /// Interpolate between two inputs in latent space under one code.
    Morph {
        #[arg(long)]
        input_a: PathBuf,
        #[arg(long)]
        input_b: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        code: usize,
    },
    /// Resynthesize a masked region of a query image (its own identity code).
    Complete {
        #[arg(long)]
        input: PathBuf,
        /// upper_face or mouth.
        #[arg(long, default_value = "mouth")]
        mask: String,
        #[arg(long, default_value_t = 0)]
        code: usize,
    },
}

fn resolve_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    let o = &args.overrides;
    macro_rules! take {
        ($($field:ident),* $(,)?) => {
            $(if let Some(v) = o.$field { cfg.$field = v; })*
        };
    }
    take!(
        n_identities, n_expressions, samples_per_cell, image_size, jitter_position,
        jitter_scale, jitter_color, train_fraction, base_channels, latent_dim, leaky_slope,
        scale_factor, epochs, batch_size, learning_rate, rmsprop_decay, checkpoint_interval,
        lambda_d1, lambda_d2, lambda_d3, lambda_g1, lambda_g2, lambda_g3, lambda_g4,
        non_saturating, disc_labels_on_fake, attack_epochs, attack_batch_size,
        attack_learning_rate, attack_rmsprop_decay,
    );
    if let Some(v) = o.g_per_d {
        cfg.g_steps_per_d_step = v;
    }
    if let Some(s) = &o.left_out {
        cfg.left_out = parse_left_out(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Record the resolved config plus command arguments for reproducibility.
fn write_run_json(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    args: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
    let doc = serde_json::json!({ "command": command, "args": args, "config": cfg });
    let text = serde_json::to_string_pretty(&doc).expect("run record serializes");
    let path = out.join("run.json");
    std::fs::write(&path, text + "\n").map_err(|e| Error::storage(&path, e))
}

fn manifest_base(manifest_path: &Path) -> PathBuf {
    match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_run_json(out, "data", cfg, serde_json::json!({}))?;
    let generated = generate_toyfaces(&cfg.toyfaces_spec(), out)?;
    let mut manifest = split_dataset(&generated, cfg.train_fraction, cfg.seed)?;
    manifest.left_out = cfg.left_out;
    let path = out.join("manifest.csv");
    manifest.save(&path)?;

    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for r in &manifest.records {
        let cell = cells.entry((r.identity, r.expression)).or_default();
        match r.split {
            Split::Train => cell.0 += 1,
            Split::Test => cell.1 += 1,
        }
    }
    println!("wrote {} images under {}", manifest.records.len(), out.display());
    println!(
        "split: {} train / {} test (fraction {})",
        manifest.split_records(Split::Train).count(),
        manifest.split_records(Split::Test).count(),
        cfg.train_fraction
    );
    println!("per-cell train/test counts (rows: identity, cols: expression):");
    for i in 0..manifest.n_identities {
        let row: Vec<String> = (0..manifest.n_expressions)
            .map(|e| {
                let (tr, te) = cells.get(&(i, e)).copied().unwrap_or((0, 0));
                format!("{tr}/{te}")
            })
            .collect();
        println!("  identity {i}: {}", row.join(" "));
    }
    if let Some((i, e)) = manifest.left_out {
        println!("left-out cell recorded: identity {i}, expression {e}");
    }
    println!("manifest: {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    write_run_json(out, "train", cfg, serde_json::json!({ "manifest": manifest_path }))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let (h, w) = manifest.image_size;
    if h != w {
        return Err(Error::Validation(format!("square images required, manifest has {h}x{w}")));
    }
    let mut arch = cfg.arch();
    arch.image_size = h;
    arch.n_identities = manifest.n_identities;
    arch.n_expressions = manifest.n_expressions;
    let mut train_cfg = cfg.train_config();
    if train_cfg.left_out.is_none() {
        if let Some(cell) = manifest.left_out {
            log::info!("adopting left-out cell {cell:?} from manifest metadata");
            train_cfg.left_out = Some(cell);
        }
    }

    let artifacts =
        train::<Real>(&manifest, &manifest_base(manifest_path), &arch, &train_cfg, Some(out))?;

    let curve_path = out.join("loss_curve.csv");
    let mut curve = std::fs::File::create(&curve_path).map_err(|e| Error::storage(&curve_path, e))?;
    writeln!(
        curve,
        "epoch,d_objective_mean,g_objective_mean,kl_mean,kl_max,d1_real_mean,d1_fake_mean,warnings"
    )
    .map_err(|e| Error::storage(&curve_path, e))?;
    for s in &artifacts.summaries {
        writeln!(
            curve,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            s.epoch,
            s.d_objective_mean,
            s.g_objective_mean,
            s.kl_mean,
            s.kl_max,
            s.d1_real_mean,
            s.d1_fake_mean,
            s.warnings.join(";")
        )
        .map_err(|e| Error::storage(&curve_path, e))?;
    }

    let model = &artifacts.model;
    println!(
        "trained {} epochs: {} discriminator steps, {} generator steps",
        train_cfg.epochs, model.d_steps, model.g_steps
    );
    if let Some(s) = artifacts.summaries.last() {
        println!(
            "final epoch means: D {:.4}, G {:.4}, KL {:.4}, D1 real {:.3} / fake {:.3}",
            s.d_objective_mean, s.g_objective_mean, s.kl_mean, s.d1_real_mean, s.d1_fake_mean
        );
    }
    let warned: usize = artifacts.summaries.iter().map(|s| s.warnings.len()).sum();
    if warned > 0 {
        println!("warnings raised in {warned} epoch summaries (see loss curve)");
    }
    if let Some(p) = &artifacts.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    println!("metrics: {} ({} steps)", out.join(METRICS_FILE).display(), artifacts.metrics.len());
    println!("loss curve: {}", curve_path.display());
    Ok(())
}

fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    scenarios: &str,
    out: &Path,
) -> Result<()> {
    write_run_json(
        out,
        "attack",
        cfg,
        serde_json::json!({
            "checkpoint": checkpoint,
            "manifest": manifest_path,
            "scenarios": scenarios,
        }),
    )?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let model: ModelBundle<Real> = load_checkpoint(checkpoint)?;
    let a = &model.arch;
    if a.n_identities != manifest.n_identities
        || a.n_expressions != manifest.n_expressions
        || (a.image_size, a.image_size) != manifest.image_size
    {
        return Err(Error::Checkpoint(format!(
            "checkpoint ({} identities, {} expressions, {}px) does not match manifest \
             ({} identities, {} expressions, {:?})",
            a.n_identities,
            a.n_expressions,
            a.image_size,
            manifest.n_identities,
            manifest.n_expressions,
            manifest.image_size
        )));
    }

    let base = manifest_base(manifest_path);
    let attack_cfg = cfg.attack_config();
    let checkpoint_ref = checkpoint.display().to_string();
    let mut reports: Vec<AttackReport> = Vec::new();
    for token in scenarios.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let report = match token {
            "unconstrained" => run_unconstrained::<Real>(&manifest, &base, a, &attack_cfg)?,
            "random" => run_random_baseline(&manifest),
            "1" => run_scenario_1(&model, &manifest, &base, &attack_cfg, &checkpoint_ref)?,
            "2" => run_scenario_2(&model, &manifest, &base, &attack_cfg, &checkpoint_ref)?,
            "3" => run_scenario_3(&model, &manifest, &base, &attack_cfg, &checkpoint_ref)?,
            other => {
                return Err(Error::Validation(format!(
                    "unknown scenario {other:?} (expected unconstrained, random, 1, 2, 3)"
                )))
            }
        };
        let path = out.join(format!("report_{}.json", report.scenario.as_str()));
        report.save_json(&path)?;
        println!(
            "{:>15}: identification {:.4}, expression {:.4} ({} train, {} test)",
            report.scenario.as_str(),
            report.identification_ccr,
            report.expression_ccr,
            report.n_train,
            report.n_test
        );
        reports.push(report);
    }
    let csv_path = out.join("summary.csv");
    write_summary_csv(&reports, &csv_path)?;
    println!("summary: {}", csv_path.display());
    Ok(())
}

fn save_numbered<'a>(
    out: &Path,
    stem: &str,
    images: impl IntoIterator<Item = &'a ndarray::Array3<Real>>,
) -> Result<Vec<PathBuf>> {
    images
        .into_iter()
        .enumerate()
        .map(|(k, img)| {
            let path = out.join(format!("{stem}_{k:02}.png"));
            save_png(&path, img)?;
            Ok(path)
        })
        .collect()
}

fn cmd_synth(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    mode: &SynthMode,
    out: &Path,
) -> Result<()> {
    let model: ModelBundle<Real> = load_checkpoint(checkpoint)?;
    match mode {
        SynthMode::Replace { input } => {
            write_run_json(
                out,
                "synth",
                cfg,
                serde_json::json!({ "checkpoint": checkpoint, "mode": "replace", "input": input }),
            )?;
            let img = load_png::<Real>(input)?;
            let row = replace_identity_row(&model, &img)?;
            let paths = save_numbered(out, "replace", &row)?;
            let mut tiles = vec![img];
            tiles.extend(row);
            let grid_path = out.join("replace_grid.png");
            save_png(&grid_path, &compose_grid(&tiles, tiles.len())?)?;
            println!("replaced identity across {} codes: {} variants", paths.len(), paths.len());
            println!("grid (input first): {}", grid_path.display());
        }
        SynthMode::Prior { count, code } => {
            write_run_json(
                out,
                "synth",
                cfg,
                serde_json::json!({
                    "checkpoint": checkpoint, "mode": "prior", "count": count, "code": code,
                }),
            )?;
            if *count == 0 {
                return Err(Error::Validation("prior sampling needs count >= 1".into()));
            }
            let codes: Vec<usize> = match code {
                Some(c) => vec![*c],
                None => (0..model.arch.n_identities).collect(),
            };
            let mut tiles = Vec::new();
            for k in 0..*count {
                let sample_seed = cfg.seed.wrapping_add(k as u64);
                for &c in &codes {
                    let img = sample_from_prior(&model, c, sample_seed)?;
                    let path = out.join(format!("prior_{k:02}_c{c:02}.png"));
                    save_png(&path, &img)?;
                    tiles.push(img);
                }
            }
            let grid_path = out.join("prior_grid.png");
            save_png(&grid_path, &compose_grid(&tiles, codes.len())?)?;
            println!(
                "sampled {count} latents from the prior under {} identity code(s)",
                codes.len()
            );
            println!("grid (one row per sample): {}", grid_path.display());
        }
        SynthMode::Morph { input_a, input_b, steps, code } => {
            write_run_json(
                out,
                "synth",
                cfg,
                serde_json::json!({
                    "checkpoint": checkpoint, "mode": "morph",
                    "input_a": input_a, "input_b": input_b, "steps": steps, "code": code,
                }),
            )?;
            let a = load_png::<Real>(input_a)?;
            let b = load_png::<Real>(input_b)?;
            let frames = morph(&model, &a, &b, *code, *steps)?;
            save_numbered(out, "morph", &frames)?;
            let strip_path = out.join("morph_strip.png");
            save_png(&strip_path, &compose_grid(&frames, frames.len())?)?;
            println!("morphed {steps} frames under identity code {code}");
            println!("strip (sources at the ends): {}", strip_path.display());
        }
        SynthMode::Complete { input, mask, code } => {
            write_run_json(
                out,
                "synth",
                cfg,
                serde_json::json!({
                    "checkpoint": checkpoint, "mode": "complete",
                    "input": input, "mask": mask, "code": code,
                }),
            )?;
            let query = load_png::<Real>(input)?;
            let spec = MaskSpec::Named(MaskRegion::parse(mask)?);
            let (_, h, w) = query.dim();
            let masked = apply_mask(&query, &spec.materialize(h, w)?);
            let result = complete(&model, &query, &spec, *code)?;
            save_png(&out.join("complete_original.png"), &query)?;
            save_png(&out.join("complete_masked.png"), &masked)?;
            save_png(&out.join("complete_result.png"), &result)?;
            let grid_path = out.join("complete_grid.png");
            save_png(&grid_path, &compose_grid(&[query, masked, result], 3)?)?;
            println!("completed {mask} region under identity code {code}");
            println!("triptych (original, masked, completed): {}", grid_path.display());
        }
    }
    Ok(())
}

fn run(args: &Args) -> Result<()> {
    let cfg = resolve_config(args)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::storage(&out, e))?;
    match &args.command {
        Command::Data => cmd_data(&cfg, &out),
        Command::Train { manifest } => cmd_train(&cfg, manifest, &out),
        Command::Attack { checkpoint, manifest, scenarios } => {
            cmd_attack(&cfg, checkpoint, manifest, scenarios, &out)
        }
        Command::Synth { checkpoint, mode } => cmd_synth(&cfg, checkpoint, mode, &out),
    }
}

fn exit_code(command: &Command, err: &Error) -> u8 {
    let arg_class = matches!(
        err,
        Error::Validation(_) | Error::Stratification(_) | Error::Config(_)
    );
    match err {
        _ if arg_class && matches!(command, Command::Synth { .. }) => 5,
        _ if arg_class => 1,
        Error::Storage { .. } | Error::Image { .. } => 2,
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            // help/version requests exit 0; genuine usage errors are
            // validation failures
            let failed = e.use_stderr();
            e.print().expect("clap writes its own message");
            return if failed { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&args.command, &e))
        }
    }
}
