//! Command-line entry point: reproducible runs of dataset construction,
//! training, evaluation, ablations, the augmentation experiment, and figure
//! emission. Every run directory receives exactly one manifest.

use clap::{Args, Parser, Subcommand};
use faceforge::config::{resolve_config, resolve_out_dir, Overrides, RunManifest};
use faceforge::eval::{
    ablation_table, augmentation_experiment, augmentation_table, emit_grid,
    emit_illumination_strip, emit_interpolation_grid, evaluate_generator, generate_labeled,
    histogram_csv, run_ablation, AugmentationConfig, EvalSettings,
};
use faceforge::io;
use faceforge::losses::Eq7Sign;
use faceforge::nets::WeightSet;
use faceforge::toymm::{build_datasets, render_real, sample_params_with};
use faceforge::trainer::{
    checkpoint_load, checkpoint_save, pretrain_embedder, train_loop, RunOutputs, TrainConfig,
    TrainState,
};
use faceforge::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "faceforge",
    version,
    about = "Adversarial translation of procedural face renders into a hidden target domain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Config file (TOML); missing keys use built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root random seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to $FACEFORGE_OUT_ROOT/<command> or runs/<command>
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Image size
    #[arg(long, global = true, value_parser = ["32", "64", "108"])]
    size: Option<String>,
    /// Training iterations (overrides the config file)
    #[arg(long, global = true)]
    iters: Option<u64>,
    /// Cycle-consistency weight
    #[arg(long, global = true)]
    lambda_cyc: Option<f64>,
    /// Pair-discriminator weight
    #[arg(long, global = true)]
    lambda_dp: Option<f64>,
    /// Identity set loss weight
    #[arg(long, global = true)]
    lambda_c: Option<f64>,
    /// Pixel identity loss weight
    #[arg(long, global = true)]
    lambda_id: Option<f64>,
    /// Exponent sign convention of the identity set loss
    #[arg(long, global = true, value_parser = ["as_printed", "magnet"])]
    eq7_sign: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist the synthetic/realistic dataset bundle
    MakeData(CommonArgs),
    /// Train the identity embedder on a disjoint identity pool
    PretrainEmbedder(CommonArgs),
    /// Train the full framework
    Train(CommonArgs),
    /// Evaluate a trained checkpoint
    Evaluate(CommonArgs),
    /// Train and compare the full framework against single-term ablations
    Ablate(CommonArgs),
    /// Classifier augmentation-benefit experiment
    AugmentExp(CommonArgs),
    /// Emit interpolation and illumination image grids from a checkpoint
    EmitGrids(CommonArgs),
}

fn overrides_of(a: &CommonArgs) -> Result<Overrides> {
    Ok(Overrides {
        seed: a.seed,
        size: a.size.as_deref().map(|s| s.parse().expect("validated by clap")),
        iters: a.iters,
        lambda_cyc: a.lambda_cyc,
        lambda_dp: a.lambda_dp,
        lambda_c: a.lambda_c,
        lambda_id: a.lambda_id,
        eq7_sign: match a.eq7_sign.as_deref() {
            None => None,
            Some("as_printed") => Some(Eq7Sign::AsPrinted),
            Some("magnet") => Some(Eq7Sign::Magnet),
            Some(other) => {
                return Err(Error::Config(format!("unknown eq7 sign '{other}'")));
            }
        },
    })
}

struct Run {
    config: TrainConfig,
    out: PathBuf,
    manifest: RunManifest,
}

fn start(name: &str, args: &CommonArgs) -> Result<Run> {
    let config = resolve_config(args.config.as_deref(), &overrides_of(args)?)?;
    let out = resolve_out_dir(args.out.as_deref(), name);
    std::fs::create_dir_all(&out)?;
    let manifest = RunManifest::begin(name, config.clone(), EvalSettings::default());
    Ok(Run { config, out, manifest })
}

const EMBEDDER_FILE: &str = "embedder.bin";
const FINAL_CHECKPOINT: &str = "checkpoint_final";
const DATA_DIR: &str = "data";
const METRICS_FILE: &str = "metrics.jsonl";

fn save_embedder(path: &Path, ws: &WeightSet) -> Result<()> {
    io::write_named_f64(path, &io::weight_set_entries("embedder", ws))
}

fn load_embedder(path: &Path) -> Result<WeightSet> {
    io::weight_set_from_entries("embedder", &io::read_named_f64(path)?)
}

/// Reuse the bundle saved beside this run, or build and save it.
fn ensure_datasets(run: &mut Run) -> Result<faceforge::toymm::DatasetBundle> {
    let dir = run.out.join(DATA_DIR);
    if dir.join("manifest.json").exists() {
        let (cfg, bundle) = io::load_datasets(&dir)?;
        if cfg != run.config.data {
            return Err(Error::Config(format!(
                "dataset at {} was built from a different data config; delete it or change --out",
                dir.display()
            )));
        }
        return Ok(bundle);
    }
    let bundle = build_datasets(&run.config.data)?;
    io::save_datasets(&dir, &run.config.data, &bundle)?;
    run.manifest.record(&dir);
    // reload so a fresh build and a reused one train on identical (f32-
    // quantized) pixels
    let (_, bundle) = io::load_datasets(&dir)?;
    Ok(bundle)
}

fn ensure_embedder(run: &mut Run) -> Result<WeightSet> {
    let path = run.out.join(EMBEDDER_FILE);
    if path.exists() {
        return load_embedder(&path);
    }
    let ws = pretrain_embedder(&run.config)?;
    save_embedder(&path, &ws)?;
    run.manifest.record(&path);
    Ok(ws)
}

fn load_final_state(run: &Run) -> Result<TrainState> {
    let ckpt = run.out.join(FINAL_CHECKPOINT);
    if !ckpt.join("manifest.json").exists() {
        return Err(Error::State(format!(
            "no trained checkpoint at {}; run `faceforge train --out {}` first",
            ckpt.display(),
            run.out.display()
        )));
    }
    checkpoint_load(&ckpt)
}

fn cmd_make_data(args: &CommonArgs) -> Result<()> {
    let mut run = start("make-data", args)?;
    let bundle = ensure_datasets(&mut run)?;
    // idempotent overwrite: rebuilding must yield identical bytes
    io::save_datasets(&run.out.join(DATA_DIR), &run.config.data, &bundle)?;
    println!(
        "wrote {} synthetic, {} real, {} paired, {} held-out images to {}",
        bundle.unpaired_synthetic.len(),
        bundle.unpaired_real.len(),
        bundle.paired.len(),
        bundle.heldout.len(),
        run.out.join(DATA_DIR).display()
    );
    run.manifest.finish(&run.out)
}

fn cmd_pretrain(args: &CommonArgs) -> Result<()> {
    let mut run = start("pretrain-embedder", args)?;
    let ws = pretrain_embedder(&run.config)?;
    let path = run.out.join(EMBEDDER_FILE);
    save_embedder(&path, &ws)?;
    run.manifest.record(&path);
    println!("wrote pretrained embedder ({} parameters) to {}", ws.num_params(), path.display());
    run.manifest.finish(&run.out)
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let mut run = start("train", args)?;
    let bundle = ensure_datasets(&mut run)?;
    let embedder = ensure_embedder(&mut run)?;
    let metrics_path = run.out.join(METRICS_FILE);
    // a fresh run must not append to a previous run's log
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    let outputs = RunOutputs {
        metrics_path: Some(metrics_path.clone()),
        artifact_dir: Some(run.out.clone()),
    };
    let state = TrainState::init(&run.config, embedder)?;
    let (final_state, records) = train_loop(state, &bundle, &run.config, &outputs)?;
    let ckpt = run.out.join(FINAL_CHECKPOINT);
    checkpoint_save(&final_state, &ckpt)?;
    run.manifest.record(&metrics_path);
    run.manifest.record(&ckpt);
    if let Some(last) = records.last() {
        println!(
            "finished {} iterations; L_G {:.4}, L_cyc {:.4}, k_DR {:.4}",
            final_state.iteration, last.l_g, last.l_cyc, last.k_dr
        );
    }
    run.manifest.finish(&run.out)
}

fn cmd_evaluate(args: &CommonArgs) -> Result<()> {
    let mut run = start("evaluate", args)?;
    let bundle = ensure_datasets(&mut run)?;
    let state = load_final_state(&run)?;
    let mut settings = EvalSettings::default();
    // clamp pair counts to what the generated set can actually supply
    let mut per_id = std::collections::HashMap::new();
    for s in &bundle.unpaired_synthetic {
        *per_id.entry(s.params.identity_label).or_insert(0usize) += 1;
    }
    let total: usize = per_id.values().sum();
    let pos_cap: usize = per_id.values().map(|n| n * (n - 1) / 2).sum();
    let neg_cap = total * (total - 1) / 2 - pos_cap;
    settings.n_pos = settings.n_pos.min(pos_cap);
    settings.n_neg = settings.n_neg.min(neg_cap);
    let report =
        evaluate_generator(&run.config, &bundle, &state.ema_gen, &state.embedder, &settings)?;
    let report_path = run.out.join("eval_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let hist_path = run.out.join("distance_histogram.csv");
    std::fs::write(&hist_path, histogram_csv(&report.histogram))?;
    run.manifest.record(&report_path);
    run.manifest.record(&hist_path);
    println!(
        "accuracy {:.4}  1-EER {:.4}  oracle fidelity {:.4}",
        report.accuracy, report.one_minus_eer, report.mean_oracle_fidelity
    );
    run.manifest.finish(&run.out)
}

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let mut run = start("ablate", args)?;
    let settings = EvalSettings::default();
    let rows = run_ablation(&run.config, &settings)?;
    let path = run.out.join("ablation.jsonl");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    for row in &rows {
        io::append_jsonl(&path, row)?;
    }
    run.manifest.record(&path);
    print!("{}", ablation_table(&rows));
    run.manifest.finish(&run.out)
}

fn cmd_augment_exp(args: &CommonArgs) -> Result<()> {
    let mut run = start("augment-exp", args)?;
    let bundle = ensure_datasets(&mut run)?;
    let state = load_final_state(&run)?;
    let generated = generate_labeled(&bundle, &state.ema_gen, &run.config.generator_spec())?;

    // real train split: the bundle's unpaired real images; test split: tail
    // nuisance draws of the same identities under the same seed, so the
    // renders are unseen but the identity vectors are identical
    let real_train: Vec<_> = bundle.unpaired_real.clone();
    let d = &run.config.data;
    let extra = d.real_per_id.max(2);
    let test_params: Vec<_> = sample_params_with(
        d.seed.wrapping_add(1),
        d.real_ids,
        d.real_per_id + extra,
        d.real_id_base,
    )?
    .into_iter()
    .enumerate()
    .filter(|(i, _)| i % (d.real_per_id + extra) >= d.real_per_id)
    .map(|(_, p)| p)
    .collect();
    let real_test: Vec<_> = test_params
        .iter()
        .map(|p| Ok((p.identity_label, render_real(p, d.image_size, d.channels)?)))
        .collect::<Result<Vec<_>>>()?;

    let aug = AugmentationConfig { seed: run.config.seed, ..AugmentationConfig::default() };
    let cells = augmentation_experiment(
        &[0.2, 0.5, 1.0],
        &generated,
        &run.config,
        &aug,
        &real_train,
        &real_test,
    )?;
    let path = run.out.join("augmentation.jsonl");
    if path.exists() {
        std::fs::remove_file(&path)?;
    }
    for c in &cells {
        io::append_jsonl(&path, c)?;
    }
    run.manifest.record(&path);
    print!("{}", augmentation_table(&cells));
    run.manifest.finish(&run.out)
}

fn cmd_emit_grids(args: &CommonArgs) -> Result<()> {
    let mut run = start("emit-grids", args)?;
    let bundle = ensure_datasets(&mut run)?;
    let state = load_final_state(&run)?;
    let spec = run.config.generator_spec();
    let grids = run.out.join("grids");
    std::fs::create_dir_all(&grids)?;

    // synthetic / generated / oracle strip over held-out items
    let n = bundle.heldout.len().min(6);
    if n >= 1 {
        let synth: Vec<_> = bundle.heldout[..n].iter().map(|(_, s, _)| s.clone()).collect();
        let batch = faceforge::toymm::ImageBatch::from_images(
            &synth,
            faceforge::toymm::DomainTag::Synthetic,
            vec![0; n],
        )?;
        let gen = faceforge::nets::generator_forward(
            &batch,
            &state.ema_gen,
            &spec,
            faceforge::nets::Mode::Eval,
            0,
        )?;
        let mut tiles = Vec::new();
        for i in 0..n {
            tiles.push(bundle.heldout[i].1.clone());
            tiles.push(gen.pixels.index_axis(ndarray::Axis(0), i).to_owned());
            tiles.push(bundle.heldout[i].2.clone());
        }
        let p = grids.join("heldout_strip.png");
        emit_grid(&tiles, n, 3, &p)?;
        run.manifest.record(&p);
    }

    // identity x pose interpolation between two held-out identities
    if bundle.heldout.len() >= 2 {
        let a = &bundle.heldout[0].0;
        let b = bundle
            .heldout
            .iter()
            .map(|(p, _, _)| p)
            .find(|p| p.identity_label != a.identity_label)
            .unwrap_or(&bundle.heldout[1].0);
        let p = grids.join("interpolation.png");
        emit_interpolation_grid(a, b, 5, (-0.35, 0.35), &state.ema_gen, &spec, &p)?;
        run.manifest.record(&p);
        let q = grids.join("illumination.png");
        emit_illumination_strip(a, 6, (0.0, 1.0), &state.ema_gen, &spec, &q)?;
        run.manifest.record(&q);
    }
    println!("wrote grids to {}", grids.display());
    run.manifest.finish(&run.out)
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeData(a) => cmd_make_data(a),
        Command::PretrainEmbedder(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::AugmentExp(a) => cmd_augment_exp(a),
        Command::EmitGrids(a) => cmd_emit_grids(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
