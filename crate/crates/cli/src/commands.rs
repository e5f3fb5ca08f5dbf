use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use trimetric::data::{load_dataset, save_dataset, split_train_test, synth_dataset};
use trimetric::train::train_batch_mode_from;
use trimetric::verify::{self, Layer, VerifyOptions};
use trimetric::{average_trials, ArchitectureConfig, Checkpoint, Dataset, Network, SynthSpec, TrainConfig};

use crate::config::RunConfig;
use crate::CommonArgs;

// Batch iterations use streams 0, 1, 2, ... of the seed; the other consumers sit far above.
const SYNTH_STREAM: u64 = 1 << 40;
const SPLIT_STREAM: u64 = (1 << 40) + 1;
const EVAL_SEED_OFFSET: u64 = 0x5eed;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root, overriding the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on a generated dataset with default settings when none is configured.
    #[arg(long)]
    synthetic: bool,
    /// Iteration budget.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate (default: `<out>/model.json`).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: bool,
    /// Random gallery/probe trials to average.
    #[arg(long)]
    trials: Option<usize>,
    /// Evaluate on every person instead of the held-out split.
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Corrupt one layer's backward pass (negative control for the checks).
    #[arg(long, hide = true, value_parser = parse_layer)]
    inject_fault: Option<Layer>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

fn parse_layer(s: &str) -> std::result::Result<Layer, String> {
    Layer::from_name(s).ok_or_else(|| {
        let names: Vec<_> = Layer::ALL.iter().map(|l| l.name()).collect();
        format!("unknown layer {s:?}; expected one of {}", names.join(", "))
    })
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_data_flags(cfg: &mut RunConfig, data: &Option<PathBuf>, synthetic: bool) {
    if let Some(path) = data {
        cfg.data.path = Some(path.clone());
        cfg.data.synthetic = None;
    } else if synthetic && cfg.data.path.is_none() && cfg.data.synthetic.is_none() {
        cfg.data.synthetic = Some(SynthSpec::default());
    }
}

fn load_data(cfg: &RunConfig, arch: &ArchitectureConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.data.path {
        let h = cfg.data.image_height.unwrap_or(arch.input_height);
        let w = cfg.data.image_width.unwrap_or(arch.input_width);
        return load_dataset(path, h, w).with_context(|| format!("loading {}", path.display()));
    }
    let spec = cfg.data.synthetic.clone().unwrap_or_default();
    Ok(synth_dataset(&spec, &mut stream_rng(cfg.train.seed, SYNTH_STREAM))?)
}

fn split(cfg: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut rng = stream_rng(cfg.train.seed, SPLIT_STREAM);
    Ok(split_train_test(dataset, cfg.eval.train_fraction, &mut rng)?)
}

fn person_names(d: &Dataset) -> Vec<String> {
    d.class_ids().map(|c| d.class_name(c).to_string()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

#[derive(Serialize)]
struct SplitRecord {
    train: Vec<String>,
    test: Vec<String>,
}

pub fn train(common: &CommonArgs, args: &TrainArgs) -> Result<u8> {
    let mut cfg = base_config(common)?;
    apply_data_flags(&mut cfg, &args.data, args.synthetic);
    if let Some(n) = args.iterations {
        cfg.train.max_iterations = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    let arch = cfg.arch.resolve()?;
    create_out(&cfg.out)?;

    let dataset = load_data(&cfg, &arch)?;
    let (train_set, test_set) = split(&cfg, &dataset)?;
    info!(
        "{} images of {} persons: {} persons for training, {} held out",
        dataset.len(),
        dataset.num_classes(),
        train_set.num_classes(),
        test_set.num_classes()
    );
    write_json(&cfg.out.join("config.json"), &cfg)?;
    write_json(
        &cfg.out.join("split.json"),
        &SplitRecord { train: person_names(&train_set), test: person_names(&test_set) },
    )?;

    let (mut net, start) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.network.config() != &arch {
                return Err(trimetric::Error::Config(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                ))
                .into());
            }
            info!("resuming from {} at iteration {}", path.display(), ckpt.iteration);
            (ckpt.network, ckpt.iteration)
        }
        None => (Network::initialized(arch, cfg.train.seed)?, 0),
    };

    let log_path = cfg.out.join("train_log.jsonl");
    let log_file = if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let model_path = cfg.out.join("model.json");

    let mut t = start;
    let mut converged = false;
    let mut last = None;
    while t < cfg.train.max_iterations && !converged {
        let end = (t + cfg.checkpoint_every).min(cfg.train.max_iterations);
        let chunk = TrainConfig { max_iterations: end, ..cfg.train.clone() };
        let mut write_err = None;
        let outcome = train_batch_mode_from(&train_set, net, &chunk, &cfg.augment, t, |r| {
            if r.iteration % 10 == 0 {
                info!("iteration {}: objective {:.4}, {} violated", r.iteration, r.objective, r.violations);
            }
            let line = serde_json::to_string(r).expect("report serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(e).with_context(|| format!("writing {}", log_path.display()));
        }
        net = outcome.network;
        converged = outcome.converged;
        if let Some(r) = outcome.reports.last() {
            t = r.iteration + 1;
            last = Some(r.clone());
        }
        log.flush()?;
        Checkpoint { network: net.clone(), iteration: t }.save(&model_path)?;
    }
    if last.is_none() {
        Checkpoint { network: net, iteration: t }.save(&model_path)?;
    }

    match (&last, converged) {
        (Some(r), true) => println!("converged at iteration {} with {} violated triplets", r.iteration, r.violations),
        (Some(r), false) => {
            warn!("iteration budget exhausted before convergence");
            println!("stopped at iteration {} with {} violated triplets", r.iteration, r.violations)
        }
        (None, _) => println!("no iterations to run"),
    }
    println!("model written to {}", model_path.display());
    Ok(0)
}

pub fn eval(common: &CommonArgs, args: &EvalArgs) -> Result<u8> {
    let mut cfg = base_config(common)?;
    apply_data_flags(&mut cfg, &args.data, args.synthetic);
    if let Some(n) = args.trials {
        cfg.eval.trials = n;
    }
    cfg.validate()?;
    let model_path = args.model.clone().unwrap_or_else(|| cfg.out.join("model.json"));
    let ckpt = Checkpoint::load(&model_path)?;
    let net = ckpt.network;
    if net.config() != &cfg.arch.resolve()? {
        warn!("configured architecture differs from the checkpoint's; using the checkpoint's");
    }
    create_out(&cfg.out)?;

    let dataset = load_data(&cfg, net.config())?;
    let test = if args.all { dataset } else { split(&cfg, &dataset)?.1 };
    info!("evaluating on {} images of {} persons", test.len(), test.num_classes());
    let curve = average_trials(
        &net,
        &test,
        &cfg.augment,
        cfg.eval.trials,
        cfg.eval.max_rank,
        cfg.train.seed.wrapping_add(EVAL_SEED_OFFSET),
    )?;
    if !curve.is_monotone() {
        return Err(trimetric::Error::Contract("CMC curve is not monotone".into()).into());
    }
    let summary = curve.summary()?;
    let csv_path = cfg.out.join("cmc.csv");
    fs::write(&csv_path, curve.to_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    write_json(&cfg.out.join("cmc_summary.json"), &summary)?;
    println!("top1\ttop5\ttop10\ttop15\ttop20\ttop30");
    println!(
        "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
        summary.top1, summary.top5, summary.top10, summary.top15, summary.top20, summary.top30
    );
    Ok(0)
}

pub fn verify(common: &CommonArgs, args: &VerifyArgs) -> Result<u8> {
    let seed = match &common.config {
        Some(path) => RunConfig::load(path)?.train.seed,
        None => 0,
    };
    let seed = common.seed.unwrap_or(seed);
    let report = verify::run(&VerifyOptions { seed, fault: args.inject_fault })?;
    print!("{report}");
    if let Some(out) = &common.out {
        create_out(out)?;
        write_json(&out.join("verify.json"), &report)?;
    }
    if report.passed() {
        println!("all checks passed");
        Ok(0)
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        eprintln!("verification failed: {}", failed.join("; "));
        Ok(1)
    }
}

pub fn synth(common: &CommonArgs, args: &SynthArgs) -> Result<u8> {
    let mut cfg = base_config(common)?;
    let mut spec = cfg.data.synthetic.take().unwrap_or_default();
    if let Some(v) = args.classes {
        spec.num_classes = v;
    }
    if let Some(v) = args.per_class {
        spec.images_per_class = v;
    }
    if let Some(v) = args.noise {
        spec.noise_level = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    spec.validate()?;
    let dataset = synth_dataset(&spec, &mut stream_rng(cfg.train.seed, SYNTH_STREAM))?;
    create_out(&cfg.out)?;
    save_dataset(&dataset, &cfg.out)?;
    println!(
        "wrote {} images of {} persons to {}",
        dataset.len(),
        dataset.num_classes(),
        cfg.out.display()
    );
    Ok(0)
}
