//! `ctfgan`: train, sample, evaluate and inspect models.
//!
//! Exit codes: 0 success, 1 invalid input (configuration, data, labels,
//! usage), 2 runtime abort (non-finite loss or numeric failure), 3 I/O or
//! checkpoint integrity error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctfgan::config::RunConfig;
use ctfgan::data::{read_image, LabelSpaces, Tier};
use ctfgan::spectral::Resolution;
use ctfgan::train::{rng_stream, Models, ResumePolicy, RunOptions, TrainData, Trainer};
use ctfgan::{ctf, eval, io, toy, Error};

/// RNG stream used by the sampling commands; distinct from training's.
const STREAM_CLI: u64 = 4;

#[derive(Parser)]
#[command(name = "ctfgan", version, about = "Conditional transferring features GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train both phases as described by a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint bundle.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// With --resume: accept a changed schedule or feature mode and start
        /// a fresh metrics stream (the architecture must still match).
        #[arg(long, requires = "resume")]
        fork: bool,
        /// Stop after this many generator steps in total.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Skip the final evaluation report.
        #[arg(long)]
        no_eval: bool,
    },
    /// Write a grid of generated images.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        /// Class name or index; defaults to cycling through all classes.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the conditional transferring features of one low-quality image.
    ExtractCtf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label of the input image in the low-quality label space.
        #[arg(long)]
        lq_label: String,
        /// Target class in the high-quality label space.
        #[arg(long)]
        class: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the evaluation report of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Write the report here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a run configuration and its dataset without training.
    ValidateData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the synthetic two-class corpus and a configuration using it.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::LabelDomain { .. } | Error::Contract(_) | Error::Data(_) => 1,
        Error::NonFiniteLoss { .. } | Error::NumericDomain(_) | Error::Tensor(_) => 2,
        Error::Io { .. } | Error::Integrity(_) => 3,
    }
}

fn resolve_label(labels: &LabelSpaces, tier: Tier, given: &str) -> Result<usize, Error> {
    let names = labels.names(tier);
    let space = match tier {
        Tier::Hq => "high-quality",
        Tier::Lq => "low-quality",
    };
    if let Some(i) = labels.index(tier, given) {
        return Ok(i);
    }
    match given.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        Ok(i) => Err(Error::LabelDomain {
            label: i,
            size: names.len(),
            space,
        }),
        Err(_) => Err(Error::Validation(vec![format!(
            "{given:?} is not a {space} label; known labels: {}",
            names.join(", ")
        )])),
    }
}

fn label_spaces(config: &RunConfig) -> Result<LabelSpaces, Error> {
    LabelSpaces::new(config.data.hq_classes.clone(), config.data.lq_classes.clone())
}

fn train(
    config: &Path,
    resume: Option<PathBuf>,
    fork: bool,
    stop_after: Option<u64>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    no_eval: bool,
) -> Result<(), Error> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let data = TrainData::load(&cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let policy = if fork { ResumePolicy::Fork } else { ResumePolicy::Exact };
            Trainer::resume(cfg, data, &path, policy)?
        }
        None => Trainer::new(cfg, data)?,
    };
    let summary = trainer.run(RunOptions {
        stop_after,
        final_eval: !no_eval,
    })?;
    let out = &trainer.config.output_dir;
    if summary.completed {
        println!(
            "finished: {} steps ({} in phase 1); run directory {}",
            summary.global_step,
            summary.phase1_steps,
            out.display()
        );
    } else {
        println!("stopped at step {}; run directory {}", summary.global_step, out.display());
    }
    if let Some(r) = summary.report {
        println!("fid {:.6}  is {:.6} ± {:.6}", r.fid, r.is_mean, r.is_std);
    }
    if let Some(ckpt) = summary.last_checkpoint {
        println!("checkpoint {}", ckpt.display());
    }
    Ok(())
}

fn sample(checkpoint: &Path, out: &Path, n: usize, rows: usize, class: Option<String>, seed: u64) -> Result<(), Error> {
    if n == 0 || rows == 0 {
        return Err(Error::Validation(vec!["--n and --rows must be positive".into()]));
    }
    let (manifest, models) = Models::from_checkpoint(checkpoint)?;
    let cfg = manifest.config;
    let labels = label_spaces(&cfg)?;
    let classes: Vec<usize> = match class {
        Some(c) => vec![resolve_label(&labels, Tier::Hq, &c)?; n],
        None => (0..n).map(|i| i % labels.hq_classes()).collect(),
    };
    let data = TrainData::load(&cfg)?;
    let mut rng = rng_stream(seed, STREAM_CLI);
    let images = models.generate(manifest.phase, cfg.train.ctf_mode, &data.lq, &classes, &mut rng)?;
    let images = ctfgan::data::images_from_tensor(&images)?;
    eval::emit_sample_grid(&images, out, rows, n.div_ceil(rows))?;
    println!("wrote {} samples to {}", n, out.display());
    Ok(())
}

fn extract_ctf(checkpoint: &Path, image: &Path, lq_label: &str, class: &str, out: &Path, seed: u64) -> Result<(), Error> {
    let (manifest, models) = Models::from_checkpoint(checkpoint)?;
    let cfg = manifest.config;
    let labels = label_spaces(&cfg)?;
    let lq_label = resolve_label(&labels, Tier::Lq, lq_label)?;
    let class = resolve_label(&labels, Tier::Hq, class)?;
    let img = read_image(image, Resolution::square(cfg.model.lq_size))?;
    let lq = candle_core::Tensor::from_vec(img.pixels, (1, 3, cfg.model.lq_size, cfg.model.lq_size), &candle_core::Device::Cpu)?;
    let mut rng = rng_stream(seed, STREAM_CLI);
    let noises = models.glh.sample_noises(&mut rng, 1)?;
    let ctfs = models.ctfs(&lq, &[lq_label], &[class], &noises, ctfgan::nn::Mode::Eval, false, cfg.train.ctf_mode)?;
    io::write_atomic(out, &ctf::encode_ctfs(&ctfs)?)?;
    for c in &ctfs {
        println!("ctf{}: {:?}", c.block_index, c.tensor.dims());
    }
    Ok(())
}

fn evaluate(checkpoint: &Path, samples: Option<usize>, out: Option<PathBuf>) -> Result<(), Error> {
    let (manifest, _) = ctfgan::train::checkpoint::load(checkpoint)?;
    let mut cfg = manifest.config;
    if let Some(s) = samples {
        cfg.eval.samples = s;
    }
    let data = TrainData::load(&cfg)?;
    let mut trainer = Trainer::resume(cfg, data, checkpoint, ResumePolicy::Fork)?;
    let report = trainer.evaluate()?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match out {
        Some(path) => io::write_atomic(&path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn validate_data(config: &Path) -> Result<(), Error> {
    let cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let data = TrainData::load(&cfg)?;
    println!(
        "ok: {} hq training, {} hq held-out, {} lq images; {} hq and {} lq classes",
        data.hq.len(),
        data.hq_holdout.len(),
        data.lq.len(),
        data.labels.hq_classes(),
        data.labels.lq_classes()
    );
    Ok(())
}

fn make_toy(out: &Path, per_class: usize, seed: u64) -> Result<(), Error> {
    let mut cfg = RunConfig::from_toml(&format!("seed = {seed}\noutput_dir = \"run\"\n"))?;
    let corpus = toy::toy_corpus(per_class, cfg.model.hq_size, cfg.model.hq_size / cfg.model.lq_size, seed)?;
    let manifest = toy::write_corpus(&corpus, out)?;
    cfg.data.manifest = Some(PathBuf::from(manifest.file_name().expect("manifest has a file name")));
    cfg.data.seed = seed;
    cfg.data.toy_per_class = per_class;
    let path = out.join("config.toml");
    io::write_atomic(&path, cfg.to_toml().as_bytes())?;
    println!("wrote {} and {}", manifest.display(), path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            resume,
            fork,
            stop_after,
            seed,
            output_dir,
            no_eval,
        } => train(&config, resume, fork, stop_after, seed, output_dir, no_eval),
        Command::Sample {
            checkpoint,
            out,
            n,
            rows,
            class,
            seed,
        } => sample(&checkpoint, &out, n, rows, class, seed),
        Command::ExtractCtf {
            checkpoint,
            image,
            lq_label,
            class,
            out,
            seed,
        } => extract_ctf(&checkpoint, &image, &lq_label, &class, &out, seed),
        Command::Eval { checkpoint, samples, out } => evaluate(&checkpoint, samples, out),
        Command::ValidateData { config } => validate_data(&config),
        Command::MakeToy { out, per_class, seed } => make_toy(&out, per_class, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
