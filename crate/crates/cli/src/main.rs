use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mmft::checks;
use mmft::data::{self, MorphConfig, NamedSample};
use mmft::train::{self, Checkpoint, TrainConfig};
use mmft::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Multi-task depth, saliency and contour network: training and evaluation driver.
#[derive(Parser, Debug)]
#[command(name = "mmft", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset directory or on generated synthetic scenes.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a dataset; writes a per-image CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict depth, saliency and contour maps from one RGB image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// op, op:<name>, module, module:<name> or model.
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset in the rgb/ depth/ gt/ layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 352)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
    },
    /// Derive contour ground truth (dilation minus erosion) from a saliency mask.
    ContourGt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        m: usize,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    data: Option<PathBuf>,
    /// Number of synthetic training scenes to generate instead of reading data.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigFlags,
}

/// One flag per config key.
#[derive(Args, Debug)]
struct ConfigFlags {
    #[arg(long)]
    input_size: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    decay_step: Option<String>,
    #[arg(long)]
    decay_rate: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    msf: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<String>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    morph_m: Option<String>,
}

impl ConfigFlags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("input_size", &self.input_size),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("decay_step", &self.decay_step),
            ("decay_rate", &self.decay_rate),
            ("seed", &self.seed),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("model", &self.model),
            ("fusion", &self.fusion),
            ("msf", &self.msf),
            ("layers", &self.layers),
            ("checkpoint_every", &self.checkpoint_every),
            ("augment", &self.augment),
            ("precision", &self.precision),
            ("morph_m", &self.morph_m),
        ]
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(())
    }

    fn any(&self) -> bool {
        self.pairs().iter().any(|(_, v)| v.is_some())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synthetic_set(count: usize, seed: u64, size: usize, shapes: usize) -> Result<Vec<NamedSample>> {
    (0..count)
        .map(|i| {
            Ok(NamedSample {
                name: format!("syn_{i:05}"),
                sample: data::generate_synthetic(seed.wrapping_add(i as u64), size, size, shapes)?,
            })
        })
        .collect()
}

fn run_train(args: TrainArgs) -> Result<()> {
    let ck = match &args.resume {
        Some(path) => {
            if args.overrides.any() {
                return Err(Error::Config(
                    "--resume uses the checkpoint's config; drop the override flags".into(),
                ));
            }
            Checkpoint::load(path)?
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &args.config {
                cfg.apply_text(&read_text(path)?)?;
            }
            args.overrides.apply(&mut cfg)?;
            Checkpoint::init(cfg)?
        }
    };
    let cfg = ck.config.clone();
    let morph = MorphConfig::new(cfg.morph_m)?;
    let samples = match (&args.data, args.synthetic) {
        (Some(dir), _) => data::load_dataset(dir, morph)?,
        (None, Some(n)) => synthetic_set(n, cfg.seed, cfg.input_size, 3)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let total = train::planned_steps(&cfg, samples.len());
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_text(&args.out.join("config.txt"), &cfg.to_text())?;
    eprintln!(
        "training on {} samples for {total} steps ({} parameters)",
        samples.len(),
        ck.model.params.numel()
    );
    let start = Instant::now();
    let (ck, _) = train::train(&samples, ck, Some(&args.out), |log| {
        eprintln!(
            "step {}/{total} epoch {} lr {:.3e} loss {:.5} (d {:.4} s {:.4} c {:.4}) {:.1}s",
            log.step,
            log.epoch,
            log.lr,
            log.loss.total,
            log.loss.l_d,
            log.loss.l_s,
            log.loss.l_c,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("{}", args.out.join(train::FINAL_CHECKPOINT).display());
    eprintln!("finished at step {}", ck.step());
    Ok(())
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train(args) => run_train(*args)?,
        Command::Eval {
            ckpt,
            data: dir,
            report,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let morph = MorphConfig::new(ck.config.morph_m)?;
            let samples = data::load_dataset(&dir, morph)?;
            let ev = train::evaluate(&ck.model, &samples, ck.config.precision, morph)?;
            write_text(&report, &ev.to_csv())?;
            print!("{}", ev.mean.to_key_value());
        }
        Command::Predict { ckpt, image, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            train::predict_image(&ck.model, &image, &out, ck.config.precision)?;
            for f in train::PREDICTION_FILES {
                println!("{}", out.join(f).display());
            }
        }
        Command::Gradcheck { scope, seed } => {
            let start = Instant::now();
            let reports = checks::check_scope(&scope, seed)?;
            let mut ok = true;
            for (name, r) in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "{status} {name}: max rel err {:.3e} (tol {:.0e}), {} coords checked, {} skipped at kinks",
                    r.max_rel_err,
                    r.tol,
                    r.coords_checked(),
                    r.coords_skipped()
                );
                ok &= r.passed();
            }
            println!(
                "{} in {:.1}s",
                if ok { "all passed" } else { "FAILED" },
                start.elapsed().as_secs_f64()
            );
            return Ok(ok);
        }
        Command::GenData {
            out,
            count,
            seed,
            size,
            shapes,
        } => {
            for s in synthetic_set(count, seed, size, shapes)? {
                data::save_sample(&out, &s.name, &s.sample)?;
            }
            println!("wrote {count} samples to {}", out.display());
        }
        Command::ContourGt { input, out, m } => {
            let morph = MorphConfig::new(m)?;
            let mask = data::load_image(&input)?;
            if mask.shape()[0] != 1 {
                return Err(Error::Config(format!(
                    "{} is not a greyscale (P5) mask",
                    input.display()
                )));
            }
            let binary = mask.map(|v| (v > 0.5) as u8 as f64);
            data::save_image(&data::contour_from_saliency(&binary, morph)?, &out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
