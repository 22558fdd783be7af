use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ccvnet::error::{AppError, Result};
use ccvnet::manifest::{self, Manifest};
use ccvnet::{report, run, trialfile};
use ccvnet_core::gradcheck;
use ccvnet_core::synth::{gen_synth, SynthSpec};
use ccvnet_core::trial::tasks;
use ccvnet_core::TrainConfig;

/// Hierarchical CNN/LSTM/autoencoder decoding of imagined speech from EEG
/// channel covariance.
///
/// Exit codes: 0 success, 1 gradient check failed, 2 configuration error or
/// missing stage weights, 3 data error, 4 numeric abort.
#[derive(Parser)]
#[command(name = "ccvnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (trial files plus manifest.txt).
    GenSynth(GenSynthArgs),
    /// Train all three stages and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a manifest.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Classify a single trial file.
    Predict {
        #[arg(long)]
        trial: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Finite-difference check of every layer's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient of this op.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Summarise a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 128)]
    samples: usize,
    /// Ignored when --task names a known class inventory.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    trials_per_class: usize,
    /// White-noise standard deviation; sources have unit amplitude.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256.0)]
    sample_rate: f32,
    /// `vowels`, `short_words`, `long_words` or any other label.
    #[arg(long, default_value = "synthetic")]
    task: String,
    #[arg(long, default_value = "synthetic")]
    subject: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// One value or three comma-separated per-stage values.
    #[arg(long)]
    epochs: Option<String>,
    /// One value or three comma-separated per-stage values.
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs without validation improvement, or `off`.
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    lag: Option<i64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenSynth(a) => gen_synth_cmd(a).map(|_| 0),
        Command::Train(a) => train_cmd(a).map(|_| 0),
        Command::Eval { data, weights } => eval_cmd(&data, &weights).map(|_| 0),
        Command::Predict { trial, weights } => predict_cmd(&trial, &weights).map(|_| 0),
        Command::Gradcheck { seed, corrupt } => gradcheck_cmd(seed, corrupt.as_deref()),
        Command::Report { run } => report_cmd(&run).map(|_| 0),
    }
}

fn gen_synth_cmd(a: GenSynthArgs) -> Result<()> {
    let (classes, names): (usize, Vec<String>) = match tasks::classes(&a.task) {
        Some(list) => (list.len(), list.iter().map(|s| s.to_string()).collect()),
        None => (a.classes, (0..a.classes).map(|k| format!("class{k}")).collect()),
    };
    let spec = SynthSpec {
        channels: a.channels,
        samples: a.samples,
        classes,
        trials_per_class: a.trials_per_class,
        noise_sigma: a.noise,
        strength: a.strength,
        seed: a.seed,
    };
    let trials = gen_synth(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| AppError::io(&a.out, e))?;
    let mut m = Manifest {
        task: a.task,
        subject: a.subject,
        classes: names,
        trials: Vec::with_capacity(trials.len()),
    };
    for t in &trials {
        let name = format!("{}.eegt", t.trial_id);
        trialfile::write(&a.out.join(&name), t, a.sample_rate)?;
        m.trials.push(PathBuf::from(name));
    }
    let path = a.out.join("manifest.txt");
    m.write(&path)?;
    println!("wrote {} trials and {}", trials.len(), path.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AppError::Config(format!("{}: {e}", p.display())))?;
            TrainConfig::from_kv(&text).map_err(|e| AppError::at(p, e))?
        }
        None => TrainConfig::default(),
    };
    let overrides = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs),
        ("lr", a.lr),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("patience", a.patience),
        ("lag", a.lag.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            config
                .set(k, &v)
                .map_err(|e| AppError::Config(format!("--{}: {e}", k.replace('_', "-"))))?;
        }
    }
    config.validate()?;
    if !a.data.exists() {
        return Err(AppError::Data(format!("manifest not found: {}", a.data.display())));
    }
    let outcome = run::train(&a.data, &config, &a.out)?;
    let r = &outcome.report;
    println!("train accuracy {:.4}", r.train.accuracy);
    if let Some(v) = &r.validation {
        println!("validation accuracy {:.4}", v.accuracy);
    }
    println!("run written to {}", a.out.display());
    Ok(())
}

fn eval_cmd(data: &Path, weights: &Path) -> Result<()> {
    let trained = run::load(weights)?;
    let (m, trials) = manifest::load(data)?;
    if m.classes != trained.classes {
        return Err(AppError::Data(format!(
            "manifest classes {:?} differ from the trained classes {:?}",
            m.classes, trained.classes
        )));
    }
    let metrics = run::evaluate(&trained, &trials)?;
    println!("accuracy {:.6} ({} trials)", metrics.accuracy, metrics.count);
    println!("confusion (rows true, columns predicted):");
    print!("{}", report::confusion_table(&metrics, &trained.classes));
    Ok(())
}

fn predict_cmd(trial: &Path, weights: &Path) -> Result<()> {
    let trained = run::load(weights)?;
    let file = trialfile::read(trial)?;
    let id = trial
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let t = file.to_trial("", &id).map_err(|e| AppError::at(trial, e))?;
    let pred = trained.pipeline.classify(std::slice::from_ref(&t))?.remove(0);
    println!("class {}", trained.classes[pred.class]);
    for (name, p) in trained.classes.iter().zip(&pred.probs) {
        println!("{name} {p}");
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, corrupt: Option<&str>) -> Result<u8> {
    let checks = gradcheck::run_suite(seed, corrupt)?;
    let mut failed = Vec::new();
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<13} rel err {:.3e} over {:>4} coords  {status}",
            c.op, c.rel_err, c.coords
        );
        if !c.passed() {
            failed.push(c.op);
        }
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(1)
    }
}

fn report_cmd(dir: &Path) -> Result<()> {
    let json_path = dir.join("report.json");
    let text = fs::read_to_string(&json_path).map_err(|e| AppError::io(&json_path, e))?;
    let r = report::parse_json(&text).map_err(|e| AppError::Data(format!("{}: {e}", json_path.display())))?;
    let csv_path = dir.join("curves.csv");
    let curves = match fs::read_to_string(&csv_path) {
        Ok(t) => report::parse_curves(&t).map_err(|e| AppError::Data(format!("{}: {e}", csv_path.display())))?,
        Err(_) => r.curves.clone(),
    };
    print!("{}", report::summary(&r, &curves));
    Ok(())
}
