//! Run directories: training end to end, and loading a trained pipeline.
//!
//! A run directory holds `config.txt` (effective configuration),
//! `classes.txt` (one class name per line), the stage weights `cnn.params`,
//! `rnn.params`, `dae.params`, `head.params`, the input statistics
//! `norm.params`, `curves.csv`, `report.txt`, `report.json`, and
//! `train.manifest` / `val.manifest` listing the partition.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ccvnet_core::autoenc::STAGES;
use ccvnet_core::train::{Metrics, Outcome};
use ccvnet_core::{train_pipeline, NormStats, ParamStore, Pipeline, RunMeta, Tensor, TrainConfig, Trial};

use crate::error::{AppError, Result};
use crate::manifest::{self, Manifest};
use crate::report;

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| AppError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    write_file(path, store.to_bytes())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    ParamStore::from_bytes(&bytes).map_err(|e| AppError::at(path, e))
}

fn norm_store(norm: &NormStats) -> ParamStore {
    let mut s = ParamStore::new(0);
    s.insert("mean", norm.mean.clone()).expect("fresh store");
    s.insert("std", norm.std.clone()).expect("fresh store");
    s
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Trains all stages on the trials of `manifest_path` and writes the run
/// directory. Returns the outcome with wall-clock fields filled in.
pub fn train(manifest_path: &Path, config: &TrainConfig, out: &Path) -> Result<Outcome> {
    let (m, trials) = manifest::load(manifest_path)?;
    if config.classes != 0 && config.classes != m.classes.len() {
        return Err(AppError::Config(format!(
            "config declares {} classes but the manifest lists {}",
            config.classes,
            m.classes.len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    write_file(&out.join("config.txt"), config.to_kv())?;

    let meta = RunMeta {
        task: m.task.clone(),
        subject: m.subject.clone(),
        class_names: m.classes.clone(),
    };
    let mut marks = Vec::with_capacity(4);
    let mut outcome = train_pipeline(&trials, &meta, config, |_| marks.push(Instant::now()))?;
    for i in 0..3 {
        if let (Some(a), Some(b)) = (marks.get(i), marks.get(i + 1)) {
            outcome.report.wall_clock_secs[i] = b.duration_since(*a).as_secs_f64();
        }
    }
    write_run(&outcome, &m, manifest_path, out)?;
    Ok(outcome)
}

fn write_run(outcome: &Outcome, m: &Manifest, manifest_path: &Path, out: &Path) -> Result<()> {
    let p = &outcome.pipeline;
    write_file(&out.join("classes.txt"), m.classes.join("\n") + "\n")?;
    for stage in STAGES {
        let store = p
            .stage(stage)
            .ok_or_else(|| AppError::State(format!("stage {stage:?} was not trained")))?;
        save_params(&out.join(format!("{stage}.params")), store)?;
    }
    if let Some(norm) = &p.norm {
        save_params(&out.join("norm.params"), &norm_store(norm))?;
    }
    write_file(&out.join("curves.csv"), report::render_curves(&outcome.report.curves))?;
    write_file(&out.join("report.txt"), report::render_text(&outcome.report))?;
    write_file(&out.join("report.json"), report::render_json(&outcome.report))?;

    let files: Vec<PathBuf> = m.resolved(manifest_path).iter().map(|p| canonical(p)).collect();
    for (name, idx) in [
        ("train.manifest", &outcome.train_indices),
        ("val.manifest", &outcome.val_indices),
    ] {
        let part = Manifest {
            trials: idx.iter().map(|&i| files[i].clone()).collect(),
            ..m.clone()
        };
        part.write(&out.join(name))?;
    }
    Ok(())
}

/// Class names and pipeline stored in a run directory.
pub struct Trained {
    pub classes: Vec<String>,
    pub config: TrainConfig,
    pub pipeline: Pipeline,
}

pub fn load(dir: &Path) -> Result<Trained> {
    let config_path = dir.join("config.txt");
    if !config_path.exists() {
        return Err(AppError::State(format!(
            "{}: no run configuration found",
            config_path.display()
        )));
    }
    let config = TrainConfig::from_kv(&read_text(&config_path)?).map_err(|e| AppError::at(&config_path, e))?;
    let classes: Vec<String> = read_text(&dir.join("classes.txt"))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let norm_path = dir.join("norm.params");
    if !norm_path.exists() {
        return Err(AppError::State(format!(
            "stage \"norm\" missing: {}",
            norm_path.display()
        )));
    }
    let norm = load_params(&norm_path)?;
    let mean = norm.require("mean").map_err(|e| AppError::at(&norm_path, e))?.clone();
    let std = norm.require("std").map_err(|e| AppError::at(&norm_path, e))?.clone();
    let channels = mean.shape()[0];
    let arch = config.architecture(channels, classes.len())?;
    let mut stages: Vec<ParamStore> = Vec::with_capacity(4);
    for stage in STAGES {
        let path = dir.join(format!("{stage}.params"));
        if !path.exists() {
            return Err(AppError::State(format!(
                "stage {stage:?} weights missing: {}",
                path.display()
            )));
        }
        stages.push(load_params(&path)?);
    }
    let mut it = stages.into_iter();
    let pipeline = Pipeline {
        arch,
        lag: config.lag,
        norm: Some(NormStats { mean, std }),
        cnn: it.next(),
        rnn: it.next(),
        dae: it.next(),
        head: it.next(),
    };
    Ok(Trained {
        classes,
        config,
        pipeline,
    })
}

/// Scores a trained pipeline on every trial of a manifest.
pub fn evaluate(trained: &Trained, trials: &[Trial]) -> Result<Metrics> {
    if trials.is_empty() {
        return Err(AppError::Data("no trials to evaluate".into()));
    }
    let inputs: Vec<Tensor> = trials
        .iter()
        .map(|t| trained.pipeline.network_input(t))
        .collect::<ccvnet_core::Result<_>>()?;
    let labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
    Ok(ccvnet_core::train::evaluate(&trained.pipeline, &inputs, &labels)?)
}
