//! Hierarchical training: supervised branches, then the autoencoder on
//! frozen branch features, then the head on frozen latent codes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoenc::{argmax, Architecture, DaeSpec, Pipeline};
use crate::branches::Classifier;
use crate::config::TrainConfig;
use crate::covariance::{ccv, standardize};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Adam, ParamStore};
use crate::tensor::Tensor;
use crate::trial::Trial;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    InitCnn,
    InitRnn,
    InitDae,
    InitHead,
    ShuffleCnn,
    ShuffleRnn,
    ShuffleDae,
    ShuffleHead,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Stratified split into `(train, val)` index lists.
///
/// Each class keeps `⌈fraction·n⌉` trials for training (a fractional
/// remainder goes to train) and the rest for validation; the draw is
/// seeded and both lists come back in ascending index order.
pub fn split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("trial {i} has label {l} but only {classes} classes exist")))?
            .push(i);
    }
    let mut rng = rng_for(seed, Stream::Split);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            return Err(Error::Data(format!("class {k} has no trials")));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = libm::ceil(fraction * n as f64 - 1e-9).min(n as f64) as usize;
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// One row of a loss curve. Epoch 0 is measured before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Per-stage optimisation schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub params: ParamStore,
    pub curve: Vec<CurvePoint>,
    /// Epoch whose weights were returned.
    pub selected_epoch: usize,
}

/// Labelled inputs of one partition.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a [usize],
}

const EVAL_CHUNK: usize = 64;

/// Mean cross-entropy and accuracy of `net` over a set, with frozen weights.
pub fn loss_and_accuracy<N: Classifier>(net: &N, params: &ParamStore, data: Labelled<'_>) -> Result<(f64, f64)> {
    if data.inputs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for (xs, ys) in data.inputs.chunks(EVAL_CHUNK).zip(data.labels.chunks(EVAL_CHUNK)) {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (_, logits) = net.forward(&mut g, &p, &refs)?;
        let l = g.softmax_xent(logits, ys)?;
        loss += g.value(l).data()[0] * xs.len() as f64;
        let lv = g.value(logits);
        correct += ys.iter().enumerate().filter(|(i, &y)| argmax(lv.row(*i)) == y).count();
    }
    let n = data.inputs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn non_finite(stage: &str, epoch: usize, batch: usize) -> Error {
    Error::Numeric(format!(
        "stage {stage}: non-finite loss at epoch {epoch}, batch {batch}"
    ))
}

/// Early-stopping bookkeeping shared by the supervised and unsupervised loops.
struct Selector {
    patience: Option<usize>,
    best: Option<(f64, usize, ParamStore)>,
}

impl Selector {
    fn new(patience: Option<usize>, track: bool) -> Self {
        Self {
            patience: if track { patience } else { None },
            best: None,
        }
    }

    /// Records an epoch; returns true when training should stop.
    fn observe(&mut self, loss: f64, epoch: usize, params: &ParamStore) -> bool {
        let Some(patience) = self.patience else {
            return false;
        };
        match &self.best {
            Some((b, _, _)) if loss >= *b => {}
            _ => self.best = Some((loss, epoch, params.clone())),
        }
        let best_epoch = self.best.as_ref().map_or(epoch, |b| b.1);
        epoch - best_epoch >= patience
    }

    fn finish(self, last: ParamStore, last_epoch: usize) -> (ParamStore, usize) {
        match self.best {
            Some((_, e, p)) => (p, e),
            None => (last, last_epoch),
        }
    }
}

/// Trains a softmax classifier with Adam on mini-batches.
///
/// With a patience and a non-empty validation set, the weights with the
/// lowest validation loss are returned; otherwise the last epoch's are.
pub fn fit_classifier<N: Classifier>(
    net: &N,
    stage: &str,
    init: ParamStore,
    train: Labelled<'_>,
    val: Labelled<'_>,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Fit> {
    if train.inputs.is_empty() {
        return Err(Error::Data(format!("stage {stage}: empty training set")));
    }
    let has_val = !val.inputs.is_empty();
    let opt = Adam::new(sched.lr);
    let mut params = init;
    let mut curve = Vec::new();
    let mut selector = Selector::new(sched.patience, has_val);

    let record = |params: &ParamStore, epoch: usize, train_loss: f64| -> Result<CurvePoint> {
        let (val_loss, val_acc) = if has_val {
            let (l, a) = loss_and_accuracy(net, params, val)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        Ok(CurvePoint {
            stage: stage.to_string(),
            epoch,
            train_loss,
            val_loss,
            val_acc,
        })
    };

    let (l0, _) = loss_and_accuracy(net, &params, train)?;
    if !l0.is_finite() {
        return Err(non_finite(stage, 0, 0));
    }
    let p0 = record(&params, 0, l0)?;
    selector.observe(p0.val_loss.unwrap_or(l0), 0, &params);
    curve.push(p0);

    let mut order: Vec<usize> = (0..train.inputs.len()).collect();
    let mut last_epoch = 0;
    for epoch in 1..=sched.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(sched.batch_size).enumerate() {
            let batch: Vec<&Tensor> = idx.iter().map(|&i| &train.inputs[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let (_, logits) = net.forward(&mut g, &bound, &batch)?;
            let loss = g.softmax_xent(logits, &labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(non_finite(stage, epoch, b + 1));
            }
            g.backward(loss)?;
            params.zero_grad();
            params.accumulate(&g, &bound);
            params
                .adam_step(&opt)
                .map_err(|e| Error::Numeric(format!("stage {stage}: epoch {epoch}, batch {}: {e}", b + 1)))?;
            total += lv * idx.len() as f64;
        }
        let point = record(&params, epoch, total / train.inputs.len() as f64)?;
        let stop = selector.observe(point.val_loss.unwrap_or(point.train_loss), epoch, &params);
        curve.push(point);
        last_epoch = epoch;
        if stop {
            break;
        }
    }
    let (params, selected_epoch) = selector.finish(params, last_epoch);
    Ok(Fit {
        params,
        curve,
        selected_epoch,
    })
}

/// Mean reconstruction error of `features` (`[N×input]`).
fn reconstruction_loss(spec: &DaeSpec, params: &ParamStore, features: &Tensor) -> Result<f64> {
    crate::autoenc::dae_loss(spec, params, features)
}

/// Trains the autoencoder on features alone; runs all epochs and keeps
/// the last weights.
pub fn fit_autoencoder(
    spec: &DaeSpec,
    init: ParamStore,
    features: &Tensor,
    sched: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Fit> {
    let (n, width) = features
        .dims2()
        .filter(|(n, w)| *n > 0 && *w == spec.input)
        .ok_or_else(|| Error::dim("autoencoder features", &[0, spec.input], features.shape()))?;
    let opt = Adam::new(sched.lr);
    let mut params = init;
    let l0 = reconstruction_loss(spec, &params, features)?;
    if !l0.is_finite() {
        return Err(non_finite("dae", 0, 0));
    }
    let mut curve = vec![CurvePoint {
        stage: "dae".into(),
        epoch: 0,
        train_loss: l0,
        val_loss: None,
        val_acc: None,
    }];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=sched.epochs {
        order.shuffle(rng);
        for (b, idx) in order.chunks(sched.batch_size).enumerate() {
            let mut data = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                data.extend_from_slice(features.row(i));
            }
            let batch = Tensor::new(&[idx.len(), width], data)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let loss = spec.loss_graph(&mut g, &bound, &batch)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(non_finite("dae", epoch, b + 1));
            }
            g.backward(loss)?;
            params.zero_grad();
            params.accumulate(&g, &bound);
            params
                .adam_step(&opt)
                .map_err(|e| Error::Numeric(format!("stage dae: epoch {epoch}, batch {}: {e}", b + 1)))?;
        }
        // full-pass loss after the epoch, comparable with epoch 0
        let l = reconstruction_loss(spec, &params, features)?;
        if !l.is_finite() {
            return Err(non_finite("dae", epoch, 0));
        }
        curve.push(CurvePoint {
            stage: "dae".into(),
            epoch,
            train_loss: l,
            val_loss: None,
            val_acc: None,
        });
    }
    Ok(Fit {
        params,
        curve,
        selected_epoch: sched.epochs,
    })
}

fn schedule(config: &TrainConfig, stage: usize) -> Schedule {
    Schedule {
        epochs: config.epochs[stage],
        batch_size: config.batch_size,
        lr: config.lr[stage],
        patience: config.patience,
    }
}

/// Trained branch weights and their curves.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub cnn: Fit,
    pub rnn: Fit,
}

/// Trains the CNN and RNN branches independently on standardized inputs.
pub fn train_stage1(
    arch: &Architecture,
    train: Labelled<'_>,
    val: Labelled<'_>,
    config: &TrainConfig,
) -> Result<Stage1> {
    let sched = schedule(config, 0);
    let cnn0 = arch.cnn.init(&mut rng_for(config.seed, Stream::InitCnn), config.seed)?;
    let rnn0 = arch.rnn.init(&mut rng_for(config.seed, Stream::InitRnn), config.seed)?;
    let cnn = fit_classifier(
        &arch.cnn,
        "cnn",
        cnn0,
        train,
        val,
        &sched,
        &mut rng_for(config.seed, Stream::ShuffleCnn),
    )?;
    let rnn = fit_classifier(
        &arch.rnn,
        "rnn",
        rnn0,
        train,
        val,
        &sched,
        &mut rng_for(config.seed, Stream::ShuffleRnn),
    )?;
    Ok(Stage1 { cnn, rnn })
}

/// Trains the autoencoder on features extracted by frozen branches.
pub fn train_stage2(arch: &Architecture, train_features: &Tensor, config: &TrainConfig) -> Result<Fit> {
    let init = arch.dae.init(&mut rng_for(config.seed, Stream::InitDae), config.seed)?;
    fit_autoencoder(
        &arch.dae,
        init,
        train_features,
        &schedule(config, 1),
        &mut rng_for(config.seed, Stream::ShuffleDae),
    )
}

/// Trains the softmax head on latent codes from the frozen autoencoder.
pub fn train_stage3(arch: &Architecture, train: Labelled<'_>, val: Labelled<'_>, config: &TrainConfig) -> Result<Fit> {
    let init = arch
        .head
        .init(&mut rng_for(config.seed, Stream::InitHead), config.seed)?;
    fit_classifier(
        &arch.head,
        "head",
        init,
        train,
        val,
        &schedule(config, 2),
        &mut rng_for(config.seed, Stream::ShuffleHead),
    )
}

fn rows_of(t: &Tensor) -> Vec<Tensor> {
    match t.dims2() {
        Some((n, _)) => (0..n).map(|i| Tensor::vector(t.row(i))).collect(),
        None => Vec::new(),
    }
}

/// Classification metrics over one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub accuracy: f64,
    /// Precision per class; 0 for a class that is never predicted.
    pub precision: Vec<f64>,
    /// Recall per class; 0 for a class with no members.
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Data("cannot evaluate an empty set".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Data(format!("label {} outside {classes} classes", t.max(p))));
            }
            confusion[t][p] += 1;
        }
        let trace: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = (0..classes)
            .map(|k| ratio(confusion[k][k], (0..classes).map(|t| confusion[t][k]).sum()))
            .collect();
        let recall = (0..classes)
            .map(|k| ratio(confusion[k][k], confusion[k].iter().sum()))
            .collect();
        Ok(Self {
            count: truth.len(),
            accuracy: trace as f64 / truth.len() as f64,
            precision,
            recall,
            confusion,
        })
    }
}

/// Runs the whole pipeline on standardized inputs and scores it.
pub fn evaluate(pipeline: &Pipeline, inputs: &[Tensor], labels: &[usize]) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(Error::Data("cannot evaluate an empty set".into()));
    }
    let preds = pipeline.predict_batch(inputs)?;
    let predicted: Vec<usize> = preds.iter().map(|p| p.class).collect();
    Metrics::from_predictions(labels, &predicted, pipeline.arch.head.classes)
}

/// Everything a training run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub task: String,
    pub subject: String,
    pub class_names: Vec<String>,
    pub train: Metrics,
    pub validation: Option<Metrics>,
    /// Curves of the `cnn`, `rnn`, `dae` and `head` stages, in that order.
    pub curves: Vec<CurvePoint>,
    pub selected_epochs: [usize; 4],
    /// Seconds spent in stages 1, 2 and 3; filled in by the caller.
    pub wall_clock_secs: [f64; 3],
    pub config: TrainConfig,
}

/// A trained pipeline with its report and partition.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pipeline: Pipeline,
    pub report: RunReport,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Dataset identity carried into the report.
#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub task: String,
    pub subject: String,
    pub class_names: Vec<String>,
}

/// Split, covariance, standardization and the three training stages.
///
/// `tick` is called with `0` before stage 1 and with `1`, `2`, `3` after
/// each stage finishes, so a caller with a clock can time them.
pub fn train_pipeline(
    trials: &[Trial],
    meta: &RunMeta,
    config: &TrainConfig,
    mut tick: impl FnMut(usize),
) -> Result<Outcome> {
    config.validate()?;
    let first = trials
        .first()
        .ok_or_else(|| Error::Data("no trials to train on".into()))?;
    let channels = first.channels();
    if let Some(t) = trials.iter().find(|t| t.channels() != channels) {
        return Err(Error::Data(format!(
            "trial {:?} has {} channels, expected {channels}",
            t.trial_id,
            t.channels()
        )));
    }
    let labels: Vec<usize> = trials.iter().map(|t| t.label).collect();
    let classes = match config.classes {
        0 if !meta.class_names.is_empty() => meta.class_names.len(),
        0 => labels.iter().max().map_or(0, |m| m + 1),
        k => k,
    };
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, found {classes}")));
    }
    let arch = config.architecture(channels, classes)?;
    let (train_idx, val_idx) = split(&labels, classes, config.split_fraction, config.seed)?;

    let covs = trials.iter().map(|t| ccv(t, config.lag)).collect::<Result<Vec<_>>>()?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| covs[i].clone()).collect::<Vec<_>>();
    let (train_std, norm) = standardize(&pick(&train_idx), None)?;
    let val_std = if val_idx.is_empty() {
        Vec::new()
    } else {
        standardize(&pick(&val_idx), Some(&norm))?.0
    };
    let train_x: Vec<Tensor> = train_std.into_iter().map(|m| m.values).collect();
    let val_x: Vec<Tensor> = val_std.into_iter().map(|m| m.values).collect();
    let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    let train = Labelled {
        inputs: &train_x,
        labels: &train_y,
    };
    let val = Labelled {
        inputs: &val_x,
        labels: &val_y,
    };

    tick(0);
    let s1 = train_stage1(&arch, train, val, config)?;
    tick(1);
    let mut pipeline = Pipeline {
        arch: arch.clone(),
        lag: config.lag,
        norm: Some(norm),
        cnn: Some(s1.cnn.params.clone()),
        rnn: Some(s1.rnn.params.clone()),
        dae: None,
        head: None,
    };
    let train_features = pipeline.features(&train_x)?;
    let s2 = train_stage2(&arch, &train_features, config)?;
    tick(2);
    pipeline.dae = Some(s2.params.clone());
    let train_z = rows_of(&crate::autoenc::dae_encode(
        &arch.dae,
        pipeline.dae.as_ref(),
        &train_features,
    )?);
    let val_z = if val_x.is_empty() {
        Vec::new()
    } else {
        rows_of(&pipeline.latents(&val_x)?)
    };
    let s3 = train_stage3(
        &arch,
        Labelled {
            inputs: &train_z,
            labels: &train_y,
        },
        Labelled {
            inputs: &val_z,
            labels: &val_y,
        },
        config,
    )?;
    tick(3);
    pipeline.head = Some(s3.params.clone());

    let train_metrics = evaluate(&pipeline, &train_x, &train_y)?;
    let val_metrics = if val_x.is_empty() {
        None
    } else {
        Some(evaluate(&pipeline, &val_x, &val_y)?)
    };
    let mut curves = s1.cnn.curve.clone();
    curves.extend(s1.rnn.curve.iter().cloned());
    curves.extend(s2.curve.iter().cloned());
    curves.extend(s3.curve.iter().cloned());
    let class_names = if meta.class_names.is_empty() {
        (0..classes).map(|k| format!("class{k}")).collect()
    } else {
        meta.class_names.clone()
    };
    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        task: meta.task.clone(),
        subject: meta.subject.clone(),
        class_names,
        train: train_metrics,
        validation: val_metrics,
        curves,
        selected_epochs: [
            s1.cnn.selected_epoch,
            s1.rnn.selected_epoch,
            s2.selected_epoch,
            s3.selected_epoch,
        ],
        wall_clock_secs: [0.0; 3],
        config: config.clone(),
    };
    Ok(Outcome {
        pipeline,
        report,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ten_per_class() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (tr, va) = split(&labels, 3, 0.8, 5).unwrap();
        for k in 0..3 {
            assert_eq!(tr.iter().filter(|&&i| labels[i] == k).count(), 8);
            assert_eq!(va.iter().filter(|&&i| labels[i] == k).count(), 2);
        }
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert_eq!(split(&labels, 3, 0.8, 5).unwrap(), (tr, va));
    }

    #[test]
    fn split_rounds_toward_train() {
        let labels = [0usize; 7];
        let (tr, va) = split(&labels, 1, 0.8, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (6, 1));
    }

    #[test]
    fn split_rejects_empty_class() {
        assert!(matches!(split(&[0, 0, 2, 2], 3, 0.8, 0), Err(Error::Data(m)) if m.contains("class 1")));
        assert!(split(&[0, 1], 2, 1.0, 0).is_err());
    }

    #[test]
    fn metrics_perfect_and_constant() {
        let truth = [0, 1, 2, 0, 1, 2];
        let m = Metrics::from_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                assert_eq!(c, if i == j { 2 } else { 0 });
            }
        }
        let m = Metrics::from_predictions(&truth, &[0; 6], 3).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision, [1.0 / 3.0, 0.0, 0.0]);
        assert_eq!(m.recall, [1.0, 0.0, 0.0]);
        assert!(Metrics::from_predictions(&[], &[], 3).is_err());
    }
}
