use ccvnet_core::autoenc::{dae_encode, head_forward};
use ccvnet_core::branches::{forward_batch, Classifier};
use ccvnet_core::covariance::{ccv, standardize};
use ccvnet_core::synth::{gen_synth, SynthSpec};
use ccvnet_core::train::{
    fit_classifier, loss_and_accuracy, rng_for, train_stage1, train_stage2, train_stage3, Labelled, Schedule, Stream,
};
use ccvnet_core::{train_pipeline, CnnSpec, Graph, RunMeta, Tensor, TrainConfig, Trial};

fn inputs(trials: &[Trial]) -> (Vec<Tensor>, Vec<usize>) {
    let covs: Vec<_> = trials.iter().map(|t| ccv(t, 0).unwrap()).collect();
    let (std, _) = standardize(&covs, None).unwrap();
    (
        std.into_iter().map(|m| m.values).collect(),
        trials.iter().map(|t| t.label).collect(),
    )
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: [15, 30, 15],
        ..TrainConfig::default()
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, y) = inputs(&trials);
    let arch = TrainConfig::default().architecture(8, 3).unwrap();
    let seed = 0;
    let cnn = arch.cnn.init(&mut rng_for(seed, Stream::InitCnn), seed).unwrap();
    let rnn = arch.rnn.init(&mut rng_for(seed, Stream::InitRnn), seed).unwrap();
    let first: Vec<Tensor> = x[..16].to_vec();
    let data = Labelled {
        inputs: &first,
        labels: &y[..16],
    };
    let ln3 = 3f64.ln();
    let (l, _) = loss_and_accuracy(&arch.cnn, &cnn, data).unwrap();
    assert!((l - ln3).abs() < 0.2, "cnn {l}");
    let (l, _) = loss_and_accuracy(&arch.rnn, &rnn, data).unwrap();
    assert!((l - ln3).abs() < 0.2, "rnn {l}");
}

#[test]
fn zero_epochs_return_initial_weights() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, y) = inputs(&trials);
    let config = TrainConfig {
        epochs: [0, 0, 0],
        ..TrainConfig::default()
    };
    let arch = config.architecture(8, 3).unwrap();
    let data = Labelled { inputs: &x, labels: &y };
    let s1 = train_stage1(&arch, data, data, &config).unwrap();
    let cnn0 = arch.cnn.init(&mut rng_for(0, Stream::InitCnn), 0).unwrap();
    assert!(s1.cnn.params.same_values(&cnn0));
    assert_eq!(s1.cnn.curve.len(), 1);

    let feats = Tensor::full(&[4, 128], 0.5);
    let dae = train_stage2(&arch, &feats, &config).unwrap();
    assert!(dae
        .params
        .same_values(&arch.dae.init(&mut rng_for(0, Stream::InitDae), 0).unwrap()));

    let z: Vec<Tensor> = (0..4).map(|i| Tensor::full(&[32], i as f64)).collect();
    let zl = [0, 1, 2, 0];
    let head = train_stage3(
        &arch,
        Labelled {
            inputs: &z,
            labels: &zl,
        },
        Labelled {
            inputs: &z,
            labels: &zl,
        },
        &config,
    )
    .unwrap();
    assert!(head
        .params
        .same_values(&arch.head.init(&mut rng_for(0, Stream::InitHead), 0).unwrap()));
}

#[test]
fn separable_set_is_learned_by_both_branches() {
    // 40 trials: two classes of 20
    let trials = gen_synth(&SynthSpec {
        classes: 2,
        trials_per_class: 20,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, y) = inputs(&trials);
    let config = TrainConfig {
        patience: None,
        ..TrainConfig::default()
    };
    let arch = config.architecture(8, 2).unwrap();
    let data = Labelled { inputs: &x, labels: &y };
    let empty = Labelled {
        inputs: &[],
        labels: &[],
    };
    let s1 = train_stage1(&arch, data, empty, &config).unwrap();
    let (_, acc) = loss_and_accuracy(&arch.cnn, &s1.cnn.params, data).unwrap();
    assert!(acc >= 0.95, "cnn {acc}");
    let (_, acc) = loss_and_accuracy(&arch.rnn, &s1.rnn.params, data).unwrap();
    assert!(acc >= 0.95, "rnn {acc}");
}

#[test]
fn stage_training_is_bit_deterministic() {
    let feats = Tensor::new(&[10, 128], (0..1280).map(|i| ((i * 37) % 101) as f64 / 50.0).collect()).unwrap();
    let config = small_config();
    let arch = config.architecture(8, 3).unwrap();
    let a = train_stage2(&arch, &feats, &config).unwrap();
    let b = train_stage2(&arch, &feats, &config).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());

    let z: Vec<Tensor> = (0..9)
        .map(|i| {
            let mut v = Tensor::zeros(&[32]);
            v.data_mut()[i % 3] = 3.0;
            v
        })
        .collect();
    let zl: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let d = Labelled {
        inputs: &z,
        labels: &zl,
    };
    let h1 = train_stage3(&arch, d, d, &config).unwrap();
    let h2 = train_stage3(&arch, d, d, &config).unwrap();
    assert_eq!(h1.params.to_bytes(), h2.params.to_bytes());
    let (_, acc) = loss_and_accuracy(&arch.head, &h1.params, d).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn early_stopping_keeps_minimum_validation_checkpoint() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 8,
        noise_sigma: 3.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, y) = inputs(&trials);
    let (tx, vx) = x.split_at(18);
    let (ty, vy) = y.split_at(18);
    let spec = CnnSpec::new(8, 3);
    let init = spec.init(&mut rng_for(4, Stream::InitCnn), 4).unwrap();
    let sched = Schedule {
        epochs: 60,
        batch_size: 4,
        lr: 3e-3,
        patience: Some(5),
    };
    let val = Labelled { inputs: vx, labels: vy };
    let fit = fit_classifier(
        &spec,
        "cnn",
        init,
        Labelled { inputs: tx, labels: ty },
        val,
        &sched,
        &mut rng_for(4, Stream::ShuffleCnn),
    )
    .unwrap();
    let losses: Vec<f64> = fit.curve.iter().map(|p| p.val_loss.unwrap()).collect();
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let best_epoch = losses.iter().position(|&l| l == best).unwrap();
    assert_eq!(fit.selected_epoch, best_epoch);
    let (l, _) = loss_and_accuracy(&spec, &fit.params, val).unwrap();
    assert_eq!(l, best);
    // stopped within patience of the best epoch unless the schedule ran out
    let last = fit.curve.last().unwrap().epoch;
    assert!(last == 60 || last == best_epoch + 5);
}

fn run(trials: &[Trial], config: &TrainConfig) -> ccvnet_core::train::Outcome {
    train_pipeline(trials, &RunMeta::default(), config, |_| {}).unwrap()
}

#[test]
fn pipeline_composes_stage_operations() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let out = run(&trials, &small_config());
    let p = &out.pipeline;
    let x: Vec<Tensor> = trials.iter().map(|t| p.network_input(t).unwrap()).collect();
    let preds = p.predict_batch(&x).unwrap();
    let f = p.features(&x).unwrap();
    let z = dae_encode(&p.arch.dae, p.dae.as_ref(), &f).unwrap();
    let logits = head_forward(&p.arch.head, p.head.as_ref(), &z).unwrap();
    let probs = ccvnet_core::graph::softmax_rows(&logits);
    for (i, pred) in preds.iter().enumerate() {
        assert_eq!(pred.probs.as_slice(), probs.row(i));
        assert_eq!(pred.class, ccvnet_core::autoenc::argmax(probs.row(i)));
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // features are the two branch outputs side by side
    let refs: Vec<&Tensor> = x.iter().collect();
    let (fc, _) = forward_batch(&p.arch.cnn, p.cnn.as_ref().unwrap(), &refs).unwrap();
    assert_eq!(&f.row(3)[..64], fc.row(3));
}

#[test]
fn inference_does_not_touch_parameters() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let out = run(&trials, &small_config());
    let before = out.pipeline.clone();
    let x: Vec<Tensor> = trials.iter().map(|t| out.pipeline.network_input(t).unwrap()).collect();
    let _ = out.pipeline.predict_batch(&x).unwrap();
    let _ = out.pipeline.features(&x).unwrap();
    assert_eq!(out.pipeline, before);
}

#[test]
fn forward_is_independent_of_batch_order() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, _) = inputs(&trials);
    let spec = TrainConfig::default().architecture(8, 3).unwrap().rnn;
    let params = spec.init(&mut rng_for(1, Stream::InitRnn), 1).unwrap();
    let fwd: Vec<&Tensor> = x.iter().collect();
    let rev: Vec<&Tensor> = x.iter().rev().collect();
    let (a, _) = forward_batch(&spec, &params, &fwd).unwrap();
    let (b, _) = forward_batch(&spec, &params, &rev).unwrap();
    let n = x.len();
    for i in 0..n {
        for (u, v) in a.row(i).iter().zip(b.row(n - 1 - i)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    assert_eq!(spec.feature_width(), 64);
}

#[test]
fn validation_data_never_reaches_the_weights() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        patience: None,
        ..small_config()
    };
    let base = run(&trials, &config);
    let mut perturbed = trials.clone();
    for &i in &base.val_indices {
        let t = &trials[i];
        let noisy = t.data().map(|v| -3.0 * v + 1.0);
        perturbed[i] = Trial::new(noisy, t.label, &t.subject_id, &t.trial_id).unwrap();
    }
    let other = run(&perturbed, &config);
    assert_eq!(base.train_indices, other.train_indices);
    for stage in ccvnet_core::autoenc::STAGES {
        let a = base.pipeline.stage(stage).unwrap();
        let b = other.pipeline.stage(stage).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes(), "{stage}");
    }
    assert_eq!(base.pipeline.norm, other.pipeline.norm);
}

#[test]
fn later_stages_leave_earlier_weights_alone() {
    let trials = gen_synth(&SynthSpec {
        trials_per_class: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let (x, y) = inputs(&trials);
    let config = small_config();
    let arch = config.architecture(8, 3).unwrap();
    let d = Labelled { inputs: &x, labels: &y };
    let s1 = train_stage1(&arch, d, d, &config).unwrap();
    let cnn_before = s1.cnn.params.to_bytes();
    let rnn_before = s1.rnn.params.to_bytes();
    let pipe = ccvnet_core::Pipeline {
        arch: arch.clone(),
        lag: 0,
        norm: None,
        cnn: Some(s1.cnn.params.clone()),
        rnn: Some(s1.rnn.params.clone()),
        dae: None,
        head: None,
    };
    let f = pipe.features(&x).unwrap();
    let dae = train_stage2(&arch, &f, &config).unwrap();
    assert_eq!(pipe.cnn.as_ref().unwrap().to_bytes(), cnn_before);
    assert_eq!(pipe.rnn.as_ref().unwrap().to_bytes(), rnn_before);
    let dae_before = dae.params.to_bytes();
    let z = dae_encode(&arch.dae, Some(&dae.params), &f).unwrap();
    let zr: Vec<Tensor> = (0..x.len()).map(|i| Tensor::vector(z.row(i))).collect();
    let zd = Labelled {
        inputs: &zr,
        labels: &y,
    };
    train_stage3(&arch, zd, zd, &config).unwrap();
    assert_eq!(dae.params.to_bytes(), dae_before);
    assert_eq!(pipe.cnn.as_ref().unwrap().to_bytes(), cnn_before);
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let spec = ccvnet_core::HeadSpec::new(4, 2);
    let mut init = spec.init(&mut rng_for(0, Stream::InitHead), 0).unwrap();
    init.get_mut("out.w").unwrap().fill(1e300);
    let z = vec![Tensor::full(&[4], 1e10), Tensor::full(&[4], -1e10)];
    let zl = [0, 1];
    let d = Labelled {
        inputs: &z,
        labels: &zl,
    };
    let sched = Schedule {
        epochs: 2,
        batch_size: 2,
        lr: 1e-3,
        patience: None,
    };
    let err = fit_classifier(&spec, "head", init, d, d, &sched, &mut rng_for(0, Stream::ShuffleHead)).unwrap_err();
    match err {
        ccvnet_core::Error::Numeric(m) => assert!(m.contains("head") && m.contains("epoch"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
    let _ = Graph::new();
}
