use ccvnet_core::covariance::{ccv, standardize, NormStats};
use ccvnet_core::graph::softmax_rows;
use ccvnet_core::{CovMatrix, ParamStore, Tensor, Trial};
use proptest::prelude::*;

/// Textbook sample covariance: means first, then the double loop.
fn brute_force_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = rows[0].len();
    let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / t as f64).collect();
    let c = rows.len();
    let mut out = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for k in 0..t {
                s += (rows[i][k] - means[i]) * (rows[j][k] - means[j]);
            }
            out[i][j] = s / (t - 1) as f64;
        }
    }
    out
}

fn trial_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=8, 2usize..=64)
        .prop_flat_map(|(c, t)| prop::collection::vec(prop::collection::vec(-100.0f64..100.0, t), c))
}

fn to_trial(rows: &[Vec<f64>]) -> Trial {
    Trial::new(Tensor::from_rows(rows).unwrap(), 0, "s", "t").unwrap()
}

proptest! {
    #[test]
    fn ccv_matches_definition(rows in trial_strategy()) {
        let m = ccv(&to_trial(&rows), 0).unwrap();
        let want = brute_force_cov(&rows);
        let c = rows.len();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((m.values.at2(i, j) - want[i][j]).abs() < 1e-10 * want[i][j].abs().max(1.0));
                prop_assert_eq!(m.values.at2(i, j).to_bits(), m.values.at2(j, i).to_bits());
            }
        }
    }

    #[test]
    fn ccv_is_psd(rows in trial_strategy(), probes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 10)) {
        let m = ccv(&to_trial(&rows), 0).unwrap();
        let c = rows.len();
        for x in probes {
            let x = &x[..c];
            let mut q = 0.0;
            for i in 0..c {
                for j in 0..c {
                    q += x[i] * m.values.at2(i, j) * x[j];
                }
            }
            let n2: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!(q >= -1e-9 * n2);
        }
    }

    #[test]
    fn ccv_scales_quadratically(rows in trial_strategy(), alpha in -10.0f64..10.0) {
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| alpha * v).collect()).collect();
        let a = ccv(&to_trial(&rows), 0).unwrap();
        let b = ccv(&to_trial(&scaled), 0).unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            let want = alpha * alpha * x;
            prop_assert!((y - want).abs() <= 1e-9 * want.abs().max(1e-12));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        let p = softmax_rows(&Tensor::new(&[4, 3], data).unwrap());
        for r in 0..4 {
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn param_store_bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), seed in any::<u64>()) {
        let mut s = ParamStore::new(seed);
        s.insert("w", Tensor::vector(&values)).unwrap();
        s.insert("b", Tensor::scalar(values[0])).unwrap();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, s);
    }
}

#[test]
fn held_out_stats_differ_from_self_standardization() {
    let mk = |k: f64| CovMatrix {
        values: Tensor::new(&[2, 2], vec![k, 0.5 * k, 0.5 * k, k * k]).unwrap(),
        lag: 0,
    };
    let a: Vec<CovMatrix> = [1.0, 2.0, 3.0].iter().map(|&k| mk(k)).collect();
    let b: Vec<CovMatrix> = [5.0, 9.0].iter().map(|&k| mk(k)).collect();
    let (_, stats_a) = standardize(&a, None).unwrap();
    let (b_with_a, used) = standardize(&b, Some(&stats_a)).unwrap();
    assert_eq!(used, stats_a);
    let (b_self, _) = standardize(&b, None).unwrap();
    assert_ne!(b_with_a, b_self);
    // direct computation of one entry
    let mean = 2.0;
    let std = (2.0f64 / 3.0).sqrt();
    assert!((b_with_a[0].values.at2(0, 0) - (5.0 - mean) / std).abs() < 1e-12);
    let _ = NormStats::fit(&a).unwrap();
}
