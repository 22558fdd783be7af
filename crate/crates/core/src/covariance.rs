//! Channel cross-covariance features.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trial::Trial;

/// `C×C` channel cross-covariance at a fixed lag (in samples).
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    pub values: Tensor,
    pub lag: i64,
}

impl CovMatrix {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Lagged channel cross-covariance of one trial.
///
/// `out[i,j] = Σ_t (x_i(t) − μ_i)(x_j(t+τ) − μ_j) / (N − 1)` over the
/// `N = T − |τ|` overlapping samples, with each mean taken over the window
/// the channel contributes. At `τ = 0` this is the sample covariance and
/// the upper triangle is mirrored, so the result is exactly symmetric.
pub fn ccv(trial: &Trial, lag: i64) -> Result<CovMatrix> {
    let (c, t) = (trial.channels(), trial.samples());
    let shift = lag.unsigned_abs() as usize;
    if shift >= t {
        return Err(Error::Config(format!("lag {lag} must be smaller than {t} samples")));
    }
    let n = t - shift;
    if n <= 1 {
        return Err(Error::Data(format!(
            "trial {:?}: window of {n} sample(s) at lag {lag} has no covariance",
            trial.trial_id
        )));
    }
    // lead channel i reads [a, a+n), lagged channel j reads [b, b+n)
    let (a, b) = if lag >= 0 { (0, shift) } else { (shift, 0) };
    let centred = |start: usize| -> Vec<Vec<f64>> {
        (0..c)
            .map(|ch| {
                let w = &trial.channel(ch)[start..start + n];
                let mu = w.iter().sum::<f64>() / n as f64;
                w.iter().map(|x| x - mu).collect()
            })
            .collect()
    };
    let lead = centred(a);
    let lagged = if lag == 0 { lead.clone() } else { centred(b) };
    let denom = (n - 1) as f64;
    let mut out = Tensor::zeros(&[c, c]);
    for i in 0..c {
        let from = if lag == 0 { i } else { 0 };
        for j in from..c {
            let s: f64 = lead[i].iter().zip(&lagged[j]).map(|(x, y)| x * y).sum();
            out.data_mut()[i * c + j] = s / denom;
            if lag == 0 {
                out.data_mut()[j * c + i] = s / denom;
            }
        }
    }
    Ok(CovMatrix { values: out, lag })
}

/// Per-entry mean and standard deviation fitted on a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn fit(mats: &[CovMatrix]) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| Error::Data("cannot standardize an empty set of matrices".into()))?;
        let shape = first.values.shape().to_vec();
        let n = mats.len() as f64;
        let mut mean = Tensor::zeros(&shape);
        for m in mats {
            if m.values.shape() != shape.as_slice() {
                return Err(Error::dim("standardize", &shape, m.values.shape()));
            }
            mean.add_assign(&m.values);
        }
        let mean = mean.scale(1.0 / n);
        let mut var = Tensor::zeros(&shape);
        for m in mats {
            for ((v, x), mu) in var.data_mut().iter_mut().zip(m.values.data()).zip(mean.data()) {
                *v += (x - mu) * (x - mu);
            }
        }
        let std = var.map(|v| libm::sqrt(v / n).max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &CovMatrix) -> Result<CovMatrix> {
        if m.values.shape() != self.mean.shape() {
            return Err(Error::dim("standardize", self.mean.shape(), m.values.shape()));
        }
        let data = m
            .values
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.std.data())
            .map(|((x, mu), s)| (x - mu) / s)
            .collect();
        Ok(CovMatrix {
            values: Tensor::new(m.values.shape(), data)?,
            lag: m.lag,
        })
    }
}

/// Z-scores every entry. Without `stats` they are fitted on `mats`;
/// either way the stats used are returned for reuse on held-out data.
pub fn standardize(mats: &[CovMatrix], stats: Option<&NormStats>) -> Result<(Vec<CovMatrix>, NormStats)> {
    if mats.is_empty() {
        return Err(Error::Data("cannot standardize an empty set of matrices".into()));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(mats)?,
    };
    let out = mats.iter().map(|m| stats.apply(m)).collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(rows: &[&[f64]]) -> Trial {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Trial::new(Tensor::from_rows(&rows).unwrap(), 0, "s", "t").unwrap()
    }

    #[test]
    fn constant_channels_have_zero_covariance() {
        let m = ccv(&trial(&[&[2.0; 5], &[-1.0; 5]]), 0).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_channels_give_sample_variance() {
        let m = ccv(&trial(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]), 0).unwrap();
        for v in m.values.data() {
            assert!((v - 5.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_channel_pair() {
        let m = ccv(&trial(&[&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]]), 0).unwrap();
        let want = [5.0 / 3.0, 10.0 / 3.0, 10.0 / 3.0, 20.0 / 3.0];
        for (v, w) in m.values.data().iter().zip(want) {
            assert!((v - w).abs() < 1e-10);
        }
    }

    #[test]
    fn lag_shifts_the_second_channel() {
        // x2 is x1 delayed by one sample; at lag 1 the pair lines up
        let m = ccv(&trial(&[&[1.0, 3.0, 2.0, 5.0, 4.0], &[0.0, 1.0, 3.0, 2.0, 5.0]]), 1).unwrap();
        let var = ccv(&trial(&[&[1.0, 3.0, 2.0, 5.0], &[1.0, 3.0, 2.0, 5.0]]), 0).unwrap();
        assert!((m.values.at2(0, 1) - var.values.at2(0, 0)).abs() < 1e-12);
        let back = ccv(&trial(&[&[0.0, 1.0, 3.0, 2.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]]), -1).unwrap();
        assert!((back.values.at2(0, 1) - var.values.at2(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn lag_errors() {
        let t = trial(&[&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]]);
        assert!(matches!(ccv(&t, 3), Err(Error::Config(_))));
        assert!(matches!(ccv(&t, -4), Err(Error::Config(_))));
        assert!(matches!(ccv(&t, 2), Err(Error::Data(_))));
    }

    #[test]
    fn standardize_against_itself() {
        let m = ccv(&trial(&[&[1.0, 2.0, 4.0], &[0.0, 1.0, 5.0]]), 0).unwrap();
        let (out, _) = standardize(&[m], None).unwrap();
        assert!(out[0].values.data().iter().all(|&v| v == 0.0));
        assert!(standardize(&[], None).is_err());
    }

    #[test]
    fn fitted_set_is_zero_mean_unit_std() {
        let mats: Vec<CovMatrix> = (0..6)
            .map(|k| {
                let k = k as f64;
                ccv(&trial(&[&[1.0, k, 2.0 * k, 0.5], &[k * k, 1.0, -k, 3.0]]), 0).unwrap()
            })
            .collect();
        let (out, _) = standardize(&mats, None).unwrap();
        let stats = NormStats::fit(&out).unwrap();
        for (mu, sd) in stats.mean.data().iter().zip(stats.std.data()) {
            assert!(mu.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-6);
        }
    }
}
