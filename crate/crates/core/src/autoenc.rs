//! Deep autoencoder over concatenated branch features, the final softmax
//! classifier over its latent codes, and the assembled pipeline.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{
    extract_features_batch, insert_dense_he, insert_dense_xavier, Classifier, CnnSpec, RnnSpec, OUTPUT_GAIN,
};
use crate::covariance::{ccv, CovMatrix, NormStats};
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;
use crate::trial::Trial;

/// Encoder `input → hidden → latent`, mirrored decoder, ReLU on every
/// hidden layer and a linear reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeSpec {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl DaeSpec {
    pub fn new(input: usize) -> Self {
        Self {
            input,
            hidden: 64,
            latent: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.latent >= self.input {
            return Err(Error::Config(format!("autoencoder needs 0 < latent < input: {self:?}")));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, rng: &mut R, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new(seed);
        insert_dense_he(&mut s, rng, "enc1", self.input, self.hidden)?;
        insert_dense_he(&mut s, rng, "enc2", self.hidden, self.latent)?;
        insert_dense_he(&mut s, rng, "dec1", self.latent, self.hidden)?;
        insert_dense_xavier(&mut s, rng, "dec2", self.hidden, self.input, 1.0)?;
        Ok(s)
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = dense(g, p, "enc1", x)?;
        let h = g.relu(h);
        let z = dense(g, p, "enc2", h)?;
        Ok(g.relu(z))
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let h = dense(g, p, "dec1", z)?;
        let h = g.relu(h);
        dense(g, p, "dec2", h)
    }

    /// Reconstruction MSE of `features` (`[B×input]`); no labels involved.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, features: &Tensor) -> Result<Var> {
        let x = g.constant(features.clone());
        let z = self.encode_graph(g, p, x)?;
        let r = self.decode_graph(g, p, z)?;
        g.mse(r, features)
    }
}

fn dense(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn as_rows(features: &Tensor, width: usize) -> Result<Tensor> {
    if !features.len().is_multiple_of(width.max(1)) || features.is_empty() {
        return Err(Error::dim("features", &[width], features.shape()));
    }
    features.clone().reshape(&[features.len() / width, width])
}

/// Latent codes `[B×latent]` for features `[B×input]` (or one `[input]` vector).
pub fn dae_encode(spec: &DaeSpec, params: Option<&ParamStore>, features: &Tensor) -> Result<Tensor> {
    let params = params.ok_or_else(|| Error::State("stage \"dae\" has no weights".into()))?;
    let x = as_rows(features, spec.input)?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(x);
    let z = spec.encode_graph(&mut g, &p, x)?;
    Ok(g.value(z).clone())
}

/// Reconstruction MSE, `mean((decode(encode(f)) − f)²)`.
pub fn dae_loss(spec: &DaeSpec, params: &ParamStore, features: &Tensor) -> Result<f64> {
    let x = as_rows(features, spec.input)?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let l = spec.loss_graph(&mut g, &p, &x)?;
    Ok(g.value(l).data()[0])
}

/// Two-layer fully connected softmax classifier over latent codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: 16,
            classes,
        }
    }

    pub fn init<R: Rng>(&self, rng: &mut R, seed: u64) -> Result<ParamStore> {
        if self.input == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid head widths: {self:?}")));
        }
        let mut s = ParamStore::new(seed);
        insert_dense_he(&mut s, rng, "fc1", self.input, self.hidden)?;
        insert_dense_xavier(&mut s, rng, "out", self.hidden, self.classes, OUTPUT_GAIN)?;
        Ok(s)
    }
}

impl Classifier for HeadSpec {
    fn feature_width(&self) -> usize {
        self.hidden
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Tensor]) -> Result<(Var, Var)> {
        let mut data = Vec::with_capacity(batch.len() * self.input);
        for z in batch {
            if z.len() != self.input {
                return Err(Error::dim("head", &[self.input], z.shape()));
            }
            data.extend_from_slice(z.data());
        }
        let x = g.constant(Tensor::new(&[batch.len(), self.input], data)?);
        let h = dense(g, p, "fc1", x)?;
        let h = g.relu(h);
        let logits = dense(g, p, "out", h)?;
        Ok((h, logits))
    }
}

/// Logits `[B×K]` of the head for latent codes `[B×latent]`.
pub fn head_forward(spec: &HeadSpec, params: Option<&ParamStore>, latents: &Tensor) -> Result<Tensor> {
    let params = params.ok_or_else(|| Error::State("stage \"head\" has no weights".into()))?;
    let z = as_rows(latents, spec.input)?;
    let rows: Vec<Tensor> = (0..z.shape()[0]).map(|i| Tensor::vector(z.row(i))).collect();
    let refs: Vec<&Tensor> = rows.iter().collect();
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (_, logits) = spec.forward(&mut g, &p, &refs)?;
    Ok(g.value(logits).clone())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Architecture of all four networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub cnn: CnnSpec,
    pub rnn: RnnSpec,
    pub dae: DaeSpec,
    pub head: HeadSpec,
}

/// Every trained stage plus the input conditioning they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub arch: Architecture,
    pub lag: i64,
    pub norm: Option<NormStats>,
    pub cnn: Option<ParamStore>,
    pub rnn: Option<ParamStore>,
    pub dae: Option<ParamStore>,
    pub head: Option<ParamStore>,
}

/// Class decision and its probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

pub const STAGES: [&str; 4] = ["cnn", "rnn", "dae", "head"];

impl Pipeline {
    pub fn stage(&self, name: &str) -> Option<&ParamStore> {
        match name {
            "cnn" => self.cnn.as_ref(),
            "rnn" => self.rnn.as_ref(),
            "dae" => self.dae.as_ref(),
            "head" => self.head.as_ref(),
            _ => None,
        }
    }

    fn check_complete(&self) -> Result<()> {
        if let Some(missing) = STAGES.iter().find(|s| self.stage(s).is_none()) {
            return Err(Error::State(format!("stage {missing:?} has no weights")));
        }
        Ok(())
    }

    /// Concatenated branch features for standardized inputs.
    pub fn features(&self, inputs: &[Tensor]) -> Result<Tensor> {
        extract_features_batch(
            inputs,
            (&self.arch.cnn, self.cnn.as_ref()),
            (&self.arch.rnn, self.rnn.as_ref()),
        )
    }

    pub fn latents(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let f = self.features(inputs)?;
        dae_encode(&self.arch.dae, self.dae.as_ref(), &f)
    }

    /// Full forward pass for standardized covariance matrices.
    pub fn predict_batch(&self, inputs: &[Tensor]) -> Result<Vec<Prediction>> {
        self.check_complete()?;
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.latents(inputs)?;
        let logits = head_forward(&self.arch.head, self.head.as_ref(), &z)?;
        let probs = softmax_rows(&logits);
        Ok((0..inputs.len())
            .map(|i| {
                let p = probs.row(i).to_vec();
                Prediction {
                    class: argmax(&p),
                    probs: p,
                }
            })
            .collect())
    }

    /// Prediction for one standardized covariance matrix.
    pub fn predict(&self, m: &CovMatrix) -> Result<Prediction> {
        let mut out = self.predict_batch(core::slice::from_ref(&m.values))?;
        Ok(out.remove(0))
    }

    /// Covariance, standardization and prediction for a raw trial.
    pub fn network_input(&self, trial: &Trial) -> Result<Tensor> {
        let norm = self
            .norm
            .as_ref()
            .ok_or_else(|| Error::State("stage \"norm\" has no statistics".into()))?;
        Ok(norm.apply(&ccv(trial, self.lag)?)?.values)
    }

    pub fn classify(&self, trials: &[Trial]) -> Result<Vec<Prediction>> {
        let inputs = trials
            .iter()
            .map(|t| self.network_input(t))
            .collect::<Result<Vec<_>>>()?;
        self.predict_batch(&inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::zeroed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_pipeline(c: usize, k: usize) -> Pipeline {
        let arch = Architecture {
            cnn: CnnSpec::new(c, k),
            rnn: RnnSpec::new(c, k),
            dae: DaeSpec::new(128),
            head: HeadSpec::new(32, k),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Pipeline {
            cnn: Some(zeroed(&arch.cnn.init(&mut rng, 0).unwrap())),
            rnn: Some(zeroed(&arch.rnn.init(&mut rng, 0).unwrap())),
            dae: Some(zeroed(&arch.dae.init(&mut rng, 0).unwrap())),
            head: Some(zeroed(&arch.head.init(&mut rng, 0).unwrap())),
            norm: None,
            lag: 0,
            arch,
        }
    }

    #[test]
    fn zero_dae() {
        let spec = DaeSpec::new(128);
        let p = zeroed(&spec.init(&mut ChaCha8Rng::seed_from_u64(1), 1).unwrap());
        let z = dae_encode(&spec, Some(&p), &Tensor::full(&[128], 0.3)).unwrap();
        assert_eq!(z.shape(), &[1, 32]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(dae_loss(&spec, &p, &Tensor::zeros(&[128])).unwrap(), 0.0);
        assert_eq!(dae_loss(&spec, &p, &Tensor::full(&[128], 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn head_logits_and_shift_invariance() {
        let spec = HeadSpec::new(32, 3);
        let p = spec.init(&mut ChaCha8Rng::seed_from_u64(2), 2).unwrap();
        let z = Tensor::full(&[32], 0.5);
        let l = head_forward(&spec, Some(&p), &z).unwrap();
        assert_eq!(l.shape(), &[1, 3]);
        let shifted: Vec<f64> = l.data().iter().map(|v| v + 17.0).collect();
        assert_eq!(argmax(l.data()), argmax(&shifted));
        let zp = zeroed(&p);
        let l0 = head_forward(&spec, Some(&zp), &z).unwrap();
        assert!(l0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_pipeline_predicts_class_zero_uniformly() {
        let pipe = zero_pipeline(6, 3);
        let m = CovMatrix {
            values: Tensor::full(&[6, 6], 0.4),
            lag: 0,
        };
        let pred = pipe.predict(&m).unwrap();
        assert_eq!(pred.class, 0);
        for p in &pred.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_stage_is_named() {
        let mut pipe = zero_pipeline(6, 2);
        pipe.dae = None;
        let m = CovMatrix {
            values: Tensor::zeros(&[6, 6]),
            lag: 0,
        };
        match pipe.predict(&m) {
            Err(Error::State(msg)) => assert!(msg.contains("dae")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }
}
