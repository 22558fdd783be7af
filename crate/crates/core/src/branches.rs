//! The two parallel supervised feature extractors.
//!
//! Both branches are six layers deep counting input and output: four
//! hidden layers, the last of which is the exported feature, followed by
//! an affine softmax head that is only used while the branch trains.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::CovMatrix;
use crate::error::{Error, Result};
use crate::graph::{Graph, LstmVars, Var};
use crate::params::{he_normal, xavier_uniform, Bound, ParamStore};
use crate::tensor::Tensor;

/// Gain applied to the Xavier range of softmax output layers so the
/// initial class distribution is close to uniform.
pub const OUTPUT_GAIN: f64 = 0.1;

/// A network that maps a batch of inputs to `(feature, logits)`.
pub trait Classifier {
    /// Width of the exported feature.
    fn feature_width(&self) -> usize;

    fn classes(&self) -> usize;

    /// Builds the forward pass for `batch` on `g`; both outputs are `[B×·]`.
    fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Tensor]) -> Result<(Var, Var)>;
}

/// Output of one branch for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Runs `net` on one input with frozen parameters.
pub fn forward_one<N: Classifier>(net: &N, params: &ParamStore, input: &Tensor) -> Result<BranchOutput> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (f, l) = net.forward(&mut g, &p, &[input])?;
    Ok(BranchOutput {
        feature: g.value(f).data().to_vec(),
        logits: g.value(l).data().to_vec(),
    })
}

/// Features `[B×width]` and logits `[B×K]` for a batch, with frozen parameters.
pub fn forward_batch<N: Classifier>(net: &N, params: &ParamStore, batch: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (f, l) = net.forward(&mut g, &p, batch)?;
    Ok((g.value(f).clone(), g.value(l).clone()))
}

fn dense(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn dense_relu(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = dense(g, p, name, x)?;
    Ok(g.relu(y))
}

pub(crate) fn insert_dense_he<R: Rng>(
    s: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    s.insert(&format!("{name}.w"), he_normal(rng, &[fan_in, fan_out], fan_in))?;
    s.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn insert_dense_xavier<R: Rng>(
    s: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> Result<()> {
    s.insert(
        &format!("{name}.w"),
        xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out, gain),
    )?;
    s.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

fn matrix_input(batch: &[&Tensor], channels: usize) -> Result<()> {
    for t in batch {
        if t.shape() != [channels, channels] {
            return Err(Error::dim("branch input", &[channels, channels], t.shape()));
        }
    }
    Ok(())
}

/// 1D CNN over the covariance matrix, read as `C` input channels of
/// length-`C` signals: conv → conv → FC → FC (feature) → logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub channels: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub fc1_width: usize,
    pub feature_width: usize,
    pub classes: usize,
}

impl CnnSpec {
    pub fn new(channels: usize, classes: usize) -> Self {
        Self {
            channels,
            conv1_filters: 32,
            conv1_kernel: 3,
            conv2_filters: 64,
            conv2_kernel: 3,
            fc1_width: 128,
            feature_width: 64,
            classes,
        }
    }

    /// Length of each conv2 output row.
    fn conv_out_len(&self) -> Option<usize> {
        let l1 = (self.channels + 1).checked_sub(self.conv1_kernel)?;
        let l2 = (l1 + 1).checked_sub(self.conv2_kernel)?;
        (l1 > 0 && l2 > 0).then_some(l2)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.conv1_filters,
            self.conv1_kernel,
            self.conv2_filters,
            self.conv2_kernel,
            self.fc1_width,
            self.feature_width,
        ];
        if widths.contains(&0) || self.classes < 2 {
            return Err(Error::Config(format!(
                "CNN widths must be positive and classes ≥ 2: {self:?}"
            )));
        }
        if self.conv_out_len().is_none() {
            return Err(Error::Config(format!(
                "{} channels are too few for conv kernels {} and {}",
                self.channels, self.conv1_kernel, self.conv2_kernel
            )));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, rng: &mut R, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let (c, k1, f1, k2, f2) = (
            self.channels,
            self.conv1_kernel,
            self.conv1_filters,
            self.conv2_kernel,
            self.conv2_filters,
        );
        let mut s = ParamStore::new(seed);
        s.insert("conv1.w", he_normal(rng, &[f1, c, k1], c * k1))?;
        s.insert("conv1.b", Tensor::zeros(&[f1]))?;
        s.insert("conv2.w", he_normal(rng, &[f2, f1, k2], f1 * k2))?;
        s.insert("conv2.b", Tensor::zeros(&[f2]))?;
        let flat = f2 * self.conv_out_len().unwrap_or(0);
        insert_dense_he(&mut s, rng, "fc1", flat, self.fc1_width)?;
        insert_dense_he(&mut s, rng, "fc2", self.fc1_width, self.feature_width)?;
        insert_dense_xavier(&mut s, rng, "out", self.feature_width, self.classes, OUTPUT_GAIN)?;
        Ok(s)
    }
}

impl Classifier for CnnSpec {
    fn feature_width(&self) -> usize {
        self.feature_width
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Tensor]) -> Result<(Var, Var)> {
        matrix_input(batch, self.channels)?;
        let (w1, b1) = (p.get("conv1.w")?, p.get("conv1.b")?);
        let (w2, b2) = (p.get("conv2.w")?, p.get("conv2.b")?);
        let mut rows = Vec::with_capacity(batch.len());
        for m in batch {
            let x = g.constant((*m).clone());
            let h = g.conv1d(x, w1, b1)?;
            let h = g.relu(h);
            let h = g.conv1d(h, w2, b2)?;
            let h = g.relu(h);
            let n = g.value(h).len();
            rows.push(g.reshape(h, &[1, n])?);
        }
        let flat = g.concat_rows(&rows)?;
        let h = dense_relu(g, p, "fc1", flat)?;
        let feature = dense_relu(g, p, "fc2", h)?;
        let logits = dense(g, p, "out", feature)?;
        Ok((feature, logits))
    }
}

/// Order of the fully connected and recurrent blocks in the RNN branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RnnOrder {
    /// FC → FC applied per step, then LSTM → LSTM; feature = last LSTM2 state.
    FcFirst,
    /// LSTM → LSTM, then FC → FC on the last state; feature = FC2 output.
    LstmFirst,
}

/// Which axis of the covariance matrix is walked as the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqAxis {
    Rows,
    Columns,
}

/// Two fully connected layers and two stacked LSTM layers over the
/// `C` rows (or columns) of the covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnSpec {
    pub channels: usize,
    pub fc1_width: usize,
    pub fc2_width: usize,
    pub lstm1_hidden: usize,
    pub lstm2_hidden: usize,
    pub classes: usize,
    pub order: RnnOrder,
    pub axis: SeqAxis,
}

impl RnnSpec {
    pub fn new(channels: usize, classes: usize) -> Self {
        Self {
            channels,
            fc1_width: 128,
            fc2_width: 64,
            lstm1_hidden: 64,
            lstm2_hidden: 64,
            classes,
            order: RnnOrder::FcFirst,
            axis: SeqAxis::Rows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.channels,
            self.fc1_width,
            self.fc2_width,
            self.lstm1_hidden,
            self.lstm2_hidden,
        ];
        if widths.contains(&0) || self.classes < 2 {
            return Err(Error::Config(format!(
                "RNN widths must be positive and classes ≥ 2: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn init<R: Rng>(&self, rng: &mut R, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut s = ParamStore::new(seed);
        match self.order {
            RnnOrder::FcFirst => {
                insert_dense_he(&mut s, rng, "fc1", self.channels, self.fc1_width)?;
                insert_dense_he(&mut s, rng, "fc2", self.fc1_width, self.fc2_width)?;
                insert_lstm(&mut s, rng, "lstm1", self.fc2_width, self.lstm1_hidden)?;
                insert_lstm(&mut s, rng, "lstm2", self.lstm1_hidden, self.lstm2_hidden)?;
            }
            RnnOrder::LstmFirst => {
                insert_lstm(&mut s, rng, "lstm1", self.channels, self.lstm1_hidden)?;
                insert_lstm(&mut s, rng, "lstm2", self.lstm1_hidden, self.lstm2_hidden)?;
                insert_dense_he(&mut s, rng, "fc1", self.lstm2_hidden, self.fc1_width)?;
                insert_dense_he(&mut s, rng, "fc2", self.fc1_width, self.fc2_width)?;
            }
        }
        insert_dense_xavier(&mut s, rng, "out", self.feature_width(), self.classes, OUTPUT_GAIN)?;
        Ok(s)
    }

    /// Sequence step `t` of every batch member as a `[B×C]` matrix.
    fn step_input(&self, batch: &[&Tensor], t: usize) -> Tensor {
        let c = self.channels;
        let mut data = Vec::with_capacity(batch.len() * c);
        for m in batch {
            match self.axis {
                SeqAxis::Rows => data.extend_from_slice(m.row(t)),
                SeqAxis::Columns => data.extend((0..c).map(|r| m.at2(r, t))),
            }
        }
        Tensor::new(&[batch.len(), c], data).expect("step shape")
    }

    fn lstm_vars(p: &Bound, name: &str) -> Result<LstmVars> {
        Ok(LstmVars {
            w_input: p.get(&format!("{name}.wx"))?,
            w_hidden: p.get(&format!("{name}.wh"))?,
            bias: p.get(&format!("{name}.b"))?,
        })
    }
}

fn insert_lstm<R: Rng>(s: &mut ParamStore, rng: &mut R, name: &str, input: usize, hidden: usize) -> Result<()> {
    s.insert(
        &format!("{name}.wx"),
        xavier_uniform(rng, &[input, 4 * hidden], input, 4 * hidden, 1.0),
    )?;
    s.insert(
        &format!("{name}.wh"),
        xavier_uniform(rng, &[hidden, 4 * hidden], hidden, 4 * hidden, 1.0),
    )?;
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    s.insert(&format!("{name}.b"), b)
}

impl Classifier for RnnSpec {
    fn feature_width(&self) -> usize {
        match self.order {
            RnnOrder::FcFirst => self.lstm2_hidden,
            RnnOrder::LstmFirst => self.fc2_width,
        }
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn forward(&self, g: &mut Graph, p: &Bound, batch: &[&Tensor]) -> Result<(Var, Var)> {
        matrix_input(batch, self.channels)?;
        let b = batch.len();
        let l1 = Self::lstm_vars(p, "lstm1")?;
        let l2 = Self::lstm_vars(p, "lstm2")?;
        let mut h1 = g.constant(Tensor::zeros(&[b, self.lstm1_hidden]));
        let mut c1 = h1;
        let mut h2 = g.constant(Tensor::zeros(&[b, self.lstm2_hidden]));
        let mut c2 = h2;
        for t in 0..self.channels {
            let mut x = g.constant(self.step_input(batch, t));
            if self.order == RnnOrder::FcFirst {
                x = dense_relu(g, p, "fc1", x)?;
                x = dense_relu(g, p, "fc2", x)?;
            }
            (h1, c1) = g.lstm_cell(x, h1, c1, &l1)?;
            (h2, c2) = g.lstm_cell(h1, h2, c2, &l2)?;
        }
        let feature = match self.order {
            RnnOrder::FcFirst => h2,
            RnnOrder::LstmFirst => {
                let h = dense_relu(g, p, "fc1", h2)?;
                dense_relu(g, p, "fc2", h)?
            }
        };
        let logits = dense(g, p, "out", feature)?;
        Ok((feature, logits))
    }
}

/// `[cnn feature ‖ rnn feature]` for one standardized covariance matrix.
pub fn extract_features(
    m: &CovMatrix,
    cnn: (&CnnSpec, Option<&ParamStore>),
    rnn: (&RnnSpec, Option<&ParamStore>),
) -> Result<Vec<f64>> {
    let batch = extract_features_batch(core::slice::from_ref(&m.values), cnn, rnn)?;
    Ok(batch.into_data())
}

/// Concatenated branch features `[B × (cnn + rnn width)]`, CNN first.
pub fn extract_features_batch(
    inputs: &[Tensor],
    cnn: (&CnnSpec, Option<&ParamStore>),
    rnn: (&RnnSpec, Option<&ParamStore>),
) -> Result<Tensor> {
    let cnn_params = cnn
        .1
        .ok_or_else(|| Error::State("stage \"cnn\" has no weights".into()))?;
    let rnn_params = rnn
        .1
        .ok_or_else(|| Error::State("stage \"rnn\" has no weights".into()))?;
    let refs: Vec<&Tensor> = inputs.iter().collect();
    let (fc, _) = forward_batch(cnn.0, cnn_params, &refs)?;
    let (fr, _) = forward_batch(rnn.0, rnn_params, &refs)?;
    let (wc, wr) = (cnn.0.feature_width, rnn.0.feature_width());
    let mut data = Vec::with_capacity(inputs.len() * (wc + wr));
    for i in 0..inputs.len() {
        data.extend_from_slice(fc.row(i));
        data.extend_from_slice(fr.row(i));
    }
    Tensor::new(&[inputs.len(), wc + wr], data)
}

/// Replaces every parameter value with zero.
pub fn zeroed(params: &ParamStore) -> ParamStore {
    let mut out = params.clone();
    for p in out.iter_mut() {
        p.value.fill(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[c, c], (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cnn_shapes() {
        let spec = CnnSpec::new(8, 3);
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
        let out = forward_one(&spec, &params, &input(8, 2)).unwrap();
        assert_eq!(out.feature.len(), 64);
        assert_eq!(out.logits.len(), 3);
    }

    #[test]
    fn cnn_rejects_too_few_channels() {
        assert!(matches!(CnnSpec::new(4, 3).validate(), Err(Error::Config(_))));
        assert!(CnnSpec::new(5, 3).validate().is_ok());
    }

    #[test]
    fn zero_networks_are_uniform() {
        let cnn = CnnSpec::new(6, 3);
        let rnn = RnnSpec::new(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cp = zeroed(&cnn.init(&mut rng, 3).unwrap());
        let rp = zeroed(&rnn.init(&mut rng, 3).unwrap());
        let x = input(6, 4);
        for out in [forward_one(&cnn, &cp, &x).unwrap(), forward_one(&rnn, &rp, &x).unwrap()] {
            assert!(out.feature.iter().all(|&v| v == 0.0));
            assert!(out.logits.iter().all(|&v| v == 0.0));
            let p = softmax_rows(&Tensor::vector(&out.logits));
            assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let cm = CovMatrix { values: x, lag: 0 };
        let f = extract_features(&cm, (&cnn, Some(&cp)), (&rnn, Some(&rp))).unwrap();
        assert_eq!(f.len(), 128);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_rnn_is_one_cell_chain() {
        let spec = RnnSpec {
            channels: 1,
            fc1_width: 5,
            fc2_width: 4,
            lstm1_hidden: 3,
            lstm2_hidden: 3,
            classes: 2,
            order: RnnOrder::FcFirst,
            axis: SeqAxis::Rows,
        };
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(9), 9).unwrap();
        let x = Tensor::new(&[1, 1], alloc::vec![0.7]).unwrap();
        let out = forward_one(&spec, &params, &x).unwrap();

        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let v = g.constant(Tensor::new(&[1, 1], alloc::vec![0.7]).unwrap());
        let v = dense_relu(&mut g, &p, "fc1", v).unwrap();
        let v = dense_relu(&mut g, &p, "fc2", v).unwrap();
        let z3 = g.constant(Tensor::zeros(&[1, 3]));
        let (h1, _) = g
            .lstm_cell(v, z3, z3, &RnnSpec::lstm_vars(&p, "lstm1").unwrap())
            .unwrap();
        let (h2, _) = g
            .lstm_cell(h1, z3, z3, &RnnSpec::lstm_vars(&p, "lstm2").unwrap())
            .unwrap();
        assert_eq!(g.value(h2).data(), out.feature.as_slice());
    }

    #[test]
    fn lstm_first_order_and_column_axis() {
        let mut spec = RnnSpec::new(5, 3);
        spec.order = RnnOrder::LstmFirst;
        spec.fc2_width = 16;
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(5), 5).unwrap();
        let x = input(5, 6);
        let out = forward_one(&spec, &params, &x).unwrap();
        assert_eq!(out.feature.len(), 16);

        // columns of a symmetric matrix are its rows
        let mut sym = x.clone();
        for i in 0..5 {
            for j in 0..5 {
                sym.data_mut()[i * 5 + j] = x.at2(i, j) + x.at2(j, i);
            }
        }
        let rows = forward_one(&spec, &params, &sym).unwrap();
        spec.axis = SeqAxis::Columns;
        let cols = forward_one(&spec, &params, &sym).unwrap();
        assert_eq!(rows, cols);
    }

    #[test]
    fn concatenation_keeps_branch_values_at_offsets() {
        let cnn = CnnSpec::new(6, 2);
        let rnn = RnnSpec::new(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cp = cnn.init(&mut rng, 11).unwrap();
        let rp = rnn.init(&mut rng, 11).unwrap();
        let x = input(6, 12);
        let f = extract_features(
            &CovMatrix {
                values: x.clone(),
                lag: 0,
            },
            (&cnn, Some(&cp)),
            (&rnn, Some(&rp)),
        )
        .unwrap();
        assert_eq!(&f[..64], forward_one(&cnn, &cp, &x).unwrap().feature.as_slice());
        assert_eq!(&f[64..], forward_one(&rnn, &rp, &x).unwrap().feature.as_slice());
    }

    #[test]
    fn missing_branch_weights_is_state_error() {
        let cnn = CnnSpec::new(6, 2);
        let rnn = RnnSpec::new(6, 2);
        let cp = cnn.init(&mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
        let m = CovMatrix {
            values: input(6, 1),
            lag: 0,
        };
        match extract_features(&m, (&cnn, Some(&cp)), (&rnn, None)) {
            Err(Error::State(msg)) => assert!(msg.contains("rnn")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let spec = CnnSpec::new(6, 3);
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(2), 2).unwrap();
        let xs: Vec<Tensor> = (0..4).map(|s| input(6, 100 + s)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let (feat, _) = forward_batch(&spec, &params, &refs).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let one = forward_one(&spec, &params, x).unwrap();
            for (a, b) in feat.row(i).iter().zip(&one.feature) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
