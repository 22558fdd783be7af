//! Run configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Unknown keys are rejected. [`TrainConfig::to_kv`] writes every
//! key in a fixed order, so an echoed config parses back to the same value.

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt::Write;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoenc::{Architecture, DaeSpec, HeadSpec};
use crate::branches::{CnnSpec, RnnOrder, RnnSpec, SeqAxis};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Learning rates of stage 1 (branches), 2 (autoencoder) and 3 (head).
    pub lr: [f64; 3],
    pub batch_size: usize,
    pub epochs: [usize; 3],
    /// Covariance lag in samples.
    pub lag: i64,
    /// Number of classes; 0 means "take it from the data".
    pub classes: usize,
    pub split_fraction: f64,
    /// Early-stopping patience in epochs on validation loss; `None` trains
    /// for exactly `epochs` and keeps the last weights.
    pub patience: Option<usize>,
    pub cnn_conv1_filters: usize,
    pub cnn_conv1_kernel: usize,
    pub cnn_conv2_filters: usize,
    pub cnn_conv2_kernel: usize,
    pub cnn_fc1: usize,
    pub cnn_feature: usize,
    pub rnn_fc1: usize,
    pub rnn_fc2: usize,
    pub rnn_lstm1: usize,
    pub rnn_lstm2: usize,
    pub rnn_order: RnnOrder,
    pub rnn_axis: SeqAxis,
    pub dae_hidden: usize,
    pub dae_latent: usize,
    pub head_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: [1e-3; 3],
            batch_size: 16,
            epochs: [100, 200, 100],
            lag: 0,
            classes: 0,
            split_fraction: 0.8,
            patience: Some(25),
            cnn_conv1_filters: 32,
            cnn_conv1_kernel: 3,
            cnn_conv2_filters: 64,
            cnn_conv2_kernel: 3,
            cnn_fc1: 128,
            cnn_feature: 64,
            rnn_fc1: 128,
            rnn_fc2: 64,
            rnn_lstm1: 64,
            rnn_lstm2: 64,
            rnn_order: RnnOrder::FcFirst,
            rnn_axis: SeqAxis::Rows,
            dae_hidden: 64,
            dae_latent: 32,
            head_hidden: 16,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: alloc::vec::Vec<&str> = value.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [one] => Ok([parse(key, one)?; 3]),
        [a, b, c] => Ok([parse(key, a)?, parse(key, b)?, parse(key, c)?]),
        _ => Err(Error::Config(format!(
            "{key} takes one value or three comma-separated values"
        ))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {:?}",
                self.lr
            )));
        }
        if self.classes == 1 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        Ok(())
    }

    /// Network shapes for `channels` electrodes and `classes` labels.
    pub fn architecture(&self, channels: usize, classes: usize) -> Result<Architecture> {
        let cnn = CnnSpec {
            channels,
            conv1_filters: self.cnn_conv1_filters,
            conv1_kernel: self.cnn_conv1_kernel,
            conv2_filters: self.cnn_conv2_filters,
            conv2_kernel: self.cnn_conv2_kernel,
            fc1_width: self.cnn_fc1,
            feature_width: self.cnn_feature,
            classes,
        };
        let rnn = RnnSpec {
            channels,
            fc1_width: self.rnn_fc1,
            fc2_width: self.rnn_fc2,
            lstm1_hidden: self.rnn_lstm1,
            lstm2_hidden: self.rnn_lstm2,
            classes,
            order: self.rnn_order,
            axis: self.rnn_axis,
        };
        cnn.validate()?;
        rnn.validate()?;
        use crate::branches::Classifier;
        let dae = DaeSpec {
            input: cnn.feature_width + rnn.feature_width(),
            hidden: self.dae_hidden,
            latent: self.dae_latent,
        };
        dae.validate()?;
        let head = HeadSpec {
            input: self.dae_latent,
            hidden: self.head_hidden,
            classes,
        };
        Ok(Architecture { cnn, rnn, dae, head })
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse_triple(key, v)?,
            "lr_stage1" => self.lr[0] = parse(key, v)?,
            "lr_stage2" => self.lr[1] = parse(key, v)?,
            "lr_stage3" => self.lr[2] = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse_triple(key, v)?,
            "epochs_stage1" => self.epochs[0] = parse(key, v)?,
            "epochs_stage2" => self.epochs[1] = parse(key, v)?,
            "epochs_stage3" => self.epochs[2] = parse(key, v)?,
            "lag" => self.lag = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "patience" => {
                self.patience = match v {
                    "off" | "none" => None,
                    n => Some(parse(key, n)?),
                }
            }
            "cnn_conv1_filters" => self.cnn_conv1_filters = parse(key, v)?,
            "cnn_conv1_kernel" => self.cnn_conv1_kernel = parse(key, v)?,
            "cnn_conv2_filters" => self.cnn_conv2_filters = parse(key, v)?,
            "cnn_conv2_kernel" => self.cnn_conv2_kernel = parse(key, v)?,
            "cnn_fc1" => self.cnn_fc1 = parse(key, v)?,
            "cnn_feature" => self.cnn_feature = parse(key, v)?,
            "rnn_fc1" => self.rnn_fc1 = parse(key, v)?,
            "rnn_fc2" => self.rnn_fc2 = parse(key, v)?,
            "rnn_lstm1" => self.rnn_lstm1 = parse(key, v)?,
            "rnn_lstm2" => self.rnn_lstm2 = parse(key, v)?,
            "rnn_order" => {
                self.rnn_order = match v {
                    "fc-first" => RnnOrder::FcFirst,
                    "lstm-first" => RnnOrder::LstmFirst,
                    _ => {
                        return Err(Error::Config(format!(
                            "rnn_order must be fc-first or lstm-first, got {v:?}"
                        )))
                    }
                }
            }
            "rnn_axis" => {
                self.rnn_axis = match v {
                    "rows" => SeqAxis::Rows,
                    "columns" => SeqAxis::Columns,
                    _ => return Err(Error::Config(format!("rnn_axis must be rows or columns, got {v:?}"))),
                }
            }
            "dae_hidden" => self.dae_hidden = parse(key, v)?,
            "dae_latent" => self.dae_latent = parse(key, v)?,
            "head_hidden" => self.head_hidden = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Merges a `key = value` document onto `self`.
    pub fn merge_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        self.validate()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let order = match self.rnn_order {
            RnnOrder::FcFirst => "fc-first",
            RnnOrder::LstmFirst => "lstm-first",
        };
        let axis = match self.rnn_axis {
            SeqAxis::Rows => "rows",
            SeqAxis::Columns => "columns",
        };
        let patience = self.patience.map_or_else(|| "off".to_string(), |p| p.to_string());
        // {:?} prints f64 in shortest round-trip form
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr_stage1 = {:?}", self.lr[0]);
        let _ = writeln!(s, "lr_stage2 = {:?}", self.lr[1]);
        let _ = writeln!(s, "lr_stage3 = {:?}", self.lr[2]);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs_stage1 = {}", self.epochs[0]);
        let _ = writeln!(s, "epochs_stage2 = {}", self.epochs[1]);
        let _ = writeln!(s, "epochs_stage3 = {}", self.epochs[2]);
        let _ = writeln!(s, "lag = {}", self.lag);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "split_fraction = {:?}", self.split_fraction);
        let _ = writeln!(s, "patience = {patience}");
        let _ = writeln!(s, "cnn_conv1_filters = {}", self.cnn_conv1_filters);
        let _ = writeln!(s, "cnn_conv1_kernel = {}", self.cnn_conv1_kernel);
        let _ = writeln!(s, "cnn_conv2_filters = {}", self.cnn_conv2_filters);
        let _ = writeln!(s, "cnn_conv2_kernel = {}", self.cnn_conv2_kernel);
        let _ = writeln!(s, "cnn_fc1 = {}", self.cnn_fc1);
        let _ = writeln!(s, "cnn_feature = {}", self.cnn_feature);
        let _ = writeln!(s, "rnn_fc1 = {}", self.rnn_fc1);
        let _ = writeln!(s, "rnn_fc2 = {}", self.rnn_fc2);
        let _ = writeln!(s, "rnn_lstm1 = {}", self.rnn_lstm1);
        let _ = writeln!(s, "rnn_lstm2 = {}", self.rnn_lstm2);
        let _ = writeln!(s, "rnn_order = {order}");
        let _ = writeln!(s, "rnn_axis = {axis}");
        let _ = writeln!(s, "dae_hidden = {}", self.dae_hidden);
        let _ = writeln!(s, "dae_latent = {}", self.dae_latent);
        let _ = writeln!(s, "head_hidden = {}", self.head_hidden);
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
