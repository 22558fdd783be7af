use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One EEG recording: `channels × samples` plus its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    data: Tensor,
    pub label: usize,
    pub subject_id: String,
    pub trial_id: String,
}

impl Trial {
    pub fn new(data: Tensor, label: usize, subject_id: &str, trial_id: &str) -> Result<Self> {
        let (c, t) = match data.shape() {
            [c, t] => (*c, *t),
            s => {
                return Err(Error::Data(format!(
                    "trial {trial_id:?} must be a matrix, got shape {s:?}"
                )))
            }
        };
        if c < 2 || t < 2 {
            return Err(Error::Data(format!(
                "trial {trial_id:?} needs at least 2 channels and 2 samples, got {c}x{t}"
            )));
        }
        if !data.is_finite() {
            return Err(Error::Data(format!("trial {trial_id:?} contains non-finite samples")));
        }
        Ok(Self {
            data,
            label,
            subject_id: subject_id.into(),
            trial_id: trial_id.into(),
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.row(c)
    }
}

/// Class inventories of the public imagined-speech recordings.
///
/// Label `i` of a task is the `i`-th name in its list.
pub mod tasks {
    pub const VOWELS: [&str; 3] = ["a", "i", "u"];
    pub const SHORT_WORDS: [&str; 3] = ["in", "out", "up"];
    pub const LONG_WORDS: [&str; 2] = ["cooperate", "independent"];

    /// Class names for `vowels`, `short_words` or `long_words`.
    pub fn classes(task: &str) -> Option<&'static [&'static str]> {
        match task {
            "vowels" => Some(&VOWELS),
            "short_words" => Some(&SHORT_WORDS),
            "long_words" => Some(&LONG_WORDS),
            _ => None,
        }
    }
}
