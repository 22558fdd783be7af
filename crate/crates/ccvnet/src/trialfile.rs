//! Binary container for one trial.
//!
//! Header (24 bytes, little-endian): magic `EEGT`, format version `u32`,
//! channels `u32`, samples `u32`, label `u32`, sample rate `f32` (Hz).
//! Payload: `channels × samples` `f32` values, row-major by channel.

use std::fs;
use std::path::Path;

use ccvnet_core::{Tensor, Trial};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"EEGT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialHeader {
    pub version: u32,
    pub channels: u32,
    pub samples: u32,
    pub label: u32,
    pub sample_rate_hz: f32,
}

/// Header fields and raw payload of a trial file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFile {
    pub header: TrialHeader,
    pub payload: Vec<f32>,
}

/// A parse failure at a byte offset of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub offset: usize,
    pub reason: String,
}

impl TrialFile {
    pub fn from_trial(trial: &Trial, sample_rate_hz: f32) -> Self {
        Self {
            header: TrialHeader {
                version: FORMAT_VERSION,
                channels: trial.channels() as u32,
                samples: trial.samples() as u32,
                label: trial.label as u32,
                sample_rate_hz,
            },
            payload: trial.data().data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(MAGIC);
        for v in [h.version, h.channels, h.samples, h.label] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&h.sample_rate_hz.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ParseError> {
        let fail = |offset: usize, reason: String| ParseError { offset, reason };
        if bytes.len() < HEADER_LEN {
            return Err(fail(
                bytes.len(),
                format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"EEGT\"".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let header = TrialHeader {
            version: u32_at(4),
            channels: u32_at(8),
            samples: u32_at(12),
            label: u32_at(16),
            sample_rate_hz: f32::from_le_bytes([bytes[20], bytes[21], bytes[22], bytes[23]]),
        };
        if header.version != FORMAT_VERSION {
            return Err(fail(4, format!("unsupported format version {}", header.version)));
        }
        let n = (header.channels as usize)
            .checked_mul(header.samples as usize)
            .ok_or_else(|| fail(8, "channel × sample count overflows".into()))?;
        let want = n * 4;
        let have = bytes.len() - HEADER_LEN;
        if have < want {
            // offset of the first missing byte
            return Err(fail(bytes.len(), format!("truncated payload: {have} of {want} bytes")));
        }
        if have > want {
            return Err(fail(
                HEADER_LEN + want,
                format!("{} trailing bytes after payload", have - want),
            ));
        }
        let payload: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
            return Err(fail(HEADER_LEN + 4 * i, "non-finite sample".into()));
        }
        Ok(Self { header, payload })
    }

    pub fn to_trial(&self, subject_id: &str, trial_id: &str) -> ccvnet_core::Result<Trial> {
        let h = &self.header;
        let data = Tensor::new(
            &[h.channels as usize, h.samples as usize],
            self.payload.iter().map(|&v| v as f64).collect(),
        )?;
        Trial::new(data, h.label as usize, subject_id, trial_id)
    }
}

pub fn write(path: &Path, trial: &Trial, sample_rate_hz: f32) -> Result<()> {
    fs::write(path, TrialFile::from_trial(trial, sample_rate_hz).to_bytes()).map_err(|e| AppError::io(path, e))
}

pub fn read(path: &Path) -> Result<TrialFile> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    TrialFile::from_bytes(&bytes).map_err(|e| AppError::Parse {
        path: path.to_path_buf(),
        offset: e.offset,
        reason: e.reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrialFile {
        TrialFile {
            header: TrialHeader {
                version: 1,
                channels: 2,
                samples: 3,
                label: 1,
                sample_rate_hz: 256.0,
            },
            payload: vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), 24 + 6 * 4);
        assert_eq!(&b[..4], b"EEGT");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &256.0f32.to_le_bytes());
        assert_eq!(TrialFile::from_bytes(&b).unwrap(), sample());
    }

    #[test]
    fn truncation_is_located() {
        let b = sample().to_bytes();
        let e = TrialFile::from_bytes(&b[..30]).unwrap_err();
        assert_eq!(e.offset, 30);
        let e = TrialFile::from_bytes(&b[..10]).unwrap_err();
        assert_eq!(e.offset, 10);
        let mut bad = b.clone();
        bad[3] = b'X';
        assert_eq!(TrialFile::from_bytes(&bad).unwrap_err().offset, 0);
        let mut nan = b.clone();
        nan[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(TrialFile::from_bytes(&nan).unwrap_err().offset, 28);
    }
}
