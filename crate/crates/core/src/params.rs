//! Named parameter tensors with gradient slots, Adam state and a
//! little-endian binary encoding.
//!
//! Layout: magic `CVDP`, version `u32`, entry count `u32`, then per entry
//! a `u16` name length, UTF-8 name, `u32` rank, `u32` dims and `f64`
//! payload. Adam moments travel as extra entries named `<param>#adam.m`
//! and `<param>#adam.v`; the step counter is `#adam.t` and the init seed
//! is `#seed` (two exact `u32` halves).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CVDP";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1: &str = "#adam.m";
const MOMENT2: &str = "#adam.v";
const STEP: &str = "#adam.t";
const SEED: &str = "#seed";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered collection of one stage's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    step: u64,
    params: Vec<Param>,
}

/// Graph leaves created for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Bound {
    /// Pairs names with already-created graph nodes.
    pub fn from_parts(names: &[&str], vars: &[Var]) -> Self {
        Self {
            names: names.iter().map(|n| n.to_string()).collect(),
            vars: vars.to_vec(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::State(format!("parameter {name:?} is not bound")))
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            step: 0,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of Adam steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if name.is_empty() || name.contains('#') || name.len() > u16::MAX as usize {
            return Err(Error::Config(format!("invalid parameter name {name:?}")));
        }
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            moment1: zeros.clone(),
            moment2: zeros,
            value,
        });
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.grad)
    }

    /// Fetches a parameter or fails with a state error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name:?}")))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on `g` as a constant (inference, frozen stages).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    /// Adds the gradients accumulated on `g` into the store's gradient slots.
    pub fn accumulate(&mut self, g: &Graph, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            p.grad.add_assign(g.grad(*v));
        }
    }

    /// One bias-corrected Adam update using the stored gradients.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in parameter {:?}", p.name)));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(opt.beta1, t);
        let c2 = 1.0 - libm::pow(opt.beta2, t);
        for p in &mut self.params {
            let m = p.moment1.data_mut();
            let v = p.moment2.data_mut();
            let w = p.value.data_mut();
            for (j, &g) in p.grad.data().iter().enumerate() {
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g;
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= opt.lr * m_hat / (libm::sqrt(v_hat) + opt.eps);
            }
        }
        Ok(())
    }

    /// True when both stores hold bit-identical parameter values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = 3 * self.params.len() + 2;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for p in &self.params {
            write_entry(&mut out, &p.name, &p.value);
            write_entry(&mut out, &format!("{}{MOMENT1}", p.name), &p.moment1);
            write_entry(&mut out, &format!("{}{MOMENT2}", p.name), &p.moment2);
        }
        write_entry(&mut out, STEP, &Tensor::scalar(self.step as f64));
        let halves = [(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64];
        write_entry(&mut out, SEED, &Tensor::vector(&halves));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.fail(0, "bad magic, expected \"CVDP\""));
        }
        let version_at = r.pos;
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(r.fail(version_at, &format!("unsupported format version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut store = ParamStore::new(0);
        let mut moments: Vec<(usize, String, Tensor)> = Vec::new();
        for _ in 0..count {
            let entry_at = r.pos;
            let (name, value) = r.entry()?;
            if let Some(base) = name.strip_suffix(MOMENT1) {
                moments.push((entry_at, format!("{base}{MOMENT1}"), value));
            } else if let Some(base) = name.strip_suffix(MOMENT2) {
                moments.push((entry_at, format!("{base}{MOMENT2}"), value));
            } else if name == STEP {
                store.step = value.data().first().copied().unwrap_or(0.0) as u64;
            } else if name == SEED {
                if value.len() != 2 {
                    return Err(r.fail(entry_at, "seed entry must hold two values"));
                }
                store.seed = ((value.data()[0] as u64) << 32) | value.data()[1] as u64;
            } else {
                store
                    .insert(&name, value)
                    .map_err(|e| r.fail(entry_at, &e.to_string()))?;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, "trailing bytes after last entry"));
        }
        for (at, name, value) in moments {
            let (base, first) = match name.strip_suffix(MOMENT1) {
                Some(b) => (b, true),
                None => (name.strip_suffix(MOMENT2).unwrap_or(&name), false),
            };
            let p = store
                .params
                .iter_mut()
                .find(|p| p.name == base)
                .ok_or_else(|| Error::Format {
                    offset: at,
                    reason: format!("moment for unknown parameter {base:?}"),
                })?;
            if value.shape() != p.value.shape() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("moment shape {:?} differs from {:?}", value.shape(), p.value.shape()),
                });
            }
            if first {
                p.moment1 = value;
            } else {
                p.moment2 = value;
            }
        }
        Ok(store)
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: &str) -> Error {
        Error::Format {
            offset,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                &format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let b = self.take(2, "name length")?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let at = self.pos;
        let name = core::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| self.fail(at, "name is not UTF-8"))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(self.fail(self.pos - 4, &format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| self.fail(self.pos, "dimension product overflows"))?;
        let payload_at = self.pos;
        let raw = self.take(n * 8, &format!("payload of {name:?}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.fail(payload_at, &format!("non-finite value in {name:?}")));
        }
        let t = Tensor::new(&dims, data).map_err(|e| self.fail(payload_at, &e.to_string()))?;
        Ok((name, t))
    }
}

/// Fan-in scaled normal initialisation for ReLU layers.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Glorot uniform initialisation, optionally scaled by `gain`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let limit = gain * libm::sqrt(6.0 / (fan_in + fan_out).max(1) as f64);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-limit..=limit)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new(7);
        s.insert("w", Tensor::vector(&[w])).unwrap();
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = scalar_store(0.0);
        assert!(s.insert("w", Tensor::scalar(1.0)).is_err());
        assert!(s.insert("bad#name", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(1.25);
        s.adam_step(&Adam::new(0.1)).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().grad = Tensor::vector(&[1.0]);
        s.adam_step(&Adam::new(0.01)).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w + 0.01).abs() < 1e-9, "{w}");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut s = scalar_store(0.0);
        let opt = Adam::new(0.01);
        for _ in 0..2000 {
            let w = s.get("w").unwrap().data()[0];
            s.iter_mut().next().unwrap().grad = Tensor::vector(&[2.0 * (w - 3.0)]);
            s.adam_step(&opt).unwrap();
        }
        let w = s.get("w").unwrap().data()[0];
        assert!((w - 3.0).abs() < 0.01, "{w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(0.0);
        s.iter_mut().next().unwrap().grad = Tensor::vector(&[f64::NAN]);
        match s.adam_step(&Adam::new(0.01)) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("\"w\"")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn bytes_round_trip_with_moments() {
        let mut s = ParamStore::new(0xdead_beef_1234_5678);
        s.insert("a", Tensor::new(&[2, 2], alloc::vec![1.0, -2.0, 3.5, 0.0]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(&[0.25])).unwrap();
        for p in s.iter_mut() {
            p.grad.fill(0.5);
        }
        s.adam_step(&Adam::new(0.1)).unwrap();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.seed(), s.seed());
        assert_eq!(back.step(), 1);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.same_values(&s));
    }

    #[test]
    fn corrupted_bytes_report_offsets() {
        let s = scalar_store(2.0);
        let bytes = s.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParamStore::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        // header 12 + name len 2 + "w" 1 + rank 4 + dim 4 = payload at 23
        let cut = &bytes[..27];
        match ParamStore::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("unexpected {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            ParamStore::from_bytes(&long),
            Err(Error::Format { offset, .. }) if offset == bytes.len()
        ));
    }
}
