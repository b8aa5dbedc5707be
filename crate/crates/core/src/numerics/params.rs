use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::bytes::ByteReader;
use super::rng::Rng;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Param {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Named parameters with gradients and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.into(),
            Param {
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                value,
                steps: 0,
            },
        );
    }

    /// Inserts `N(0, std^2)` entries.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        self.insert(name, rng.normal_tensor(shape, std));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Adds every parameter gradient recorded on `tape` that belongs to this
    /// store. Names unknown to the store are ignored.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (name, g) in tape.param_grads() {
            if let Some(p) = self.params.get_mut(name) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Zeroes the gradients of every parameter under `prefix`.
    pub fn zero_grads_with_prefix(&mut self, prefix: &str) {
        for (n, p) in self.params.iter_mut() {
            if n.starts_with(prefix) {
                p.grad.fill(0.0);
            }
        }
    }

    /// Bias-corrected Adam update of every parameter accepted by `filter`.
    /// Updated parameters have their gradients zeroed; the rest keep theirs.
    pub fn adam_step_filtered(&mut self, lr: impl Fn(&str) -> f64, filter: impl Fn(&str) -> bool) -> Result<()> {
        for (name, p) in &self.params {
            if filter(name) && !p.grad.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
            }
        }
        for (name, p) in self.params.iter_mut() {
            if filter(name) {
                p.steps += 1;
                let t = p.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let rate = lr(name);
                let g = p.grad.data();
                let (m, v) = (p.m.data_mut(), p.v.data_mut());
                for ((gi, mi), vi) in g.iter().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                    *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                }
                let (m, v) = (p.m.data(), p.v.data());
                for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                    *w -= rate * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                }
                p.grad.fill(0.0);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Adam update of every parameter at learning rate `lr`.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.adam_step_filtered(|_| lr, |_| true)
    }

    /// Values only, each under `prefix + name`.
    pub fn value_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(n, p)| (format!("{prefix}{n}"), p.value.clone()))
            .collect()
    }

    /// Full optimiser state (values, moments, per-parameter and store step
    /// counts) as flat records.
    pub fn state_records(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}#step"), Tensor::scalar(self.step as f64))];
        for (n, p) in &self.params {
            out.push((format!("{prefix}{n}"), p.value.clone()));
            out.push((format!("{prefix}#m/{n}"), p.m.clone()));
            out.push((format!("{prefix}#v/{n}"), p.v.clone()));
            out.push((format!("{prefix}#t/{n}"), Tensor::scalar(p.steps as f64)));
        }
        out
    }

    /// Rebuilds a store written by [`ParamStore::state_records`] (or plain
    /// value records, in which case moments start at zero).
    pub fn from_records(records: &BTreeMap<String, Tensor>, prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for (key, t) in records.range(prefix.to_string()..) {
            let Some(rest) = key.strip_prefix(prefix) else { break };
            if !rest.starts_with('#') {
                store.insert(rest, t.clone());
            }
        }
        if let Some(s) = records.get(&format!("{prefix}#step")) {
            store.step = s.item() as u64;
        }
        for (name, p) in store.params.iter_mut() {
            if let Some(m) = records.get(&format!("{prefix}#m/{name}")) {
                m.expect_shape(p.value.shape())?;
                p.m = m.clone();
            }
            if let Some(v) = records.get(&format!("{prefix}#v/{name}")) {
                v.expect_shape(p.value.shape())?;
                p.v = v.clone();
            }
            if let Some(t) = records.get(&format!("{prefix}#t/{name}")) {
                p.steps = t.item() as u64;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, &self.value_records(""))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_tensor_file(path)?;
        Self::from_records(&records, "")
    }
}

pub const TENSOR_FILE_MAGIC: &[u8; 4] = b"SKDF";
pub const TENSOR_FILE_VERSION: u32 = 1;

/// Serialises named tensors: magic `SKDF`, version `u32`, then per record
/// `name_len: u32`, name bytes, `rank: u32`, `rank` dims as `u64`, values as
/// `f64`. All integers and floats little-endian; records run to end of file.
pub fn encode_tensor_records(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_FILE_MAGIC);
    buf.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_tensor_records(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut c = ByteReader::new(buf);
    ensure!(c.bytes(4)? == TENSOR_FILE_MAGIC, Format, "bad magic, not a parameter file");
    let version = c.u32()?;
    ensure!(version == TENSOR_FILE_VERSION, Format, "unsupported parameter file version {version}");
    let mut out = BTreeMap::new();
    while !c.at_end() {
        let nlen = c.u32()? as usize;
        let name = std::str::from_utf8(c.bytes(nlen)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        ensure!(rank <= 8, Format, "implausible rank {rank} for {name}");
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("record {name} has overflowing shape")))?;
        let data = c.f64s(n)?;
        out.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode_tensor_records(records);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display(), e))
}

pub fn read_tensor_file(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display(), e))?;
    decode_tensor_records(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(&[1.0, -2.0]));
        s.adam_step(0.1).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(&[1.0, 1.0, 1.0]));
        s.params.get_mut("w").unwrap().grad = Tensor::vector(&[3.0, -0.01, 250.0]);
        s.adam_step(0.05).unwrap();
        for (w, sign) in s.value("w").unwrap().data().iter().zip([1.0, -1.0, 1.0]) {
            assert!((1.0 - w - 0.05 * sign).abs() < 1e-6, "{w}");
        }
        assert!(s.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(&[3.0]));
        for _ in 0..200 {
            let w = s.value("w").unwrap().data()[0];
            s.params.get_mut("w").unwrap().grad = Tensor::vector(&[2.0 * w]);
            s.adam_step(0.1).unwrap();
        }
        assert!(s.value("w").unwrap().data()[0].abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.insert("layer.w", Tensor::vector(&[0.0]));
        s.params.get_mut("layer.w").unwrap().grad = Tensor::vector(&[f64::NAN]);
        match s.adam_step(0.1) {
            Err(Error::Training(msg)) => assert!(msg.contains("layer.w")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn state_records_restore_exactly() {
        let mut s = ParamStore::new();
        let mut rng = Rng::new(1);
        s.insert_normal("a", &[2, 3], 1.0, &mut rng);
        s.insert_normal("b", &[4], 1.0, &mut rng);
        s.params.get_mut("a").unwrap().grad = rng.normal_tensor(&[2, 3], 1.0);
        s.adam_step(0.01).unwrap();
        let recs: BTreeMap<_, _> = s.state_records("opt.").into_iter().collect();
        let back = ParamStore::from_records(&recs, "opt.").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(matches!(decode_tensor_records(b"NOPE\x01\0\0\0"), Err(Error::Format(_))));
        let mut good = encode_tensor_records(&[("x".into(), Tensor::vector(&[1.0, 2.0]))]);
        good.truncate(good.len() - 3);
        assert!(decode_tensor_records(&good).is_err());
    }
}
