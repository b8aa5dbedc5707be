//! Frozen observation and instruction encoders. Their tables are regenerated
//! from a seed and never enter an optimised parameter store.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::numerics::{Rng, Tensor};

/// Reserved row for tokens outside the vocabulary.
pub const UNKNOWN_INDEX: usize = 0;

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token index plus a seeded embedding table; row 0 is the unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    seed: u64,
    index: BTreeMap<String, usize>,
    table: Tensor,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I, lang_dim: usize, seed: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut sorted: Vec<String> = tokens.into_iter().map(|t| t.as_ref().to_lowercase()).collect();
        sorted.sort();
        sorted.dedup();
        let index = sorted.into_iter().enumerate().map(|(i, t)| (t, i + 1)).collect::<BTreeMap<_, _>>();
        let mut rng = Rng::new(seed).fork_named("vocabulary");
        let table = rng.normal_tensor(&[index.len() + 1, lang_dim], 1.0);
        Vocabulary { seed, index, table }
    }

    pub fn len(&self) -> usize {
        self.index.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lang_dim(&self) -> usize {
        self.table.dim(1)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_INDEX)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.table.row(i)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Mean of the tokens' embedding rows.
    pub fn encode(&self, tokens: &[impl AsRef<str>]) -> Result<Tensor> {
        ensure!(!tokens.is_empty(), Input, "cannot encode an empty instruction");
        let d = self.lang_dim();
        let mut acc = vec![0.0; d];
        for t in tokens {
            let row = self.row(self.index_of(t.as_ref()));
            acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
        }
        let n = tokens.len() as f64;
        Ok(Tensor::vector(&acc.iter().map(|a| a / n).collect::<Vec<_>>()))
    }

    /// Line format: `seed <u64>`, `lang_dim <n>`, then one token per line in
    /// sorted order.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed {}\nlang_dim {}\n", self.seed, self.lang_dim());
        for t in self.tokens() {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<u64> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("vocabulary file missing `{key}` line")))
        };
        let seed = header("seed ")?;
        let dim = header("lang_dim ")? as usize;
        let tokens: Vec<&str> = lines.map(str::trim).filter(|l| !l.is_empty()).collect();
        Ok(Vocabulary::new(tokens, dim, seed))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::from_text(&text)
    }
}

/// `tanh(P x)` with a fixed projection `P[obs_embed_dim, raw_dim]`,
/// entries `N(0, 1/(raw_dim s^2))` for inputs of scale `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationEncoder {
    projection: Tensor,
}

impl ObservationEncoder {
    pub fn new(raw_dim: usize, obs_embed_dim: usize, seed: u64) -> Self {
        Self::with_input_scale(raw_dim, obs_embed_dim, seed, 1.0)
    }

    pub fn with_input_scale(raw_dim: usize, obs_embed_dim: usize, seed: u64, scale: f64) -> Self {
        let mut rng = Rng::new(seed).fork_named("observation-projection");
        let projection = rng.normal_tensor(&[obs_embed_dim, raw_dim], (1.0 / raw_dim as f64).sqrt() / scale);
        ObservationEncoder { projection }
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.dim(1)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.dim(0)
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn encode(&self, raw: &[f64]) -> Result<Tensor> {
        if raw.len() != self.raw_dim() {
            return Err(Error::Config(format!(
                "observation width {} does not match encoder width {}",
                raw.len(),
                self.raw_dim()
            )));
        }
        let out = (0..self.embed_dim())
            .map(|i| {
                let p = self.projection.row(i);
                p.iter().zip(raw).map(|(a, b)| a * b).sum::<f64>().tanh()
            })
            .collect::<Vec<_>>();
        Ok(Tensor::vector(&out))
    }

    /// Encodes each row of `raw[n, raw_dim]` into `[n, obs_embed_dim]`.
    pub fn encode_rows(&self, raw: &Tensor) -> Result<Tensor> {
        ensure!(raw.rank() == 2, Contract, "encode_rows needs a matrix");
        let mut out = Vec::with_capacity(raw.dim(0) * self.embed_dim());
        for i in 0..raw.dim(0) {
            out.extend_from_slice(self.encode(raw.row(i))?.data());
        }
        Tensor::new(&[raw.dim(0), self.embed_dim()], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_observation_embeds_to_zero() {
        let enc = ObservationEncoder::new(16, 32, 7);
        assert!(enc.encode(&[0.0; 16]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_config_error() {
        let enc = ObservationEncoder::new(16, 32, 7);
        assert!(matches!(enc.encode(&[0.0; 15]), Err(Error::Config(_))));
    }

    #[test]
    fn bag_of_words_is_order_free() {
        let v = Vocabulary::new(["open", "drawer", "close"], 8, 3);
        let a = v.encode(&["open", "drawer"]).unwrap();
        let b = v.encode(&["drawer", "open"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(v.encode(&["close"]).unwrap().data(), v.row(v.index_of("close")));
        assert_eq!(v.encode(&["zebra"]).unwrap().data(), v.row(UNKNOWN_INDEX));
        assert!(matches!(v.encode(&[] as &[&str]), Err(Error::Input(_))));
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::new(["b", "a", "c", "a"], 4, 11);
        assert_eq!(v.len(), 4);
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }
}
