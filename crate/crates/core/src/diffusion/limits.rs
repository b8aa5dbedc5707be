use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// Per-dimension affine map from embeddings to the diffuser's space, fitted
/// so the training data spans `[-1, 1]` in every dimension. Saturated tanh
/// coordinates can vary over a few hundredths; unscaled, their motion would
/// drown in unit-variance diffusion noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Limits {
    mid: Vec<f64>,
    half: Vec<f64>,
}

/// Smallest half-range; keeps constant dimensions finite.
const MIN_HALF: f64 = 1e-6;

impl Limits {
    /// The identity map.
    pub fn identity(dim: usize) -> Limits {
        Limits {
            mid: vec![0.0; dim],
            half: vec![1.0; dim],
        }
    }

    /// Fits to the rows of every `[n, dim]` tensor.
    pub fn fit<'a>(tables: impl IntoIterator<Item = &'a Tensor>) -> Result<Limits> {
        let mut lo: Vec<f64> = Vec::new();
        let mut hi: Vec<f64> = Vec::new();
        for t in tables {
            ensure!(t.rank() == 2, Contract, "limits need [n, dim] tables, got {:?}", t.shape());
            if lo.is_empty() {
                lo = vec![f64::INFINITY; t.dim(1)];
                hi = vec![f64::NEG_INFINITY; t.dim(1)];
            }
            ensure!(t.dim(1) == lo.len(), Contract, "limits need rows of width {}", lo.len());
            for row in t.data().chunks(lo.len()) {
                for (j, &v) in row.iter().enumerate() {
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
        }
        ensure!(!lo.is_empty() && lo[0] <= hi[0], Input, "no rows to fit limits on");
        Ok(Limits {
            mid: lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect(),
            half: lo.iter().zip(&hi).map(|(l, h)| (0.5 * (h - l)).max(MIN_HALF)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mid.len()
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        ensure!(x.shape().last() == Some(&self.dim()), Contract, "limits of width {} applied to {:?}", self.dim(), x.shape());
        let data = x
            .data()
            .chunks(self.dim())
            .flat_map(|row| row.iter().zip(self.mid.iter().zip(&self.half)).map(|(&v, (&m, &h))| f(v, m, h)))
            .collect();
        Tensor::new(x.shape(), data)
    }

    /// Embeddings to diffuser space; the last axis is the embedding.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, h| (v - m) / h)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.map_rows(x, |v, m, h| m + h * v)
    }

    pub fn records(&self) -> Vec<(String, Tensor)> {
        vec![
            ("limits.mid".into(), Tensor::vector(&self.mid)),
            ("limits.half".into(), Tensor::vector(&self.half)),
        ]
    }

    pub fn from_records(records: &BTreeMap<String, Tensor>) -> Result<Limits> {
        let get = |n: &str| records.get(n).ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")));
        let (mid, half) = (get("limits.mid")?, get("limits.half")?);
        ensure!(
            mid.rank() == 1 && half.shape() == mid.shape() && half.data().iter().all(|&h| h > 0.0),
            Format,
            "malformed limits in checkpoint"
        );
        Ok(Limits {
            mid: mid.data().to_vec(),
            half: half.data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_data_spans_unit_box() {
        let a = Tensor::matrix(&[&[0.2, -0.9], &[0.3, 0.1]]);
        let b = Tensor::matrix(&[&[0.25, 0.5]]);
        let l = Limits::fit([&a, &b]).unwrap();
        let n = l.normalize(&a).unwrap();
        for (got, want) in n.data().iter().zip([-1.0, -1.0, 1.0, 3.0 / 7.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        let back = l.denormalize(&n).unwrap();
        assert!(back.data().iter().zip(a.data()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn constant_dimension_stays_finite() {
        let a = Tensor::matrix(&[&[0.5], &[0.5]]);
        let l = Limits::fit([&a]).unwrap();
        assert_eq!(l.normalize(&a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_is_exact() {
        let a = Tensor::matrix(&[&[0.123456789, -0.3]]);
        let l = Limits::identity(2);
        assert_eq!(l.normalize(&a).unwrap(), a);
        assert_eq!(l.denormalize(&a).unwrap(), a);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        assert!(Limits::identity(3).normalize(&Tensor::matrix(&[&[1.0, 2.0]])).is_err());
        assert!(Limits::fit(std::iter::empty()).is_err());
    }
}
