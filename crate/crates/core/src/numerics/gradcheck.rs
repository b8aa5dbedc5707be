use super::params::ParamStore;
use super::rng::Rng;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Smallest denominator of the relative error. Coordinates whose true
/// gradient is exactly zero (an attention key bias, for one) would otherwise
/// score rounding noise against rounding noise.
pub const DENOM_FLOOR: f64 = 1e-6;

/// One scalar inside a named parameter.
pub type Coord = (String, usize);

/// Every coordinate of every parameter whose name starts with `prefix`.
pub fn all_coords(store: &ParamStore, prefix: &str) -> Vec<Coord> {
    store
        .names()
        .filter(|n| n.starts_with(prefix))
        .flat_map(|n| {
            let len = store.value(n).map_or(0, |t| t.len());
            (0..len).map(move |i| (n.to_string(), i))
        })
        .collect()
}

/// A random `fraction` of the coordinates under `prefix`, but at least one
/// per parameter tensor.
pub fn sample_coords(store: &ParamStore, prefix: &str, fraction: f64, rng: &mut Rng) -> Vec<Coord> {
    let mut out = Vec::new();
    for name in store.names().filter(|n| n.starts_with(prefix)) {
        let len = store.value(name).map_or(0, |t| t.len());
        let k = ((len as f64 * fraction).ceil() as usize).clamp(1, len.max(1));
        for _ in 0..k {
            out.push((name.to_string(), rng.below(len)));
        }
    }
    out
}

/// Compares the tape's analytic gradient of the scalar built by `loss` with
/// central differences of step `step` at each coordinate in `coords`.
///
/// Returns the largest `|analytic - numeric| / max(|analytic| + |numeric|, DENOM_FLOOR)`.
pub fn finite_difference_check<F>(store: &ParamStore, step: f64, coords: &[Coord], mut loss: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out)?;
    let mut analytic = ParamStore::new();
    for name in store.names() {
        analytic.insert(name, store.value(name)?.clone());
    }
    analytic.accumulate(&tape);

    let eval = |s: &ParamStore, loss: &mut F| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(&mut t, s)?;
        Ok(t.value(v).item())
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, idx) in coords {
        let base = probe.value(name)?.data()[*idx];
        probe.value_mut(name)?.data_mut()[*idx] = base + step;
        let up = eval(&probe, &mut loss)?;
        probe.value_mut(name)?.data_mut()[*idx] = base - step;
        let down = eval(&probe, &mut loss)?;
        probe.value_mut(name)?.data_mut()[*idx] = base;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.grad(name)?.data()[*idx];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::Training(format!("non-finite gradient at {name}[{idx}]")));
        }
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOM_FLOOR));
    }
    Ok(worst)
}
