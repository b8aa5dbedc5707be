//! Dense tensors, a reverse-mode tape with the layer primitives the planner
//! needs, named parameter storage with Adam, and gradient verification.

mod bytes;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub(crate) use bytes::ByteReader;
pub use gradcheck::{all_coords, finite_difference_check, sample_coords, Coord};
pub use params::{read_tensor_file, write_tensor_file, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Entries `N(0, 1/fan_in)` for an `[fan_in, fan_out]` weight plus a zero bias.
pub fn init_affine(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    store.insert_normal(&format!("{prefix}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Applies the affine layer stored under `prefix`.
pub fn apply_affine(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> crate::Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    tape.affine(x, w, b)
}
