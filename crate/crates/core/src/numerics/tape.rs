//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! then sweeps it in reverse. Parameters enter through [`Tape::param`], which
//! binds a [`ParamStore`] entry by name so that gradients can be handed back
//! to the store afterwards.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel { x: Var, v: Var },
    Conv1d { x: Var, k: Var, cols: Vec<f64> },
    GroupNorm { x: Var, gain: Var, bias: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Mish(Var),
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    ConcatLast(Var, Var),
    StackTokens(Var, Var),
    MeanTokens(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    StraightThrough { latent: Var },
    SelectRows { src: Var, null: Var, use_null: Vec<bool> },
    Reshape(Var),
    MaskedMse { pred: Var, target: Tensor, mask: Vec<f64>, denom: f64 },
    SumSquares(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Forward record of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

const GN_EPS: f64 = 1e-5;

/// tanh(softplus(x)) and sigmoid(x) from one exponential.
fn mish_parts(x: f64) -> (f64, f64) {
    if x > 20.0 {
        return (1.0, 1.0 / (1.0 + (-x).exp()));
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    (n / (n + 2.0), e / (1.0 + e))
}

pub(crate) fn mish_scalar(x: f64) -> f64 {
    x * mish_parts(x).0
}

fn mish_grad(x: f64) -> f64 {
    let (t, sig) = mish_parts(x);
    t + x * (1.0 - t * t) * sig
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite activation in {what}")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Data input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free input whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x W + b` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        ensure!(wv.rank() == 2, Contract, "affine weight must be a matrix");
        let (din, dout) = (wv.dim(0), wv.dim(1));
        ensure!(
            xv.rank() >= 1 && *xv.shape().last().unwrap() == din,
            Contract,
            "affine input {:?} does not match weight {:?}",
            xv.shape(),
            wv.shape()
        );
        bv.expect_shape(&[dout])?;
        let rows = xv.len() / din;
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
        }
        gemm(rows, din, dout, xv.data(), false, wv.data(), false, &mut out, true);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(&shape, out)?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(t, Op::Affine { x, w, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, s), ng)
    }

    /// Adds `v[b, c]` to every time step of `x[b, c, :]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xv, vv) = (self.value(x), self.value(v));
        ensure!(xv.rank() == 3, Contract, "add_channel input must be [B, C, T]");
        let (b, c, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
        vv.expect_shape(&[b, c])?;
        let mut out = xv.data().to_vec();
        for (i, chunk) in out.chunks_mut(t).enumerate() {
            let add = vv.data()[i];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let tt = Tensor::new(&[b, c, t], out)?;
        let ng = self.ng(&[x, v]);
        Ok(self.push(tt, Op::AddChannel { x, v }, ng))
    }

    /// Same-padded, stride-1 temporal convolution of `x[B, Cin, T]` with
    /// `kernel[Cout, Cin, W]`; `W` must be odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        ensure!(xv.rank() == 3, Contract, "conv1d input must be [B, C, T]");
        ensure!(kv.rank() == 3, Contract, "conv1d kernel must be [Cout, Cin, W]");
        let (bsz, cin, tlen) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, kcin, width) = (kv.dim(0), kv.dim(1), kv.dim(2));
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {width} must be odd")));
        }
        ensure!(kcin == cin, Contract, "conv1d channel mismatch: input {cin}, kernel {kcin}");
        let pad = width / 2;
        let ncol = bsz * tlen;
        let mut cols = vec![0.0; cin * width * ncol];
        let xd = xv.data();
        for c in 0..cin {
            for w in 0..width {
                let row = &mut cols[(c * width + w) * ncol..(c * width + w + 1) * ncol];
                for b in 0..bsz {
                    let src = &xd[(b * cin + c) * tlen..(b * cin + c + 1) * tlen];
                    let dst = &mut row[b * tlen..(b + 1) * tlen];
                    for (t, d) in dst.iter_mut().enumerate() {
                        let s = t as isize + w as isize - pad as isize;
                        if s >= 0 && (s as usize) < tlen {
                            *d = src[s as usize];
                        }
                    }
                }
            }
        }
        let mut out2 = vec![0.0; cout * ncol];
        gemm(cout, cin * width, ncol, kv.data(), false, &cols, false, &mut out2, false);
        let mut out = vec![0.0; bsz * cout * tlen];
        for o in 0..cout {
            for b in 0..bsz {
                out[(b * cout + o) * tlen..(b * cout + o + 1) * tlen]
                    .copy_from_slice(&out2[o * ncol + b * tlen..o * ncol + (b + 1) * tlen]);
            }
        }
        let t = Tensor::new(&[bsz, cout, tlen], out)?;
        let ng = self.ng(&[x, kernel]);
        Ok(self.push(t, Op::Conv1d { x, k: kernel, cols }, ng))
    }

    /// Group normalisation over `(channels in group, time)` per batch row.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.rank() == 3, Contract, "group_norm input must be [B, C, T]");
        let (bsz, ch, tlen) = (xv.dim(0), xv.dim(1), xv.dim(2));
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {ch} channels not divisible into {groups} groups"
            )));
        }
        self.value(gain).expect_shape(&[ch])?;
        self.value(bias).expect_shape(&[ch])?;
        let cg = ch / groups;
        let n = cg * tlen;
        let xd = xv.data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; bsz * groups];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bsz {
            for g in 0..groups {
                let off = (b * ch + g * cg) * tlen;
                let seg = &xd[off..off + n];
                let mean = seg.iter().sum::<f64>() / n as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd[b * groups + g] = r;
                for (i, &v) in seg.iter().enumerate() {
                    let c = g * cg + i / tlen;
                    let h = (v - mean) * r;
                    xhat[off + i] = h;
                    out[off + i] = h * gd[c] + bd[c];
                }
            }
        }
        let t = Tensor::new(&[bsz, ch, tlen], out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        let t = self.value(x).map(mish_scalar);
        let ng = self.ng(&[x]);
        self.push(t, Op::Mish(x), ng)
    }

    /// Halves the time axis by averaging adjacent pairs.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.rank() == 3 && xv.dim(2).is_multiple_of(2), Contract, "avg_pool2 needs even time axis, got {:?}", xv.shape());
        let (b, c, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let out: Vec<f64> = xv.data().chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let tt = Tensor::new(&[b, c, t / 2], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(tt, Op::AvgPool2(x), ng))
    }

    /// Doubles the time axis by nearest-neighbour repetition.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.rank() == 3, Contract, "upsample2 input must be [B, C, T]");
        let (b, c, t) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let out: Vec<f64> = xv.data().iter().flat_map(|&v| [v, v]).collect();
        let tt = Tensor::new(&[b, c, 2 * t], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(tt, Op::Upsample2(x), ng))
    }

    /// `[B, Ca, T] ++ [B, Cb, T] -> [B, Ca + Cb, T]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2),
            Contract,
            "concat_channels shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (bsz, ca, cb, t) = (av.dim(0), av.dim(1), bv.dim(1), av.dim(2));
        let mut out = Vec::with_capacity((ca + cb) * bsz * t);
        for i in 0..bsz {
            out.extend_from_slice(&av.data()[i * ca * t..(i + 1) * ca * t]);
            out.extend_from_slice(&bv.data()[i * cb * t..(i + 1) * cb * t]);
        }
        let tt = Tensor::new(&[bsz, ca + cb, t], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(tt, Op::ConcatChannels(a, b), ng))
    }

    /// `[B, Da] ++ [B, Db] -> [B, Da + Db]`.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(
            av.rank() == 2 && bv.rank() == 2 && av.dim(0) == bv.dim(0),
            Contract,
            "concat_last shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (n, da, db) = (av.dim(0), av.dim(1), bv.dim(1));
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let tt = Tensor::new(&[n, da + db], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(tt, Op::ConcatLast(a, b), ng))
    }

    /// Two `[B, D]` inputs become the token sequence `[B, 2, D]`.
    pub fn stack_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        ensure!(av.rank() == 2 && av.shape() == bv.shape(), Contract, "stack_tokens shape mismatch");
        let (n, d) = (av.dim(0), av.dim(1));
        let mut out = Vec::with_capacity(2 * n * d);
        for i in 0..n {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let tt = Tensor::new(&[n, 2, d], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(tt, Op::StackTokens(a, b), ng))
    }

    /// Mean over the token axis of `[B, L, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.rank() == 3, Contract, "mean_tokens input must be [B, L, D]");
        let (n, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..l {
                let src = &xv.data()[(i * l + j) * d..(i * l + j + 1) * d];
                for (o, s) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o += s / l as f64;
                }
            }
        }
        let tt = Tensor::new(&[n, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(tt, Op::MeanTokens(x), ng))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        ensure!(
            qv.rank() == 3 && qv.shape() == kv.shape() && qv.shape() == vv.shape(),
            Contract,
            "attention projections must share shape [B, L, D]"
        );
        let (n, l, d) = (qv.dim(0), qv.dim(1), qv.dim(2));
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n * heads * l * l];
        let mut out = vec![0.0; n * l * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..n {
            for h in 0..heads {
                for i in 0..l {
                    let p = &mut probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i + 1) * l];
                    let qi = &qd[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                        *pj = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - m).exp();
                        z += *pj;
                    }
                    p.iter_mut().for_each(|pj| *pj /= z);
                    let o = &mut out[(b * l + i) * d + h * dh..(b * l + i) * d + (h + 1) * dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * l + j) * d + h * dh..(b * l + j) * d + (h + 1) * dh];
                        for (oe, ve) in o.iter_mut().zip(vj) {
                            *oe += pj * ve;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[n, l, d], out)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, ng))
    }

    /// Forwards `quantized` while routing the incoming gradient unchanged to
    /// `latent`.
    pub fn straight_through(&mut self, latent: Var, quantized: Tensor) -> Result<Var> {
        quantized.expect_shape(self.value(latent).shape())?;
        let ng = self.ng(&[latent]);
        Ok(self.push(quantized, Op::StraightThrough { latent }, ng))
    }

    /// Row `b` is `null` where `use_null[b]`, else `src[b]`.
    pub fn select_rows(&mut self, src: Var, null: Var, use_null: &[bool]) -> Result<Var> {
        let (sv, nv) = (self.value(src), self.value(null));
        ensure!(sv.rank() == 2 && sv.dim(0) == use_null.len(), Contract, "select_rows mask length mismatch");
        nv.expect_shape(&[sv.dim(1)])?;
        let mut out = sv.clone();
        for (i, &u) in use_null.iter().enumerate() {
            if u {
                out.row_mut(i).copy_from_slice(nv.data());
            }
        }
        let ng = self.ng(&[src, null]);
        Ok(self.push(
            out,
            Op::SelectRows {
                src,
                null,
                use_null: use_null.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `sum(mask * (pred - target)^2) / sum(mask)`.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, mask: Vec<f64>) -> Result<Var> {
        let pv = self.value(pred);
        target.expect_shape(pv.shape())?;
        ensure!(mask.len() == pv.len(), Contract, "mask length {} vs {}", mask.len(), pv.len());
        let denom: f64 = mask.iter().sum();
        ensure!(denom > 0.0, Contract, "masked_mse with empty mask");
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(&mask)
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum::<f64>()
            / denom;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            },
            ng,
        ))
    }

    /// Element-mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let n = self.value(pred).len();
        self.masked_mse(pred, target, vec![1.0; n])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sq_norm());
        let ng = self.ng(&[x]);
        self.push(t, Op::SumSquares(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(t, Op::Sum(x), ng)
    }

    /// Fails with a training error naming `what` if `v` holds non-finite values.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        check_finite(self.value(v), what)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        ensure!(self.value(output).len() == 1, Contract, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / din;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    gemm(rows, dout, din, gd, false, wv.data(), true, &mut dx, false);
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, rows, dout, xv.data(), true, gd, false, &mut dw, false);
                    self.acc(grads, *w, Tensor::new(&[din, dout], dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; dout];
                    for r in gd.chunks(dout) {
                        for (a, c) in db.iter_mut().zip(r) {
                            *a += c;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(&[dout], db)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.zip_map(bv, |p, q| p * q)?);
                self.acc(grads, *b, g.zip_map(av, |p, q| p * q)?);
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddChannel { x, v } => {
                self.acc(grads, *x, g.clone());
                if self.wants(*v) {
                    let t = self.value(*x).dim(2);
                    let dv: Vec<f64> = gd.chunks(t).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *v, Tensor::new(self.value(*v).shape(), dv)?);
                }
            }
            Op::Conv1d { x, k, cols } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let (bsz, cin, tlen) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let (cout, width) = (kv.dim(0), kv.dim(2));
                let ncol = bsz * tlen;
                let mut g2 = vec![0.0; cout * ncol];
                for o in 0..cout {
                    for b in 0..bsz {
                        g2[o * ncol + b * tlen..o * ncol + (b + 1) * tlen]
                            .copy_from_slice(&gd[(b * cout + o) * tlen..(b * cout + o + 1) * tlen]);
                    }
                }
                if self.wants(*k) {
                    let mut dk = vec![0.0; cout * cin * width];
                    gemm(cout, ncol, cin * width, &g2, false, cols, true, &mut dk, false);
                    self.acc(grads, *k, Tensor::new(kv.shape(), dk)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; cin * width * ncol];
                    gemm(cin * width, cout, ncol, kv.data(), true, &g2, false, &mut dcols, false);
                    let pad = width / 2;
                    let mut dx = vec![0.0; xv.len()];
                    for c in 0..cin {
                        for w in 0..width {
                            let row = &dcols[(c * width + w) * ncol..(c * width + w + 1) * ncol];
                            for b in 0..bsz {
                                let dst = &mut dx[(b * cin + c) * tlen..(b * cin + c + 1) * tlen];
                                for t in 0..tlen {
                                    let s = t as isize + w as isize - pad as isize;
                                    if s >= 0 && (s as usize) < tlen {
                                        dst[s as usize] += row[b * tlen + t];
                                    }
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx)?);
                }
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            } => {
                let xv = self.value(*x);
                let (bsz, ch, tlen) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let cg = ch / groups;
                let n = cg * tlen;
                let gnv = self.value(*gain).data();
                let mut dgain = vec![0.0; ch];
                let mut dbias = vec![0.0; ch];
                let mut dx = vec![0.0; xv.len()];
                let mut dxhat = vec![0.0; n];
                for b in 0..bsz {
                    for gi in 0..*groups {
                        let off = (b * ch + gi * cg) * tlen;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let c = gi * cg + j / tlen;
                            let dy = gd[off + j];
                            dgain[c] += dy * xhat[off + j];
                            dbias[c] += dy;
                            let dh = dy * gnv[c];
                            dxhat[j] = dh;
                            s1 += dh;
                            s2 += dh * xhat[off + j];
                        }
                        let r = rstd[b * groups + gi];
                        let nf = n as f64;
                        for j in 0..n {
                            dx[off + j] = r / nf * (nf * dxhat[j] - s1 - xhat[off + j] * s2);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape(), dx)?);
                self.acc(grads, *gain, Tensor::new(&[ch], dgain)?);
                self.acc(grads, *bias, Tensor::new(&[ch], dbias)?);
            }
            Op::Mish(x) => {
                let dx = self.value(*x).zip_map(g, |xv, gv| gv * mish_grad(xv))?;
                self.acc(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let dx: Vec<f64> = gd.iter().flat_map(|&v| [0.5 * v, 0.5 * v]).collect();
                self.acc(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::Upsample2(x) => {
                let dx: Vec<f64> = gd.chunks(2).map(|p| p[0] + p[1]).collect();
                self.acc(grads, *x, Tensor::new(self.value(*x).shape(), dx)?);
            }
            Op::ConcatChannels(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bsz, ca, cb, t) = (av.dim(0), av.dim(1), bv.dim(1), av.dim(2));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..bsz {
                    let base = i * (ca + cb) * t;
                    da.extend_from_slice(&gd[base..base + ca * t]);
                    db.extend_from_slice(&gd[base + ca * t..base + (ca + cb) * t]);
                }
                self.acc(grads, *a, Tensor::new(av.shape(), da)?);
                self.acc(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::ConcatLast(a, b) | Op::StackTokens(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.dim(0);
                let (da_w, db_w) = (av.len() / n, bv.len() / n);
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for r in gd.chunks(da_w + db_w) {
                    da.extend_from_slice(&r[..da_w]);
                    db.extend_from_slice(&r[da_w..]);
                }
                self.acc(grads, *a, Tensor::new(av.shape(), da)?);
                self.acc(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::MeanTokens(x) => {
                let xv = self.value(*x);
                let (n, l, d) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let mut dx = vec![0.0; xv.len()];
                for i in 0..n {
                    for j in 0..l {
                        for e in 0..d {
                            dx[(i * l + j) * d + e] = gd[i * d + e] / l as f64;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, l, d) = (qv.dim(0), qv.dim(1), qv.dim(2));
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; l];
                let span = |b: usize, t: usize, h: usize| (b * l + t) * d + h * dh..(b * l + t) * d + (h + 1) * dh;
                for b in 0..n {
                    for h in 0..*heads {
                        for i in 0..l {
                            let p = &probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i + 1) * l];
                            let go = &gd[span(b, i, h)];
                            for j in 0..l {
                                dp[j] = go.iter().zip(&vd[span(b, j, h)]).map(|(a, c)| a * c).sum();
                                for (dve, goe) in dv[span(b, j, h)].iter_mut().zip(go) {
                                    *dve += p[j] * goe;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                            for j in 0..l {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let (qs, ks) = (span(b, i, h), span(b, j, h));
                                for e in 0..dh {
                                    dq[qs.start + e] += ds * kd[ks.start + e];
                                    dk[ks.start + e] += ds * qd[qs.start + e];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, Tensor::new(qv.shape(), dq)?);
                self.acc(grads, *k, Tensor::new(kv.shape(), dk)?);
                self.acc(grads, *v, Tensor::new(vv.shape(), dv)?);
            }
            Op::StraightThrough { latent } => self.acc(grads, *latent, g.clone()),
            Op::SelectRows { src, null, use_null } => {
                let sv = self.value(*src);
                let w = sv.dim(1);
                let mut ds = g.clone().reshape(sv.shape())?;
                let mut dn = vec![0.0; w];
                for (r, &u) in use_null.iter().enumerate() {
                    if u {
                        for (a, c) in dn.iter_mut().zip(ds.row(r)) {
                            *a += c;
                        }
                        ds.row_mut(r).fill(0.0);
                    }
                }
                self.acc(grads, *src, ds);
                self.acc(grads, *null, Tensor::new(&[w], dn)?);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone().reshape(self.value(*x).shape())?),
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            } => {
                let s = 2.0 * gd[0] / denom;
                let dp: Vec<f64> = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask)
                    .map(|((p, t), m)| s * m * (p - t))
                    .collect();
                self.acc(grads, *pred, Tensor::new(self.value(*pred).shape(), dp)?);
            }
            Op::SumSquares(x) => {
                let s = 2.0 * gd[0];
                self.acc(grads, *x, self.value(*x).map(|v| s * v));
            }
            Op::Sum(x) => self.acc(grads, *x, Tensor::full(self.value(*x).shape(), gd[0])),
        }
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(name, gradient)` for every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match &n.op {
            Op::Param(name) => self.grads.get(i)?.as_ref().map(|g| (name.as_str(), g)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let w = tape.variable(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.variable(Tensor::vector(&[0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w0 = tape.variable(Tensor::zeros(&[2, 2]));
        let b0 = tape.variable(Tensor::vector(&[3.0, 4.0]));
        let y0 = tape.affine(x, w0, b0).unwrap();
        assert_eq!(tape.value(y0).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_weight_gradient_of_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let w = tape.variable(Tensor::matrix(&[&[0.3, -0.2], &[0.5, 0.1]]));
        let b = tape.variable(Tensor::vector(&[0.0, 0.0]));
        let y = tape.affine(x, w, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn affine_shape_mismatch_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.affine(x, w, b), Err(Error::Contract(_))));
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv1d(x, k).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let z = tape.constant(Tensor::zeros(&[2, 3, 6]));
        let k3 = tape.constant(Tensor::full(&[4, 3, 3], 0.7));
        let y = tape.conv1d(z, k3).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 6]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_even_width_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(matches!(tape.conv1d(x, k), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_cases() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::full(&[1], 1.0));
        let bias = tape.constant(Tensor::zeros(&[1]));
        let c = tape.constant(Tensor::full(&[1, 1, 4], 3.0));
        let y = tape.group_norm(c, 1, gain, bias).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::new(&[1, 1, 2], vec![1.0, -1.0]).unwrap());
        let y = tape.group_norm(x, 1, gain, bias).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);

        let g3 = tape.constant(Tensor::full(&[3], 1.0));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let x3 = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(tape.group_norm(x3, 2, g3, b3), Err(Error::Config(_))));
    }

    #[test]
    fn mish_values() {
        assert_eq!(mish_scalar(0.0), 0.0);
        for x in [-40.0, -3.0, -0.2, 0.7, 4.0, 19.0, 25.0] {
            let reference = x * f64::exp(x).ln_1p().tanh();
            assert!((mish_scalar(x) - reference).abs() < 1e-14 * (1.0 + reference.abs()), "{x}");
        }
        assert!((mish_scalar(20.0) - 20.0).abs() < 1e-6);
        let h = 1e-6;
        let fd = (mish_scalar(0.5 + h) - mish_scalar(0.5 - h)) / (2.0 * h);
        assert!((fd - mish_grad(0.5)).abs() < 1e-6);
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut tape = Tape::new();
        let latent = tape.variable(Tensor::vector(&[0.3, -0.9]));
        let out = tape.straight_through(latent, Tensor::vector(&[1.0, 2.0])).unwrap();
        let l = tape.sum_squares(out);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(latent).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.grad(latent), tape.grad(out));
    }
}
