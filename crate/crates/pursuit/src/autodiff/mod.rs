//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Arrays are flat row-major buffers. Every operation computes its values
//! eagerly and, while recording is enabled, links the result to its parent
//! arrays so `backward` can replay the graph in reverse. Graphs are plain
//! `Rc` DAGs: dropping the output frees the intermediates, while parameter
//! leaves (held by a [`store::ParamStore`]) survive across steps.
//!
//! Broadcasting is deliberately narrow: the right operand of a binary op
//! must have the same shape, be a scalar, or be a suffix of the left
//! operand's shape (broadcast over leading axes). Anything else panics
//! with both shapes in the message.

pub mod gemm;
pub mod gradcheck;
mod scan;
pub mod store;

#[cfg(test)]
mod tests;

pub use scan::ScanDims;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled; ops inside produce plain leaves.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            RECORDING.with(|r| r.set(self.0));
        }
    }
    let _guard = Guard(RECORDING.with(|r| r.replace(false)));
    f()
}

fn recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Boolean mask with an explicit shape; `true` marks a kept position.
#[derive(Clone, Debug)]
pub struct BoolMask {
    pub shape: Vec<usize>,
    pub data: Vec<bool>,
}

impl BoolMask {
    pub fn new(data: Vec<bool>, shape: Vec<usize>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "mask data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        BoolMask { shape, data }
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Matmul { m: usize, k: usize, n: usize },
    BmmNt { b: usize, m: usize, k: usize, n: usize },
    BmmNn { b: usize, m: usize, k: usize, n: usize },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    SumAll,
    MeanAll,
    Softmax { axis: usize },
    MaskedFill,
    LayerNorm { eps: f64 },
    Clamp { lo: f64, hi: f64 },
    Minimum,
    Reshape,
    Reverse { axis: usize },
    CausalConv,
    SelectiveScan(ScanDims),
}

enum Saved {
    None,
    Mask(Rc<BoolMask>),
    Hidden(Vec<f64>),
}

struct Node {
    op: Op,
    parents: Vec<DiffArray>,
    saved: Saved,
}

struct ArrayInner {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    node: Option<Node>,
    requires_grad: bool,
}

/// A dense f64 array participating in the differentiation graph.
///
/// Cloning is cheap (shared handle). Values are immutable through the
/// public API except for [`DiffArray::set_value`], which exists for
/// finite-difference probing of leaves.
#[derive(Clone)]
pub struct DiffArray {
    inner: Rc<RefCell<ArrayInner>>,
}

fn check_finite(tag: &str, values: &[f64]) {
    if cfg!(debug_assertions) {
        assert!(
            values.iter().all(|v| v.is_finite()),
            "{tag}: non-finite input value"
        );
    }
}

impl DiffArray {
    fn from_parts(values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value length {} does not match shape {:?}",
            values.len(),
            shape
        );
        DiffArray {
            inner: Rc::new(RefCell::new(ArrayInner {
                shape,
                values,
                grad: None,
                node: None,
                requires_grad,
            })),
        }
    }

    /// Leaf that accumulates gradient during backward.
    pub fn leaf(values: Vec<f64>, shape: Vec<usize>) -> Self {
        Self::from_parts(values, shape, true)
    }

    /// Leaf that is treated as a constant (no gradient buffer).
    pub fn constant(values: Vec<f64>, shape: Vec<usize>) -> Self {
        Self::from_parts(values, shape, false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(vec![v], vec![1])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::constant(vec![0.0; n], shape)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.values.len(), 1, "item() on non-scalar {:?}", inner.shape);
        inner.values[0]
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.borrow().values[idx]
    }

    /// Overwrites one component in place (finite-difference probing).
    pub fn set_value(&self, idx: usize, v: f64) {
        self.inner.borrow_mut().values[idx] = v;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().node.is_none()
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn result(&self, values: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<DiffArray>, saved: Saved) -> DiffArray {
        let _ = self;
        let out = DiffArray::from_parts(values, shape, false);
        if recording() {
            out.inner.borrow_mut().node = Some(Node { op, parents, saved });
        }
        out
    }

    // ── shape helpers ───────────────────────────────────────────────

    fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, len, inner)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `self [..., K] @ w [K, N] -> [..., N]`; leading axes of `self` are
    /// flattened into a batch of rows.
    pub fn matmul(&self, w: &DiffArray) -> DiffArray {
        let (a, b) = (self.inner.borrow(), w.inner.borrow());
        assert!(
            b.shape.len() == 2 && !a.shape.is_empty(),
            "matmul: need [...,K] @ [K,N], got {:?} @ {:?}",
            a.shape,
            b.shape
        );
        let k = *a.shape.last().unwrap();
        assert_eq!(
            k, b.shape[0],
            "matmul: inner dimensions differ: lhs {:?} rhs {:?}",
            a.shape, b.shape
        );
        let n = b.shape[1];
        let m = a.values.len() / k;
        check_finite("matmul", &a.values);
        check_finite("matmul", &b.values);
        let mut out = vec![0.0; m * n];
        gemm::gemm_nn(m, k, n, &a.values, &b.values, &mut out);
        let mut shape = a.shape.clone();
        *shape.last_mut().unwrap() = n;
        drop((a, b));
        self.result(out, shape, Op::Matmul { m, k, n }, vec![self.clone(), w.clone()], Saved::None)
    }

    /// Batched `q [B.., M, K] @ k [B.., N, K]ᵀ -> [B.., M, N]`.
    pub fn bmm_nt(&self, other: &DiffArray) -> DiffArray {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        let (asl, bsl) = (&a.shape, &b.shape);
        assert!(
            asl.len() >= 2 && bsl.len() >= 2 && asl[..asl.len() - 2] == bsl[..bsl.len() - 2],
            "bmm_nt: incompatible shapes {asl:?} vs {bsl:?}"
        );
        let (m, k) = (asl[asl.len() - 2], asl[asl.len() - 1]);
        let n = bsl[bsl.len() - 2];
        assert_eq!(k, bsl[bsl.len() - 1], "bmm_nt: inner dims differ: {asl:?} vs {bsl:?}");
        let batch: usize = asl[..asl.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm::gemm_nt(
                m,
                k,
                n,
                &a.values[bi * m * k..(bi + 1) * m * k],
                &b.values[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = asl[..asl.len() - 2].to_vec();
        shape.extend([m, n]);
        drop((a, b));
        self.result(out, shape, Op::BmmNt { b: batch, m, k, n }, vec![self.clone(), other.clone()], Saved::None)
    }

    /// Batched `a [B.., M, K] @ v [B.., K, N] -> [B.., M, N]`.
    pub fn bmm_nn(&self, other: &DiffArray) -> DiffArray {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        let (asl, bsl) = (&a.shape, &b.shape);
        assert!(
            asl.len() >= 2 && bsl.len() >= 2 && asl[..asl.len() - 2] == bsl[..bsl.len() - 2],
            "bmm_nn: incompatible shapes {asl:?} vs {bsl:?}"
        );
        let (m, k) = (asl[asl.len() - 2], asl[asl.len() - 1]);
        assert_eq!(k, bsl[bsl.len() - 2], "bmm_nn: inner dims differ: {asl:?} vs {bsl:?}");
        let n = bsl[bsl.len() - 1];
        let batch: usize = asl[..asl.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm::gemm_nn(
                m,
                k,
                n,
                &a.values[bi * m * k..(bi + 1) * m * k],
                &b.values[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = asl[..asl.len() - 2].to_vec();
        shape.extend([m, n]);
        drop((a, b));
        self.result(out, shape, Op::BmmNn { b: batch, m, k, n }, vec![self.clone(), other.clone()], Saved::None)
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn broadcast_len(&self, other: &DiffArray, opname: &str) -> usize {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        let blen = b.values.len();
        let ok = blen == a.values.len() && a.shape == b.shape
            || blen == 1
            || (blen < a.values.len() && a.shape.ends_with(&b.shape) && a.values.len() % blen == 0);
        assert!(
            ok,
            "{opname}: shapes do not broadcast: lhs {:?} rhs {:?} (rhs must equal, be scalar, or be a suffix)",
            a.shape, b.shape
        );
        blen
    }

    fn binary(&self, other: &DiffArray, op: Op, opname: &str, f: impl Fn(f64, f64) -> f64) -> DiffArray {
        let blen = self.broadcast_len(other, opname);
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        check_finite(opname, &a.values);
        check_finite(opname, &b.values);
        let out: Vec<f64> = if blen == 1 {
            let bv = b.values[0];
            a.values.iter().map(|&x| f(x, bv)).collect()
        } else if blen == a.values.len() {
            a.values.iter().zip(b.values.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            a.values
                .chunks_exact(blen)
                .flat_map(|chunk| chunk.iter().zip(b.values.iter()).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let shape = a.shape.clone();
        drop((a, b));
        self.result(out, shape, op, vec![self.clone(), other.clone()], Saved::None)
    }

    pub fn add(&self, other: &DiffArray) -> DiffArray {
        self.binary(other, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &DiffArray) -> DiffArray {
        self.binary(other, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &DiffArray) -> DiffArray {
        self.binary(other, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&self, other: &DiffArray) -> DiffArray {
        self.binary(other, Op::Div, "div", |x, y| x / y)
    }

    /// Elementwise min of two same-shape arrays. Ties take the left value's
    /// gradient.
    pub fn minimum(&self, other: &DiffArray) -> DiffArray {
        {
            let (a, b) = (self.inner.borrow(), other.inner.borrow());
            assert_eq!(a.shape, b.shape, "minimum: shapes differ: {:?} vs {:?}", a.shape, b.shape);
        }
        self.binary(other, Op::Minimum, "minimum", f64::min)
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn unary(&self, op: Op, opname: &str, f: impl Fn(f64) -> f64) -> DiffArray {
        let a = self.inner.borrow();
        check_finite(opname, &a.values);
        let out: Vec<f64> = a.values.iter().map(|&x| f(x)).collect();
        let shape = a.shape.clone();
        drop(a);
        self.result(out, shape, op, vec![self.clone()], Saved::None)
    }

    pub fn neg(&self) -> DiffArray {
        self.unary(Op::Neg, "neg", |x| -x)
    }

    pub fn scale(&self, c: f64) -> DiffArray {
        self.unary(Op::Scale(c), "scale", |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> DiffArray {
        self.unary(Op::AddScalar, "add_scalar", |x| x + c)
    }

    pub fn tanh(&self) -> DiffArray {
        self.unary(Op::Tanh, "tanh", f64::tanh)
    }

    pub fn sigmoid(&self) -> DiffArray {
        self.unary(Op::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn softplus(&self) -> DiffArray {
        self.unary(Op::Softplus, "softplus", softplus)
    }

    pub fn exp(&self) -> DiffArray {
        self.unary(Op::Exp, "exp", f64::exp)
    }

    pub fn log(&self) -> DiffArray {
        self.unary(Op::Log, "log", f64::ln)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> DiffArray {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        self.unary(Op::Clamp { lo, hi }, "clamp", |x| x.clamp(lo, hi))
    }

    // ── structure ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: Vec<usize>) -> DiffArray {
        let a = self.inner.borrow();
        assert_eq!(
            a.values.len(),
            shape.iter().product::<usize>(),
            "reshape: cannot view {:?} as {:?}",
            a.shape,
            shape
        );
        let values = a.values.clone();
        drop(a);
        self.result(values, shape, Op::Reshape, vec![self.clone()], Saved::None)
    }

    pub fn concat(parts: &[&DiffArray], axis: usize) -> DiffArray {
        assert!(!parts.is_empty(), "concat: empty input list");
        let first_shape = parts[0].shape();
        let (outer, _, inner) = Self::split_at_axis(&first_shape, axis);
        let mut total_len = 0;
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == first_shape.len()
                    && s[..axis] == first_shape[..axis]
                    && s[axis + 1..] == first_shape[axis + 1..],
                "concat: shape {s:?} incompatible with {first_shape:?} along axis {axis}"
            );
            total_len += s[axis];
        }
        let mut shape = first_shape.clone();
        shape[axis] = total_len;
        let mut out = vec![0.0; outer * total_len * inner];
        let mut offset = 0;
        for p in parts {
            let pi = p.inner.borrow();
            let plen = pi.shape[axis];
            for o in 0..outer {
                let src = &pi.values[o * plen * inner..(o + 1) * plen * inner];
                let dst_start = (o * total_len + offset) * inner;
                out[dst_start..dst_start + plen * inner].copy_from_slice(src);
            }
            offset += plen;
        }
        let parents: Vec<DiffArray> = parts.iter().map(|p| (*p).clone()).collect();
        parts[0].result(out, shape, Op::Concat { axis }, parents, Saved::None)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> DiffArray {
        let a = self.inner.borrow();
        let (outer, axis_len, inner) = Self::split_at_axis(&a.shape, axis);
        assert!(
            start + len <= axis_len,
            "slice: range {start}..{} exceeds axis {axis} of shape {:?}",
            start + len,
            a.shape
        );
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * axis_len + start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&a.values[src_start..src_start + len * inner]);
        }
        let mut shape = a.shape.clone();
        shape[axis] = len;
        drop(a);
        self.result(out, shape, Op::Slice { axis, start }, vec![self.clone()], Saved::None)
    }

    pub fn reverse(&self, axis: usize) -> DiffArray {
        let a = self.inner.borrow();
        let (outer, len, inner) = Self::split_at_axis(&a.shape, axis);
        let out = reverse_axis(&a.values, outer, len, inner);
        let shape = a.shape.clone();
        drop(a);
        self.result(out, shape, Op::Reverse { axis }, vec![self.clone()], Saved::None)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_axis(&self, axis: usize) -> DiffArray {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> DiffArray {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> DiffArray {
        let a = self.inner.borrow();
        let (outer, len, inner) = Self::split_at_axis(&a.shape, axis);
        assert!(len > 0, "reduce over empty axis {axis} of {:?}", a.shape);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                for i in 0..inner {
                    out[o * inner + i] += a.values[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = a.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        drop(a);
        let op = if mean { Op::MeanAxis { axis } } else { Op::SumAxis { axis } };
        self.result(out, shape, op, vec![self.clone()], Saved::None)
    }

    pub fn sum_all(&self) -> DiffArray {
        let a = self.inner.borrow();
        let s = kahan_free_sum(&a.values);
        drop(a);
        self.result(vec![s], vec![1], Op::SumAll, vec![self.clone()], Saved::None)
    }

    pub fn mean_all(&self) -> DiffArray {
        let a = self.inner.borrow();
        let n = a.values.len();
        assert!(n > 0, "mean of empty array");
        let s = kahan_free_sum(&a.values) / n as f64;
        drop(a);
        self.result(vec![s], vec![1], Op::MeanAll, vec![self.clone()], Saved::None)
    }

    // ── normalization / attention ───────────────────────────────────

    /// Softmax along `axis`. Masked-out positions (mask `false`) are
    /// excluded exactly: they receive -inf logits, hence zero weight.
    /// Each row along the axis must keep at least one valid position.
    pub fn softmax(&self, axis: usize, mask: Option<&BoolMask>) -> DiffArray {
        let x = match mask {
            Some(m) => self.masked_fill(m, f64::NEG_INFINITY),
            None => self.clone(),
        };
        let a = x.inner.borrow();
        let (outer, len, inner) = Self::split_at_axis(&a.shape, axis);
        let mut out = vec![0.0; a.values.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(a.values[idx(t)]);
                }
                assert!(
                    mx > f64::NEG_INFINITY,
                    "softmax: fully masked row (axis {axis}, shape {:?})",
                    a.shape
                );
                let mut denom = 0.0;
                for t in 0..len {
                    let e = (a.values[idx(t)] - mx).exp();
                    out[idx(t)] = e;
                    denom += e;
                }
                let inv = 1.0 / denom;
                for t in 0..len {
                    out[idx(t)] *= inv;
                }
            }
        }
        let shape = a.shape.clone();
        drop(a);
        self.result(out, shape, Op::Softmax { axis }, vec![x.clone()], Saved::None)
    }

    /// Replaces positions where the mask is `false` with `value`.
    /// The mask shape must equal the array shape.
    pub fn masked_fill(&self, mask: &BoolMask, value: f64) -> DiffArray {
        let a = self.inner.borrow();
        assert_eq!(
            a.shape, mask.shape,
            "masked_fill: mask shape {:?} does not match array shape {:?}",
            mask.shape, a.shape
        );
        let out: Vec<f64> = a
            .values
            .iter()
            .zip(mask.data.iter())
            .map(|(&v, &keep)| if keep { v } else { value })
            .collect();
        let shape = a.shape.clone();
        drop(a);
        self.result(
            out,
            shape,
            Op::MaskedFill,
            vec![self.clone()],
            Saved::Mask(Rc::new(mask.clone())),
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (population
    /// variance, stabilized by `eps`). No affine part; scale externally.
    pub fn layer_norm(&self, eps: f64) -> DiffArray {
        let a = self.inner.borrow();
        let width = *a.shape.last().expect("layer_norm on 0-d array");
        assert!(width > 0);
        let rows = a.values.len() / width;
        let mut out = vec![0.0; a.values.len()];
        for r in 0..rows {
            let row = &a.values[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..width {
                out[r * width + i] = (row[i] - mean) * inv;
            }
        }
        let shape = a.shape.clone();
        drop(a);
        self.result(out, shape, Op::LayerNorm { eps }, vec![self.clone()], Saved::None)
    }

    /// Causal depthwise convolution over the time axis of `[B, T, C]`.
    /// `kernel` is `[W, C]`; tap `j` multiplies the input `j` steps back,
    /// positions before the sequence start count as zero.
    pub fn causal_conv(&self, kernel: &DiffArray) -> DiffArray {
        let (a, w) = (self.inner.borrow(), kernel.inner.borrow());
        assert!(
            a.shape.len() == 3 && w.shape.len() == 2 && a.shape[2] == w.shape[1],
            "causal_conv: need [B,T,C] with kernel [W,C], got {:?} and {:?}",
            a.shape,
            w.shape
        );
        let (bsz, t_len, ch) = (a.shape[0], a.shape[1], a.shape[2]);
        let width = w.shape[0];
        let mut out = vec![0.0; a.values.len()];
        for b in 0..bsz {
            for t in 0..t_len {
                let dst = &mut out[(b * t_len + t) * ch..(b * t_len + t + 1) * ch];
                for j in 0..width.min(t + 1) {
                    let src = &a.values[(b * t_len + t - j) * ch..(b * t_len + t - j + 1) * ch];
                    let wrow = &w.values[j * ch..(j + 1) * ch];
                    for c in 0..ch {
                        dst[c] = wrow[c].mul_add(src[c], dst[c]);
                    }
                }
            }
        }
        let shape = a.shape.clone();
        drop((a, w));
        self.result(out, shape, Op::CausalConv, vec![self.clone(), kernel.clone()], Saved::None)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Accumulates `d(self)/d(leaf)` into every reachable leaf that
    /// requires gradient. `self` must hold exactly one element. Repeated
    /// calls keep accumulating until leaf grads are zeroed.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: output must be scalar, got shape {:?}",
            self.shape()
        );
        let order = self.topo_order();
        {
            let mut out = self.inner.borrow_mut();
            out.grad = Some(vec![1.0]);
        }
        for arr in order.iter().rev() {
            let contributions = {
                let inner = arr.inner.borrow();
                let node = match &inner.node {
                    Some(n) => n,
                    None => continue,
                };
                let grad = match &inner.grad {
                    Some(g) => g,
                    None => continue, // no downstream influence
                };
                backward_op(&node.op, &node.saved, &inner.values, &inner.shape, grad, &node.parents)
            };
            {
                let inner = arr.inner.borrow();
                let node = inner.node.as_ref().unwrap();
                for (parent, contrib) in node.parents.iter().zip(contributions) {
                    if let Some(c) = contrib {
                        parent.accumulate_grad(&c);
                    }
                }
            }
            // intermediate grads are no longer needed once the node has
            // propagated (reverse-topological order guarantees all
            // consumers ran already)
            if !Rc::ptr_eq(&arr.inner, &self.inner) {
                arr.inner.borrow_mut().grad = None;
            }
        }
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if inner.node.is_none() && !inner.requires_grad {
            return;
        }
        match &mut inner.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
                    *gi += ci;
                }
            }
            None => inner.grad = Some(contrib.to_vec()),
        }
    }

    fn needs_grad(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || inner.node.is_some()
    }

    fn topo_order(&self) -> Vec<DiffArray> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(DiffArray, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.ptr());
        while let Some((arr, child_idx)) = stack.pop() {
            let next_child = {
                let inner = arr.inner.borrow();
                inner.node.as_ref().and_then(|n| {
                    n.parents[child_idx..]
                        .iter()
                        .enumerate()
                        .find(|(_, p)| !seen.contains(&p.ptr()))
                        .map(|(off, p)| (child_idx + off, p.clone()))
                })
            };
            match next_child {
                Some((idx, child)) => {
                    seen.insert(child.ptr());
                    stack.push((arr, idx + 1));
                    stack.push((child, 0));
                }
                None => order.push(arr),
            }
        }
        order
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus; `softplus(softplus_inv(y)) == y` for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv needs positive input, got {y}");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn kahan_free_sum(values: &[f64]) -> f64 {
    // plain left-to-right sum; order fixed for determinism
    let mut s = 0.0;
    for &v in values {
        s += v;
    }
    s
}

fn reverse_axis(values: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for t in 0..len {
            let src = (o * len + t) * inner;
            let dst = (o * len + (len - 1 - t)) * inner;
            out[dst..dst + inner].copy_from_slice(&values[src..src + inner]);
        }
    }
    out
}

/// Reduces a full-size gradient onto a broadcast operand (scalar or
/// suffix). Accumulation order is index-ascending.
fn reduce_broadcast(dy: &[f64], f: impl Fn(usize) -> f64, blen: usize) -> Vec<f64> {
    let mut out = vec![0.0; blen];
    if blen == 1 {
        let mut s = 0.0;
        for i in 0..dy.len() {
            s += f(i);
        }
        out[0] = s;
    } else {
        for i in 0..dy.len() {
            out[i % blen] += f(i);
        }
    }
    out
}

fn expand_broadcast(i: usize, blen: usize) -> usize {
    if blen == 1 {
        0
    } else {
        i % blen
    }
}

fn backward_op(
    op: &Op,
    saved: &Saved,
    out_vals: &[f64],
    out_shape: &[usize],
    dy: &[f64],
    parents: &[DiffArray],
) -> Vec<Option<Vec<f64>>> {
    let p0 = &parents[0];
    match op {
        Op::Matmul { m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let w = parents[1].inner.borrow();
            let x = p0.inner.borrow();
            let d0 = if p0.needs_grad() {
                let mut wt = vec![0.0; k * n];
                gemm::transpose(k, n, &w.values, &mut wt);
                let mut dx = vec![0.0; m * k];
                gemm::gemm_nn(m, n, k, dy, &wt, &mut dx);
                Some(dx)
            } else {
                None
            };
            let d1 = if parents[1].needs_grad() {
                let mut dw = vec![0.0; k * n];
                gemm::gemm_tn(m, k, n, &x.values, dy, &mut dw);
                Some(dw)
            } else {
                None
            };
            vec![d0, d1]
        }
        Op::BmmNt { b, m, k, n } => {
            let (b, m, k, n) = (*b, *m, *k, *n);
            let q = p0.inner.borrow();
            let kv = parents[1].inner.borrow();
            let dq = if p0.needs_grad() {
                let mut d = vec![0.0; b * m * k];
                for bi in 0..b {
                    gemm::gemm_nn(
                        m,
                        n,
                        k,
                        &dy[bi * m * n..(bi + 1) * m * n],
                        &kv.values[bi * n * k..(bi + 1) * n * k],
                        &mut d[bi * m * k..(bi + 1) * m * k],
                    );
                }
                Some(d)
            } else {
                None
            };
            let dk = if parents[1].needs_grad() {
                let mut d = vec![0.0; b * n * k];
                for bi in 0..b {
                    gemm::gemm_tn(
                        m,
                        n,
                        k,
                        &dy[bi * m * n..(bi + 1) * m * n],
                        &q.values[bi * m * k..(bi + 1) * m * k],
                        &mut d[bi * n * k..(bi + 1) * n * k],
                    );
                }
                Some(d)
            } else {
                None
            };
            vec![dq, dk]
        }
        Op::BmmNn { b, m, k, n } => {
            let (b, m, k, n) = (*b, *m, *k, *n);
            let a = p0.inner.borrow();
            let v = parents[1].inner.borrow();
            let da = if p0.needs_grad() {
                let mut d = vec![0.0; b * m * k];
                for bi in 0..b {
                    gemm::gemm_nt(
                        m,
                        n,
                        k,
                        &dy[bi * m * n..(bi + 1) * m * n],
                        &v.values[bi * k * n..(bi + 1) * k * n],
                        &mut d[bi * m * k..(bi + 1) * m * k],
                    );
                }
                Some(d)
            } else {
                None
            };
            let dv = if parents[1].needs_grad() {
                let mut d = vec![0.0; b * k * n];
                for bi in 0..b {
                    gemm::gemm_tn(
                        m,
                        k,
                        n,
                        &a.values[bi * m * k..(bi + 1) * m * k],
                        &dy[bi * m * n..(bi + 1) * m * n],
                        &mut d[bi * k * n..(bi + 1) * k * n],
                    );
                }
                Some(d)
            } else {
                None
            };
            vec![da, dv]
        }
        Op::Add => {
            let blen = parents[1].numel();
            let d0 = p0.needs_grad().then(|| dy.to_vec());
            let d1 = parents[1]
                .needs_grad()
                .then(|| reduce_broadcast(dy, |i| dy[i], blen));
            vec![d0, d1]
        }
        Op::Sub => {
            let blen = parents[1].numel();
            let d0 = p0.needs_grad().then(|| dy.to_vec());
            let d1 = parents[1]
                .needs_grad()
                .then(|| reduce_broadcast(dy, |i| -dy[i], blen));
            vec![d0, d1]
        }
        Op::Mul => {
            let a = p0.inner.borrow();
            let b = parents[1].inner.borrow();
            let blen = b.values.len();
            let d0 = p0
                .needs_grad()
                .then(|| (0..dy.len()).map(|i| dy[i] * b.values[expand_broadcast(i, blen)]).collect());
            let d1 = parents[1]
                .needs_grad()
                .then(|| reduce_broadcast(dy, |i| dy[i] * a.values[i], blen));
            vec![d0, d1]
        }
        Op::Div => {
            let a = p0.inner.borrow();
            let b = parents[1].inner.borrow();
            let blen = b.values.len();
            let d0 = p0
                .needs_grad()
                .then(|| (0..dy.len()).map(|i| dy[i] / b.values[expand_broadcast(i, blen)]).collect());
            let d1 = parents[1].needs_grad().then(|| {
                reduce_broadcast(
                    dy,
                    |i| {
                        let bv = b.values[expand_broadcast(i, blen)];
                        -dy[i] * a.values[i] / (bv * bv)
                    },
                    blen,
                )
            });
            vec![d0, d1]
        }
        Op::Minimum => {
            let a = p0.inner.borrow();
            let b = parents[1].inner.borrow();
            let d0 = p0
                .needs_grad()
                .then(|| (0..dy.len()).map(|i| if a.values[i] <= b.values[i] { dy[i] } else { 0.0 }).collect());
            let d1 = parents[1]
                .needs_grad()
                .then(|| (0..dy.len()).map(|i| if b.values[i] < a.values[i] { dy[i] } else { 0.0 }).collect());
            vec![d0, d1]
        }
        Op::Neg => vec![p0.needs_grad().then(|| dy.iter().map(|&g| -g).collect())],
        Op::Scale(c) => vec![p0.needs_grad().then(|| dy.iter().map(|&g| g * c).collect())],
        Op::AddScalar => vec![p0.needs_grad().then(|| dy.to_vec())],
        Op::Tanh => vec![p0
            .needs_grad()
            .then(|| dy.iter().zip(out_vals).map(|(&g, &y)| g * (1.0 - y * y)).collect())],
        Op::Sigmoid => vec![p0
            .needs_grad()
            .then(|| dy.iter().zip(out_vals).map(|(&g, &y)| g * y * (1.0 - y)).collect())],
        Op::Softplus => {
            let x = p0.inner.borrow();
            vec![p0
                .needs_grad()
                .then(|| dy.iter().zip(x.values.iter()).map(|(&g, &xv)| g * sigmoid(xv)).collect())]
        }
        Op::Exp => vec![p0
            .needs_grad()
            .then(|| dy.iter().zip(out_vals).map(|(&g, &y)| g * y).collect())],
        Op::Log => {
            let x = p0.inner.borrow();
            vec![p0
                .needs_grad()
                .then(|| dy.iter().zip(x.values.iter()).map(|(&g, &xv)| g / xv).collect())]
        }
        Op::Clamp { lo, hi } => {
            let x = p0.inner.borrow();
            vec![p0.needs_grad().then(|| {
                dy.iter()
                    .zip(x.values.iter())
                    .map(|(&g, &xv)| if xv >= *lo && xv <= *hi { g } else { 0.0 })
                    .collect()
            })]
        }
        Op::Concat { axis } => {
            let (outer, total_len, inner) = DiffArray::split_at_axis(out_shape, *axis);
            let mut grads = Vec::with_capacity(parents.len());
            let mut offset = 0;
            for p in parents {
                let plen = p.shape()[*axis];
                if p.needs_grad() {
                    let mut d = vec![0.0; outer * plen * inner];
                    for o in 0..outer {
                        let src_start = (o * total_len + offset) * inner;
                        d[o * plen * inner..(o + 1) * plen * inner]
                            .copy_from_slice(&dy[src_start..src_start + plen * inner]);
                    }
                    grads.push(Some(d));
                } else {
                    grads.push(None);
                }
                offset += plen;
            }
            grads
        }
        Op::Slice { axis, start } => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let pshape = p0.shape();
            let (outer, full_len, inner) = DiffArray::split_at_axis(&pshape, *axis);
            let len = out_shape[*axis];
            let mut d = vec![0.0; p0.numel()];
            for o in 0..outer {
                let dst_start = (o * full_len + start) * inner;
                d[dst_start..dst_start + len * inner]
                    .copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let pshape = p0.shape();
            let (outer, len, inner) = DiffArray::split_at_axis(&pshape, *axis);
            let scale = if matches!(op, Op::MeanAxis { .. }) {
                1.0 / len as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; p0.numel()];
            for o in 0..outer {
                for t in 0..len {
                    let base = (o * len + t) * inner;
                    for i in 0..inner {
                        d[base + i] = dy[o * inner + i] * scale;
                    }
                }
            }
            vec![Some(d)]
        }
        Op::SumAll => vec![p0.needs_grad().then(|| vec![dy[0]; p0.numel()])],
        Op::MeanAll => {
            let n = p0.numel();
            vec![p0.needs_grad().then(|| vec![dy[0] / n as f64; n])]
        }
        Op::Softmax { axis } => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let (outer, len, inner) = DiffArray::split_at_axis(out_shape, *axis);
            let mut d = vec![0.0; dy.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |t: usize| (o * len + t) * inner + i;
                    let mut dot = 0.0;
                    for t in 0..len {
                        dot += out_vals[idx(t)] * dy[idx(t)];
                    }
                    for t in 0..len {
                        d[idx(t)] = out_vals[idx(t)] * (dy[idx(t)] - dot);
                    }
                }
            }
            vec![Some(d)]
        }
        Op::MaskedFill => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let mask = match saved {
                Saved::Mask(m) => m,
                _ => unreachable!("masked_fill without mask"),
            };
            vec![Some(
                dy.iter()
                    .zip(mask.data.iter())
                    .map(|(&g, &keep)| if keep { g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::LayerNorm { eps } => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let x = p0.inner.borrow();
            let width = *out_shape.last().unwrap();
            let rows = dy.len() / width;
            let mut d = vec![0.0; dy.len()];
            for r in 0..rows {
                let xr = &x.values[r * width..(r + 1) * width];
                let yr = &out_vals[r * width..(r + 1) * width];
                let gr = &dy[r * width..(r + 1) * width];
                let mean = xr.iter().sum::<f64>() / width as f64;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let g_mean = gr.iter().sum::<f64>() / width as f64;
                let gy_mean = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<f64>() / width as f64;
                for i in 0..width {
                    d[r * width + i] = inv * (gr[i] - g_mean - yr[i] * gy_mean);
                }
            }
            vec![Some(d)]
        }
        Op::Reshape => vec![p0.needs_grad().then(|| dy.to_vec())],
        Op::Reverse { axis } => {
            if !p0.needs_grad() {
                return vec![None];
            }
            let (outer, len, inner) = DiffArray::split_at_axis(out_shape, *axis);
            vec![Some(reverse_axis(dy, outer, len, inner))]
        }
        Op::CausalConv => {
            let x = p0.inner.borrow();
            let w = parents[1].inner.borrow();
            let (bsz, t_len, ch) = (out_shape[0], out_shape[1], out_shape[2]);
            let width = w.shape[0];
            let dx = if p0.needs_grad() {
                let mut d = vec![0.0; x.values.len()];
                for b in 0..bsz {
                    for t in 0..t_len {
                        let gr = &dy[(b * t_len + t) * ch..(b * t_len + t + 1) * ch];
                        for j in 0..width.min(t + 1) {
                            let dst = t - j;
                            let wrow = &w.values[j * ch..(j + 1) * ch];
                            let drow = &mut d[(b * t_len + dst) * ch..(b * t_len + dst + 1) * ch];
                            for c in 0..ch {
                                drow[c] = wrow[c].mul_add(gr[c], drow[c]);
                            }
                        }
                    }
                }
                Some(d)
            } else {
                None
            };
            let dw = if parents[1].needs_grad() {
                let mut d = vec![0.0; w.values.len()];
                for b in 0..bsz {
                    for t in 0..t_len {
                        let gr = &dy[(b * t_len + t) * ch..(b * t_len + t + 1) * ch];
                        for j in 0..width.min(t + 1) {
                            let src = &x.values[(b * t_len + t - j) * ch..(b * t_len + t - j + 1) * ch];
                            let drow = &mut d[j * ch..(j + 1) * ch];
                            for c in 0..ch {
                                drow[c] = gr[c].mul_add(src[c], drow[c]);
                            }
                        }
                    }
                }
                Some(d)
            } else {
                None
            };
            vec![dx, dw]
        }
        Op::SelectiveScan(dims) => {
            let h_saved = match saved {
                Saved::Hidden(h) => h,
                _ => unreachable!("scan without saved states"),
            };
            scan::scan_backward(dims, parents, h_saved, dy)
        }
    }
}

/// Plain sequential scan over one unbatched sample (no graph). Shares the
/// forward kernel with the differentiable op.
pub fn scan_reference(
    dims: &ScanDims,
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    y: &mut [f64],
) {
    scan::scan_forward_sample(dims, x, dt, a, b, c, d, y, None);
}

/// Selective-scan recurrence as a differentiable op.
///
/// Shapes: `x [B.., T, H, P]`, `dt [B.., T, H]`, `a [H]`, `b/c [B.., T, H, S]`,
/// `d [H, P]`; output matches `x`. See [`ScanDims`].
pub fn selective_scan(
    x: &DiffArray,
    dt: &DiffArray,
    a: &DiffArray,
    b: &DiffArray,
    c: &DiffArray,
    d: &DiffArray,
    dims: ScanDims,
) -> DiffArray {
    scan::scan_op(x, dt, a, b, c, d, dims)
}

impl std::fmt::Debug for DiffArray {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("DiffArray")
            .field("shape", &inner.shape)
            .field("leaf", &inner.node.is_none())
            .finish()
    }
}
