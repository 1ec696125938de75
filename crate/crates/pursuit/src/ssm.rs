//! Selective state-space sequence blocks: the causal block for temporal
//! features and the bidirectional variant for relational features.
//!
//! The paper-level contract is the block equation; the interior follows
//! reference proportions at desk scale: pre-norm residual, input
//! projection split into signal and gate, short causal depthwise
//! convolution, input-dependent step size via softplus, scalar decay per
//! head with `a = -softplus(a_raw)` so the decay stays in (0, 1].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::store::ParamStore;
use crate::autodiff::{selective_scan, softplus_inv, BoolMask, DiffArray, ScanDims};
use crate::init::{uniform, xavier_uniform};

/// Block dimensions. Defaults follow the artifact-wide hidden size of 64
/// with standard reference proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    pub expand: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub conv_width: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { expand: 2, n_heads: 4, d_state: 16, conv_width: 4 }
    }
}

impl SsmConfig {
    pub fn d_inner(&self, d_model: usize) -> usize {
        let d_inner = self.expand * d_model;
        assert!(
            d_inner % self.n_heads == 0,
            "d_inner {} not divisible by {} heads",
            d_inner,
            self.n_heads
        );
        d_inner
    }
}

/// Boolean validity per (batch, time) position; `true` marks a valid
/// position. Valid positions must form a contiguous suffix of each row
/// (left-padding convention), asserted on construction.
#[derive(Clone, Debug)]
pub struct PaddingMask {
    pub batch: usize,
    pub len: usize,
    valid: Vec<bool>,
}

impl PaddingMask {
    pub fn from_rows(batch: usize, len: usize, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), batch * len, "mask size mismatch");
        for b in 0..batch {
            let row = &valid[b * len..(b + 1) * len];
            let first_valid = row.iter().position(|&v| v).unwrap_or(len);
            assert!(
                row[first_valid..].iter().all(|&v| v),
                "padding mask row {b} is not a contiguous suffix: {row:?}"
            );
        }
        PaddingMask { batch, len, valid }
    }

    /// Builds rows where the last `count` positions are valid.
    pub fn from_counts(len: usize, counts: &[usize]) -> Self {
        let mut valid = vec![false; counts.len() * len];
        for (b, &c) in counts.iter().enumerate() {
            assert!(c <= len, "valid count {c} exceeds window {len}");
            for t in len - c..len {
                valid[b * len + t] = true;
            }
        }
        PaddingMask { batch: counts.len(), len, valid }
    }

    pub fn full(batch: usize, len: usize) -> Self {
        PaddingMask { batch, len, valid: vec![true; batch * len] }
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.valid[b * self.len + t]
    }

    pub fn count(&self, b: usize) -> usize {
        self.valid[b * self.len..(b + 1) * self.len].iter().filter(|&&v| v).count()
    }

    /// 0/1 multiplier as a constant array of shape `[batch, len, inner]`.
    pub fn expand_f64(&self, inner: usize) -> DiffArray {
        let mut out = vec![0.0; self.batch * self.len * inner];
        for (i, &v) in self.valid.iter().enumerate() {
            if v {
                out[i * inner..(i + 1) * inner].fill(1.0);
            }
        }
        DiffArray::constant(out, vec![self.batch, self.len, inner])
    }

    /// Attention-shaped boolean mask `[batch, queries, len]`.
    pub fn expand_attn(&self, queries: usize) -> BoolMask {
        let mut data = vec![false; self.batch * queries * self.len];
        for b in 0..self.batch {
            for q in 0..queries {
                for t in 0..self.len {
                    data[(b * queries + q) * self.len + t] = self.valid[b * self.len + t];
                }
            }
        }
        BoolMask::new(data, vec![self.batch, queries, self.len])
    }
}

/// Parameters of one selective state-space block.
pub struct SsmBlockParams {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_state: usize,
    pub conv_width: usize,
    ln_scale: DiffArray,
    in_proj_w: DiffArray,
    in_proj_b: DiffArray,
    conv_w: DiffArray,
    conv_b: DiffArray,
    dt_w: DiffArray,
    dt_b: DiffArray,
    a_raw: DiffArray,
    b_proj_w: DiffArray,
    c_proj_w: DiffArray,
    d_skip: DiffArray,
    out_proj_w: DiffArray,
    out_proj_b: DiffArray,
}

impl SsmBlockParams {
    /// Registers all block parameters under `prefix` (e.g.
    /// `agent0/temporal`) and returns the handles.
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize, cfg: &SsmConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_inner = cfg.d_inner(d_model);
        let heads = cfg.n_heads;
        let head_dim = d_inner / heads;
        let reg = |store: &mut ParamStore, name: &str, values: Vec<f64>, shape: Vec<usize>| {
            store.register(&format!("{prefix}/{name}"), values, shape)
        };
        // step size starts near 0.1, a common stable regime
        let dt_bias = softplus_inv(0.1);
        // per-head decay magnitudes spread over [1, 8]
        let a_raw_vals: Vec<f64> = (0..heads)
            .map(|_| softplus_inv(rng.gen_range(1.0..8.0)))
            .collect();
        SsmBlockParams {
            d_model,
            d_inner,
            n_heads: heads,
            head_dim,
            d_state: cfg.d_state,
            conv_width: cfg.conv_width,
            ln_scale: reg(store, "ln_scale", vec![1.0; d_model], vec![d_model]),
            in_proj_w: reg(store, "in_proj/w", xavier_uniform(rng, d_model, 2 * d_inner), vec![d_model, 2 * d_inner]),
            in_proj_b: reg(store, "in_proj/b", vec![0.0; 2 * d_inner], vec![2 * d_inner]),
            conv_w: reg(
                store,
                "conv/w",
                uniform(rng, cfg.conv_width * d_inner, -(1.0 / (cfg.conv_width as f64)).sqrt(), (1.0 / (cfg.conv_width as f64)).sqrt()),
                vec![cfg.conv_width, d_inner],
            ),
            conv_b: reg(store, "conv/b", vec![0.0; d_inner], vec![d_inner]),
            dt_w: reg(store, "dt/w", xavier_uniform(rng, d_inner, heads), vec![d_inner, heads]),
            dt_b: reg(store, "dt/b", vec![dt_bias; heads], vec![heads]),
            a_raw: reg(store, "a_raw", a_raw_vals, vec![heads]),
            b_proj_w: reg(store, "b_proj/w", xavier_uniform(rng, d_inner, heads * cfg.d_state), vec![d_inner, heads * cfg.d_state]),
            c_proj_w: reg(store, "c_proj/w", xavier_uniform(rng, d_inner, heads * cfg.d_state), vec![d_inner, heads * cfg.d_state]),
            d_skip: reg(store, "d_skip", vec![1.0; d_inner], vec![d_inner]),
            out_proj_w: reg(store, "out_proj/w", xavier_uniform(rng, d_inner, d_model), vec![d_inner, d_model]),
            out_proj_b: reg(store, "out_proj/b", vec![0.0; d_model], vec![d_model]),
        }
    }

    fn scan_dims(&self, seq: usize) -> ScanDims {
        ScanDims { seq, heads: self.n_heads, head_dim: self.head_dim, state: self.d_state }
    }
}

fn silu(x: &DiffArray) -> DiffArray {
    x.mul(&x.sigmoid())
}

/// Causal selective state-space block over `seq [B, T, d_model]`.
///
/// Padded positions contribute nothing: inputs there are zeroed before
/// the convolution and scan, the step size is forced to zero so the
/// hidden state does not advance, and the output rows are zeroed.
pub fn mamba2_forward(p: &SsmBlockParams, seq: &DiffArray, mask: &PaddingMask) -> DiffArray {
    let shape = seq.shape();
    assert!(
        shape.len() == 3 && shape[2] == p.d_model,
        "mamba2_forward: want [B, T, {}], got {:?}",
        p.d_model,
        shape
    );
    let (bsz, t_len) = (shape[0], shape[1]);
    assert!(
        mask.batch == bsz && mask.len == t_len,
        "mamba2_forward: mask {}x{} does not match input {:?}",
        mask.batch,
        mask.len,
        shape
    );

    let mask_d = mask.expand_f64(p.d_model);
    let mask_inner = mask.expand_f64(p.d_inner);
    let mask_heads = mask.expand_f64(p.n_heads);

    let u = seq.mul(&mask_d);
    let xn = u.layer_norm(1e-5).mul(&p.ln_scale);
    let xz = xn.matmul(&p.in_proj_w).add(&p.in_proj_b);
    let x = xz.slice(2, 0, p.d_inner).mul(&mask_inner);
    let z = xz.slice(2, p.d_inner, p.d_inner);

    let x = silu(&x.causal_conv(&p.conv_w).add(&p.conv_b));

    let dt = x.matmul(&p.dt_w).add(&p.dt_b).softplus().mul(&mask_heads);
    let b = x.matmul(&p.b_proj_w).reshape(vec![bsz, t_len, p.n_heads, p.d_state]);
    let c = x.matmul(&p.c_proj_w).reshape(vec![bsz, t_len, p.n_heads, p.d_state]);
    let xh = x.reshape(vec![bsz, t_len, p.n_heads, p.head_dim]);
    let a = p.a_raw.softplus().neg();
    let d2 = p.d_skip.reshape(vec![p.n_heads, p.head_dim]);

    let y = selective_scan(&xh, &dt, &a, &b, &c, &d2, p.scan_dims(t_len));
    let y = y.reshape(vec![bsz, t_len, p.d_inner]).mul(&silu(&z));
    let out = y.matmul(&p.out_proj_w).add(&p.out_proj_b);
    u.add(&out).mul(&mask_d)
}

/// Bidirectional block: forward branch plus a time-reversed backward
/// branch, summed per position. The token sequence is always full, so no
/// mask is taken.
pub fn bimamba2_forward(fwd: &SsmBlockParams, bwd: &SsmBlockParams, seq: &DiffArray) -> DiffArray {
    let shape = seq.shape();
    let mask = PaddingMask::full(shape[0], shape[1]);
    let forward = mamba2_forward(fwd, seq, &mask);
    let backward = mamba2_forward(bwd, &seq.reverse(1), &mask).reverse(1);
    forward.add(&backward)
}

/// Sequential reference scan over one unbatched sample.
///
/// `x [T, H, P]`, `dt [T, H]`, `a [H]`, `b/c [T, H, S]`, `d [H, P]`.
pub fn selective_scan_naive(
    dims: &ScanDims,
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
) -> Vec<f64> {
    assert_eq!(x.len(), dims.x_elems(), "scan: x has {} elems, want {}", x.len(), dims.x_elems());
    assert_eq!(dt.len(), dims.dt_elems());
    assert_eq!(a.len(), dims.heads);
    assert_eq!(b.len(), dims.bc_elems());
    assert_eq!(c.len(), dims.bc_elems());
    assert_eq!(d.len(), dims.heads * dims.head_dim);
    let mut y = vec![0.0; x.len()];
    crate::autodiff::scan_reference(dims, x, dt, a, b, c, d, &mut y);
    y
}

/// Same recurrence computed segment-wise: the hidden state is carried
/// across fixed-size chunks and positions inside a chunk are expanded
/// from the carried state with explicit decay products.
pub fn selective_scan_chunked(
    dims: &ScanDims,
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    chunk: usize,
) -> Vec<f64> {
    assert!(chunk >= 1, "chunk size must be at least 1");
    let (t_len, heads, hd, ns) = (dims.seq, dims.heads, dims.head_dim, dims.state);
    let mut y = vec![0.0; x.len()];
    let mut carry = vec![0.0f64; dims.h_elems()];
    let mut h_t = vec![0.0f64; dims.h_elems()];
    let mut start = 0;
    while start < t_len {
        let end = (start + chunk).min(t_len);
        for t in start..end {
            // h_t = (prod_{u=start..t} decay_u) * carry
            //     + sum_{v=start..t} (prod_{u=v+1..t} decay_u) * dt_v * (b_v ⊗ x_v)
            for head in 0..heads {
                let decay_at = |u: usize| (dt[u * heads + head] * a[head]).exp();
                for p in 0..hd {
                    let hrow = &mut h_t[(head * hd + p) * ns..(head * hd + p + 1) * ns];
                    hrow.fill(0.0);
                    let mut prod = 1.0;
                    for v in (start..=t).rev() {
                        let scale = prod * dt[v * heads + head] * x[(v * heads + head) * hd + p];
                        let brow = &b[(v * heads + head) * ns..(v * heads + head + 1) * ns];
                        for s in 0..ns {
                            hrow[s] += scale * brow[s];
                        }
                        prod *= decay_at(v);
                    }
                    let cr = &carry[(head * hd + p) * ns..(head * hd + p + 1) * ns];
                    for s in 0..ns {
                        hrow[s] += prod * cr[s];
                    }
                    let crow = &c[(t * heads + head) * ns..(t * heads + head + 1) * ns];
                    let mut acc = 0.0;
                    for s in 0..ns {
                        acc += crow[s] * hrow[s];
                    }
                    y[(t * heads + head) * hd + p] = acc + d[head * hd + p] * x[(t * heads + head) * hd + p];
                }
            }
        }
        carry.copy_from_slice(&h_t);
        start = end;
    }
    y
}
