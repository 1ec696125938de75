//! Dense f64 matrix kernels used by the array operations.
//!
//! All kernels are row-major and reduction order is fixed: for a given
//! reduction length the per-element summation order never depends on the
//! other matrix dimensions. This makes a row of `a @ b` bit-identical
//! whether it is computed inside a batch of 1 or a batch of 10_000, which
//! the trainer relies on when it recomputes stored log-probabilities.

/// out[m, n] = sum_k a[m, k] * b[k, n]
///
/// `a`: [m, k] row-major, `b`: [k, n] row-major, `out`: [m, n] (overwritten).
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    // Outer-product formulation: k advances strictly 0..k for every output
    // element, independent of m and n.
    const MR: usize = 4;
    let mut row = 0;
    while row + MR <= m {
        rank_update::<MR>(row, k, n, a, b, out);
        row += MR;
    }
    while row < m {
        rank_update::<1>(row, k, n, a, b, out);
        row += 1;
    }
}

/// Accumulates `R` consecutive output rows starting at `row`.
#[inline(always)]
fn rank_update<const R: usize>(row: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    // Column blocking keeps the accumulator tile register-resident.
    const NB: usize = 32;
    let mut col = 0;
    while col < n {
        let nb = NB.min(n - col);
        if nb == NB {
            tile_kernel::<R, NB>(row, col, k, n, a, b, out);
        } else {
            tile_tail::<R>(row, col, nb, k, n, a, b, out);
        }
        col += nb;
    }
}

#[inline(always)]
fn tile_kernel<const R: usize, const NB: usize>(
    row: usize,
    col: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    let mut acc = [[0.0f64; NB]; R];
    for kk in 0..k {
        let brow = &b[kk * n + col..kk * n + col + NB];
        for i in 0..R {
            let aik = a[(row + i) * k + kk];
            let acc_i = &mut acc[i];
            for j in 0..NB {
                acc_i[j] = aik.mul_add(brow[j], acc_i[j]);
            }
        }
    }
    for i in 0..R {
        let dst = &mut out[(row + i) * n + col..(row + i) * n + col + NB];
        dst.copy_from_slice(&acc[i]);
    }
}

#[inline(always)]
fn tile_tail<const R: usize>(
    row: usize,
    col: usize,
    nb: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    let mut acc = [[0.0f64; 32]; R];
    for kk in 0..k {
        let brow = &b[kk * n + col..kk * n + col + nb];
        for i in 0..R {
            let aik = a[(row + i) * k + kk];
            let acc_i = &mut acc[i];
            for (j, &bv) in brow.iter().enumerate() {
                acc_i[j] = aik.mul_add(bv, acc_i[j]);
            }
        }
    }
    for i in 0..R {
        out[(row + i) * n + col..(row + i) * n + col + nb].copy_from_slice(&acc[i][..nb]);
    }
}

/// out[m, n] = sum_l a[l, m] * b[l, n]  (i.e. aᵀ @ b, reduction over rows of both)
pub fn gemm_tn(l: usize, m: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), l * m);
    debug_assert_eq!(b.len(), l * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    const MR: usize = 4;
    let mut row = 0;
    while row + MR <= m {
        tn_update::<MR>(row, l, m, n, a, b, out);
        row += MR;
    }
    while row < m {
        tn_update::<1>(row, l, m, n, a, b, out);
        row += 1;
    }
}

#[inline(always)]
fn tn_update<const R: usize>(row: usize, l: usize, m: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    const NB: usize = 32;
    let mut col = 0;
    while col + NB <= n {
        let mut acc = [[0.0f64; NB]; R];
        for ll in 0..l {
            let brow = &b[ll * n + col..ll * n + col + NB];
            for i in 0..R {
                let ail = a[ll * m + row + i];
                let acc_i = &mut acc[i];
                for j in 0..NB {
                    acc_i[j] = ail.mul_add(brow[j], acc_i[j]);
                }
            }
        }
        for i in 0..R {
            out[(row + i) * n + col..(row + i) * n + col + NB].copy_from_slice(&acc[i]);
        }
        col += NB;
    }
    if col < n {
        let nb = n - col;
        let mut acc = [[0.0f64; NB]; R];
        for ll in 0..l {
            let brow = &b[ll * n + col..ll * n + col + nb];
            for i in 0..R {
                let ail = a[ll * m + row + i];
                let acc_i = &mut acc[i];
                for (j, &bv) in brow.iter().enumerate() {
                    acc_i[j] = ail.mul_add(bv, acc_i[j]);
                }
            }
        }
        for i in 0..R {
            out[(row + i) * n + col..(row + i) * n + col + nb].copy_from_slice(&acc[i][..nb]);
        }
    }
}

/// out[m, n] = sum_k a[m, k] * b[n, k]  (i.e. a @ bᵀ, both row-major)
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

/// Fixed-order dot product: 8 partial lanes folded pairwise at the end.
/// The lane assignment depends only on the index, so the result depends
/// only on the reduction length.
#[inline(always)]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for j in 0..8 {
            lanes[j] = a[off + j].mul_add(b[off + j], lanes[j]);
        }
    }
    for i in chunks * 8..a.len() {
        lanes[i % 8] = a[i].mul_add(b[i], lanes[i % 8]);
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// out[n, m] = a[m, n]
pub fn transpose(m: usize, n: usize, a: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}
