//! Selective-scan recurrence: forward kernel and hand-written adjoint.
//!
//! The recurrence per head (scalar decay per head, outer-product input):
//!
//! ```text
//!   h_t[p,s] = exp(dt_t * a) * h_{t-1}[p,s] + dt_t * b_t[s] * x_t[p]
//!   y_t[p]   = sum_s c_t[s] * h_t[p,s] + d[p] * x_t[p]
//! ```
//!
//! The graph op treats the whole scan as one node: forward stores the
//! hidden states, backward runs the reverse recurrence for the gradient
//! flowing into every input. This keeps the per-step state out of the
//! graph, which matters because the scan sits inside every policy
//! evaluation.

use super::{check_finite, recording, DiffArray, Node, Op, Saved};

/// Dimensions of one scan invocation (leading batch axes are implied by
/// the input sizes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn x_elems(&self) -> usize {
        self.seq * self.heads * self.head_dim
    }
    pub fn dt_elems(&self) -> usize {
        self.seq * self.heads
    }
    pub fn bc_elems(&self) -> usize {
        self.seq * self.heads * self.state
    }
    pub fn h_elems(&self) -> usize {
        self.heads * self.head_dim * self.state
    }
}

/// Sequential scan over one sample. Writes `y` (same layout as `x`) and,
/// when given, the post-step hidden states per t into `h_save`
/// (`[T, H, P, S]`).
pub(crate) fn scan_forward_sample(
    dims: &ScanDims,
    x: &[f64],
    dt: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    y: &mut [f64],
    mut h_save: Option<&mut [f64]>,
) {
    let (t_len, heads, hd, ns) = (dims.seq, dims.heads, dims.head_dim, dims.state);
    let mut h = vec![0.0f64; dims.h_elems()];
    for t in 0..t_len {
        for head in 0..heads {
            let dt_th = dt[t * heads + head];
            let decay = (dt_th * a[head]).exp();
            let brow = &b[(t * heads + head) * ns..(t * heads + head + 1) * ns];
            let crow = &c[(t * heads + head) * ns..(t * heads + head + 1) * ns];
            for p in 0..hd {
                let xv = x[(t * heads + head) * hd + p];
                let dtx = dt_th * xv;
                let hrow = &mut h[(head * hd + p) * ns..(head * hd + p + 1) * ns];
                let mut acc = 0.0;
                for s in 0..ns {
                    hrow[s] = decay.mul_add(hrow[s], dtx * brow[s]);
                    acc = crow[s].mul_add(hrow[s], acc);
                }
                y[(t * heads + head) * hd + p] = d[head * hd + p].mul_add(xv, acc);
            }
        }
        if let Some(hs) = h_save.as_deref_mut() {
            let he = dims.h_elems();
            hs[t * he..(t + 1) * he].copy_from_slice(&h);
        }
    }
}

pub(crate) fn scan_op(
    x: &DiffArray,
    dt: &DiffArray,
    a: &DiffArray,
    b: &DiffArray,
    c: &DiffArray,
    d: &DiffArray,
    dims: ScanDims,
) -> DiffArray {
    let x_shape = x.shape();
    assert!(
        x.numel() % dims.x_elems() == 0,
        "scan: x shape {:?} incompatible with dims {:?}",
        x_shape,
        dims
    );
    let batch = x.numel() / dims.x_elems();
    assert_eq!(
        dt.numel(),
        batch * dims.dt_elems(),
        "scan: dt shape {:?} incompatible with x {:?}",
        dt.shape(),
        x_shape
    );
    assert_eq!(a.numel(), dims.heads, "scan: a shape {:?}, want [{}]", a.shape(), dims.heads);
    assert_eq!(b.numel(), batch * dims.bc_elems(), "scan: b shape {:?} incompatible", b.shape());
    assert_eq!(c.numel(), batch * dims.bc_elems(), "scan: c shape {:?} incompatible", c.shape());
    assert_eq!(
        d.numel(),
        dims.heads * dims.head_dim,
        "scan: d shape {:?}, want [{}, {}]",
        d.shape(),
        dims.heads,
        dims.head_dim
    );

    let record = recording();
    let (xv, dtv, av, bv, cv, dv) = (
        x.inner.borrow(),
        dt.inner.borrow(),
        a.inner.borrow(),
        b.inner.borrow(),
        c.inner.borrow(),
        d.inner.borrow(),
    );
    check_finite("scan", &xv.values);
    check_finite("scan", &dtv.values);
    let mut y = vec![0.0; xv.values.len()];
    let mut h_all = if record {
        vec![0.0; batch * dims.seq * dims.h_elems()]
    } else {
        Vec::new()
    };
    let (xe, de, bce, he) = (dims.x_elems(), dims.dt_elems(), dims.bc_elems(), dims.seq * dims.h_elems());
    for bi in 0..batch {
        let h_save = if record {
            Some(&mut h_all[bi * he..(bi + 1) * he])
        } else {
            None
        };
        scan_forward_sample(
            &dims,
            &xv.values[bi * xe..(bi + 1) * xe],
            &dtv.values[bi * de..(bi + 1) * de],
            &av.values,
            &bv.values[bi * bce..(bi + 1) * bce],
            &cv.values[bi * bce..(bi + 1) * bce],
            &dv.values,
            &mut y[bi * xe..(bi + 1) * xe],
            h_save,
        );
    }
    drop((xv, dtv, av, bv, cv, dv));

    let out = DiffArray::constant(y, x_shape);
    if record {
        out.inner.borrow_mut().node = Some(Node {
            op: Op::SelectiveScan(dims),
            parents: vec![x.clone(), dt.clone(), a.clone(), b.clone(), c.clone(), d.clone()],
            saved: Saved::Hidden(h_all),
        });
    }
    out
}

pub(crate) fn scan_backward(
    dims: &ScanDims,
    parents: &[DiffArray],
    h_saved: &[f64],
    dy: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (x, dt, a, b, c, d) = (
        parents[0].inner.borrow(),
        parents[1].inner.borrow(),
        parents[2].inner.borrow(),
        parents[3].inner.borrow(),
        parents[4].inner.borrow(),
        parents[5].inner.borrow(),
    );
    let needs: Vec<bool> = parents.iter().map(|p| p.needs_grad()).collect();
    let batch = x.values.len() / dims.x_elems();
    let (t_len, heads, hd, ns) = (dims.seq, dims.heads, dims.head_dim, dims.state);
    let (xe, de, bce) = (dims.x_elems(), dims.dt_elems(), dims.bc_elems());
    let he = dims.h_elems();

    let mut dx = needs[0].then(|| vec![0.0; x.values.len()]);
    let mut ddt = needs[1].then(|| vec![0.0; dt.values.len()]);
    let mut da = needs[2].then(|| vec![0.0; heads]);
    let mut db = needs[3].then(|| vec![0.0; b.values.len()]);
    let mut dc = needs[4].then(|| vec![0.0; c.values.len()]);
    let mut dd = needs[5].then(|| vec![0.0; heads * hd]);

    let mut gh = vec![0.0f64; he];
    let zeros_h = vec![0.0f64; he];
    for bi in 0..batch {
        gh.fill(0.0);
        let xs = &x.values[bi * xe..(bi + 1) * xe];
        let dts = &dt.values[bi * de..(bi + 1) * de];
        let bs = &b.values[bi * bce..(bi + 1) * bce];
        let cs = &c.values[bi * bce..(bi + 1) * bce];
        let dys = &dy[bi * xe..(bi + 1) * xe];
        let hs = &h_saved[bi * t_len * he..(bi + 1) * t_len * he];
        for t in (0..t_len).rev() {
            let h_prev = if t == 0 { &zeros_h[..] } else { &hs[(t - 1) * he..t * he] };
            let h_cur = &hs[t * he..(t + 1) * he];
            for head in 0..heads {
                let dt_th = dts[t * heads + head];
                let decay = (dt_th * a.values[head]).exp();
                let decay_next = if t + 1 < t_len {
                    (dts[(t + 1) * heads + head] * a.values[head]).exp()
                } else {
                    0.0
                };
                let brow = &bs[(t * heads + head) * ns..(t * heads + head + 1) * ns];
                let crow = &cs[(t * heads + head) * ns..(t * heads + head + 1) * ns];
                let mut ddt_acc = 0.0;
                let mut da_acc = 0.0;
                for p in 0..hd
                {
                    let gy = dys[(t * heads + head) * hd + p];
                    let xv = xs[(t * heads + head) * hd + p];
                    let hbase = (head * hd + p) * ns;
                    let ghrow = &mut gh[hbase..hbase + ns];
                    let mut gb_dot = 0.0;
                    let mut ghh_prev = 0.0;
                    for s in 0..ns {
                        // gh_t = gy ⊗ c_t + decay_{t+1} * gh_{t+1}
                        ghrow[s] = decay_next.mul_add(ghrow[s], gy * crow[s]);
                        gb_dot = ghrow[s].mul_add(brow[s], gb_dot);
                        ghh_prev = ghrow[s].mul_add(h_prev[hbase + s], ghh_prev);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[bi * xe + (t * heads + head) * hd + p] =
                            gy * d.values[head * hd + p] + dt_th * gb_dot;
                    }
                    if let Some(db) = db.as_deref_mut() {
                        let dbrow = &mut db[bi * bce + (t * heads + head) * ns..][..ns];
                        let dtx = dt_th * xv;
                        for s in 0..ns {
                            dbrow[s] = dtx.mul_add(ghrow[s], dbrow[s]);
                        }
                    }
                    if let Some(dc) = dc.as_deref_mut() {
                        let dcrow = &mut dc[bi * bce + (t * heads + head) * ns..][..ns];
                        for s in 0..ns {
                            dcrow[s] = gy.mul_add(h_cur[hbase + s], dcrow[s]);
                        }
                    }
                    if let Some(dd) = dd.as_deref_mut() {
                        dd[head * hd + p] = gy.mul_add(xv, dd[head * hd + p]);
                    }
                    // d h_t / d dt_t = a*decay*h_{t-1} + b ⊗ x
                    ddt_acc += a.values[head] * decay * ghh_prev + xv * gb_dot;
                    da_acc += ghh_prev;
                }
                if let Some(ddt) = ddt.as_deref_mut() {
                    ddt[bi * de + t * heads + head] += ddt_acc;
                }
                if let Some(da) = da.as_deref_mut() {
                    da[head] += dt_th * decay * da_acc;
                }
            }
        }
    }
    vec![dx, ddt, da, db, dc, dd]
}
