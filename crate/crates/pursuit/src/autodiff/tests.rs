use super::gradcheck::grad_check;
use super::store::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore};
use super::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_leaf(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> DiffArray {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    DiffArray::leaf(vals, shape.to_vec())
}

/// Random constant projection so the per-op scalar loss has non-uniform
/// upstream gradients (uniform dy hides transposition bugs).
fn weighted_sum(x: &DiffArray, rng: &mut ChaCha8Rng) -> DiffArray {
    let n = x.numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = x.shape();
    x.mul(&DiffArray::constant(w, shape)).sum_all()
}

#[test]
fn closed_form_values() {
    assert_eq!(DiffArray::leaf(vec![0.0], vec![1]).tanh().item(), 0.0);
    let sp0 = DiffArray::leaf(vec![0.0], vec![1]).softplus().item();
    assert!((sp0 - std::f64::consts::LN_2).abs() < 1e-15, "softplus(0)={sp0}");

    // identity matmul leaves X unchanged
    let eye = DiffArray::constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3]);
    let mut r = rng(0);
    let x = rand_leaf(&mut r, &[3, 5], -2.0, 2.0);
    let y = eye.matmul(&x);
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn backward_closed_forms() {
    // d/dx x^2 at 3 = 6
    let x = DiffArray::leaf(vec![3.0], vec![1]);
    let y = x.mul(&x);
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![6.0]);

    // d/dx tanh at 0 = 1
    let x = DiffArray::leaf(vec![0.0], vec![1]);
    x.tanh().backward();
    assert_eq!(x.grad().unwrap(), vec![1.0]);
}

#[test]
fn two_layer_net_matches_finite_differences() {
    let mut r = rng(42);
    let w1 = rand_leaf(&mut r, &[4, 6], -1.0, 1.0);
    let w2 = rand_leaf(&mut r, &[6, 1], -1.0, 1.0);
    let x = rand_leaf(&mut r, &[3, 4], -1.0, 1.0);
    for target in [&w1, &w2, &x] {
        let f = |_: &DiffArray| x.matmul(&w1).tanh().matmul(&w2).sum_all();
        let err = grad_check(f, target, 1e-5);
        assert!(err < 1e-6, "two-layer net grad error {err}");
    }
}

#[test]
fn grad_check_named_cases() {
    let mut r = rng(7);
    let x = rand_leaf(&mut r, &[4], -1.0, 1.0);
    let err = grad_check(|x| x.tanh().sum_all(), &x, 1e-5);
    assert!(err < 1e-7, "sum(tanh) error {err}");

    let x0 = DiffArray::leaf(vec![0.0], vec![1]);
    let err = grad_check(|x| x.softplus(), &x0, 1e-5);
    assert!(err < 1e-7, "softplus error {err}");

    // error is pure float rounding for a linear function: |sum| * eps / (2h)
    let x = rand_leaf(&mut r, &[8], -2.0, 2.0);
    let err = grad_check(|x| x.sum_all(), &x, 1e-5);
    assert!(err < 1e-10, "linear function error {err}");
}

#[test]
fn per_op_gradients_match_finite_differences() {
    let tol = 1e-6;
    let h = 1e-5;
    let mut r = rng(123);

    // matmul, both operands
    let a = rand_leaf(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_leaf(&mut r, &[4, 5], -2.0, 2.0);
    for t in [&a, &b] {
        let err = grad_check(|_| weighted_sum(&a.matmul(&b), &mut rng(10)), t, h);
        assert!(err < tol, "matmul grad error {err}");
    }

    // batched matmuls
    let q = rand_leaf(&mut r, &[2, 3, 4], -2.0, 2.0);
    let k = rand_leaf(&mut r, &[2, 5, 4], -2.0, 2.0);
    for t in [&q, &k] {
        let err = grad_check(|_| weighted_sum(&q.bmm_nt(&k), &mut rng(11)), t, h);
        assert!(err < tol, "bmm_nt grad error {err}");
    }
    let v = rand_leaf(&mut r, &[2, 5, 3], -2.0, 2.0);
    let attn = rand_leaf(&mut r, &[2, 4, 5], -2.0, 2.0);
    for t in [&attn, &v] {
        let err = grad_check(|_| weighted_sum(&attn.bmm_nn(&v), &mut rng(12)), t, h);
        assert!(err < tol, "bmm_nn grad error {err}");
    }

    // binary ops with suffix broadcasting
    let x = rand_leaf(&mut r, &[3, 2, 4], -2.0, 2.0);
    let y = rand_leaf(&mut r, &[2, 4], -2.0, 2.0);
    let s = rand_leaf(&mut r, &[1], -2.0, 2.0);
    for (name, f) in [
        ("add", Box::new(|a: &DiffArray, b: &DiffArray| a.add(b)) as Box<dyn Fn(&DiffArray, &DiffArray) -> DiffArray>),
        ("sub", Box::new(|a, b| a.sub(b))),
        ("mul", Box::new(|a, b| a.mul(b))),
    ] {
        for (ti, t) in [&x, &y, &s].into_iter().enumerate() {
            let other: &DiffArray = if ti == 2 { &s } else { &y };
            let err = grad_check(|_| weighted_sum(&f(&x, other), &mut rng(13)), t, h);
            assert!(err < tol, "{name} grad error {err}");
        }
    }
    // div with denominators away from zero
    let denom_vals: Vec<f64> = (0..8).map(|_| r.gen_range(0.5..2.5)).collect();
    let denom = DiffArray::leaf(denom_vals, vec![2, 4]);
    for t in [&x, &denom] {
        let err = grad_check(|_| weighted_sum(&x.div(&denom), &mut rng(14)), t, h);
        assert!(err < tol, "div grad error {err}");
    }

    // unary ops
    let x = rand_leaf(&mut r, &[3, 4], -2.0, 2.0);
    let checks: Vec<(&str, Box<dyn Fn(&DiffArray) -> DiffArray>)> = vec![
        ("neg", Box::new(|a: &DiffArray| a.neg())),
        ("scale", Box::new(|a| a.scale(1.7))),
        ("add_scalar", Box::new(|a| a.add_scalar(0.3))),
        ("tanh", Box::new(|a| a.tanh())),
        ("sigmoid", Box::new(|a| a.sigmoid())),
        ("softplus", Box::new(|a| a.softplus())),
        ("exp", Box::new(|a| a.exp())),
        ("reshape", Box::new(|a| a.reshape(vec![4, 3]))),
        ("reverse", Box::new(|a| a.reverse(1))),
        ("layer_norm", Box::new(|a| a.layer_norm(1e-5))),
        ("softmax", Box::new(|a| a.softmax(1, None))),
        ("sum_axis", Box::new(|a| a.sum_axis(1))),
        ("mean_axis", Box::new(|a| a.mean_axis(0))),
    ];
    for (name, f) in &checks {
        let err = grad_check(|a| weighted_sum(&f(a), &mut rng(15)), &x, h);
        assert!(err < tol, "{name} grad error {err}");
    }
    let err = grad_check(|a| a.mean_all(), &x, h);
    assert!(err < tol, "mean_all grad error {err}");

    // log on positive inputs
    let xp = rand_leaf(&mut r, &[6], 0.1, 2.0);
    let err = grad_check(|a| weighted_sum(&a.log(), &mut rng(16)), &xp, h);
    assert!(err < tol, "log grad error {err}");

    // clamp away from its kinks
    let vals: Vec<f64> = (0..8)
        .map(|_| {
            let mut v: f64 = r.gen_range(-2.0..2.0);
            while (v.abs() - 1.5).abs() < 10.0 * h {
                v = r.gen_range(-2.0..2.0);
            }
            v
        })
        .collect();
    let xc = DiffArray::leaf(vals, vec![8]);
    let err = grad_check(|a| weighted_sum(&a.clamp(-1.5, 1.5), &mut rng(17)), &xc, h);
    assert!(err < tol, "clamp grad error {err}");

    // minimum away from ties
    let av: Vec<f64> = (0..6).map(|_| r.gen_range(-2.0..2.0)).collect();
    let bv: Vec<f64> = av.iter().map(|v| v + if v > &0.0 { 0.31 } else { -0.29 }).collect();
    let am = DiffArray::leaf(av, vec![6]);
    let bm = DiffArray::leaf(bv, vec![6]);
    for t in [&am, &bm] {
        let err = grad_check(|_| weighted_sum(&am.minimum(&bm), &mut rng(18)), t, h);
        assert!(err < tol, "minimum grad error {err}");
    }

    // slicing and concatenation
    let x = rand_leaf(&mut r, &[2, 5, 3], -2.0, 2.0);
    let err = grad_check(|a| weighted_sum(&a.slice(1, 1, 3), &mut rng(19)), &x, h);
    assert!(err < tol, "slice grad error {err}");
    let y = rand_leaf(&mut r, &[2, 2, 3], -2.0, 2.0);
    for t in [&x, &y] {
        let err = grad_check(
            |_| weighted_sum(&DiffArray::concat(&[&x, &y], 1), &mut rng(20)),
            t,
            h,
        );
        assert!(err < tol, "concat grad error {err}");
    }

    // masked softmax and masked_fill
    let x = rand_leaf(&mut r, &[2, 4], -2.0, 2.0);
    let mask = BoolMask::new(vec![true, false, true, true, false, true, true, false], vec![2, 4]);
    let err = grad_check(|a| weighted_sum(&a.softmax(1, Some(&mask)), &mut rng(21)), &x, h);
    assert!(err < tol, "masked softmax grad error {err}");
    let err = grad_check(|a| weighted_sum(&a.masked_fill(&mask, -3.0), &mut rng(22)), &x, h);
    assert!(err < tol, "masked_fill grad error {err}");

    // causal depthwise convolution
    let x = rand_leaf(&mut r, &[2, 6, 3], -2.0, 2.0);
    let w = rand_leaf(&mut r, &[4, 3], -2.0, 2.0);
    for t in [&x, &w] {
        let err = grad_check(|_| weighted_sum(&x.causal_conv(&w), &mut rng(23)), t, h);
        assert!(err < tol, "causal_conv grad error {err}");
    }

    // selective scan, every input
    let dims = ScanDims { seq: 5, heads: 2, head_dim: 3, state: 4 };
    let x = rand_leaf(&mut r, &[2, 5, 2, 3], -2.0, 2.0);
    let dt_vals: Vec<f64> = (0..2 * 5 * 2).map(|_| r.gen_range(0.05..0.5)).collect();
    let dt = DiffArray::leaf(dt_vals, vec![2, 5, 2]);
    let a = DiffArray::leaf(vec![-0.7, -1.3], vec![2]);
    let b = rand_leaf(&mut r, &[2, 5, 2, 4], -2.0, 2.0);
    let c = rand_leaf(&mut r, &[2, 5, 2, 4], -2.0, 2.0);
    let d = rand_leaf(&mut r, &[2, 3], -2.0, 2.0);
    for (name, t) in [("x", &x), ("dt", &dt), ("a", &a), ("b", &b), ("c", &c), ("d", &d)] {
        let err = grad_check(
            |_| weighted_sum(&selective_scan(&x, &dt, &a, &b, &c, &d, dims), &mut rng(24)),
            t,
            h,
        );
        assert!(err < tol, "scan grad wrt {name}: error {err}");
    }
}

#[test]
fn adjoints_are_linear() {
    let mut r = rng(5);
    let x = rand_leaf(&mut r, &[4], -1.0, 1.0);
    let f = |x: &DiffArray| x.tanh().sum_all();
    let g = |x: &DiffArray| x.mul(x).sum_all();

    f(&x).add(&g(&x)).backward();
    let combined = x.grad().unwrap();

    x.zero_grad();
    f(&x).backward();
    g(&x).backward(); // accumulates
    let separate = x.grad().unwrap();

    for (c, s) in combined.iter().zip(separate.iter()) {
        assert!((c - s).abs() < 1e-12, "adjoint linearity violated: {c} vs {s}");
    }
}

#[test]
fn repeated_backward_accumulates_until_zeroed() {
    let x = DiffArray::leaf(vec![2.0], vec![1]);
    let y = x.mul(&x);
    y.backward();
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![8.0]);
    x.zero_grad();
    y.backward();
    assert_eq!(x.grad().unwrap(), vec![4.0]);
}

#[test]
#[should_panic(expected = "backward: output must be scalar")]
fn backward_rejects_non_scalar() {
    let x = DiffArray::leaf(vec![1.0, 2.0], vec![2]);
    x.tanh().backward();
}

#[test]
#[should_panic(expected = "inner dimensions differ")]
fn matmul_rejects_shape_mismatch() {
    let a = DiffArray::leaf(vec![0.0; 6], vec![2, 3]);
    let b = DiffArray::leaf(vec![0.0; 8], vec![4, 2]);
    a.matmul(&b);
}

#[test]
#[should_panic(expected = "shapes do not broadcast")]
fn add_rejects_non_suffix_broadcast() {
    let a = DiffArray::leaf(vec![0.0; 6], vec![2, 3]);
    let b = DiffArray::leaf(vec![0.0; 2], vec![2]);
    a.add(&b);
}

#[test]
fn no_grad_produces_leaves() {
    let x = DiffArray::leaf(vec![1.0], vec![1]);
    let y = no_grad(|| x.tanh());
    assert!(y.is_leaf());
    let z = x.tanh();
    assert!(!z.is_leaf());
}

#[test]
fn deterministic_values_and_grads() {
    let run = || {
        let mut r = rng(99);
        let w = rand_leaf(&mut r, &[6, 6], -1.0, 1.0);
        let x = rand_leaf(&mut r, &[2, 6], -1.0, 1.0);
        let y = x.matmul(&w).tanh().layer_norm(1e-5).sum_all();
        y.backward();
        (y.item(), w.grad().unwrap(), x.grad().unwrap())
    };
    let (y1, gw1, gx1) = run();
    let (y2, gw2, gx2) = run();
    assert_eq!(y1.to_bits(), y2.to_bits());
    assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

// ── optimizer ───────────────────────────────────────────────────────

#[test]
fn adam_zero_grads_leave_params_unchanged() {
    let mut store = ParamStore::new();
    let p = store.register("w", vec![1.5, -0.5], vec![2]);
    store.adam_step(1e-3, 0.5);
    assert_eq!(p.to_vec(), vec![1.5, -0.5]);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut store = ParamStore::new();
    let p = store.register("w", vec![0.7], vec![1]);
    let loss = p.mul(&DiffArray::constant(vec![1.0], vec![1])).sum_all();
    loss.backward();
    store.adam_step(1e-3, 1.0);
    let delta = 0.7 - p.item();
    assert!((delta - 1e-3).abs() < 1e-10, "first step moved by {delta}");
}

#[test]
fn global_norm_clip_scales_gradients() {
    let mut store = ParamStore::new();
    let x = store.register("x", vec![0.0], vec![1]);
    let y = store.register("y", vec![0.0], vec![1]);
    let loss = x.scale(6.0).add(&y.scale(8.0)).sum_all();
    loss.backward();
    let pre = store.clip_grad_norm(0.5);
    assert!((pre - 10.0).abs() < 1e-12);
    assert!((x.grad().unwrap()[0] - 0.3).abs() < 1e-12);
    assert!((y.grad().unwrap()[0] - 0.4).abs() < 1e-12);
}

#[test]
fn param_store_iterates_lexicographically() {
    let mut store = ParamStore::new();
    store.register("b/x", vec![0.0], vec![1]);
    store.register("a/y", vec![0.0], vec![1]);
    store.register("a/b/z", vec![0.0], vec![1]);
    let names: Vec<&str> = store.names().collect();
    assert_eq!(names, vec!["a/b/z", "a/y", "b/x"]);
}

#[test]
#[should_panic(expected = "registered twice")]
fn param_store_rejects_duplicate_names() {
    let mut store = ParamStore::new();
    store.register("w", vec![0.0], vec![1]);
    store.register("w", vec![1.0], vec![1]);
}

// ── checkpoints ─────────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut store = ParamStore::new();
    let mut r = rng(31);
    let vals: Vec<f64> = (0..64)
        .map(|_| r.gen_range(-10.0..10.0f64) * 10f64.powi(r.gen_range(-12..12)))
        .collect();
    store.register("agent0/w", vals.clone(), vec![8, 8]);
    store.register("agent0/tiny", vec![1e-300, -3.5e300, 0.0, -0.0], vec![4]);

    let meta = CheckpointMeta { config_hash: "abc".into(), seed: 7, episode: 3 };
    save_checkpoint(&path, &[&store], &meta).unwrap();
    let (entries, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(meta, meta2);

    let mut store2 = ParamStore::new();
    let w2 = store2.register("agent0/w", vec![0.0; 64], vec![8, 8]);
    let t2 = store2.register("agent0/tiny", vec![0.0; 4], vec![4]);
    store2.load_entries(&entries, "agent0/").unwrap();
    for (a, b) in w2.to_vec().iter().zip(vals.iter()) {
        assert_eq!(a.to_bits(), b.to_bits(), "round trip changed {b} to {a}");
    }
    assert_eq!(t2.to_vec()[0].to_bits(), 1e-300f64.to_bits());
    assert_eq!(t2.to_vec()[1].to_bits(), (-3.5e300f64).to_bits());
}

#[test]
fn checkpoint_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    let mut store = ParamStore::new();
    store.register("w", vec![0.0; 6], vec![2, 3]);
    save_checkpoint(&path, &[&store], &CheckpointMeta::default()).unwrap();
    let (entries, _) = load_checkpoint(&path).unwrap();

    let mut other = ParamStore::new();
    other.register("w", vec![0.0; 6], vec![3, 2]);
    let err = other.load_entries(&entries, "").unwrap_err();
    assert!(err.to_string().contains("shape mismatch"), "got {err}");
}
