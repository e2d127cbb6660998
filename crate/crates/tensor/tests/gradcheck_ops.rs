//! Every differentiable op against central differences at tol 1e-4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtl_tensor::{
    grad_check, AttnSegment, GradCheckOptions, Graph, ParamId, ParamStore, Result, Tensor,
    TensorError, Var,
};

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

struct Fixture {
    store: ParamStore,
    a: ParamId,
    b: ParamId,
    row: ParamId,
    sq: ParamId,
}

fn fixture(seed: u64) -> Fixture {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store
        .insert("a", Tensor::randn(4, 6, 1.0, &mut r), true)
        .unwrap();
    let b = store
        .insert("b", Tensor::randn(4, 6, 1.0, &mut r), true)
        .unwrap();
    let row = store
        .insert("row", Tensor::randn(1, 6, 1.0, &mut r), false)
        .unwrap();
    let sq = store
        .insert("sq", Tensor::randn(6, 6, 0.5, &mut r), true)
        .unwrap();
    Fixture {
        store,
        a,
        b,
        row,
        sq,
    }
}

/// Reduces an arbitrary output to a scalar with non-uniform weights so that
/// every output entry matters.
fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var> {
    let [r, c] = g.shape(x);
    let w: Vec<f64> = (0..r * c)
        .map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0)
        .collect();
    let wv = g.constant(Tensor::new(r, c, w)?);
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, f: F)
where
    F: Fn(&mut Graph, &ParamStore, &Fixture) -> Result<Var>,
{
    let mut fx = fixture(name.len() as u64);
    let snapshot = Fixture {
        store: ParamStore::new(),
        a: fx.a,
        b: fx.b,
        row: fx.row,
        sq: fx.sq,
    };
    let report = grad_check(|g, s| f(g, s, &snapshot), &mut fx.store, &opts()).unwrap();
    assert!(report.passed, "{name}: {:#?}", report.params);
}

#[test]
fn elementwise_and_shape_ops() {
    check("add", |g, s, f| {
        let (a, b) = (g.param(s, f.a), g.param(s, f.b));
        let y = g.add(a, b)?;
        weighted_sum(g, y)
    });
    check("add_row", |g, s, f| {
        let (a, r) = (g.param(s, f.a), g.param(s, f.row));
        let y = g.add_row(a, r)?;
        weighted_sum(g, y)
    });
    check("mul", |g, s, f| {
        let (a, b) = (g.param(s, f.a), g.param(s, f.b));
        let y = g.mul(a, b)?;
        weighted_sum(g, y)
    });
    check("scale", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.scale(a, -1.7);
        weighted_sum(g, y)
    });
    check("transpose", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.transpose(a);
        weighted_sum(g, y)
    });
    check("concat_rows", |g, s, f| {
        let (a, b) = (g.param(s, f.a), g.param(s, f.b));
        let y = g.concat_rows(&[a, b, a])?;
        weighted_sum(g, y)
    });
    check("concat_cols", |g, s, f| {
        let (a, b) = (g.param(s, f.a), g.param(s, f.b));
        let y = g.concat_cols(b, a)?;
        weighted_sum(g, y)
    });
    check("slice_rows", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.slice_rows(a, 1, 2)?;
        weighted_sum(g, y)
    });
    check("gather_rows", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.gather_rows(a, &[3, 0, 3, 1])?;
        weighted_sum(g, y)
    });
    check("mean_rows", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.mean_rows_grouped(a, 2)?;
        let z = g.mean_rows(a)?;
        let y = weighted_sum(g, y)?;
        let z = weighted_sum(g, z)?;
        g.add(y, z)
    });
}

#[test]
fn matmul_variants() {
    check("matmul", |g, s, f| {
        let (a, sq) = (g.param(s, f.a), g.param(s, f.sq));
        let y = g.matmul(a, sq)?;
        weighted_sum(g, y)
    });
    check("matmul_nt", |g, s, f| {
        let (a, b) = (g.param(s, f.a), g.param(s, f.b));
        let y = g.matmul_nt(a, b)?;
        weighted_sum(g, y)
    });
    check("matmul_self", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.matmul_nt(a, a)?;
        weighted_sum(g, y)
    });
}

#[test]
fn nonlinear_ops() {
    check("gelu", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.gelu(a);
        weighted_sum(g, y)
    });
    check("sigmoid", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.sigmoid(a);
        weighted_sum(g, y)
    });
    check("softmax_rows", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.softmax_rows(a)?;
        weighted_sum(g, y)
    });
    check("l2_normalize_rows", |g, s, f| {
        let a = g.param(s, f.a);
        let y = g.l2_normalize_rows(a);
        weighted_sum(g, y)
    });
    check("layer_norm", |g, s, f| {
        let a = g.param(s, f.a);
        let gamma = g.param(s, f.row);
        let bv = g.param(s, f.b);
        let beta = g.slice_rows(bv, 2, 1)?;
        let y = g.layer_norm(a, gamma, beta)?;
        weighted_sum(g, y)
    });
    check("clamp", |g, s, f| {
        // bounds far from every entry so the kink is never straddled
        let a = g.param(s, f.a);
        let y = g.clamp(a, -50.0, 50.0);
        weighted_sum(g, y)
    });
}

#[test]
fn dropout_gradient_uses_the_recorded_mask() {
    check("dropout", |g, s, f| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let a = g.param(s, f.a);
        let y = g.dropout(a, 0.3, true, &mut r)?;
        weighted_sum(g, y)
    });
}

#[test]
fn losses() {
    check("cross_entropy", |g, s, f| {
        let a = g.param(s, f.a);
        g.cross_entropy_logits(a, &[0, 5, 2, 2])
    });
    check("bce", |g, s, f| {
        let a = g.param(s, f.a);
        let p = g.sigmoid(a);
        let p = g.clamp(p, 1e-7, 1.0 - 1e-7);
        let y: Vec<f64> = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();
        g.bce(p, &y)
    });
}

#[test]
fn attention_full_and_causal() {
    check("attention_cross", |g, s, f| {
        let (a, b, sq) = (g.param(s, f.a), g.param(s, f.b), g.param(s, f.sq));
        let k = g.matmul(b, sq)?;
        let segs = [AttnSegment::full(0, 2, 0, 3), AttnSegment::full(2, 2, 1, 3)];
        let y = g.attention(a, k, b, 2, &segs)?;
        weighted_sum(g, y)
    });
    check("attention_causal_prefix", |g, s, f| {
        let (a, b, sq) = (g.param(s, f.a), g.param(s, f.b), g.param(s, f.sq));
        let q = g.matmul(a, sq)?;
        let segs = [AttnSegment::causal(0, 4, 2)];
        let y = g.attention(q, a, b, 3, &segs)?;
        weighted_sum(g, y)
    });
}

#[test]
fn grad_check_linear_is_exact_and_zero_tol_fails() {
    let mut fx = fixture(1);
    let (a, sq) = (fx.a, fx.sq);
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let (av, sv) = (g.param(s, a), g.constant(s.value(sq).clone()));
        let y = g.matmul(av, sv)?;
        weighted_sum(g, y)
    };
    fx.store.get_mut(fx.b).trainable = false;
    fx.store.get_mut(fx.sq).trainable = false;
    let report = grad_check(
        f,
        &mut fx.store,
        &GradCheckOptions {
            tol: 1e-10,
            ..opts()
        },
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.params);
    assert!(report.worst() <= 1e-10);

    let report = grad_check(f, &mut fx.store, &GradCheckOptions { tol: 0.0, ..opts() }).unwrap();
    assert!(!report.passed);
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::cell::Cell;
    let mut fx = fixture(2);
    let calls = Cell::new(0u32);
    let a = fx.a;
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        calls.set(calls.get() + 1);
        let av = g.param(s, a);
        let y = g.scale(av, 1.0 + calls.get() as f64 * 1e-9);
        Ok(g.sum(y))
    };
    assert!(matches!(
        grad_check(f, &mut fx.store, &opts()),
        Err(TensorError::NonDeterministic { .. })
    ));
}
