use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtl_tensor::{Graph, Tensor};

#[test]
fn softmax_rows_sum_to_one_on_1000_rows() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(1000, 9, 6.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let s = g.softmax_rows(xv).unwrap();
    for row in g.value(s).data().chunks(9) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn zero_row_normalizes_to_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(1, 4), true);
    let y = g.l2_normalize_rows(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = g.sum(y);
    let mut store = vtl_tensor::ParamStore::new();
    let grads = g.backward(s, &mut store).unwrap();
    assert!(grads.get(x).unwrap().all_finite());
}

proptest! {
    #[test]
    fn l2_normalize_gives_unit_rows(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..20)) {
        let t = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.l2_normalize_rows(x);
        for (r, row) in g.value(y).data().chunks(5).enumerate() {
            let input_norm = t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!(input_norm > 1e-6);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn transposed_matmul_agrees(seed in 0u64..500) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(3, 5, 1.0, &mut r);
        let b = Tensor::randn(4, 5, 1.0, &mut r);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul_nt(va, vb).unwrap();
        let reference = a.matmul(&b.transposed()).unwrap();
        prop_assert!(g.value(c).max_abs_diff(&reference) < 1e-12);
    }
}
