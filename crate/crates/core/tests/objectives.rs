use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtl_core::objectives::{
    coupling_loss, defect_loss, infonce, mine_hard_negatives, ptm_loss, stage1_contrastive,
    stage1_loss, stage2_loss, vqa_loss,
};
use vtl_core::tensor::{Graph, Tensor, Var};
use vtl_core::Error;

fn value(f: impl FnOnce(&mut Graph) -> vtl_core::Result<Var>) -> f64 {
    let mut g = Graph::inference();
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn nce(z: &Tensor, t: &Tensor, tau: f64) -> f64 {
    value(|g| {
        let (a, b) = (g.constant(z.clone()), g.constant(t.clone()));
        infonce(g, a, b, tau)
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Direct evaluation of the symmetric contrastive formula.
fn nce_oracle(z: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let n = z.rows();
    let dot = |i: usize, j: usize| {
        z.row_slice(i)
            .iter()
            .zip(t.row_slice(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / tau
    };
    let mut total = 0.0;
    for i in 0..n {
        total += log_sum_exp((0..n).map(|j| dot(i, j))) - dot(i, i);
        total += log_sum_exp((0..n).map(|j| dot(j, i))) - dot(i, i);
    }
    total / (2.0 * n as f64)
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let t = Tensor::randn(n, d, 1.0, rng);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row = t.row_slice(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn infonce_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = unit_rows(1, 8, &mut rng);
    let other = unit_rows(1, 8, &mut rng);
    assert_eq!(nce(&one, &other, 0.07), 0.0);

    let z = Tensor::from_rows(&vec![one.row_slice(0).to_vec(); 4]).unwrap();
    let t = Tensor::from_rows(&vec![other.row_slice(0).to_vec(); 4]).unwrap();
    assert!((nce(&z, &t, 0.07) - 4f64.ln()).abs() < 1e-9);

    let e = Tensor::identity(2);
    assert!((nce(&e, &e, 1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    assert!((nce(&e, &e, 1.0) - 0.31326).abs() < 1e-5);
}

#[test]
fn infonce_errors() {
    let e = Tensor::identity(2);
    let mut g = Graph::inference();
    let (a, b) = (g.constant(e.clone()), g.constant(e));
    assert!(matches!(infonce(&mut g, a, b, 0.0), Err(Error::Config(_))));
    assert!(matches!(infonce(&mut g, a, b, -1.0), Err(Error::Config(_))));
    let c = g.constant(Tensor::zeros(3, 2));
    assert!(infonce(&mut g, a, c, 0.07).is_err());
}

#[test]
fn infonce_is_non_negative_on_1000_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let d = rng.gen_range(2..12);
        let tau = rng.gen_range(0.02..2.0);
        let (z, t) = (unit_rows(n, d, &mut rng), unit_rows(n, d, &mut rng));
        let v = nce(&z, &t, tau);
        assert!(v >= 0.0 && v.is_finite(), "{v}");
    }
}

fn batch(seed: u64, n: usize, d: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (unit_rows(n, d, &mut rng), unit_rows(n, d, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn infonce_swap_is_exact(seed in any::<u64>(), n in 1usize..8, d in 2usize..10, tau in 0.02f64..2.0) {
        let (z, t) = batch(seed, n, d);
        prop_assert_eq!(nce(&z, &t, tau).to_bits(), nce(&t, &z, tau).to_bits());
    }

    #[test]
    fn infonce_matches_the_formula(seed in any::<u64>(), n in 1usize..8, d in 2usize..10, tau in 0.02f64..2.0) {
        let (z, t) = batch(seed, n, d);
        prop_assert!((nce(&z, &t, tau) - nce_oracle(&z, &t, tau)).abs() < 1e-9);
    }

    #[test]
    fn joint_row_permutation_leaves_losses_unchanged(seed in any::<u64>(), n in 2usize..8) {
        let (z, t) = batch(seed, n, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pick = |x: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((nce(&z, &t, 0.07) - nce(&pick(&z), &pick(&t), 0.07)).abs() < 1e-12);

        let logits = Tensor::randn(n, 5, 1.0, &mut rng);
        let targets: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 5]).collect();
        let lp = pick(&logits);
        let tp: Vec<Vec<usize>> = perm.iter().map(|&i| targets[i].clone()).collect();
        let a = value(|g| { let l = g.constant(logits.clone()); vqa_loss(g, l, &targets) });
        let b = value(|g| { let l = g.constant(lp.clone()); vqa_loss(g, l, &tp) });
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hard_negatives_match_a_brute_force_argmax(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Values on a coarse grid so ties occur.
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
        let sim = Tensor::new(n, n, data).unwrap();
        let got = mine_hard_negatives(&sim).unwrap();
        for (i, &j) in got.iter().enumerate() {
            let best = (0..n).filter(|&k| k != i).map(|k| sim.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
            let first = (0..n).find(|&k| k != i && sim.get(i, k) == best).unwrap();
            prop_assert_eq!(j, first);
        }
    }
}

#[test]
fn hard_negative_examples() {
    let sim = Tensor::from_rows(&[
        vec![1.0, 0.5, 0.5],
        vec![0.2, 1.0, 0.7],
        vec![0.9, 0.1, 1.0],
    ])
    .unwrap();
    assert_eq!(mine_hard_negatives(&sim).unwrap(), vec![1, 2, 0]);
    assert!(mine_hard_negatives(&Tensor::scalar(1.0)).is_none());
}

#[test]
fn contrastive_sum_and_identical_modalities() {
    let (z, t) = batch(3, 5, 6);
    let (zt, _) = batch(4, 5, 6);
    let sum = value(|g| {
        let (a, b, c) = (
            g.constant(z.clone()),
            g.constant(zt.clone()),
            g.constant(t.clone()),
        );
        stage1_contrastive(g, a, b, c, 0.1)
    });
    assert!((sum - (nce(&z, &t, 0.1) + nce(&zt, &t, 0.1))).abs() < 1e-12);
    let twice = value(|g| {
        let (a, b, c) = (
            g.constant(z.clone()),
            g.constant(z.clone()),
            g.constant(t.clone()),
        );
        stage1_contrastive(g, a, b, c, 0.1)
    });
    assert_eq!(twice, 2.0 * nce(&z, &t, 0.1));
    let (z1, t1) = batch(5, 1, 6);
    let zero = value(|g| {
        let (a, b, c) = (
            g.constant(z1.clone()),
            g.constant(z1.clone()),
            g.constant(t1.clone()),
        );
        stage1_contrastive(g, a, b, c, 0.1)
    });
    assert_eq!(zero, 0.0);
}

fn ptm(p: &[f64], y: &[f64]) -> f64 {
    value(|g| {
        let v = g.constant(Tensor::new(p.len(), 1, p.to_vec()).unwrap());
        ptm_loss(g, v, y)
    })
}

#[test]
fn matching_loss_examples() {
    assert!((ptm(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    assert!(ptm(&[1.0, 0.0], &[1.0, 0.0]) <= 1e-6);
    assert!((ptm(&[0.9, 0.2], &[1.0, 0.0]) - 0.16425).abs() < 1e-5);
    assert!((ptm(&[0.9, 0.2], &[1.0, 0.0]) + (0.9f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-12);
    let mut g = Graph::inference();
    let v = g.constant(Tensor::scalar(0.5));
    assert!(matches!(ptm_loss(&mut g, v, &[]), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn matching_loss_matches_bce(ps in prop::collection::vec(0.0f64..=1.0, 1..10), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = ps.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let want = -ps.iter().zip(&y).map(|(p, y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        }).sum::<f64>() / ps.len() as f64;
        prop_assert!((ptm(&ps, &y) - want).abs() < 1e-12);
    }
}

#[test]
fn weighted_sums() {
    let vals = |g: &mut Graph| {
        (
            g.constant(Tensor::scalar(1.25)),
            g.constant(Tensor::scalar(0.5)),
        )
    };
    let only = value(|g| {
        let (c, m) = vals(g);
        stage1_loss(g, c, Some(m), 0.0)
    });
    assert_eq!(only, 1.25);
    let sum = value(|g| {
        let (c, m) = vals(g);
        stage1_loss(g, c, Some(m), 1.0)
    });
    assert_eq!(sum, 1.75);
    let w = value(|g| {
        let (c, m) = vals(g);
        stage2_loss(g, c, Some(m), 0.3)
    });
    assert_eq!(w, 1.25 + 0.3 * 0.5);
    let none = value(|g| {
        let (c, _) = vals(g);
        stage2_loss(g, c, None, 1.0)
    });
    assert_eq!(none, 1.25);
}

#[test]
fn coupling_reuses_the_contrastive_form() {
    let (zv, zt) = batch(9, 6, 8);
    let c = value(|g| {
        let (a, b) = (g.constant(zv.clone()), g.constant(zt.clone()));
        coupling_loss(g, a, b, 0.2)
    });
    assert!((c - nce_oracle(&zv, &zt, 0.2)).abs() < 1e-12);
    let (v1, t1) = batch(2, 1, 8);
    let single = value(|g| {
        let (a, b) = (g.constant(v1.clone()), g.constant(t1.clone()));
        coupling_loss(g, a, b, 0.2)
    });
    assert_eq!(single, 0.0);
}

fn token_loss(defect: bool, logits: &Tensor, targets: &[Vec<usize>]) -> f64 {
    value(|g| {
        let l = g.constant(logits.clone());
        if defect {
            defect_loss(g, l, targets)
        } else {
            vqa_loss(g, l, targets)
        }
    })
}

#[test]
fn token_losses_sum_positions_and_average_samples() {
    for defect in [false, true] {
        for v in [5usize, 16, 40] {
            let uniform = Tensor::zeros(6, v);
            let got = token_loss(defect, &uniform, &[vec![1, 2], vec![0, 3, 4, 2]]);
            assert!((got - 3.0 * (v as f64).ln()).abs() < 1e-9);
        }
        let got = token_loss(defect, &Tensor::zeros(3, 16), &[vec![1, 2, 3]]);
        assert!((got - 3.0 * 16f64.ln()).abs() < 1e-9);
        assert!((got - 8.3178).abs() < 1e-4);

        let mut sharp = Tensor::zeros(3, 8);
        for (r, &t) in [4usize, 1, 2].iter().enumerate() {
            sharp.set(r, t, 60.0);
        }
        assert!(token_loss(defect, &sharp, &[vec![4], vec![1, 2]]) < 1e-20);

        let mut g = Graph::inference();
        let l = g.constant(Tensor::zeros(2, 8));
        assert!(matches!(
            vqa_loss(&mut g, l, &[vec![1, 2], vec![]]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            defect_loss(&mut g, l, &[]),
            Err(Error::Contract(_))
        ));
    }
}

proptest! {
    #[test]
    fn token_loss_matches_log_softmax_sums(seed in any::<u64>(), lens in prop::collection::vec(1usize..5, 1..4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 7;
        let total: usize = lens.iter().sum();
        let logits = Tensor::randn(total, v, 2.0, &mut rng);
        let targets: Vec<Vec<usize>> = lens.iter().map(|&l| (0..l).map(|_| rng.gen_range(0..v)).collect()).collect();
        let mut want = 0.0;
        for (r, &t) in targets.iter().flatten().enumerate() {
            let row = logits.row_slice(r);
            want += log_sum_exp(row.iter().copied()) - row[t];
        }
        want /= lens.len() as f64;
        prop_assert!((token_loss(false, &logits, &targets) - want).abs() < 1e-9);
        prop_assert_eq!(token_loss(false, &logits, &targets), token_loss(true, &logits, &targets));
    }
}
