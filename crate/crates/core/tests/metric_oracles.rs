//! Metrics checked against brute-force oracles written from the definitions.

mod common;

use mattekit::metrics::{self, gradient, MetricParams};
use mattekit::AlphaMatte;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bfs_largest, conn_oracle, dense_gradient};

/// Alpha values drawn half from a coarse grid (so threshold ties occur) and
/// half uniformly.
fn random_alpha(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(0..=20) as f64 / 20.0
            } else {
                rng.gen_range(0.0..=1.0)
            }
        })
        .collect()
}

#[test]
fn conn_matches_flood_fill_oracle_exactly() {
    let (w, h) = (8, 8);
    let params = MetricParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let p = random_alpha(&mut rng, w * h);
        let g = random_alpha(&mut rng, w * h);
        let mask: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.75)).collect();
        let expected = conn_oracle(&p, &g, &mask, w, h, params.conn_step, params.conn_theta);
        let got = metrics::conn_error(
            &AlphaMatte::new(w, h, p).unwrap(),
            &AlphaMatte::new(w, h, g).unwrap(),
            &mask,
            params.conn_step,
            params.conn_theta,
        )
        .unwrap();
        assert_eq!(got, expected, "case {case}");
    }
}

#[test]
fn largest_component_matches_oracle_on_sparse_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let on: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.45)).collect();
        assert_eq!(
            metrics::connectivity::largest_component(&on, w, h),
            bfs_largest(&on, w, h)
        );
    }
}

#[test]
fn separable_gradient_matches_dense_oracle() {
    let (w, h) = (16, 16);
    let sigma = MetricParams::default().grad_sigma;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let p: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let g: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let dp = dense_gradient(&p, w, h, sigma);
        let dg = dense_gradient(&g, w, h, sigma);
        let sp = gradient::gradient_magnitude(&p, w, h, sigma);
        for (a, b) in sp.iter().zip(&dp) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        let mask = vec![true; w * h];
        let expected: f64 = dp
            .iter()
            .zip(&dg)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 1000.0;
        let got = metrics::grad_error(
            &AlphaMatte::new(w, h, p).unwrap(),
            &AlphaMatte::new(w, h, g).unwrap(),
            &mask,
            sigma,
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn shuffling_pixels_preserves_sad_mse_but_not_grad_conn() {
    let n = 8;
    // A common permutation of both mattes keeps the multiset of per-pixel
    // differences but not their spatial arrangement.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g: Vec<f64> = (0..n * n)
        .map(|i| ((i % n) as f64 / 7.0 + 0.1 * rng.gen::<f64>()).min(1.0))
        .collect();
    let p: Vec<f64> = g
        .iter()
        .map(|v| (v + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0))
        .collect();
    let mut perm: Vec<usize> = (0..n * n).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let shuffle = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let mask = vec![true; n * n];
    let params = MetricParams::default();
    let a = |v: Vec<f64>| AlphaMatte::new(n, n, v).unwrap();
    let base = metrics::evaluate_pair(&a(p.clone()), &a(g.clone()), &mask, &params).unwrap();
    let moved = metrics::evaluate_pair(&a(shuffle(&p)), &a(shuffle(&g)), &mask, &params).unwrap();
    assert!((base.sad - moved.sad).abs() < 1e-15);
    assert!((base.mse - moved.mse).abs() < 1e-15);
    assert!(
        (base.grad - moved.grad).abs() > 1e-6,
        "grad {} vs {}",
        base.grad,
        moved.grad
    );
    assert!(
        (base.conn - moved.conn).abs() > 1e-6,
        "conn {} vs {}",
        base.conn,
        moved.conn
    );
}

fn matte_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(0.0f64..=1.0, n * n),
        prop::collection::vec(0.0f64..=1.0, n * n),
        prop::collection::vec(any::<bool>(), n * n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sad_and_mse_are_symmetric((p, g, mask) in matte_pair(6)) {
        let (pa, ga) = (AlphaMatte::new(6, 6, p).unwrap(), AlphaMatte::new(6, 6, g).unwrap());
        prop_assert_eq!(metrics::sad(&pa, &ga, &mask).unwrap(), metrics::sad(&ga, &pa, &mask).unwrap());
        prop_assert_eq!(metrics::mse(&pa, &ga, &mask).unwrap(), metrics::mse(&ga, &pa, &mask).unwrap());
    }

    #[test]
    fn all_metrics_vanish_on_agreement((p, g, mask) in matte_pair(8)) {
        // Agreement on the mask only: outside it the prediction is arbitrary.
        let agreeing: Vec<f64> = (0..64).map(|i| if mask[i] { g[i] } else { p[i] }).collect();
        let params = MetricParams::default();
        let r = metrics::evaluate_pair(
            &AlphaMatte::new(8, 8, agreeing).unwrap(),
            &AlphaMatte::new(8, 8, g.clone()).unwrap(),
            &mask,
            &params,
        ).unwrap();
        prop_assert_eq!(r.sad, 0.0);
        prop_assert_eq!(r.mse, 0.0);
        // Grad and Conn see the neighbourhood, so only full agreement zeroes them.
        let full = metrics::evaluate_pair(
            &AlphaMatte::new(8, 8, g.clone()).unwrap(),
            &AlphaMatte::new(8, 8, g).unwrap(),
            &mask,
            &params,
        ).unwrap();
        prop_assert!(full.grad.abs() <= 1e-10 && full.conn.abs() <= 1e-10);
    }

    #[test]
    fn disagreement_on_the_mask_is_detected((_p, g, mask) in matte_pair(8)) {
        let i = mask.iter().position(|&m| m);
        prop_assume!(i.is_some());
        let i = i.unwrap();
        let mut q = g.clone();
        q[i] = if g[i] > 0.5 { g[i] - 0.4 } else { g[i] + 0.4 };
        let params = MetricParams::default();
        let r = metrics::evaluate_pair(
            &AlphaMatte::new(8, 8, q).unwrap(),
            &AlphaMatte::new(8, 8, g).unwrap(),
            &mask,
            &params,
        ).unwrap();
        prop_assert!(r.sad > 0.0 && r.mse > 0.0);
    }
}
