use mattekit_autograd::{
    check_gradients, nearest_upsample_kernel, Conv2dOptions, PadMode, Tape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so relu and smooth-abs kinks are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn conv2d_gradients() {
    for (opts, seed) in [
        (Conv2dOptions::new(1, 1, 1), 1),
        (Conv2dOptions::new(2, 1, 1), 2),
        (Conv2dOptions::new(1, 2, 2), 3),
        (
            Conv2dOptions::new(1, 2, 2).with_pad_mode(PadMode::Replicate),
            4,
        ),
    ] {
        let inputs = [
            uniform(&[2, 2, 6, 6], seed),
            uniform(&[3, 2, 3, 3], seed + 10),
            uniform(&[3], seed + 20),
        ];
        let r = check_gradients(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
                let y2 = g.square(y)?;
                g.sum(y2)
            },
            &inputs,
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{opts:?}: {r:?}");
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let inputs = [
        uniform(&[2, 2, 3, 3], 5),
        uniform(&[2, 3, 4, 4], 6),
        uniform(&[3], 7),
    ];
    let r = check_gradients(
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let y2 = g.square(y)?;
            g.sum(y2)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn transposed_conv_adjoint_is_kernel_sum_in_the_interior() {
    let w = uniform(&[1, 1, 4, 4], 8);
    let mut g = Tape::new();
    let x = g.leaf(Tensor::ones([1, 1, 4, 4]));
    let wv = g.constant(w.clone());
    let y = g.conv_transpose2d(x, wv, None, 2, 1).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let total: f64 = w.data().iter().sum();
    let grad = g.grad(x).unwrap();
    for iy in 1..3 {
        for ix in 1..3 {
            assert!((grad[iy * 4 + ix] - total).abs() < 1e-12);
        }
    }

    let inputs = [uniform(&[1, 1, 4, 4], 9)];
    let r = check_gradients(
        |g, v| {
            let wv = g.constant(w.clone());
            let y = g.conv_transpose2d(v[0], wv, None, 2, 1)?;
            g.sum(y)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn elementwise_and_activation_gradients() {
    let a = away_from_zero(&[2, 3, 2, 2], 11);
    let b = away_from_zero(&[2, 3, 2, 2], 12);
    type Build = fn(
        &mut Tape,
        mattekit_autograd::Var,
        mattekit_autograd::Var,
    ) -> mattekit_autograd::Result<mattekit_autograd::Var>;
    let cases: [(&str, Build); 7] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
        ("relu", |g, x, _| g.relu(x)),
        ("sigmoid", |g, x, _| g.sigmoid(x)),
        ("smooth_abs", |g, x, _| g.smooth_abs(x, 1e-6)),
        ("scale", |g, x, _| g.scale(x, -1.7)),
    ];
    for (name, build) in cases {
        let r = check_gradients(
            |g, v| {
                let y = build(g, v[0], v[1])?;
                let y2 = g.square(y)?;
                g.mean(y2)
            },
            &[a.clone(), b.clone()],
            EPS,
            TOL,
        )
        .unwrap();
        assert!(r.passed(), "{name}: {r:?}");
    }
}

#[test]
fn structural_op_gradients() {
    let a = uniform(&[2, 2, 3, 3], 13);
    let b = uniform(&[2, 1, 3, 3], 14);
    let scale = uniform(&[3], 15);
    let shift = uniform(&[3], 16);
    let weights: Vec<f64> = (0..54).map(|i| (i as f64 * 0.13).sin()).collect();
    let r = check_gradients(
        |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let c = g.channel_affine(c, v[2], v[3])?;
            let p = g.global_avg_pool(c)?;
            let p = g.broadcast_spatial(p, 3, 3)?;
            let m = g.mul(p, c)?;
            g.weighted_sum(m, weights.clone())
        },
        &[a, b, scale, shift],
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn conv_relu_mean_backward_matches_finite_differences() {
    let inputs = [
        uniform(&[1, 2, 5, 5], 17),
        uniform(&[2, 2, 3, 3], 18),
        uniform(&[2], 19),
    ];
    let r = check_gradients(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dOptions::same(3, 1))?;
            let y = g.relu(y)?;
            g.mean(y)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn sigmoid_of_conv_mean_random_input() {
    let inputs = [uniform(&[1, 2, 6, 6], 20), uniform(&[2, 2, 3, 3], 21)];
    let r = check_gradients(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, Conv2dOptions::same(3, 1))?;
            let y = g.sigmoid(y)?;
            g.mean(y)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.worst() < 1e-4, "{r:?}");
}

#[test]
fn nearest_upsample_kernel_is_exact_upsampling() {
    let x = uniform(&[1, 3, 4, 5], 22);
    let mut g = Tape::new();
    let xv = g.constant(x.clone());
    let w = g.constant(nearest_upsample_kernel(3));
    let y = g.conv_transpose2d(xv, w, None, 2, 1).unwrap();
    let out = g.value(y).data();
    for c in 0..3 {
        for oy in 0..8 {
            for ox in 0..10 {
                assert_eq!(
                    out[(c * 8 + oy) * 10 + ox],
                    x.data()[(c * 4 + oy / 2) * 5 + ox / 2]
                );
            }
        }
    }
}

fn conv_of(x: &Tensor, w: &Tensor, opts: Conv2dOptions) -> Vec<f64> {
    let mut g = Tape::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, None, opts).unwrap();
    g.value(y).data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bias_free_conv_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0, dil in 1usize..3) {
        let x = uniform(&[1, 2, 7, 7], seed);
        let y = uniform(&[1, 2, 7, 7], seed + 1);
        let w = uniform(&[2, 2, 3, 3], seed + 2);
        let opts = Conv2dOptions::same(3, dil);
        let mix = Tensor::from_fn([1, 2, 7, 7], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv_of(&mix, &w, opts);
        let cx = conv_of(&x, &w, opts);
        let cy = conv_of(&y, &w, opts);
        for i in 0..lhs.len() {
            let rhs = a * cx[i] + b * cy[i];
            let scale = lhs[i].abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs[i] - rhs).abs() / scale < 1e-12);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000) {
        let x = uniform(&[2, 2, 6, 6], seed);
        let w = uniform(&[2, 2, 3, 3], seed + 1);
        let opts = Conv2dOptions::new(2, 1, 1);
        let first: Vec<u64> = conv_of(&x, &w, opts).iter().map(|v| v.to_bits()).collect();
        let second: Vec<u64> = conv_of(&x, &w, opts).iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(first, second);
    }
}

#[test]
fn rms_normalize_gradients() {
    let x = uniform(&[2, 3, 2, 2], 23);
    let weights: Vec<f64> = (0..24).map(|i| (i as f64 * 0.29).cos()).collect();
    let r = check_gradients(
        |g, v| {
            let y = g.rms_normalize(v[0], 1e-3)?;
            g.weighted_sum(y, weights.clone())
        },
        &[x.clone()],
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
    // Around zero the eps term dominates and the op is nearly linear.
    let small = Tensor::from_fn([1, 1, 2, 2], |i| 1e-3 * (i as f64 - 1.5));
    let r = check_gradients(
        |g, v| {
            let y = g.rms_normalize(v[0], 1e-2)?;
            let y = g.square(y)?;
            g.sum(y)
        },
        &[small],
        EPS,
        TOL,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}
