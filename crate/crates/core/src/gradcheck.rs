//! Finite-difference checks over every differentiable op, the losses, and the
//! whole network at 1×4×16×16 with tiny widths.

use mattekit_autograd::{
    check_gradients, check_gradients_with_floor, Conv2dOptions, PadMode, Tape, Tensor, Var,
};
use rand::Rng as _;

use crate::losses::{self, CompositionTargets, HybridMode};
use crate::net::{NetConfig, Network};
use crate::rng::{stream, stream_rng};
use crate::Result;

/// Central-difference step.
pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

struct Inputs {
    seed: u64,
    next: u64,
}

impl Inputs {
    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let mut rng = stream_rng(self.seed, stream::GRADCHECK, self.next);
        self.next += 1;
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Magnitudes in [0.1, 1) so kinks at zero are never straddled.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let mut rng = stream_rng(self.seed, stream::GRADCHECK, self.next);
        self.next += 1;
        Tensor::from_fn(shape.to_vec(), |_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    fn unit(&mut self, n: usize) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, stream::GRADCHECK, self.next);
        self.next += 1;
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }
}

fn lift(e: crate::Error) -> mattekit_autograd::Error {
    mattekit_autograd::Error::Usage(e.to_string())
}

fn check<F>(name: &str, f: F, inputs: &[Tensor], tolerance: f64) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> mattekit_autograd::Result<Var>,
{
    let r = check_gradients(f, inputs, STEP, tolerance)?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: r.worst(),
        tolerance,
    })
}

/// Squares then averages so every op is checked through a nonlinear reduction.
fn squared_mean(g: &mut Tape, y: Var) -> mattekit_autograd::Result<Var> {
    let y2 = g.square(y)?;
    g.mean(y2)
}

pub fn op_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut gen = Inputs { seed, next: 0 };
    let mut out = Vec::new();
    let tol = OP_TOLERANCE;

    let a = gen.away_from_zero(&[2, 3, 2, 2]);
    let b = gen.away_from_zero(&[2, 3, 2, 2]);
    type Unary = fn(&mut Tape, Var, Var) -> mattekit_autograd::Result<Var>;
    let elementwise: [(&str, Unary); 8] = [
        ("add", |g, x, y| g.add(x, y)),
        ("sub", |g, x, y| g.sub(x, y)),
        ("mul", |g, x, y| g.mul(x, y)),
        ("relu", |g, x, _| g.relu(x)),
        ("sigmoid", |g, x, _| g.sigmoid(x)),
        ("smooth_abs", |g, x, _| g.smooth_abs(x, 1e-6)),
        ("square", |g, x, _| g.square(x)),
        ("scale", |g, x, _| g.scale(x, -1.7)),
    ];
    for (name, op) in elementwise {
        let r = check(
            name,
            |g, v| {
                let y = op(g, v[0], v[1])?;
                squared_mean(g, y)
            },
            &[a.clone(), b.clone()],
            tol,
        )?;
        out.push(r);
    }
    out.push(check(
        "sum",
        |g, v| {
            let y = g.square(v[0])?;
            g.sum(y)
        },
        &[a.clone()],
        tol,
    )?);
    let weights = gen.unit(24);
    out.push(check(
        "weighted_sum",
        |g, v| {
            let y = g.square(v[0])?;
            g.weighted_sum(y, weights.clone())
        },
        &[a.clone()],
        tol,
    )?);

    for (name, opts) in [
        ("conv2d", Conv2dOptions::new(1, 1, 1)),
        ("conv2d_stride2", Conv2dOptions::new(2, 1, 1)),
        ("conv2d_dilated", Conv2dOptions::new(1, 2, 2)),
        (
            "conv2d_replicate",
            Conv2dOptions::new(1, 2, 2).with_pad_mode(PadMode::Replicate),
        ),
    ] {
        let inputs = [
            gen.uniform(&[2, 2, 6, 6]),
            gen.uniform(&[3, 2, 3, 3]),
            gen.uniform(&[3]),
        ];
        out.push(check(
            name,
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), opts)?;
                squared_mean(g, y)
            },
            &inputs,
            tol,
        )?);
    }
    let inputs = [
        gen.uniform(&[2, 2, 3, 3]),
        gen.uniform(&[2, 3, 4, 4]),
        gen.uniform(&[3]),
    ];
    out.push(check(
        "conv_transpose2d",
        |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            squared_mean(g, y)
        },
        &inputs,
        tol,
    )?);

    let inputs = [
        gen.uniform(&[2, 3, 3, 3]),
        gen.uniform(&[3]),
        gen.uniform(&[3]),
    ];
    out.push(check(
        "channel_affine",
        |g, v| {
            let y = g.channel_affine(v[0], v[1], v[2])?;
            squared_mean(g, y)
        },
        &inputs,
        tol,
    )?);
    // Inputs and weights bounded away from zero: the gradient of this linear
    // op is then never small enough for rounding to dominate the difference.
    let inputs = [
        gen.away_from_zero(&[2, 2, 3, 3]),
        gen.away_from_zero(&[2, 1, 3, 3]),
    ];
    out.push(check(
        "concat",
        |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            let w = g.constant(Tensor::from_fn([2, 3, 3, 3], |i| {
                1.0 + 0.5 * (i as f64 * 0.37).sin()
            }));
            let y = g.mul(y, w)?;
            squared_mean(g, y)
        },
        &inputs,
        tol,
    )?);
    let inputs = [gen.uniform(&[2, 3, 4, 4])];
    out.push(check(
        "global_avg_pool",
        |g, v| {
            let y = g.global_avg_pool(v[0])?;
            squared_mean(g, y)
        },
        &inputs,
        tol,
    )?);
    let inputs = [gen.uniform(&[2, 3, 2, 2])];
    let weights = gen.unit(24);
    out.push(check(
        "rms_normalize",
        |g, v| {
            let y = g.rms_normalize(v[0], 1e-3)?;
            g.weighted_sum(y, weights.clone())
        },
        &inputs,
        tol,
    )?);
    let inputs = [gen.uniform(&[2, 3, 1, 1])];
    out.push(check(
        "broadcast_spatial",
        |g, v| {
            let y = g.broadcast_spatial(v[0], 3, 2)?;
            let w = g.constant(Tensor::from_fn([2, 3, 3, 2], |i| (i as f64 * 0.61).cos()));
            let y = g.mul(y, w)?;
            squared_mean(g, y)
        },
        &inputs,
        tol,
    )?);

    // Losses, with predictions kept well away from targets so the smoothed
    // absolute value is far from its kink.
    let n = 2 * 4 * 4;
    let target = gen.unit(n);
    let pred = Tensor::from_fn([2, 1, 4, 4], |i| {
        if target[i] < 0.5 {
            target[i] + 0.3
        } else {
            target[i] - 0.3
        }
    });
    let response = gen.unit(n);
    let mask: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
    out.push(check(
        "weighted_alpha_loss",
        |g, v| losses::weighted_alpha_loss(g, v[0], &target, &response, &mask).map_err(lift),
        &[pred.clone()],
        tol,
    )?);
    let fractional: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, &t)| if i % 3 == 0 { 1.0 } else { t })
        .collect();
    let pred_h = Tensor::from_fn([2, 1, 4, 4], |i| {
        if fractional[i] < 0.5 {
            fractional[i] + 0.3
        } else {
            fractional[i] - 0.3
        }
    });
    for (name, mode) in [
        ("hybrid_loss_sum", HybridMode::Sum),
        ("hybrid_loss_exclusive", HybridMode::Exclusive),
    ] {
        out.push(check(
            name,
            |g, v| losses::l1_l2_hybrid_loss(g, v[0], &fractional, &mask, mode).map_err(lift),
            &[pred_h.clone()],
            tol,
        )?);
    }
    let fg = gen.unit(3 * n);
    let bg = gen.unit(3 * n);
    let comp: Vec<f64> = (0..3 * n)
        .map(|k| {
            let i = (k / 48) * 16 + k % 16;
            let a = target[i];
            a * fg[k] + (1.0 - a) * bg[k]
        })
        .collect();
    let colour = CompositionTargets {
        fg: &fg,
        bg: &bg,
        composite: &comp,
    };
    out.push(check(
        "comp_plus_alpha_loss",
        |g, v| losses::comp_plus_alpha_loss(g, v[0], &target, colour, &mask, 1e-6).map_err(lift),
        &[pred],
        tol,
    )?);
    Ok(out)
}

/// Step for the whole-network check. Larger than [`STEP`] because the
/// objective sums hundreds of outputs, so central differences at 1e-6 sit
/// closer to rounding noise.
pub const NETWORK_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms: for an O(1)
/// objective the difference quotient carries about 1e-10 of rounding noise.
pub const NETWORK_FLOOR: f64 = 1e-6;

/// Whole network, every parameter and both inputs, against a signed random
/// weighting of the refined and preliminary alphas. Biases and shifts are
/// moved off their zero initialization: with all-zero biases a dead relu map
/// leaves later preactivations at exactly zero, right on the kink.
pub fn network_check(seed: u64) -> Result<CheckResult> {
    let mut gen = Inputs { seed, next: 1000 };
    let (net, params) = Network::new(&NetConfig::tiny(), seed)?;
    let image = gen.uniform(&[1, 3, 16, 16]).map(|v| 0.5 + 0.4 * v);
    let trimap = Tensor::from_fn([1, 1, 16, 16], |i| [0.0, 0.5, 1.0][(i * 7 / 5) % 3]);
    let signed = |gen: &mut Inputs| {
        gen.unit(256)
            .into_iter()
            .map(|u| 2.0 * u - 1.0)
            .collect::<Vec<_>>()
    };
    let w_ref = signed(&mut gen);
    let w_pre = signed(&mut gen);
    let mut inputs = vec![image, trimap];
    for (name, t) in params.names().iter().zip(params.tensors()) {
        if name.ends_with(".bias") || name.ends_with(".shift") {
            let noise = gen.uniform(t.shape());
            inputs.push(Tensor::from_fn(t.shape().to_vec(), |i| {
                t.data()[i] + 0.2 * noise.data()[i]
            }));
        } else {
            inputs.push(t.clone());
        }
    }
    let r = check_gradients_with_floor(
        |g, v| {
            let out = net.forward(g, &v[2..], v[0], v[1]).map_err(lift)?;
            let a = g.weighted_sum(out.refined, w_ref.clone())?;
            let b = g.weighted_sum(out.prelim, w_pre.clone())?;
            g.add(a, b)
        },
        &inputs,
        NETWORK_STEP,
        NETWORK_TOLERANCE,
        NETWORK_FLOOR,
    )?;
    Ok(CheckResult {
        name: "network".into(),
        max_rel_error: r.worst(),
        tolerance: NETWORK_TOLERANCE,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(seed)?;
    out.push(network_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass() {
        for r in op_suite(3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
