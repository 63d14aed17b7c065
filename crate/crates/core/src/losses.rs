//! Training losses over an N×1×H×W predicted alpha on the tape. All of them
//! reduce by the mean over the region mask, so magnitudes do not depend on
//! resolution or on how many pixels the mask keeps.

use mattekit_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::dgm::{self, DgmConfig};
use crate::{Error, Result};

/// Smoothing for `|x| ≈ sqrt(x² + ε²)`.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Prior-weighted L1 with the variance following the iteration schedule.
    #[default]
    GaussianL1Dynamic,
    /// Prior-weighted L1 with the variance frozen at its initial value.
    GaussianL1Static,
    CompPlusAlpha,
    L1L2Hybrid,
    PlainL1,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::GaussianL1Dynamic,
        LossKind::GaussianL1Static,
        LossKind::CompPlusAlpha,
        LossKind::L1L2Hybrid,
        LossKind::PlainL1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::GaussianL1Dynamic => "gaussian_l1_dynamic",
            LossKind::GaussianL1Static => "gaussian_l1_static",
            LossKind::CompPlusAlpha => "comp_plus_alpha",
            LossKind::L1L2Hybrid => "l1_l2_hybrid",
            LossKind::PlainL1 => "plain_l1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    #[default]
    UnknownOnly,
    FullImage,
}

/// How the hybrid loss combines its L1 (fractional pixels) and L2 branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridMode {
    /// L1 on fractional pixels plus L2 on every pixel.
    #[default]
    Sum,
    /// L1 on fractional pixels, L2 only on the rest.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub region: Region,
    pub epsilon_comp: f64,
    pub hybrid_mode: HybridMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::default(),
            region: Region::default(),
            epsilon_comp: DEFAULT_EPSILON,
            hybrid_mode: HybridMode::default(),
        }
    }
}

/// Per-pixel mean weights `mask[i]·scale[i] / |mask|`; `None` for an empty mask.
fn mean_weights(mask: &[bool], scale: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("loss mask is empty; loss defined as 0");
        return None;
    }
    let inv = 1.0 / count as f64;
    Some(
        mask.iter()
            .enumerate()
            .map(|(i, &m)| if m { scale(i) * inv } else { 0.0 })
            .collect(),
    )
}

fn zero(g: &mut Tape) -> Var {
    g.constant(Tensor::scalar(0.0))
}

fn check_len(g: &Tape, x: Var, len: usize, what: &str) -> Result<()> {
    let n = g.value(x).numel();
    if n != len {
        return Err(Error::Config(format!(
            "{what}: {len} values for a prediction of {n}"
        )));
    }
    Ok(())
}

fn residual(g: &mut Tape, alpha_p: Var, alpha_g: &[f64]) -> Result<Var> {
    check_len(g, alpha_p, alpha_g.len(), "ground-truth alpha")?;
    let target = g.constant(Tensor::new(g.shape(alpha_p).to_vec(), alpha_g.to_vec())?);
    Ok(g.sub(alpha_p, target)?)
}

/// `Σ w·(sqrt(d² + ε²) − ε)`: a smooth |d| that is exactly zero at `d = 0`.
/// The offset is accumulated in the same order as the sum so it cancels exactly.
fn smooth_l1_weighted(g: &mut Tape, d: Var, weights: Vec<f64>, eps: f64) -> Result<Var> {
    let offset = (0.0f64 * 0.0 + eps * eps).sqrt();
    let total: f64 = weights.iter().map(|w| offset * w).sum();
    let a = g.smooth_abs(d, eps)?;
    let s = g.weighted_sum(a, weights)?;
    let c = g.constant(Tensor::scalar(total));
    Ok(g.sub(s, c)?)
}

/// Mean over the mask of `R(i)·|α_p(i) − α_g(i)|`.
pub fn weighted_alpha_loss(
    g: &mut Tape,
    alpha_p: Var,
    alpha_g: &[f64],
    response: &[f64],
    mask: &[bool],
) -> Result<Var> {
    check_len(g, alpha_p, response.len(), "response")?;
    check_len(g, alpha_p, mask.len(), "mask")?;
    let d = residual(g, alpha_p, alpha_g)?;
    match mean_weights(mask, |i| response[i]) {
        Some(w) => smooth_l1_weighted(g, d, w, DEFAULT_EPSILON),
        None => Ok(zero(g)),
    }
}

/// Unweighted masked L1; bitwise equal to [`weighted_alpha_loss`] with unit response.
pub fn plain_l1_loss(g: &mut Tape, alpha_p: Var, alpha_g: &[f64], mask: &[bool]) -> Result<Var> {
    weighted_alpha_loss(g, alpha_p, alpha_g, &vec![1.0; mask.len()], mask)
}

/// Colour targets for the composition term, N×3×H×W planar.
#[derive(Debug, Clone, Copy)]
pub struct CompositionTargets<'a> {
    pub fg: &'a [f64],
    pub bg: &'a [f64],
    pub composite: &'a [f64],
}

/// Charbonnier alpha term plus the channel-mean Charbonnier residual of
/// recompositing with the predicted alpha, equally weighted.
pub fn comp_plus_alpha_loss(
    g: &mut Tape,
    alpha_p: Var,
    alpha_g: &[f64],
    colour: CompositionTargets<'_>,
    mask: &[bool],
    eps: f64,
) -> Result<Var> {
    check_len(g, alpha_p, mask.len(), "mask")?;
    let (n, _, h, w) = g.value(alpha_p).dims4()?;
    let plane = h * w;
    for (what, v) in [
        ("fg", colour.fg),
        ("bg", colour.bg),
        ("composite", colour.composite),
    ] {
        if v.len() != 3 * n * plane {
            return Err(Error::Config(format!(
                "{what}: expected {} values, got {}",
                3 * n * plane,
                v.len()
            )));
        }
    }
    let Some(wa) = mean_weights(mask, |_| 1.0) else {
        return Ok(zero(g));
    };
    let d = residual(g, alpha_p, alpha_g)?;
    let a = g.smooth_abs(d, eps)?;
    let alpha_term = g.weighted_sum(a, wa.clone())?;

    // α·(F − B) + (B − I), the recomposition error per channel.
    let a3 = g.concat(&[alpha_p, alpha_p, alpha_p])?;
    // concat stacks per sample along channels, matching the planar colour layout.
    let fb = Tensor::from_fn([n, 3, h, w], |i| colour.fg[i] - colour.bg[i]);
    let bi = Tensor::from_fn([n, 3, h, w], |i| colour.bg[i] - colour.composite[i]);
    let fb = g.constant(fb);
    let bi = g.constant(bi);
    let e = g.mul(a3, fb)?;
    let e = g.add(e, bi)?;
    let e = g.smooth_abs(e, eps)?;
    let wc: Vec<f64> = (0..n * 3 * plane)
        .map(|i| {
            let (s, rest) = (i / (3 * plane), i % plane);
            wa[s * plane + rest] / 3.0
        })
        .collect();
    let comp_term = g.weighted_sum(e, wc)?;
    Ok(g.add(alpha_term, comp_term)?)
}

/// L1 on pixels with fractional ground truth plus L2, combined per `mode`.
pub fn l1_l2_hybrid_loss(
    g: &mut Tape,
    alpha_p: Var,
    alpha_g: &[f64],
    mask: &[bool],
    mode: HybridMode,
) -> Result<Var> {
    check_len(g, alpha_p, mask.len(), "mask")?;
    let fractional = |i: usize| alpha_g[i] > 0.0 && alpha_g[i] < 1.0;
    let Some(w1) = mean_weights(mask, |i| if fractional(i) { 1.0 } else { 0.0 }) else {
        return Ok(zero(g));
    };
    let w2 = mean_weights(mask, |i| match mode {
        HybridMode::Sum => 1.0,
        HybridMode::Exclusive if fractional(i) => 0.0,
        HybridMode::Exclusive => 1.0,
    })
    .expect("mask non-empty");
    let d = residual(g, alpha_p, alpha_g)?;
    let l1 = smooth_l1_weighted(g, d, w1, DEFAULT_EPSILON)?;
    let sq = g.square(d)?;
    let l2 = g.weighted_sum(sq, w2)?;
    Ok(g.add(l1, l2)?)
}

/// Everything a loss may need about one batch, flattened N×1×H×W (alpha, mask)
/// or N×3×H×W planar (colours).
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub alpha_g: &'a [f64],
    pub unknown: &'a [bool],
    pub colour: CompositionTargets<'a>,
}

/// Variance used by a loss kind at a given iteration.
pub fn sigma2_for(kind: LossKind, dgm: &DgmConfig, iteration: u64) -> f64 {
    match kind {
        LossKind::GaussianL1Static => dgm.sigma2_init,
        _ => dgm.sigma2_at(iteration),
    }
}

pub fn compute_loss(
    g: &mut Tape,
    config: &LossConfig,
    dgm_config: &DgmConfig,
    iteration: u64,
    alpha_p: Var,
    inputs: &LossInputs<'_>,
) -> Result<Var> {
    let full;
    let mask = match config.region {
        Region::UnknownOnly => inputs.unknown,
        Region::FullImage => {
            full = vec![true; inputs.unknown.len()];
            &full
        }
    };
    match config.kind {
        LossKind::GaussianL1Dynamic | LossKind::GaussianL1Static => {
            let s2 = sigma2_for(config.kind, dgm_config, iteration);
            let response: Vec<f64> = inputs
                .alpha_g
                .iter()
                .map(|&a| dgm::response(a, dgm_config.mu, s2, dgm_config.normalize))
                .collect();
            weighted_alpha_loss(g, alpha_p, inputs.alpha_g, &response, mask)
        }
        LossKind::CompPlusAlpha => comp_plus_alpha_loss(
            g,
            alpha_p,
            inputs.alpha_g,
            inputs.colour,
            mask,
            config.epsilon_comp,
        ),
        LossKind::L1L2Hybrid => {
            l1_l2_hybrid_loss(g, alpha_p, inputs.alpha_g, mask, config.hybrid_mode)
        }
        LossKind::PlainL1 => plain_l1_loss(g, alpha_p, inputs.alpha_g, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(
        f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
        alpha_p: Vec<f64>,
        shape: [usize; 4],
    ) -> (f64, Vec<f64>) {
        let mut g = Tape::new();
        let x = g.leaf(Tensor::new(shape, alpha_p).unwrap());
        let l = f(&mut g, x).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().unwrap(), g.grad(x).unwrap().to_vec())
    }

    #[test]
    fn identical_prediction_is_exactly_zero() {
        let ag = vec![0.0, 0.3, 0.5, 1.0];
        let r = vec![0.4, 0.7, 0.8, 0.4];
        let m = vec![true; 4];
        let (l, _) = eval(
            |g, x| weighted_alpha_loss(g, x, &ag, &r, &m),
            ag.clone(),
            [1, 1, 2, 2],
        );
        assert_eq!(l, 0.0);
        let (l, _) = eval(
            |g, x| l1_l2_hybrid_loss(g, x, &ag, &m, HybridMode::Sum),
            ag.clone(),
            [1, 1, 2, 2],
        );
        assert_eq!(l, 0.0);
    }

    #[test]
    fn empty_mask_is_zero() {
        let (l, grad) = {
            let mut g = Tape::new();
            let x = g.leaf(Tensor::full([1, 1, 1, 2], 0.3));
            let l = plain_l1_loss(&mut g, x, &[0.9, 0.1], &[false, false]).unwrap();
            (g.value(l).item().unwrap(), g.grad(x).map(<[f64]>::to_vec))
        };
        assert_eq!(l, 0.0);
        assert!(grad.is_none());
    }

    #[test]
    fn hybrid_branch_selection() {
        // The smoothed |d| sits below |d| by at most ε.
        let tol = DEFAULT_EPSILON + 1e-12;
        let m = [true];
        let (l, _) = eval(
            |g, x| l1_l2_hybrid_loss(g, x, &[0.5], &m, HybridMode::Sum),
            vec![0.6],
            [1, 1, 1, 1],
        );
        assert!((l - 0.11).abs() < tol, "{l}");
        let (l, _) = eval(
            |g, x| l1_l2_hybrid_loss(g, x, &[1.0], &m, HybridMode::Sum),
            vec![0.8],
            [1, 1, 1, 1],
        );
        assert!((l - 0.04).abs() < 1e-12, "{l}");
        let (l, _) = eval(
            |g, x| l1_l2_hybrid_loss(g, x, &[0.5], &m, HybridMode::Exclusive),
            vec![0.6],
            [1, 1, 1, 1],
        );
        assert!((l - 0.1).abs() < tol, "{l}");
    }

    #[test]
    fn unit_response_matches_plain_l1_bitwise() {
        let ag = vec![0.0, 0.2, 0.9, 1.0, 0.5, 0.4];
        let ap = vec![0.1, 0.25, 0.3, 0.8, 0.55, 0.0];
        let m = vec![true, false, true, true, true, false];
        let (a, ga) = eval(
            |g, x| plain_l1_loss(g, x, &ag, &m),
            ap.clone(),
            [1, 1, 2, 3],
        );
        let (b, gb) = eval(
            |g, x| weighted_alpha_loss(g, x, &ag, &[1.0; 6], &m),
            ap,
            [1, 1, 2, 3],
        );
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
