//! Central finite-difference verification of tape gradients.

use crate::{Error, Result, Tape, Tensor, Var};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over the coordinates of each input.
    pub max_rel_error: Vec<f64>,
    pub max_abs_error: Vec<f64>,
    pub tolerance: f64,
    /// Smallest denominator used in the relative error.
    pub floor: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tolerance
    }
}

/// Denominator floor for [`check_gradients`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, DEFAULT_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is below the finite-difference resolution from dominating.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

fn scalar_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the tape gradient of scalar `f` against `(f(x+ε) − f(x−ε)) / 2ε`
/// for every coordinate of every input.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with_floor(f, inputs, epsilon, tolerance, DEFAULT_FLOOR)
}

/// [`check_gradients`] with an explicit relative-error floor.
pub fn check_gradients_with_floor<F>(
    f: F,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs)?;
    let base = tape.value(out).data()[0];
    if scalar_at(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }
    tape.backward(out)?;

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    let mut max_abs_error = Vec::with_capacity(inputs.len());
    for (idx, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[idx].numel()]);
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[idx].data()[j];
            work[idx] = perturbed(&inputs[idx], j, orig + epsilon);
            let plus = scalar_at(&f, &work)?;
            work[idx] = perturbed(&inputs[idx], j, orig - epsilon);
            let minus = scalar_at(&f, &work)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst_rel = worst_rel.max(relative_error_with_floor(a, numeric, floor));
            worst_abs = worst_abs.max((a - numeric).abs());
        }
        work[idx] = inputs[idx].clone();
        max_rel_error.push(worst_rel);
        max_abs_error.push(worst_abs);
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        tolerance,
        floor,
    })
}

fn perturbed(t: &Tensor, j: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] = value;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
