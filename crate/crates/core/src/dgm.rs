//! Prior-weighted response maps: each pixel's loss weight is a Gaussian in its
//! ground-truth opacity, centred on half opacity, whose variance grows in steps
//! with the iteration count so the weighting flattens as training proceeds.

use serde::{Deserialize, Serialize};

use crate::{AlphaMatte, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalize {
    #[default]
    RawPdf,
    /// Divide by the peak so the response at the centre is exactly 1.
    PeakOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgmConfig {
    pub mu: f64,
    pub sigma2_init: f64,
    pub sigma2_step: f64,
    pub step_interval: u64,
    pub sigma2_cap: f64,
    pub normalize: Normalize,
}

impl Default for DgmConfig {
    /// Desk-scale cadence: 50 iterations per variance step (2000 at full scale).
    fn default() -> Self {
        Self {
            mu: 0.5,
            sigma2_init: 0.25,
            sigma2_step: 0.005,
            step_interval: 50,
            sigma2_cap: 0.75,
            normalize: Normalize::RawPdf,
        }
    }
}

impl DgmConfig {
    pub fn full_scale() -> Self {
        Self {
            step_interval: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_init > 0.0) {
            return Err(Error::Config(format!(
                "sigma2_init must be positive, got {}",
                self.sigma2_init
            )));
        }
        if !(self.sigma2_cap >= self.sigma2_init) {
            return Err(Error::Config(format!(
                "sigma2_cap {} must be at least sigma2_init {}",
                self.sigma2_cap, self.sigma2_init
            )));
        }
        if self.step_interval == 0 {
            return Err(Error::Config("step_interval must be at least 1".into()));
        }
        if !(self.sigma2_step >= 0.0) {
            return Err(Error::Config("sigma2_step must be non-negative".into()));
        }
        Ok(())
    }

    /// Variance in force at `iteration`: a capped staircase.
    pub fn sigma2_at(&self, iteration: u64) -> f64 {
        let steps = (iteration / self.step_interval) as f64;
        (self.sigma2_init + self.sigma2_step * steps).min(self.sigma2_cap)
    }
}

pub fn sigma2_at(iteration: u64, config: &DgmConfig) -> f64 {
    config.sigma2_at(iteration)
}

/// Strictly positive per-pixel weights, same layout as the source matte.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ResponseMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Gaussian density in `alpha` with mean `mu` and variance `sigma2`.
pub fn response(alpha: f64, mu: f64, sigma2: f64, normalize: Normalize) -> f64 {
    let d = alpha - mu;
    let shape = (-(d * d) / (2.0 * sigma2)).exp();
    match normalize {
        Normalize::RawPdf => shape / (2.0 * std::f64::consts::PI * sigma2).sqrt(),
        Normalize::PeakOne => shape,
    }
}

pub fn response_map(
    alpha: &AlphaMatte,
    mu: f64,
    sigma2: f64,
    normalize: Normalize,
) -> Result<ResponseMap> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Config(format!(
            "sigma2 must be positive and finite, got {sigma2}"
        )));
    }
    let values: Vec<f64> = alpha
        .values()
        .iter()
        .map(|&a| response(a, mu, sigma2, normalize))
        .collect();
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Config(format!(
            "response underflowed to {v}; sigma2 {sigma2} is too small"
        )));
    }
    Ok(ResponseMap {
        width: alpha.width(),
        height: alpha.height(),
        values,
    })
}

/// Whether raising the variance from `a` to `b` both lowers the peak and
/// flattens the curve (peak-to-tail ratio at full transparency shrinks).
pub fn response_ordering_check(sigma2_a: f64, sigma2_b: f64) -> Result<bool> {
    if !(0.0 < sigma2_a && sigma2_a < sigma2_b) {
        return Err(Error::Config(format!(
            "need 0 < sigma2_a < sigma2_b, got {sigma2_a} and {sigma2_b}"
        )));
    }
    let mu = 0.5;
    let peak = |s| response(mu, mu, s, Normalize::RawPdf);
    let ratio = |s| peak(s) / response(0.0, mu, s, Normalize::RawPdf);
    Ok(peak(sigma2_b) < peak(sigma2_a) && ratio(sigma2_b) < ratio(sigma2_a))
}

/// Maps a response map onto [0, 1] by its own maximum, for heatmap export.
pub fn heatmap(map: &ResponseMap) -> Result<AlphaMatte> {
    let max = map.values.iter().copied().fold(0.0, f64::max);
    AlphaMatte::new(
        map.width,
        map.height,
        map.values.iter().map(|v| v / max).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_values() {
        let r = |a| response(a, 0.5, 0.25, Normalize::RawPdf);
        assert!((r(0.5) - 0.797_884_560_8).abs() < 1e-10);
        assert!((r(0.0) - 0.483_941_449_1).abs() < 1e-10);
        // 0.3 and 0.7 are not exactly symmetric about 0.5 once rounded to binary.
        assert!((r(0.3) - r(0.7)).abs() < 1e-15);
        assert_eq!(r(0.25), r(0.75));
        assert_eq!(r(0.0), r(1.0));
        assert_eq!(response(0.5, 0.5, 0.4, Normalize::PeakOne), 1.0);
    }

    #[test]
    fn schedule() {
        let c = DgmConfig::full_scale();
        assert_eq!(c.sigma2_at(0), 0.25);
        assert!((c.sigma2_at(4000) - 0.26).abs() < 1e-15);
        assert_eq!(c.sigma2_at(1_000_000_000), 0.75);
        assert_eq!(c.sigma2_at(1999), 0.25);
    }

    #[test]
    fn ordering() {
        assert!(response_ordering_check(0.25, 0.5).unwrap());
        assert!(response_ordering_check(0.5, 0.75).unwrap());
        assert!(response_ordering_check(0.25, 0.25).is_err());
    }

    #[test]
    fn rejects_bad_variance() {
        let a = AlphaMatte::filled(2, 2, 0.5).unwrap();
        assert!(response_map(&a, 0.5, 0.0, Normalize::RawPdf).is_err());
        assert!(response_map(&a, 0.5, -1.0, Normalize::RawPdf).is_err());
        let bad = DgmConfig {
            sigma2_cap: 0.1,
            ..DgmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
