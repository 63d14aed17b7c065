//! The four matting scores over a region mask. SAD, Grad and Conn are reported
//! in thousands; MSE is a raw mean.

pub mod connectivity;
pub mod gradient;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::synth::DatasetManifest;
use crate::{pngio, AlphaMatte, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricParams {
    pub grad_sigma: f64,
    pub conn_step: f64,
    pub conn_theta: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            grad_sigma: 1.4,
            conn_step: 0.1,
            conn_theta: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub unknown_pixel_count: usize,
}

fn check(p: &AlphaMatte, g: &AlphaMatte, mask: &[bool]) -> Result<()> {
    if !p.same_dims(g.width(), g.height()) || mask.len() != g.values().len() {
        return Err(Error::Config(format!(
            "metric inputs differ in size: {}×{} vs {}×{} with {} mask entries",
            p.width(),
            p.height(),
            g.width(),
            g.height(),
            mask.len()
        )));
    }
    Ok(())
}

fn masked(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
}

pub fn sad(p: &AlphaMatte, g: &AlphaMatte, mask: &[bool]) -> Result<f64> {
    check(p, g, mask)?;
    if !mask.contains(&true) {
        log::warn!("SAD over an empty mask is 0");
    }
    let (pv, gv) = (p.values(), g.values());
    Ok(masked(mask).map(|i| (pv[i] - gv[i]).abs()).sum::<f64>() / 1000.0)
}

pub fn mse(p: &AlphaMatte, g: &AlphaMatte, mask: &[bool]) -> Result<f64> {
    check(p, g, mask)?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        log::warn!("MSE over an empty mask is 0");
        return Ok(0.0);
    }
    let (pv, gv) = (p.values(), g.values());
    Ok(masked(mask).map(|i| (pv[i] - gv[i]).powi(2)).sum::<f64>() / n as f64)
}

pub fn grad_error(p: &AlphaMatte, g: &AlphaMatte, mask: &[bool], sigma: f64) -> Result<f64> {
    check(p, g, mask)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "gradient sigma must be positive, got {sigma}"
        )));
    }
    let (w, h) = (g.width(), g.height());
    let gp = gradient::gradient_magnitude(p.values(), w, h, sigma);
    let gg = gradient::gradient_magnitude(g.values(), w, h, sigma);
    Ok(masked(mask).map(|i| (gp[i] - gg[i]).powi(2)).sum::<f64>() / 1000.0)
}

pub fn conn_error(
    p: &AlphaMatte,
    g: &AlphaMatte,
    mask: &[bool],
    step: f64,
    theta: f64,
) -> Result<f64> {
    check(p, g, mask)?;
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Config(format!(
            "connectivity step must lie in (0, 1), got {step}"
        )));
    }
    let (w, h) = (g.width(), g.height());
    let (pv, gv) = (p.values(), g.values());
    let level = connectivity::connectivity_levels(pv, gv, w, h, step);
    let total: f64 = masked(mask)
        .map(|i| {
            (connectivity::phi(pv[i], level[i], theta) - connectivity::phi(gv[i], level[i], theta))
                .abs()
        })
        .sum();
    Ok(total / 1000.0)
}

pub fn evaluate_pair(
    p: &AlphaMatte,
    g: &AlphaMatte,
    mask: &[bool],
    params: &MetricParams,
) -> Result<MetricReport> {
    Ok(MetricReport {
        sad: sad(p, g, mask)?,
        mse: mse(p, g, mask)?,
        grad: grad_error(p, g, mask, params.grad_sigma)?,
        conn: conn_error(p, g, mask, params.conn_step, params.conn_theta)?,
        unknown_pixel_count: mask.iter().filter(|&&m| m).count(),
    })
}

/// Mean of each score; the pixel count is summed.
pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> MetricReport {
    let mut acc = MetricReport::default();
    let mut n = 0usize;
    for r in reports {
        acc.sad += r.sad;
        acc.mse += r.mse;
        acc.grad += r.grad;
        acc.conn += r.conn;
        acc.unknown_pixel_count += r.unknown_pixel_count;
        n += 1;
    }
    if n > 0 {
        let k = n as f64;
        acc.sad /= k;
        acc.mse /= k;
        acc.grad /= k;
        acc.conn /= k;
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One row per manifest entry, in manifest order; `None` when the
    /// prediction file is missing.
    pub rows: Vec<(String, Option<MetricReport>)>,
    pub aggregate: MetricReport,
}

impl EvalReport {
    pub fn missing(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|(_, r)| r.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,sad,mse,grad,conn,unknown_count\n");
        for (id, r) in &self.rows {
            match r {
                Some(r) => out.push_str(&format!(
                    "{id},{},{},{},{},{}\n",
                    r.sad, r.mse, r.grad, r.conn, r.unknown_pixel_count
                )),
                None => out.push_str(&format!("{id},,,,,\n")),
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn prediction_path(pred_dir: &Path, id: &str) -> PathBuf {
    pred_dir.join(format!("{id}.png"))
}

/// Scores `pred_dir/<id>.png` against every manifest entry over its Unknown region.
pub fn evaluate(
    manifest: &DatasetManifest,
    pred_dir: &Path,
    params: &MetricParams,
) -> Result<EvalReport> {
    let rows = manifest
        .entries
        .par_iter()
        .map(|e| {
            let id = e.id();
            let path = prediction_path(pred_dir, &id);
            if !path.is_file() {
                log::warn!("missing prediction {}", path.display());
                return Ok((id, None));
            }
            let pred = pngio::read_alpha(&path)?;
            let gt = pngio::read_alpha(&manifest.resolve(&e.alpha_path))?;
            let tri = pngio::read_trimap(&manifest.resolve(&e.trimap_path))?;
            if !pred.same_dims(gt.width(), gt.height()) {
                return Err(Error::format(
                    &path,
                    format!(
                        "prediction is {}×{}, ground truth {}×{}",
                        pred.width(),
                        pred.height(),
                        gt.width(),
                        gt.height()
                    ),
                ));
            }
            let report = evaluate_pair(&pred, &gt, &tri.unknown_mask(), params)?;
            Ok((id, Some(report)))
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(rows.iter().filter_map(|(_, r)| r.as_ref()));
    Ok(EvalReport { rows, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matte(w: usize, h: usize, v: &[f64]) -> AlphaMatte {
        AlphaMatte::new(w, h, v.to_vec()).unwrap()
    }

    #[test]
    fn sad_and_mse_by_hand() {
        let g = matte(2, 2, &[0.0; 4]);
        let p = matte(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let all = [true; 4];
        assert!((sad(&p, &g, &all).unwrap() - 0.001).abs() < 1e-15);
        let single = matte(1, 1, &[0.1]);
        let zero = matte(1, 1, &[0.0]);
        assert!((mse(&single, &zero, &[true]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse(&p, &g, &[false; 4]).unwrap(), 0.0);
    }

    #[test]
    fn identical_mattes_score_zero() {
        let a = AlphaMatte::from_fn(12, 10, |x, y| ((x * y) % 7) as f64 / 6.0).unwrap();
        let r = evaluate_pair(&a, &a, &vec![true; 120], &MetricParams::default()).unwrap();
        assert_eq!((r.sad, r.mse, r.grad, r.conn), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_mattes_have_no_gradient_error() {
        let a = matte(9, 9, &[0.3; 81]);
        let b = matte(9, 9, &[0.8; 81]);
        assert!(grad_error(&a, &b, &[true; 81], 1.4).unwrap() < 1e-10);
    }

    #[test]
    fn aggregate_is_a_mean() {
        let a = MetricReport {
            sad: 1.0,
            mse: 0.2,
            grad: 3.0,
            conn: 4.0,
            unknown_pixel_count: 5,
        };
        let b = MetricReport {
            sad: 3.0,
            mse: 0.4,
            grad: 1.0,
            conn: 0.0,
            unknown_pixel_count: 7,
        };
        let m = aggregate([&a, &b]);
        assert_eq!(
            (m.sad, m.grad, m.conn, m.unknown_pixel_count),
            (2.0, 2.0, 2.0, 12)
        );
        assert!((m.mse - 0.3).abs() < 1e-15);
    }
}
