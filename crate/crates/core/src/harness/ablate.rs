//! Variant comparison: one dataset, several seeds, one training run per
//! (variant, seed). A variant that fails is marked in the table and does not
//! stop the others.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::train::{train_on, Dataset, TrainOptions};
use crate::metrics::MetricReport;
use crate::synth::{synthesize_dataset, DatasetManifest, MANIFEST_FILE};
use crate::{Error, Result};

const ALLOWED_PREFIXES: [&str; 3] = ["loss.", "net.", "dgm."];

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Base config with this variant's overrides applied. Only loss, network
    /// and modulation keys may change, so data and schedule stay shared.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some((k, _)) = self
            .overrides
            .iter()
            .find(|(k, _)| !ALLOWED_PREFIXES.iter().any(|p| k.starts_with(p)))
        {
            return Err(Error::Config(format!(
                "variant `{}` overrides `{k}`; only loss/net/dgm keys allowed",
                self.name
            )));
        }
        let table: toml::Table = base
            .snapshot()?
            .parse()
            .map_err(|e| Error::Config(format!("{e}")))?;
        ExperimentConfig::from_parts(Some(table), &self.overrides)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// First-iteration training loss, then the final held-out aggregate.
    pub outcome: std::result::Result<(f64, MetricReport), String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<SeedResult>,
    /// Per-metric median over the seeds that succeeded.
    pub median: Option<MetricReport>,
}

impl AblationRow {
    pub fn failures(&self) -> usize {
        self.seeds.iter().filter(|s| s.outcome.is_err()).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_report(reports: &[MetricReport]) -> Option<MetricReport> {
    let col = |f: fn(&MetricReport) -> f64| median(&mut reports.iter().map(f).collect::<Vec<_>>());
    Some(MetricReport {
        sad: col(|r| r.sad)?,
        mse: col(|r| r.mse)?,
        grad: col(|r| r.grad)?,
        conn: col(|r| r.conn)?,
        unknown_pixel_count: reports[0].unknown_pixel_count,
    })
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,ok_seeds,failed_seeds,sad,mse,grad,conn\n");
        for r in &self.rows {
            let ok = r.seeds.len() - r.failures();
            match &r.median {
                Some(m) => writeln!(
                    out,
                    "{},{ok},{},{},{},{},{}",
                    r.variant,
                    r.failures(),
                    m.sad,
                    m.mse,
                    m.grad,
                    m.conn
                ),
                None => writeln!(out, "{},{ok},{},,,,", r.variant, r.failures()),
            }
            .expect("string write");
        }
        out
    }

    /// Fixed-width text table; failed rows read FAILED.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.variant.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  seeds\n",
            "variant", "SAD", "MSE", "Grad", "Conn"
        );
        for r in &self.rows {
            let ok = r.seeds.len() - r.failures();
            let line = match &r.median {
                Some(m) => format!(
                    "{:<width$}  {:>9.4}  {:>9.5}  {:>9.5}  {:>9.4}  {ok}/{}",
                    r.variant,
                    m.sad,
                    m.mse,
                    m.grad,
                    m.conn,
                    r.seeds.len()
                ),
                None => format!(
                    "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}  0/{}",
                    r.variant,
                    "FAILED",
                    "",
                    "",
                    "",
                    r.seeds.len()
                ),
            };
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_seed_csv(&self) -> String {
        let mut out = String::from("variant,seed,first_loss,sad,mse,grad,conn,error\n");
        for r in &self.rows {
            for s in &r.seeds {
                match &s.outcome {
                    Ok((l, m)) => writeln!(
                        out,
                        "{},{},{l},{},{},{},{},",
                        r.variant, s.seed, m.sad, m.mse, m.grad, m.conn
                    ),
                    Err(e) => writeln!(
                        out,
                        "{},{},,,,,,\"{}\"",
                        r.variant,
                        s.seed,
                        e.replace('"', "'")
                    ),
                }
                .expect("string write");
            }
        }
        out
    }
}

/// Runs every variant under every seed against a dataset synthesized once from
/// `base.seed` (or `base.data.manifest`). Run directories land under
/// `base.out_dir/runs/<variant>/seed-<n>`, tables under `base.out_dir`.
pub fn ablate(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    base.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let configs = variants
        .iter()
        .map(|v| v.apply(base))
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = match &base.data.manifest {
        Some(p) => p.clone(),
        None => {
            let dir = base.out_dir.join("data");
            synthesize_dataset(&base.data.synth_config(), &dir, base.seed)?;
            dir.join(MANIFEST_FILE)
        }
    };
    let data = Dataset::from_manifest(
        DatasetManifest::load(&manifest_path)?,
        base.data.test_fg * base.data.bgs_per_fg,
    )?;

    let mut rows = Vec::with_capacity(variants.len());
    for (variant, config) in variants.iter().zip(configs) {
        let mut results = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = config.clone();
            c.seed = seed;
            c.out_dir = base
                .out_dir
                .join("runs")
                .join(&variant.name)
                .join(format!("seed-{seed}"));
            c.data.manifest = Some(manifest_path.clone());
            let options = TrainOptions {
                skip_eval: false,
                ..TrainOptions::default()
            };
            let outcome = train_on(&c, &data, &options).and_then(|o| {
                let f = o
                    .final_
                    .ok_or_else(|| Error::Invariant("run ended without evaluation".into()))?;
                Ok((o.losses.first().copied().unwrap_or(f64::NAN), f.aggregate))
            });
            match &outcome {
                Ok((_, m)) => log::info!("{} seed {seed}: SAD {:.4}", variant.name, m.sad),
                Err(e) => log::error!("{} seed {seed} failed: {e}", variant.name),
            }
            results.push(SeedResult {
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            });
        }
        let ok: Vec<MetricReport> = results
            .iter()
            .filter_map(|s| s.outcome.as_ref().ok().map(|(_, m)| *m))
            .collect();
        rows.push(AblationRow {
            variant: variant.name.clone(),
            median: median_report(&ok),
            seeds: results,
        });
    }
    let table = AblationTable { rows };
    write(&base.out_dir.join("ablation.csv"), &table.to_csv())?;
    write(&base.out_dir.join("ablation.txt"), &table.to_text())?;
    write(
        &base.out_dir.join("ablation_seeds.csv"),
        &table.to_seed_csv(),
    )?;
    Ok(table)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(path.parent().expect("table path has a parent"))
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss-function variants, in the order of the loss comparison table.
pub fn loss_variants() -> Vec<Variant> {
    vec![
        Variant::new("plain_l1", &[("loss.kind", "plain_l1")]),
        Variant::new("comp_plus_alpha", &[("loss.kind", "comp_plus_alpha")]),
        Variant::new("l1_l2_hybrid", &[("loss.kind", "l1_l2_hybrid")]),
        Variant::new("gaussian_l1_static", &[("loss.kind", "gaussian_l1_static")]),
        Variant::new(
            "gaussian_l1_dynamic",
            &[("loss.kind", "gaussian_l1_dynamic")],
        ),
    ]
}

/// Alignment and refinement on/off.
pub fn module_variants() -> Vec<Variant> {
    vec![
        Variant::new("full", &[]),
        Variant::new("no_alignment", &[("net.decoder", "skip_concat")]),
        Variant::new("no_refinement", &[("net.msr", "false")]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn variants_may_not_touch_data_or_schedule() {
        let base = ExperimentConfig::default();
        assert!(Variant::new("x", &[("epochs", "3")]).apply(&base).is_err());
        assert!(Variant::new("x", &[("data.size", "64")])
            .apply(&base)
            .is_err());
        let c = Variant::new("x", &[("loss.kind", "plain_l1")])
            .apply(&base)
            .unwrap();
        assert_eq!(c.loss.kind, crate::losses::LossKind::PlainL1);
        assert_eq!(c.epochs, base.epochs);
    }

    #[test]
    fn failed_rows_are_marked() {
        let table = AblationTable {
            rows: vec![
                AblationRow {
                    variant: "good".into(),
                    seeds: vec![SeedResult {
                        seed: 1,
                        outcome: Ok((
                            0.5,
                            MetricReport {
                                sad: 1.0,
                                ..Default::default()
                            },
                        )),
                    }],
                    median: Some(MetricReport {
                        sad: 1.0,
                        ..Default::default()
                    }),
                },
                AblationRow {
                    variant: "bad".into(),
                    seeds: vec![SeedResult {
                        seed: 1,
                        outcome: Err("boom".into()),
                    }],
                    median: None,
                },
            ],
        };
        let text = table.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().contains("FAILED"));
        assert!(table
            .to_csv()
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("bad,0,1,"));
    }
}
