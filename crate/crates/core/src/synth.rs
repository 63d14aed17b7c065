//! Procedural foregrounds and backgrounds, and assembly of a composited dataset
//! on disk.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::composite;
use crate::pngio::{self, AlphaDepth};
use crate::rng::{derive_seed, stream, stream_rng, Rng};
use crate::trimap::{self, Trimap};
use crate::{AlphaMatte, Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForegroundKind {
    SoftDisk,
    SoftRing,
    HairStrokes,
}

impl ForegroundKind {
    pub const ALL: [ForegroundKind; 3] = [
        ForegroundKind::SoftDisk,
        ForegroundKind::SoftRing,
        ForegroundKind::HairStrokes,
    ];
}

impl std::str::FromStr for ForegroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft_disk" => Ok(Self::SoftDisk),
            "soft_ring" => Ok(Self::SoftRing),
            "hair_strokes" => Ok(Self::HairStrokes),
            other => Err(Error::Config(format!("unknown foreground kind `{other}`"))),
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth low-frequency colour field around a base colour.
struct ColourField {
    base: [f64; 3],
    amp: f64,
    freq: [[f64; 2]; 3],
    phase: [f64; 3],
}

impl ColourField {
    fn random(rng: &mut Rng, size: usize, amp: f64) -> Self {
        let base = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ];
        let mut freq = [[0.0; 2]; 3];
        let mut phase = [0.0; 3];
        for c in 0..3 {
            let cycles = rng.gen_range(0.5..3.0);
            let angle = rng.gen_range(0.0..TAU);
            let k = cycles * TAU / size as f64;
            freq[c] = [k * angle.cos(), k * angle.sin()];
            phase[c] = rng.gen_range(0.0..TAU);
        }
        Self {
            base,
            amp,
            freq,
            phase,
        }
    }

    fn at(&self, x: usize, y: usize) -> [f64; 3] {
        std::array::from_fn(|c| {
            let arg = self.freq[c][0] * x as f64 + self.freq[c][1] * y as f64 + self.phase[c];
            self.base[c] + self.amp * arg.sin()
        })
    }
}

fn radial_centre(rng: &mut Rng, size: usize) -> (f64, f64) {
    let jitter = size as f64 / 16.0;
    let c = size as f64 / 2.0 - 0.5;
    (
        c + rng.gen_range(-jitter..=jitter),
        c + rng.gen_range(-jitter..=jitter),
    )
}

fn soft_disk(rng: &mut Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = radial_centre(rng, size);
    let radius = s * rng.gen_range(0.22..0.32);
    let band = s * rng.gen_range(0.07..0.12);
    radial(size, cx, cy, |r| smoothstep((radius - r) / band))
}

fn soft_ring(rng: &mut Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = radial_centre(rng, size);
    let outer = s * rng.gen_range(0.30..0.38);
    let inner = s * rng.gen_range(0.10..0.16);
    let band = s * rng.gen_range(0.05..0.08);
    radial(size, cx, cy, |r| {
        smoothstep(((outer - r) / band).min((r - inner) / band))
    })
}

fn radial(size: usize, cx: f64, cy: f64, profile: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push(profile((x as f64 - cx).hypot(y as f64 - cy)));
        }
    }
    out
}

/// Opaque core with a narrow soft edge, overlaid by thin semi-transparent strands.
fn hair_strokes(rng: &mut Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = radial_centre(rng, size);
    let radius = s * rng.gen_range(0.16..0.22);
    let band = s * 0.03;
    let mut alpha = radial(size, cx, cy, |r| smoothstep((radius - r) / band));

    let strands = rng.gen_range(24..40);
    for _ in 0..strands {
        let theta = rng.gen_range(0.0..TAU);
        let dir = theta + rng.gen_range(-0.5..0.5);
        let start = radius * rng.gen_range(0.7..1.0);
        let (x0, y0) = (cx + start * theta.cos(), cy + start * theta.sin());
        let len = s * rng.gen_range(0.12..0.3);
        let (dx, dy) = (dir.cos() * len, dir.sin() * len);
        let width = rng.gen_range(0.6..1.4);
        let opacity = rng.gen_range(0.3..0.9);
        let reach = 3.0 * width;
        let xmin = ((x0.min(x0 + dx) - reach).floor().max(0.0)) as usize;
        let xmax = ((x0.max(x0 + dx) + reach).ceil().min(s - 1.0)).max(0.0) as usize;
        let ymin = ((y0.min(y0 + dy) - reach).floor().max(0.0)) as usize;
        let ymax = ((y0.max(y0 + dy) + reach).ceil().min(s - 1.0)).max(0.0) as usize;
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let t = ((px * dx + py * dy) / (len * len)).clamp(0.0, 1.0);
                let d = (px - t * dx).hypot(py - t * dy);
                if d > reach {
                    continue;
                }
                // Strands thin out towards their tips.
                let a = opacity * (1.0 - 0.6 * t) * (-d * d / (2.0 * width * width)).exp();
                let v = &mut alpha[y * size + x];
                *v = 1.0 - (1.0 - *v) * (1.0 - a);
            }
        }
    }
    alpha
}

pub fn generate_synthetic_foreground(
    seed: u64,
    size: usize,
    kind: ForegroundKind,
) -> Result<(Image, AlphaMatte)> {
    if size < 32 {
        return Err(Error::Config(format!(
            "foreground size must be at least 32, got {size}"
        )));
    }
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
    let colour = ColourField::random(&mut rng, size, 0.12);
    let alpha = match kind {
        ForegroundKind::SoftDisk => soft_disk(&mut rng, size),
        ForegroundKind::SoftRing => soft_ring(&mut rng, size),
        ForegroundKind::HairStrokes => hair_strokes(&mut rng, size),
    };
    let fg = Image::from_fn(size, size, |x, y| colour.at(x, y))?;
    Ok((fg, AlphaMatte::new(size, size, alpha)?))
}

/// Two-tone textured background: a colour gradient plus sinusoidal stripes.
pub fn generate_background(seed: u64, size: usize) -> Result<Image> {
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
    let a = ColourField::random(&mut rng, size, 0.08);
    let b = ColourField::random(&mut rng, size, 0.08);
    let angle = rng.gen_range(0.0..PI);
    let stripes = rng.gen_range(2.0..8.0) * TAU / size as f64;
    let phase = rng.gen_range(0.0..TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    Image::from_fn(size, size, |x, y| {
        let t = x as f64 / size as f64 * ux + y as f64 / size as f64 * uy;
        let w = (0.5 * t + 0.25 + 0.25 * (stripes * (x as f64 * uy - y as f64 * ux) + phase).sin())
            .clamp(0.0, 1.0);
        let (ca, cb) = (a.at(x, y), b.at(x, y));
        std::array::from_fn(|c| ca[c] + (cb[c] - ca[c]) * w)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_fg: usize,
    pub bgs_per_fg: usize,
    pub size: usize,
    /// Foreground kinds, assigned round-robin by foreground index.
    pub kinds: Vec<ForegroundKind>,
    /// Inclusive odd range for the fixed test-trimap erosion kernel.
    pub trimap_kernel: (usize, usize),
    pub alpha_depth: AlphaDepth,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_fg: 16,
            bgs_per_fg: 4,
            size: 128,
            kinds: ForegroundKind::ALL.to_vec(),
            trimap_kernel: (5, 11),
            alpha_depth: AlphaDepth::Eight,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_fg == 0 || self.bgs_per_fg == 0 {
            return Err(Error::Config(
                "num_fg and bgs_per_fg must be positive".into(),
            ));
        }
        if self.size < 32 {
            return Err(Error::Config(format!(
                "size must be at least 32, got {}",
                self.size
            )));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config(
                "at least one foreground kind is required".into(),
            ));
        }
        let (lo, hi) = self.trimap_kernel;
        if lo % 2 == 0 || hi % 2 == 0 || lo < 3 || hi > 25 || lo > hi {
            return Err(Error::Config(format!(
                "trimap kernel range must be odd within [3, 25], got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Random odd integer in the inclusive odd range `[lo, hi]`.
pub fn odd_in(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    lo + 2 * rng.gen_range(0..=(hi - lo) / 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub foreground_path: PathBuf,
    pub alpha_path: PathBuf,
    pub background_path: PathBuf,
    pub composite_path: PathBuf,
    pub trimap_path: PathBuf,
    pub seed: u64,
}

impl ManifestEntry {
    /// Identifier used in reports: the composite's file stem.
    pub fn id(&self) -> String {
        self.composite_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Paths are stored relative to the manifest's directory and resolved on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// One fully loaded dataset entry.
#[derive(Debug, Clone)]
pub struct Sample {
    pub foreground: Image,
    pub background: Image,
    pub alpha: AlphaMatte,
    pub composite: Image,
    pub trimap: Trimap,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(&self.entries).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    /// Accepts the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::format(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, entries };
        let mut seeds = std::collections::HashSet::new();
        for e in &manifest.entries {
            if !seeds.insert(e.seed) {
                return Err(Error::format(
                    &file,
                    format!("duplicate entry seed {}", e.seed),
                ));
            }
            for p in [
                &e.foreground_path,
                &e.alpha_path,
                &e.background_path,
                &e.composite_path,
                &e.trimap_path,
            ] {
                let full = manifest.resolve(p);
                if !full.is_file() {
                    return Err(Error::format(
                        &file,
                        format!("missing file {}", full.display()),
                    ));
                }
            }
        }
        Ok(manifest)
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let e = &self.entries[index];
        Ok(Sample {
            foreground: pngio::read_image(&self.resolve(&e.foreground_path))?,
            background: pngio::read_image(&self.resolve(&e.background_path))?,
            alpha: pngio::read_alpha(&self.resolve(&e.alpha_path))?,
            composite: pngio::read_image(&self.resolve(&e.composite_path))?,
            trimap: pngio::read_trimap(&self.resolve(&e.trimap_path))?,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.load_sample(i))
            .collect()
    }
}

fn snap_image(img: &Image) -> Result<Image> {
    Image::new(
        img.width(),
        img.height(),
        img.pixels().iter().map(|&v| pngio::snap8(v)).collect(),
    )
}

fn snap_alpha(a: &AlphaMatte, depth: AlphaDepth) -> Result<AlphaMatte> {
    let q = |v: f64| match depth {
        AlphaDepth::Eight => pngio::snap8(v),
        AlphaDepth::Sixteen => pngio::quantize16(v) as f64 / 65535.0,
    };
    AlphaMatte::new(
        a.width(),
        a.height(),
        a.values().iter().map(|&v| q(v)).collect(),
    )
}

/// Writes `num_fg · bgs_per_fg` entries under `out_dir/{fg,alpha,bg,comp,trimap}/NNNN.png`
/// plus `manifest.json`. Output is a pure function of `(config, seed)`.
pub fn synthesize_dataset(
    config: &SynthConfig,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    config.validate()?;
    for sub in ["fg", "alpha", "bg", "comp", "trimap"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let foregrounds: Vec<(Image, AlphaMatte)> = (0..config.num_fg)
        .into_par_iter()
        .map(|f| {
            let kind = config.kinds[f % config.kinds.len()];
            let (fg, alpha) = generate_synthetic_foreground(
                derive_seed(seed, stream::FOREGROUND, f as u64),
                config.size,
                kind,
            )?;
            Ok((snap_image(&fg)?, snap_alpha(&alpha, config.alpha_depth)?))
        })
        .collect::<Result<_>>()?;

    let total = config.num_fg * config.bgs_per_fg;
    let entries = (0..total)
        .into_par_iter()
        .map(|i| {
            let (fg, alpha) = &foregrounds[i / config.bgs_per_fg];
            let bg = snap_image(&generate_background(
                derive_seed(seed, stream::BACKGROUND, i as u64),
                config.size,
            )?)?;
            let comp = composite(fg, &bg, alpha)?;
            let mut trng = stream_rng(seed, stream::TRIMAP, i as u64);
            let tri =
                trimap::from_alpha_morphology(alpha, odd_in(&mut trng, config.trimap_kernel))?;

            let name = format!("{i:04}.png");
            let rel = |sub: &str| PathBuf::from(sub).join(&name);
            let entry = ManifestEntry {
                foreground_path: rel("fg"),
                alpha_path: rel("alpha"),
                background_path: rel("bg"),
                composite_path: rel("comp"),
                trimap_path: rel("trimap"),
                seed: derive_seed(seed, stream::DATASET, i as u64),
            };
            pngio::write_image(&out_dir.join(&entry.foreground_path), fg)?;
            pngio::write_alpha(&out_dir.join(&entry.alpha_path), alpha, config.alpha_depth)?;
            pngio::write_image(&out_dir.join(&entry.background_path), &bg)?;
            pngio::write_image(&out_dir.join(&entry.composite_path), &comp)?;
            pngio::write_trimap(&out_dir.join(&entry.trimap_path), &tri)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    log::info!("synthesized {} entries in {}", total, out_dir.display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fractional_share(a: &AlphaMatte) -> f64 {
        let n = a.values().iter().filter(|&&v| v > 0.05 && v < 0.95).count();
        n as f64 / a.values().len() as f64
    }

    #[test]
    fn every_kind_has_a_transition_band() {
        for kind in ForegroundKind::ALL {
            for size in [32, 64, 128] {
                for seed in 0..5 {
                    let (_, a) = generate_synthetic_foreground(seed, size, kind).unwrap();
                    let share = fractional_share(&a);
                    assert!(share >= 0.05, "{kind:?} size {size} seed {seed}: {share}");
                }
            }
        }
    }

    #[test]
    fn soft_disk_is_radially_monotone() {
        let (_, a) = generate_synthetic_foreground(3, 64, ForegroundKind::SoftDisk).unwrap();
        // The centre is the argmax; recover it and check ordering by distance.
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(3);
        let _ = ColourField::random(&mut rng, 64, 0.12);
        let (cx, cy) = radial_centre(&mut rng, 64);
        let mut by_r: Vec<(f64, f64)> = (0..64 * 64)
            .map(|i| {
                let (x, y) = ((i % 64) as f64, (i / 64) as f64);
                ((x - cx).hypot(y - cy), a.values()[i])
            })
            .collect();
        by_r.sort_by(|p, q| p.0.total_cmp(&q.0));
        for w in by_r.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in ForegroundKind::ALL {
            let a = generate_synthetic_foreground(11, 64, kind).unwrap();
            let b = generate_synthetic_foreground(11, 64, kind).unwrap();
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
        assert_eq!(
            generate_background(4, 48).unwrap(),
            generate_background(4, 48).unwrap()
        );
        assert!(generate_synthetic_foreground(0, 31, ForegroundKind::SoftDisk).is_err());
    }

    #[test]
    fn odd_range_sampling() {
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        for _ in 0..200 {
            let k = odd_in(&mut rng, (5, 11));
            assert!(k % 2 == 1 && (5..=11).contains(&k));
        }
    }
}
