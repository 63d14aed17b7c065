//! Trimaps derived from ground-truth alpha, by square-element erosion or by a
//! Euclidean distance band around the fractional pixels.

use crate::{AlphaMatte, Error, Result};

/// Foreground threshold: pixels at or above count as fully opaque.
pub const OPAQUE: f64 = 1.0 - 1e-6;
/// Background threshold: pixels at or below count as fully transparent.
pub const TRANSPARENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TrimapLabel {
    Background = 0,
    Unknown = 1,
    Foreground = 2,
}

impl TrimapLabel {
    /// Network input encoding.
    pub fn encode(self) -> f64 {
        match self {
            TrimapLabel::Background => 0.0,
            TrimapLabel::Unknown => 0.5,
            TrimapLabel::Foreground => 1.0,
        }
    }

    pub fn to_gray8(self) -> u8 {
        match self {
            TrimapLabel::Background => 0,
            TrimapLabel::Unknown => 128,
            TrimapLabel::Foreground => 255,
        }
    }

    /// Nearest of {0, 128, 255}.
    pub fn from_gray8(v: u8) -> Self {
        match v {
            0..=63 => TrimapLabel::Background,
            64..=191 => TrimapLabel::Unknown,
            _ => TrimapLabel::Foreground,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    width: usize,
    height: usize,
    labels: Vec<TrimapLabel>,
}

impl Trimap {
    pub fn new(width: usize, height: usize, labels: Vec<TrimapLabel>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::Config(format!(
                "trimap {width}×{height} cannot hold {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: TrimapLabel) -> Result<Self> {
        Self::new(width, height, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[TrimapLabel] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> TrimapLabel {
        self.labels[y * self.width + x]
    }

    pub fn encode_channel(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.encode()).collect()
    }

    pub fn unknown_mask(&self) -> Vec<bool> {
        self.labels
            .iter()
            .map(|&l| l == TrimapLabel::Unknown)
            .collect()
    }

    /// Pixel counts indexed by label value (background, unknown, foreground).
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.height {
            for x in 0..self.width {
                labels.push(self.get(self.width - 1 - x, y));
            }
        }
        Self {
            width: self.width,
            height: self.height,
            labels,
        }
    }
}

/// Mask of label == Unknown.
pub fn unknown_mask(trimap: &Trimap) -> Vec<bool> {
    trimap.unknown_mask()
}

/// Binary erosion by a k×k square; out-of-image pixels replicate the edge.
fn erode_square(mask: &[bool], width: usize, height: usize, kernel: usize) -> Vec<bool> {
    let r = (kernel / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // separable: a square min is a row min followed by a column min
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            rows[y * width + x] = (-r..=r).all(|d| mask[y * width + clamp(x as isize + d, width)]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = (-r..=r).all(|d| rows[clamp(y as isize + d, height) * width + x]);
        }
    }
    out
}

fn is_fractional(a: f64) -> bool {
    a > 0.0 && a < 1.0
}

/// Foreground is the eroded opaque set, background the eroded transparent
/// set, everything else (including every fractional pixel) Unknown.
pub fn from_alpha_morphology(alpha: &AlphaMatte, kernel: usize) -> Result<Trimap> {
    if kernel % 2 == 0 || !(3..=25).contains(&kernel) {
        return Err(Error::Config(format!(
            "trimap kernel must be odd in [3, 25], got {kernel}"
        )));
    }
    let (w, h) = (alpha.width(), alpha.height());
    let a = alpha.values();
    let fg: Vec<bool> = a.iter().map(|&v| v >= OPAQUE).collect();
    let bg: Vec<bool> = a.iter().map(|&v| v <= TRANSPARENT).collect();
    let fg = erode_square(&fg, w, h, kernel);
    let bg = erode_square(&bg, w, h, kernel);
    let labels = (0..w * h)
        .map(|i| {
            if is_fractional(a[i]) {
                TrimapLabel::Unknown
            } else if fg[i] {
                TrimapLabel::Foreground
            } else if bg[i] {
                TrimapLabel::Background
            } else {
                TrimapLabel::Unknown
            }
        })
        .collect();
    Trimap::new(w, h, labels)
}

/// Unknown band of Euclidean radius around the pixels with 0 < α < 1.
pub fn from_alpha_distance(alpha: &AlphaMatte, radius: f64) -> Result<Trimap> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!(
            "trimap radius must be positive, got {radius}"
        )));
    }
    let (w, h) = (alpha.width(), alpha.height());
    let a = alpha.values();
    let seeds: Vec<bool> = a.iter().map(|&v| is_fractional(v)).collect();
    let dist2 = squared_distance_transform(&seeds, w, h);
    let r2 = radius * radius;
    let labels = (0..w * h)
        .map(|i| {
            if dist2[i] <= r2 {
                TrimapLabel::Unknown
            } else if a[i] >= 0.5 {
                TrimapLabel::Foreground
            } else {
                TrimapLabel::Background
            }
        })
        .collect();
    Trimap::new(w, h, labels)
}

/// Exact squared Euclidean distance to the nearest `true` pixel, via two 1-D
/// lower-envelope passes (columns then rows). Infinite when there is no seed.
pub fn squared_distance_transform(seeds: &[bool], width: usize, height: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = seeds
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        lower_envelope(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..][..width]);
        lower_envelope(&f[..width], &mut d[..width], &mut v, &mut z);
        grid[y * width..][..width].copy_from_slice(&d[..width]);
    }
    grid
}

/// 1-D squared distance transform of a sampled function (parabola envelope).
fn lower_envelope(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        // z[0] is -inf, so the loop always stops at k = 0 at the latest
        let s = loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard_disk(size: usize, radius: f64) -> AlphaMatte {
        let c = (size as f64 - 1.0) / 2.0;
        AlphaMatte::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if d <= radius {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn soft_disk(size: usize) -> AlphaMatte {
        let c = (size as f64 - 1.0) / 2.0;
        AlphaMatte::from_fn(size, size, |x, y| {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            (size as f64 * 0.35 - d) / 4.0
        })
        .unwrap()
    }

    fn brute_force_dist2(seeds: &[bool], w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (0..w * h)
                    .filter(|&j| seeds[j])
                    .map(|j| {
                        let (sx, sy) = ((j % w) as f64, (j / w) as f64);
                        (x - sx).powi(2) + (y - sy).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn opaque_alpha_is_all_foreground() {
        let t = from_alpha_morphology(&AlphaMatte::filled(12, 9, 1.0).unwrap(), 7).unwrap();
        assert!(t.labels().iter().all(|&l| l == TrimapLabel::Foreground));
        assert!(unknown_mask(&t).iter().all(|&m| !m));
    }

    #[test]
    fn hard_disk_band_straddles_boundary() {
        let a = hard_disk(32, 9.0);
        let t = from_alpha_morphology(&a, 5).unwrap();
        // along the centre row, the band on each side spans the boundary
        let y = 16;
        let row: Vec<TrimapLabel> = (0..32).map(|x| t.get(x, y)).collect();
        let unknown: Vec<usize> = (0..32)
            .filter(|&x| row[x] == TrimapLabel::Unknown)
            .collect();
        let left: Vec<usize> = unknown.iter().copied().filter(|&x| x < 16).collect();
        assert!(left.len() >= 4, "{row:?}");
        let edge = (0..16).find(|&x| a.get(x, y) == 1.0).unwrap();
        assert!(left.contains(&(edge - 1)) && left.contains(&edge));
    }

    #[test]
    fn kernel_must_be_odd_and_in_range() {
        let a = hard_disk(16, 5.0);
        assert!(from_alpha_morphology(&a, 4).is_err());
        assert!(from_alpha_morphology(&a, 27).is_err());
        assert!(from_alpha_morphology(&a, 1).is_err());
    }

    #[test]
    fn both_generators_are_sound_and_consistent() {
        let a = soft_disk(40);
        for t in [
            from_alpha_morphology(&a, 5).unwrap(),
            from_alpha_morphology(&a, 13).unwrap(),
            from_alpha_distance(&a, 3.0).unwrap(),
        ] {
            for (i, &v) in a.values().iter().enumerate() {
                match t.labels()[i] {
                    TrimapLabel::Foreground => assert!(v >= OPAQUE),
                    TrimapLabel::Background => assert!(v <= TRANSPARENT),
                    TrimapLabel::Unknown => {}
                }
                if v > 0.0 && v < 1.0 {
                    assert_eq!(t.labels()[i], TrimapLabel::Unknown);
                }
            }
        }
    }

    #[test]
    fn distance_trimap_is_empty_band_for_binary_alpha() {
        let t = from_alpha_distance(&hard_disk(20, 6.0), 1e-9).unwrap();
        assert_eq!(t.histogram()[TrimapLabel::Unknown as usize], 0);
        assert!(from_alpha_distance(&hard_disk(20, 6.0), 0.0).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut state = 12345u64;
        for trial in 0..20 {
            let density = [0.02, 0.1, 0.4][trial % 3];
            let seeds: Vec<bool> = (0..256)
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 33) as f64 / (1u64 << 31) as f64) < density
                })
                .collect();
            let fast = squared_distance_transform(&seeds, 16, 16);
            let slow = brute_force_dist2(&seeds, 16, 16);
            assert_eq!(fast, slow, "trial {trial}");
        }
        let none = squared_distance_transform(&[false; 12], 4, 3);
        assert!(none.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn non_square_distance_transform() {
        let mut seeds = vec![false; 7 * 3];
        seeds[5] = true;
        seeds[7 * 2] = true;
        assert_eq!(
            squared_distance_transform(&seeds, 7, 3),
            brute_force_dist2(&seeds, 7, 3)
        );
    }

    #[test]
    fn encoding_and_histogram() {
        let t = Trimap::new(
            3,
            1,
            vec![
                TrimapLabel::Background,
                TrimapLabel::Unknown,
                TrimapLabel::Foreground,
            ],
        )
        .unwrap();
        assert_eq!(t.encode_channel(), vec![0.0, 0.5, 1.0]);
        assert_eq!(t.histogram(), [1, 1, 1]);
        assert_eq!(
            t.unknown_mask().iter().filter(|&&m| m).count(),
            t.histogram()[1]
        );
        for l in [
            TrimapLabel::Background,
            TrimapLabel::Unknown,
            TrimapLabel::Foreground,
        ] {
            assert_eq!(TrimapLabel::from_gray8(l.to_gray8()), l);
        }
    }
}
