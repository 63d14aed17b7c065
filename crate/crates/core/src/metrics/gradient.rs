//! Gradient error: squared difference of Gaussian-derivative gradient
//! magnitudes, computed with separable filters and edge replication.

/// Kernel half-width for a given sigma: `ceil(4σ)`.
pub fn radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Normalised Gaussian smoothing taps, index `k + radius` holds offset `k`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Derivative-of-Gaussian taps scaled so a unit ramp has derivative exactly one
/// (`Σ k·d[k] = 1`).
pub fn derivative_taps(sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| k as f64 * (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let moment: f64 = (-r..=r).zip(&raw).map(|(k, v)| k as f64 * v).sum();
    raw.into_iter().map(|v| v / moment).collect()
}

/// Correlation along x with clamped (replicated) borders.
fn filter_x(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &c) in taps.iter().enumerate() {
                let sx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += c * row[sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn filter_y(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (t, &c) in taps.iter().enumerate() {
            let sy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
            let row = &src[sy * w..(sy + 1) * w];
            for x in 0..w {
                out[y * w + x] += c * row[x];
            }
        }
    }
    out
}

/// Gradient magnitude map of a `w`×`h` raster.
pub fn gradient_magnitude(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_taps(sigma);
    let d = derivative_taps(sigma);
    let gx = filter_y(&filter_x(values, w, h, &d), w, h, &g);
    let gy = filter_y(&filter_x(values, w, h, &g), w, h, &d);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}
