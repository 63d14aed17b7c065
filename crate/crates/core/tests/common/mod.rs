//! Brute-force oracles shared by the metric and acceptance suites.

use std::collections::VecDeque;

/// Flood-fill labelling; the largest 4-connected component wins, the one whose
/// first pixel comes earliest in raster order on ties.
pub fn bfs_largest(on: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; w * h];
    let mut best: Option<(usize, usize)> = None;
    let mut next = 0;
    for start in 0..w * h {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if on[j] && label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        None => vec![false; w * h],
        Some((l, _)) => label.iter().map(|&x| x == l).collect(),
    }
}

pub fn conn_oracle(
    p: &[f64],
    g: &[f64],
    mask: &[bool],
    w: usize,
    h: usize,
    step: f64,
    theta: f64,
) -> f64 {
    let mut level = vec![0.0; w * h];
    let mut k = 1usize;
    while k as f64 * step <= 1.0 + 1e-9 {
        let t = k as f64 * step;
        let on: Vec<bool> = (0..w * h).map(|i| p[i] >= t && g[i] >= t).collect();
        for (i, inside) in bfs_largest(&on, w, h).into_iter().enumerate() {
            if inside {
                level[i] = t;
            }
        }
        k += 1;
    }
    let phi = |a: f64, l: f64| {
        let d = a - l;
        if d >= theta {
            1.0 - d
        } else {
            1.0
        }
    };
    let mut total = 0.0;
    for i in 0..w * h {
        if mask[i] {
            total += (phi(p[i], level[i]) - phi(g[i], level[i])).abs();
        }
    }
    total / 1000.0
}

/// Dense 2-D derivative-of-Gaussian filtering with each axis clamped to the
/// border, taps built directly from the kernel formulas.
pub fn dense_gradient(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let gauss = |k: i64| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp();
    let g_sum: f64 = (-r..=r).map(gauss).sum();
    let moment: f64 = (-r..=r).map(|k| (k * k) as f64 * gauss(k)).sum();
    let smooth = |k: i64| gauss(k) / g_sum;
    let deriv = |k: i64| k as f64 * gauss(k) / moment;
    let at = |x: i64, y: i64| {
        let cx = x.clamp(0, w as i64 - 1) as usize;
        let cy = y.clamp(0, h as i64 - 1) as usize;
        values[cy * w + cx]
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = at(x + dx, y + dy);
                    gx += deriv(dx) * smooth(dy) * v;
                    gy += smooth(dx) * deriv(dy) * v;
                }
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}
