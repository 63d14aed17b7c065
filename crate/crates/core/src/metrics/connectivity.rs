//! Connectivity error. For each threshold level the joint binarisation of
//! both mattes is labelled into 4-connected components with union-find; the
//! largest component (ties: earliest first pixel in raster order) defines the
//! connected set at that level.

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }
}

/// Membership mask of the largest 4-connected component of `on`.
pub fn largest_component(on: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut ds = DisjointSet::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !on[i] {
                continue;
            }
            if x + 1 < w && on[i + 1] {
                ds.union(i, i + 1);
            }
            if y + 1 < h && on[i + w] {
                ds.union(i, i + w);
            }
        }
    }
    // Raster order reaches each component's first pixel before its others, so
    // a strict `>` keeps the earliest component among equal sizes.
    let mut seen = vec![false; w * h];
    let mut best: Option<(usize, usize)> = None;
    for i in 0..w * h {
        if !on[i] {
            continue;
        }
        let r = ds.find(i);
        if !seen[r] {
            seen[r] = true;
            if best.map_or(true, |(_, s)| ds.size[r] > s) {
                best = Some((r, ds.size[r]));
            }
        }
    }
    match best {
        None => vec![false; w * h],
        Some((root, _)) => (0..w * h).map(|i| on[i] && ds.find(i) == root).collect(),
    }
}

/// Largest threshold level at which each pixel lies in the connected set (0 if never).
pub fn connectivity_levels(pred: &[f64], gt: &[f64], w: usize, h: usize, step: f64) -> Vec<f64> {
    let mut level = vec![0.0; w * h];
    let mut k = 1usize;
    loop {
        let theta = k as f64 * step;
        if theta > 1.0 + 1e-9 {
            break;
        }
        let on: Vec<bool> = pred
            .iter()
            .zip(gt)
            .map(|(&p, &g)| p >= theta && g >= theta)
            .collect();
        for (l, inside) in level.iter_mut().zip(largest_component(&on, w, h)) {
            if inside {
                *l = theta;
            }
        }
        k += 1;
    }
    level
}

/// `1 − d·[d ≥ θ]` with `d = α − l`.
pub fn phi(alpha: f64, level: f64, theta: f64) -> f64 {
    let d = alpha - level;
    if d >= theta {
        1.0 - d
    } else {
        1.0
    }
}
