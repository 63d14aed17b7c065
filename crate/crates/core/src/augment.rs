//! Training-time geometry: a square crop centred on an Unknown pixel, resized
//! to the training resolution, then an optional horizontal flip. The same plan
//! is applied to every raster of a sample.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::raster::bilinear;
use crate::rng::Rng;
use crate::trimap::{Trimap, TrimapLabel};
use crate::{AlphaMatte, Error, Image, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_sizes: Vec<usize>,
    pub output_size: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_sizes: vec![64, 96, 128],
            output_size: 64,
            flip: true,
        }
    }
}

/// A concrete crop/resize/flip transform. Source pixel centres sit at integer
/// coordinates; the window spans `crop` source pixels starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropPlan {
    pub centre: (usize, usize),
    pub crop: usize,
    pub output: usize,
    pub flip: bool,
    /// True when no Unknown pixel existed and the centre was drawn uniformly.
    pub fell_back: bool,
}

impl CropPlan {
    fn scale(&self) -> f64 {
        self.crop as f64 / self.output as f64
    }

    /// Continuous source coordinate (pixel-edge convention) of output pixel
    /// `o`'s centre along one axis. The middle output pixel maps onto `c`.
    fn source_edge(&self, c: usize, o: usize) -> f64 {
        let s = self.scale();
        let origin = c as f64 + 0.5 - (self.output as f64 / 2.0 + 0.5) * s;
        origin + (o as f64 + 0.5) * s
    }

    fn output_x(&self, o: usize) -> usize {
        if self.flip {
            self.output - 1 - o
        } else {
            o
        }
    }

    fn sample_linear(
        &self,
        w: usize,
        h: usize,
        fetch: impl Fn(usize, usize) -> f64,
        ox: usize,
        oy: usize,
    ) -> f64 {
        let sx = self.source_edge(self.centre.0, self.output_x(ox)) - 0.5;
        let sy = self.source_edge(self.centre.1, oy) - 0.5;
        bilinear(w, h, fetch, sx, sy)
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        let (w, h) = (img.width(), img.height());
        Image::from_fn(self.output, self.output, |ox, oy| {
            std::array::from_fn(|c| self.sample_linear(w, h, |x, y| img.get(x, y)[c], ox, oy))
        })
    }

    pub fn apply_alpha(&self, alpha: &AlphaMatte) -> Result<AlphaMatte> {
        let (w, h) = (alpha.width(), alpha.height());
        AlphaMatte::from_fn(self.output, self.output, |ox, oy| {
            self.sample_linear(w, h, |x, y| alpha.get(x, y), ox, oy)
        })
    }

    /// Nearest-neighbour so labels never blend.
    pub fn apply_trimap(&self, trimap: &Trimap) -> Result<Trimap> {
        let (w, h) = (trimap.width() as f64, trimap.height() as f64);
        let mut labels = Vec::with_capacity(self.output * self.output);
        for oy in 0..self.output {
            let sy = self
                .source_edge(self.centre.1, oy)
                .floor()
                .clamp(0.0, h - 1.0) as usize;
            for ox in 0..self.output {
                let sx = self
                    .source_edge(self.centre.0, self.output_x(ox))
                    .floor()
                    .clamp(0.0, w - 1.0) as usize;
                labels.push(trimap.get(sx, sy));
            }
        }
        Trimap::new(self.output, self.output, labels)
    }

    /// Output pixel that the crop centre lands on.
    pub fn centre_output_pixel(&self) -> (usize, usize) {
        (self.output_x(self.output / 2), self.output / 2)
    }
}

pub fn plan_crop(trimap: &Trimap, config: &AugmentConfig, rng: &mut Rng) -> Result<CropPlan> {
    if config.crop_sizes.is_empty() || config.crop_sizes.contains(&0) || config.output_size == 0 {
        return Err(Error::Config(
            "crop sizes and output size must be positive".into(),
        ));
    }
    let crop = config.crop_sizes[rng.gen_range(0..config.crop_sizes.len())];
    let unknown: Vec<usize> = trimap
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == TrimapLabel::Unknown)
        .map(|(i, _)| i)
        .collect();
    let (w, h) = (trimap.width(), trimap.height());
    let (centre, fell_back) = if unknown.is_empty() {
        log::warn!("trimap has no Unknown pixels; using a uniform random crop centre");
        ((rng.gen_range(0..w), rng.gen_range(0..h)), true)
    } else {
        let i = unknown[rng.gen_range(0..unknown.len())];
        ((i % w, i / w), false)
    };
    let flip = config.flip && rng.gen_bool(0.5);
    Ok(CropPlan {
        centre,
        crop,
        output: config.output_size,
        flip,
        fell_back,
    })
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Image,
    pub alpha: AlphaMatte,
    pub trimap: Trimap,
    pub plan: CropPlan,
}

pub fn augment(
    img: &Image,
    alpha: &AlphaMatte,
    trimap: &Trimap,
    seed: u64,
    config: &AugmentConfig,
) -> Result<Augmented> {
    let (w, h) = (img.width(), img.height());
    if !alpha.same_dims(w, h) || (trimap.width(), trimap.height()) != (w, h) {
        return Err(Error::Config(
            "augment needs image, alpha and trimap of equal size".into(),
        ));
    }
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
    let plan = plan_crop(trimap, config, &mut rng)?;
    Ok(Augmented {
        image: plan.apply_image(img)?,
        alpha: plan.apply_alpha(alpha)?,
        trimap: plan.apply_trimap(trimap)?,
        plan,
    })
}
