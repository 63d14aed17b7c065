//! Float rasters for colour images and alpha mattes. Values live in [0, 1].

use crate::{Error, Result};

/// H×W×3 colour image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

/// H×W opacity map.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatte {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

fn check_dims(width: usize, height: usize, len: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!(
            "raster dimensions must be positive, got {width}×{height}"
        )));
    }
    if len != width * height * channels {
        return Err(Error::Config(format!(
            "{width}×{height}×{channels} raster needs {} values, got {len}",
            width * height * channels
        )));
    }
    Ok(())
}

fn check_unit(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Config(format!(
            "raster value {} at index {i} outside [0,1]",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height, pixels.len(), 3)?;
        check_unit(&pixels)?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel-planar copy (3×H×W), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
        .expect("same dims")
    }
}

impl AlphaMatte {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(width, height, values.len(), 1)?;
        check_unit(&values)?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Values are clamped into [0, 1].
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
        .expect("same dims")
    }

    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Bilinear sample at continuous pixel-centre coordinates, clamping to the border.
pub(crate) fn bilinear(
    width: usize,
    height: usize,
    fetch: impl Fn(usize, usize) -> f64,
    fx: f64,
    fy: f64,
) -> f64 {
    let fx = fx.clamp(0.0, (width - 1) as f64);
    let fy = fy.clamp(0.0, (height - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let top = lerp(fetch(x0, y0), fetch(x1, y0), tx);
    let bottom = lerp(fetch(x0, y1), fetch(x1, y1), tx);
    lerp(top, bottom, ty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(AlphaMatte::new(2, 2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(AlphaMatte::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, vec![0.2, 0.3]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn planar_layout() {
        let img = Image::new(2, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.to_planar(), vec![0.1, 0.4, 0.2, 0.5, 0.3, 0.6]);
    }

    #[test]
    fn flip_is_an_involution() {
        let a = AlphaMatte::from_fn(5, 3, |x, y| (x * 3 + y) as f64 / 20.0).unwrap();
        assert_ne!(a.flip_horizontal(), a);
        assert_eq!(a.flip_horizontal().flip_horizontal(), a);
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let v = bilinear(4, 4, |_, _| 0.37, 1.3, 2.9);
        assert_eq!(v, 0.37);
    }
}
