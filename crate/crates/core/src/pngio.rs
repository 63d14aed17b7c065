//! PNG interchange: RGB composites, grayscale alpha (8- or 16-bit) and trimaps
//! encoded as {0, 128, 255}.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::trimap::{Trimap, TrimapLabel};
use crate::{AlphaMatte, Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaDepth {
    #[default]
    Eight,
    Sixteen,
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Snap a value to the 8-bit grid it would be stored on.
pub fn snap8(v: f64) -> f64 {
    quantize8(v) as f64 / 255.0
}

struct Decoded {
    width: usize,
    height: usize,
    channels: usize,
    /// Normalised samples, interleaved.
    samples: Vec<f64>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    let samples = match info.bit_depth {
        png::BitDepth::Eight => buf.iter().map(|&b| b as f64 / 255.0).collect(),
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported bit depth {other:?}"),
            ))
        }
    };
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        samples,
    })
}

fn encode(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| Error::format(path, e))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::format(path, e))?;
    writer.finish().map_err(|e| Error::format(path, e))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let data: Vec<u8> = image.pixels().iter().map(|&v| quantize8(v)).collect();
    encode(
        path,
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &data,
    )
}

/// Reads RGB(A) or grayscale PNGs; alpha channels are dropped, gray is replicated.
pub fn read_image(path: &Path) -> Result<Image> {
    let d = decode(path)?;
    let pixels = match d.channels {
        1 | 2 => d
            .samples
            .chunks_exact(d.channels)
            .flat_map(|p| [p[0]; 3])
            .collect(),
        3 | 4 => d
            .samples
            .chunks_exact(d.channels)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        n => {
            return Err(Error::format(
                path,
                format!("unsupported channel count {n}"),
            ))
        }
    };
    Image::new(d.width, d.height, pixels)
}

pub fn write_alpha(path: &Path, alpha: &AlphaMatte, depth: AlphaDepth) -> Result<()> {
    let (w, h) = (alpha.width(), alpha.height());
    match depth {
        AlphaDepth::Eight => {
            let data: Vec<u8> = alpha.values().iter().map(|&v| quantize8(v)).collect();
            encode(
                path,
                w,
                h,
                png::ColorType::Grayscale,
                png::BitDepth::Eight,
                &data,
            )
        }
        AlphaDepth::Sixteen => {
            let data: Vec<u8> = alpha
                .values()
                .iter()
                .flat_map(|&v| quantize16(v).to_be_bytes())
                .collect();
            encode(
                path,
                w,
                h,
                png::ColorType::Grayscale,
                png::BitDepth::Sixteen,
                &data,
            )
        }
    }
}

/// Reads the first channel of any supported PNG as opacity.
pub fn read_alpha(path: &Path) -> Result<AlphaMatte> {
    let d = decode(path)?;
    let values = d.samples.iter().step_by(d.channels).copied().collect();
    AlphaMatte::new(d.width, d.height, values)
}

pub fn write_trimap(path: &Path, trimap: &Trimap) -> Result<()> {
    let data: Vec<u8> = trimap.labels().iter().map(|l| l.to_gray8()).collect();
    encode(
        path,
        trimap.width(),
        trimap.height(),
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
    )
}

pub fn read_trimap(path: &Path) -> Result<Trimap> {
    let d = decode(path)?;
    let labels = d
        .samples
        .iter()
        .step_by(d.channels)
        .map(|&v| TrimapLabel::from_gray8(quantize8(v)))
        .collect();
    Trimap::new(d.width, d.height, labels)
}
