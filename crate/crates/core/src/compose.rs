use crate::{AlphaMatte, Error, Image, Result};

/// `I = α·F + (1 − α)·B` per pixel and channel.
pub fn composite(fg: &Image, bg: &Image, alpha: &AlphaMatte) -> Result<Image> {
    let (w, h) = (fg.width(), fg.height());
    if (bg.width(), bg.height()) != (w, h) || !alpha.same_dims(w, h) {
        return Err(Error::Config(format!(
            "composite needs matching sizes: fg {}×{}, bg {}×{}, alpha {}×{}",
            w,
            h,
            bg.width(),
            bg.height(),
            alpha.width(),
            alpha.height()
        )));
    }
    let pixels = fg
        .pixels()
        .chunks_exact(3)
        .zip(bg.pixels().chunks_exact(3))
        .zip(alpha.values())
        .flat_map(|((f, b), &a)| {
            let mix = |c: usize| (a * f[c] + (1.0 - a) * b[c]).clamp(0.0, 1.0);
            [mix(0), mix(1), mix(2)]
        })
        .collect();
    Image::new(w, h, pixels)
}
