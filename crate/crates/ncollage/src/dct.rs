//! Orthonormal block cosine transform and the DC-only baseline codec.
//!
//! The baseline keeps exactly one coefficient (the DC term) per patch per
//! channel as a 32-bit float, which makes its rate a closed-form function of
//! the patch size: `32 / patch^2` bits per pixel. Reconstruction is the
//! per-patch mean, so this is the natural "no self-similarity" reference
//! point for the fractal coders.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Orthonormal 1-D DCT-II of `x`.
fn dct1d(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            let sum: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    v * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf))
                        .cos()
                })
                .sum();
            alpha * sum
        })
        .collect()
}

/// Inverse of [`dct1d`] (orthonormal DCT-III).
fn idct1d(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let nf = n as f64;
    (0..n)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| {
                    let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
                    alpha
                        * c
                        * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf))
                            .cos()
                })
                .sum()
        })
        .collect()
}

/// 2-D orthonormal DCT-II of a `side * side` block (row-major). The DC
/// coefficient equals `side * mean`.
pub fn dct2(block: &[f64], side: usize) -> Result<Vec<f64>> {
    if block.len() != side * side || side == 0 {
        return Err(Error::Shape(format!(
            "block of {} samples is not {side}x{side}",
            block.len()
        )));
    }
    // Rows, then columns.
    let mut rows = Vec::with_capacity(side * side);
    for y in 0..side {
        rows.extend(dct1d(&block[y * side..(y + 1) * side]));
    }
    let mut out = vec![0.0; side * side];
    for x in 0..side {
        let col: Vec<f64> = (0..side).map(|y| rows[y * side + x]).collect();
        for (y, v) in dct1d(&col).into_iter().enumerate() {
            out[y * side + x] = v;
        }
    }
    Ok(out)
}

/// Inverse 2-D transform.
pub fn idct2(coeffs: &[f64], side: usize) -> Result<Vec<f64>> {
    if coeffs.len() != side * side || side == 0 {
        return Err(Error::Shape(format!(
            "block of {} samples is not {side}x{side}",
            coeffs.len()
        )));
    }
    let mut cols = vec![0.0; side * side];
    for x in 0..side {
        let col: Vec<f64> = (0..side).map(|y| coeffs[y * side + x]).collect();
        for (y, v) in idct1d(&col).into_iter().enumerate() {
            cols[y * side + x] = v;
        }
    }
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        out.extend(idct1d(&cols[y * side..(y + 1) * side]));
    }
    Ok(out)
}

/// DC-only transform code: one coefficient per patch per channel in
/// channel-major, row-major patch order. The rate accounting charges 32 bits
/// per coefficient (see [`dct_bpp`]); the in-memory math stays at full
/// precision so reconstruction is exactly the patch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DctCode {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub patch: usize,
    pub dc: Vec<f64>,
}

impl DctCode {
    fn patch_grid(&self) -> (usize, usize) {
        (self.width / self.patch, self.height / self.patch)
    }
}

/// Keep only the DC coefficient of each patch.
pub fn block_dct_encode(x: &RasterImage, patch: usize) -> Result<DctCode> {
    if patch == 0 || !(x.width().is_multiple_of(patch) && x.height().is_multiple_of(patch)) {
        return Err(Error::Partition(format!(
            "patch size {patch} does not tile {}x{}",
            x.width(),
            x.height()
        )));
    }
    let (px, py) = (x.width() / patch, x.height() / patch);
    let mut dc = Vec::with_capacity(px * py * x.channels());
    let mut block = vec![0.0; patch * patch];
    for c in 0..x.channels() {
        for gy in 0..py {
            for gx in 0..px {
                for y in 0..patch {
                    for xx in 0..patch {
                        block[y * patch + xx] = x.get(c, gx * patch + xx, gy * patch + y);
                    }
                }
                // DC of the orthonormal transform, computed directly as
                // patch * mean.
                let mean = block.iter().sum::<f64>() / block.len() as f64;
                dc.push(patch as f64 * mean);
            }
        }
    }
    Ok(DctCode { width: x.width(), height: x.height(), channels: x.channels(), patch, dc })
}

/// Reconstruct from DC coefficients: every patch becomes its mean.
pub fn block_dct_decode(code: &DctCode) -> Result<RasterImage> {
    let (px, py) = code.patch_grid();
    if code.dc.len() != px * py * code.channels {
        return Err(Error::Shape(format!(
            "{} coefficients for a {px}x{py}x{} grid",
            code.dc.len(),
            code.channels
        )));
    }
    let mut out = RasterImage::new(code.width, code.height, code.channels)?;
    let mut i = 0;
    for c in 0..code.channels {
        for gy in 0..py {
            for gx in 0..px {
                let value = code.dc[i] / code.patch as f64;
                i += 1;
                for y in 0..code.patch {
                    for xx in 0..code.patch {
                        out.set(c, gx * code.patch + xx, gy * code.patch + y, value);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Rate of the DC-only code: 32 bits per patch per channel.
pub fn dct_bpp(width: usize, height: usize, channels: usize, patch: usize) -> Result<f64> {
    if patch == 0 || !(width.is_multiple_of(patch) && height.is_multiple_of(patch)) {
        return Err(Error::Partition(format!(
            "patch size {patch} does not tile {width}x{height}"
        )));
    }
    let coeffs = (width / patch) * (height / patch) * channels;
    let pixels = width * height * channels;
    Ok(coeffs as f64 * 32.0 / pixels as f64)
}
