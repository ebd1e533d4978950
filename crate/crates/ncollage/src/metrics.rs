//! Reconstruction quality metrics over unit-range images.

use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Mean squared error between two images of identical shape.
pub fn mse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot compare {:?} against {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for peak value 1.0, capped at 100 dB so
/// exact and near-exact reconstructions compare equal instead of diverging.
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / m).log10()).min(100.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_images_hit_the_cap() {
        let a = RasterImage::constant(4, 4, 1, 0.3).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn uniform_offset_has_known_psnr() {
        let a = RasterImage::constant(4, 4, 1, 0.0).unwrap();
        let b = RasterImage::constant(4, 4, 1, 0.1).unwrap();
        assert_abs_diff_eq!(mse(&a, &b).unwrap(), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn tiny_errors_are_capped() {
        let a = RasterImage::constant(4, 4, 1, 0.0).unwrap();
        let b = RasterImage::constant(4, 4, 1, 1e-6).unwrap();
        // mse = 1e-12 would give 120 dB uncapped.
        assert_eq!(psnr(&a, &b).unwrap(), 100.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = RasterImage::constant(4, 4, 1, 0.0).unwrap();
        let b = RasterImage::constant(4, 2, 2, 0.0).unwrap();
        assert!(matches!(mse(&a, &b), Err(Error::Shape(_))));
    }
}
