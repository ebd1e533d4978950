//! Classic hard-assignment fractal codes.
//!
//! A [`PifsCode`] stores, for every range cell, the single pooled domain cell
//! that best predicts it under an affine map `a * d + b`, together with the
//! augmentation variant used. This is the address-based baseline the soft
//! collage codes are measured against: same partition geometry, same decoder
//! loop, but one domain per range instead of a mixture over all of them.

use rayon::prelude::*;

use crate::collage::LipschitzReport;
use crate::error::{Error, Result};
use crate::raster::{
    augment_cell, extract_domains, partition_ranges, place_range, PartitionScheme, RasterImage,
    AUGMENTATIONS,
};
use crate::solver::FixedPointOp;

/// Affine map for one range cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PifsEntry {
    /// Base domain index (pre-augmentation).
    pub domain: u32,
    /// Augmentation id, `0..8`; always 0 when the code was built without
    /// augmentations.
    pub augmentation: u8,
    /// Contrast, `|a| < 1`.
    pub a: f64,
    /// Offset.
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PifsCode {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub scheme: PartitionScheme,
    /// Whether the search ran over the augmented candidate bank.
    pub augmented: bool,
    /// One entry per range cell, in range order.
    pub entries: Vec<PifsEntry>,
}

impl PifsCode {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate_for(self.width, self.height)?;
        let k = self.scheme.range_count(self.width, self.height, self.channels);
        if self.entries.len() != k {
            return Err(Error::Shape(format!(
                "{} entries for {k} range cells",
                self.entries.len()
            )));
        }
        let n = self.scheme.domain_count(self.width, self.height, self.channels) as u32;
        for (i, e) in self.entries.iter().enumerate() {
            if e.domain >= n {
                return Err(Error::Shape(format!(
                    "entry {i} references domain {} of {n}",
                    e.domain
                )));
            }
            let max_aug = if self.augmented { AUGMENTATIONS as u8 } else { 1 };
            if e.augmentation >= max_aug {
                return Err(Error::Shape(format!(
                    "entry {i} augmentation {} out of range",
                    e.augmentation
                )));
            }
            if e.a.is_nan() || e.a.abs() >= 1.0 {
                return Err(Error::Numerical(format!(
                    "entry {i} contrast {} outside (-1, 1)",
                    e.a
                )));
            }
            if !e.b.is_finite() {
                return Err(Error::Numerical(format!("entry {i} offset {} not finite", e.b)));
            }
        }
        Ok(())
    }
}

impl FixedPointOp for PifsCode {
    fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// One decode step: pool the base domains of `z` once, then map each
    /// range cell through its stored `(domain, augmentation, a, b)`.
    /// Augmenting the pooled cell equals pooling the augmented domain:
    /// rotation commutes with uniform block averaging on square cells and
    /// negation is linear.
    fn apply(&self, z: &RasterImage) -> Result<RasterImage> {
        if z.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "operator built for {:?}, image is {:?}",
                self.dims(),
                z.dims()
            )));
        }
        let bank = extract_domains(z, &self.scheme)?;
        let ranges = partition_ranges(self.width, self.height, self.channels, &self.scheme)?;
        let rs = self.scheme.range_size;
        let pieces: Vec<Vec<f64>> = ranges
            .par_iter()
            .map(|r| {
                let e = &self.entries[r.index];
                let cell = augment_cell(&bank.cells[e.domain as usize], rs, e.augmentation);
                cell.iter().map(|&d| e.a * d + e.b).collect()
            })
            .collect();
        let mut out = RasterImage::new(self.width, self.height, self.channels)?;
        for (r, piece) in ranges.iter().zip(&pieces) {
            place_range(&mut out, r, rs, piece);
        }
        Ok(out)
    }

    /// Each range reads one pooled (convex) cell scaled by `a`, so the
    /// per-range row sum is `|a|`.
    fn lipschitz(&self) -> LipschitzReport {
        let per_range: Vec<f64> = self.entries.iter().map(|e| e.a.abs()).collect();
        let bound = per_range.iter().cloned().fold(0.0, f64::max);
        LipschitzReport { bound, per_range, contractive: bound < 1.0 }
    }
}
