//! Soft collage operator codes.
//!
//! A [`CollageCode`] maps an image `z` to a new image range cell by range
//! cell: every cell is rebuilt as a convex mixture of *all* pooled domain
//! cells of `z` (each scaled by a per-cell contrast factor) plus auxiliary
//! cells and a flat offset. Because the mixture weights sum to one and every
//! contrast magnitude stays below one, the map is a contraction in the
//! sup norm and owns a unique attractor; decoding is fixed-point iteration.
//!
//! Coefficients are stored dense: `gamma` and `a` are `k x (n + v)` row-major
//! matrices over the domain bank (first `n` columns, post-augmentation when
//! the bank is augmented) and the auxiliary cells (last `v` columns).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{
    augment_domains, extract_domains, partition_ranges, place_range, rotate_cell,
    PartitionScheme, RasterImage,
};
use crate::solver::FixedPointOp;

/// Row-sum contraction estimate for an operator.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    /// Upper bound on the sup-norm Lipschitz constant.
    pub bound: f64,
    /// Per-range-cell row sums; `bound` is their maximum.
    pub per_range: Vec<f64>,
    pub contractive: bool,
}

/// Source of the `v` auxiliary cells appended after the domain columns.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxSource {
    /// Free-standing learned patches, each `range_size^2` samples. These are
    /// constants of the code, so they never enter the contraction bound.
    Patches(Vec<Vec<f64>>),
    /// The 90/180/270-degree rotations of the first pooled domain cell
    /// (requires `v == 3`). These depend on `z`, so their coefficient mass
    /// counts toward the contraction bound.
    DomainRotations,
}

impl AuxSource {
    pub fn is_rotations(&self) -> bool {
        matches!(self, AuxSource::DomainRotations)
    }
}

/// Dense soft-collage code for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CollageCode {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub scheme: PartitionScheme,
    /// Whether the domain columns enumerate the augmented bank (8 variants
    /// per base domain) instead of the base bank.
    pub augmented: bool,
    /// Range cell count.
    pub k: usize,
    /// Domain column count (post-augmentation when `augmented`).
    pub n: usize,
    /// Auxiliary column count.
    pub v: usize,
    /// Mixture weights, `k x (n + v)` row-major; rows are simplex points.
    pub gamma: Vec<f64>,
    /// Contrast factors, same shape; entries in `(-1, 1)`.
    pub a: Vec<f64>,
    /// Per-range offsets, length `k`.
    pub b: Vec<f64>,
    pub aux: AuxSource,
}

impl CollageCode {
    /// Total coefficient columns `n + v`.
    pub fn columns(&self) -> usize {
        self.n + self.v
    }

    /// Structural invariants: matrix shapes, simplex rows, bounded contrast,
    /// aux arity, scheme consistency with the stored dimensions.
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate_for(self.width, self.height)?;
        let k = self.scheme.range_count(self.width, self.height, self.channels);
        if k != self.k {
            return Err(Error::Shape(format!("k = {} but scheme yields {k} ranges", self.k)));
        }
        let base = self.scheme.domain_count(self.width, self.height, self.channels);
        let expect_n = if self.augmented { base * crate::raster::AUGMENTATIONS } else { base };
        if self.n != expect_n {
            return Err(Error::Shape(format!(
                "n = {} but scheme yields {expect_n} domain columns",
                self.n
            )));
        }
        let p = self.columns();
        if self.gamma.len() != self.k * p || self.a.len() != self.k * p || self.b.len() != self.k {
            return Err(Error::Shape(format!(
                "coefficient shapes {}x{p} expected, got gamma {}, a {}, b {}",
                self.k,
                self.gamma.len(),
                self.a.len(),
                self.b.len()
            )));
        }
        match &self.aux {
            AuxSource::Patches(ps) => {
                if ps.len() != self.v {
                    return Err(Error::Shape(format!(
                        "v = {} but {} aux patches stored",
                        self.v,
                        ps.len()
                    )));
                }
                let want = self.scheme.range_size * self.scheme.range_size;
                if let Some(bad) = ps.iter().find(|p| p.len() != want) {
                    return Err(Error::Shape(format!(
                        "aux patch has {} samples, expected {want}",
                        bad.len()
                    )));
                }
            }
            AuxSource::DomainRotations => {
                if self.v != 3 {
                    return Err(Error::Argument(format!(
                        "rotation aux requires v = 3, got {}",
                        self.v
                    )));
                }
            }
        }
        for (i, &g) in self.gamma.iter().enumerate() {
            if g.is_nan() || g < 0.0 {
                return Err(Error::Numerical(format!("gamma[{i}] = {g} negative or NaN")));
            }
        }
        for row in 0..self.k {
            let s: f64 = self.gamma[row * p..(row + 1) * p].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Numerical(format!("gamma row {row} sums to {s}, not 1")));
            }
        }
        if let Some((i, &bad)) =
            self.a.iter().enumerate().find(|(_, &x)| x.is_nan() || x.abs() >= 1.0)
        {
            return Err(Error::Numerical(format!("a[{i}] = {bad} outside (-1, 1)")));
        }
        if let Some(&bad) = self.b.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("offset {bad} not finite")));
        }
        Ok(())
    }

    /// Pooled domain cells of `z` (augmented when the code says so) followed
    /// by the auxiliary cells. Length `n + v`, each cell `range_size^2`.
    pub fn collect_cells(&self, z: &RasterImage) -> Result<Vec<Vec<f64>>> {
        let bank = extract_domains(z, &self.scheme)?;
        let bank = if self.augmented { augment_domains(&bank) } else { bank };
        if bank.len() != self.n {
            return Err(Error::Shape(format!(
                "image yields {} domain columns, code expects {}",
                bank.len(),
                self.n
            )));
        }
        let mut cells = bank.cells;
        match &self.aux {
            AuxSource::Patches(ps) => cells.extend(ps.iter().cloned()),
            AuxSource::DomainRotations => {
                let first = cells
                    .first()
                    .ok_or_else(|| Error::Shape("rotation aux needs at least one domain".into()))?
                    .clone();
                for q in 1..=3u8 {
                    cells.push(rotate_cell(&first, self.scheme.range_size, q));
                }
            }
        }
        Ok(cells)
    }
}

impl FixedPointOp for CollageCode {
    fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// One collage step: rebuild every range cell of the output from the
    /// pooled cells of `z`. Parallel over range cells; each cell is written
    /// by exactly one task, so the result is schedule-independent.
    fn apply(&self, z: &RasterImage) -> Result<RasterImage> {
        if z.dims() != self.dims() {
            return Err(Error::Shape(format!(
                "operator built for {:?}, image is {:?}",
                self.dims(),
                z.dims()
            )));
        }
        let cells = self.collect_cells(z)?;
        let ranges = partition_ranges(self.width, self.height, self.channels, &self.scheme)?;
        let rs = self.scheme.range_size;
        let p = self.columns();
        let pieces: Vec<Vec<f64>> = ranges
            .par_iter()
            .map(|r| {
                let row = r.index * p;
                let mut acc = vec![self.b[r.index]; rs * rs];
                for (j, cell) in cells.iter().enumerate() {
                    let w = self.gamma[row + j] * self.a[row + j];
                    if w != 0.0 {
                        for (o, &cv) in acc.iter_mut().zip(cell) {
                            *o += w * cv;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = RasterImage::new(self.width, self.height, self.channels)?;
        for (r, piece) in ranges.iter().zip(&pieces) {
            place_range(&mut out, r, rs, piece);
        }
        Ok(out)
    }

    /// Sup-norm contraction bound: the maximum over range cells of the
    /// coefficient mass `sum_j gamma * |a|` taken over the columns that read
    /// from `z`. Pooling rows are convex averages and rotations are
    /// permutations, so per-range row sums bound the whole operator.
    /// Patch-aux columns are constants and do not count; rotation-aux
    /// columns do.
    fn lipschitz(&self) -> LipschitzReport {
        let p = self.columns();
        let live = match self.aux {
            AuxSource::Patches(_) => self.n,
            AuxSource::DomainRotations => p,
        };
        let per_range: Vec<f64> = (0..self.k)
            .map(|row| {
                (0..live)
                    .map(|j| self.gamma[row * p + j] * self.a[row * p + j].abs())
                    .sum()
            })
            .collect();
        let bound = per_range.iter().cloned().fold(0.0, f64::max);
        LipschitzReport { bound, per_range, contractive: bound < 1.0 }
    }
}

/// Surrogate objective `||x - F(x)||^2` (sum of squares over all samples).
pub fn surrogate_loss(op: &dyn FixedPointOp, x: &RasterImage) -> Result<f64> {
    let fx = op.apply(x)?;
    Ok(x.as_slice()
        .iter()
        .zip(fx.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Collage distance in the sup norm, `||x - F(x)||_inf`.
pub fn collage_error(op: &dyn FixedPointOp, x: &RasterImage) -> Result<f64> {
    let fx = op.apply(x)?;
    x.linf_distance(&fx)
}
