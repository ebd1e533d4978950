//! Encoders: fit a code to an image by minimizing the collage surrogate
//! `||x - F(x)||^2` instead of the (intractable) attractor error.
//!
//! Three fitting paths, in increasing cost:
//!
//! * [`encode_pifs`] — classic hard search: per range cell, exhaustively try
//!   every pooled (optionally augmented) domain under the closed-form affine
//!   fit and keep the best address.
//! * [`encode_collage_ls`] — per range cell, one ridge regression over *all*
//!   candidate cells at once, then a factorization of the joint coefficients
//!   into simplex weights and bounded contrasts.
//! * [`encode_collage_gd`] — full-batch gradient descent on a smooth
//!   reparameterization (softmax weights, tanh contrasts, free offsets and
//!   aux pixels), warm-started from another code.
//!
//! All paths parallelize over range cells or blocks; results are
//! byte-identical for any thread count because every cell is solved
//! independently and reductions run in index order.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::codec::Code;
use crate::collage::{surrogate_loss, AuxSource, CollageCode};
use crate::error::{Error, Result};
use crate::pifs::{PifsCode, PifsEntry};
use crate::raster::{
    augment_domains, extract_domains, partition_ranges, read_range, rotate_cell, PartitionScheme,
    RasterImage,
};

/// Knobs shared by every encoder.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Search/regress over the 8 augmented variants of each domain.
    pub use_augmentations: bool,
    /// Contrast cap, strictly inside `(0, 1)`; keeps every emitted code
    /// contractive by construction.
    pub a_max: f64,
    /// Ridge weight on the joint regression coefficients (offsets are never
    /// penalized) and L2 weight on the gradient-path parameters.
    pub ridge_lambda: f64,
    /// Gradient refinement steps; 0 disables the gradient path.
    pub gd_steps: usize,
    /// Initial gradient step size.
    pub gd_rate: f64,
    /// Auxiliary learned patches for the collage paths.
    pub aux_count: usize,
    /// Seed for auxiliary patch initialization noise.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            use_augmentations: false,
            a_max: 0.999,
            ridge_lambda: 1e-4,
            gd_steps: 200,
            gd_rate: 0.05,
            aux_count: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if !(self.a_max > 0.0 && self.a_max < 1.0) {
            return Err(Error::Argument(format!(
                "a_max must lie in (0, 1), got {}",
                self.a_max
            )));
        }
        if self.ridge_lambda < 0.0 || !self.ridge_lambda.is_finite() {
            return Err(Error::Argument(format!(
                "ridge_lambda must be finite and >= 0, got {}",
                self.ridge_lambda
            )));
        }
        if self.gd_rate.is_nan() || self.gd_rate <= 0.0 {
            return Err(Error::Argument(format!("gd_rate must be positive, got {}", self.gd_rate)));
        }
        Ok(())
    }
}

/// Result of one closed-form affine fit `r ~ a * d + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    /// Sum of squared errors at the fit.
    pub residual: f64,
}

/// Least-squares contrast/offset for predicting `range` from `domain`,
/// with the contrast clamped to `[-a_max, a_max]`. A constant domain gets
/// `a = 0` (the offset alone is optimal).
pub fn ls_affine_match(domain: &[f64], range: &[f64], a_max: f64) -> Result<AffineFit> {
    if domain.len() != range.len() || domain.is_empty() {
        return Err(Error::Shape(format!(
            "domain has {} samples, range has {}",
            domain.len(),
            range.len()
        )));
    }
    if !(a_max > 0.0 && a_max < 1.0) {
        return Err(Error::Argument(format!("a_max must lie in (0, 1), got {a_max}")));
    }
    let n = domain.len() as f64;
    let md = domain.iter().sum::<f64>() / n;
    let mr = range.iter().sum::<f64>() / n;
    let mut var = 0.0;
    let mut cov = 0.0;
    for (&d, &r) in domain.iter().zip(range) {
        var += (d - md) * (d - md);
        cov += (d - md) * (r - mr);
    }
    let a = if var == 0.0 { 0.0 } else { (cov / var).clamp(-a_max, a_max) };
    let b = mr - a * md;
    let residual = domain
        .iter()
        .zip(range)
        .map(|(&d, &r)| {
            let e = a * d + b - r;
            e * e
        })
        .sum();
    Ok(AffineFit { a, b, residual })
}

/// Diagnostics common to the non-iterative encoders.
#[derive(Debug, Clone)]
pub struct EncodeReport {
    /// `||x - F(x)||^2` of the emitted code.
    pub surrogate_loss: f64,
    /// Range cells solved through the singular-fallback factorization
    /// (ridge path only; 0 means the primary factorization succeeded).
    pub ls_fallbacks: usize,
}

// ---------------------------------------------------------------------------
// Hard-assignment search
// ---------------------------------------------------------------------------

/// Exhaustive per-range search over every pooled (augmented) domain cell.
///
/// Candidates are scanned in `(domain, augmentation)` order and replaced only
/// on strictly smaller residual, so ties resolve to the lowest address and
/// the result is independent of thread count.
pub fn encode_pifs(
    x: &RasterImage,
    scheme: &PartitionScheme,
    cfg: &EncoderConfig,
) -> Result<(PifsCode, EncodeReport)> {
    cfg.validate()?;
    scheme.validate_for(x.width(), x.height())?;
    let bank = extract_domains(x, scheme)?;
    let bank = if cfg.use_augmentations { augment_domains(&bank) } else { bank };
    let ranges = partition_ranges(x.width(), x.height(), x.channels(), scheme)?;
    let fits: Vec<(PifsEntry, f64)> = ranges
        .par_iter()
        .map(|r| {
            let target = read_range(x, r, scheme.range_size);
            let mut best: Option<(PifsEntry, f64)> = None;
            for (cell, prov) in bank.cells.iter().zip(&bank.provenance) {
                let fit = ls_affine_match(cell, &target, cfg.a_max)
                    .expect("bank cells match range size");
                if best.as_ref().is_none_or(|(_, r0)| fit.residual < *r0) {
                    best = Some((
                        PifsEntry {
                            domain: prov.domain,
                            augmentation: prov.augmentation,
                            a: fit.a,
                            b: fit.b,
                        },
                        fit.residual,
                    ));
                }
            }
            best.expect("bank is never empty")
        })
        .collect();
    let surrogate_loss = fits.iter().map(|(_, r)| r).sum();
    let code = PifsCode {
        width: x.width(),
        height: x.height(),
        channels: x.channels(),
        scheme: *scheme,
        augmented: cfg.use_augmentations,
        entries: fits.into_iter().map(|(e, _)| e).collect(),
    };
    Ok((code, EncodeReport { surrogate_loss, ls_fallbacks: 0 }))
}

// ---------------------------------------------------------------------------
// Joint ridge regression
// ---------------------------------------------------------------------------

/// Factor joint coefficients `c` into `(gamma, a)` rows: weights are the
/// normalized magnitudes, all contrasts share the magnitude `sum |c|`
/// (clamped to `a_max`) with the sign of their coefficient. The products
/// `gamma * a` reproduce `c` exactly whenever `sum |c| <= a_max`.
fn factorize_row(c: &[f64], a_max: f64) -> (Vec<f64>, Vec<f64>) {
    let p = c.len();
    let s: f64 = c.iter().map(|v| v.abs()).sum();
    if s == 0.0 {
        return (vec![1.0 / p as f64; p], vec![0.0; p]);
    }
    let mag = s.min(a_max);
    let gamma: Vec<f64> = c.iter().map(|v| v.abs() / s).collect();
    let a = c
        .iter()
        .map(|v| if *v == 0.0 { 0.0 } else { v.signum() * mag })
        .collect();
    (gamma, a)
}

/// Shared ridge solve over a fixed candidate cell set. The Gram matrix is
/// identical for every range cell, so it is factored once and reused for all
/// `k` right-hand sides.
fn collage_ls_over_cells(
    x: &RasterImage,
    scheme: &PartitionScheme,
    cells: &[Vec<f64>],
    n_domains: usize,
    augmented: bool,
    aux: AuxSource,
    cfg: &EncoderConfig,
) -> Result<(CollageCode, EncodeReport)> {
    let p = cells.len();
    let len = scheme.range_size * scheme.range_size;
    let ranges = partition_ranges(x.width(), x.height(), x.channels(), scheme)?;

    // Normal matrix of the design [cells | 1], ridge on the cell block only.
    let build_gram = |lambda: f64| -> DMatrix<f64> {
        let mut g = DMatrix::<f64>::zeros(p + 1, p + 1);
        for i in 0..p {
            for j in i..p {
                let dot: f64 = cells[i].iter().zip(&cells[j]).map(|(a, b)| a * b).sum();
                g[(i, j)] = dot;
                g[(j, i)] = dot;
            }
            g[(i, i)] += lambda;
            let s: f64 = cells[i].iter().sum();
            g[(i, p)] = s;
            g[(p, i)] = s;
        }
        g[(p, p)] = len as f64;
        g
    };

    let mut fallback = false;
    let chol = match Cholesky::new(build_gram(cfg.ridge_lambda)) {
        Some(c) => c,
        None => {
            // Singular normal matrix (e.g. duplicate candidates at lambda 0):
            // retry with a tiny documented ridge floor.
            fallback = true;
            Cholesky::new(build_gram(cfg.ridge_lambda.max(1e-8))).ok_or_else(|| {
                Error::Numerical("normal matrix not SPD even with fallback ridge".into())
            })?
        }
    };

    struct RowFit {
        gamma: Vec<f64>,
        a: Vec<f64>,
        b: f64,
    }

    let rows: Vec<RowFit> = ranges
        .par_iter()
        .map(|r| {
            let target = read_range(x, r, scheme.range_size);
            let mut rhs = DVector::<f64>::zeros(p + 1);
            for (i, cell) in cells.iter().enumerate() {
                rhs[i] = cell.iter().zip(&target).map(|(a, b)| a * b).sum();
            }
            rhs[p] = target.iter().sum();
            let sol = chol.solve(&rhs);
            let (gamma, a) = factorize_row(&sol.as_slice()[..p], cfg.a_max);
            RowFit { gamma, a, b: sol[p] }
        })
        .collect();

    let k = ranges.len();
    let mut gamma = Vec::with_capacity(k * p);
    let mut a = Vec::with_capacity(k * p);
    let mut b = Vec::with_capacity(k);
    for row in &rows {
        gamma.extend_from_slice(&row.gamma);
        a.extend_from_slice(&row.a);
        b.push(row.b);
    }
    let code = CollageCode {
        width: x.width(),
        height: x.height(),
        channels: x.channels(),
        scheme: *scheme,
        augmented,
        k,
        n: n_domains,
        v: p - n_domains,
        gamma,
        a,
        b,
        aux,
    };
    code.validate()?;
    let surrogate = surrogate_loss(&code, x)?;
    Ok((
        code,
        EncodeReport {
            surrogate_loss: surrogate,
            ls_fallbacks: if fallback { k } else { 0 },
        },
    ))
}

/// Mean range cell of the image (pixelwise average over all range cells).
fn mean_range(x: &RasterImage, scheme: &PartitionScheme) -> Result<Vec<f64>> {
    let ranges = partition_ranges(x.width(), x.height(), x.channels(), scheme)?;
    let len = scheme.range_size * scheme.range_size;
    let mut acc = vec![0.0; len];
    for r in &ranges {
        for (o, v) in acc.iter_mut().zip(read_range(x, r, scheme.range_size)) {
            *o += v;
        }
    }
    let inv = 1.0 / ranges.len() as f64;
    for o in &mut acc {
        *o *= inv;
    }
    Ok(acc)
}

fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    lo + u * (hi - lo)
}

/// Fresh auxiliary patches: the mean range cell plus seeded uniform noise.
fn init_aux_patches(
    x: &RasterImage,
    scheme: &PartitionScheme,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let base = mean_range(x, scheme)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| base.iter().map(|&v| v + uniform(&mut rng, -0.05, 0.05)).collect())
        .collect())
}

/// Joint closed-form fit: per range cell, ridge-regress the target on every
/// pooled (optionally augmented) domain cell plus `aux_count` learned patches
/// initialized from the image statistics, then factor into a valid code.
pub fn encode_collage_ls(
    x: &RasterImage,
    scheme: &PartitionScheme,
    cfg: &EncoderConfig,
) -> Result<(CollageCode, EncodeReport)> {
    cfg.validate()?;
    scheme.validate_for(x.width(), x.height())?;
    let bank = extract_domains(x, scheme)?;
    let bank = if cfg.use_augmentations { augment_domains(&bank) } else { bank };
    let n_domains = bank.len();
    let mut cells = bank.cells;
    let patches = init_aux_patches(x, scheme, cfg.aux_count, cfg.seed)?;
    cells.extend(patches.iter().cloned());
    collage_ls_over_cells(
        x,
        scheme,
        &cells,
        n_domains,
        cfg.use_augmentations,
        AuxSource::Patches(patches),
        cfg,
    )
}

// ---------------------------------------------------------------------------
// Gradient refinement
// ---------------------------------------------------------------------------

/// Gradient-path diagnostics.
#[derive(Debug, Clone)]
pub struct GdReport {
    pub surrogate_initial: f64,
    pub surrogate_final: f64,
    /// Regularized objective (surrogate + L2 on logits/preactivations/offsets).
    pub loss_initial: f64,
    pub loss_final: f64,
    pub steps_taken: usize,
    pub step_halvings: usize,
}

/// Smooth parameterization of a collage code: `gamma = softmax(logits)` per
/// row, `a = a_max * tanh(alpha)`, free offsets, free aux pixels. Gradient
/// vectors share this layout (one slot per parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct GdParameters {
    /// `k * columns` weight logits, row-major.
    pub logits: Vec<f64>,
    /// `k * columns` contrast preactivations, row-major.
    pub alphas: Vec<f64>,
    /// One offset per range.
    pub offsets: Vec<f64>,
    /// Flattened `v * range_size^2` patch pixels; empty for rotation aux.
    pub aux_pixels: Vec<f64>,
}

impl GdParameters {
    fn axpy(&self, step: f64, g: &GdParameters) -> GdParameters {
        let sub = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a - step * b).collect();
        GdParameters {
            logits: sub(&self.logits, &g.logits),
            alphas: sub(&self.alphas, &g.alphas),
            offsets: sub(&self.offsets, &g.offsets),
            aux_pixels: sub(&self.aux_pixels, &g.aux_pixels),
        }
    }
}

/// Everything fixed during one gradient run.
struct GdProblem {
    /// Domain cells of `x` (post-augmentation) plus, for rotation aux, the
    /// three rotation cells. Patch-aux columns live in the parameters.
    fixed_cells: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    k: usize,
    p: usize,
    v_patches: usize, // patch-aux columns (0 for rotation aux)
    len: usize,
    a_max: f64,
    lambda: f64,
}

impl GdProblem {
    fn softmax_row(&self, logits: &[f64], row: usize) -> Vec<f64> {
        let l = &logits[row * self.p..(row + 1) * self.p];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for v in &mut e {
            *v /= s;
        }
        e
    }

    /// Loss, surrogate part and full gradient in one pass.
    fn eval(&self, params: &GdParameters) -> (f64, f64, GdParameters) {
        struct RowOut {
            surrogate: f64,
            dlogits: Vec<f64>,
            dalphas: Vec<f64>,
            doffset: f64,
            daux: Vec<f64>,
        }
        let rows: Vec<RowOut> = (0..self.k)
            .into_par_iter()
            .map(|row| {
                let gamma = self.softmax_row(&params.logits, row);
                let alphas = &params.alphas[row * self.p..(row + 1) * self.p];
                let tanhs: Vec<f64> = alphas.iter().map(|v| v.tanh()).collect();
                let a: Vec<f64> = tanhs.iter().map(|t| self.a_max * t).collect();
                let target = &self.targets[row];
                // Predicted cell.
                let mut pred = vec![params.offsets[row]; self.len];
                let col = |j: usize, cell: &[f64], pred: &mut [f64]| {
                    let w = gamma[j] * a[j];
                    if w != 0.0 {
                        for (o, &cv) in pred.iter_mut().zip(cell) {
                            *o += w * cv;
                        }
                    }
                };
                for (j, cell) in self.fixed_cells.iter().enumerate() {
                    col(j, cell, &mut pred);
                }
                for vp in 0..self.v_patches {
                    let j = self.fixed_cells.len() + vp;
                    let cell = &params.aux_pixels[vp * self.len..(vp + 1) * self.len];
                    col(j, cell, &mut pred);
                }
                // Errors and per-column inner products g_j = 2 <e, cell_j>.
                let err: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
                let surrogate: f64 = err.iter().map(|e| e * e).sum();
                let mut g = vec![0.0; self.p];
                for (j, cell) in self.fixed_cells.iter().enumerate() {
                    g[j] = 2.0 * err.iter().zip(cell).map(|(e, c)| e * c).sum::<f64>();
                }
                for vp in 0..self.v_patches {
                    let j = self.fixed_cells.len() + vp;
                    let cell = &params.aux_pixels[vp * self.len..(vp + 1) * self.len];
                    g[j] = 2.0 * err.iter().zip(cell).map(|(e, c)| e * c).sum::<f64>();
                }
                // Chain rule through the reparameterizations.
                let h: Vec<f64> = g.iter().zip(&a).map(|(gj, aj)| gj * aj).collect();
                let hbar: f64 = h.iter().zip(&gamma).map(|(hj, sj)| hj * sj).sum();
                let dlogits: Vec<f64> =
                    gamma.iter().zip(&h).map(|(sj, hj)| sj * (hj - hbar)).collect();
                let dalphas: Vec<f64> = (0..self.p)
                    .map(|j| g[j] * gamma[j] * self.a_max * (1.0 - tanhs[j] * tanhs[j]))
                    .collect();
                let doffset: f64 = 2.0 * err.iter().sum::<f64>();
                let mut daux = vec![0.0; self.v_patches * self.len];
                for vp in 0..self.v_patches {
                    let j = self.fixed_cells.len() + vp;
                    let w = gamma[j] * a[j];
                    for (o, e) in daux[vp * self.len..(vp + 1) * self.len].iter_mut().zip(&err) {
                        *o = 2.0 * e * w;
                    }
                }
                RowOut { surrogate, dlogits, dalphas, doffset, daux }
            })
            .collect();

        // Deterministic reduction in row order.
        let mut surrogate = 0.0;
        let mut grads = GdParameters {
            logits: vec![0.0; self.k * self.p],
            alphas: vec![0.0; self.k * self.p],
            offsets: vec![0.0; self.k],
            aux_pixels: vec![0.0; self.v_patches * self.len],
        };
        for (row, out) in rows.iter().enumerate() {
            surrogate += out.surrogate;
            grads.logits[row * self.p..(row + 1) * self.p].copy_from_slice(&out.dlogits);
            grads.alphas[row * self.p..(row + 1) * self.p].copy_from_slice(&out.dalphas);
            grads.offsets[row] = out.doffset;
            for (o, d) in grads.aux_pixels.iter_mut().zip(&out.daux) {
                *o += d;
            }
        }
        // L2 regularization on logits, preactivations and offsets (aux pixels
        // are unregularized image content).
        let reg: f64 = self.lambda
            * (params.logits.iter().map(|v| v * v).sum::<f64>()
                + params.alphas.iter().map(|v| v * v).sum::<f64>()
                + params.offsets.iter().map(|v| v * v).sum::<f64>());
        let two_lambda = 2.0 * self.lambda;
        for (g, p) in grads.logits.iter_mut().zip(&params.logits) {
            *g += two_lambda * p;
        }
        for (g, p) in grads.alphas.iter_mut().zip(&params.alphas) {
            *g += two_lambda * p;
        }
        for (g, p) in grads.offsets.iter_mut().zip(&params.offsets) {
            *g += two_lambda * p;
        }
        (surrogate + reg, surrogate, grads)
    }

    fn code_from(
        &self,
        params: &GdParameters,
        template: &CollageCode,
    ) -> CollageCode {
        let mut gamma = Vec::with_capacity(self.k * self.p);
        let mut a = Vec::with_capacity(self.k * self.p);
        for row in 0..self.k {
            gamma.extend(self.softmax_row(&params.logits, row));
            a.extend(
                params.alphas[row * self.p..(row + 1) * self.p]
                    .iter()
                    .map(|v| self.a_max * v.tanh()),
            );
        }
        let aux = if self.v_patches > 0 {
            AuxSource::Patches(
                (0..self.v_patches)
                    .map(|vp| params.aux_pixels[vp * self.len..(vp + 1) * self.len].to_vec())
                    .collect(),
            )
        } else {
            template.aux.clone()
        };
        CollageCode {
            gamma,
            a,
            b: params.offsets.clone(),
            aux,
            ..template.clone()
        }
    }
}

/// Build the fixed problem data and the initial parameters from a code.
fn gd_setup(
    x: &RasterImage,
    init: &CollageCode,
    cfg: &EncoderConfig,
) -> Result<(GdProblem, GdParameters)> {
    init.validate()?;
    if x.dims() != (init.width, init.height, init.channels) {
        return Err(Error::Shape(format!(
            "init code built for {:?}, image is {:?}",
            (init.width, init.height, init.channels),
            x.dims()
        )));
    }
    let len = init.scheme.range_size * init.scheme.range_size;
    let mut fixed_cells = {
        let bank = extract_domains(x, &init.scheme)?;
        let bank = if init.augmented { augment_domains(&bank) } else { bank };
        bank.cells
    };
    let v_patches = match &init.aux {
        AuxSource::Patches(ps) => ps.len(),
        AuxSource::DomainRotations => {
            let first = fixed_cells[0].clone();
            for q in 1..=3u8 {
                fixed_cells.push(rotate_cell(&first, init.scheme.range_size, q));
            }
            0
        }
    };
    let ranges = partition_ranges(x.width(), x.height(), x.channels(), &init.scheme)?;
    let targets: Vec<Vec<f64>> =
        ranges.iter().map(|r| read_range(x, r, init.scheme.range_size)).collect();
    let p = init.columns();
    let problem = GdProblem {
        fixed_cells,
        targets,
        k: init.k,
        p,
        v_patches,
        len,
        a_max: cfg.a_max,
        lambda: cfg.ridge_lambda,
    };
    Ok((problem, gd_initial_parameters(init, cfg)))
}

/// Map a collage code to the smooth parameters that reproduce it: logits are
/// log-weights (so softmax recovers `gamma`), preactivations are
/// `atanh(a / a_max)` (clamped inside the open interval), offsets copy over,
/// and patch aux pixels are flattened in order. Rotation aux contributes no
/// parameters.
pub fn gd_initial_parameters(code: &CollageCode, cfg: &EncoderConfig) -> GdParameters {
    let aux_pixels = match &code.aux {
        AuxSource::Patches(ps) => {
            let mut flat = Vec::with_capacity(ps.iter().map(Vec::len).sum());
            for p in ps {
                flat.extend_from_slice(p);
            }
            flat
        }
        AuxSource::DomainRotations => Vec::new(),
    };
    GdParameters {
        logits: code.gamma.iter().map(|&g| g.max(1e-12).ln()).collect(),
        alphas: code
            .a
            .iter()
            .map(|&a| {
                let t = (a / cfg.a_max).clamp(-(1.0 - 1e-12), 1.0 - 1e-12);
                t.atanh()
            })
            .collect(),
        offsets: code.b.clone(),
        aux_pixels,
    }
}

/// Evaluate the regularized refinement objective and its analytic gradient at
/// an arbitrary parameter point. The problem (targets, domain cells, arity) is
/// rebuilt from `x` and `template` exactly as the refinement loop does; only
/// the numbers in `params` vary. Returns `(loss, surrogate, gradient)`, where
/// the gradient shares the parameter layout.
pub fn gd_objective(
    x: &RasterImage,
    template: &CollageCode,
    cfg: &EncoderConfig,
    params: &GdParameters,
) -> Result<(f64, f64, GdParameters)> {
    cfg.validate()?;
    let (problem, reference) = gd_setup(x, template, cfg)?;
    let want = [
        ("logits", reference.logits.len(), params.logits.len()),
        ("alphas", reference.alphas.len(), params.alphas.len()),
        ("offsets", reference.offsets.len(), params.offsets.len()),
        ("aux pixels", reference.aux_pixels.len(), params.aux_pixels.len()),
    ];
    for (name, expected, got) in want {
        if expected != got {
            return Err(Error::Shape(format!(
                "parameter vector {name} has {got} entries, problem expects {expected}"
            )));
        }
    }
    Ok(problem.eval(params))
}

/// Refine a code by full-batch gradient descent on the regularized surrogate
/// with a monotone backtracking safeguard: on any objective increase the step
/// is halved (at most 20 times per step, and it stays halved). The returned
/// code is the best-surrogate iterate seen, so its surrogate loss never
/// exceeds the init's.
pub fn encode_collage_gd(
    x: &RasterImage,
    init: &CollageCode,
    cfg: &EncoderConfig,
) -> Result<(CollageCode, GdReport)> {
    cfg.validate()?;
    let (problem, mut params) = gd_setup(x, init, cfg)?;
    let (mut loss, mut surrogate, mut grads) = problem.eval(&params);
    let loss_initial = loss;
    let surrogate_initial = surrogate;
    let mut best_code = problem.code_from(&params, init);
    let mut best_surrogate = surrogate;
    let mut report = GdReport {
        surrogate_initial,
        surrogate_final: surrogate,
        loss_initial,
        loss_final: loss,
        steps_taken: 0,
        step_halvings: 0,
    };
    if cfg.gd_steps == 0 {
        return Ok((best_code, report));
    }
    let mut step = cfg.gd_rate;
    'outer: for _ in 0..cfg.gd_steps {
        let mut halvings_here = 0;
        loop {
            let cand = params.axpy(step, &grads);
            let (l, s, g) = problem.eval(&cand);
            if l.is_finite() && l <= loss {
                params = cand;
                loss = l;
                surrogate = s;
                grads = g;
                report.steps_taken += 1;
                if surrogate < best_surrogate {
                    best_surrogate = surrogate;
                    best_code = problem.code_from(&params, init);
                }
                break;
            }
            step *= 0.5;
            halvings_here += 1;
            report.step_halvings += 1;
            if halvings_here > 20 {
                // No descent direction at any reachable step size: stop.
                break 'outer;
            }
        }
    }
    report.surrogate_final = best_surrogate;
    report.loss_final = loss;
    Ok((best_code, report))
}

// ---------------------------------------------------------------------------
// Single-domain fractal fitting
// ---------------------------------------------------------------------------

/// Fit a square single-channel image with one whole-image domain plus its
/// three rotations as auxiliary columns, then refine by gradient descent.
///
/// The init is the better (by surrogate) of the joint ridge fit and the
/// offsets-only code, so the refined code never does worse than per-range
/// means.
pub fn fractalize_encode(
    x: &RasterImage,
    range_size: usize,
    cfg: &EncoderConfig,
) -> Result<(CollageCode, GdReport)> {
    cfg.validate()?;
    if x.width() != x.height() || x.channels() != 1 {
        return Err(Error::Argument(format!(
            "fractal fitting expects a square single-channel image, got {}x{}x{}",
            x.width(),
            x.height(),
            x.channels()
        )));
    }
    let scheme = PartitionScheme::new(range_size, x.width(), x.width())?;
    scheme.validate_for(x.width(), x.height())?;
    let bank = extract_domains(x, &scheme)?;
    debug_assert_eq!(bank.len(), 1);
    let mut cells = bank.cells;
    let whole = cells[0].clone();
    for q in 1..=3u8 {
        cells.push(rotate_cell(&whole, range_size, q));
    }
    let (ls_code, ls_report) =
        collage_ls_over_cells(x, &scheme, &cells, 1, false, AuxSource::DomainRotations, cfg)?;

    // Offsets-only competitor: a = 0 everywhere, b = per-range mean.
    let ranges = partition_ranges(x.width(), x.height(), 1, &scheme)?;
    let len = range_size * range_size;
    let p = 4;
    let means: Vec<f64> = ranges
        .iter()
        .map(|r| read_range(x, r, range_size).iter().sum::<f64>() / len as f64)
        .collect();
    let b_only = CollageCode {
        width: x.width(),
        height: x.height(),
        channels: 1,
        scheme,
        augmented: false,
        k: ranges.len(),
        n: 1,
        v: 3,
        gamma: vec![1.0 / p as f64; ranges.len() * p],
        a: vec![0.0; ranges.len() * p],
        b: means,
        aux: AuxSource::DomainRotations,
    };
    let b_only_surrogate = surrogate_loss(&b_only, x)?;
    let init = if ls_report.surrogate_loss <= b_only_surrogate { ls_code } else { b_only };
    encode_collage_gd(x, &init, cfg)
}

// ---------------------------------------------------------------------------
// Blockwise driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMethod {
    Pifs,
    /// Ridge fit, then gradient refinement when `gd_steps > 0`.
    Collage,
}

/// Split the image into independent square tiles and encode each one with
/// the same scheme and config. Blocks are enumerated row-major; each block's
/// code is identical to encoding that tile in isolation.
pub fn encode_blockwise(
    x: &RasterImage,
    block_size: usize,
    scheme: &PartitionScheme,
    cfg: &EncoderConfig,
    method: EncodeMethod,
) -> Result<(Vec<Code>, EncodeReport)> {
    cfg.validate()?;
    if block_size == 0
        || !(x.width().is_multiple_of(block_size) && x.height().is_multiple_of(block_size))
    {
        return Err(Error::Partition(format!(
            "block size {block_size} does not tile {}x{}",
            x.width(),
            x.height()
        )));
    }
    scheme.validate_for(block_size, block_size)?;
    let bx = x.width() / block_size;
    let by = x.height() / block_size;
    let blocks: Vec<(usize, usize)> =
        (0..by).flat_map(|y| (0..bx).map(move |x| (x, y))).collect();
    let encoded: Vec<Result<(Code, f64)>> = blocks
        .par_iter()
        .map(|&(gx, gy)| {
            let tile = x.crop(gx * block_size, gy * block_size, block_size, block_size)?;
            match method {
                EncodeMethod::Pifs => {
                    let (code, rep) = encode_pifs(&tile, scheme, cfg)?;
                    Ok((Code::Pifs(code), rep.surrogate_loss))
                }
                EncodeMethod::Collage => {
                    let (ls, rep) = encode_collage_ls(&tile, scheme, cfg)?;
                    if cfg.gd_steps == 0 {
                        Ok((Code::Collage(ls), rep.surrogate_loss))
                    } else {
                        let (gd, gd_rep) = encode_collage_gd(&tile, &ls, cfg)?;
                        Ok((Code::Collage(gd), gd_rep.surrogate_final))
                    }
                }
            }
        })
        .collect();
    let mut codes = Vec::with_capacity(encoded.len());
    let mut surrogate = 0.0;
    for r in encoded {
        let (code, s) = r?;
        surrogate += s;
        codes.push(code);
    }
    Ok((codes, EncodeReport { surrogate_loss: surrogate, ls_fallbacks: 0 }))
}
