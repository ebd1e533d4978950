//! Fixed-point decoding of contractive image operators.
//!
//! Every code type implements [`FixedPointOp`]; decoding is just Banach
//! iteration `z <- F(z)` from an arbitrary start, stopped when the sup-norm
//! step falls under the tolerance. For small images a dense closed-form
//! solve of `(I - A) z = c` is available as an oracle path: the operator is
//! affine in `z`, so `A` can be probed column by column with basis images.
//!
//! The attractor error of an approximation `x` is bounded by its collage
//! error: `d(x, z*) <= d(x, F(x)) / (1 - L)` for any contraction with
//! Lipschitz bound `L < 1`. [`ct_bound`] evaluates that certificate.

use nalgebra::{DMatrix, DVector};

use crate::collage::LipschitzReport;
use crate::error::{Error, Result};
use crate::raster::RasterImage;

/// Largest sample count the dense closed-form path will accept.
pub const CLOSED_FORM_MAX_SAMPLES: usize = 4096;

/// An affine self-map of images with a computable contraction bound.
pub trait FixedPointOp: Sync {
    /// `(width, height, channels)` of the images the operator acts on.
    fn dims(&self) -> (usize, usize, usize);
    /// One application `F(z)`.
    fn apply(&self, z: &RasterImage) -> Result<RasterImage>;
    /// Sup-norm contraction estimate.
    fn lipschitz(&self) -> LipschitzReport;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    /// Banach fixed-point iteration.
    Iterate,
    /// Dense `(I - A) z = c` solve; only for small images.
    ClosedForm,
}

/// Starting image for the iteration.
#[derive(Debug, Clone)]
pub enum DecodeInit {
    Zeros,
    Constant(f64),
    Image(RasterImage),
}

#[derive(Debug, Clone)]
pub struct SolveConfig {
    pub mode: SolveMode,
    /// Stop when the sup-norm step drops below this.
    pub tolerance: f64,
    pub max_iters: usize,
    pub init: DecodeInit,
    /// Run anyway when the contraction bound is >= 1. The fixed point may
    /// not exist; the caller gets whatever the capped iteration produces.
    pub allow_noncontractive: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            mode: SolveMode::Iterate,
            tolerance: 1e-8,
            max_iters: 200,
            init: DecodeInit::Zeros,
            allow_noncontractive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeReport {
    pub iterations: usize,
    /// Sup-norm of the last step (iterative) or of the residual `F(z) - z`
    /// (closed form).
    pub final_step: f64,
    pub lipschitz_bound: f64,
    pub converged: bool,
}

fn starting_image(op: &dyn FixedPointOp, init: &DecodeInit) -> Result<RasterImage> {
    let (w, h, c) = op.dims();
    match init {
        DecodeInit::Zeros => RasterImage::new(w, h, c),
        DecodeInit::Constant(v) => RasterImage::constant(w, h, c, *v),
        DecodeInit::Image(img) => {
            if img.dims() != (w, h, c) {
                return Err(Error::Shape(format!(
                    "init image {:?} does not match operator {:?}",
                    img.dims(),
                    (w, h, c)
                )));
            }
            Ok(img.clone())
        }
    }
}

/// Decode the attractor of `op`.
///
/// Errors with a contractivity failure when the bound is >= 1 and the config
/// does not explicitly allow it.
pub fn decode(op: &dyn FixedPointOp, cfg: &SolveConfig) -> Result<(RasterImage, DecodeReport)> {
    let lip = op.lipschitz();
    if !lip.contractive && !cfg.allow_noncontractive {
        return Err(Error::Contractivity(format!(
            "operator bound {} >= 1; pass the override to decode anyway",
            lip.bound
        )));
    }
    match cfg.mode {
        SolveMode::Iterate => decode_iterate(op, cfg, lip.bound),
        SolveMode::ClosedForm => decode_closed_form(op, lip.bound),
    }
}

fn decode_iterate(
    op: &dyn FixedPointOp,
    cfg: &SolveConfig,
    lipschitz_bound: f64,
) -> Result<(RasterImage, DecodeReport)> {
    let mut z = starting_image(op, &cfg.init)?;
    let mut step = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let next = op.apply(&z)?;
        step = z.linf_distance(&next)?;
        z = next;
        iterations += 1;
        if step.is_nan() {
            return Err(Error::Numerical("iteration produced NaN".into()));
        }
        if step < cfg.tolerance {
            break;
        }
    }
    let converged = step < cfg.tolerance;
    Ok((z, DecodeReport { iterations, final_step: step, lipschitz_bound, converged }))
}

/// Probe the affine operator column by column and solve `(I - A) z = c`
/// densely. `c = F(0)`; column `j` of `A` is `F(e_j) - c`.
fn decode_closed_form(
    op: &dyn FixedPointOp,
    lipschitz_bound: f64,
) -> Result<(RasterImage, DecodeReport)> {
    let (w, h, ch) = op.dims();
    let m = w * h * ch;
    if m > CLOSED_FORM_MAX_SAMPLES {
        return Err(Error::Size(format!(
            "closed-form solve needs {m} x {m} dense storage; limit is {CLOSED_FORM_MAX_SAMPLES}"
        )));
    }
    let zero = RasterImage::new(w, h, ch)?;
    let c = op.apply(&zero)?;
    let mut system = DMatrix::<f64>::identity(m, m);
    let mut basis = zero;
    for j in 0..m {
        basis.as_mut_slice()[j] = 1.0;
        let fj = op.apply(&basis)?;
        basis.as_mut_slice()[j] = 0.0;
        for i in 0..m {
            // I - A
            system[(i, j)] -= fj.as_slice()[i] - c.as_slice()[i];
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("(I - A) is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("closed-form solution not finite".into()));
    }
    let z = RasterImage::from_vec(w, h, ch, sol.as_slice().to_vec())?;
    let residual = op.apply(&z)?.linf_distance(&z)?;
    Ok((
        z,
        DecodeReport { iterations: 0, final_step: residual, lipschitz_bound, converged: true },
    ))
}

/// Collage-error certificate for `x` against the attractor of `op`.
#[derive(Debug, Clone, Copy)]
pub struct CtBound {
    /// `||x - F(x)||_inf`.
    pub collage_error: f64,
    pub lipschitz_bound: f64,
    /// `collage_error / (1 - lipschitz_bound)`, an upper bound on the
    /// sup-norm distance from `x` to the attractor.
    pub bound: f64,
}

pub fn ct_bound(op: &dyn FixedPointOp, x: &RasterImage) -> Result<CtBound> {
    let lip = op.lipschitz();
    if !lip.contractive {
        return Err(Error::Contractivity(format!(
            "bound {} >= 1: certificate undefined",
            lip.bound
        )));
    }
    let collage_error = crate::collage::collage_error(op, x)?;
    Ok(CtBound {
        collage_error,
        lipschitz_bound: lip.bound,
        bound: collage_error / (1.0 - lip.bound),
    })
}

/// Decode at `scale` times the operator's native resolution.
///
/// The magnified image is assembled from `scale^2` polyphase sub-images, each
/// decoded independently with the *same* code: sub-image `(dy, dx)` fills the
/// output samples at `(y * scale + dy, x * scale + dx)`. `scale == 1` is
/// exactly [`decode`]. An init image may be given at either the native or the
/// magnified resolution; in the latter case each sub-image starts from its
/// own polyphase component.
pub fn decode_magnified(
    op: &dyn FixedPointOp,
    scale: usize,
    cfg: &SolveConfig,
) -> Result<(RasterImage, DecodeReport)> {
    if scale == 0 {
        return Err(Error::Argument("scale must be at least 1".into()));
    }
    if scale == 1 {
        return decode(op, cfg);
    }
    let (w, h, c) = op.dims();
    let mut out = RasterImage::new(w * scale, h * scale, c)?;
    let mut worst = DecodeReport {
        iterations: 0,
        final_step: 0.0,
        lipschitz_bound: op.lipschitz().bound,
        converged: true,
    };
    for dy in 0..scale {
        for dx in 0..scale {
            let sub_cfg = SolveConfig {
                init: sub_init(&cfg.init, op.dims(), scale, dx, dy)?,
                ..cfg.clone()
            };
            let (sub, rep) = decode(op, &sub_cfg)?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(ch, x * scale + dx, y * scale + dy, sub.get(ch, x, y));
                    }
                }
            }
            worst.iterations = worst.iterations.max(rep.iterations);
            worst.final_step = worst.final_step.max(rep.final_step);
            worst.converged &= rep.converged;
        }
    }
    Ok((out, worst))
}

fn sub_init(
    init: &DecodeInit,
    (w, h, c): (usize, usize, usize),
    scale: usize,
    dx: usize,
    dy: usize,
) -> Result<DecodeInit> {
    match init {
        DecodeInit::Image(g) if g.dims() == (w * scale, h * scale, c) => {
            let mut sub = RasterImage::new(w, h, c)?;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        sub.set(ch, x, y, g.get(ch, x * scale + dx, y * scale + dy));
                    }
                }
            }
            Ok(DecodeInit::Image(sub))
        }
        other => Ok(other.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collage::tests::tiny_code;
    use crate::collage::{AuxSource, CollageCode};
    use crate::raster::PartitionScheme;
    use approx::assert_abs_diff_eq;

    fn one_pixel_code(a: f64, b: f64) -> CollageCode {
        CollageCode {
            width: 1,
            height: 1,
            channels: 1,
            scheme: PartitionScheme::new(1, 1, 1).unwrap(),
            augmented: false,
            k: 1,
            n: 1,
            v: 0,
            gamma: vec![1.0],
            a: vec![a],
            b: vec![b],
            aux: AuxSource::Patches(vec![]),
        }
    }

    #[test]
    fn one_pixel_attractor_is_b_over_one_minus_a() {
        let code = one_pixel_code(0.5, 0.25);
        let cfg = SolveConfig { tolerance: 1e-12, max_iters: 500, ..Default::default() };
        let (z, rep) = decode(&code, &cfg).unwrap();
        assert_abs_diff_eq!(z.as_slice()[0], 0.5, epsilon = 1e-10);
        assert!(rep.converged);
        let (zc, _) = decode(&code, &SolveConfig { mode: SolveMode::ClosedForm, ..cfg }).unwrap();
        assert_abs_diff_eq!(zc.as_slice()[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn tiny_code_fixed_point_matches_hand_derivation() {
        // Mean mu* of the fixed point satisfies mu* = mean(a) mu* + mean(b),
        // so mu* = 0.05 / 0.5 = 0.1 and z*_i = a_i * 0.1 + b_i.
        let code = tiny_code();
        let want = [0.02, 0.04, 0.16, 0.18];
        let cfg = SolveConfig { tolerance: 1e-13, max_iters: 1000, ..Default::default() };
        let (z, rep) = decode(&code, &cfg).unwrap();
        for (got, want) in z.as_slice().iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-11);
        }
        assert!(rep.converged && rep.iterations < 1000);
        let (zc, repc) =
            decode(&code, &SolveConfig { mode: SolveMode::ClosedForm, ..cfg }).unwrap();
        for (got, want) in zc.as_slice().iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-14);
        }
        assert!(repc.final_step < 1e-14);
    }

    #[test]
    fn init_does_not_change_attractor() {
        let code = tiny_code();
        let cfg = |init| SolveConfig {
            tolerance: 1e-12,
            max_iters: 1000,
            init,
            ..Default::default()
        };
        let (z0, _) = decode(&code, &cfg(DecodeInit::Zeros)).unwrap();
        let (z1, _) = decode(&code, &cfg(DecodeInit::Constant(1.0))).unwrap();
        let noisy =
            RasterImage::from_vec(2, 2, 1, vec![9.0, -3.0, 0.5, 2.0]).unwrap();
        let (z2, _) = decode(&code, &cfg(DecodeInit::Image(noisy))).unwrap();
        assert!(z0.linf_distance(&z1).unwrap() < 1e-10);
        assert!(z0.linf_distance(&z2).unwrap() < 1e-10);
    }

    #[test]
    fn noncontractive_needs_override() {
        let mut code = one_pixel_code(0.5, 0.1);
        code.a = vec![1.0]; // row mass exactly 1: no contraction
        assert_eq!(code.lipschitz().bound, 1.0);
        let err = decode(&code, &SolveConfig::default());
        assert!(matches!(err, Err(Error::Contractivity(_))));
        let cfg = SolveConfig {
            allow_noncontractive: true,
            max_iters: 5,
            ..Default::default()
        };
        let (z, rep) = decode(&code, &cfg).unwrap();
        assert!(!rep.converged);
        // With a = 1 the map is z + b shifted each step: 5 iterations of +0.1.
        assert_abs_diff_eq!(z.as_slice()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ct_bound_is_tight_on_one_pixel_example() {
        let code = one_pixel_code(0.5, 0.25);
        let x = RasterImage::constant(1, 1, 1, 0.6).unwrap();
        let ct = ct_bound(&code, &x).unwrap();
        assert_abs_diff_eq!(ct.collage_error, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(ct.bound, 0.1, epsilon = 1e-12);
        // Attractor is 0.5, so the certificate is exactly tight here.
        assert_abs_diff_eq!((0.6f64 - 0.5).abs(), ct.bound, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_refuses_large_images() {
        let scheme = PartitionScheme::new(8, 72, 72).unwrap();
        let k = scheme.range_count(72, 72, 1);
        let code = CollageCode {
            width: 72,
            height: 72,
            channels: 1,
            scheme,
            augmented: false,
            k,
            n: 1,
            v: 0,
            gamma: vec![1.0; k],
            a: vec![0.1; k],
            b: vec![0.0; k],
            aux: AuxSource::Patches(vec![]),
        };
        let cfg = SolveConfig { mode: SolveMode::ClosedForm, ..Default::default() };
        assert!(matches!(decode(&code, &cfg), Err(Error::Size(_))));
    }

    #[test]
    fn magnified_scale_one_is_plain_decode() {
        let code = tiny_code();
        let cfg = SolveConfig::default();
        let (a, _) = decode(&code, &cfg).unwrap();
        let (b, _) = decode_magnified(&code, 1, &cfg).unwrap();
        assert_eq!(a, b); // bit-identical, same code path
    }

    #[test]
    fn magnified_subimages_equal_base_attractor() {
        let code = tiny_code();
        let cfg = SolveConfig { tolerance: 1e-12, max_iters: 2000, ..Default::default() };
        let (base, _) = decode(&code, &cfg).unwrap();
        let (mag, rep) = decode_magnified(&code, 2, &cfg).unwrap();
        assert!(rep.converged);
        assert_eq!(mag.dims(), (4, 4, 1));
        for dy in 0..2 {
            for dx in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        assert_abs_diff_eq!(
                            mag.get(0, x * 2 + dx, y * 2 + dy),
                            base.get(0, x, y),
                            epsilon = 1e-10
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn magnified_rejects_zero_scale() {
        let code = tiny_code();
        assert!(matches!(
            decode_magnified(&code, 0, &SolveConfig::default()),
            Err(Error::Argument(_))
        ));
    }
}
