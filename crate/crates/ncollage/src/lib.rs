//! Image coding by contractive self-reference.
//!
//! An image is represented not by its pixels but by an operator that maps
//! images to images: each small *range* cell is predicted from pooled
//! *domain* cells of the same image (plus optional learned patches) through
//! a convex mix of bounded affine maps. When the operator contracts under
//! the sup norm, it has a unique fixed point, and decoding is just iterating
//! the operator from any starting image. Because the operator is
//! resolution-free, the same code also decodes at integer multiples of the
//! encoded size.
//!
//! The crate provides:
//!
//! * [`raster`] — planar float images, PNM I/O, partitions, pooled domain
//!   banks and their rotation/negation augmentations;
//! * [`collage`] / [`pifs`] — the mixture operator and the classic
//!   single-domain search operator;
//! * [`solver`] — fixed-point decoding (iterative and closed-form), the
//!   contraction certificate, and polyphase magnified decoding;
//! * [`encode`] — exhaustive search, joint ridge regression, and gradient
//!   refinement encoders;
//! * [`codec`] — quantization, bitstream container, and rate accounting;
//! * [`dct`] / [`metrics`] / [`bench`] — the DC-only transform baseline,
//!   PSNR, and the comparison harness.

pub mod bench;
pub mod codec;
pub mod collage;
pub mod dct;
pub mod encode;
pub mod error;
pub mod metrics;
pub mod pifs;
pub mod raster;
pub mod solver;

pub use bench::{run_bench, BenchConfig, BenchMethod, BenchReport, BenchRow, ImageMeta};
pub use codec::{
    bpp_collage, bpp_pifs, collage_rate_formula, quantize_code, BppBreakdown, Code,
    CodeContainer, CollageRate, PifsRate, QuantizationSpec,
};
pub use collage::{surrogate_loss, AuxSource, CollageCode, LipschitzReport};
pub use dct::{block_dct_decode, block_dct_encode, dct_bpp, DctCode};
pub use encode::{
    encode_blockwise, encode_collage_gd, encode_collage_ls, encode_pifs, fractalize_encode,
    gd_initial_parameters, gd_objective, ls_affine_match, AffineFit, EncodeMethod, EncodeReport,
    EncoderConfig, GdParameters, GdReport,
};
pub use error::{Error, Result};
pub use metrics::{mse, psnr};
pub use pifs::{PifsCode, PifsEntry};
pub use raster::{PartitionScheme, RasterImage};
pub use solver::{
    ct_bound, decode, decode_magnified, CtBound, DecodeInit, DecodeReport, FixedPointOp,
    SolveConfig, SolveMode,
};
