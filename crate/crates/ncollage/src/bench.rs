//! Rate/quality/speed comparison harness.
//!
//! Runs each requested method on each input image, measures encode and
//! decode wall time on a monotonic clock (median over at least three runs,
//! since the work itself is deterministic), and reports rate from the
//! serialized payload accounting plus reconstruction quality against the
//! input. A method failure becomes a row with the `error` column populated
//! and the run continues. Rows sort by (image, method) and serialize to CSV
//! and JSON; the report also carries per-image metadata and a hash of the
//! full configuration so result files can be matched to the settings that
//! produced them.

use std::time::Instant;

use serde::Serialize;

use crate::codec::{Code, CodeContainer, QuantizationSpec};
use crate::dct::{block_dct_decode, block_dct_encode, dct_bpp};
use crate::encode::{
    encode_blockwise, encode_collage_gd, encode_collage_ls, encode_pifs, EncodeMethod,
    EncoderConfig,
};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::raster::{PartitionScheme, RasterImage};
use crate::solver::SolveConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    /// Exhaustive search over plain pooled domains.
    Pifs,
    /// Exhaustive search including rotated/negated domains.
    PifsAugmented,
    /// Ridge fit plus gradient refinement (honors the collage encoder config).
    Collage,
    /// DC-only block transform baseline.
    BlockDct,
}

impl BenchMethod {
    pub fn label(&self) -> &'static str {
        match self {
            BenchMethod::Pifs => "pifs",
            BenchMethod::PifsAugmented => "pifs-aug",
            BenchMethod::Collage => "collage",
            BenchMethod::BlockDct => "block-dct",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub methods: Vec<BenchMethod>,
    pub scheme: PartitionScheme,
    /// 0 encodes the whole image with one code.
    pub block_size: usize,
    /// Coefficient precision for collage containers.
    pub epsilon: u8,
    /// Patch size for the transform baseline.
    pub patch: usize,
    /// Settings for the search methods (augmentation toggled per method).
    pub pifs: EncoderConfig,
    /// Settings for the gradient-refined collage method.
    pub collage: EncoderConfig,
    pub solve: SolveConfig,
    /// Timing repeats per phase, at least 3; the median is reported.
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                BenchMethod::Pifs,
                BenchMethod::PifsAugmented,
                BenchMethod::Collage,
                BenchMethod::BlockDct,
            ],
            scheme: PartitionScheme::new(8, 16, 16).expect("static scheme is valid"),
            block_size: 0,
            epsilon: 3,
            patch: 16,
            pifs: EncoderConfig { aux_count: 0, ..EncoderConfig::default() },
            // The tighter contraction default keeps decodes fast for
            // gradient-trained codes.
            collage: EncoderConfig { a_max: 0.9, ..EncoderConfig::default() },
            solve: SolveConfig::default(),
            repeats: 3,
        }
    }
}

/// Identity and dimensions of one benchmarked input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageMeta {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// One (image, method) result. Field order is the CSV column order:
/// `image,method,bpp,psnr_db,encode_s,decode_s,error`. Metric fields are
/// empty when the method failed, and `error` says why.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub image: String,
    pub method: String,
    pub bpp: Option<f64>,
    pub psnr_db: Option<f64>,
    pub encode_s: Option<f64>,
    pub decode_s: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub images: Vec<ImageMeta>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| Error::Format(format!("cannot serialize row: {e}")))?;
        }
        let bytes =
            w.into_inner().map_err(|e| Error::Format(format!("cannot flush csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv is not utf-8: {e}")))
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(format!("cannot serialize: {e}")))
    }
}

/// 64-bit FNV-1a over a byte string.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn encoder_fingerprint(cfg: &EncoderConfig) -> String {
    format!(
        "aug={} a_max={} lambda={} gd_steps={} gd_rate={} aux={} seed={}",
        cfg.use_augmentations,
        cfg.a_max,
        cfg.ridge_lambda,
        cfg.gd_steps,
        cfg.gd_rate,
        cfg.aux_count,
        cfg.seed
    )
}

fn config_fingerprint(cfg: &BenchConfig) -> String {
    let methods: Vec<&str> = cfg.methods.iter().map(|m| m.label()).collect();
    let text = format!(
        "methods={methods:?} range={} domain={} stride={} block={} eps={} patch={} \
         pifs[{}] collage[{}] tol={} max_iters={} repeats={}",
        cfg.scheme.range_size,
        cfg.scheme.domain_size,
        cfg.scheme.domain_stride,
        cfg.block_size,
        cfg.epsilon,
        cfg.patch,
        encoder_fingerprint(&cfg.pifs),
        encoder_fingerprint(&cfg.collage),
        cfg.solve.tolerance,
        cfg.solve.max_iters,
        cfg.repeats
    );
    format!("{:016x}", fnv1a64(text.as_bytes()))
}

/// Run `f` `repeats` times, return the last result and the median duration
/// in seconds.
fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(repeats);
    let mut out = None;
    for _ in 0..repeats {
        let t0 = Instant::now();
        out = Some(f()?);
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("durations are finite"));
    Ok((out.expect("repeats >= 1"), times[times.len() / 2]))
}

/// Rate, quality and timing for one fractal method on one image.
fn measure_fractal(
    x: &RasterImage,
    cfg: &BenchConfig,
    encoder: &EncoderConfig,
    method: EncodeMethod,
) -> Result<(f64, f64, f64, f64)> {
    let (w, h, c) = x.dims();
    let quant = match method {
        EncodeMethod::Collage => Some(QuantizationSpec::new(cfg.epsilon)?),
        EncodeMethod::Pifs => None,
    };
    let (container, encode_s) = timed(cfg.repeats, || {
        let codes = if cfg.block_size == 0 {
            vec![match method {
                EncodeMethod::Pifs => Code::Pifs(encode_pifs(x, &cfg.scheme, encoder)?.0),
                EncodeMethod::Collage => {
                    let (ls, _) = encode_collage_ls(x, &cfg.scheme, encoder)?;
                    if encoder.gd_steps == 0 {
                        Code::Collage(ls)
                    } else {
                        Code::Collage(encode_collage_gd(x, &ls, encoder)?.0)
                    }
                }
            }]
        } else {
            encode_blockwise(x, cfg.block_size, &cfg.scheme, encoder, method)?.0
        };
        CodeContainer::new(w, h, c, cfg.block_size, codes, quant)
    })?;
    let ((z, _reports), decode_s) = timed(cfg.repeats, || container.decode(&cfg.solve))?;
    Ok((container.bpp().bpp, psnr(x, &z)?, encode_s, decode_s))
}

/// Rate, quality and timing for one method on one image.
fn measure(x: &RasterImage, cfg: &BenchConfig, method: BenchMethod) -> Result<(f64, f64, f64, f64)> {
    match method {
        BenchMethod::Pifs => measure_fractal(
            x,
            cfg,
            &EncoderConfig { use_augmentations: false, ..cfg.pifs.clone() },
            EncodeMethod::Pifs,
        ),
        BenchMethod::PifsAugmented => measure_fractal(
            x,
            cfg,
            &EncoderConfig { use_augmentations: true, ..cfg.pifs.clone() },
            EncodeMethod::Pifs,
        ),
        BenchMethod::Collage => measure_fractal(x, cfg, &cfg.collage, EncodeMethod::Collage),
        BenchMethod::BlockDct => {
            let (code, encode_s) = timed(cfg.repeats, || block_dct_encode(x, cfg.patch))?;
            let (z, decode_s) = timed(cfg.repeats, || block_dct_decode(&code))?;
            Ok((dct_bpp(x.dims().0, x.dims().1, x.dims().2, cfg.patch)?, psnr(x, &z)?, encode_s, decode_s))
        }
    }
}

/// Benchmark every configured method on every image. Images are identified
/// by the caller-supplied ids, which end up in the `image` column and the
/// report metadata.
pub fn run_bench(images: &[(String, RasterImage)], cfg: &BenchConfig) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(Error::Argument("no images to benchmark".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Argument("no methods selected".into()));
    }
    if cfg.repeats < 3 {
        return Err(Error::Argument("median timing needs at least 3 repeats".into()));
    }
    let mut metas = Vec::with_capacity(images.len());
    let mut rows = Vec::with_capacity(images.len() * cfg.methods.len());
    for (id, x) in images {
        let (width, height, channels) = x.dims();
        metas.push(ImageMeta { image: id.clone(), width, height, channels });
        for method in &cfg.methods {
            let row = match measure(x, cfg, *method) {
                Ok((bpp, psnr_db, encode_s, decode_s)) => BenchRow {
                    image: id.clone(),
                    method: method.label().to_owned(),
                    bpp: Some(bpp),
                    psnr_db: Some(psnr_db),
                    encode_s: Some(encode_s),
                    decode_s: Some(decode_s),
                    error: None,
                },
                Err(e) => BenchRow {
                    image: id.clone(),
                    method: method.label().to_owned(),
                    bpp: None,
                    psnr_db: None,
                    encode_s: None,
                    decode_s: None,
                    error: Some(e.to_string()),
                },
            };
            rows.push(row);
        }
    }
    metas.sort_by(|a, b| a.image.cmp(&b.image));
    rows.sort_by(|a, b| (&a.image, &a.method).cmp(&(&b.image, &b.method)));
    Ok(BenchReport { config_hash: config_fingerprint(cfg), images: metas, rows })
}
