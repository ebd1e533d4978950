//! Quantization, bit-level serialization and rate accounting.
//!
//! Codes leave the encoders with full-precision coefficients; this module
//! turns them into compact bitstreams and back:
//!
//! * Collage coefficients are stored *premultiplied*: each row keeps the
//!   products `gamma * a` plus one offset, all as fixed-point integers with
//!   `epsilon` decimal digits. Weights and contrasts are re-derived from the
//!   integers on load, so quantize → serialize → parse is lossless and the
//!   canonical (dequantized) code is the single source of truth.
//! * Per-tensor bit widths adapt to the largest magnitude actually present
//!   (sign bit plus just enough magnitude bits), which is how a strong ridge
//!   weight translates into a smaller stream.
//! * Classic search codes store one address per range (domain and
//!   augmentation combined) plus half-precision contrast/offset.
//!
//! The container format wraps one code, or a row-major grid of per-block
//! codes, behind a fixed header; payload length is computed from the header,
//! so truncated or padded files are rejected rather than misparsed.

use std::path::Path;

use half::f16;
use rayon::prelude::*;

use crate::collage::{AuxSource, CollageCode, LipschitzReport};
use crate::error::{Error, Result};
use crate::pifs::{PifsCode, PifsEntry};
use crate::raster::{PartitionScheme, RasterImage, AUGMENTATIONS};
use crate::solver::{decode, decode_magnified, DecodeReport, FixedPointOp, SolveConfig};

/// Fixed-point precision for collage coefficients: values are rounded to
/// `epsilon` decimal digits and clamped strictly inside the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantizationSpec {
    pub epsilon: u8,
}

impl QuantizationSpec {
    pub fn new(epsilon: u8) -> Result<Self> {
        if !(2..=5).contains(&epsilon) {
            return Err(Error::Argument(format!(
                "precision must be between 2 and 5 decimal digits, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn scale(&self) -> i64 {
        10i64.pow(self.epsilon as u32)
    }
}

/// Either kind of fitted code.
#[derive(Debug, Clone, PartialEq)]
pub enum Code {
    Collage(CollageCode),
    Pifs(PifsCode),
}

impl Code {
    pub fn validate(&self) -> Result<()> {
        match self {
            Code::Collage(c) => c.validate(),
            Code::Pifs(c) => c.validate(),
        }
    }
}

impl FixedPointOp for Code {
    fn dims(&self) -> (usize, usize, usize) {
        match self {
            Code::Collage(c) => c.dims(),
            Code::Pifs(c) => c.dims(),
        }
    }

    fn apply(&self, z: &RasterImage) -> Result<RasterImage> {
        match self {
            Code::Collage(c) => c.apply(z),
            Code::Pifs(c) => c.apply(z),
        }
    }

    fn lipschitz(&self) -> LipschitzReport {
        match self {
            Code::Collage(c) => c.lipschitz(),
            Code::Pifs(c) => c.lipschitz(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed-point quantization
// ---------------------------------------------------------------------------

/// Fixed-point payload of one collage code: row integers, then offset
/// integers.
type CodeInts = (Vec<i64>, Vec<i64>);

/// Premultiplied row integers and offset integers for one collage code.
///
/// Row masses are capped at `scale - 1` by decrementing the largest
/// magnitude (lowest index on ties) so the re-derived contrasts stay
/// strictly contractive after rounding.
fn collage_ints(code: &CollageCode, spec: &QuantizationSpec) -> CodeInts {
    let scale = spec.scale();
    let limit = scale - 1;
    let p = code.columns();
    let quant = |v: f64| -> i64 { (v * scale as f64).round().clamp(-(limit as f64), limit as f64) as i64 };
    let mut ints = Vec::with_capacity(code.k * p);
    for row in 0..code.k {
        let mut row_ints: Vec<i64> = (0..p)
            .map(|j| quant(code.gamma[row * p + j] * code.a[row * p + j]))
            .collect();
        let mut mass: i64 = row_ints.iter().map(|v| v.abs()).sum();
        while mass > limit {
            let (idx, _) = row_ints
                .iter()
                .enumerate()
                .max_by_key(|(i, v)| (v.abs(), std::cmp::Reverse(*i)))
                .expect("rows are never empty");
            row_ints[idx] -= row_ints[idx].signum();
            mass -= 1;
        }
        ints.extend(row_ints);
    }
    let offsets = code.b.iter().map(|&v| quant(v)).collect();
    (ints, offsets)
}

/// Rebuild a canonical collage code from its integers. Shared by the
/// quantizer and the parser so both produce bit-identical coefficients.
fn collage_from_ints(
    template: &CollageCode,
    ints: &[i64],
    offsets: &[i64],
    aux: AuxSource,
    spec: &QuantizationSpec,
) -> CollageCode {
    let scale = spec.scale() as f64;
    let p = template.columns();
    let mut gamma = Vec::with_capacity(template.k * p);
    let mut a = Vec::with_capacity(template.k * p);
    for row in 0..template.k {
        let row_ints = &ints[row * p..(row + 1) * p];
        let mass: i64 = row_ints.iter().map(|v| v.abs()).sum();
        if mass == 0 {
            gamma.extend(std::iter::repeat_n(1.0 / p as f64, p));
            a.extend(std::iter::repeat_n(0.0, p));
        } else {
            let mag = mass as f64 / scale;
            for &i in row_ints {
                gamma.push(i.abs() as f64 / mass as f64);
                a.push(if i == 0 { 0.0 } else { i.signum() as f64 * mag });
            }
        }
    }
    let b = offsets.iter().map(|&i| i as f64 / scale).collect();
    CollageCode { gamma, a, b, aux, ..template.clone() }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Round a value to half precision, nudging magnitudes that round to >= 1
/// down to the previous representable value so contrasts stay contractive.
fn to_f16_contrast(v: f64) -> f16 {
    let h = f16::from_f64(v);
    if h.to_f64().abs() >= 1.0 {
        f16::from_bits(h.to_bits() - 1)
    } else {
        h
    }
}

fn to_f16_offset(v: f64) -> f16 {
    let h = f16::from_f64(v);
    if h.is_infinite() {
        if v < 0.0 { f16::MIN } else { f16::MAX }
    } else {
        h
    }
}

/// Replace every coefficient with its value after the storage round trip:
/// fixed-point integers for collage rows and offsets, `f32` for auxiliary
/// pixels, `f16` for search-code contrasts and offsets. Offsets outside the
/// representable range are clamped (collage: strictly inside the unit
/// interval; search codes: the half-precision range). Idempotent.
pub fn quantize_code(code: &Code, spec: &QuantizationSpec) -> Result<Code> {
    code.validate()?;
    match code {
        Code::Collage(c) => {
            let (ints, offsets) = collage_ints(c, spec);
            let aux = match &c.aux {
                AuxSource::Patches(ps) => AuxSource::Patches(
                    ps.iter().map(|p| p.iter().map(|&v| round_f32(v)).collect()).collect(),
                ),
                AuxSource::DomainRotations => AuxSource::DomainRotations,
            };
            let out = collage_from_ints(c, &ints, &offsets, aux, spec);
            out.validate()?;
            Ok(Code::Collage(out))
        }
        Code::Pifs(c) => {
            let entries = c
                .entries
                .iter()
                .map(|e| PifsEntry {
                    a: to_f16_contrast(e.a).to_f64(),
                    b: to_f16_offset(e.b).to_f64(),
                    ..*e
                })
                .collect();
            let out = PifsCode { entries, ..c.clone() };
            out.validate()?;
            Ok(Code::Pifs(out))
        }
    }
}

// ---------------------------------------------------------------------------
// Bit-level I/O
// ---------------------------------------------------------------------------

/// Width (including one sign bit) needed to store magnitudes up to `maxabs`.
fn bits_for_magnitude(maxabs: u64) -> u8 {
    let mag = if maxabs == 0 { 0 } else { 64 - maxabs.leading_zeros() as u8 };
    mag + 1
}

/// Bits needed to address `count` distinct values (0 when count <= 1).
fn address_bits(count: usize) -> u8 {
    if count <= 1 {
        0
    } else {
        (usize::BITS - (count - 1).leading_zeros()) as u8
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize, // bits in the last byte
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), used: 8 }
    }

    /// Append the low `width` bits of `value`, LSB first.
    fn write(&mut self, mut value: u64, mut width: u8) {
        debug_assert!(width as u32 <= 64);
        debug_assert!(width == 64 || value < (1u64 << width));
        while width > 0 {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let room = 8 - self.used;
            let take = (width as usize).min(room) as u8;
            let mask = if take == 64 { u64::MAX } else { (1u64 << take) - 1 };
            let last = self.bytes.last_mut().expect("byte pushed above");
            *last |= ((value & mask) as u8) << self.used;
            self.used += take as usize;
            value >>= take;
            width -= take;
        }
    }

    fn write_signed(&mut self, value: i64, width: u8) {
        debug_assert!(width >= 1);
        let mag = value.unsigned_abs();
        debug_assert!(width == 64 || mag < (1u64 << (width - 1)) || width == 1 && mag == 0);
        self.write(u64::from(value < 0), 1);
        self.write(mag, width - 1);
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize, // absolute bit position
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, width: u8) -> Result<u64> {
        let mut out = 0u64;
        let mut got = 0u8;
        while got < width {
            let byte = self.pos / 8;
            if byte >= self.bytes.len() {
                return Err(Error::Format("payload ends mid-value".into()));
            }
            let off = self.pos % 8;
            let room = 8 - off;
            let take = ((width - got) as usize).min(room) as u8;
            let mask = (1u16 << take) - 1;
            let chunk = (u16::from(self.bytes[byte]) >> off) & mask;
            out |= u64::from(chunk) << got;
            got += take;
            self.pos += take as usize;
        }
        Ok(out)
    }

    fn read_signed(&mut self, width: u8) -> Result<i64> {
        let neg = self.read(1)? == 1;
        let mag = self.read(width - 1)? as i64;
        Ok(if neg { -mag } else { mag })
    }
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"NCOLLAGE";
const VERSION: u16 = 1;
const KIND_COLLAGE: u8 = 0;
const KIND_PIFS: u8 = 1;
const FLAG_AUGMENTED: u8 = 1;
const FLAG_ROTATION_AUX: u8 = 2;
const HEADER_LEN: usize = 47;

/// Bits per pixel, split by what the bits pay for. Counts payload only;
/// the fixed 47-byte container header is bookkeeping, not code.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BppBreakdown {
    /// Row coefficients (collage) or half-precision contrasts (search).
    pub contrast_bits: u64,
    pub offset_bits: u64,
    /// Auxiliary patch pixels, 32 bits each.
    pub aux_bits: u64,
    /// Domain/augmentation addresses (search codes only).
    pub address_bits: u64,
    pub total_bits: u64,
    pub pixels: u64,
    pub bpp: f64,
}

/// One code, or a row-major grid of per-block codes, plus the quantization
/// they were canonicalized under. Construction quantizes; serialization is
/// then lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeContainer {
    width: usize,
    height: usize,
    channels: usize,
    /// 0 when a single code covers the whole image.
    block_size: usize,
    /// Coefficient precision; 0 for search codes (half precision is fixed).
    epsilon: u8,
    codes: Vec<Code>,
}

impl CodeContainer {
    /// Wrap codes produced by the encoders. `quant` is required for collage
    /// codes and must be absent for search codes. Every code is replaced by
    /// its quantized canonical form.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        block_size: usize,
        codes: Vec<Code>,
        quant: Option<QuantizationSpec>,
    ) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::Argument("container needs at least one code".into()));
        }
        let collage = matches!(codes[0], Code::Collage(_));
        let epsilon = match (collage, quant) {
            (true, Some(q)) => q.epsilon,
            (true, None) => {
                return Err(Error::Argument("collage codes need a coefficient precision".into()))
            }
            (false, None) => 0,
            (false, Some(_)) => {
                return Err(Error::Argument(
                    "search codes use fixed half precision; drop the precision setting".into(),
                ))
            }
        };
        let spec = QuantizationSpec { epsilon: if collage { epsilon } else { 2 } };
        let codes: Vec<Code> =
            codes.iter().map(|c| quantize_code(c, &spec)).collect::<Result<_>>()?;
        let out = Self { width, height, channels, block_size, epsilon, codes };
        out.validate()?;
        Ok(out)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn epsilon(&self) -> u8 {
        self.epsilon
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    fn block_dims(&self) -> (usize, usize) {
        if self.block_size == 0 {
            (self.width, self.height)
        } else {
            (self.block_size, self.block_size)
        }
    }

    fn grid(&self) -> (usize, usize) {
        // block_size 0 means one whole-image code.
        let gx = self.width.checked_div(self.block_size).unwrap_or(1);
        let gy = self.height.checked_div(self.block_size).unwrap_or(1);
        (gx, gy)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size != 0
            && !(self.width.is_multiple_of(self.block_size)
                && self.height.is_multiple_of(self.block_size))
        {
            return Err(Error::Partition(format!(
                "block size {} does not tile {}x{}",
                self.block_size, self.width, self.height
            )));
        }
        let (gx, gy) = self.grid();
        if self.codes.len() != gx * gy {
            return Err(Error::Shape(format!(
                "{} codes for a {gx}x{gy} block grid",
                self.codes.len()
            )));
        }
        let (bw, bh) = self.block_dims();
        let collage = matches!(self.codes[0], Code::Collage(_));
        if collage {
            QuantizationSpec::new(self.epsilon)?;
        } else if self.epsilon != 0 {
            return Err(Error::Format("search containers carry no precision field".into()));
        }
        let reference = code_shape(&self.codes[0]);
        for code in &self.codes {
            code.validate()?;
            if matches!(code, Code::Collage(_)) != collage {
                return Err(Error::Shape("containers cannot mix code kinds".into()));
            }
            if code_shape(code) != reference {
                return Err(Error::Shape("all block codes must share one shape".into()));
            }
            let (w, h, c) = code.dims();
            if (w, h, c) != (bw, bh, self.channels) {
                return Err(Error::Shape(format!(
                    "code covers {w}x{h}x{c}, expected {bw}x{bh}x{}",
                    self.channels
                )));
            }
        }
        Ok(())
    }

    /// Decode every code at native resolution and paste blocks row-major.
    pub fn decode(&self, cfg: &SolveConfig) -> Result<(RasterImage, Vec<DecodeReport>)> {
        self.assemble(cfg, |code, cfg| decode(code, cfg))
    }

    /// Decode every code at `scale` times its native resolution.
    pub fn decode_scaled(
        &self,
        scale: usize,
        cfg: &SolveConfig,
    ) -> Result<(RasterImage, Vec<DecodeReport>)> {
        self.assemble(cfg, |code, cfg| decode_magnified(code, scale, cfg))
    }

    fn assemble(
        &self,
        cfg: &SolveConfig,
        run: impl Fn(&Code, &SolveConfig) -> Result<(RasterImage, DecodeReport)> + Sync,
    ) -> Result<(RasterImage, Vec<DecodeReport>)> {
        let decoded: Vec<(RasterImage, DecodeReport)> = self
            .codes
            .par_iter()
            .map(|code| run(code, cfg))
            .collect::<Result<_>>()?;
        let (bw, _) = self.block_dims();
        let (gx, _) = self.grid();
        // All sub-decodes share one scale; recover it from the first tile.
        let tile_w = decoded[0].0.width();
        let s = tile_w / bw;
        let mut out = RasterImage::new(self.width * s, self.height * s, self.channels)?;
        let mut reports = Vec::with_capacity(decoded.len());
        for (i, (tile, report)) in decoded.into_iter().enumerate() {
            let (x, y) = (i % gx, i / gx);
            let bs = if self.block_size == 0 { self.width } else { self.block_size };
            out.paste(x * bs * s, y * bs * s, &tile)?;
            reports.push(report);
        }
        Ok((out, reports))
    }

    // -- serialization ------------------------------------------------------

    fn shared_scheme(&self) -> PartitionScheme {
        match &self.codes[0] {
            Code::Collage(c) => c.scheme,
            Code::Pifs(c) => c.scheme,
        }
    }

    fn shared_augmented(&self) -> bool {
        match &self.codes[0] {
            Code::Collage(c) => c.augmented,
            Code::Pifs(c) => c.augmented,
        }
    }

    /// Global integer payload for collage containers: per-code row/offset
    /// integers plus the widths that cover every code.
    fn collage_payload(&self) -> (Vec<CodeInts>, u8, u8) {
        let spec = QuantizationSpec { epsilon: self.epsilon };
        let per_code: Vec<CodeInts> = self
            .codes
            .iter()
            .map(|code| match code {
                Code::Collage(c) => collage_ints(c, &spec),
                Code::Pifs(_) => unreachable!("validated as collage"),
            })
            .collect();
        let max_row = per_code
            .iter()
            .flat_map(|(r, _)| r.iter())
            .map(|v| v.unsigned_abs())
            .max()
            .unwrap_or(0);
        let max_off = per_code
            .iter()
            .flat_map(|(_, o)| o.iter())
            .map(|v| v.unsigned_abs())
            .max()
            .unwrap_or(0);
        (per_code, bits_for_magnitude(max_row), bits_for_magnitude(max_off))
    }

    fn pifs_address_bits(&self) -> u8 {
        let (bw, bh) = self.block_dims();
        let scheme = self.shared_scheme();
        let n = scheme.domain_count(bw, bh, self.channels);
        let aug = if self.shared_augmented() { AUGMENTATIONS } else { 1 };
        address_bits(n * aug)
    }

    /// Payload size and composition; also the rate accounting.
    pub fn bpp(&self) -> BppBreakdown {
        let mut contrast_bits = 0u64;
        let mut offset_bits = 0u64;
        let mut aux_bits = 0u64;
        let mut address_bits = 0u64;
        match &self.codes[0] {
            Code::Collage(_) => {
                let (per_code, bits_row, bits_off) = self.collage_payload();
                for ((rows, offs), code) in per_code.iter().zip(&self.codes) {
                    contrast_bits += rows.len() as u64 * bits_row as u64;
                    offset_bits += offs.len() as u64 * bits_off as u64;
                    if let Code::Collage(c) = code {
                        if let AuxSource::Patches(ps) = &c.aux {
                            aux_bits += ps.iter().map(|p| p.len() as u64 * 32).sum::<u64>();
                        }
                    }
                }
            }
            Code::Pifs(_) => {
                let abits = self.pifs_address_bits() as u64;
                for code in &self.codes {
                    if let Code::Pifs(c) = code {
                        let k = c.entries.len() as u64;
                        contrast_bits += 16 * k;
                        offset_bits += 16 * k;
                        address_bits += abits * k;
                    }
                }
            }
        }
        let total_bits = contrast_bits + offset_bits + aux_bits + address_bits;
        let pixels = (self.width * self.height * self.channels) as u64;
        BppBreakdown {
            contrast_bits,
            offset_bits,
            aux_bits,
            address_bits,
            total_bits,
            pixels,
            bpp: total_bits as f64 / pixels as f64,
        }
    }

    /// Serialize to the container wire format: magic `NCOLLAGE`, version
    /// (u16, little-endian), kind, epsilon and flag bytes, eight u32
    /// little-endian fields (width, height, channels, block size, range,
    /// domain, stride, aux count), the two payload bit widths, and then the
    /// LSB-first bit-packed payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let scheme = self.shared_scheme();
        let collage = matches!(self.codes[0], Code::Collage(_));
        let (aux_count, rotation_aux) = match &self.codes[0] {
            Code::Collage(c) => match &c.aux {
                AuxSource::Patches(ps) => (ps.len() as u32, false),
                AuxSource::DomainRotations => (c.v as u32, true),
            },
            Code::Pifs(_) => (0, false),
        };
        let mut head = Vec::with_capacity(HEADER_LEN);
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.push(if collage { KIND_COLLAGE } else { KIND_PIFS });
        head.push(self.epsilon);
        let mut flags = 0u8;
        if self.shared_augmented() {
            flags |= FLAG_AUGMENTED;
        }
        if rotation_aux {
            flags |= FLAG_ROTATION_AUX;
        }
        head.push(flags);
        for v in [
            self.width as u32,
            self.height as u32,
            self.channels as u32,
            self.block_size as u32,
            scheme.range_size as u32,
            scheme.domain_size as u32,
            scheme.domain_stride as u32,
            aux_count,
        ] {
            head.extend_from_slice(&v.to_le_bytes());
        }

        let mut bits = BitWriter::new();
        if collage {
            let (per_code, bits_row, bits_off) = self.collage_payload();
            head.push(bits_row);
            head.push(bits_off);
            for ((rows, offs), code) in per_code.iter().zip(&self.codes) {
                for &v in rows {
                    bits.write_signed(v, bits_row);
                }
                for &v in offs {
                    bits.write_signed(v, bits_off);
                }
                if let Code::Collage(c) = code {
                    if let AuxSource::Patches(ps) = &c.aux {
                        for patch in ps {
                            for &px in patch {
                                bits.write(u64::from((px as f32).to_bits()), 32);
                            }
                        }
                    }
                }
            }
        } else {
            head.push(0);
            head.push(0);
            let abits = self.pifs_address_bits();
            for code in &self.codes {
                if let Code::Pifs(c) = code {
                    for e in &c.entries {
                        let idx = if c.augmented {
                            e.domain as usize * AUGMENTATIONS + e.augmentation as usize
                        } else {
                            e.domain as usize
                        };
                        bits.write(idx as u64, abits);
                        bits.write(u64::from(f16::from_f64(e.a).to_bits()), 16);
                        bits.write(u64::from(f16::from_f64(e.b).to_bits()), 16);
                    }
                }
            }
        }
        debug_assert_eq!(head.len(), HEADER_LEN);
        head.extend_from_slice(&bits.finish());
        head
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("file shorter than the container header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic; not a code container".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = bytes[10];
        if kind != KIND_COLLAGE && kind != KIND_PIFS {
            return Err(Error::Format(format!("unknown code kind {kind}")));
        }
        let epsilon = bytes[11];
        let flags = bytes[12];
        if flags & !(FLAG_AUGMENTED | FLAG_ROTATION_AUX) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
        }
        let u32_at = |off: usize| -> usize {
            u32::from_le_bytes(bytes[off..off + 4].try_into().expect("length checked")) as usize
        };
        let width = u32_at(13);
        let height = u32_at(17);
        let channels = u32_at(21);
        let block_size = u32_at(25);
        let scheme = PartitionScheme::new(u32_at(29), u32_at(33), u32_at(37))
            .map_err(|e| Error::Format(format!("bad partition scheme in header: {e}")))?;
        let aux_count = u32_at(41);
        let bits_row = bytes[45];
        let bits_off = bytes[46];
        let augmented = flags & FLAG_AUGMENTED != 0;
        let rotation_aux = flags & FLAG_ROTATION_AUX != 0;

        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Format("zero image dimensions in header".into()));
        }
        let (bw, bh) = if block_size == 0 {
            (width, height)
        } else {
            if !(width.is_multiple_of(block_size) && height.is_multiple_of(block_size)) {
                return Err(Error::Format(format!(
                    "block size {block_size} does not tile {width}x{height}"
                )));
            }
            (block_size, block_size)
        };
        scheme
            .validate_for(bw, bh)
            .map_err(|e| Error::Format(format!("scheme does not fit blocks: {e}")))?;
        let n_codes = width.checked_div(block_size).unwrap_or(1)
            * height.checked_div(block_size).unwrap_or(1);
        let k = scheme.range_count(bw, bh, channels);
        let n_base = scheme.domain_count(bw, bh, channels);
        let n = n_base * if augmented { AUGMENTATIONS } else { 1 };
        let len = scheme.range_size * scheme.range_size;

        let collage = kind == KIND_COLLAGE;
        let payload_bits: u64 = if collage {
            if rotation_aux && aux_count != 3 {
                return Err(Error::Format("rotation aux always contributes 3 columns".into()));
            }
            let p = (n + aux_count) as u64;
            let aux_pixel_bits =
                if rotation_aux { 0 } else { aux_count as u64 * len as u64 * 32 };
            if bits_row == 0 || bits_off == 0 || bits_row > 64 || bits_off > 64 {
                return Err(Error::Format(format!(
                    "bad coefficient widths {bits_row}/{bits_off}"
                )));
            }
            n_codes as u64
                * (k as u64 * p * bits_row as u64 + k as u64 * bits_off as u64 + aux_pixel_bits)
        } else {
            if aux_count != 0 || rotation_aux {
                return Err(Error::Format("search containers carry no aux columns".into()));
            }
            let abits = address_bits(n) as u64;
            n_codes as u64 * k as u64 * (abits + 32)
        };
        let expect = HEADER_LEN + payload_bits.div_ceil(8) as usize;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                expect - HEADER_LEN
            )));
        }

        let mut r = BitReader::new(&bytes[HEADER_LEN..]);
        let spec = QuantizationSpec::new(if collage { epsilon } else { 2 })
            .map_err(|e| Error::Format(format!("bad precision in header: {e}")))?;
        let mut codes = Vec::with_capacity(n_codes);
        for _ in 0..n_codes {
            if collage {
                let p = n + aux_count;
                let mut ints = Vec::with_capacity(k * p);
                for _ in 0..k * p {
                    ints.push(r.read_signed(bits_row)?);
                }
                let mut offsets = Vec::with_capacity(k);
                for _ in 0..k {
                    offsets.push(r.read_signed(bits_off)?);
                }
                let aux = if rotation_aux {
                    AuxSource::DomainRotations
                } else {
                    let mut patches = Vec::with_capacity(aux_count);
                    for _ in 0..aux_count {
                        let mut patch = Vec::with_capacity(len);
                        for _ in 0..len {
                            patch.push(f32::from_bits(r.read(32)? as u32) as f64);
                        }
                        patches.push(patch);
                    }
                    AuxSource::Patches(patches)
                };
                let template = CollageCode {
                    width: bw,
                    height: bh,
                    channels,
                    scheme,
                    augmented,
                    k,
                    n,
                    v: aux_count,
                    gamma: Vec::new(),
                    a: Vec::new(),
                    b: Vec::new(),
                    aux: AuxSource::DomainRotations,
                };
                let code = collage_from_ints(&template, &ints, &offsets, aux, &spec);
                code.validate()
                    .map_err(|e| Error::Format(format!("payload decodes to invalid code: {e}")))?;
                codes.push(Code::Collage(code));
            } else {
                let abits = address_bits(n);
                let mut entries = Vec::with_capacity(k);
                for _ in 0..k {
                    let idx = r.read(abits)? as usize;
                    if idx >= n {
                        return Err(Error::Format(format!("domain address {idx} out of {n}")));
                    }
                    let (domain, augmentation) = if augmented {
                        ((idx / AUGMENTATIONS) as u32, (idx % AUGMENTATIONS) as u8)
                    } else {
                        (idx as u32, 0)
                    };
                    let a = f16::from_bits(r.read(16)? as u16).to_f64();
                    let b = f16::from_bits(r.read(16)? as u16).to_f64();
                    entries.push(PifsEntry { domain, augmentation, a, b });
                }
                let code = PifsCode {
                    width: bw,
                    height: bh,
                    channels,
                    scheme,
                    augmented,
                    entries,
                };
                code.validate()
                    .map_err(|e| Error::Format(format!("payload decodes to invalid code: {e}")))?;
                codes.push(Code::Pifs(code));
            }
        }
        let out = Self { width, height, channels, block_size, epsilon, codes };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Shape fingerprint used to reject mixed-shape block grids.
fn code_shape(code: &Code) -> (PartitionScheme, bool, usize, bool) {
    match code {
        Code::Collage(c) => (c.scheme, c.augmented, c.v, c.aux.is_rotations()),
        Code::Pifs(c) => (c.scheme, c.augmented, 0, false),
    }
}

// ---------------------------------------------------------------------------
// Closed-form rate formulas
// ---------------------------------------------------------------------------

/// Per-pixel rates of a collage code with `k` ranges, `n` domains and `v`
/// auxiliary columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollageRate {
    /// Rate of one row coefficient.
    pub bpp_a: f64,
    /// Rate of one offset.
    pub bpp_b: f64,
    /// Rate of one auxiliary patch (32-bit pixels, amortized).
    pub bpp_u: f64,
    pub total: f64,
}

/// Combine per-unit rates into the total collage rate:
/// `k(n+v) * bpp_a + k * bpp_b + v * bpp_u`.
pub fn collage_rate_formula(k: usize, n: usize, v: usize, bpp_a: f64, bpp_b: f64, bpp_u: f64) -> f64 {
    (k * (n + v)) as f64 * bpp_a + k as f64 * bpp_b + v as f64 * bpp_u
}

/// Collage rate from stored bit widths: each of the `k(n+v)` coefficients
/// costs `bits_a` bits, each offset `bits_b` bits, and each auxiliary patch
/// stores `aux_pixels` 32-bit floats shared across `amortize_over` images
/// (aux cost vanishes as the share count grows).
#[allow(clippy::too_many_arguments)]
pub fn bpp_collage(
    k: usize,
    n: usize,
    v: usize,
    bits_a: f64,
    bits_b: f64,
    aux_pixels: usize,
    image_pixels: usize,
    amortize_over: usize,
) -> Result<CollageRate> {
    if image_pixels == 0 || amortize_over == 0 {
        return Err(Error::Argument(
            "rate needs a positive pixel count and image count".into(),
        ));
    }
    if bits_a.is_nan() || bits_a < 0.0 || bits_b.is_nan() || bits_b < 0.0 {
        return Err(Error::Argument(format!("invalid bit widths {bits_a}/{bits_b}")));
    }
    let px = image_pixels as f64;
    let bpp_a = bits_a / px;
    let bpp_b = bits_b / px;
    let bpp_u = 32.0 * aux_pixels as f64 / (px * amortize_over as f64);
    Ok(CollageRate {
        bpp_a,
        bpp_b,
        bpp_u,
        total: collage_rate_formula(k, n, v, bpp_a, bpp_b, bpp_u),
    })
}

/// Rate of a search code: half-precision contrast and offset plus the
/// combined domain/augmentation address per range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PifsRate {
    pub address_bits: u8,
    pub per_range_bits: u64,
    pub total_bits: u64,
}

impl PifsRate {
    pub fn bpp(&self, image_pixels: usize) -> f64 {
        self.total_bits as f64 / image_pixels as f64
    }
}

/// Per-range and total storage of `k` search entries over `n` domains with
/// `augmentations` variants each.
pub fn bpp_pifs(k: usize, n: usize, augmentations: usize) -> Result<PifsRate> {
    if k == 0 || n == 0 || augmentations == 0 {
        return Err(Error::Argument("rate needs positive counts".into()));
    }
    let abits = address_bits(n * augmentations);
    let per_range = 32 + abits as u64;
    Ok(PifsRate {
        address_bits: abits,
        per_range_bits: per_range,
        total_bits: k as u64 * per_range,
    })
}
