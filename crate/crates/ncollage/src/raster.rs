//! Images, partitions and domain banks.
//!
//! A [`RasterImage`] stores pixels as `f64` in nominal `[0,1]`, one plane per
//! channel (planar layout: plane index `c`, then row-major within the plane).
//! Binary netpbm files (P5 grayscale, P6 color) are the interchange format.
//!
//! A [`PartitionScheme`] fixes the block geometry shared by every code:
//! `range_size` cells tile each plane exactly, `domain_size` cells are read
//! on a `domain_stride` grid and pooled down to range size by block
//! averaging. [`augment_domains`] expands a pooled bank with the 8 classic
//! variants (4 rotations × optional value negation).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of augmented variants produced per base domain.
pub const AUGMENTATIONS: usize = 8;

// ---------------------------------------------------------------------------
// RasterImage
// ---------------------------------------------------------------------------

/// Planar floating-point image. `data[c * w * h + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl RasterImage {
    /// All-zero image. Channels must be at least 1.
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::constant(width, height, channels, 0.0)
    }

    /// Image filled with a single value.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        Ok(Self { width, height, channels, data: vec![value; width * height * channels] })
    }

    /// Wrap an existing planar buffer.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer has {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    /// Total sample count `width * height * channels`.
    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, x: usize, y: usize) -> f64 {
        debug_assert!(channel < self.channels && x < self.width && y < self.height);
        self.data[channel * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, x: usize, y: usize, value: f64) {
        debug_assert!(channel < self.channels && x < self.width && y < self.height);
        self.data[channel * self.width * self.height + y * self.width + x] = value;
    }

    /// One channel plane, row-major.
    pub fn plane(&self, channel: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Mean over all samples.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `max_i |x_i - y_i|`; shapes must match.
    pub fn linf_distance(&self, other: &RasterImage) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "images differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Axis-aligned crop of all channels.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RasterImage> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut out = RasterImage::new(w, h, self.channels)?;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, x, y, self.get(c, x0 + x, y0 + y));
                }
            }
        }
        Ok(out)
    }

    /// Write `src` into this image with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, x0: usize, y0: usize, src: &RasterImage) -> Result<()> {
        if src.channels != self.channels
            || x0 + src.width > self.width
            || y0 + src.height > self.height
        {
            return Err(Error::Shape(format!(
                "paste of {}x{}x{} at +{x0}+{y0} exceeds image {}x{}x{}",
                src.width, src.height, src.channels, self.width, self.height, self.channels
            )));
        }
        for c in 0..self.channels {
            for y in 0..src.height {
                for x in 0..src.width {
                    self.set(c, x0 + x, y0 + y, src.get(c, x, y));
                }
            }
        }
        Ok(())
    }

    // -- netpbm ------------------------------------------------------------

    /// Parse a binary netpbm image (P5 -> 1 channel, P6 -> 3 channels).
    ///
    /// Samples are normalized by the header maxval. Maxvals above 255 use
    /// two-byte big-endian samples per the netpbm convention.
    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let mut p = PnmParser { bytes, pos: 0 };
        let magic = p.token()?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(Error::Format(format!(
                    "unsupported netpbm magic {other:?} (binary P5/P6 only)"
                )))
            }
        };
        let width: usize = p.number()?;
        let height: usize = p.number()?;
        let maxval: usize = p.number()?;
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("degenerate image {width}x{height}")));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("maxval {maxval} out of range 1..=65535")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        p.single_whitespace()?;
        let wide = maxval > 255;
        let sample_bytes = if wide { 2 } else { 1 };
        let n = width * height * channels;
        let payload = &p.bytes[p.pos..];
        if payload.len() < n * sample_bytes {
            return Err(Error::Format(format!(
                "truncated pixel data: {} bytes, expected {}",
                payload.len(),
                n * sample_bytes
            )));
        }
        let scale = 1.0 / maxval as f64;
        let mut img = RasterImage::new(width, height, channels)?;
        // Interleaved on disk, planar in memory.
        for i in 0..width * height {
            for c in 0..channels {
                let s = i * channels + c;
                let raw = if wide {
                    u16::from_be_bytes([payload[2 * s], payload[2 * s + 1]]) as f64
                } else {
                    payload[s] as f64
                };
                img.data[c * width * height + i] = raw * scale;
            }
        }
        Ok(img)
    }

    /// Encode as binary netpbm with maxval 255.
    ///
    /// Samples are clamped to `[0,1]`, scaled by 255 and rounded half away
    /// from zero. Only 1-channel (P5) and 3-channel (P6) images are
    /// representable.
    pub fn to_pnm_bytes(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => {
                return Err(Error::Argument(format!(
                    "netpbm supports 1 or 3 channels, image has {c}"
                )))
            }
        };
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        for i in 0..self.width * self.height {
            for c in 0..self.channels {
                let v = self.data[c * self.width * self.height + i].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
        Ok(out)
    }

    pub fn load_pnm<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        Self::from_pnm_bytes(&bytes)
    }

    pub fn save_pnm<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let bytes = self.to_pnm_bytes()?;
        fs::write(path.as_ref(), bytes)?;
        Ok(())
    }
}

/// Minimal netpbm header scanner: whitespace-separated tokens with `#`
/// comments running to end of line.
struct PnmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmParser<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of netpbm header".into()));
        }
        String::from_utf8(self.bytes[start..self.pos].to_vec())
            .map_err(|_| Error::Format("non-ascii netpbm header".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("expected integer in netpbm header, got {t:?}")))
    }

    fn single_whitespace(&mut self) -> Result<()> {
        if self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Format("missing whitespace after maxval".into()))
        }
    }
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// Block geometry shared by ranges and domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionScheme {
    /// Side of the square non-overlapping range cells.
    pub range_size: usize,
    /// Side of the square (possibly overlapping) domain cells.
    pub domain_size: usize,
    /// Step between domain cell origins.
    pub domain_stride: usize,
}

impl PartitionScheme {
    pub fn new(range_size: usize, domain_size: usize, domain_stride: usize) -> Result<Self> {
        let s = Self { range_size, domain_size, domain_stride };
        s.validate()?;
        Ok(s)
    }

    /// Internal consistency: positive sizes, domains at least range-sized,
    /// stride positive and no larger than the domain side, integral pooling.
    pub fn validate(&self) -> Result<()> {
        if self.range_size == 0 || self.domain_size == 0 || self.domain_stride == 0 {
            return Err(Error::Argument(format!(
                "partition sizes must be positive: range {}, domain {}, stride {}",
                self.range_size, self.domain_size, self.domain_stride
            )));
        }
        if self.domain_size < self.range_size {
            return Err(Error::Argument(format!(
                "domain size {} smaller than range size {}",
                self.domain_size, self.range_size
            )));
        }
        if self.domain_stride > self.domain_size {
            return Err(Error::Argument(format!(
                "domain stride {} larger than domain size {} would leave gaps",
                self.domain_stride, self.domain_size
            )));
        }
        if !self.domain_size.is_multiple_of(self.range_size) {
            return Err(Error::Partition(format!(
                "pooling factor {}/{} is not integral",
                self.domain_size, self.range_size
            )));
        }
        Ok(())
    }

    /// Check this scheme tiles a `width x height` plane.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        self.validate()?;
        if !(width.is_multiple_of(self.range_size) && height.is_multiple_of(self.range_size)) {
            return Err(Error::Partition(format!(
                "range size {} does not tile {width}x{height}",
                self.range_size
            )));
        }
        if self.domain_size > width || self.domain_size > height {
            return Err(Error::Partition(format!(
                "domain size {} exceeds image {width}x{height}",
                self.domain_size
            )));
        }
        Ok(())
    }

    /// Side ratio `domain_size / range_size`.
    pub fn pooling_factor(&self) -> usize {
        self.domain_size / self.range_size
    }

    /// Domain grid steps along one axis of length `extent`.
    fn domain_positions(&self, extent: usize) -> usize {
        (extent - self.domain_size) / self.domain_stride + 1
    }

    /// Ranges per image: `(w/r)*(h/r)*channels`.
    pub fn range_count(&self, width: usize, height: usize, channels: usize) -> usize {
        (width / self.range_size) * (height / self.range_size) * channels
    }

    /// Base (unaugmented) domains per image.
    pub fn domain_count(&self, width: usize, height: usize, channels: usize) -> usize {
        self.domain_positions(width) * self.domain_positions(height) * channels
    }
}

/// One range cell: contiguous square patch of a single channel plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeRef {
    pub index: usize,
    pub channel: usize,
    /// Pixel coordinates of the top-left corner.
    pub x: usize,
    pub y: usize,
}

/// Enumerate range cells: channel-major, then row-major over the cell grid.
pub fn partition_ranges(
    width: usize,
    height: usize,
    channels: usize,
    scheme: &PartitionScheme,
) -> Result<Vec<RangeRef>> {
    scheme.validate_for(width, height)?;
    let cw = width / scheme.range_size;
    let ch = height / scheme.range_size;
    let mut out = Vec::with_capacity(cw * ch * channels);
    for c in 0..channels {
        for cy in 0..ch {
            for cx in 0..cw {
                out.push(RangeRef {
                    index: out.len(),
                    channel: c,
                    x: cx * scheme.range_size,
                    y: cy * scheme.range_size,
                });
            }
        }
    }
    Ok(out)
}

/// Copy one range cell out of the image, row-major.
pub fn read_range(img: &RasterImage, r: &RangeRef, range_size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(range_size * range_size);
    for y in 0..range_size {
        for x in 0..range_size {
            out.push(img.get(r.channel, r.x + x, r.y + y));
        }
    }
    out
}

/// Write one range cell back into the image.
pub fn place_range(img: &mut RasterImage, r: &RangeRef, range_size: usize, values: &[f64]) {
    debug_assert_eq!(values.len(), range_size * range_size);
    for y in 0..range_size {
        for x in 0..range_size {
            img.set(r.channel, r.x + x, r.y + y, values[y * range_size + x]);
        }
    }
}

// ---------------------------------------------------------------------------
// Domain banks
// ---------------------------------------------------------------------------

/// Where a pooled cell came from: base domain index plus augmentation id
/// (0 identity, 1..=3 clockwise rotations by 90/180/270 degrees, 4..=7 the
/// value-negated copies of 0..=3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub domain: u32,
    pub augmentation: u8,
}

/// Pooled (and possibly augmented) domain cells, each `range_size^2` long.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBank {
    pub range_size: usize,
    pub cells: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    /// Number of base domains before augmentation.
    pub base_count: usize,
    pub augmented: bool,
}

impl DomainBank {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Extract every domain cell on the stride grid and pool it down to range
/// size by averaging non-overlapping `f x f` blocks. Domains never cross
/// channel planes; enumeration is channel-major, then row-major.
pub fn extract_domains(img: &RasterImage, scheme: &PartitionScheme) -> Result<DomainBank> {
    scheme.validate()?;
    if scheme.domain_size > img.width() || scheme.domain_size > img.height() {
        return Err(Error::Partition(format!(
            "domain size {} exceeds image {}x{}",
            scheme.domain_size,
            img.width(),
            img.height()
        )));
    }
    let f = scheme.pooling_factor();
    let nx = scheme.domain_positions(img.width());
    let ny = scheme.domain_positions(img.height());
    let rs = scheme.range_size;
    let inv = 1.0 / (f * f) as f64;
    let mut cells = Vec::with_capacity(nx * ny * img.channels());
    for c in 0..img.channels() {
        for gy in 0..ny {
            for gx in 0..nx {
                let x0 = gx * scheme.domain_stride;
                let y0 = gy * scheme.domain_stride;
                let mut cell = vec![0.0; rs * rs];
                for py in 0..rs {
                    for px in 0..rs {
                        let mut acc = 0.0;
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += img.get(c, x0 + px * f + dx, y0 + py * f + dy);
                            }
                        }
                        cell[py * rs + px] = acc * inv;
                    }
                }
                cells.push(cell);
            }
        }
    }
    let provenance = (0..cells.len())
        .map(|i| Provenance { domain: i as u32, augmentation: 0 })
        .collect();
    Ok(DomainBank {
        range_size: rs,
        base_count: cells.len(),
        cells,
        provenance,
        augmented: false,
    })
}

/// Rotate a square row-major patch clockwise by `quarter * 90` degrees.
pub fn rotate_cell(cell: &[f64], side: usize, quarter: u8) -> Vec<f64> {
    debug_assert_eq!(cell.len(), side * side);
    let mut out = vec![0.0; cell.len()];
    for y in 0..side {
        for x in 0..side {
            let v = cell[y * side + x];
            let (nx, ny) = match quarter % 4 {
                0 => (x, y),
                1 => (side - 1 - y, x),
                2 => (side - 1 - x, side - 1 - y),
                _ => (y, side - 1 - x),
            };
            out[ny * side + nx] = v;
        }
    }
    out
}

/// Apply augmentation `id` (see [`Provenance`]) to a pooled cell.
pub fn augment_cell(cell: &[f64], side: usize, id: u8) -> Vec<f64> {
    debug_assert!((id as usize) < AUGMENTATIONS);
    let mut out = rotate_cell(cell, side, id % 4);
    if id >= 4 {
        for v in &mut out {
            *v = -*v;
        }
    }
    out
}

/// Expand a pooled bank with all 8 augmentations of each cell, ordered
/// `(domain, augmentation)` lexicographically.
pub fn augment_domains(bank: &DomainBank) -> DomainBank {
    let mut cells = Vec::with_capacity(bank.cells.len() * AUGMENTATIONS);
    let mut provenance = Vec::with_capacity(cells.capacity());
    for (d, cell) in bank.cells.iter().enumerate() {
        for id in 0..AUGMENTATIONS as u8 {
            cells.push(augment_cell(cell, bank.range_size, id));
            provenance.push(Provenance { domain: d as u32, augmentation: id });
        }
    }
    DomainBank {
        range_size: bank.range_size,
        base_count: bank.base_count,
        cells,
        provenance,
        augmented: true,
    }
}
