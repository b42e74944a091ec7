//! Portable on-disk formats, all little-endian f64 payloads behind a single
//! ASCII header line:
//!
//! * image:  `PNPF <channels> <height> <width>\n` + c*h*w f64 in (c,h,w) order
//! * mask:   same header shape with channels = 1, payload is h*w bytes of 0/1
//! * kernel: `PNPK <c_out> <c_in> <kh> <kw>\n` + weights f64
//! * model:  `PNPM <depth> <channels> <hidden> <norm_mode>\n` followed per
//!           layer by a kernel block, c_out bias f64, and one c_target f64
//!
//! An 8-bit binary PGM writer is included for visual inspection (export only).
//!
//! Parsers take byte slices, never panic on malformed input, and enforce the
//! container invariants (finite values, exact payload length, sane dims).

use std::fs;
use std::path::Path;

use crate::cnn::{ConvLayer, NormMode, SimpleCnnModel};
use crate::conv::ConvKernel;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::fidelity::Mask;

pub const IMAGE_MAGIC: &str = "PNPF";
pub const KERNEL_MAGIC: &str = "PNPK";
pub const MODEL_MAGIC: &str = "PNPM";
pub const FORMAT_VERSION: u32 = 1;

const MAX_HEADER_LEN: usize = 128;
// Caps keep hostile headers from requesting huge allocations.
const MAX_DIM: usize = 1 << 16;
const MAX_ELEMS: usize = 1 << 26;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Reads one ASCII header line (bounded) and splits it into fields.
    fn header_line(&mut self) -> Result<Vec<&'a str>> {
        let end = self.buf[self.pos..]
            .iter()
            .take(MAX_HEADER_LEN)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("missing or oversized header line".into()))?;
        let line = &self.buf[self.pos..self.pos + end];
        self.pos += end + 1;
        let text = std::str::from_utf8(line)
            .map_err(|_| Error::Parse("header is not ASCII".into()))?;
        Ok(text.split_whitespace().collect())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Parse(format!(
                "truncated payload: need {n} bytes, have {}",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes_len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Parse("payload size overflow".into()))?;
        let raw = self.take(bytes_len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Parse(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn parse_dim(field: Option<&&str>, name: &str) -> Result<usize> {
    let s = field.ok_or_else(|| Error::Parse(format!("missing {name} in header")))?;
    let v: usize = s
        .parse()
        .map_err(|_| Error::Parse(format!("bad {name} {s:?}")))?;
    if v == 0 || v > MAX_DIM {
        return Err(Error::Parse(format!("{name} {v} out of range")));
    }
    Ok(v)
}

fn checked_elems(dims: &[usize]) -> Result<usize> {
    let mut n: usize = 1;
    for &d in dims {
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Parse("element count overflow".into()))?;
    }
    if n > MAX_ELEMS {
        return Err(Error::Parse(format!("element count {n} exceeds limit")));
    }
    Ok(n)
}

fn expect_magic(fields: &[&str], magic: &str) -> Result<()> {
    if fields.first() != Some(&magic) {
        return Err(Error::Parse(format!(
            "bad magic: expected {magic}, got {:?}",
            fields.first().unwrap_or(&"")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

pub fn encode_image(t: &ImageTensor) -> Vec<u8> {
    let mut out = format!(
        "{IMAGE_MAGIC} {} {} {}\n",
        t.channels(),
        t.height(),
        t.width()
    )
    .into_bytes();
    for v in t.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_image(bytes: &[u8]) -> Result<ImageTensor> {
    let mut cur = Cursor::new(bytes);
    let fields = cur.header_line()?;
    expect_magic(&fields, IMAGE_MAGIC)?;
    let c = parse_dim(fields.get(1), "channels")?;
    let h = parse_dim(fields.get(2), "height")?;
    let w = parse_dim(fields.get(3), "width")?;
    if fields.len() != 4 {
        return Err(Error::Parse("image header must have 4 fields".into()));
    }
    let n = checked_elems(&[c, h, w])?;
    let data = cur.f64s(n)?;
    cur.finish()?;
    ImageTensor::new(c, h, w, data)
}

pub fn write_image(path: &Path, t: &ImageTensor) -> Result<()> {
    Ok(fs::write(path, encode_image(t))?)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    parse_image(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// masks (same header line, 0/1 byte payload)
// ---------------------------------------------------------------------------

pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let mut out = format!("{IMAGE_MAGIC} 1 {} {}\n", m.height(), m.width()).into_bytes();
    out.extend(m.as_slice().iter().map(|&b| u8::from(b)));
    out
}

pub fn parse_mask(bytes: &[u8]) -> Result<Mask> {
    let mut cur = Cursor::new(bytes);
    let fields = cur.header_line()?;
    expect_magic(&fields, IMAGE_MAGIC)?;
    let c = parse_dim(fields.get(1), "channels")?;
    if c != 1 {
        return Err(Error::Parse(format!("mask must be single-channel, got {c}")));
    }
    let h = parse_dim(fields.get(2), "height")?;
    let w = parse_dim(fields.get(3), "width")?;
    if fields.len() != 4 {
        return Err(Error::Parse("mask header must have 4 fields".into()));
    }
    let n = checked_elems(&[h, w])?;
    let raw = cur.take(n)?;
    cur.finish()?;
    let mut data = Vec::with_capacity(n);
    for &b in raw {
        match b {
            0 => data.push(false),
            1 => data.push(true),
            other => {
                return Err(Error::Parse(format!(
                    "mask payload byte must be 0 or 1, got {other}"
                )))
            }
        }
    }
    Mask::new(h, w, data)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    Ok(fs::write(path, encode_mask(m))?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    parse_mask(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

pub fn encode_kernel(k: &ConvKernel) -> Vec<u8> {
    let mut out = format!(
        "{KERNEL_MAGIC} {} {} {} {}\n",
        k.c_out(),
        k.c_in(),
        k.kh(),
        k.kw()
    )
    .into_bytes();
    for v in k.weights() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_kernel_at(cur: &mut Cursor) -> Result<ConvKernel> {
    let fields = cur.header_line()?;
    expect_magic(&fields, KERNEL_MAGIC)?;
    let c_out = parse_dim(fields.get(1), "c_out")?;
    let c_in = parse_dim(fields.get(2), "c_in")?;
    let kh = parse_dim(fields.get(3), "kh")?;
    let kw = parse_dim(fields.get(4), "kw")?;
    if fields.len() != 5 {
        return Err(Error::Parse("kernel header must have 5 fields".into()));
    }
    let n = checked_elems(&[c_out, c_in, kh, kw])?;
    let weights = cur.f64s(n)?;
    ConvKernel::new(c_out, c_in, kh, kw, weights)
}

pub fn parse_kernel(bytes: &[u8]) -> Result<ConvKernel> {
    let mut cur = Cursor::new(bytes);
    let k = parse_kernel_at(&mut cur)?;
    cur.finish()?;
    Ok(k)
}

pub fn write_kernel(path: &Path, k: &ConvKernel) -> Result<()> {
    Ok(fs::write(path, encode_kernel(k))?)
}

pub fn read_kernel(path: &Path) -> Result<ConvKernel> {
    parse_kernel(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

pub fn encode_model(m: &SimpleCnnModel) -> Vec<u8> {
    let mut out = format!(
        "{MODEL_MAGIC} {} {} {} {}\n",
        m.depth(),
        m.image_channels(),
        m.hidden_channels(),
        m.norm_mode().token()
    )
    .into_bytes();
    for (layer, c_target) in m.layers().iter().zip(m.c_targets()) {
        out.extend_from_slice(&encode_kernel(&layer.kernel));
        for b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&c_target.to_le_bytes());
    }
    out
}

pub fn parse_model(bytes: &[u8]) -> Result<SimpleCnnModel> {
    let mut cur = Cursor::new(bytes);
    let fields = cur.header_line()?;
    expect_magic(&fields, MODEL_MAGIC)?;
    let depth = parse_dim(fields.get(1), "depth")?;
    let channels = parse_dim(fields.get(2), "channels")?;
    let hidden = parse_dim(fields.get(3), "hidden")?;
    let mode_tok = fields
        .get(4)
        .ok_or_else(|| Error::Parse("missing norm mode".into()))?;
    if fields.len() != 5 {
        return Err(Error::Parse("model header must have 5 fields".into()));
    }
    if depth > 64 {
        return Err(Error::Parse(format!("model depth {depth} out of range")));
    }
    let norm_mode = NormMode::from_token(mode_tok)?;
    let mut layers = Vec::with_capacity(depth);
    let mut c_targets = Vec::with_capacity(depth);
    for l in 0..depth {
        let kernel = parse_kernel_at(&mut cur)?;
        let expected_in = if l == 0 { channels } else { hidden };
        let expected_out = if l == depth - 1 { channels } else { hidden };
        if kernel.c_in() != expected_in || kernel.c_out() != expected_out {
            return Err(Error::Parse(format!(
                "layer {l} kernel is {}->{} but header says {expected_in}->{expected_out}",
                kernel.c_in(),
                kernel.c_out()
            )));
        }
        let bias = cur.f64s(kernel.c_out())?;
        if !bias.iter().all(|b| b.is_finite()) {
            return Err(Error::Parse(format!("layer {l} bias not finite")));
        }
        let c_target = cur.f64s(1)?[0];
        if !(c_target > 0.0) || !c_target.is_finite() {
            return Err(Error::Parse(format!("layer {l} c_target {c_target} invalid")));
        }
        layers.push(ConvLayer { kernel, bias });
        c_targets.push(c_target);
    }
    cur.finish()?;
    SimpleCnnModel::from_parts(layers, norm_mode, c_targets)
}

pub fn write_model(path: &Path, m: &SimpleCnnModel) -> Result<()> {
    Ok(fs::write(path, encode_model(m))?)
}

pub fn read_model(path: &Path) -> Result<SimpleCnnModel> {
    parse_model(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// PGM export
// ---------------------------------------------------------------------------

/// 8-bit binary PGM: single channel only, values clamped to [0, peak] and
/// scaled to 0-255.
pub fn encode_pgm(t: &ImageTensor, peak: f64) -> Result<Vec<u8>> {
    if t.channels() != 1 {
        return Err(Error::shape(
            "1 channel",
            format!("{} channels", t.channels()),
        ));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be > 0, got {peak}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", t.width(), t.height()).into_bytes();
    out.extend(t.as_slice().iter().map(|&v| {
        let clamped = v.clamp(0.0, peak);
        (clamped / peak * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, t: &ImageTensor, peak: f64) -> Result<()> {
    Ok(fs::write(path, encode_pgm(t, peak)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_image, RngSeed};

    #[test]
    fn image_round_trip_is_bit_exact() {
        let t = standard_normal_image(3, 5, 7, &mut RngSeed(1).rng());
        let parsed = parse_image(&encode_image(&t)).unwrap();
        assert_eq!(t, parsed);
    }

    #[test]
    fn image_rejects_truncation_and_trailing() {
        let mut bytes = encode_image(&ImageTensor::zeros(1, 2, 2));
        assert!(parse_image(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(parse_image(&bytes).is_err());
    }

    #[test]
    fn image_rejects_bad_magic_and_dims() {
        assert!(parse_image(b"PNPX 1 1 1\n").is_err());
        assert!(parse_image(b"PNPF 0 1 1\n").is_err());
        assert!(parse_image(b"PNPF 99999999999999999999 1 1\n").is_err());
        assert!(parse_image(b"PNPF 1 1\n").is_err());
    }

    #[test]
    fn image_rejects_nan_payload() {
        let mut bytes = b"PNPF 1 1 1\n".to_vec();
        bytes.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(parse_image(&bytes).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = Mask::new(3, 4, (0..12).map(|i| i % 3 == 0).collect()).unwrap();
        let parsed = parse_mask(&encode_mask(&m)).unwrap();
        assert_eq!(m.as_slice(), parsed.as_slice());
    }

    #[test]
    fn mask_rejects_non_binary_bytes() {
        let mut bytes = b"PNPF 1 1 2\n".to_vec();
        bytes.extend_from_slice(&[1, 2]);
        assert!(parse_mask(&bytes).is_err());
    }

    #[test]
    fn kernel_round_trip() {
        let k = ConvKernel::new(2, 3, 3, 1, (0..18).map(|i| i as f64 / 7.0).collect()).unwrap();
        let parsed = parse_kernel(&encode_kernel(&k)).unwrap();
        assert_eq!(k, parsed);
    }

    #[test]
    fn kernel_rejects_even_taps() {
        assert!(parse_kernel(b"PNPK 1 1 2 2\n").is_err());
    }

    #[test]
    fn model_round_trip() {
        let m = SimpleCnnModel::init(3, 1, 4, NormMode::RealSn, 1.0, RngSeed(2)).unwrap();
        let parsed = parse_model(&encode_model(&m)).unwrap();
        assert_eq!(parsed.depth(), 3);
        assert_eq!(parsed.norm_mode(), NormMode::RealSn);
        for (a, b) in parsed.layers().iter().zip(m.layers()) {
            assert_eq!(a.kernel.weights(), b.kernel.weights());
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(parsed.c_targets(), m.c_targets());
    }

    #[test]
    fn model_rejects_inconsistent_chain() {
        let m = SimpleCnnModel::init(2, 1, 4, NormMode::None, 1.0, RngSeed(3)).unwrap();
        let mut bytes = encode_model(&m);
        // corrupt the hidden width in the header: layer chain no longer matches
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..header_end].to_vec()).unwrap();
        let corrupted = header.replace(" 4 ", " 5 ");
        bytes.splice(..header_end, corrupted.into_bytes());
        assert!(parse_model(&bytes).is_err());
    }

    #[test]
    fn pgm_clamps_and_scales() {
        let t = ImageTensor::new(1, 1, 4, vec![-0.5, 0.0, 0.5, 2.0]).unwrap();
        let bytes = encode_pgm(&t, 1.0).unwrap();
        let payload = &bytes[bytes.len() - 4..];
        assert_eq!(payload, &[0, 0, 128, 255]);
    }

    #[test]
    fn pgm_rejects_multichannel() {
        assert!(encode_pgm(&ImageTensor::zeros(2, 2, 2), 1.0).is_err());
    }

    #[test]
    fn file_round_trip_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pnpf");
        let t = standard_normal_image(1, 4, 4, &mut RngSeed(4).rng());
        write_image(&path, &t).unwrap();
        assert_eq!(read_image(&path).unwrap(), t);
    }
}
