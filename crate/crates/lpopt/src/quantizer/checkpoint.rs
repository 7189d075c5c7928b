//! Bit-exact state checkpoint format.
//!
//! Little-endian layout: magic `QST4`, version u16, entry count u32, then per
//! entry a length-prefixed name, a storage tag (0 = raw f32, 1 = packed),
//! the shape, and either raw f32 data or the packed description (bit width,
//! map id, sign/rounding flags, normalization scheme and its parameters, f32
//! scales, packed code payload). Saving the same entries twice produces
//! byte-identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::normalize::{
    NormScheme, ScaleState, SCHEME_ID_BLOCK, SCHEME_ID_PER_AXIS, SCHEME_ID_PER_TENSOR,
    SCHEME_ID_RANK1,
};
use crate::qmap::map_from_id;
use crate::quantizer::{PackedTensor, QuantizerSpec, Rounding};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QST4";
pub const VERSION: u16 = 1;

const TAG_FP32: u8 = 0;
const TAG_PACKED: u8 = 1;
const FLAG_SIGNED: u8 = 0b01;
const FLAG_STOCHASTIC: u8 = 0b10;

/// One named checkpoint entry.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Fp32(Tensor),
    Packed(PackedTensor),
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::Fp32(t) => t.shape(),
            Entry::Packed(p) => p.shape(),
        }
    }

    /// Materialize the entry as a full-precision tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Entry::Fp32(t) => Ok(t.clone()),
            Entry::Packed(p) => crate::quantizer::dequantize(p),
        }
    }
}

/// Serialize entries to bytes. Names must be unique.
pub fn to_bytes(entries: &[(String, Entry)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if entries[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::Domain(format!("duplicate checkpoint entry name {name:?}")));
        }
        if name.len() > usize::from(u16::MAX) {
            return Err(Error::Domain(format!("entry name of {} bytes is too long", name.len())));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, entry) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match entry {
            Entry::Fp32(t) => {
                out.push(TAG_FP32);
                write_shape(&mut out, t.shape());
                let bytes = 4 * t.numel() as u64;
                out.extend_from_slice(&bytes.to_le_bytes());
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Entry::Packed(p) => {
                out.push(TAG_PACKED);
                write_shape(&mut out, p.shape());
                let spec = p.spec();
                out.push(spec.map.bitwidth());
                out.push(spec.map.map_id());
                let mut flags = 0u8;
                if spec.map.signed() {
                    flags |= FLAG_SIGNED;
                }
                if spec.rounding == Rounding::Stochastic {
                    flags |= FLAG_STOCHASTIC;
                }
                out.push(flags);
                out.push(spec.scheme.id());
                match spec.scheme {
                    NormScheme::Block(b) => out.extend_from_slice(&(b as u32).to_le_bytes()),
                    NormScheme::PerAxis(a) => out.push(a as u8),
                    _ => {}
                }
                let scales = p.scales().flat_scales();
                out.extend_from_slice(&(scales.len() as u64).to_le_bytes());
                for s in scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend_from_slice(&(p.payload().len() as u64).to_le_bytes());
                out.extend_from_slice(p.payload());
            }
        }
    }
    Ok(out)
}

fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

/// Save entries to a file.
pub fn save_checkpoint(entries: &[(String, Entry)], path: &Path) -> Result<()> {
    fs::write(path, to_bytes(entries)?)?;
    Ok(())
}

/// Load entries from a file.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Entry)>> {
    from_bytes(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parse entries from bytes.
pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Entry)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected QST4"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = usize::from(r.u16("name length")?);
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(name_pos as u64, "entry name is not UTF-8"))?
            .to_string();
        let tag_pos = r.pos;
        let tag = r.u8("storage tag")?;
        let ndim = usize::from(r.u8("ndim")?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let entry = match tag {
            TAG_FP32 => {
                let len_pos = r.pos;
                let bytes = r.u64("fp32 payload length")? as usize;
                if bytes != 4 * numel {
                    return Err(Error::format(
                        len_pos as u64,
                        format!("fp32 payload of {bytes} bytes, shape {shape:?} needs {}", 4 * numel),
                    ));
                }
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(f64::from(r.f32("fp32 value")?));
                }
                Entry::Fp32(Tensor::new(shape, data)?)
            }
            TAG_PACKED => {
                let bitwidth = r.u8("bitwidth")?;
                let map_id = r.u8("map id")?;
                let flags = r.u8("flags")?;
                let scheme_id_pos = r.pos;
                let scheme_id = r.u8("scheme id")?;
                let scheme = match scheme_id {
                    SCHEME_ID_PER_TENSOR => NormScheme::PerTensor,
                    SCHEME_ID_PER_AXIS => NormScheme::PerAxis(usize::from(r.u8("axis")?)),
                    SCHEME_ID_BLOCK => NormScheme::Block(r.u32("block size")? as usize),
                    SCHEME_ID_RANK1 => NormScheme::Rank1,
                    other => {
                        return Err(Error::format(
                            scheme_id_pos as u64,
                            format!("unknown scheme id {other}"),
                        ))
                    }
                };
                let map = map_from_id(map_id, bitwidth, flags & FLAG_SIGNED != 0)
                    .map_err(|e| Error::format(scheme_id_pos as u64 - 3, e.to_string()))?;
                let rounding = if flags & FLAG_STOCHASTIC != 0 {
                    Rounding::Stochastic
                } else {
                    Rounding::Nearest
                };
                let scale_count = r.u64("scale count")? as usize;
                let mut scales = Vec::with_capacity(scale_count);
                for _ in 0..scale_count {
                    scales.push(r.f32("scale")?);
                }
                let state = ScaleState::from_parts(shape.clone(), scheme, scales)?;
                let payload_pos = r.pos;
                let payload_len = r.u64("payload length")? as usize;
                let payload = r.take(payload_len, "payload")?.to_vec();
                let spec = QuantizerSpec::new(scheme, map, rounding);
                PackedTensor::from_parts(shape, payload, state, spec)
                    .map(Entry::Packed)
                    .map_err(|e| Error::format(payload_pos as u64, e.to_string()))?
            }
            other => {
                return Err(Error::format(
                    tag_pos as u64,
                    format!("unknown storage tag {other}"),
                ))
            }
        };
        entries.push((name, entry));
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after last entry", buf.len() - r.pos),
        ));
    }
    Ok(entries)
}
