//! Binary encoding shared by checkpoints and payloads.
//!
//! ```text
//! magic    b"FPET"
//! version  u16
//! kind     u8    0 = checkpoint, 1 = payload
//! width    u8    bytes per scalar, 4 or 8
//! config   checkpoints only: 7 × u32 extents, f64 dropout, u8 precision
//! count    u32
//! record   u16 name length, name bytes, u8 ndim, ndim × u32 extents,
//!          scalars little-endian
//! ```
//! Width 8 round-trips bit-exactly; width 4 stores `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use fedpet_autodiff::{Precision, Tensor};

use crate::delta::Payload;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};

pub const MAGIC: &[u8; 4] = b"FPET";
pub const VERSION: u16 = 1;
const KIND_CHECKPOINT: u8 = 0;
const KIND_PAYLOAD: u8 = 1;
const PREAMBLE: usize = 4 + 2 + 1 + 1;
const CONFIG_RECORD: usize = 7 * 4 + 8 + 1;

/// Bytes of the fixed payload framing (everything but the records).
pub const PAYLOAD_HEADER: usize = PREAMBLE + 4;

/// Framing bytes of one record, excluding its scalars.
pub fn record_overhead(name: &str, ndim: usize) -> usize {
    2 + name.len() + 1 + 4 * ndim
}

/// Encoded size of a payload with these tensor names and shapes.
pub fn payload_len<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize])>, width: usize) -> usize {
    PAYLOAD_HEADER
        + entries
            .into_iter()
            .map(|(n, s)| record_overhead(n, s.len()) + width * s.iter().product::<usize>())
            .sum::<usize>()
}

fn check_width(width: usize) -> Result<()> {
    if width == 4 || width == 8 {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported scalar width {width}")))
    }
}

fn put_records<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>, width: usize) -> Result<()> {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            if width == 8 {
                out.extend_from_slice(&v.to_le_bytes());
            } else {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(())
}

fn preamble(kind: u8, width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.push(width as u8);
    out
}

pub fn encode_payload(payload: &Payload, width: usize) -> Result<Vec<u8>> {
    check_width(width)?;
    let mut out = preamble(KIND_PAYLOAD, width);
    put_records(&mut out, payload.entries().iter().map(|(n, t)| (n.as_str(), t)), width)?;
    Ok(out)
}

pub fn encode_checkpoint(store: &ParameterStore, width: usize) -> Result<Vec<u8>> {
    check_width(width)?;
    let mut out = preamble(KIND_CHECKPOINT, width);
    let c = store.config();
    for v in [
        c.vocab_size,
        c.max_positions,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.n_labels,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("extent {v} too large")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    out.push(match c.precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    });
    put_records(&mut out, store.iter().collect::<Vec<_>>().into_iter(), width)?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_preamble(r: &mut Reader<'_>, want_kind: u8) -> Result<usize> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != want_kind {
        return Err(Error::Format(format!("expected kind {want_kind}, found {kind}")));
    }
    let width = r.u8()? as usize;
    check_width(width)?;
    Ok(width)
}

fn read_records(r: &mut Reader<'_>, width: usize) -> Result<Vec<(String, Tensor)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("extent overflow".into()))?;
        let raw = r.take(numel.checked_mul(width).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data: Vec<f64> = if width == 8 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(out)
}

pub fn decode_payload(bytes: &[u8]) -> Result<Payload> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let width = read_preamble(&mut r, KIND_PAYLOAD)?;
    Payload::new(read_records(&mut r, width)?)
}

/// Decodes a checkpoint into a fully frozen store.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let width = read_preamble(&mut r, KIND_CHECKPOINT)?;
    let mut ext = [0usize; 7];
    for e in ext.iter_mut() {
        *e = r.u32()? as usize;
    }
    let dropout = r.f64()?;
    let precision = match r.u8()? {
        8 => Precision::F64,
        4 => Precision::F32,
        p => return Err(Error::Format(format!("unknown precision tag {p}"))),
    };
    let config = ModelConfig {
        vocab_size: ext[0],
        max_positions: ext[1],
        d_model: ext[2],
        n_layers: ext[3],
        n_heads: ext[4],
        d_ff: ext[5],
        n_labels: ext[6],
        dropout,
        precision,
    };
    let records = read_records(&mut r, width)?;
    let n = records.len();
    let tensors: BTreeMap<String, Tensor> = records.into_iter().collect();
    if tensors.len() != n {
        return Err(Error::Format("duplicate tensor names".into()));
    }
    ParameterStore::from_tensors(config, tensors)
}

pub fn write_checkpoint(path: &Path, store: &ParameterStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, 8)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterStore> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Length of the fixed checkpoint framing before the record count.
pub const CHECKPOINT_HEADER: usize = PREAMBLE + CONFIG_RECORD;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{attach, extract_efficient, DeltaSpec, LoraTarget};
    use crate::model::build;

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let s = build(&ModelConfig::default(), 8).unwrap();
        let bytes = encode_checkpoint(&s, 8).unwrap();
        assert!(decode_checkpoint(&bytes).unwrap().bits_eq(&s));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&p, &s).unwrap();
        assert!(read_checkpoint(&p).unwrap().bits_eq(&s));
    }

    #[test]
    fn payload_length_formula_matches_encoding() {
        let mut s = build(&ModelConfig::default(), 8).unwrap();
        let d = attach(&mut s, &DeltaSpec::lora(4, 8.0, &[LoraTarget::Q, LoraTarget::V]), 0).unwrap();
        let p = extract_efficient(&s, &d).unwrap();
        for width in [4, 8] {
            let bytes = encode_payload(&p, width).unwrap();
            let want = payload_len(p.entries().iter().map(|(n, t)| (n.as_str(), t.shape())), width);
            assert_eq!(bytes.len(), want);
        }
        assert!(decode_payload(&encode_payload(&p, 8).unwrap()).unwrap().bits_eq(&p));
        let narrow = decode_payload(&encode_payload(&p, 4).unwrap()).unwrap();
        assert!(narrow.max_abs_diff(&p) < 1e-6);
    }

    #[test]
    fn corrupt_input_rejected() {
        let s = build(&ModelConfig::default(), 8).unwrap();
        let bytes = encode_checkpoint(&s, 8).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_payload(&bytes).is_err());
        assert!(encode_checkpoint(&s, 2).is_err());
    }
}
