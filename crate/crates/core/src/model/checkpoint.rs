//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! b"DFM1"
//! u32 input_dim
//! u32 num_hidden, then u32 width per hidden layer
//! u32 num_classes
//! u32 time_features
//! u32 class_embed_dim
//! u64 parameter count
//! f64 x parameter count
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, VelocityField};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFM1";

pub fn to_bytes(model: &VelocityField) -> Vec<u8> {
    let arch = model.architecture();
    let params = model.parameters();
    let mut out = Vec::with_capacity(4 + 4 * (5 + arch.hidden.len()) + 8 + 8 * params.len());
    out.extend_from_slice(MAGIC);
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(arch.input_dim);
    put(arch.hidden.len());
    for &h in &arch.hidden {
        put(h);
    }
    put(arch.num_classes);
    put(arch.time_features);
    put(arch.class_embed_dim);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedCheckpoint(format!(
                "expected {n} bytes for {what} at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<VelocityField> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let input_dim = cur.u32("input_dim")?;
    let num_hidden = cur.u32("num_hidden")?;
    if num_hidden > 1024 {
        return Err(Error::CorruptCheckpoint(format!("{num_hidden} hidden layers")));
    }
    let hidden = (0..num_hidden)
        .map(|_| cur.u32("hidden width"))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        input_dim,
        hidden,
        num_classes: cur.u32("num_classes")?,
        time_features: cur.u32("time_features")?,
        class_embed_dim: cur.u32("class_embed_dim")?,
    };
    arch.validate()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let count = u64::from_le_bytes(cur.take(8, "parameter count")?.try_into().expect("8 bytes"));
    if count != arch.parameter_count() as u64 {
        return Err(Error::CorruptCheckpoint(format!(
            "header declares {count} parameters, architecture needs {}",
            arch.parameter_count()
        )));
    }
    let raw = cur.take(8 * count as usize, "parameters")?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if cur.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    VelocityField::from_parameters(arch, params)
}

pub fn write(model: &VelocityField, mut w: impl Write) -> Result<()> {
    w.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn read(mut r: impl Read) -> Result<VelocityField> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn save(model: &VelocityField, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<VelocityField> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> VelocityField {
        VelocityField::init(
            Architecture {
                input_dim: 2,
                hidden: vec![8, 4],
                num_classes: 3,
                time_features: 2,
                class_embed_dim: 3,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.architecture(), m.architecture());
        let a: Vec<u64> = m.parameters().iter().map(|p| p.to_bits()).collect();
        let b: Vec<u64> = back.parameters().iter().map(|p| p.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&model());
        assert_eq!(&bytes[..4], b"DFM1");
        let words: Vec<u32> = bytes[4..4 + 4 * 7]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![2, 2, 8, 4, 3, 2, 3]);
        let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        assert_eq!(count as usize, model().parameters().len());
        assert_eq!(bytes.len(), 40 + 8 * count as usize);
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let mut bytes = to_bytes(&model());
        let short = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(from_bytes(&short), Err(Error::TruncatedCheckpoint(_))));
        assert!(matches!(from_bytes(&bytes[..10]), Err(Error::TruncatedCheckpoint(_))));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::NotACheckpoint)));
        assert!(matches!(from_bytes(b""), Err(Error::NotACheckpoint)));
    }

    #[test]
    fn inconsistent_parameter_count_is_corrupt() {
        let mut bytes = to_bytes(&model());
        bytes[32] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }
}
