//! Binary weight files.
//!
//! Little-endian, no padding:
//!
//! ```text
//! "VFFM"  u32 version (1)  u32 tensor count
//! per tensor:
//!   u32 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndim, u32 dims…,
//!   row-major f32 data
//! ```
//!
//! Double-precision weights are narrowed to `f32` on save.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelWeights;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"VFFM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Serialises `w` into the weight file format.
pub fn encode_weights<T: Float>(w: &ModelWeights<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(w.len(), "tensor count")?.to_le_bytes());
    for (name, t) in w.iter() {
        out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Config(format!("{name}: too many dimensions")))?;
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} {n} does not fit in u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses the weight file format.
pub fn decode_weights<T: Float>(bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, expected \"VFFM\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut w = ModelWeights::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start as u64 + 4,
                message: "name is not UTF-8".into(),
            })?
            .to_owned();
        if w.contains(&name) {
            return Err(Error::Format {
                offset: start as u64,
                message: format!("duplicate tensor name {name}"),
            });
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            r.pos -= 1;
            return Err(r.fail(format!("unsupported dtype {dtype}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(n, "tensor data")?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: start as u64,
            message: e.to_string(),
        })?;
        w.insert(name, t)?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(w)
}

pub fn save_weights<T: Float>(w: &ModelWeights<T>, path: &Path) -> Result<()> {
    let bytes = encode_weights(w)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Float>(path: &Path) -> Result<ModelWeights<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelWeights<f32> {
        let mut w = ModelWeights::new();
        w.insert("a.weight", Tensor::from_f64(&[2, 3], &[1., -2., 3.5, 0., 1e-30, -7.25]).unwrap())
            .unwrap();
        w.insert("b", Tensor::scalar(f32::MAX)).unwrap();
        w
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let back: ModelWeights<f32> = decode_weights(&encode_weights(&w).unwrap()).unwrap();
        assert_eq!(back, w);
        for ((n1, t1), (n2, t2)) in w.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let empty: ModelWeights<f32> = decode_weights(&encode_weights(&ModelWeights::<f32>::new()).unwrap()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn layout_of_header() {
        let bytes = encode_weights(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"VFFM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &8u32.to_le_bytes());
        assert_eq!(&bytes[16..24], b"a.weight");
    }

    #[test]
    fn corruption_reports_offset() {
        let good = encode_weights(&sample()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_weights::<f32>(&bad), Err(Error::Format { offset: 4, .. })));
        let cut = &good[..good.len() - 3];
        assert!(matches!(decode_weights::<f32>(cut), Err(Error::Format { .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(decode_weights::<f32>(&long).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut w = ModelWeights::<f32>::new();
        w.insert("x", Tensor::scalar(1.0)).unwrap();
        let one = encode_weights(&w).unwrap();
        let record = &one[12..];
        let mut dup = one[..8].to_vec();
        dup.extend_from_slice(&2u32.to_le_bytes());
        dup.extend_from_slice(record);
        dup.extend_from_slice(record);
        let err = decode_weights::<f32>(&dup).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == 12 + record.len() as u64));
    }
}
