//! FSM1 parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FSM1"
//! u32 parameter count
//! per parameter: u32 name length, UTF-8 name, u32 rank, u64 extents…,
//!                u32 dtype length, dtype ("f32")
//! per parameter, in manifest order: raw f32 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FSM1";

pub fn write_params<T: Scalar, W: Write>(params: &ParamSet<T>, mut out: W) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        out.write_all(&3u32.to_le_bytes())?;
        out.write_all(b"f32")?;
    }
    for t in params.tensors() {
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} more bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }
}

/// Parse a checkpoint; `path` is only used for diagnostics.
pub fn read_params<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamSet<T>> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected FSM1"));
    }
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = c.string()?;
        if dtype != "f32" {
            return Err(c.err(format!("unsupported dtype {dtype}")));
        }
        manifest.push((name, shape));
    }
    let mut params = ParamSet::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::from_f32(f32::from_le_bytes(b.try_into().expect("4 bytes"))).expect("f32 converts"))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.err(e.to_string()))?;
        if params.id_of(&name).is_some() {
            return Err(c.err(format!("duplicate parameter {name}")));
        }
        params.add(name, t);
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(params)
}

pub fn save<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_params(params, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_params(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.add(
            "enc.w",
            Tensor::new([2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap(),
        );
        ps.add("enc.b", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap());
        ps
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ps = sample();
        let mut buf = Vec::new();
        write_params(&ps, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FSM1");
        let back: ParamSet<f32> = read_params(&buf, Path::new("mem")).unwrap();
        assert_eq!(back.names(), ps.names());
        for (a, b) in back.tensors().iter().zip(ps.tensors()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let mut buf = Vec::new();
        write_params(&sample(), &mut buf).unwrap();
        let err = read_params::<f32>(&buf[..buf.len() - 2], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        buf[0] = b'X';
        assert!(read_params::<f32>(&buf, Path::new("x"))
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }
}
