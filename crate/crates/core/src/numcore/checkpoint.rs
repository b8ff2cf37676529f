//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `LPCK\0\0\0\0`, u32 version, u32 descriptor
//! length, JSON descriptor, u32 parameter count, then per parameter: u16 name
//! length, name bytes, u8 trainable flag, u32 rank, u64 per dimension, and
//! the raw f64 data.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LPCK\0\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write, D: Serialize>(mut w: W, descriptor: &D, params: &ParamSet) -> Result<()> {
    let json = serde_json::to_vec(descriptor).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in p.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * p.tensor.len());
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_checkpoint<R: Read, D: DeserializeOwned>(mut r: R) -> Result<(D, ParamSet)> {
    let magic: [u8; 8] = take(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dlen = u32::from_le_bytes(take(&mut r)?) as usize;
    let mut json = vec![0u8; dlen];
    r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    let descriptor = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let [flag] = take::<_, 1>(&mut r)?;
        let rank = u32::from_le_bytes(take(&mut r)?) as usize;
        if rank > 8 {
            return Err(Error::Format(format!("parameter '{name}' has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
        params.push(name, Tensor::new(shape, data)?, flag != 0)?;
    }
    Ok((descriptor, params))
}

/// Reads a checkpoint and checks every name and shape against `expected`.
pub fn read_checkpoint_matching<R: Read, D: DeserializeOwned>(r: R, expected: &ParamSet) -> Result<(D, ParamSet)> {
    let (d, params) = read_checkpoint(r)?;
    expected.check_same_layout(&params)?;
    Ok((d, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2), true).unwrap();
        p.push("mean", Tensor::filled(&[3], 0.5), false).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &serde_json::json!({"seed": 3}), &p).unwrap();
        let (d, q): (serde_json::Value, _) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(d["seed"], 3);
        assert_eq!(p, q);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &(), &p).unwrap();
        let mut other = ParamSet::new();
        other.push("w", Tensor::zeros(&[3, 2]), true).unwrap();
        other.push("mean", Tensor::zeros(&[3]), false).unwrap();
        let err = read_checkpoint_matching::<_, ()>(buf.as_slice(), &other).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &(), &sample()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_checkpoint::<_, ()>(buf.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint::<_, ()>(&b"XXXXXXXXXXXX"[..]), Err(Error::Format(_))));
    }
}
