//! Binary artifact formats.
//!
//! MSTN tensor: magic `MSTN`, u32 version=1, u32 rank, rank x u64 dims, then
//! little-endian 32-bit floats row-major. All integers little-endian.
//!
//! MSMD model container: magic `MSMD`, u32 version=1, u32 entry count, then
//! per entry a u32 name length, the UTF-8 name, and an embedded MSTN tensor.
//!
//! MSTN payloads are always 32-bit; saving an f64 tensor narrows it. Reading a
//! file and writing it back is byte-identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MSTN_MAGIC: &[u8; 4] = b"MSTN";
const MSMD_MAGIC: &[u8; 4] = b"MSMD";
const VERSION: u32 = 1;

pub fn write_mstn<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(MSTN_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.to64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mstn(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MSTN_MAGIC {
        return Err(Error::format(format!("bad MSTN magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported MSTN version {version}")));
    }
    let rank = read_u32(r)? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(read_u64(r)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Tensor::new(dims, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_mstn(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_mstn(&mut r)?.cast())
}

/// Ordered named-tensor container. Order is preserved on disk, so writing the
/// same entries twice produces identical bytes.
pub fn write_msmd<T: Scalar>(w: &mut impl Write, entries: &[(String, Tensor<T>)]) -> Result<()> {
    w.write_all(MSMD_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        write_mstn(w, t)?;
    }
    Ok(())
}

pub fn read_msmd(r: &mut impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MSMD_MAGIC {
        return Err(Error::format(format!("bad MSMD magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported MSMD version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("entry name is not UTF-8".to_string()))?;
        let tensor = read_mstn(r)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save_msmd<T: Scalar>(path: impl AsRef<Path>, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_msmd(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_msmd<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_msmd(&mut r)?
        .into_iter()
        .map(|(n, t)| (n, t.cast()))
        .collect())
}

/// Lookup helper for containers read back from disk.
pub fn take_entry<T: Scalar>(
    entries: &mut Vec<(String, Tensor<T>)>,
    name: &str,
) -> Result<Tensor<T>> {
    match entries.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(entries.remove(i).1),
        None => Err(Error::format(format!("container is missing entry {name:?}"))),
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &Tensor<f32>) -> Tensor<f32> {
        let mut buf = Vec::new();
        write_mstn(&mut buf, t).unwrap();
        read_mstn(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn mstn_roundtrip_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0f32, -2.5, 3.25, 0.0, 1e-7, 9.75]).unwrap();
        assert_eq!(roundtrip(&t), t);
    }

    #[test]
    fn mstn_rejects_bad_magic() {
        let mut buf = Vec::new();
        write_mstn(&mut buf, &Tensor::<f32>::zeros(&[2])).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_mstn(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn msmd_roundtrip_preserves_order_and_bytes() {
        let entries = vec![
            ("w".to_string(), Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap()),
            ("b".to_string(), Tensor::new(vec![1], vec![-3.0f32]).unwrap()),
        ];
        let mut buf = Vec::new();
        write_msmd(&mut buf, &entries).unwrap();
        let back = read_msmd(&mut buf.as_slice()).unwrap();
        assert_eq!(back, entries);
        let mut buf2 = Vec::new();
        write_msmd(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut buf = Vec::new();
        write_mstn(&mut buf, &Tensor::<f32>::ones(&[4])).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_mstn(&mut buf.as_slice()).is_err());
    }
}
