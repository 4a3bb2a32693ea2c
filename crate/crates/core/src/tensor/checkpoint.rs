//! Parameter checkpoints: a version byte, then one little-endian record per
//! tensor: `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32`
//! payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<W: Write>(params: &ParamStore, mut w: W) -> Result<()> {
    let mut buf = vec![CHECKPOINT_VERSION];
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::format("checkpoint", "truncated record"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let mut bytes = raw.as_slice();
    let version = take(&mut bytes, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while !bytes.is_empty() {
        let name_len = take_u32(&mut bytes)? as usize;
        let name = std::str::from_utf8(take(&mut bytes, name_len)?)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?
            .to_owned();
        let rank = take_u32(&mut bytes)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut bytes)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut bytes, n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_checkpoint(params, fs::File::create(&tmp)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian_records() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        let expect: Vec<u8> = [
            vec![1u8],
            1u32.to_le_bytes().to_vec(),
            b"w".to_vec(),
            2u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
            (-2.5f32).to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(buf, expect);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        assert!(read_checkpoint([2u8].as_slice()).is_err());
        assert!(read_checkpoint([1u8, 5, 0].as_slice()).is_err());
    }
}
