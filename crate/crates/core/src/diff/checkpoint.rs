//! Flat binary checkpoints of named tensors.
//!
//! Layout (all little-endian): u32 tensor count, then per tensor in sorted
//! name order: u32 name length, UTF-8 name, u32 rank, u32 dims, f32 data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::DiffError;

pub fn write_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<(), DiffError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        // BTreeMap iterates in sorted order.
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes to a temp file in the same directory, then renames into place.
pub fn write_checkpoint_atomic(
    path: &Path,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<(), DiffError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
    ));
    write_checkpoint(&tmp, tensors)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>, DiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let count = read_u32(&mut r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(DiffError::Checkpoint(format!("unreasonable name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| DiffError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(DiffError::Checkpoint(format!("unreasonable rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| DiffError::Checkpoint(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DiffError::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut map = BTreeMap::new();
        map.insert("b/w".to_string(), Tensor::from_f64_slice(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        map.insert("a/w".to_string(), Tensor::from_f64_slice(&[1], &[-0.5]).unwrap());
        write_checkpoint_atomic(&path, &map).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (name, t) in &map {
            assert!(back[name].bits_eq(t), "mismatch for {name}");
        }
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut map = BTreeMap::new();
        map.insert("x".to_string(), Tensor::from_f64_slice(&[4], &[1., 2., 3., 4.]).unwrap());
        write_checkpoint(&path, &map).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
