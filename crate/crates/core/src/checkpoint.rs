//! Checkpoint archive: a single file holding a JSON header plus named f64
//! tensors. Writes are atomic (temp file then rename).

use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::util::atomic_write;

const MAGIC: &[u8; 8] = b"ARTCKPT1";

pub fn save_archive(
    path: &Path,
    header: &serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_archive(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated archive".to_string()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let header_len = read_u64(&mut cur)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cur.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".to_string()))?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)?;
    let n = read_u64(&mut cur)? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".to_string()))?;
        let ndim = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut cur)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint("truncated tensor data".to_string()))?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok((header, tensors))
}

fn read_u64(cur: &mut Cursor<Vec<u8>>) -> Result<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated u64".to_string()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(cur: &mut Cursor<Vec<u8>>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated u32".to_string()))?;
    Ok(u32::from_le_bytes(b))
}

/// Store -> named tensors, in registration order.
pub fn store_tensors(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

/// Load named tensors into an already-initialized store; every store entry
/// must be present with a matching shape.
pub fn fill_store(store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    let map: std::collections::HashMap<&str, &Tensor> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for i in 0..store.len() {
        let name = store.name_of(i).to_string();
        let t = map
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if !store.get_idx(i).same_shape(t) {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                store.get_idx(i).shape(),
                t.shape()
            )));
        }
        store.set_idx(i, (*t).clone());
    }
    Ok(())
}
