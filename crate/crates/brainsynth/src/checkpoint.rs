//! Checkpoint persistence: a binary weight blob plus a JSON manifest.
//!
//! Blob layout (all little-endian): magic `BSNN`, format version `u32`,
//! element size `u8` (4 = f32, 8 = f64), tensor count `u32`, then per tensor
//! a length-prefixed UTF-8 name, `u8` ndim, `u32` dims and raw element bytes.
//! Weights round-trip bitwise.

use crate::tensor::{Arr, ParamStore, Scalar};
use crate::{Error, Result};
use ndarray::IxDyn;
use serde::{de::DeserializeOwned, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BSNN";
const VERSION: u32 = 1;

fn elem_size<F: Scalar>() -> u8 {
    std::mem::size_of::<F>() as u8
}

fn write_elem<F: Scalar>(out: &mut Vec<u8>, v: F) {
    if elem_size::<F>() == 4 {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    } else {
        out.extend_from_slice(&v.to_f64().to_le_bytes());
    }
}

fn read_elem<F: Scalar>(bytes: &[u8], off: usize) -> F {
    if elem_size::<F>() == 4 {
        F::fl(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64)
    } else {
        F::fl(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()))
    }
}

/// Serializes named tensors to a blob file (atomic write).
pub fn save_blob<F: Scalar>(path: &Path, entries: &[(String, &Arr<F>)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(elem_size::<F>());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, arr) in entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(arr.ndim() as u8);
        for d in arr.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in arr.iter() {
            write_elem(&mut out, *v);
        }
    }
    let tmp = path.with_extension("bin.tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads all named tensors from a blob file.
pub fn load_blob<F: Scalar>(path: &Path) -> Result<Vec<(String, Arr<F>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let err = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return Err(err("not a checkpoint blob"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(&format!("unsupported blob version {version}")));
    }
    if bytes[8] != elem_size::<F>() {
        return Err(err(&format!(
            "element size {} does not match expected {}",
            bytes[8],
            elem_size::<F>()
        )));
    }
    let n = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let mut off = 13;
    let esz = elem_size::<F>() as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        if off + 2 > bytes.len() {
            return Err(err("truncated"));
        }
        let name_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        let name = String::from_utf8(bytes[off..off + name_len].to_vec())
            .map_err(|_| err("bad tensor name"))?;
        off += name_len;
        let ndim = bytes[off] as usize;
        off += 1;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let len: usize = dims.iter().product();
        if off + len * esz > bytes.len() {
            return Err(err("truncated tensor data"));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            data.push(read_elem::<F>(&bytes, off + i * esz));
        }
        off += len * esz;
        entries.push((name, Arr::from_shape_vec(IxDyn(&dims), data).unwrap()));
    }
    Ok(entries)
}

/// Saves a parameter store (plus any extra named tensors, e.g. optimizer
/// moments) to `path`.
pub fn save_params<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    extra: &[(String, &Arr<F>)],
) -> Result<()> {
    let mut entries: Vec<(String, &Arr<F>)> = store
        .iter()
        .map(|(n, a)| (n.to_string(), a))
        .collect();
    entries.extend(extra.iter().map(|(n, a)| (n.clone(), *a)));
    save_blob(path, &entries)
}

/// Restores parameter values by name into an already-constructed store and
/// returns the remaining (extra) tensors.
pub fn load_params<F: Scalar>(
    path: &Path,
    store: &mut ParamStore<F>,
) -> Result<Vec<(String, Arr<F>)>> {
    let entries = load_blob::<F>(path)?;
    let mut extra = Vec::new();
    let mut seen = 0usize;
    for (name, arr) in entries {
        match store.id_of(&name) {
            Some(id) => {
                if store.value(id).shape() != arr.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{}: tensor {name} has shape {:?}, expected {:?}",
                        path.display(),
                        arr.shape(),
                        store.value(id).shape()
                    )));
                }
                *store.value_mut(id) = arr;
                seen += 1;
            }
            None => extra.push((name, arr)),
        }
    }
    if seen != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {seen} of {} parameters restored",
            path.display(),
            store.len()
        )));
    }
    Ok(extra)
}

/// Writes a JSON manifest next to a checkpoint blob (atomic).
pub fn save_manifest<M: Serialize>(path: &Path, manifest: &M) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_manifest<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&json)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_arr;
    use crate::util::rng_for;

    #[test]
    fn blob_roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let mut rng = rng_for(1, "ckpt", 0);
        let a: Arr<f32> = randn_arr(&[3, 4, 2], 1.0, &mut rng);
        let b: Arr<f32> = randn_arr(&[7], 0.3, &mut rng);
        save_blob(&path, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let loaded = load_blob::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].1, b);
        // Bytes are stable across save calls.
        let path2 = dir.path().join("w2.bin");
        save_blob(&path2, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn param_store_roundtrip_restores_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut rng = rng_for(2, "ckpt", 0);
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("layer.w", randn_arr(&[4, 4], 1.0, &mut rng));
        store.add("layer.b", randn_arr(&[4], 1.0, &mut rng));
        let m: Arr<f32> = randn_arr(&[4, 4], 1.0, &mut rng);
        save_params(&path, &store, &[("adam.m.layer.w".into(), &m)]).unwrap();

        let mut fresh: ParamStore<f32> = ParamStore::new();
        fresh.add("layer.w", Arr::zeros(ndarray::IxDyn(&[4, 4])));
        fresh.add("layer.b", Arr::zeros(ndarray::IxDyn(&[4])));
        let extra = load_params(&path, &mut fresh).unwrap();
        assert_eq!(fresh.value(fresh.id_of("layer.w").unwrap()), store.value(store.id_of("layer.w").unwrap()));
        assert_eq!(extra.len(), 1);
        assert_eq!(extra[0].0, "adam.m.layer.w");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let a: Arr<f64> = Arr::zeros(ndarray::IxDyn(&[2]));
        save_blob(&path, &[("a".into(), &a)]).unwrap();
        assert!(load_blob::<f32>(&path).is_err());
    }
}
