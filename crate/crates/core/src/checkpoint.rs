//! Flat binary record format for parameters and dataset caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  bytes  "PETLCKPT"
//! version u32       currently 1
//! count   u64       number of records
//! record:
//!   id_len    u32
//!   id        id_len bytes, UTF-8
//!   role      u8   (see ParamRole)
//!   trainable u8   (0/1)
//!   ndim      u32
//!   dims      ndim x u64
//!   data      prod(dims) x f64, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{ParamRole, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PETLCKPT";
const VERSION: u32 = 1;

/// One named tensor with its role and trainable flag.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub role: ParamRole,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        let id = r.id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[r.role.to_u8(), u8::from(r.trainable)])?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let numel: usize = r.shape.iter().product();
        if numel != r.data.len() {
            return Err(Error::Contract(format!(
                "record {:?}: shape {:?} vs {} values",
                r.id,
                r.shape,
                r.data.len()
            )));
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|e| Error::Format(e.to_string()))?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let role = ParamRole::from_u8(flags[0])?;
        let trainable = flags[1] != 0;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        records.push(Record { id, role, trainable, shape, data });
    }
    Ok(records)
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

fn record_for(store: &ParamStore, id: &str) -> Record {
    let entry = store.entry(id).expect("id comes from the store");
    Record {
        id: id.to_string(),
        role: entry.role,
        trainable: store.is_trainable(id),
        shape: entry.tensor.shape().to_vec(),
        data: entry.tensor.data().to_vec(),
    }
}

/// Persists every entry of the store.
pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    let records: Vec<Record> = store.ids().map(|id| record_for(store, id)).collect();
    write_records(path, &records)
}

/// Persists only trainable entries plus buffers (batch-norm running
/// statistics), i.e. exactly the state a fine-tuning run produces.
pub fn save_trainable(store: &ParamStore, path: &Path) -> Result<()> {
    let records: Vec<Record> = store
        .ids()
        .filter(|id| store.is_trainable(id) || store.role(id).unwrap() == ParamRole::Buffer)
        .map(|id| record_for(store, id))
        .collect();
    write_records(path, &records)
}

/// Rebuilds a store from a full checkpoint.
pub fn load_store(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for rec in read_records(path)? {
        let tensor = Tensor::new(rec.data, &rec.shape)?;
        store.insert(rec.id.clone(), tensor, rec.role)?;
        if rec.trainable {
            store.mark_trainable(&rec.id)?;
        }
    }
    Ok(store)
}

/// Overwrites matching entries of an existing store from a (possibly
/// partial) checkpoint; shapes must agree and ids must exist.
pub fn apply_records(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    for rec in records {
        let t = store.tensor_mut(&rec.id)?;
        if t.shape() != rec.shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint entry {:?} has shape {:?}, store has {:?}",
                rec.id,
                rec.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("store.ckpt");
        let mut store = ParamStore::new();
        store
            .insert("layer.0.w", Tensor::new(vec![1.5, -2.5, 0.0, 3.25], &[2, 2]).unwrap(), ParamRole::Weight)
            .unwrap();
        store
            .insert("layer.0.b", Tensor::new(vec![0.125], &[1]).unwrap(), ParamRole::Bias)
            .unwrap();
        store.mark_trainable("layer.0.b").unwrap();

        save_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert_eq!(loaded.tensor("layer.0.w").unwrap().data(), store.tensor("layer.0.w").unwrap().data());
        assert!(loaded.is_trainable("layer.0.b"));
        assert!(!loaded.is_trainable("layer.0.w"));
        assert_eq!(loaded.role("layer.0.b").unwrap(), ParamRole::Bias);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PETLCKPT");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format(_))));
    }

    #[test]
    fn trainable_only_checkpoint_keeps_buffers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("petl.ckpt");
        let mut store = ParamStore::new();
        store.insert("frozen.w", Tensor::zeros(&[4]), ParamRole::Weight).unwrap();
        store.insert("adapter.w", Tensor::zeros(&[4]), ParamRole::Weight).unwrap();
        store.insert("adapter.bn.running_mean", Tensor::zeros(&[2]), ParamRole::Buffer).unwrap();
        store.mark_trainable("adapter.w").unwrap();
        save_trainable(&store, &path).unwrap();
        let recs = read_records(&path).unwrap();
        let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["adapter.bn.running_mean", "adapter.w"]);
    }
}
