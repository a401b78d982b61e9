//! Versioned binary container for named `f64` tensors plus a JSON metadata
//! blob.  Model and threshold-model checkpoints are both stored in this
//! format.  Round-trips are bit-exact: values are written as raw IEEE-754
//! bits, never formatted through text.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RBADCKPT";
const VERSION: u32 = 1;

/// Named tensors + metadata, ordered by name for deterministic files.
#[derive(Debug, Default, Clone)]
pub struct TensorStore {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    pub meta: serde_json::Value,
}

impl TensorStore {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor entry '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;

        let meta_bytes = serde_json::to_vec(&self.meta)
            .map_err(|e| Error::CheckpointFormat(format!("metadata encode: {e}")))?;
        w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
        w.write_all(&meta_bytes)?;

        w.write_u64::<LittleEndian>(self.tensors.len() as u64)?;
        for (name, tensor) in &self.tensors {
            let name_bytes = name.as_bytes();
            w.write_u64::<LittleEndian>(name_bytes.len() as u64)?;
            w.write_all(name_bytes)?;
            w.write_u8(tensor.ndim() as u8)?;
            for &d in tensor.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in tensor.iter() {
                w.write_u64::<LittleEndian>(v.to_bits())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(format!("checkpoint not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::CheckpointFormat("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::CheckpointFormat(
                "bad magic bytes; not a checkpoint file".into(),
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }

        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::CheckpointFormat(format!("metadata decode: {e}")))?;

        let n_tensors = r.read_u64::<LittleEndian>()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n_tensors {
            let name_len = r.read_u64::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(f64::from_bits(r.read_u64::<LittleEndian>()?));
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::CheckpointFormat(format!("tensor '{name}': {e}")))?;
            tensors.insert(name, tensor);
        }
        Ok(Self { tensors, meta })
    }
}
