//! `PALEMB1` embedding files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"PALEMB1\0"  u32 dim  u32 count  count x (u64 image_id, dim x f32)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PalError, Result};
use crate::types::ImageId;

pub const MAGIC: &[u8; 8] = b"PALEMB1\0";

/// Image embeddings keyed by image id. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    rows: BTreeMap<ImageId, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: impl IntoIterator<Item = (ImageId, Vec<f32>)>) -> Result<Self> {
        let mut store = EmbeddingStore::new(dim);
        for (id, v) in rows {
            store.insert(id, v)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, image_id: ImageId, vector: Vec<f32>) -> Result<()> {
        if self.dim == 0 {
            return Err(PalError::Validation("embedding dim must be positive".into()));
        }
        if vector.len() != self.dim {
            return Err(PalError::Validation(format!(
                "embedding for image {image_id} has length {}, expected dim {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(PalError::Validation(format!(
                "embedding for image {image_id} contains NaN or Inf"
            )));
        }
        if self.rows.contains_key(&image_id) {
            return Err(PalError::Validation(format!("duplicate embedding for image {image_id}")));
        }
        self.rows.insert(image_id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, image_id: ImageId) -> Option<&[f32]> {
        self.rows.get(&image_id).map(Vec::as_slice)
    }

    pub fn require(&self, image_id: ImageId) -> Result<&[f32]> {
        self.get(image_id).ok_or(PalError::MissingEmbedding(image_id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &[f32])> {
        self.rows.iter().map(|(&id, v)| (id, v.as_slice()))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            PalError::Validation(format!("truncated embedding file while reading {what}"))
        } else {
            PalError::Validation(format!("reading {what}: {e}"))
        }
    })
}

pub fn read_embeddings(mut r: impl Read) -> Result<EmbeddingStore> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(PalError::Validation("not a PALEMB1 file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "dim")?;
    let dim = u32::from_le_bytes(word) as usize;
    read_exact(&mut r, &mut word, "count")?;
    let count = u32::from_le_bytes(word) as usize;
    if dim == 0 {
        return Err(PalError::Validation("embedding dim must be positive".into()));
    }
    let mut store = EmbeddingStore::new(dim);
    let mut id_buf = [0u8; 8];
    let mut vec_buf = vec![0u8; dim * 4];
    for i in 0..count {
        read_exact(&mut r, &mut id_buf, &format!("record {i}"))?;
        read_exact(&mut r, &mut vec_buf, &format!("record {i}"))?;
        let v = vec_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(u64::from_le_bytes(id_buf), v)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| PalError::Validation(e.to_string()))? != 0 {
        return Err(PalError::Validation(format!(
            "dim mismatch: data continues past the {count} declared records"
        )));
    }
    Ok(store)
}

pub fn write_embeddings(store: &EmbeddingStore, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.dim as u32).to_le_bytes())?;
    w.write_all(&(store.rows.len() as u32).to_le_bytes())?;
    for (id, v) in &store.rows {
        w.write_all(&id.to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PalError::io(path, e))?;
    read_embeddings(BufReader::new(file)).map_err(|e| e.context(path.display().to_string()))
}

pub fn save_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PalError::io(path, e))?;
    write_embeddings(store, BufWriter::new(file)).map_err(|e| PalError::io(path, e))
}
