//! On-disk index layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "MRAGFLAT"
//! version        u32      1
//! manifest_len   u32
//! manifest       JSON {kb_name, modality, dim, count, embedder_fingerprint}
//! id table       count × (u32 byte length, UTF-8 bytes)
//! vectors        count × dim × f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FlatIndex;
use crate::kb_store::Modality;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MRAGFLAT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub kb_name: String,
    pub modality: Modality,
    pub dim: usize,
    pub count: usize,
    pub embedder_fingerprint: String,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| fmt_err(format!("truncated index: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl FlatIndex {
    pub fn manifest(&self) -> IndexManifest {
        IndexManifest {
            kb_name: self.kb_name.clone(),
            modality: self.modality,
            dim: self.dim,
            count: self.ids.len(),
            embedder_fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(manifest.len() as u32).to_le_bytes())?;
        w.write_all(&manifest)?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for x in &self.rows {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let manifest = read_header(&mut r)?;
        let mut ids = Vec::with_capacity(manifest.count);
        for _ in 0..manifest.count {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)
                .map_err(|e| fmt_err(format!("truncated id table: {e}")))?;
            ids.push(String::from_utf8(buf).map_err(|e| fmt_err(format!("id is not UTF-8: {e}")))?);
        }
        let n = manifest.count * manifest.dim;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| fmt_err(format!("truncated vector block: {e}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| fmt_err(e.to_string()))? != 0 {
            return Err(fmt_err("trailing bytes after vector block"));
        }
        let rows = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FlatIndex::from_parts(
            manifest.kb_name,
            manifest.modality,
            manifest.dim,
            manifest.embedder_fingerprint,
            ids,
            rows,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        FlatIndex::read_from(BufReader::new(file))
    }
}

fn read_header(r: &mut impl Read) -> Result<IndexManifest> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err("file too short for index header"))?;
    if &magic != MAGIC {
        return Err(fmt_err("not an index file (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported index version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| fmt_err(format!("truncated manifest: {e}")))?;
    serde_json::from_slice(&buf).map_err(|e| fmt_err(format!("bad manifest: {e}")))
}

/// Reads only the manifest, without loading vectors.
pub fn read_manifest(path: &Path) -> Result<IndexManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut BufReader::new(file))
}
