//! Append-only prompt memory.
//!
//! File layout: the 8-byte magic `GSPMEM\r\n`, a little-endian `u16`
//! format version, then one frame per record: `u32` payload length,
//! the JSON-encoded [`PromptRecord`], and the SHA-256 of the payload.
//! The in-memory index is rebuilt from the frames when the store opens.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{cosine_similarity, ExperienceError, PromptRecord};
use crate::imaging::ImageHandle;
use crate::providers::{Embedder, EmbeddingVector};

pub const STORE_MAGIC: &[u8; 8] = b"GSPMEM\r\n";
pub const STORE_VERSION: u16 = 1;
const HEADER_LEN: u64 = 10;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryHit {
    pub record: PromptRecord,
    /// Cosine similarity between the query image and the stored image.
    pub similarity: f64,
}

#[derive(Debug)]
pub struct MemoryStore {
    path: Option<PathBuf>,
    records: RwLock<Vec<PromptRecord>>,
    writer: Mutex<Option<File>>,
}

impl MemoryStore {
    /// A store that lives only as long as the value.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: RwLock::new(Vec::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens or creates the store file. A frame cut short at the end of the
    /// file (an interrupted append) is dropped and the file truncated; any
    /// other damage is reported as [`ExperienceError::StoreCorrupt`].
    pub fn open(path: &Path) -> Result<Self, ExperienceError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, valid_len) = if bytes.is_empty() {
            let mut header = STORE_MAGIC.to_vec();
            header.extend_from_slice(&STORE_VERSION.to_le_bytes());
            file.write_all(&header)?;
            file.sync_data()?;
            (Vec::new(), HEADER_LEN)
        } else {
            decode(&bytes)?
        };
        if valid_len < bytes.len() as u64 {
            log::warn!(
                "{}: dropping {} bytes of an interrupted append",
                path.display(),
                bytes.len() as u64 - valid_len
            );
            file.set_len(valid_len)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            records: RwLock::new(records),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<PromptRecord> {
        self.records.read().unwrap().clone()
    }

    /// Persists `rec`, then makes it visible to lookups.
    pub fn put(&self, rec: PromptRecord) -> Result<(), ExperienceError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let frame = encode_frame(&rec);
            file.write_all(&frame)?;
            file.sync_data()?;
        }
        self.records.write().unwrap().push(rec);
        Ok(())
    }

    /// Best stored record for an already-embedded query, if it reaches
    /// `threshold`. Records from another embedding space are skipped; the
    /// first record wins among equal similarities.
    pub fn lookup_vector(&self, query: &EmbeddingVector, threshold: f64) -> Result<Option<MemoryHit>, ExperienceError> {
        let records = self.records.read().unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (i, rec) in records.iter().enumerate() {
            if rec.image_embedding.space_id() != query.space_id() {
                continue;
            }
            let s = cosine_similarity(query, &rec.image_embedding)?;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(best.filter(|&(_, s)| s >= threshold).map(|(i, similarity)| MemoryHit {
            record: records[i].clone(),
            similarity,
        }))
    }

    /// Embeds `image` and looks it up.
    pub fn lookup(
        &self,
        image: &ImageHandle,
        embedder: &dyn Embedder,
        threshold: f64,
    ) -> Result<Option<MemoryHit>, ExperienceError> {
        if self.is_empty() {
            return Ok(None);
        }
        let query = embedder.embed_image(image)?;
        self.lookup_vector(&query, threshold)
    }
}

fn encode_frame(rec: &PromptRecord) -> Vec<u8> {
    let payload = serde_json::to_vec(rec).expect("prompt records serialize");
    let mut frame = Vec::with_capacity(payload.len() + 4 + CHECKSUM_LEN);
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame.extend_from_slice(&Sha256::digest(&payload));
    frame
}

/// Returns the decoded records and the length of the intact prefix.
fn decode(bytes: &[u8]) -> Result<(Vec<PromptRecord>, u64), ExperienceError> {
    if bytes.len() < HEADER_LEN as usize || &bytes[..8] != STORE_MAGIC {
        return Err(ExperienceError::StoreCorrupt("missing magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != STORE_VERSION {
        return Err(ExperienceError::StoreCorrupt(format!(
            "unsupported format version {version}"
        )));
    }
    let mut records = Vec::new();
    let mut pos = HEADER_LEN as usize;
    while pos < bytes.len() {
        let Some(len_bytes) = bytes.get(pos..pos + 4) else {
            break;
        };
        let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let end = pos + 4 + len + CHECKSUM_LEN;
        if end > bytes.len() {
            break;
        }
        let payload = &bytes[pos + 4..pos + 4 + len];
        let checksum = &bytes[pos + 4 + len..end];
        if Sha256::digest(payload).as_slice() != checksum {
            return Err(ExperienceError::StoreCorrupt(format!(
                "checksum mismatch in record {} at byte {pos}",
                records.len()
            )));
        }
        let rec: PromptRecord = serde_json::from_slice(payload)
            .map_err(|e| ExperienceError::StoreCorrupt(format!("record {} does not decode: {e}", records.len())))?;
        records.push(rec);
        pos = end;
    }
    Ok((records, pos as u64))
}
