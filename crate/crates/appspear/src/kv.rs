//! Embedded key-value store: an ordered in-memory map with an append-only
//! file log for durability.
//!
//! Log entries are `len u32 | !len u32 | op u8 | klen u32 | key | value`,
//! all little-endian, with `op` 1 for put and 2 for delete. Opening a store
//! replays its log; an incomplete final entry is dropped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Seek, SeekFrom, Write};
use std::ops::Bound;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

const PUT: u8 = 1;
const DELETE: u8 = 2;

pub struct KvStore {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
    log: Option<File>,
    path: Option<PathBuf>,
    buf: Vec<u8>,
}

impl KvStore {
    pub fn in_memory() -> Self {
        KvStore { map: BTreeMap::new(), log: None, path: None, buf: Vec::new() }
    }

    /// Opens or creates the store logged at `path`.
    pub fn open(path: &Path) -> io::Result<Self> {
        let mut map = BTreeMap::new();
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let good = replay(&bytes, &mut map)?;
        let mut log = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        if good < bytes.len() {
            log::warn!("{}: dropping {} bytes of torn log tail", path.display(), bytes.len() - good);
            log.set_len(good as u64)?;
        }
        log.seek(SeekFrom::End(0))?;
        Ok(KvStore { map, log: Some(log), path: Some(path.to_owned()), buf: Vec::new() })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn append(&mut self, op: u8, key: &[u8], value: &[u8]) -> io::Result<()> {
        let Some(log) = self.log.as_mut() else { return Ok(()) };
        let len = (1 + 4 + key.len() + value.len()) as u32;
        self.buf.clear();
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(&(!len).to_le_bytes());
        self.buf.push(op);
        self.buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(key);
        self.buf.extend_from_slice(value);
        log.write_all(&self.buf)
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> io::Result<()> {
        self.append(PUT, key, value)?;
        match self.map.get_mut(key) {
            Some(v) => {
                v.clear();
                v.extend_from_slice(value);
            }
            None => {
                self.map.insert(key.to_vec(), value.to_vec());
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Option<&[u8]> {
        self.map.get(key).map(Vec::as_slice)
    }

    /// Returns whether the key was present.
    pub fn delete(&mut self, key: &[u8]) -> io::Result<bool> {
        if !self.map.contains_key(key) {
            return Ok(false);
        }
        self.append(DELETE, key, &[])?;
        self.map.remove(key);
        Ok(true)
    }

    pub fn scan_prefix<'a>(&'a self, prefix: &'a [u8]) -> impl Iterator<Item = (&'a [u8], &'a [u8])> + 'a {
        self.map
            .range::<[u8], _>((Bound::Included(prefix), Bound::Unbounded))
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// SHA-256 over all entries in key order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k);
            h.update((v.len() as u64).to_le_bytes());
            h.update(v);
        }
        h.finalize().into()
    }

    pub fn sync(&mut self) -> io::Result<()> {
        match self.log.as_mut() {
            Some(f) => f.sync_data(),
            None => Ok(()),
        }
    }
}

/// Applies log entries to `map`; returns the length of the valid prefix.
fn replay(bytes: &[u8], map: &mut BTreeMap<Vec<u8>, Vec<u8>>) -> io::Result<usize> {
    let corrupt = |pos: usize| io::Error::new(io::ErrorKind::InvalidData, format!("corrupt store log at byte {pos}"));
    let mut pos = 0;
    while bytes.len() - pos >= 8 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        if u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) != !len {
            return Err(corrupt(pos));
        }
        let Some(body) = bytes.get(pos + 8..pos + 8 + len as usize) else { break };
        if body.len() < 5 {
            return Err(corrupt(pos));
        }
        let klen = u32::from_le_bytes(body[1..5].try_into().unwrap()) as usize;
        let Some(key) = body.get(5..5 + klen) else { return Err(corrupt(pos)) };
        let value = &body[5 + klen..];
        match body[0] {
            PUT => {
                map.insert(key.to_vec(), value.to_vec());
            }
            DELETE => {
                map.remove(key);
            }
            _ => return Err(corrupt(pos)),
        }
        pos += 8 + len as usize;
    }
    Ok(pos)
}
