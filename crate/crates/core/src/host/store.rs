//! Ciphertext storage. Each collection lives in a directory named by its cid
//! holding `manifest.json` and numbered chunk files of at most `chunk_size`
//! ciphertexts each.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::HostError;
use crate::crypto::{sha256, Sealed};
use crate::document::chunk_items;
use crate::enclave::SealedCollection;
use crate::ids::{CollectionId, DocumentId};
use crate::query::{Catalog, CatalogEntry};
use crate::wire::{decode_blobs, encode_blobs};

pub const DEFAULT_CHUNK_SIZE: usize = 128;

/// Public metadata of a stored collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionManifest {
    pub name: String,
    pub cid: CollectionId,
    pub schema: BTreeSet<String>,
    pub count: usize,
    pub chunk_size: usize,
}

struct StoredCollection {
    manifest: CollectionManifest,
    docs: Vec<(DocumentId, Sealed)>,
    index: HashSet<DocumentId>,
}

pub fn document_id(ct: &Sealed) -> DocumentId {
    DocumentId(sha256(&ct.to_bytes()))
}

pub struct EncryptedStore {
    root: Option<PathBuf>,
    chunk_size: usize,
    collections: Mutex<BTreeMap<CollectionId, StoredCollection>>,
}

impl EncryptedStore {
    pub fn in_memory() -> Self {
        Self { root: None, chunk_size: DEFAULT_CHUNK_SIZE, collections: Mutex::new(BTreeMap::new()) }
    }

    /// Opens (or creates) a store rooted at `root`, loading and verifying
    /// every collection found there.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, HostError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut collections = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let dir = entry?.path();
            if !dir.join("manifest.json").is_file() {
                continue;
            }
            let stored = load_collection(&dir)?;
            collections.insert(stored.manifest.cid, stored);
        }
        Ok(Self { root: Some(root), chunk_size: DEFAULT_CHUNK_SIZE, collections: Mutex::new(collections) })
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<CollectionId, StoredCollection>> {
        self.collections.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers a collection. Re-creating one with the same manifest is a
    /// no-op.
    pub fn create(
        &self,
        name: &str,
        cid: CollectionId,
        schema: BTreeSet<String>,
    ) -> Result<(), HostError> {
        if CollectionId::for_name(name) != cid {
            return Err(HostError::Integrity(format!("collection id does not match name {name}")));
        }
        let mut map = self.lock();
        if let Some(existing) = map.get(&cid) {
            if existing.manifest.schema == schema {
                return Ok(());
            }
            return Err(HostError::Integrity(format!("collection {name} exists with another schema")));
        }
        let manifest =
            CollectionManifest { name: name.into(), cid, schema, count: 0, chunk_size: self.chunk_size };
        let stored = StoredCollection { manifest, docs: Vec::new(), index: HashSet::new() };
        self.persist(&stored, 0)?;
        map.insert(cid, stored);
        Ok(())
    }

    /// Appends a ciphertext. Returns `false` when the identical document was
    /// already stored.
    pub fn store(&self, cid: &CollectionId, did: &DocumentId, ct: &Sealed) -> Result<bool, HostError> {
        if &document_id(ct) != did {
            return Err(HostError::Integrity("document id does not match ciphertext hash".into()));
        }
        let mut map = self.lock();
        let stored = map.get_mut(cid).ok_or_else(|| HostError::NotFound(format!("collection {cid}")))?;
        if stored.index.contains(did) {
            return Ok(false);
        }
        stored.index.insert(*did);
        stored.docs.push((*did, ct.clone()));
        stored.manifest.count = stored.docs.len();
        let first_dirty = (stored.docs.len() - 1) / stored.manifest.chunk_size;
        self.persist(stored, first_dirty)?;
        Ok(true)
    }

    pub fn get(&self, cid: &CollectionId) -> Option<Vec<(DocumentId, Sealed)>> {
        self.lock().get(cid).map(|s| s.docs.clone())
    }

    pub fn manifests(&self) -> Vec<CollectionManifest> {
        self.lock().values().map(|s| s.manifest.clone()).collect()
    }

    pub fn catalog(&self) -> Catalog {
        self.lock()
            .values()
            .map(|s| {
                let m = &s.manifest;
                (m.name.clone(), CatalogEntry { cid: m.cid, schema: m.schema.clone() })
            })
            .collect()
    }

    pub fn sealed_by_name(&self, name: &str) -> Result<SealedCollection, HostError> {
        let map = self.lock();
        let stored = map
            .get(&CollectionId::for_name(name))
            .ok_or_else(|| HostError::NotFound(format!("collection {name}")))?;
        Ok(SealedCollection {
            name: stored.manifest.name.clone(),
            cid: stored.manifest.cid,
            docs: stored.docs.iter().map(|(_, ct)| ct.clone()).collect(),
        })
    }

    /// Rewrites the manifest and chunk files from index `first_dirty` on.
    fn persist(&self, stored: &StoredCollection, first_dirty: usize) -> Result<(), HostError> {
        let Some(root) = &self.root else { return Ok(()) };
        let dir = root.join(stored.manifest.cid.to_hex());
        fs::create_dir_all(&dir)?;
        let chunks = chunk_items(&stored.docs, stored.manifest.chunk_size)
            .map_err(|e| HostError::Integrity(e.to_string()))?;
        for (k, chunk) in chunks.iter().enumerate().skip(first_dirty) {
            let bytes: Vec<Vec<u8>> = chunk.iter().map(|(_, ct)| ct.to_bytes()).collect();
            write_atomic(&dir.join(chunk_file_name(k + 1)), &encode_blobs(bytes.iter().map(Vec::as_slice)))?;
        }
        let manifest = serde_json::to_vec_pretty(&stored.manifest).expect("manifests serialize");
        write_atomic(&dir.join("manifest.json"), &manifest)
    }
}

pub fn chunk_file_name(index: usize) -> String {
    format!("{index:06}.ct")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HostError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_collection(dir: &Path) -> Result<StoredCollection, HostError> {
    let manifest: CollectionManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| HostError::Integrity(format!("bad manifest in {}: {e}", dir.display())))?;
    let files = manifest.count.div_ceil(manifest.chunk_size.max(1));
    let mut docs = Vec::with_capacity(manifest.count);
    let mut index = HashSet::new();
    for k in 1..=files {
        let bytes = fs::read(dir.join(chunk_file_name(k)))?;
        for blob in decode_blobs(&bytes).map_err(|e| HostError::Integrity(e.to_string()))? {
            let ct = Sealed::from_bytes(blob)
                .map_err(|_| HostError::Integrity(format!("bad ciphertext in {}", dir.display())))?;
            let did = document_id(&ct);
            index.insert(did);
            docs.push((did, ct));
        }
    }
    if docs.len() != manifest.count {
        return Err(HostError::Integrity(format!("{} holds {} documents, manifest says {}", dir.display(), docs.len(), manifest.count)));
    }
    Ok(StoredCollection { manifest, docs, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::AeadKey;

    fn ct(i: u8) -> Sealed {
        AeadKey::from_bytes([7; 32]).seal(&[i], b"")
    }

    #[test]
    fn store_checks_ids_and_is_idempotent() {
        let s = EncryptedStore::in_memory();
        let cid = CollectionId::for_name("C1");
        s.create("C1", cid, ["A".to_string()].into()).unwrap();
        let c = ct(1);
        let did = document_id(&c);
        assert!(s.store(&cid, &did, &c).unwrap());
        assert!(!s.store(&cid, &did, &c).unwrap());
        assert_eq!(s.get(&cid).unwrap().len(), 1);
        let other = ct(2);
        assert!(matches!(s.store(&cid, &did, &other), Err(HostError::Integrity(_))));
        assert!(matches!(
            s.store(&CollectionId::for_name("C9"), &document_id(&other), &other),
            Err(HostError::NotFound(_))
        ));
        assert!(matches!(s.create("C2", cid, BTreeSet::new()), Err(HostError::Integrity(_))));
    }

    #[test]
    fn disk_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cid = CollectionId::for_name("C1");
        let cts: Vec<Sealed> = (0..7).map(ct).collect();
        {
            let s = EncryptedStore::open(dir.path()).unwrap().with_chunk_size(3);
            s.create("C1", cid, ["A".to_string()].into()).unwrap();
            for c in &cts {
                s.store(&cid, &document_id(c), c).unwrap();
            }
        }
        let cdir = dir.path().join(cid.to_hex());
        let mut names: Vec<String> = fs::read_dir(&cdir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["000001.ct", "000002.ct", "000003.ct", "manifest.json"]);
        let s = EncryptedStore::open(dir.path()).unwrap();
        let docs: Vec<Sealed> = s.get(&cid).unwrap().into_iter().map(|(_, c)| c).collect();
        assert_eq!(docs, cts);
        assert_eq!(s.manifests()[0].count, 7);
    }
}
