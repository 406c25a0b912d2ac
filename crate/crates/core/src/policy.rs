//! The owner's access-control list: user id to authorized collection ids.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, Digest256};
use crate::ids::{CollectionId, Uid};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("user id already present in policy")]
    DuplicateUid,
    #[error("user id not found in policy")]
    UnknownUid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub uid: Uid,
    pub cids: BTreeSet<CollectionId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    entries: Vec<PolicyEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PolicyUpdate {
    Add { uid: Uid, cids: BTreeSet<CollectionId> },
    Remove { uid: Uid },
    Modify { uid: Uid, cids: BTreeSet<CollectionId> },
}

impl Policy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn lookup(&self, uid: &Uid) -> Option<&PolicyEntry> {
        self.entries.iter().find(|e| &e.uid == uid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies one update. The policy is left untouched on error.
    pub fn apply(&mut self, update: &PolicyUpdate) -> Result<(), PolicyError> {
        match update {
            PolicyUpdate::Add { uid, cids } => {
                if self.lookup(uid).is_some() {
                    return Err(PolicyError::DuplicateUid);
                }
                self.entries.push(PolicyEntry { uid: *uid, cids: cids.clone() });
            }
            PolicyUpdate::Remove { uid } => {
                let pos = self.position(uid)?;
                self.entries.remove(pos);
            }
            PolicyUpdate::Modify { uid, cids } => {
                let pos = self.position(uid)?;
                self.entries[pos].cids = cids.clone();
            }
        }
        Ok(())
    }

    fn position(&self, uid: &Uid) -> Result<usize, PolicyError> {
        self.entries.iter().position(|e| &e.uid == uid).ok_or(PolicyError::UnknownUid)
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("policy serializes")
    }

    pub fn digest(&self) -> Digest256 {
        sha256(&self.to_canonical_json())
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.uid) {
                return Err(PolicyError::DuplicateUid);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uid(b: u8) -> Uid {
        Uid([b; 32])
    }

    #[test]
    fn add_remove_modify() {
        let mut pol = Policy::new();
        let c1 = CollectionId::for_name("C1");
        pol.apply(&PolicyUpdate::Add { uid: uid(1), cids: [c1].into() }).unwrap();
        assert_eq!(
            pol.apply(&PolicyUpdate::Add { uid: uid(1), cids: BTreeSet::new() }),
            Err(PolicyError::DuplicateUid)
        );
        pol.apply(&PolicyUpdate::Modify { uid: uid(1), cids: BTreeSet::new() }).unwrap();
        assert!(pol.lookup(&uid(1)).unwrap().cids.is_empty());
        let before = pol.clone();
        assert_eq!(
            pol.apply(&PolicyUpdate::Modify { uid: uid(2), cids: BTreeSet::new() }),
            Err(PolicyError::UnknownUid)
        );
        assert_eq!(pol, before);
        pol.apply(&PolicyUpdate::Remove { uid: uid(1) }).unwrap();
        assert!(pol.is_empty());
    }

    #[test]
    fn digest_tracks_content() {
        let mut pol = Policy::new();
        let d0 = pol.digest();
        pol.apply(&PolicyUpdate::Add { uid: uid(3), cids: BTreeSet::new() }).unwrap();
        assert_ne!(d0, pol.digest());
    }
}
