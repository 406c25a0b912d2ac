//! On-disk key material and pending requests.
//!
//! A key directory holds `owner.json` (share set, policy, channel state) and
//! one `user-<i>.json` per data user (share, public parameters, last
//! counter). Both are written owner-readable only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zeroize::Zeroizing;

use qshield_core::client::{compile, OwnerContext, PendingQuery, UserContext};
use qshield_core::crypto::UserShare;
use qshield_core::enclave::PublicParams;
use qshield_core::host::QueryRequest;
use qshield_core::query::{compute_endurance, Catalog};

use crate::error::{CliError, Result};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::File { path: path.into(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|_| CliError::Format { path: path.into(), what })
}

/// Writes `bytes` with mode 0600 on unix.
pub fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CliError::File { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut opts, 0o600);
    let mut f = opts.open(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = Zeroizing::new(serde_json::to_vec_pretty(value).expect("cli files serialize"));
    write_private(path, &bytes)
}

pub struct KeyDir(PathBuf);

impl KeyDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self(dir.into())
    }

    pub fn owner_path(&self) -> PathBuf {
        self.0.join("owner.json")
    }

    pub fn user_path(&self, i: usize) -> PathBuf {
        self.0.join(format!("user-{i}.json"))
    }

    pub fn load_owner(&self) -> Result<OwnerContext> {
        let path = self.owner_path();
        let bytes = Zeroizing::new(read_file(&path)?);
        Ok(OwnerContext::load(&bytes)?)
    }

    pub fn save_owner(&self, owner: &OwnerContext) -> Result<()> {
        write_private(&self.owner_path(), &owner.save())
    }

    pub fn load_user(&self, i: usize) -> Result<UserFile> {
        read_json(&self.user_path(i), "user key file")
    }

    pub fn save_user(&self, user: &UserFile) -> Result<()> {
        write_json(&self.user_path(user.index), user)
    }

    /// Writes a key file for every user of `owner`, carrying over the last
    /// counter of any file already present.
    pub fn export_users(&self, owner: &OwnerContext) -> Result<Vec<PathBuf>> {
        let params = owner.params().ok_or_else(|| CliError::Usage("owner is not connected".into()))?;
        let mut written = Vec::new();
        for (k, share) in owner.users().iter().enumerate() {
            let index = k + 1;
            let last_counter = self.load_user(index).map(|u| u.last_counter).unwrap_or(0);
            let file = UserFile {
                index,
                share: hex::encode(share.to_bytes()).into(),
                params: params.clone(),
                last_counter,
            };
            self.save_user(&file)?;
            written.push(self.user_path(index));
        }
        Ok(written)
    }
}

#[derive(Serialize, Deserialize)]
pub struct UserFile {
    pub index: usize,
    pub share: Zeroizing<String>,
    pub params: PublicParams,
    pub last_counter: u64,
}

impl UserFile {
    pub fn context(&self) -> Result<UserContext> {
        let raw = Zeroizing::new(
            hex::decode(&*self.share).map_err(|_| CliError::Usage(format!("user {} share is not hex", self.index)))?,
        );
        let share = UserShare::from_bytes(&raw)?;
        Ok(UserContext::new(share, self.params.clone()).with_counter(self.last_counter))
    }

    /// Counter for the next token: `explicit` if given, otherwise the later
    /// of the next local counter and the wall clock in milliseconds. The core
    /// keeps one replay floor for all users, so a purely local count would
    /// collide with other users' tokens.
    pub fn next_counter(&self, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or_else(|| {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
            now.max(self.last_counter + 1)
        })
    }
}

/// A minted request together with what its user needs to audit the answer.
#[derive(Serialize, Deserialize)]
pub struct PendingFile {
    pub user: usize,
    pub request: QueryRequest,
    pub counter: u64,
    pub omega: u64,
    /// Catalog the query was compiled against.
    pub catalog: Catalog,
}

impl PendingFile {
    pub fn new(user: usize, pending: &PendingQuery, catalog: Catalog) -> Self {
        Self { user, request: pending.request.clone(), counter: pending.counter, omega: pending.omega, catalog }
    }

    pub fn pending(&self) -> Result<PendingQuery> {
        let plan = compile(&self.request.q, &self.catalog)?;
        if compute_endurance(&plan) != self.omega {
            return Err(CliError::Usage("request file endurance does not match its query".into()));
        }
        Ok(PendingQuery { request: self.request.clone(), counter: self.counter, omega: self.omega, plan })
    }
}
