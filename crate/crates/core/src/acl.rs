//! Caller identity and allow/deny access control lists.
//!
//! Entries match either a contiguous substring of the caller's distinguished
//! name or one of the caller's virtual organizations. Resolution is
//! deny-overrides with default-deny: any matching deny wins, otherwise any
//! matching allow grants access, otherwise access is refused.

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::methods;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub dn: String,
    pub vos: BTreeSet<String>,
}

impl Identity {
    pub fn new<I, S>(dn: impl Into<String>, vos: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Identity {
            dn: dn.into(),
            vos: vos.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuthError {
    #[error("invalid credential: {0}")]
    InvalidCredential(String),
}

/// Turns an opaque credential blob into a verified identity.
pub trait CredentialVerifier: Send + Sync {
    fn verify(&self, credential: &[u8]) -> Result<Identity, AuthError>;
}

/// The self-describing credential accepted by [`SharedSecretVerifier`]:
/// a JSON object with `dn`, `vos` and `secret`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedSecretCredential {
    pub dn: String,
    #[serde(default)]
    pub vos: Vec<String>,
    pub secret: String,
}

impl SharedSecretCredential {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("credential serializes")
    }
}

/// Accepts credentials presenting the configured shared secret.
pub struct SharedSecretVerifier {
    secret: String,
}

impl SharedSecretVerifier {
    pub fn new(secret: impl Into<String>) -> Self {
        SharedSecretVerifier {
            secret: secret.into(),
        }
    }
}

impl CredentialVerifier for SharedSecretVerifier {
    fn verify(&self, credential: &[u8]) -> Result<Identity, AuthError> {
        let cred: SharedSecretCredential = serde_json::from_slice(credential)
            .map_err(|e| AuthError::InvalidCredential(format!("unreadable credential: {e}")))?;
        if cred.secret != self.secret {
            return Err(AuthError::InvalidCredential("secret rejected".into()));
        }
        if cred.dn.is_empty() {
            return Err(AuthError::InvalidCredential(
                "empty distinguished name".into(),
            ));
        }
        Ok(Identity::new(cred.dn, cred.vos))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrincipalKind {
    DnSubstring,
    Vo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Effect {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

impl fmt::Display for PrincipalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrincipalKind::DnSubstring => "dn",
            PrincipalKind::Vo => "vo",
        })
    }
}

impl FromStr for PrincipalKind {
    type Err = AclError;

    fn from_str(s: &str) -> Result<Self, AclError> {
        match s {
            "dn" | "dn-substring" => Ok(PrincipalKind::DnSubstring),
            "vo" => Ok(PrincipalKind::Vo),
            other => Err(AclError::InvalidEntry(format!(
                "unknown principal kind `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Allow => "allow",
            Effect::Deny => "deny",
        })
    }
}

impl FromStr for Effect {
    type Err = AclError;

    fn from_str(s: &str) -> Result<Self, AclError> {
        match s {
            "allow" => Ok(Effect::Allow),
            "deny" => Ok(Effect::Deny),
            other => Err(AclError::InvalidEntry(format!("unknown effect `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AclEntry {
    pub principal: String,
    pub kind: PrincipalKind,
    pub effect: Effect,
    /// A service name (`file`) or a single method (`file.read`).
    pub scope: String,
}

impl AclEntry {
    pub fn new(
        kind: PrincipalKind,
        effect: Effect,
        principal: impl Into<String>,
        scope: impl Into<String>,
    ) -> Self {
        AclEntry {
            principal: principal.into(),
            kind,
            effect,
            scope: scope.into(),
        }
    }

    pub fn allow_dn(principal: &str, scope: &str) -> Self {
        Self::new(PrincipalKind::DnSubstring, Effect::Allow, principal, scope)
    }

    pub fn deny_dn(principal: &str, scope: &str) -> Self {
        Self::new(PrincipalKind::DnSubstring, Effect::Deny, principal, scope)
    }

    pub fn allow_vo(principal: &str, scope: &str) -> Self {
        Self::new(PrincipalKind::Vo, Effect::Allow, principal, scope)
    }

    pub fn deny_vo(principal: &str, scope: &str) -> Self {
        Self::new(PrincipalKind::Vo, Effect::Deny, principal, scope)
    }

    pub fn matches_principal(&self, id: &Identity) -> bool {
        match self.kind {
            PrincipalKind::DnSubstring => id.dn.contains(self.principal.as_str()),
            PrincipalKind::Vo => id.vos.contains(&self.principal),
        }
    }

    /// `job` covers every `job.*` method; `job.kill` covers only itself.
    pub fn covers(&self, method: &str) -> bool {
        self.scope == method
            || method
                .strip_prefix(self.scope.as_str())
                .is_some_and(|rest| rest.starts_with('.'))
    }

    fn validate(&self) -> Result<(), AclError> {
        if !methods::is_valid_scope(&self.scope) {
            return Err(AclError::InvalidScope(self.scope.clone()));
        }
        if self.principal.is_empty() || self.principal.contains(['\t', '\n', '\r']) {
            return Err(AclError::InvalidEntry(format!(
                "principal {:?} must be non-empty and free of tabs and newlines",
                self.principal
            )));
        }
        Ok(())
    }
}

/// Deny-overrides evaluation over any entry collection.
pub fn evaluate<'a>(
    entries: impl IntoIterator<Item = &'a AclEntry>,
    id: &Identity,
    method: &str,
) -> Decision {
    let mut allowed = false;
    for e in entries {
        if e.covers(method) && e.matches_principal(id) {
            match e.effect {
                Effect::Deny => return Decision::Deny,
                Effect::Allow => allowed = true,
            }
        }
    }
    if allowed {
        Decision::Allow
    } else {
        Decision::Deny
    }
}

pub type EntryId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredEntry {
    pub id: EntryId,
    pub entry: AclEntry,
}

#[derive(Debug, thiserror::Error)]
pub enum AclError {
    #[error("caller is not authorized for {0}")]
    Unauthorized(String),
    #[error("invalid scope `{0}`")]
    InvalidScope(String),
    #[error("invalid ACL entry: {0}")]
    InvalidEntry(String),
    #[error("no ACL entry with id {0}")]
    NotFound(EntryId),
    #[error("ACL store {path}: line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("ACL persistence failed: {0}")]
    Io(#[from] io::Error),
}

/// Where ACL entries live between restarts.
pub trait AclPersistence: Send + Sync {
    fn load(&self) -> Result<Vec<StoredEntry>, AclError>;
    fn store(&self, entries: &[StoredEntry]) -> Result<(), AclError>;
}

/// Tab-separated file: `id kind effect principal scope`, one entry per line.
pub struct TsvFile {
    path: PathBuf,
}

impl TsvFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        TsvFile { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    fn parse_line(&self, n: usize, line: &str) -> Result<StoredEntry, AclError> {
        let corrupt = |reason: String| AclError::Corrupt {
            path: self.path.clone(),
            line: n,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, kind, effect, principal, scope] = fields[..] else {
            return Err(corrupt(format!(
                "expected 5 tab-separated fields, found {}",
                fields.len()
            )));
        };
        let id = id.parse().map_err(|_| corrupt(format!("bad id `{id}`")))?;
        let entry = AclEntry {
            principal: principal.to_owned(),
            kind: kind.parse().map_err(|e: AclError| corrupt(e.to_string()))?,
            effect: effect
                .parse()
                .map_err(|e: AclError| corrupt(e.to_string()))?,
            scope: scope.to_owned(),
        };
        Ok(StoredEntry { id, entry })
    }
}

impl AclPersistence for TsvFile {
    fn load(&self) -> Result<Vec<StoredEntry>, AclError> {
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| self.parse_line(i + 1, l))
            .collect()
    }

    fn store(&self, entries: &[StoredEntry]) -> Result<(), AclError> {
        let mut out = String::new();
        for StoredEntry { id, entry } in entries {
            out.push_str(&format!(
                "{id}\t{}\t{}\t{}\t{}\n",
                entry.kind, entry.effect, entry.principal, entry.scope
            ));
        }
        crate::fsutil::write_atomic(&self.path, out.as_bytes())?;
        Ok(())
    }
}

/// Volatile persistence, for tests and throwaway nodes.
#[derive(Default)]
pub struct MemoryPersistence {
    entries: Mutex<Vec<StoredEntry>>,
}

impl AclPersistence for MemoryPersistence {
    fn load(&self) -> Result<Vec<StoredEntry>, AclError> {
        Ok(self.entries.lock().clone())
    }

    fn store(&self, entries: &[StoredEntry]) -> Result<(), AclError> {
        *self.entries.lock() = entries.to_vec();
        Ok(())
    }
}

struct StoreState {
    entries: Vec<StoredEntry>,
    next_id: EntryId,
}

/// The ACL database. Reads run concurrently; mutations are serialized and
/// become visible only after they have been persisted.
pub struct AclStore {
    backend: Box<dyn AclPersistence>,
    state: RwLock<StoreState>,
    write_lock: Mutex<()>,
}

impl AclStore {
    pub fn open(backend: Box<dyn AclPersistence>) -> Result<Self, AclError> {
        let entries = backend.load()?;
        let next_id = entries.iter().map(|e| e.id).max().map_or(1, |m| m + 1);
        Ok(AclStore {
            backend,
            state: RwLock::new(StoreState { entries, next_id }),
            write_lock: Mutex::new(()),
        })
    }

    pub fn in_memory() -> Self {
        Self::open(Box::<MemoryPersistence>::default()).expect("memory store opens")
    }

    pub fn authorize(&self, id: &Identity, method: &str) -> Decision {
        let state = self.state.read();
        evaluate(state.entries.iter().map(|s| &s.entry), id, method)
    }

    pub fn list(&self) -> Vec<StoredEntry> {
        self.state.read().entries.clone()
    }

    /// Adds an entry on behalf of `admin`, who must be allowed `acl.add`.
    pub fn add(&self, admin: &Identity, entry: AclEntry) -> Result<EntryId, AclError> {
        if self.authorize(admin, "acl.add") == Decision::Deny {
            return Err(AclError::Unauthorized("acl.add".into()));
        }
        self.add_unchecked(entry)
    }

    /// Adds an entry without an authorization check (bootstrap, tests).
    pub fn add_unchecked(&self, entry: AclEntry) -> Result<EntryId, AclError> {
        entry.validate()?;
        let _guard = self.write_lock.lock();
        let (mut entries, id) = {
            let s = self.state.read();
            (s.entries.clone(), s.next_id)
        };
        entries.push(StoredEntry { id, entry });
        self.backend.store(&entries)?;
        let mut s = self.state.write();
        s.entries = entries;
        s.next_id = id + 1;
        Ok(id)
    }

    pub fn remove(&self, admin: &Identity, id: EntryId) -> Result<(), AclError> {
        if self.authorize(admin, "acl.remove") == Decision::Deny {
            return Err(AclError::Unauthorized("acl.remove".into()));
        }
        let _guard = self.write_lock.lock();
        let mut entries = self.state.read().entries.clone();
        let before = entries.len();
        entries.retain(|e| e.id != id);
        if entries.len() == before {
            return Err(AclError::NotFound(id));
        }
        self.backend.store(&entries)?;
        self.state.write().entries = entries;
        Ok(())
    }
}
