//! Conffile tracking and merging.
//!
//! Every conffile version a package ships is kept as a pristine copy under
//! `.pkgdb/pristine/`: content-addressed objects plus an append-only index
//! of `package <TAB> path <TAB> version <TAB> sha256` lines. A purge appends
//! a record with version `-`, which hides earlier entries.

mod merge;

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::txn::{Mutation, Node, Store, Transaction, TxnError, PRISTINE_DIR};
use crate::universe::{ConfSyntax, PackageId, PackageName, RelPath, Version};

pub use merge::{merge3, structured_merge, ConflictHunk, MergeKind, MergeOutcome};

pub const PKGNEW_SUFFIX: &str = ".pkgnew";
const PURGED: &str = "-";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfError {
    #[error("{path} is not a registered conffile of {package}")]
    Unregistered { package: PackageName, path: RelPath },
    #[error("corrupted pristine store: {0}")]
    Corrupted(String),
    #[error(transparent)]
    Store(#[from] TxnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConffilePolicy {
    #[default]
    Auto,
    Keep,
    New,
}

impl ConffilePolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(ConffilePolicy::Auto),
            "keep" => Some(ConffilePolicy::Keep),
            "new" => Some(ConffilePolicy::New),
            _ => None,
        }
    }
}

impl fmt::Display for ConffilePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConffilePolicy::Auto => "auto",
            ConffilePolicy::Keep => "keep",
            ConffilePolicy::New => "new",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PristineEntry {
    pub package: PackageName,
    pub path: RelPath,
    /// `None` for a purge record.
    pub version: Option<Version>,
    pub hash: String,
}

fn index_path() -> RelPath {
    RelPath::parse(&format!("{PRISTINE_DIR}/index")).expect("valid path")
}

fn object_path(hash: &str) -> RelPath {
    RelPath::parse(&format!("{PRISTINE_DIR}/{hash}")).expect("valid path")
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Every index record, oldest first.
pub fn pristine_entries(store: &Store) -> Result<Vec<PristineEntry>, ConfError> {
    let node = store.read(&index_path())?;
    let Some(bytes) = node.bytes() else {
        return Ok(Vec::new());
    };
    let text = std::str::from_utf8(bytes).map_err(|_| ConfError::Corrupted("index is not UTF-8".into()))?;
    text.lines()
        .map(|line| {
            let bad = || ConfError::Corrupted(format!("bad index line {line:?}"));
            let f: Vec<&str> = line.split('\t').collect();
            let [pkg, path, ver, hash] = f[..] else {
                return Err(bad());
            };
            Ok(PristineEntry {
                package: PackageName::parse(pkg).map_err(|_| bad())?,
                path: RelPath::parse(path).map_err(|_| bad())?,
                version: if ver == PURGED {
                    None
                } else {
                    Some(Version::parse(ver).map_err(|_| bad())?)
                },
                hash: hash.to_string(),
            })
        })
        .collect()
}

/// Latest live pristine entry for `(package, path)` and its content.
pub fn latest_pristine(
    store: &Store,
    package: &PackageName,
    path: &RelPath,
) -> Result<Option<(PristineEntry, Vec<u8>)>, ConfError> {
    let last = pristine_entries(store)?
        .into_iter()
        .rev()
        .find(|e| &e.package == package && &e.path == path);
    let Some(e) = last.filter(|e| e.version.is_some()) else {
        return Ok(None);
    };
    let node = store.read(&object_path(&e.hash))?;
    let bytes = node
        .bytes()
        .ok_or_else(|| ConfError::Corrupted(format!("missing object {}", e.hash)))?
        .to_vec();
    if content_hash(&bytes) != e.hash {
        return Err(ConfError::Corrupted(format!("object {} does not match its hash", e.hash)));
    }
    Ok(Some((e, bytes)))
}

/// True iff the file on disk differs from the pristine copy of the
/// installed version. A deleted conffile counts as modified.
pub fn is_locally_modified(store: &Store, package: &PackageName, path: &RelPath) -> Result<bool, ConfError> {
    let Some((e, _)) = latest_pristine(store, package, path)? else {
        return Err(ConfError::Unregistered {
            package: package.clone(),
            path: path.clone(),
        });
    };
    Ok(match store.read(path)? {
        Node::File { bytes, .. } => content_hash(&bytes) != e.hash,
        _ => true,
    })
}

fn append_index(txn: &mut Transaction<'_>, line: String) -> Result<(), TxnError> {
    let idx = index_path();
    let mut bytes = txn.store().read(&idx)?.bytes().map(<[u8]>::to_vec).unwrap_or_default();
    bytes.extend(line.as_bytes());
    txn.write_internal(&idx, Mutation::write(bytes))
}

/// Records `content` as the pristine copy of `path` for `pkg`.
pub fn record_pristine(
    txn: &mut Transaction<'_>,
    pkg: &PackageId,
    path: &RelPath,
    content: &[u8],
) -> Result<(), TxnError> {
    let hash = content_hash(content);
    let obj = object_path(&hash);
    if txn.store().read(&obj)?.is_absent() {
        txn.write_internal(&obj, Mutation::write(content))?;
    }
    append_index(txn, format!("{}\t{}\t{}\t{}\n", pkg.name, path, pkg.version, hash))
}

/// Hides the pristine history of `path` for `package` (used on purge).
pub fn forget_pristine(txn: &mut Transaction<'_>, package: &PackageName, path: &RelPath) -> Result<(), ConfError> {
    if latest_pristine(txn.store(), package, path)?.is_some() {
        append_index(txn, format!("{package}\t{path}\t{PURGED}\t-\n"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConffileReport {
    pub path: RelPath,
    pub outcome: MergeOutcome,
    /// Sibling holding the incoming version when the local file was kept.
    pub pkgnew: Option<RelPath>,
}

/// Installs `incoming` as the new version of conffile `path` of `pkg`,
/// preserving local edits per `policy`. A conflict never fails: the local
/// file stays and the incoming version lands in `<path>.pkgnew`.
pub fn upgrade_conffile(
    txn: &mut Transaction<'_>,
    pkg: &PackageId,
    path: &RelPath,
    incoming: &[u8],
    mode: u32,
    syntax: ConfSyntax,
    policy: ConffilePolicy,
) -> Result<ConffileReport, ConfError> {
    let current = txn.store().read(path)?;
    let base = latest_pristine(txn.store(), &pkg.name, path)?.map(|(_, b)| b);
    let local_mode = match &current {
        Node::File { mode, .. } => *mode,
        _ => mode,
    };
    let outcome = match (&current, policy) {
        (Node::Dir { .. }, _) => {
            return Err(TxnError::Precondition(format!("conffile {path} is a directory")).into())
        }
        // A missing conffile with no pristine record is a fresh install.
        (Node::Absent, _) if base.is_none() => MergeOutcome {
            kind: MergeKind::TookNew,
            content: incoming.to_vec(),
            hunks: Vec::new(),
            fallback: false,
        },
        (_, ConffilePolicy::New) => MergeOutcome {
            kind: MergeKind::TookNew,
            content: incoming.to_vec(),
            hunks: Vec::new(),
            fallback: false,
        },
        (_, ConffilePolicy::Keep) => MergeOutcome {
            kind: MergeKind::KeptLocal,
            content: current.bytes().unwrap_or_default().to_vec(),
            hunks: Vec::new(),
            fallback: false,
        },
        (_, ConffilePolicy::Auto) => structured_merge(
            base.as_deref().unwrap_or_default(),
            current.bytes().unwrap_or_default(),
            incoming,
            syntax,
        ),
    };
    let mut pkgnew = None;
    match outcome.kind {
        MergeKind::Conflict => {
            let side = path.with_suffix(PKGNEW_SUFFIX);
            txn.write_through(&side, Mutation::Write { bytes: incoming.to_vec(), mode })?;
            pkgnew = Some(side);
        }
        MergeKind::KeptLocal if policy == ConffilePolicy::Keep && current.is_absent() => {}
        _ => {
            let target = Node::File {
                bytes: outcome.content.clone(),
                mode: if current.is_absent() { mode } else { local_mode },
            };
            if target != current {
                let Node::File { bytes, mode } = target else { unreachable!() };
                txn.write_through(path, Mutation::Write { bytes, mode })?;
            }
        }
    }
    record_pristine(txn, pkg, path, incoming)?;
    Ok(ConffileReport {
        path: path.clone(),
        outcome,
        pkgnew,
    })
}
