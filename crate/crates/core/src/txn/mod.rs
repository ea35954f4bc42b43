//! Sandboxed store with copy-before-write journaling, commit, rollback and
//! persistent history.
//!
//! Every mutation under the store root goes through a [`Transaction`],
//! which records the pre-image of a path the first time it is touched.
//! Commit trims the journal and persists it under `.pkgdb/history/<id>/`;
//! [`Store::rollback_to`] replays persisted journals backwards.

mod journal;
mod node;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::universe::RelPath;

pub use journal::{decode_journal, encode_journal, trim, EntryKind, JournalEntry};
pub use node::{tree_hash, Mutation, Node, Sandbox, DEFAULT_DIR_MODE, DEFAULT_FILE_MODE};
use node::{apply_fs, restore_fs};

pub const DB_DIR: &str = ".pkgdb";
pub const STATUS_PATH: &str = ".pkgdb/status";
pub const PRISTINE_DIR: &str = ".pkgdb/pristine";
pub const CACHE_DIR: &str = ".pkgdb/cache";
/// Maintainer scripts of installed packages.
pub const INFO_DIR: &str = ".pkgdb/info";
const HISTORY_DIR: &str = ".pkgdb/history";
const ARCHIVE_DIR: &str = ".pkgdb/archive";
const LOCK_PATH: &str = ".pkgdb/lock";
const NEXT_ID: &str = "next";

pub const DEFAULT_PRESERVE: [&str; 2] = ["var/log/**", "home/**"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("store is locked by another transaction")]
    AlreadyLocked,
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Precondition(String),
    #[error("path {0} is outside the writable sandbox")]
    Escape(String),
    #[error("corrupted journal: {0}")]
    CorruptedJournal(String),
    #[error("history record {id}: {path} no longer matches its committed state")]
    Tampered { id: u64, path: RelPath },
    #[error("gap in history: {0}")]
    GapInHistory(String),
    #[error("bad preserve glob {0:?}")]
    BadGlob(String),
}

impl From<io::Error> for TxnError {
    fn from(e: io::Error) -> Self {
        TxnError::Io(e.to_string())
    }
}

/// Paths excluded from the tree hash: history, archive, lock and the
/// download cache.
pub(crate) fn is_volatile(rel: &Path) -> bool {
    [HISTORY_DIR, ARCHIVE_DIR, LOCK_PATH, CACHE_DIR]
        .iter()
        .any(|p| rel.starts_with(p))
}

/// Internal paths a transaction may write: the status file, pristine
/// conffile copies and installed maintainer scripts.
fn is_journaled_internal(p: &RelPath) -> bool {
    let s = p.as_str();
    s == STATUS_PATH || s.starts_with(".pkgdb/pristine/") || s.starts_with(".pkgdb/info/")
}

/// One persisted transaction as listed by `history`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub id: u64,
    pub request: String,
    pub timestamp: u64,
    pub outcome: String,
    pub entries: usize,
    pub journal_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RollbackReport {
    /// Reverted transaction ids, newest first.
    pub reverted: Vec<u64>,
    /// Restored journal entries.
    pub restored: usize,
    /// Preserved paths that were left as they are.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    preserve: Vec<glob::Pattern>,
    trim: bool,
}

impl Store {
    /// Opens the store at `root`, creating the `.pkgdb` layout if needed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, TxnError> {
        let root = root.into();
        if !root.is_dir() {
            return Err(TxnError::Precondition(format!("{}: not a directory", root.display())));
        }
        for d in [DB_DIR, HISTORY_DIR, PRISTINE_DIR, INFO_DIR] {
            fs::create_dir_all(root.join(d))?;
        }
        let status = root.join(STATUS_PATH);
        if !status.exists() {
            fs::write(status, "")?;
        }
        let mut s = Store {
            root,
            preserve: Vec::new(),
            trim: true,
        };
        s.set_preserve(DEFAULT_PRESERVE.iter().copied())?;
        Ok(s)
    }

    /// Paths journaled as usual but left untouched by rollback.
    pub fn set_preserve<'a>(&mut self, globs: impl IntoIterator<Item = &'a str>) -> Result<(), TxnError> {
        self.preserve = globs
            .into_iter()
            .map(|g| glob::Pattern::new(g).map_err(|_| TxnError::BadGlob(g.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(())
    }

    /// Whether commit trims no-op journal entries (on by default).
    pub fn set_trim(&mut self, on: bool) {
        self.trim = on;
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_preserved(&self, p: &RelPath) -> bool {
        let opts = glob::MatchOptions {
            require_literal_separator: true,
            ..Default::default()
        };
        self.preserve.iter().any(|g| g.matches_with(p.as_str(), opts))
    }

    pub fn read(&self, p: &RelPath) -> Result<Node, TxnError> {
        Ok(Node::read(&self.root.join(p.as_str()))?)
    }

    pub fn status_text(&self) -> Result<String, TxnError> {
        Ok(fs::read_to_string(self.root.join(STATUS_PATH))?)
    }

    pub fn tree_hash(&self) -> Result<String, TxnError> {
        tree_hash(&self.root)
    }

    pub fn is_locked(&self) -> bool {
        self.root.join(LOCK_PATH).exists()
    }

    fn next_id(&self) -> Result<u64, TxnError> {
        match fs::read_to_string(self.root.join(HISTORY_DIR).join(NEXT_ID)) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| TxnError::CorruptedJournal("bad history counter".into())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(1),
            Err(e) => Err(e.into()),
        }
    }

    fn lock(&self) -> Result<(), TxnError> {
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.root.join(LOCK_PATH))
        {
            Ok(_) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(TxnError::AlreadyLocked),
            Err(e) => Err(e.into()),
        }
    }

    fn unlock(&self) {
        let _ = fs::remove_file(self.root.join(LOCK_PATH));
    }

    pub fn begin(&self) -> Result<Transaction<'_>, TxnError> {
        self.lock()?;
        let id = match self.next_id() {
            Ok(id) => id,
            Err(e) => {
                self.unlock();
                return Err(e);
            }
        };
        Ok(Transaction {
            store: self,
            id,
            journal: Vec::new(),
            index: HashMap::new(),
            open: true,
        })
    }

    fn active_ids(&self) -> Result<BTreeSet<u64>, TxnError> {
        ids_in(&self.root.join(HISTORY_DIR))
    }

    /// Committed records still eligible for rollback, oldest first.
    pub fn history(&self) -> Result<Vec<HistoryRecord>, TxnError> {
        self.active_ids()?
            .into_iter()
            .map(|id| {
                let meta = fs::read(self.record_dir(id).join("meta"))?;
                serde_json::from_slice(&meta)
                    .map_err(|e| TxnError::CorruptedJournal(format!("record {id}: {e}")))
            })
            .collect()
    }

    fn record_dir(&self, id: u64) -> PathBuf {
        self.root.join(HISTORY_DIR).join(id.to_string())
    }

    pub fn load_journal(&self, id: u64) -> Result<Vec<JournalEntry>, TxnError> {
        decode_journal(&fs::read(self.record_dir(id).join("journal"))?)
    }

    /// Total persisted journal bytes over active records.
    pub fn history_bytes(&self) -> Result<u64, TxnError> {
        let mut total = 0;
        for id in self.active_ids()? {
            total += fs::metadata(self.record_dir(id).join("journal"))?.len();
        }
        Ok(total)
    }

    /// Deletes the oldest records so that at most `keep` remain.
    pub fn prune(&self, keep: usize) -> Result<Vec<u64>, TxnError> {
        let ids: Vec<u64> = self.active_ids()?.into_iter().collect();
        let drop = ids.len().saturating_sub(keep);
        for id in &ids[..drop] {
            fs::remove_dir_all(self.record_dir(*id))?;
        }
        Ok(ids[..drop].to_vec())
    }

    /// Undoes every active transaction with id ≥ `target`, newest first,
    /// restoring the state from just before the oldest of them. Unless
    /// `force`, first checks that each journaled path still holds its
    /// committed state.
    pub fn rollback_to(&self, target: u64, force: bool) -> Result<RollbackReport, TxnError> {
        self.lock()?;
        let r = self.rollback_to_locked(target, force);
        self.unlock();
        r
    }

    fn rollback_to_locked(&self, target: u64, force: bool) -> Result<RollbackReport, TxnError> {
        let next = self.next_id()?;
        if target == 0 || target > next {
            return Err(TxnError::GapInHistory(format!(
                "no transaction {target} (next id is {next})"
            )));
        }
        let active = self.active_ids()?;
        let archived = ids_in(&self.root.join(ARCHIVE_DIR))?;
        if let Some(missing) = (target..next).find(|id| !active.contains(id) && !archived.contains(id)) {
            return Err(TxnError::GapInHistory(format!("record {missing} was pruned")));
        }
        let mut records = Vec::new();
        for &id in active.range(target..).rev() {
            records.push((id, self.load_journal(id)?));
        }
        if !force {
            self.verify(&records)?;
        }
        let mut report = RollbackReport::default();
        for (id, journal) in &records {
            report.restored += self.restore(journal, &mut report.warnings)?;
            let dest = self.root.join(ARCHIVE_DIR);
            fs::create_dir_all(&dest)?;
            fs::rename(self.record_dir(*id), dest.join(id.to_string()))?;
            report.reverted.push(*id);
        }
        Ok(report)
    }

    /// Dry run of a backwards replay: each entry must find its path in the
    /// state it was committed with.
    fn verify(&self, records: &[(u64, Vec<JournalEntry>)]) -> Result<(), TxnError> {
        let mut overlay: BTreeMap<&RelPath, [u8; 32]> = BTreeMap::new();
        for (id, journal) in records {
            for e in journal.iter().rev() {
                if self.is_preserved(&e.path) {
                    continue;
                }
                let current = match overlay.get(&e.path) {
                    Some(d) => *d,
                    None => self.read(&e.path)?.digest(),
                };
                if current != e.post {
                    return Err(TxnError::Tampered {
                        id: *id,
                        path: e.path.clone(),
                    });
                }
                overlay.insert(&e.path, e.pre.digest());
            }
        }
        Ok(())
    }

    fn restore(&self, journal: &[JournalEntry], warnings: &mut Vec<String>) -> Result<usize, TxnError> {
        let mut n = 0;
        for e in journal.iter().rev() {
            if self.is_preserved(&e.path) {
                if self.read(&e.path)?.digest() != e.pre.digest() {
                    warnings.push(format!("{} is preserved; left as is", e.path));
                }
                continue;
            }
            restore_fs(&self.root, &e.path, &e.pre)?;
            n += 1;
        }
        Ok(n)
    }
}

fn ids_in(dir: &Path) -> Result<BTreeSet<u64>, TxnError> {
    let mut out = BTreeSet::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e.into()),
    };
    for e in entries {
        let e = e?;
        if e.file_type()?.is_dir() {
            if let Ok(id) = e.file_name().to_string_lossy().parse() {
                out.insert(id);
            }
        }
    }
    Ok(out)
}

/// An open unit of work over a [`Store`]. Dropping it without commit rolls
/// it back.
#[derive(Debug)]
pub struct Transaction<'s> {
    store: &'s Store,
    id: u64,
    journal: Vec<JournalEntry>,
    index: HashMap<RelPath, usize>,
    open: bool,
}

impl<'s> Transaction<'s> {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn store(&self) -> &'s Store {
        self.store
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    /// Journals `path` on first touch, then applies `m`.
    pub fn write_through(&mut self, path: &RelPath, m: Mutation) -> Result<(), TxnError> {
        if path.is_internal() {
            return Err(TxnError::Escape(path.to_string()));
        }
        self.mutate(path, m)
    }

    /// Like [`write_through`](Self::write_through) for the engine's own
    /// journaled files under `.pkgdb`.
    pub(crate) fn write_internal(&mut self, path: &RelPath, m: Mutation) -> Result<(), TxnError> {
        if !is_journaled_internal(path) {
            return Err(TxnError::Escape(path.to_string()));
        }
        self.mutate(path, m)
    }

    pub fn write_status(&mut self, text: &str) -> Result<(), TxnError> {
        let p = RelPath::parse(STATUS_PATH).expect("valid path");
        self.mutate(&p, Mutation::write(text))
    }

    fn mutate(&mut self, path: &RelPath, m: Mutation) -> Result<(), TxnError> {
        let root = &self.store.root;
        if !self.index.contains_key(path) {
            let pre = Node::read(&root.join(path.as_str()))?;
            let post = pre.digest();
            self.index.insert(path.clone(), self.journal.len());
            self.journal.push(JournalEntry {
                path: path.clone(),
                pre,
                post,
            });
        }
        let result = apply_fs(root, path, &m);
        let i = self.index[path];
        self.journal[i].post = Node::read(&root.join(path.as_str()))?.digest();
        result
    }

    /// Restores the begin-time state and releases the lock.
    pub fn rollback(mut self) -> Result<RollbackReport, TxnError> {
        self.rollback_inner()
    }

    fn rollback_inner(&mut self) -> Result<RollbackReport, TxnError> {
        let mut report = RollbackReport::default();
        let journal = std::mem::take(&mut self.journal);
        self.index.clear();
        let r = self.store.restore(&journal, &mut report.warnings);
        self.open = false;
        self.store.unlock();
        report.restored = r?;
        Ok(report)
    }

    /// Persists the (trimmed) journal and the status pre-image, then
    /// releases the lock.
    pub fn commit(mut self, request: &str, outcome: &str) -> Result<HistoryRecord, TxnError> {
        let journal = std::mem::take(&mut self.journal);
        let status_pre = journal
            .iter()
            .find(|e| e.path.as_str() == STATUS_PATH)
            .and_then(|e| e.pre.bytes().map(<[u8]>::to_vec));
        let status_pre = match status_pre {
            Some(b) => b,
            None => fs::read(self.store.root.join(STATUS_PATH))?,
        };
        let journal = if self.store.trim { trim(journal) } else { journal };
        let bytes = encode_journal(&journal);
        let record = HistoryRecord {
            id: self.id,
            request: request.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            outcome: outcome.to_string(),
            entries: journal.len(),
            journal_bytes: bytes.len() as u64,
        };
        let dir = self.store.record_dir(self.id);
        let write = || -> Result<(), TxnError> {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("journal"), &bytes)?;
            fs::write(dir.join("status-pre"), &status_pre)?;
            let meta = serde_json::to_vec_pretty(&record).expect("record serializes");
            fs::write(dir.join("meta"), meta)?;
            fs::write(
                self.store.root.join(HISTORY_DIR).join(NEXT_ID),
                (self.id + 1).to_string(),
            )?;
            Ok(())
        };
        if let Err(e) = write() {
            let _ = fs::remove_dir_all(&dir);
            self.journal = journal;
            return Err(e);
        }
        self.open = false;
        self.store.unlock();
        Ok(record)
    }
}

impl Sandbox for Transaction<'_> {
    fn node(&self, path: &RelPath) -> Result<Node, TxnError> {
        if path.is_internal() {
            return Err(TxnError::Escape(path.to_string()));
        }
        self.store.read(path)
    }

    fn apply(&mut self, path: &RelPath, m: Mutation) -> Result<(), TxnError> {
        self.write_through(path, m)
    }

    fn files(&self) -> Result<Vec<RelPath>, TxnError> {
        let root = &self.store.root;
        let mut out = Vec::new();
        let walker = walkdir::WalkDir::new(root)
            .min_depth(1)
            .sort_by_file_name()
            .into_iter()
            .filter_entry(|e| e.depth() != 1 || e.file_name() != DB_DIR);
        for e in walker {
            let e = e.map_err(|e| TxnError::Io(e.to_string()))?;
            if e.file_type().is_file() {
                let rel = e.path().strip_prefix(root).expect("under root");
                let rel = rel.to_str().ok_or_else(|| TxnError::Escape(rel.display().to_string()))?;
                out.push(RelPath::parse(rel).map_err(|_| TxnError::Escape(rel.to_string()))?);
            }
        }
        out.sort();
        Ok(out)
    }
}

impl Drop for Transaction<'_> {
    fn drop(&mut self) {
        if self.open {
            let _ = self.rollback_inner();
        }
    }
}
