use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::universe::RelPath;

use super::TxnError;

pub const DEFAULT_FILE_MODE: u32 = 0o644;
pub const DEFAULT_DIR_MODE: u32 = 0o755;

/// What sits at a sandbox path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Absent,
    File { bytes: Vec<u8>, mode: u32 },
    Dir { mode: u32 },
}

impl Node {
    pub fn file(bytes: impl Into<Vec<u8>>) -> Node {
        Node::File {
            bytes: bytes.into(),
            mode: DEFAULT_FILE_MODE,
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, Node::Absent)
    }

    pub fn is_dir(&self) -> bool {
        matches!(self, Node::Dir { .. })
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match self {
            Node::File { bytes, .. } => Some(bytes),
            _ => None,
        }
    }

    /// Content length; directories and absent paths count as zero.
    pub fn size(&self) -> u64 {
        self.bytes().map_or(0, |b| b.len() as u64)
    }

    /// SHA-256 over type, mode and content.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self {
            Node::Absent => h.update(b"A"),
            Node::File { bytes, mode } => {
                h.update(b"F");
                h.update(mode.to_le_bytes());
                h.update(bytes);
            }
            Node::Dir { mode } => {
                h.update(b"D");
                h.update(mode.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Reads the node at `path` on the real filesystem.
    pub fn read(path: &Path) -> io::Result<Node> {
        let meta = match fs::symlink_metadata(path) {
            Ok(m) => m,
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::NotFound | io::ErrorKind::NotADirectory
                ) =>
            {
                return Ok(Node::Absent)
            }
            Err(e) => return Err(e),
        };
        let mode = mode_of(&meta);
        if meta.is_dir() {
            Ok(Node::Dir { mode })
        } else if meta.is_file() {
            Ok(Node::File {
                bytes: fs::read(path)?,
                mode,
            })
        } else {
            Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}: unsupported file type", path.display()),
            ))
        }
    }
}

#[cfg(unix)]
fn mode_of(meta: &fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o7777
}

#[cfg(not(unix))]
fn mode_of(meta: &fs::Metadata) -> u32 {
    if meta.is_dir() {
        DEFAULT_DIR_MODE
    } else {
        DEFAULT_FILE_MODE
    }
}

#[cfg(unix)]
pub(crate) fn set_mode(path: &Path, mode: u32) -> io::Result<()> {
    use std::os::unix::fs::PermissionsExt;
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

#[cfg(not(unix))]
pub(crate) fn set_mode(_path: &Path, _mode: u32) -> io::Result<()> {
    Ok(())
}

/// A single change to one sandbox path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    /// Create or replace a regular file. The parent must be a directory.
    Write { bytes: Vec<u8>, mode: u32 },
    /// Remove a regular file; absent paths are left alone.
    Delete,
    /// Create a directory; an existing directory is left alone.
    CreateDir { mode: u32 },
    /// Remove an empty directory; absent paths are left alone.
    RemoveDir,
}

impl Mutation {
    pub fn write(bytes: impl Into<Vec<u8>>) -> Mutation {
        Mutation::Write {
            bytes: bytes.into(),
            mode: DEFAULT_FILE_MODE,
        }
    }

    pub fn mkdir() -> Mutation {
        Mutation::CreateDir {
            mode: DEFAULT_DIR_MODE,
        }
    }
}

/// Read/write access to a sandbox, as seen by scripts and the planner.
/// Every mutation is expected to be journaled by the implementation.
pub trait Sandbox {
    fn node(&self, path: &RelPath) -> Result<Node, TxnError>;

    fn apply(&mut self, path: &RelPath, m: Mutation) -> Result<(), TxnError>;

    /// Every regular file outside `.pkgdb`, sorted.
    fn files(&self) -> Result<Vec<RelPath>, TxnError>;
}

/// Applies `m` to the real filesystem under `root`, enforcing the
/// [`Mutation`] preconditions.
pub(crate) fn apply_fs(root: &Path, path: &RelPath, m: &Mutation) -> Result<(), TxnError> {
    let full = root.join(path.as_str());
    let current = Node::read(&full)?;
    let parent_ok = || -> Result<(), TxnError> {
        if let Some(parent) = path.parent() {
            if !Node::read(&root.join(parent.as_str()))?.is_dir() {
                return Err(TxnError::Precondition(format!("{path}: parent is not a directory")));
            }
        }
        Ok(())
    };
    match m {
        Mutation::Write { bytes, mode } => {
            if current.is_dir() {
                return Err(TxnError::Precondition(format!("{path}: is a directory")));
            }
            parent_ok()?;
            fs::write(&full, bytes)?;
            set_mode(&full, *mode)?;
        }
        Mutation::Delete => match current {
            Node::Absent => {}
            Node::File { .. } => fs::remove_file(&full)?,
            Node::Dir { .. } => return Err(TxnError::Precondition(format!("{path}: is a directory"))),
        },
        Mutation::CreateDir { mode } => match current {
            Node::Dir { mode: m0 } if m0 == *mode => {}
            Node::Dir { .. } => set_mode(&full, *mode)?,
            Node::File { .. } => return Err(TxnError::Precondition(format!("{path}: is a file"))),
            Node::Absent => {
                parent_ok()?;
                fs::create_dir(&full)?;
                set_mode(&full, *mode)?;
            }
        },
        Mutation::RemoveDir => match current {
            Node::Absent => {}
            Node::File { .. } => return Err(TxnError::Precondition(format!("{path}: is a file"))),
            Node::Dir { .. } => {
                if fs::read_dir(&full)?.next().is_some() {
                    return Err(TxnError::Precondition(format!("{path}: directory not empty")));
                }
                fs::remove_dir(&full)?;
            }
        },
    }
    Ok(())
}

/// Puts `target` at `path` whatever is there now. A directory replaced by
/// something else is removed with its contents.
pub(crate) fn restore_fs(root: &Path, path: &RelPath, target: &Node) -> Result<(), TxnError> {
    let full = root.join(path.as_str());
    let current = Node::read(&full)?;
    match (&current, target) {
        (Node::Dir { .. }, Node::Dir { .. }) | (Node::Absent, Node::Absent) => {}
        (Node::Dir { .. }, _) => fs::remove_dir_all(&full)?,
        (Node::File { .. }, Node::Absent | Node::Dir { .. }) => fs::remove_file(&full)?,
        _ => {}
    }
    if !target.is_absent() {
        // A parent removed later in the transaction is restored (with its
        // own mode) by an entry further back in the journal.
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
    }
    match target {
        Node::Absent => {}
        Node::File { bytes, mode } => {
            fs::write(&full, bytes)?;
            set_mode(&full, *mode)?;
        }
        Node::Dir { mode } => {
            if !current.is_dir() {
                fs::create_dir(&full)?;
            }
            set_mode(&full, *mode)?;
        }
    }
    Ok(())
}

/// Hex SHA-256 over every directory and file under `root`, in path order,
/// skipping the engine's history, archive, lock and download cache.
pub fn tree_hash(root: &Path) -> Result<String, TxnError> {
    let mut h = Sha256::new();
    let walker = walkdir::WalkDir::new(root)
        .min_depth(1)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| {
            let rel = e.path().strip_prefix(root).unwrap_or(e.path());
            !super::is_volatile(rel)
        });
    for entry in walker {
        let entry = entry.map_err(|e| TxnError::Io(e.to_string()))?;
        let rel = entry.path().strip_prefix(root).expect("under root");
        let node = Node::read(entry.path())?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(node.digest());
    }
    Ok(hex::encode(h.finalize()))
}
