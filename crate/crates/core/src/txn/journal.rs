use crate::universe::RelPath;

use super::{Node, TxnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Created,
    Modified,
    Removed,
}

/// Pre-image of one path, captured before its first mutation in a
/// transaction, plus the digest of the path's latest state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub path: RelPath,
    pub pre: Node,
    pub post: [u8; 32],
}

impl JournalEntry {
    pub fn kind(&self) -> EntryKind {
        if self.pre.is_absent() {
            EntryKind::Created
        } else if self.post == Node::Absent.digest() {
            EntryKind::Removed
        } else {
            EntryKind::Modified
        }
    }

    /// True when the path ended where it started.
    pub fn is_noop(&self) -> bool {
        self.pre.digest() == self.post
    }
}

/// Drops entries whose final state equals their pre-image.
pub fn trim(journal: Vec<JournalEntry>) -> Vec<JournalEntry> {
    journal.into_iter().filter(|e| !e.is_noop()).collect()
}

const MAGIC: &[u8; 4] = b"PKJ1";

/// Length-prefixed binary form: per record the path, node kind, mode,
/// pre-image bytes and post digest.
pub fn encode_journal(journal: &[JournalEntry]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend((journal.len() as u64).to_le_bytes());
    for e in journal {
        let path = e.path.as_str().as_bytes();
        out.extend((path.len() as u32).to_le_bytes());
        out.extend(path);
        let (tag, mode, bytes): (u8, u32, &[u8]) = match &e.pre {
            Node::Absent => (0, 0, &[]),
            Node::File { bytes, mode } => (1, *mode, bytes),
            Node::Dir { mode } => (2, *mode, &[]),
        };
        out.push(tag);
        out.extend(mode.to_le_bytes());
        out.extend((bytes.len() as u64).to_le_bytes());
        out.extend(bytes);
        out.extend(e.post);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TxnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TxnError::CorruptedJournal("truncated journal".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TxnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TxnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_journal(buf: &[u8]) -> Result<Vec<JournalEntry>, TxnError> {
    let bad = |m: &str| TxnError::CorruptedJournal(m.to_string());
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad journal header"));
    }
    let n = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?).map_err(|_| bad("path is not UTF-8"))?;
        let path = RelPath::parse(path).map_err(|e| bad(&e.to_string()))?;
        let tag = r.take(1)?[0];
        let mode = r.u32()?;
        let len = r.u64()? as usize;
        let bytes = r.take(len)?.to_vec();
        let pre = match tag {
            0 => Node::Absent,
            1 => Node::File { bytes, mode },
            2 => Node::Dir { mode },
            _ => return Err(bad("unknown node kind")),
        };
        let post = r.take(32)?.try_into().expect("32 bytes");
        out.push(JournalEntry { path, pre, post });
    }
    if r.pos != buf.len() {
        return Err(bad("trailing bytes after journal"));
    }
    Ok(out)
}
