//! Maintainer scripts in a small, total DSL whose every step can be
//! compensated.
//!
//! One primitive per line; `#` starts a comment line. Arguments are split
//! on whitespace, except that the last argument of `append`, `setkey` and
//! `fail` takes the rest of the line. `$PKG`, `$OLD` and `$NEW` are
//! substituted when the script runs.

mod parse;

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::txn::{Mutation, Node, Sandbox, TxnError, DEFAULT_FILE_MODE};
use crate::universe::{Hook, PackageName, RelPath, Version};

pub use parse::{parse_script, ParseError};

pub const USER_DB: &str = "etc/users.db";
const FIRST_UID: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Mkdir(String),
    Copy(String, String),
    Remove(String),
    Append(String, String),
    SetKey(String, String, String),
    DelKey(String, String),
    UpdateCache(String, String),
    AddUser(String),
    DelUser(String),
    Fail(String),
}

impl Step {
    pub fn keyword(&self) -> &'static str {
        match self {
            Step::Mkdir(..) => "mkdir",
            Step::Copy(..) => "copy",
            Step::Remove(..) => "remove",
            Step::Append(..) => "append",
            Step::SetKey(..) => "setkey",
            Step::DelKey(..) => "delkey",
            Step::UpdateCache(..) => "update-cache",
            Step::AddUser(..) => "adduser",
            Step::DelUser(..) => "deluser",
            Step::Fail(..) => "fail",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())?;
        match self {
            Step::Mkdir(a) | Step::Remove(a) | Step::AddUser(a) | Step::DelUser(a) | Step::Fail(a) => {
                write!(f, " {a}")
            }
            Step::Copy(a, b) | Step::Append(a, b) | Step::DelKey(a, b) | Step::UpdateCache(a, b) => {
                write!(f, " {a} {b}")
            }
            Step::SetKey(a, b, c) => write!(f, " {a} {b} {c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptProgram {
    pub steps: Vec<Step>,
    /// Source line of each step.
    pub lines: Vec<usize>,
    pub source_path: String,
}

impl ScriptProgram {
    pub fn new(steps: Vec<Step>) -> Self {
        let lines = (1..=steps.len()).collect();
        ScriptProgram {
            steps,
            lines,
            source_path: String::new(),
        }
    }
}

impl fmt::Display for ScriptProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEnv {
    pub package: PackageName,
    pub old: Option<Version>,
    pub new: Option<Version>,
    pub hook: Hook,
}

impl ScriptEnv {
    fn substitute(&self, s: &str) -> String {
        let v = |o: &Option<Version>| o.as_ref().map_or(String::new(), |v| v.to_string());
        s.replace("$PKG", self.package.as_str())
            .replace("$OLD", &v(&self.old))
            .replace("$NEW", &v(&self.new))
    }
}

/// How a step is compensated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EffectKind {
    /// Remove the directory if the step created it.
    Mkdir { created: bool },
    /// Put the pre-image back.
    Restore,
    /// Put the pre-image back, or rebuild the cache from `glob`.
    Cache { glob: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Effect {
    pub step: usize,
    pub kind: EffectKind,
    pub path: RelPath,
    pub pre: Node,
    /// Digest of `path` right after the step.
    pub post: [u8; 32],
}

/// Compensation records of executed steps, in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EffectLog {
    pub effects: Vec<Effect>,
}

impl EffectLog {
    pub fn len(&self) -> usize {
        self.effects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{source_path}:{line}: step {step} failed: {message}")]
pub struct ScriptFailure {
    pub step: usize,
    pub line: usize,
    pub source_path: String,
    pub message: String,
    /// Effects of the steps before `step`.
    pub log: EffectLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UndoError {
    #[error("corrupted effect log: step {step} expected {path} in its post-step state")]
    CorruptedLog { step: usize, path: RelPath },
    #[error(transparent)]
    Store(#[from] TxnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UndoMode {
    /// Restore cache pre-images byte for byte.
    #[default]
    Restore,
    /// Delete caches and rebuild them from their inputs as they are now.
    Regenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptClass {
    CacheUpdater,
    General,
}

impl fmt::Display for ScriptClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScriptClass::CacheUpdater => "cache-updater",
            ScriptClass::General => "general",
        })
    }
}

/// Cache-updater iff every step is `update-cache` or `mkdir`.
pub fn classify(p: &ScriptProgram) -> ScriptClass {
    let cache_only = p
        .steps
        .iter()
        .all(|s| matches!(s, Step::UpdateCache(..) | Step::Mkdir(..)));
    if cache_only {
        ScriptClass::CacheUpdater
    } else {
        ScriptClass::General
    }
}

/// Runs the steps in order. On failure, the effects of the steps that did
/// complete are returned for compensation.
pub fn execute<S: Sandbox + ?Sized>(
    p: &ScriptProgram,
    store: &mut S,
    env: &ScriptEnv,
) -> Result<EffectLog, ScriptFailure> {
    let mut log = EffectLog::default();
    for (i, step) in p.steps.iter().enumerate() {
        match run_step(step, store, env) {
            Ok((path, pre, kind)) => {
                let post = store.node(&path).map(|n| n.digest());
                let post = match post {
                    Ok(d) => d,
                    Err(e) => return Err(failure(p, i, e.to_string(), log)),
                };
                log.effects.push(Effect {
                    step: i,
                    kind,
                    path,
                    pre,
                    post,
                });
            }
            Err(message) => return Err(failure(p, i, message, log)),
        }
    }
    Ok(log)
}

fn failure(p: &ScriptProgram, step: usize, message: String, log: EffectLog) -> ScriptFailure {
    ScriptFailure {
        step,
        line: p.lines.get(step).copied().unwrap_or(step + 1),
        source_path: p.source_path.clone(),
        message,
        log,
    }
}

fn path(env: &ScriptEnv, raw: &str) -> Result<RelPath, String> {
    let s = env.substitute(raw);
    let p = RelPath::parse(&s).map_err(|_| format!("bad path {s:?}"))?;
    if p.is_internal() {
        return Err(format!("{p} is reserved for the engine"));
    }
    Ok(p)
}

fn io(e: TxnError) -> String {
    e.to_string()
}

/// Executes one step as a single mutation of a single path. Returns the
/// path, its pre-image and how to compensate.
fn run_step<S: Sandbox + ?Sized>(
    step: &Step,
    store: &mut S,
    env: &ScriptEnv,
) -> Result<(RelPath, Node, EffectKind), String> {
    match step {
        Step::Mkdir(p) => {
            let p = path(env, p)?;
            let pre = store.node(&p).map_err(io)?;
            match pre {
                Node::Dir { .. } => Ok((p, pre, EffectKind::Mkdir { created: false })),
                Node::File { .. } => Err(format!("{p} exists and is a file")),
                Node::Absent => {
                    store.apply(&p, Mutation::mkdir()).map_err(io)?;
                    Ok((p, pre, EffectKind::Mkdir { created: true }))
                }
            }
        }
        Step::Copy(src, dst) => {
            let src = path(env, src)?;
            let dst = path(env, dst)?;
            let Node::File { bytes, mode } = store.node(&src).map_err(io)? else {
                return Err(format!("{src} is not a file"));
            };
            let pre = store.node(&dst).map_err(io)?;
            store.apply(&dst, Mutation::Write { bytes, mode }).map_err(io)?;
            Ok((dst, pre, EffectKind::Restore))
        }
        Step::Remove(p) => {
            let p = path(env, p)?;
            let pre = store.node(&p).map_err(io)?;
            let m = if pre.is_dir() {
                Mutation::RemoveDir
            } else {
                Mutation::Delete
            };
            store.apply(&p, m).map_err(io)?;
            Ok((p, pre, EffectKind::Restore))
        }
        Step::Append(f, line) => {
            let f = path(env, f)?;
            let line = env.substitute(line);
            let pre = store.node(&f).map_err(io)?;
            let (mut bytes, mode) = match &pre {
                Node::Absent => (Vec::new(), DEFAULT_FILE_MODE),
                Node::File { bytes, mode } => (bytes.clone(), *mode),
                Node::Dir { .. } => return Err(format!("{f} is a directory")),
            };
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                bytes.push(b'\n');
            }
            bytes.extend(line.as_bytes());
            bytes.push(b'\n');
            store.apply(&f, Mutation::Write { bytes, mode }).map_err(io)?;
            Ok((f, pre, EffectKind::Restore))
        }
        Step::SetKey(f, k, v) => {
            let v = env.substitute(v);
            edit_keyvalue(store, env, f, k, |map, key| {
                map.insert(key, v);
            })
        }
        Step::DelKey(f, k) => edit_keyvalue(store, env, f, k, |map, key| {
            map.remove(&key);
        }),
        Step::UpdateCache(cache, glob) => {
            let cache = path(env, cache)?;
            let glob = env.substitute(glob);
            let pre = store.node(&cache).map_err(io)?;
            if pre.is_dir() {
                return Err(format!("{cache} is a directory"));
            }
            let mode = match &pre {
                Node::File { mode, .. } => *mode,
                _ => DEFAULT_FILE_MODE,
            };
            let bytes = build_cache(store, &cache, &glob)?;
            store.apply(&cache, Mutation::Write { bytes, mode }).map_err(io)?;
            Ok((cache, pre, EffectKind::Cache { glob }))
        }
        Step::AddUser(name) | Step::DelUser(name) => {
            let db = RelPath::parse(USER_DB).expect("valid path");
            let name = env.substitute(name);
            check_user(&name)?;
            let pre = store.node(&db).map_err(io)?;
            let (mut users, mode) = match &pre {
                Node::Absent => (BTreeMap::new(), DEFAULT_FILE_MODE),
                Node::File { bytes, mode } => (parse_users(bytes)?, *mode),
                Node::Dir { .. } => return Err(format!("{db} is a directory")),
            };
            let changed = if matches!(step, Step::AddUser(_)) {
                if users.contains_key(&name) {
                    false
                } else {
                    let uid = users.values().copied().max().map_or(FIRST_UID, |m: u32| m.max(FIRST_UID - 1) + 1);
                    users.insert(name, uid);
                    true
                }
            } else {
                users.remove(&name).is_some()
            };
            if changed {
                let text: String = users.iter().map(|(n, u)| format!("{n}:{u}\n")).collect();
                store.apply(&db, Mutation::Write { bytes: text.into_bytes(), mode }).map_err(io)?;
            }
            Ok((db, pre, EffectKind::Restore))
        }
        Step::Fail(msg) => Err(env.substitute(msg)),
    }
}

/// Rewrites a `key=value` file through `edit`. A missing file counts as
/// empty and is only created if the edit leaves some key behind.
fn edit_keyvalue<S: Sandbox + ?Sized>(
    store: &mut S,
    env: &ScriptEnv,
    file: &str,
    key: &str,
    edit: impl FnOnce(&mut BTreeMap<String, String>, String),
) -> Result<(RelPath, Node, EffectKind), String> {
    let f = path(env, file)?;
    let key = env.substitute(key);
    if key.is_empty() || key.contains('=') || key.contains(char::is_whitespace) {
        return Err(format!("bad key {key:?}"));
    }
    let pre = store.node(&f).map_err(io)?;
    let (mut map, mode) = match &pre {
        Node::Absent => (BTreeMap::new(), DEFAULT_FILE_MODE),
        Node::File { bytes, mode } => (parse_keyvalue(bytes).map_err(|e| format!("{f}: {e}"))?, *mode),
        Node::Dir { .. } => return Err(format!("{f} is a directory")),
    };
    edit(&mut map, key);
    if !(pre.is_absent() && map.is_empty()) {
        store
            .apply(&f, Mutation::Write { bytes: render_keyvalue(&map), mode })
            .map_err(io)?;
    }
    Ok((f, pre, EffectKind::Restore))
}

fn check_user(name: &str) -> Result<(), String> {
    let ok = !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_lowercase() || c == '_')
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(format!("bad user name {name:?}"))
    }
}

fn parse_users(bytes: &[u8]) -> Result<BTreeMap<String, u32>, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| format!("{USER_DB} is not UTF-8"))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (n, u) = line
            .split_once(':')
            .ok_or_else(|| format!("{USER_DB}: malformed line {line:?}"))?;
        let uid = u
            .parse()
            .map_err(|_| format!("{USER_DB}: bad uid in {line:?}"))?;
        out.insert(n.to_string(), uid);
    }
    Ok(out)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_keyvalue(bytes: &[u8]) -> Result<BTreeMap<String, String>, String> {
    let text = std::str::from_utf8(bytes).map_err(|_| "not UTF-8".to_string())?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {k}", i + 1));
        }
    }
    Ok(out)
}

/// Sorted `key=value` lines.
pub fn render_keyvalue(map: &BTreeMap<String, String>) -> Vec<u8> {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>().into_bytes()
}

/// Sorted `<sha256>  <path>` lines over files matching `glob`, never
/// including the cache itself.
fn build_cache<S: Sandbox + ?Sized>(store: &S, cache: &RelPath, glob: &str) -> Result<Vec<u8>, String> {
    let pat = glob::Pattern::new(glob).map_err(|e| format!("bad glob {glob:?}: {e}"))?;
    let opts = glob::MatchOptions {
        require_literal_separator: true,
        ..Default::default()
    };
    let mut out = String::new();
    for f in store.files().map_err(io)? {
        if &f == cache || !pat.matches_with(f.as_str(), opts) {
            continue;
        }
        let node = store.node(&f).map_err(io)?;
        let bytes = node.bytes().unwrap_or_default();
        out += &format!("{}  {}\n", hex::encode(Sha256::digest(bytes)), f);
    }
    Ok(out.into_bytes())
}

/// Applies the compensations of `log` in reverse order.
///
/// Before each compensation the step's path must still be in the state
/// the step left it in; otherwise the store was changed behind the log's
/// back and nothing further is undone.
pub fn undo<S: Sandbox + ?Sized>(log: &EffectLog, store: &mut S, mode: UndoMode) -> Result<(), UndoError> {
    for e in log.effects.iter().rev() {
        let current = store.node(&e.path)?;
        if current.digest() != e.post {
            return Err(UndoError::CorruptedLog {
                step: e.step,
                path: e.path.clone(),
            });
        }
        match (&e.kind, mode) {
            (EffectKind::Mkdir { created: false }, _) => {}
            (EffectKind::Mkdir { created: true }, _) => store.apply(&e.path, Mutation::RemoveDir)?,
            (EffectKind::Cache { glob }, UndoMode::Regenerate) if !e.pre.is_absent() => {
                let mode = match &e.pre {
                    Node::File { mode, .. } => *mode,
                    _ => DEFAULT_FILE_MODE,
                };
                store.apply(&e.path, Mutation::Delete)?;
                let bytes = build_cache(store, &e.path, glob).map_err(TxnError::Precondition)?;
                store.apply(&e.path, Mutation::Write { bytes, mode })?;
            }
            _ => put(store, &e.path, &current, &e.pre)?,
        }
    }
    Ok(())
}

/// Replaces `current` at `p` with `target`.
fn put<S: Sandbox + ?Sized>(store: &mut S, p: &RelPath, current: &Node, target: &Node) -> Result<(), TxnError> {
    if current == target {
        return Ok(());
    }
    match current {
        Node::File { .. } if !matches!(target, Node::File { .. }) => store.apply(p, Mutation::Delete)?,
        Node::Dir { .. } if !target.is_dir() => store.apply(p, Mutation::RemoveDir)?,
        _ => {}
    }
    match target {
        Node::Absent => Ok(()),
        Node::File { bytes, mode } => store.apply(
            p,
            Mutation::Write {
                bytes: bytes.clone(),
                mode: *mode,
            },
        ),
        Node::Dir { mode } => store.apply(p, Mutation::CreateDir { mode: *mode }),
    }
}
