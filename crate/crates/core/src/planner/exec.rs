use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{plan, ActionKind, Change, Plan};
use crate::confmerge::{forget_pristine, upgrade_conffile, ConffilePolicy, ConffileReport};
use crate::mscript::{self, parse_script, ScriptEnv, ScriptProgram, Step};
use crate::preferences::PreferenceSpec;
use crate::resolver::{Request, Unsat};
use crate::txn::{tree_hash, Mutation, Node, Store, Transaction, TxnError, CACHE_DIR, INFO_DIR};
use crate::universe::{Hook, Package, PackageId, PackageName, RelPath, Status, Universe};

/// A payload staged in the download cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Retrieved {
    pub id: PackageId,
    pub dir: PathBuf,
    /// Tree hash of the staged payload.
    pub hash: String,
    pub size_kb: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("missing payload for {id}: {path}")]
    Missing { id: PackageId, path: String },
    #[error("{id} is not in the universe")]
    Unknown { id: PackageId },
    #[error("staging {id}: {message}")]
    Io { id: PackageId, message: String },
}

/// Copies `<repo>/<name>_<version>/` into `staging`. Every manifest file
/// and script must be present. Staging an unchanged payload again is a
/// no-op.
pub fn retrieve(u: &Universe, id: &PackageId, repo: &Path, staging: &Path) -> Result<Retrieved, PayloadError> {
    let pkg = u.get(id).ok_or_else(|| PayloadError::Unknown { id: id.clone() })?;
    let src = repo.join(id.archive_name());
    let io = |e: &dyn std::fmt::Display| PayloadError::Io {
        id: id.clone(),
        message: e.to_string(),
    };
    if !src.is_dir() {
        return Err(PayloadError::Missing {
            id: id.clone(),
            path: src.display().to_string(),
        });
    }
    for f in pkg.files.iter().chain(pkg.scripts.values()) {
        if !src.join(f.as_str()).is_file() {
            return Err(PayloadError::Missing {
                id: id.clone(),
                path: f.to_string(),
            });
        }
    }
    let hash = tree_hash(&src).map_err(|e| io(&e))?;
    let dst = staging.join(id.archive_name());
    let fresh = dst.is_dir() && tree_hash(&dst).map_err(|e| io(&e))? == hash;
    if !fresh {
        if dst.exists() {
            fs::remove_dir_all(&dst).map_err(|e| io(&e))?;
        }
        for entry in walkdir::WalkDir::new(&src) {
            let entry = entry.map_err(|e| io(&e))?;
            let target = dst.join(entry.path().strip_prefix(&src).expect("under src"));
            if entry.file_type().is_dir() {
                fs::create_dir_all(&target).map_err(|e| io(&e))?;
            } else {
                fs::copy(entry.path(), &target).map_err(|e| io(&e))?;
            }
        }
    }
    Ok(Retrieved {
        id: id.clone(),
        dir: dst,
        hash,
        size_kb: pkg.size_kb,
    })
}

/// Failures injected for testing: the n-th hook (counting every hook
/// action in plan order, from 0) gets a trailing `fail`, and the n-th
/// unpacked file write fails as an I/O error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    pub script_at: Option<usize>,
    pub io_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    pub policy: ConffilePolicy,
    /// Also delete the conffiles of removed packages.
    pub purge: bool,
    pub faults: Faults,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailedStep {
    /// Index into the plan's actions.
    pub action: Option<usize>,
    pub package: Option<PackageId>,
    pub hook: Option<Hook>,
    /// Failing script step, when a script failed.
    pub step: Option<usize>,
    pub message: String,
}

impl FailedStep {
    fn io(action: Option<usize>, package: Option<&PackageId>, message: impl ToString) -> Self {
        FailedStep {
            action,
            package: package.cloned(),
            hook: None,
            step: None,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutcomeResult {
    Success,
    ResolutionFailure(Unsat),
    ScriptFailure(FailedStep),
    IoFailure(FailedStep),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub result: OutcomeResult,
    /// Every conffile handled during unpack.
    pub conffiles: Vec<ConffileReport>,
    pub history_id: Option<u64>,
    /// After a failure inside the transaction: whether the store's tree
    /// hash is back to its value before the transaction began.
    pub restored: Option<bool>,
    /// Progress lines in the order they happened.
    pub log: Vec<String>,
}

impl Outcome {
    fn new(result: OutcomeResult) -> Self {
        Outcome {
            result,
            conffiles: Vec::new(),
            history_id: None,
            restored: None,
            log: Vec::new(),
        }
    }

    pub fn is_success(&self) -> bool {
        self.result == OutcomeResult::Success
    }

    pub fn conflicts(&self) -> impl Iterator<Item = &ConffileReport> {
        self.conffiles.iter().filter(|c| c.outcome.is_conflict())
    }
}

/// Plans `r` and executes the plan; an unsatisfiable request becomes a
/// resolution failure that touches nothing.
pub fn run(
    u: &Universe,
    s0: &Status,
    r: &Request,
    spec: &PreferenceSpec,
    store: &Store,
    repo: &Path,
    opts: &ExecOptions,
) -> Outcome {
    match plan(u, s0, r, spec) {
        Ok(p) => execute_plan(&p, store, repo, opts),
        Err(unsat) => Outcome::new(OutcomeResult::ResolutionFailure(unsat)),
    }
}

enum Failure {
    Script(FailedStep),
    Io(FailedStep),
}

/// Retrieves every payload, then runs the actions inside one transaction.
/// Any failure rolls the whole transaction back.
pub fn execute_plan(plan: &Plan<'_>, store: &Store, repo: &Path, opts: &ExecOptions) -> Outcome {
    let mut out = Outcome::new(OutcomeResult::Success);
    if plan.is_empty() {
        out.log.push("Nothing to do.".into());
        return out;
    }
    let staging = store.root().join(CACHE_DIR);
    let mut staged = BTreeMap::new();
    let mut n = 0;
    for (i, a) in plan.actions.iter().enumerate() {
        if a.kind != ActionKind::Retrieve {
            continue;
        }
        n += 1;
        match retrieve(plan.universe, &a.package, repo, &staging) {
            Ok(r) => {
                out.log.push(format!("Get: {n} {} {}", a.package.name, a.package.version));
                staged.insert(a.package.clone(), r.dir);
            }
            Err(e) => {
                out.result = OutcomeResult::IoFailure(FailedStep::io(Some(i), Some(&a.package), e));
                return out;
            }
        }
    }
    out.log.push(format!("Fetched {}kB", plan.summary.download_kb));

    let initial = match store.tree_hash() {
        Ok(h) => h,
        Err(e) => {
            out.result = OutcomeResult::IoFailure(FailedStep::io(None, None, e));
            return out;
        }
    };
    let mut txn = match store.begin() {
        Ok(t) => t,
        Err(e) => {
            out.result = OutcomeResult::IoFailure(FailedStep::io(None, None, e));
            return out;
        }
    };

    let mut runner = Runner {
        plan,
        staged: &staged,
        opts,
        scripts_run: 0,
        files_written: 0,
        out: &mut out,
    };
    let result = runner.run_all(&mut txn).and_then(|()| {
        txn.write_status(&plan.solution.status.to_text())
            .map_err(|e| Failure::Io(FailedStep::io(None, None, e)))
    });
    match result {
        Ok(()) => match txn.commit(&plan.request.to_string(), "success") {
            Ok(record) => out.history_id = Some(record.id),
            Err(e) => {
                out.result = OutcomeResult::IoFailure(FailedStep::io(None, None, e));
                out.restored = Some(store.tree_hash().is_ok_and(|h| h == initial));
            }
        },
        Err(f) => {
            out.result = match f {
                Failure::Script(s) => OutcomeResult::ScriptFailure(s),
                Failure::Io(s) => OutcomeResult::IoFailure(s),
            };
            let rolled = txn.rollback();
            out.restored = Some(rolled.is_ok() && store.tree_hash().is_ok_and(|h| h == initial));
            out.conffiles.clear();
        }
    }
    out
}

fn info_path(name: &PackageName, hook: Hook) -> RelPath {
    RelPath::parse(&format!("{INFO_DIR}/{name}.{}", hook.as_str())).expect("valid path")
}

struct Runner<'a, 'u> {
    plan: &'a Plan<'u>,
    staged: &'a BTreeMap<PackageId, PathBuf>,
    opts: &'a ExecOptions,
    scripts_run: usize,
    files_written: usize,
    out: &'a mut Outcome,
}

impl Runner<'_, '_> {
    fn run_all(&mut self, txn: &mut Transaction<'_>) -> Result<(), Failure> {
        for (i, a) in self.plan.actions.iter().enumerate() {
            let pkg = self
                .plan
                .universe
                .get(&a.package)
                .ok_or_else(|| Failure::Io(FailedStep::io(Some(i), Some(&a.package), "not in the universe")))?;
            let io = |e: TxnError| Failure::Io(FailedStep::io(Some(i), Some(&a.package), e));
            match a.kind {
                ActionKind::Retrieve => {}
                ActionKind::RemoveFiles => self.remove_files(txn, pkg).map_err(io)?,
                ActionKind::Unpack => self.unpack(txn, i, pkg)?,
                kind => {
                    let hook = kind.hook().expect("hook action");
                    self.hook(txn, i, pkg, hook)?;
                    if hook == Hook::Postrm && matches!(self.plan.changes[pkg.name()], Change::Remove(_)) {
                        for h in Hook::ALL {
                            txn.write_internal(&info_path(pkg.name(), h), Mutation::Delete).map_err(io)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn hook(&mut self, txn: &mut Transaction<'_>, i: usize, pkg: &Package, hook: Hook) -> Result<(), Failure> {
        let position = self.scripts_run;
        self.scripts_run += 1;
        let change = &self.plan.changes[pkg.name()];
        match (hook, change) {
            (Hook::Prerm, Change::Remove(_)) => self.out.log.push(format!("Removing {} ({}) ...", pkg.name(), pkg.version())),
            (Hook::Postinst, _) => self.out.log.push(format!("Setting up {} ({}) ...", pkg.name(), pkg.version())),
            _ => {}
        }
        let fail = |step: Option<usize>, message: String| {
            Failure::Script(FailedStep {
                action: Some(i),
                package: Some(pkg.id.clone()),
                hook: Some(hook),
                step,
                message,
            })
        };
        let io = |e: TxnError| Failure::Io(FailedStep::io(Some(i), Some(&pkg.id), e));

        // Old packages run the scripts saved at their unpack; new ones run
        // from the staged payload.
        let (source, text) = match hook {
            Hook::Prerm | Hook::Postrm => {
                let p = info_path(pkg.name(), hook);
                let node = txn.store().read(&p).map_err(io)?;
                (p.to_string(), node.bytes().map(<[u8]>::to_vec))
            }
            Hook::Preinst | Hook::Postinst => match pkg.scripts.get(&hook) {
                Some(rel) => {
                    let path = self.staged[&pkg.id].join(rel.as_str());
                    let bytes = fs::read(&path).map_err(|e| io(e.into()))?;
                    (format!("{}/{rel}", pkg.id.archive_name()), Some(bytes))
                }
                None => (String::new(), None),
            },
        };
        let mut program = match text {
            Some(bytes) => {
                let text = String::from_utf8(bytes).map_err(|_| fail(None, format!("{source}: not UTF-8")))?;
                parse_script(&text).map_err(|e| fail(None, format!("{source}: {e}")))?
            }
            None => ScriptProgram::default(),
        };
        program.source_path = source;
        if self.opts.faults.script_at == Some(position) {
            program.steps.push(Step::Fail("injected failure".into()));
            program.lines.push(program.lines.last().map_or(1, |l| l + 1));
        }
        let (old, new) = match change {
            Change::Install(n) => (None, Some(n.version.clone())),
            Change::Upgrade { old, new } => (Some(old.version.clone()), Some(new.version.clone())),
            Change::Remove(o) => (Some(o.version.clone()), None),
        };
        let env = ScriptEnv {
            package: pkg.name().clone(),
            old,
            new,
            hook,
        };
        // Compensation is left to the transaction rollback.
        mscript::execute(&program, txn, &env)
            .map(|_| ())
            .map_err(|f| fail(Some(f.step), f.to_string()))
    }

    /// Deletes the files of `pkg` that no package owns in the target
    /// status. Conffiles stay unless purging.
    fn remove_files(&mut self, txn: &mut Transaction<'_>, pkg: &Package) -> Result<(), TxnError> {
        let target = &self.plan.solution.status;
        for f in &pkg.files {
            if target.owner_of(f).is_some() {
                continue;
            }
            if pkg.is_conffile(f) {
                if !self.opts.purge {
                    continue;
                }
                forget_pristine(txn, pkg.name(), f).map_err(|e| TxnError::Precondition(e.to_string()))?;
            }
            if !txn.store().read(f)?.is_dir() {
                txn.write_through(f, Mutation::Delete)?;
            }
        }
        Ok(())
    }

    fn unpack(&mut self, txn: &mut Transaction<'_>, i: usize, pkg: &Package) -> Result<(), Failure> {
        let io = |e: &dyn std::fmt::Display| Failure::Io(FailedStep::io(Some(i), Some(&pkg.id), e));
        self.out.log.push(format!("Selecting package {}.", pkg.name()));
        self.out.log.push(format!("Unpacking {} ({}) ...", pkg.name(), pkg.id.archive_name()));
        let dir = &self.staged[&pkg.id];
        for f in &pkg.files {
            let position = self.files_written;
            self.files_written += 1;
            if self.opts.faults.io_at == Some(position) {
                return Err(io(&format!("injected I/O failure writing {f}")));
            }
            let Node::File { bytes, mode } = Node::read(&dir.join(f.as_str())).map_err(|e| io(&e))? else {
                return Err(io(&format!("payload entry {f} is not a file")));
            };
            for parent in f.ancestors() {
                if !txn.store().read(&parent).map_err(|e| io(&e))?.is_dir() {
                    txn.write_through(&parent, Mutation::mkdir()).map_err(|e| io(&e))?;
                }
            }
            if pkg.is_conffile(f) {
                let report = upgrade_conffile(txn, &pkg.id, f, &bytes, mode, pkg.syntax_of(f), self.opts.policy)
                    .map_err(|e| io(&e))?;
                if let Some(side) = &report.pkgnew {
                    self.out.log.push(format!("Configuration file {f} has local changes; new version saved as {side}"));
                }
                self.out.conffiles.push(report);
            } else {
                txn.write_through(f, Mutation::Write { bytes, mode }).map_err(|e| io(&e))?;
            }
        }
        for hook in Hook::ALL {
            let p = info_path(pkg.name(), hook);
            let m = match pkg.scripts.get(&hook) {
                Some(rel) => {
                    let bytes = fs::read(dir.join(rel.as_str())).map_err(|e| io(&e))?;
                    Mutation::write(bytes)
                }
                None => Mutation::Delete,
            };
            txn.write_internal(&p, m).map_err(|e| io(&e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolver::parse_request;
    use crate::universe::parse_status;

    const ATERM: &str = "\
Package: aterm
Version: 1.0.1-4
Size: 340
Depends: libafterimage0
Files: usr/bin/aterm, etc/aterm.conf
Conffiles: etc/aterm.conf
Postinst: scripts/postinst

Package: aterm
Version: 1.0.2-1
Size: 341
Depends: libafterimage0
Files: usr/bin/aterm, etc/aterm.conf
Conffiles: etc/aterm.conf

Package: libafterimage0
Version: 2.2.8-2
Size: 46
Files: usr/lib/libAfterImage.so.0
Prerm: scripts/prerm
";

    struct Fixture {
        _dir: tempfile::TempDir,
        root: PathBuf,
        repo: PathBuf,
        u: Universe,
    }

    fn write(path: &Path, text: &str) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, text).unwrap();
    }

    fn fixture(postinst: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("root");
        let repo = dir.path().join("repo");
        fs::create_dir_all(&root).unwrap();
        write(&repo.join("Packages"), ATERM);
        let a = repo.join("aterm_1.0.1-4");
        write(&a.join("usr/bin/aterm"), "aterm 1\n");
        write(&a.join("etc/aterm.conf"), "font=fixed\ngeometry=80x24\n");
        write(&a.join("scripts/postinst"), postinst);
        let a2 = repo.join("aterm_1.0.2-1");
        write(&a2.join("usr/bin/aterm"), "aterm 2\n");
        write(&a2.join("etc/aterm.conf"), "font=fixed\ngeometry=100x30\n");
        let l = repo.join("libafterimage0_2.2.8-2");
        write(&l.join("usr/lib/libAfterImage.so.0"), "lib\n");
        write(&l.join("scripts/prerm"), "remove var/lib/afterimage.stamp\n");
        let u = Universe::parse(ATERM).unwrap();
        Fixture { _dir: dir, root, repo, u }
    }

    fn apply(f: &Fixture, request: &str, opts: &ExecOptions) -> Outcome {
        let store = Store::open(&f.root).unwrap();
        let s0 = parse_status(&store.status_text().unwrap(), &f.u).unwrap();
        let r = parse_request(request).unwrap();
        run(&f.u, &s0, &r, &PreferenceSpec::default(), &store, &f.repo, opts)
    }

    fn read(f: &Fixture, p: &str) -> Option<String> {
        fs::read_to_string(f.root.join(p)).ok()
    }

    #[test]
    fn install_aterm() {
        let f = fixture("mkdir var\nmkdir var/lib\nappend var/lib/$PKG.log configured $NEW\n");
        let o = apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions::default());
        assert_eq!(o.result, OutcomeResult::Success);
        assert_eq!(o.history_id, Some(1));
        assert_eq!(read(&f, "usr/bin/aterm").unwrap(), "aterm 1\n");
        assert_eq!(read(&f, "var/lib/aterm.log").unwrap(), "configured 1.0.1-4\n");
        let store = Store::open(&f.root).unwrap();
        let s = parse_status(&store.status_text().unwrap(), &f.u).unwrap();
        assert_eq!(s.len(), 2);
        assert!(o.log.contains(&"Setting up libafterimage0 (2.2.8-2) ...".to_string()));
        let setup: Vec<&String> = o.log.iter().filter(|l| l.starts_with("Setting up")).collect();
        assert!(setup[0].contains("libafterimage0"));
    }

    #[test]
    fn failing_postinst_restores_everything() {
        let f = fixture("mkdir var\nfail boom\n");
        let store = Store::open(&f.root).unwrap();
        let before = store.tree_hash().unwrap();
        drop(store);
        let o = apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions::default());
        let OutcomeResult::ScriptFailure(step) = &o.result else {
            panic!("{:?}", o.result)
        };
        assert_eq!(step.hook, Some(Hook::Postinst));
        assert_eq!(step.step, Some(1));
        assert!(step.message.contains("boom"));
        assert_eq!(o.restored, Some(true));
        let store = Store::open(&f.root).unwrap();
        assert_eq!(store.tree_hash().unwrap(), before);
        assert_eq!(store.status_text().unwrap(), "");
        assert!(store.history().unwrap().is_empty());
    }

    #[test]
    fn upgrade_with_conflicting_conffile() {
        let f = fixture("");
        assert!(apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions::default()).is_success());
        fs::write(f.root.join("etc/aterm.conf"), "font=fixed\ngeometry=132x50\n").unwrap();
        let o = apply(&f, "install aterm (= 1.0.2-1)", &ExecOptions::default());
        assert!(o.is_success(), "{:?}", o.result);
        assert_eq!(o.conflicts().count(), 1);
        assert_eq!(read(&f, "etc/aterm.conf").unwrap(), "font=fixed\ngeometry=132x50\n");
        assert_eq!(read(&f, "etc/aterm.conf.pkgnew").unwrap(), "font=fixed\ngeometry=100x30\n");
        assert_eq!(read(&f, "usr/bin/aterm").unwrap(), "aterm 2\n");
        // the old postinst is gone with the old version
        assert!(read(&f, ".pkgdb/info/aterm.postinst").is_none());
    }

    #[test]
    fn missing_payload_touches_nothing() {
        let f = fixture("");
        fs::remove_dir_all(f.repo.join("libafterimage0_2.2.8-2")).unwrap();
        let store = Store::open(&f.root).unwrap();
        let before = store.tree_hash().unwrap();
        drop(store);
        let o = apply(&f, "install aterm", &ExecOptions::default());
        assert!(matches!(o.result, OutcomeResult::IoFailure(_)));
        assert_eq!(o.restored, None);
        assert_eq!(Store::open(&f.root).unwrap().tree_hash().unwrap(), before);
    }

    #[test]
    fn retrieve_is_idempotent() {
        let f = fixture("");
        let staging = f.root.join("stage");
        let id = PackageId::parse("aterm 1.0.1-4").unwrap();
        let a = retrieve(&f.u, &id, &f.repo, &staging).unwrap();
        let b = retrieve(&f.u, &id, &f.repo, &staging).unwrap();
        assert_eq!(a, b);
        assert_eq!(tree_hash(&a.dir).unwrap(), a.hash);
    }

    #[test]
    fn removal_runs_saved_prerm_and_keeps_conffiles() {
        let f = fixture("");
        assert!(apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions::default()).is_success());
        fs::create_dir_all(f.root.join("var/lib")).unwrap();
        fs::write(f.root.join("var/lib/afterimage.stamp"), "x").unwrap();
        let o = apply(&f, "remove libafterimage0", &ExecOptions::default());
        assert!(o.is_success(), "{:?}", o.result);
        assert!(read(&f, "var/lib/afterimage.stamp").is_none());
        assert!(read(&f, "usr/lib/libAfterImage.so.0").is_none());
        assert!(read(&f, "usr/bin/aterm").is_none());
        assert!(read(&f, "etc/aterm.conf").is_some());
        assert!(read(&f, ".pkgdb/info/libafterimage0.prerm").is_none());
    }

    #[test]
    fn purge_deletes_conffiles() {
        let f = fixture("");
        assert!(apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions::default()).is_success());
        let opts = ExecOptions {
            purge: true,
            ..Default::default()
        };
        assert!(apply(&f, "remove aterm", &opts).is_success());
        assert!(read(&f, "etc/aterm.conf").is_none());
    }

    #[test]
    fn injected_faults_roll_back() {
        let f = fixture("append etc/motd hi\n");
        let store = Store::open(&f.root).unwrap();
        let before = store.tree_hash().unwrap();
        drop(store);
        for faults in [
            Faults { script_at: Some(0), io_at: None },
            Faults { script_at: Some(3), io_at: None },
            Faults { script_at: None, io_at: Some(2) },
        ] {
            let o = apply(&f, "install aterm (= 1.0.1-4)", &ExecOptions { faults, ..Default::default() });
            assert!(!o.is_success());
            assert_eq!(o.restored, Some(true));
            assert_eq!(Store::open(&f.root).unwrap().tree_hash().unwrap(), before);
        }
    }
}
