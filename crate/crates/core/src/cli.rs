//! The `pkgup` command line.
//!
//! Exit codes: 0 success; 1 "no": uninstallable packages, unsatisfiable
//! request, gap in history; 2 bad input; 3 script failure (store
//! restored); 4 I/O failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::confmerge::{structured_merge, ConffilePolicy, MergeOutcome};
use crate::mscript::{classify, parse_script};
use crate::planner::{self, simulate, ExecOptions, Outcome, OutcomeResult, Plan};
use crate::preferences::{parse_prefs, PreferenceSpec};
use crate::resolver::{health_check, parse_request, Unsat};
use crate::txn::{Store, TxnError};
use crate::universe::{parse_status, ConfSyntax, Status, Universe};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NO: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SCRIPT: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pkgup", version, about = "Transactional package upgrades over a sandbox root")]
pub struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct RootArgs {
    /// Sandbox root holding the installed files and `.pkgdb`.
    #[arg(long)]
    pub root: PathBuf,
    /// Glob of paths rollback must leave alone; repeatable. Defaults to
    /// var/log/** and home/**.
    #[arg(long = "preserve")]
    pub preserve: Vec<String>,
}

#[derive(Debug, Args, Clone)]
pub struct PlanArgs {
    #[command(flatten)]
    pub root: RootArgs,
    /// Repository directory with `Packages` and `<name>_<version>/` payloads.
    #[arg(long)]
    pub repo: PathBuf,
    /// Preference criteria, e.g. `-removed,-changed,-new,-download`.
    #[arg(long)]
    pub prefs: Option<String>,
    /// Request, e.g. `install aterm, remove xterm`.
    pub request: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List packages of the repository that cannot be installed.
    Check {
        #[arg(long)]
        repo: PathBuf,
    },
    /// Resolve a request and print the plan without touching anything.
    Solve(PlanArgs),
    /// Resolve a request and deploy it in one transaction.
    Apply {
        #[command(flatten)]
        plan: PlanArgs,
        /// Print the plan only, as `solve` does.
        #[arg(long)]
        dry_run: bool,
        /// Also delete conffiles of removed packages.
        #[arg(long)]
        purge: bool,
        /// Conffile handling: auto, keep or new.
        #[arg(long, default_value = "auto", value_parser = parse_policy)]
        conffiles: ConffilePolicy,
    },
    /// Undo committed transactions back to (and including) the given id.
    Rollback {
        #[command(flatten)]
        root: RootArgs,
        id: u64,
        /// Skip the check that recorded files were not changed since.
        #[arg(long)]
        force: bool,
    },
    /// List committed transactions.
    History {
        #[command(flatten)]
        root: RootArgs,
        /// Drop all but the newest N records first.
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Three-way merge of arbitrary files.
    MergeConfig {
        base: PathBuf,
        local: PathBuf,
        incoming: PathBuf,
        /// lines or keyvalue.
        #[arg(long, default_value = "lines", value_parser = parse_syntax)]
        syntax: ConfSyntax,
        /// Write the result here instead of standard output.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Parse a maintainer script and report its class.
    LintScript { path: PathBuf },
}

fn parse_policy(s: &str) -> Result<ConffilePolicy, String> {
    ConffilePolicy::parse(s).ok_or_else(|| format!("expected auto, keep or new, got {s:?}"))
}

fn parse_syntax(s: &str) -> Result<ConfSyntax, String> {
    ConfSyntax::parse(s).map_err(|e| e.to_string())
}

/// Output sinks and the JSON switch.
struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    json: bool,
}

impl Io<'_> {
    fn text(&mut self, s: &str) {
        let _ = self.out.write_all(s.as_bytes());
    }

    fn value(&mut self, v: &Value) {
        let _ = writeln!(self.out, "{}", serde_json::to_string_pretty(v).expect("json"));
    }

    fn fail(&mut self, code: i32, msg: &str) -> i32 {
        if self.json {
            self.value(&json!({ "error": msg, "exit": code }));
        } else {
            let _ = writeln!(self.err, "pkgup: {msg}");
        }
        code
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return e.exit_code();
        }
    };
    let mut io = Io {
        out,
        err,
        json: cli.json,
    };
    match cli.command {
        Command::Check { repo } => cmd_check(&mut io, &repo),
        Command::Solve(p) => cmd_solve(&mut io, &p),
        Command::Apply {
            plan,
            dry_run,
            purge,
            conffiles,
        } => {
            if dry_run {
                cmd_solve(&mut io, &plan)
            } else {
                let opts = ExecOptions {
                    policy: conffiles,
                    purge,
                    ..Default::default()
                };
                cmd_apply(&mut io, &plan, &opts)
            }
        }
        Command::Rollback { root, id, force } => cmd_rollback(&mut io, &root, id, force),
        Command::History { root, keep } => cmd_history(&mut io, &root, keep),
        Command::MergeConfig {
            base,
            local,
            incoming,
            syntax,
            output,
        } => cmd_merge(&mut io, [&base, &local, &incoming], syntax, output.as_deref()),
        Command::LintScript { path } => cmd_lint(&mut io, &path),
    }
}

fn load_universe(repo: &Path) -> Result<Universe, (i32, String)> {
    let path = repo.join("Packages");
    let text = fs::read_to_string(&path).map_err(|e| (EXIT_INPUT, format!("{}: {e}", path.display())))?;
    Universe::parse(&text).map_err(|e| (EXIT_INPUT, format!("{}: {e}", path.display())))
}

fn open_store(args: &RootArgs) -> Result<Store, (i32, String)> {
    if !args.root.is_dir() {
        return Err((EXIT_INPUT, format!("{}: root is not a directory", args.root.display())));
    }
    let mut store = Store::open(&args.root).map_err(|e| (EXIT_IO, e.to_string()))?;
    if !args.preserve.is_empty() {
        store
            .set_preserve(args.preserve.iter().map(String::as_str))
            .map_err(|e| (EXIT_INPUT, e.to_string()))?;
    }
    Ok(store)
}

struct Loaded {
    u: Universe,
    store: Store,
    s0: Status,
    spec: PreferenceSpec,
}

fn load(args: &PlanArgs) -> Result<Loaded, (i32, String)> {
    if !args.repo.is_dir() {
        return Err((EXIT_INPUT, format!("{}: repo is not a directory", args.repo.display())));
    }
    let same = match (fs::canonicalize(&args.root.root), fs::canonicalize(&args.repo)) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same {
        return Err((EXIT_INPUT, "root and repo must be different directories".into()));
    }
    let u = load_universe(&args.repo)?;
    let store = open_store(&args.root)?;
    let status = store.status_text().map_err(|e| (EXIT_IO, e.to_string()))?;
    let s0 = parse_status(&status, &u).map_err(|e| (EXIT_INPUT, format!("status: {e}")))?;
    let spec = match &args.prefs {
        Some(p) => parse_prefs(p).map_err(|e| (EXIT_INPUT, format!("--prefs: {e}")))?,
        None => PreferenceSpec::default(),
    };
    Ok(Loaded { u, store, s0, spec })
}

fn cmd_check(io: &mut Io<'_>, repo: &Path) -> i32 {
    let u = match load_universe(repo) {
        Ok(u) => u,
        Err((code, msg)) => return io.fail(code, &msg),
    };
    let report = health_check(&u);
    let broken: Vec<_> = report.iter().filter(|(_, v)| !v.ok()).collect();
    if io.json {
        let items: Vec<Value> = broken
            .iter()
            .map(|(id, v)| {
                json!({
                    "package": id.to_string(),
                    "witnesses": v.violations.iter().map(ToString::to_string).collect::<Vec<_>>(),
                })
            })
            .collect();
        io.value(&json!({ "packages": u.len(), "not_installable": items }));
    } else {
        io.text(&format!("{} packages, {} not installable\n", u.len(), broken.len()));
        for (id, v) in &broken {
            io.text(&format!("{id}: not installable\n"));
            for viol in &v.violations {
                io.text(&format!("  {viol}\n"));
            }
        }
    }
    if broken.is_empty() {
        EXIT_OK
    } else {
        EXIT_NO
    }
}

fn unsat_json(u: &Unsat) -> Value {
    json!({
        "result": "resolution-failure",
        "request": u.request.to_string(),
        "notes": u.notes.iter().map(ToString::to_string).collect::<Vec<_>>(),
    })
}

fn plan_json(p: &Plan<'_>) -> Value {
    let s = &p.summary;
    json!({
        "request": p.request.to_string(),
        "summary": {
            "upgraded": s.upgraded,
            "newly_installed": s.new,
            "removed": s.removed,
            "not_upgraded": s.not_upgraded,
            "download_kb": s.download_kb,
        },
        "actions": p.actions.iter().map(|a| json!({ "kind": a.kind.as_str(), "package": a.package.to_string() })).collect::<Vec<_>>(),
        "status": p.solution.status.installed().iter().map(ToString::to_string).collect::<Vec<_>>(),
    })
}

fn with_plan(io: &mut Io<'_>, args: &PlanArgs, then: impl FnOnce(&mut Io<'_>, &Loaded, &Plan<'_>) -> i32) -> i32 {
    let loaded = match load(args) {
        Ok(l) => l,
        Err((code, msg)) => return io.fail(code, &msg),
    };
    let r = match parse_request(&args.request) {
        Ok(r) => r,
        Err(e) => return io.fail(EXIT_INPUT, &format!("request: {e}")),
    };
    match planner::plan(&loaded.u, &loaded.s0, &r, &loaded.spec) {
        Ok(p) => then(io, &loaded, &p),
        Err(unsat) => {
            if io.json {
                io.value(&unsat_json(&unsat));
            } else {
                io.text(&format!("{unsat}\n"));
            }
            EXIT_NO
        }
    }
}

fn cmd_solve(io: &mut Io<'_>, args: &PlanArgs) -> i32 {
    with_plan(io, args, |io, _, p| {
        if io.json {
            io.value(&plan_json(p));
        } else {
            io.text(&simulate(p));
        }
        EXIT_OK
    })
}

fn outcome_json(p: &Plan<'_>, o: &Outcome) -> Value {
    let (result, failed) = match &o.result {
        OutcomeResult::Success => ("success", Value::Null),
        OutcomeResult::ResolutionFailure(u) => return unsat_json(u),
        OutcomeResult::ScriptFailure(s) | OutcomeResult::IoFailure(s) => (
            if matches!(o.result, OutcomeResult::ScriptFailure(_)) {
                "script-failure"
            } else {
                "io-failure"
            },
            json!({
                "action": s.action.map(|i| p.actions[i].to_string()),
                "package": s.package.as_ref().map(ToString::to_string),
                "hook": s.hook.map(|h| h.as_str()),
                "step": s.step,
                "message": s.message,
            }),
        ),
    };
    json!({
        "result": result,
        "failed_step": failed,
        "conffile_conflicts": o.conflicts().map(conflict_json).collect::<Vec<_>>(),
        "history_id": o.history_id,
        "restored": o.restored,
        "plan": plan_json(p),
    })
}

fn conflict_json(c: &crate::confmerge::ConffileReport) -> Value {
    json!({
        "path": c.path.to_string(),
        "pkgnew": c.pkgnew.as_ref().map(ToString::to_string),
        "hunks": c.outcome.hunks.iter().map(|h| h.location.clone()).collect::<Vec<_>>(),
    })
}

fn cmd_apply(io: &mut Io<'_>, args: &PlanArgs, opts: &ExecOptions) -> i32 {
    with_plan(io, args, |io, loaded, p| {
        let o = planner::execute_plan(p, &loaded.store, &args.repo, opts);
        let code = match &o.result {
            OutcomeResult::Success => EXIT_OK,
            OutcomeResult::ResolutionFailure(_) => EXIT_NO,
            OutcomeResult::ScriptFailure(_) => EXIT_SCRIPT,
            OutcomeResult::IoFailure(_) => EXIT_IO,
        };
        if io.json {
            io.value(&outcome_json(p, &o));
            return code;
        }
        io.text(&simulate(p));
        for line in &o.log {
            io.text(&format!("{line}\n"));
        }
        for c in o.conflicts() {
            let side = c.pkgnew.as_ref().map_or(String::new(), |s| format!(", incoming version in {s}"));
            io.text(&format!("conffile conflict: {} kept{side}\n", c.path));
        }
        match &o.result {
            OutcomeResult::Success => {
                if let Some(id) = o.history_id {
                    io.text(&format!("Committed transaction {id}.\n"));
                }
            }
            OutcomeResult::ScriptFailure(s) | OutcomeResult::IoFailure(s) => {
                let kind = if code == EXIT_SCRIPT { "script failure" } else { "I/O failure" };
                let at = s.action.map_or(String::new(), |i| format!(" during `{}`", p.actions[i]));
                let _ = writeln!(io.err, "pkgup: {kind}{at}: {}", s.message);
                match o.restored {
                    Some(true) => io.text("Store restored to its initial state.\n"),
                    Some(false) => io.text("WARNING: store could not be fully restored.\n"),
                    None => io.text("Store untouched.\n"),
                }
            }
            OutcomeResult::ResolutionFailure(_) => {}
        }
        code
    })
}

fn cmd_rollback(io: &mut Io<'_>, args: &RootArgs, id: u64, force: bool) -> i32 {
    let store = match open_store(args) {
        Ok(s) => s,
        Err((code, msg)) => return io.fail(code, &msg),
    };
    match store.rollback_to(id, force) {
        Ok(r) => {
            if io.json {
                io.value(&json!({ "reverted": r.reverted, "restored": r.restored, "warnings": r.warnings }));
            } else {
                if r.reverted.is_empty() {
                    io.text("Nothing to roll back.\n");
                }
                for id in &r.reverted {
                    io.text(&format!("Reverted transaction {id}.\n"));
                }
                for w in &r.warnings {
                    io.text(&format!("warning: {w}\n"));
                }
            }
            EXIT_OK
        }
        Err(e @ (TxnError::GapInHistory(_) | TxnError::Tampered { .. } | TxnError::AlreadyLocked)) => {
            io.fail(EXIT_NO, &e.to_string())
        }
        Err(e) => io.fail(EXIT_IO, &e.to_string()),
    }
}

fn cmd_history(io: &mut Io<'_>, args: &RootArgs, keep: Option<usize>) -> i32 {
    let store = match open_store(args) {
        Ok(s) => s,
        Err((code, msg)) => return io.fail(code, &msg),
    };
    if let Some(k) = keep {
        if let Err(e) = store.prune(k) {
            return io.fail(EXIT_IO, &e.to_string());
        }
    }
    let records = match store.history() {
        Ok(r) => r,
        Err(e) => return io.fail(EXIT_IO, &e.to_string()),
    };
    if io.json {
        io.value(&serde_json::to_value(&records).expect("json"));
    } else {
        for r in &records {
            io.text(&format!(
                "{:>4}  {}  {:<8} {} entries, {} bytes  {}\n",
                r.id, r.timestamp, r.outcome, r.entries, r.journal_bytes, r.request
            ));
        }
    }
    EXIT_OK
}

fn merge_json(o: &MergeOutcome) -> Value {
    json!({
        "kind": o.kind.to_string(),
        "fallback": o.fallback,
        "hunks": o.hunks.iter().map(|h| json!({
            "location": h.location,
            "base": h.base,
            "local": h.local,
            "incoming": h.incoming,
        })).collect::<Vec<_>>(),
    })
}

fn cmd_merge(io: &mut Io<'_>, files: [&PathBuf; 3], syntax: ConfSyntax, output: Option<&Path>) -> i32 {
    let mut inputs = Vec::new();
    for f in files {
        match fs::read(f) {
            Ok(b) => inputs.push(b),
            Err(e) => return io.fail(EXIT_INPUT, &format!("{}: {e}", f.display())),
        }
    }
    let o = structured_merge(&inputs[0], &inputs[1], &inputs[2], syntax);
    match output {
        Some(path) => {
            if let Err(e) = fs::write(path, &o.content) {
                return io.fail(EXIT_IO, &format!("{}: {e}", path.display()));
            }
        }
        None if !io.json => {
            let _ = io.out.write_all(&o.content);
        }
        None => {}
    }
    if io.json {
        let mut v = merge_json(&o);
        if output.is_none() {
            v["content"] = Value::String(String::from_utf8_lossy(&o.content).into_owned());
        }
        io.value(&v);
    } else {
        let note = if o.fallback { " (fell back to line merge)" } else { "" };
        let _ = writeln!(io.err, "{}{note}, {} conflicting hunk(s)", o.kind, o.hunks.len());
    }
    if o.is_conflict() {
        EXIT_NO
    } else {
        EXIT_OK
    }
}

fn cmd_lint(io: &mut Io<'_>, path: &Path) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return io.fail(EXIT_INPUT, &format!("{}: {e}", path.display())),
    };
    match parse_script(&text) {
        Ok(p) => {
            let class = classify(&p);
            if io.json {
                io.value(&json!({ "steps": p.steps.len(), "class": class.to_string() }));
            } else {
                io.text(&format!("{}: {} step(s), {class}\n", path.display(), p.steps.len()));
            }
            EXIT_OK
        }
        Err(e) => io.fail(EXIT_INPUT, &format!("{}: {e}", path.display())),
    }
}
