//! From request to deployed status: resolution, action ordering,
//! retrieval and transactional execution.

mod exec;
mod order;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::preferences::{optimize, PreferenceSpec};
use crate::resolver::{Request, Solution, Unsat};
use crate::universe::{Hook, PackageId, PackageName, Status, Universe};

pub use exec::{
    execute_plan, retrieve, run, ExecOptions, FailedStep, Faults, Outcome, OutcomeResult,
    PayloadError, Retrieved,
};
pub use order::dependency_order;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    Retrieve,
    Prerm,
    Preinst,
    RemoveFiles,
    Unpack,
    Postrm,
    Postinst,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Retrieve => "retrieve",
            ActionKind::Prerm => "prerm",
            ActionKind::Preinst => "preinst",
            ActionKind::RemoveFiles => "remove-files",
            ActionKind::Unpack => "unpack",
            ActionKind::Postrm => "postrm",
            ActionKind::Postinst => "postinst",
        }
    }

    /// The maintainer script hook this action runs, if any.
    pub fn hook(self) -> Option<Hook> {
        match self {
            ActionKind::Prerm => Some(Hook::Prerm),
            ActionKind::Preinst => Some(Hook::Preinst),
            ActionKind::Postrm => Some(Hook::Postrm),
            ActionKind::Postinst => Some(Hook::Postinst),
            _ => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanAction {
    pub kind: ActionKind,
    pub package: PackageId,
}

impl fmt::Display for PlanAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind, self.package)
    }
}

/// What happens to one package name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Change {
    Install(PackageId),
    Upgrade { old: PackageId, new: PackageId },
    Remove(PackageId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Summary {
    pub upgraded: usize,
    pub new: usize,
    pub removed: usize,
    /// Installed names for which the universe has a newer version that is
    /// not being installed.
    pub not_upgraded: usize,
    pub download_kb: u64,
}

#[derive(Debug, Clone)]
pub struct Plan<'u> {
    pub universe: &'u Universe,
    pub s0: Status,
    pub request: Request,
    pub solution: Solution,
    pub changes: BTreeMap<PackageName, Change>,
    pub actions: Vec<PlanAction>,
    pub summary: Summary,
}

impl Plan<'_> {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Number of hook actions, each a possible script failure position.
    pub fn script_positions(&self) -> usize {
        self.actions.iter().filter(|a| a.kind.hook().is_some()).count()
    }

    /// Number of file writes performed by unpack actions.
    pub fn unpack_positions(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| a.kind == ActionKind::Unpack)
            .map(|a| self.universe.get(&a.package).map_or(0, |p| p.files.len()))
            .sum()
    }
}

/// Net changes between two statuses, keyed by package name.
pub fn diff_status(s0: &Status, s: &Status) -> BTreeMap<PackageName, Change> {
    let mut out = BTreeMap::new();
    for old in s0.installed() {
        match s.installed_version(&old.name) {
            None => {
                out.insert(old.name.clone(), Change::Remove(old.clone()));
            }
            Some(new) if new != old => {
                out.insert(
                    old.name.clone(),
                    Change::Upgrade {
                        old: old.clone(),
                        new: new.clone(),
                    },
                );
            }
            Some(_) => {}
        }
    }
    for new in s.installed() {
        if s0.installed_version(&new.name).is_none() {
            out.insert(new.name.clone(), Change::Install(new.clone()));
        }
    }
    out
}

/// Resolves `r` under `spec` and lays out the actions that turn `s0` into
/// the chosen status.
pub fn plan<'u>(u: &'u Universe, s0: &Status, r: &Request, spec: &PreferenceSpec) -> Result<Plan<'u>, Unsat> {
    let solution = optimize(u, s0, r, spec)?;
    Ok(plan_for(u, s0, r, solution))
}

/// Lays out the actions for a given solution.
pub fn plan_for<'u>(u: &'u Universe, s0: &Status, r: &Request, solution: Solution) -> Plan<'u> {
    let s = &solution.status;
    let changes = diff_status(s0, s);

    let mut incoming = BTreeSet::new();
    let mut removed = BTreeSet::new();
    let mut summary = Summary::default();
    for c in changes.values() {
        match c {
            Change::Install(id) => {
                summary.new += 1;
                incoming.insert(id.clone());
            }
            Change::Upgrade { new, .. } => {
                summary.upgraded += 1;
                incoming.insert(new.clone());
            }
            Change::Remove(id) => {
                summary.removed += 1;
                removed.insert(id.clone());
            }
        }
    }
    summary.download_kb = incoming.iter().filter_map(|id| u.get(id)).map(|p| p.size_kb).sum();
    summary.not_upgraded = s
        .installed()
        .iter()
        .filter(|id| u.latest(&id.name).is_some_and(|l| l != *id) && !incoming.contains(*id))
        .count();

    let configure = dependency_order(u, &incoming, s);
    let mut removal = dependency_order(u, &removed, s0);
    removal.reverse();

    let act = |kind, package: &PackageId| PlanAction {
        kind,
        package: package.clone(),
    };
    let mut actions = Vec::new();
    for id in &configure {
        actions.push(act(ActionKind::Retrieve, id));
    }
    for id in &removal {
        actions.push(act(ActionKind::Prerm, id));
        actions.push(act(ActionKind::RemoveFiles, id));
        actions.push(act(ActionKind::Postrm, id));
    }
    for id in &configure {
        let old = match &changes[&id.name] {
            Change::Upgrade { old, .. } => Some(old),
            _ => None,
        };
        if let Some(old) = old {
            actions.push(act(ActionKind::Prerm, old));
        }
        actions.push(act(ActionKind::Preinst, id));
        if let Some(old) = old {
            actions.push(act(ActionKind::RemoveFiles, old));
        }
        actions.push(act(ActionKind::Unpack, id));
    }
    for id in &configure {
        actions.push(act(ActionKind::Postinst, id));
    }

    Plan {
        universe: u,
        s0: s0.clone(),
        request: r.clone(),
        solution,
        changes,
        actions,
        summary,
    }
}

fn wrap_list(out: &mut String, header: &str, names: &[String]) {
    if names.is_empty() {
        return;
    }
    out.push_str(header);
    out.push('\n');
    out.push_str("  ");
    out.push_str(&names.join(" "));
    out.push('\n');
}

/// Dry-run transcript: package lists, counts, download size and the
/// ordered actions. Touches nothing.
pub fn simulate(plan: &Plan<'_>) -> String {
    let mut out = String::from("Reading package lists... Done\nBuilding dependency tree... Done\n");
    let mut removed = Vec::new();
    let mut extra = Vec::new();
    let mut new = Vec::new();
    let mut upgraded = Vec::new();
    for (name, c) in &plan.changes {
        match c {
            Change::Remove(_) => removed.push(name.to_string()),
            Change::Install(_) => {
                if !plan.request.mentions(name) {
                    extra.push(name.to_string());
                }
                new.push(name.to_string());
            }
            Change::Upgrade { .. } => upgraded.push(name.to_string()),
        }
    }
    wrap_list(&mut out, "The following packages will be REMOVED:", &removed);
    wrap_list(&mut out, "The following extra packages will be installed:", &extra);
    wrap_list(&mut out, "The following NEW packages will be installed:", &new);
    wrap_list(&mut out, "The following packages will be upgraded:", &upgraded);
    let s = &plan.summary;
    out.push_str(&format!(
        "{} upgraded, {} newly installed, {} to remove and {} not upgraded.\n",
        s.upgraded, s.new, s.removed, s.not_upgraded
    ));
    if plan.is_empty() {
        out.push_str("Nothing to do.\n");
        return out;
    }
    out.push_str(&format!("Need to get {}kB of archives.\n", s.download_kb));
    for a in &plan.actions {
        out.push_str(&format!("  {a}\n"));
    }
    out
}
