use std::fmt;

use crate::universe::{
    admits, format_clause, satisfies, Clause, ConflictReason, Package, PackageId, Status,
    Universe,
};

use super::{Action, Request, RequestAtom};

/// The static solution conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// The request is satisfied.
    Request,
    /// Every installed package has its dependencies.
    Dependencies,
    /// No two installed packages conflict.
    Conflicts,
}

impl Condition {
    pub fn letter(self) -> char {
        match self {
            Condition::Request => 'a',
            Condition::Dependencies => 'b',
            Condition::Conflicts => 'c',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Request(RequestAtom),
    Dependency {
        package: PackageId,
        clause: Clause,
    },
    Conflict {
        first: PackageId,
        second: PackageId,
        reason: ConflictReason,
    },
}

impl Violation {
    pub fn condition(&self) -> Condition {
        match self {
            Violation::Request(_) => Condition::Request,
            Violation::Dependency { .. } => Condition::Dependencies,
            Violation::Conflict { .. } => Condition::Conflicts,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) ", self.condition().letter())?;
        match self {
            Violation::Request(a) => write!(f, "request `{a}` not satisfied"),
            Violation::Dependency { package, clause } => {
                write!(f, "{package} depends on `{}`, which is unmet", format_clause(clause))
            }
            Violation::Conflict {
                first,
                second,
                reason,
            } => write!(f, "{first} and {second} conflict: {reason}"),
        }
    }
}

/// Result of checking a candidate status.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks conditions (a)–(c) for status `s` reached from `s0` under
/// request `r`.
///
/// Written directly from the definitions so it can serve as the oracle for
/// the encoding.
pub fn check_solution(u: &Universe, s0: &Status, s: &Status, r: &Request) -> Verdict {
    let installed: Vec<&Package> = s
        .installed()
        .iter()
        .map(|id| u.get(id).expect("status is a subset of the universe"))
        .collect();
    check_packages(s0, &installed, r)
}

/// Same as [`check_solution`] over an arbitrary package set, which may
/// hold two versions of one name.
pub(crate) fn check_packages(s0: &Status, installed: &[&Package], r: &Request) -> Verdict {
    let mut violations = Vec::new();

    for atom in r.atoms() {
        if !request_atom_holds(s0, installed, atom) {
            violations.push(Violation::Request(atom.clone()));
        }
    }

    for p in installed {
        for clause in &p.rel.depends {
            let met = clause
                .iter()
                .any(|atom| installed.iter().any(|q| satisfies(atom, q)));
            if !met {
                violations.push(Violation::Dependency {
                    package: p.id.clone(),
                    clause: clause.clone(),
                });
            }
        }
    }

    for (i, p) in installed.iter().enumerate() {
        for q in &installed[i + 1..] {
            if let Some(reason) = conflict(p, q) {
                violations.push(Violation::Conflict {
                    first: p.id.clone(),
                    second: q.id.clone(),
                    reason,
                });
            }
        }
    }
    Verdict { violations }
}

fn request_atom_holds(s0: &Status, installed: &[&Package], ra: &RequestAtom) -> bool {
    let atom = &ra.atom;
    let by_name = |p: &&&Package| p.id.name == atom.name && admits(atom.constraint.as_ref(), &p.id.version);
    let as_install = || {
        installed.iter().any(|p| {
            by_name(&p)
                || (atom.constraint.is_none()
                    && p.rel.provides.iter().any(|prov| prov.feature == atom.name))
        })
    };
    match ra.action {
        Action::Install => as_install(),
        Action::Remove => !installed.iter().any(|p| by_name(&p)),
        Action::Upgrade => match s0.installed_version(&atom.name) {
            None => as_install(),
            Some(base) => installed
                .iter()
                .any(|p| by_name(&p) && p.id.version >= base.version),
        },
    }
}

fn conflict(p: &Package, q: &Package) -> Option<ConflictReason> {
    for (a, b) in [(p, q), (q, p)] {
        if let Some(atom) = a.rel.conflicts.iter().find(|atom| satisfies(atom, b)) {
            return Some(ConflictReason::Declared {
                by: a.id.clone(),
                atom: atom.clone(),
            });
        }
    }
    if p.id.name == q.id.name {
        return Some(ConflictReason::SameName);
    }
    p.files
        .iter()
        .find(|f| q.files.contains(f))
        .map(|f| ConflictReason::SharedFile(f.clone()))
}
