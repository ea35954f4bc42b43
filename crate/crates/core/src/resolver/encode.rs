use std::collections::BTreeMap;
use std::fmt;

use crate::universe::{admits, PackageId, Status, Universe};

use super::sat::{Lit, Solver, Var};
use super::{Action, Request, RequestAtom};

/// Why a clause is in the formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Depends { package: PackageId, clause: usize },
    Conflict(PackageId, PackageId),
    Request(RequestAtom),
}

/// CNF over one variable per package of the universe.
#[derive(Debug, Clone)]
pub struct Formula {
    vars: Vec<PackageId>,
    index: BTreeMap<PackageId, Var>,
    pub clauses: Vec<Vec<Lit>>,
    pub origins: Vec<Origin>,
}

impl Formula {
    /// Variables in `PackageId` order; variable `i` stands for `vars()[i]`.
    pub fn vars(&self) -> &[PackageId] {
        &self.vars
    }

    pub fn var_of(&self, id: &PackageId) -> Option<Var> {
        self.index.get(id).copied()
    }

    pub fn package_of(&self, v: Var) -> &PackageId {
        &self.vars[v.index()]
    }

    /// Loads the clauses into a fresh solver whose first variables are the
    /// package variables.
    pub fn solver(&self) -> Solver {
        let mut s = Solver::with_vars(self.vars.len());
        for c in &self.clauses {
            if !s.add_clause(c) {
                break;
            }
        }
        s
    }

    /// The set of packages true in `model`.
    pub fn decode(&self, model: &[bool]) -> Vec<PackageId> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(i, _)| model[*i])
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Evaluates every clause under the assignment `installed`.
    pub fn satisfied_by(&self, installed: &[bool]) -> bool {
        self.clauses
            .iter()
            .all(|c| c.iter().any(|l| l.eval(installed)))
    }

    fn push(&mut self, clause: Vec<Lit>, origin: Origin) {
        self.clauses.push(clause);
        self.origins.push(origin);
    }

    fn lit(&self, id: &PackageId, positive: bool) -> Lit {
        Lit::new(self.index[id], positive)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.clauses {
            let parts: Vec<String> = c
                .iter()
                .map(|l| {
                    let id = self.package_of(l.var());
                    if l.is_positive() {
                        id.to_string()
                    } else {
                        format!("¬{id}")
                    }
                })
                .collect();
            writeln!(f, "({})", parts.join(" ∨ "))?;
        }
        Ok(())
    }
}

/// Packages whose presence satisfies a request atom (install and upgrade)
/// or must be absent (remove).
pub fn request_candidates<'u>(
    u: &'u Universe,
    s0: &Status,
    ra: &RequestAtom,
) -> Vec<&'u PackageId> {
    let atom = &ra.atom;
    let by_name = || {
        u.versions_of(&atom.name)
            .iter()
            .filter(|id| admits(atom.constraint.as_ref(), &id.version))
    };
    let install = || {
        let mut out: Vec<&PackageId> = by_name().collect();
        if atom.constraint.is_none() {
            if let Some(provs) = u.provider_index().get(&atom.name) {
                out.extend(provs.iter());
            }
        }
        out.sort();
        out.dedup();
        out
    };
    match ra.action {
        Action::Install => install(),
        Action::Remove => by_name().collect(),
        Action::Upgrade => match s0.installed_version(&atom.name) {
            None => install(),
            Some(base) => by_name().filter(|id| id.version >= base.version).collect(),
        },
    }
}

/// Encodes conditions (a)–(c) of the upgrade problem as CNF.
pub fn encode(u: &Universe, s0: &Status, r: &Request) -> Formula {
    let mut f = base_formula(u, true);
    for ra in r.atoms() {
        let cands = request_candidates(u, s0, ra);
        match ra.action {
            Action::Remove => {
                for id in cands {
                    let l = f.lit(id, false);
                    f.push(vec![l], Origin::Request(ra.clone()));
                }
            }
            Action::Install | Action::Upgrade => {
                let clause: Vec<Lit> = cands.into_iter().map(|id| f.lit(id, true)).collect();
                f.push(clause, Origin::Request(ra.clone()));
            }
        }
    }
    f
}

/// Dependency clauses, plus conflict clauses when `with_conflicts`.
pub(crate) fn base_formula(u: &Universe, with_conflicts: bool) -> Formula {
    let vars: Vec<PackageId> = u.ids().cloned().collect();
    let index = vars
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), Var(i as u32)))
        .collect();
    let mut f = Formula {
        vars,
        index,
        clauses: Vec::new(),
        origins: Vec::new(),
    };
    for p in u.packages() {
        for (ci, clause) in p.rel.depends.iter().enumerate() {
            let mut lits = vec![f.lit(&p.id, false)];
            let mut sats: Vec<&PackageId> = clause.iter().flat_map(|a| u.satisfiers(a)).collect();
            sats.sort();
            sats.dedup();
            lits.extend(sats.into_iter().map(|q| f.lit(q, true)));
            f.push(
                lits,
                Origin::Depends {
                    package: p.id.clone(),
                    clause: ci,
                },
            );
        }
    }
    if with_conflicts {
        for (a, b) in u.conflict_pairs().keys() {
            let clause = vec![f.lit(a, false), f.lit(b, false)];
            f.push(clause, Origin::Conflict(a.clone(), b.clone()));
        }
    }
    f
}
