//! Upgrade problems ⟨U, S0, R⟩: encoding, complete solving, solution
//! checking and distribution health.

mod check;
mod encode;
mod request;
pub mod sat;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use check::{check_solution, Condition, Verdict, Violation};
pub(crate) use check::check_packages;
pub use encode::{encode, request_candidates, Formula, Origin};
pub(crate) use encode::base_formula;
pub use request::{parse_request, Action, Request, RequestAtom, RequestError};

use crate::universe::{Package, PackageId, Status, Universe};

/// Which static conditions were verified on a solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Certified {
    pub request: bool,
    pub dependencies: bool,
    pub conflicts: bool,
}

impl Certified {
    pub fn all(&self) -> bool {
        self.request && self.dependencies && self.conflicts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub status: Status,
    pub certified: Certified,
}

impl Solution {
    /// Re-checks `status` and records the outcome per condition.
    pub fn certify(u: &Universe, s0: &Status, r: &Request, status: Status) -> Solution {
        let verdict = check_solution(u, s0, &status, r);
        let failed: BTreeSet<Condition> = verdict.violations.iter().map(|v| v.condition()).collect();
        Solution {
            certified: Certified {
                request: !failed.contains(&Condition::Request),
                dependencies: !failed.contains(&Condition::Dependencies),
                conflicts: !failed.contains(&Condition::Conflicts),
            },
            status,
        }
    }
}

/// Extra information attached to an UNSAT answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnsatNote {
    /// No package in the universe can satisfy the atom.
    NoCandidate(RequestAtom),
    /// Candidates exist but none is installable on its own.
    Uninstallable {
        atom: RequestAtom,
        witnesses: Vec<(PackageId, Verdict)>,
    },
}

impl fmt::Display for UnsatNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnsatNote::NoCandidate(a) => write!(f, "`{a}`: no candidate in the universe"),
            UnsatNote::Uninstallable { atom, witnesses } => {
                write!(f, "`{atom}`: no candidate is installable")?;
                for (id, v) in witnesses {
                    for viol in &v.violations {
                        write!(f, "\n  {id}: {viol}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

/// The request cannot be met from this universe and status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unsat {
    pub request: Request,
    pub notes: Vec<UnsatNote>,
}

impl fmt::Display for Unsat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "UNSAT: request `{}` has no solution", self.request)?;
        for n in &self.notes {
            write!(f, "\n{n}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Unsat {}

/// Finds some status satisfying conditions (a)–(c), or proves none exists.
///
/// Decisions prefer each package's membership in `s0`, so the answer tends
/// to stay close to the current installation.
pub fn solve(u: &Universe, s0: &Status, r: &Request) -> Result<Solution, Unsat> {
    let f = encode(u, s0, r);
    let mut solver = f.solver();
    for (i, id) in f.vars().iter().enumerate() {
        solver.set_phase(sat::Var(i as u32), s0.contains(id));
    }
    match solver.solve(&[]) {
        Some(model) => Ok(solution_from_model(u, s0, r, &f, &model)),
        None => Err(explain_unsat(u, s0, r)),
    }
}

pub(crate) fn solution_from_model(
    u: &Universe,
    s0: &Status,
    r: &Request,
    f: &Formula,
    model: &[bool],
) -> Solution {
    let status = Status::build(u, f.decode(model))
        .expect("models exclude same-name pairs and shared files");
    let sol = Solution::certify(u, s0, r, status);
    debug_assert!(sol.certified.all(), "encoding disagrees with check_solution");
    sol
}

pub(crate) fn explain_unsat(u: &Universe, s0: &Status, r: &Request) -> Unsat {
    let mut notes = Vec::new();
    let mut checker = Installability::new(u);
    for ra in r.atoms() {
        if ra.action == Action::Remove {
            continue;
        }
        let cands = request_candidates(u, s0, ra);
        if cands.is_empty() {
            notes.push(UnsatNote::NoCandidate(ra.clone()));
            continue;
        }
        if cands.iter().all(|id| !checker.installable(id)) {
            let witnesses = cands.iter().map(|id| ((*id).clone(), checker.witness(id))).collect();
            notes.push(UnsatNote::Uninstallable {
                atom: ra.clone(),
                witnesses,
            });
        }
    }
    Unsat {
        request: r.clone(),
        notes,
    }
}

/// Reports, for every package, whether some status containing it satisfies
/// conditions (b) and (c). Installable packages get an empty verdict;
/// the others get a witness.
pub fn health_check(u: &Universe) -> Vec<(PackageId, Verdict)> {
    let mut checker = Installability::new(u);
    u.ids()
        .map(|id| {
            let verdict = if checker.installable(id) {
                Verdict::default()
            } else {
                checker.witness(id)
            };
            (id.clone(), verdict)
        })
        .collect()
}

/// Incremental installability queries against one universe.
struct Installability<'u> {
    u: &'u Universe,
    full: Formula,
    solver: sat::Solver,
    deps_only: Option<(Formula, sat::Solver)>,
    closed: Option<BTreeSet<&'u PackageId>>,
}

impl<'u> Installability<'u> {
    fn new(u: &'u Universe) -> Self {
        let full = base_formula(u, true);
        let solver = full.solver();
        Installability {
            u,
            full,
            solver,
            deps_only: None,
            closed: None,
        }
    }

    fn installable(&mut self, id: &PackageId) -> bool {
        match self.full.var_of(id) {
            Some(v) => self.solver.solve(&[v.pos()]).is_some(),
            None => false,
        }
    }

    /// Why `id` is not installable: an unmet clause if its dependencies can
    /// never be closed, otherwise the conflicts inside a smallest-first
    /// dependency-closed set.
    fn witness(&mut self, id: &PackageId) -> Verdict {
        let u = self.u;
        let closed = self.closed.get_or_insert_with(|| dependency_closed(u));
        let pkg = u.get(id).expect("id from the universe");
        if !closed.contains(id) {
            let clause = pkg
                .rel
                .depends
                .iter()
                .find(|c| {
                    !c.iter()
                        .any(|a| u.satisfiers(a).iter().any(|q| closed.contains(q)))
                })
                .expect("a package outside the closure has a dead clause");
            return Verdict {
                violations: vec![Violation::Dependency {
                    package: id.clone(),
                    clause: clause.clone(),
                }],
            };
        }
        let (f, solver) = self.deps_only.get_or_insert_with(|| {
            let f = base_formula(u, false);
            let s = f.solver();
            (f, s)
        });
        let v = f.var_of(id).expect("id from the universe");
        let model = solver
            .solve(&[v.pos()])
            .expect("dependency closure admits a model");
        let pkgs: Vec<&Package> = f
            .decode(&model)
            .iter()
            .map(|q| u.get(q).expect("id from the universe"))
            .collect();
        check_packages(&Status::empty(), &pkgs, &Request::empty())
    }
}

/// Greatest set of packages in which every member has each dependency
/// clause satisfied by another member. Exactly the packages installable
/// when conflicts are ignored.
fn dependency_closed(u: &Universe) -> BTreeSet<&PackageId> {
    let sats: BTreeMap<&PackageId, Vec<Vec<&PackageId>>> = u
        .packages()
        .map(|p| {
            let clauses = p
                .rel
                .depends
                .iter()
                .map(|c| c.iter().flat_map(|a| u.satisfiers(a)).collect())
                .collect();
            (&p.id, clauses)
        })
        .collect();
    let mut alive: BTreeSet<&PackageId> = u.ids().collect();
    loop {
        let dead: Vec<&PackageId> = alive
            .iter()
            .copied()
            .filter(|id| {
                sats[id]
                    .iter()
                    .any(|c| !c.iter().any(|q| alive.contains(q)))
            })
            .collect();
        if dead.is_empty() {
            return alive;
        }
        for d in dead {
            alive.remove(d);
        }
    }
}
