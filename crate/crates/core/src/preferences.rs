//! Lexicographic choice among the solutions of an upgrade problem.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::resolver::sat::{Lit, Solver};
use crate::resolver::{encode, explain_unsat, solution_from_model, Formula, Request, Solution, Unsat};
use crate::universe::{Package, PackageId, Status, Universe};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrefError {
    #[error("empty preference list")]
    Empty,
    #[error("criterion {0:?}: only minimisation (`-name`) is supported")]
    NotMinimised(String),
    #[error("unknown criterion {0:?}")]
    Unknown(String),
    #[error("criterion {0} listed twice")]
    Duplicate(String),
    #[error("bad blacklist pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
}

/// What a blacklist pattern is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternField {
    Name,
    Maintainer,
}

#[derive(Debug, Clone)]
pub struct Blacklist {
    pub field: PatternField,
    raw: String,
    glob: glob::Pattern,
}

impl Blacklist {
    /// `maint:<glob>`, `name:<glob>` or a bare glob over the package name.
    pub fn parse(s: &str) -> Result<Self, PrefError> {
        let (field, raw) = if let Some(rest) = s.strip_prefix("maint:") {
            (PatternField::Maintainer, rest)
        } else if let Some(rest) = s.strip_prefix("name:") {
            (PatternField::Name, rest)
        } else {
            (PatternField::Name, s)
        };
        let bad = |message: String| PrefError::Pattern {
            pattern: s.to_string(),
            message,
        };
        if raw.is_empty() {
            return Err(bad("empty glob".into()));
        }
        let glob = glob::Pattern::new(raw).map_err(|e| bad(e.to_string()))?;
        Ok(Blacklist {
            field,
            raw: raw.to_string(),
            glob,
        })
    }

    pub fn matches(&self, p: &Package) -> bool {
        match self.field {
            PatternField::Name => self.glob.matches(p.id.name.as_str()),
            PatternField::Maintainer => self.glob.matches(&p.maintainer),
        }
    }
}

impl PartialEq for Blacklist {
    fn eq(&self, other: &Self) -> bool {
        self.field == other.field && self.raw == other.raw
    }
}

impl Eq for Blacklist {}

impl fmt::Display for Blacklist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.field {
            PatternField::Name => write!(f, "name:{}", self.raw),
            PatternField::Maintainer => write!(f, "maint:{}", self.raw),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Criterion {
    /// Names installed before with no version after.
    Removed,
    /// Names kept at a different version.
    Changed,
    /// Names not installed before.
    New,
    /// kB to fetch for packages not installed before.
    Download,
    /// Names not at their newest available version.
    NotUpToDate,
    /// Installed packages matching the pattern.
    Blacklist(Blacklist),
}

impl Criterion {
    fn kind(&self) -> &'static str {
        match self {
            Criterion::Removed => "removed",
            Criterion::Changed => "changed",
            Criterion::New => "new",
            Criterion::Download => "download",
            Criterion::NotUpToDate => "notuptodate",
            Criterion::Blacklist(_) => "blacklist",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Criterion::Blacklist(b) => write!(f, "-blacklist:{b}"),
            c => write!(f, "-{}", c.kind()),
        }
    }
}

/// Criteria in priority order, each minimised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceSpec {
    criteria: Vec<Criterion>,
}

impl PreferenceSpec {
    pub const DEFAULT: &'static str = "-removed,-changed,-new,-download";

    pub fn new(criteria: Vec<Criterion>) -> Result<Self, PrefError> {
        if criteria.is_empty() {
            return Err(PrefError::Empty);
        }
        let mut seen = BTreeSet::new();
        for c in &criteria {
            if !seen.insert(c.kind()) {
                return Err(PrefError::Duplicate(c.kind().to_string()));
            }
        }
        Ok(PreferenceSpec { criteria })
    }

    pub fn criteria(&self) -> &[Criterion] {
        &self.criteria
    }
}

impl Default for PreferenceSpec {
    fn default() -> Self {
        parse_prefs(Self::DEFAULT).expect("default preferences parse")
    }
}

impl fmt::Display for PreferenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.criteria.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `-removed,-changed,-new,-download,-notuptodate,-blacklist:<glob>`.
pub fn parse_prefs(text: &str) -> Result<PreferenceSpec, PrefError> {
    if text.trim().is_empty() {
        return Err(PrefError::Empty);
    }
    let mut criteria = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        let body = item
            .strip_prefix('-')
            .ok_or_else(|| PrefError::NotMinimised(item.to_string()))?;
        let c = match body {
            "removed" => Criterion::Removed,
            "changed" => Criterion::Changed,
            "new" => Criterion::New,
            "download" => Criterion::Download,
            "notuptodate" => Criterion::NotUpToDate,
            _ => match body.strip_prefix("blacklist:") {
                Some(pat) => Criterion::Blacklist(Blacklist::parse(pat)?),
                None => return Err(PrefError::Unknown(item.to_string())),
            },
        };
        criteria.push(c);
    }
    PreferenceSpec::new(criteria)
}

/// One value per criterion, compared left to right.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreVector(pub Vec<u64>);

impl fmt::Display for ScoreVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Scores `s` against `s0`.
pub fn eval_criteria(u: &Universe, s0: &Status, s: &Status, spec: &PreferenceSpec) -> ScoreVector {
    let before = s0.names();
    let after = s.names();
    let scores = spec
        .criteria()
        .iter()
        .map(|c| match c {
            Criterion::Removed => before.difference(&after).count() as u64,
            Criterion::Changed => before
                .intersection(&after)
                .filter(|n| s0.installed_version(n) != s.installed_version(n))
                .count() as u64,
            Criterion::New => after.difference(&before).count() as u64,
            Criterion::Download => s
                .installed()
                .difference(s0.installed())
                .map(|id| u.get(id).map_or(0, |p| p.size_kb))
                .sum(),
            Criterion::NotUpToDate => s
                .installed()
                .iter()
                .filter(|id| u.latest(&id.name) != Some(*id))
                .count() as u64,
            Criterion::Blacklist(b) => s
                .installed()
                .iter()
                .filter(|id| u.get(id).is_some_and(|p| b.matches(p)))
                .count() as u64,
        })
        .collect();
    ScoreVector(scores)
}

/// Weighted literals whose true sum is the criterion's cost. `removed`
/// needs one fresh indicator per previously installed name.
fn objective(u: &Universe, s0: &Status, f: &Formula, solver: &mut Solver, c: &Criterion) -> Vec<(Lit, u64)> {
    let lit = |id: &PackageId| f.var_of(id).expect("universe id").pos();
    let mut terms = Vec::new();
    match c {
        Criterion::Removed => {
            for name in s0.names() {
                let gone = solver.new_var();
                let mut clause = vec![gone.pos()];
                clause.extend(u.versions_of(name).iter().map(lit));
                solver.add_clause(&clause);
                terms.push((gone.pos(), 1));
            }
        }
        Criterion::Changed => {
            for old in s0.installed() {
                for id in u.versions_of(&old.name) {
                    if id != old {
                        terms.push((lit(id), 1));
                    }
                }
            }
        }
        Criterion::New => {
            let before = s0.names();
            for id in u.ids().filter(|id| !before.contains(&id.name)) {
                terms.push((lit(id), 1));
            }
        }
        Criterion::Download => {
            for p in u.packages().filter(|p| !s0.contains(&p.id)) {
                terms.push((lit(&p.id), p.size_kb));
            }
        }
        Criterion::NotUpToDate => {
            for id in u.ids().filter(|id| u.latest(&id.name) != Some(*id)) {
                terms.push((lit(id), 1));
            }
        }
        Criterion::Blacklist(b) => {
            for p in u.packages().filter(|p| b.matches(p)) {
                terms.push((lit(&p.id), 1));
            }
        }
    }
    terms
}

fn cost(terms: &[(Lit, u64)], model: &[bool]) -> u64 {
    terms.iter().filter(|(l, _)| l.eval(model)).map(|(_, w)| w).sum()
}

/// Returns a solution with the lexicographically least [`ScoreVector`];
/// among those, the one whose sorted id list is least.
///
/// Each criterion in turn is pinned to its optimum by binary search over a
/// pseudo-boolean bound, so the search stays complete.
pub fn optimize(u: &Universe, s0: &Status, r: &Request, spec: &PreferenceSpec) -> Result<Solution, Unsat> {
    let f = encode(u, s0, r);
    let mut solver = f.solver();
    let objectives: Vec<Vec<(Lit, u64)>> = spec
        .criteria()
        .iter()
        .map(|c| objective(u, s0, &f, &mut solver, c))
        .collect();
    let Some(mut model) = solver.solve(&[]) else {
        return Err(explain_unsat(u, s0, r));
    };
    for terms in objectives {
        let total: u64 = terms.iter().map(|t| t.1).sum();
        let (mut lo, mut hi) = (0, cost(&terms, &model));
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            // act → sum ≤ mid; inert otherwise
            let act = solver.new_var();
            let mut guarded = terms.clone();
            guarded.push((act.pos(), total));
            solver.add_at_most(&guarded, mid + total);
            match solver.solve(&[act.pos()]) {
                Some(m) => {
                    hi = cost(&terms, &m);
                    model = m;
                }
                None => lo = mid + 1,
            }
            solver.add_clause(&[act.neg()]);
        }
        let ok = solver.add_at_most(&terms, hi);
        debug_assert!(ok, "optimum bound is satisfiable");
    }
    let model = least_model(&f, &mut solver).unwrap_or(model);
    Ok(solution_from_model(u, s0, r, &f, &model))
}

/// Among the current models, the one whose set of true package variables
/// (in id order) is least as a sorted list.
fn least_model(f: &Formula, solver: &mut Solver) -> Option<Vec<bool>> {
    let n = f.vars().len();
    let vars: Vec<_> = (0..n).map(|i| crate::resolver::sat::Var(i as u32)).collect();
    let mut fixed: Vec<Lit> = Vec::new();
    let mut next = 0;
    loop {
        let mut rest = fixed.clone();
        rest.extend(vars[next..].iter().map(|v| v.neg()));
        if let Some(m) = solver.solve(&rest) {
            return Some(m);
        }
        // The next member is the first variable that can still be true.
        loop {
            if next == n {
                return None;
            }
            let v = vars[next];
            next += 1;
            fixed.push(v.pos());
            if solver.solve(&fixed).is_some() {
                break;
            }
            fixed.pop();
            fixed.push(v.neg());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolver::{check_solution, parse_request};
    use crate::universe::parse_universe;
    use proptest::prelude::*;

    const ATERM: &str = "Package: aterm\nVersion: 1.0.1-4\nSize: 340\nDepends: libafterimage0\n\n\
                         Package: libafterimage0\nVersion: 2.2.8-2\nSize: 46\n";

    #[test]
    fn parse_and_display() {
        let spec = parse_prefs("-removed, -notuptodate,-blacklist:maint:evil*").unwrap();
        assert_eq!(spec.criteria().len(), 3);
        assert_eq!(spec.to_string(), "-removed,-notuptodate,-blacklist:maint:evil*");
        assert_eq!(parse_prefs(&spec.to_string()).unwrap(), spec);
        assert_eq!(parse_prefs("-blacklist:x*").unwrap().to_string(), "-blacklist:name:x*");
        assert!(matches!(parse_prefs(""), Err(PrefError::Empty)));
        assert!(matches!(parse_prefs("-new,-new"), Err(PrefError::Duplicate(_))));
        assert!(matches!(
            parse_prefs("-blacklist:a,-blacklist:b"),
            Err(PrefError::Duplicate(_))
        ));
        assert!(matches!(parse_prefs("+new"), Err(PrefError::NotMinimised(_))));
        assert!(matches!(parse_prefs("-fast"), Err(PrefError::Unknown(_))));
        assert!(matches!(parse_prefs("-blacklist:[x"), Err(PrefError::Pattern { .. })));
    }

    #[test]
    fn aterm_scores() {
        let u = parse_universe(ATERM).unwrap();
        let s = Status::build(&u, u.ids().cloned()).unwrap();
        let spec = parse_prefs("-new,-download").unwrap();
        assert_eq!(eval_criteria(&u, &Status::empty(), &s, &spec), ScoreVector(vec![2, 386]));
        let spec = PreferenceSpec::default();
        assert_eq!(eval_criteria(&u, &s, &s, &spec), ScoreVector(vec![0, 0, 0, 0]));
    }

    #[test]
    fn prefers_newest() {
        let u = parse_universe(
            "Package: a\nVersion: 1\nDepends: b\n\nPackage: b\nVersion: 1.0\n\nPackage: b\nVersion: 2.0\n",
        )
        .unwrap();
        let r = parse_request("install a").unwrap();
        let spec = parse_prefs("-notuptodate,-new").unwrap();
        let sol = optimize(&u, &Status::empty(), &r, &spec).unwrap();
        let got: Vec<String> = sol.status.installed().iter().map(|i| i.to_string()).collect();
        assert_eq!(got, ["a 1", "b 2.0"]);
    }

    #[test]
    fn blacklist_avoids_maintainer() {
        let u = parse_universe(
            "Package: app\nVersion: 1\nDepends: mta\n\n\
             Package: aaa-mail\nVersion: 1\nProvides: mta\nMaintainer: evil corp\n\n\
             Package: zmail\nVersion: 1\nProvides: mta\nMaintainer: good people\n",
        )
        .unwrap();
        let r = parse_request("install app").unwrap();
        let plain = optimize(&u, &Status::empty(), &r, &parse_prefs("-new").unwrap()).unwrap();
        assert!(plain.status.contains(&PackageId::parse("aaa-mail 1").unwrap()));
        let spec = parse_prefs("-blacklist:maint:evil*,-new").unwrap();
        let sol = optimize(&u, &Status::empty(), &r, &spec).unwrap();
        assert!(sol.status.contains(&PackageId::parse("zmail 1").unwrap()));
        assert!(!sol.status.contains(&PackageId::parse("aaa-mail 1").unwrap()));
    }

    #[test]
    fn singleton_solution_matches_solve() {
        let u = parse_universe(ATERM).unwrap();
        let r = parse_request("install aterm").unwrap();
        let a = optimize(&u, &Status::empty(), &r, &PreferenceSpec::default()).unwrap();
        let b = crate::resolver::solve(&u, &Status::empty(), &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn removal_minimised() {
        let u = parse_universe(
            "Package: a\nVersion: 1\n\nPackage: b\nVersion: 1\nConflicts: a\n\n\
             Package: c\nVersion: 1\n\nPackage: c\nVersion: 2\nConflicts: a\n",
        )
        .unwrap();
        let s0 = Status::build(&u, [PackageId::parse("a 1").unwrap(), PackageId::parse("c 1").unwrap()]).unwrap();
        let r = parse_request("upgrade c").unwrap();
        let spec = parse_prefs("-removed,-changed").unwrap();
        let sol = optimize(&u, &s0, &r, &spec).unwrap();
        assert_eq!(sol.status, s0);
        let r = parse_request("upgrade c (>= 2)").unwrap();
        let sol = optimize(&u, &s0, &r, &spec).unwrap();
        assert_eq!(eval_criteria(&u, &s0, &sol.status, &spec), ScoreVector(vec![1, 1]));
    }

    // Random instances over a handful of names, checked by enumeration.

    const NAMES: [&str; 4] = ["a", "b", "c", "d"];

    fn universe_text() -> impl Strategy<Value = String> {
        let pkg = (
            0..4usize,
            1..4u32,
            prop::collection::vec(prop::collection::vec((0..5usize, 0..3u32), 1..3), 0..2),
            prop::option::weighted(0.3, 0..4usize),
            0..50u64,
            any::<bool>(),
            any::<bool>(),
        );
        prop::collection::vec(pkg, 1..=10).prop_map(|ps| {
            let mut out = String::new();
            let mut seen = BTreeSet::new();
            for (n, v, deps, conf, size, evil, provides) in ps {
                if !seen.insert((n, v)) {
                    continue;
                }
                out += &format!("Package: {}\nVersion: {v}\nSize: {size}\n", NAMES[n]);
                out += if evil { "Maintainer: evil\n" } else { "Maintainer: ok\n" };
                if provides {
                    out += "Provides: feat\n";
                }
                let clauses: Vec<String> = deps
                    .iter()
                    .map(|c| {
                        let alts: Vec<String> = c
                            .iter()
                            .map(|&(t, bound)| {
                                let t = if t == 4 { "feat" } else { NAMES[t] };
                                if bound == 0 || t == "feat" {
                                    t.to_string()
                                } else {
                                    format!("{t} (>= {bound})")
                                }
                            })
                            .collect();
                        alts.join(" | ")
                    })
                    .collect();
                if !clauses.is_empty() {
                    out += &format!("Depends: {}\n", clauses.join(", "));
                }
                if let Some(c) = conf {
                    out += &format!("Conflicts: {}\n", NAMES[c]);
                }
                out.push('\n');
            }
            out
        })
    }

    fn spec_strategy() -> impl Strategy<Value = PreferenceSpec> {
        let all = vec![
            "-removed",
            "-changed",
            "-new",
            "-download",
            "-notuptodate",
            "-blacklist:maint:evil",
        ];
        Just(all)
            .prop_shuffle()
            .prop_flat_map(|v| (Just(v), 1..=6usize))
            .prop_map(|(v, k)| parse_prefs(&v[..k].join(",")).unwrap())
    }

    fn subsets(u: &Universe) -> Vec<Status> {
        let ids: Vec<PackageId> = u.ids().cloned().collect();
        (0u32..1 << ids.len())
            .filter_map(|mask| {
                let chosen = (0..ids.len()).filter(|i| mask & (1 << i) != 0).map(|i| ids[i].clone());
                Status::build(u, chosen).ok()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn optimum_matches_enumeration(
            text in universe_text(),
            s0_mask in any::<u16>(),
            req in (0..3usize, 0..4usize),
            spec in spec_strategy(),
        ) {
            let u = parse_universe(&text).unwrap();
            let all = subsets(&u);
            let s0 = all
                .iter()
                .filter(|s| s.installed().iter().all(|id| {
                    let i = u.ids().position(|x| x == id).unwrap();
                    s0_mask & (1 << i) != 0
                }))
                .max_by_key(|s| s.len())
                .cloned()
                .unwrap_or_default();
            let action = ["install", "remove", "upgrade"][req.0];
            let r = parse_request(&format!("{action} {}", NAMES[req.1])).unwrap();
            let best = all
                .iter()
                .filter(|s| check_solution(&u, &s0, s, &r).ok())
                .map(|s| {
                    let list: Vec<PackageId> = s.installed().iter().cloned().collect();
                    (eval_criteria(&u, &s0, s, &spec), list)
                })
                .min();
            match (optimize(&u, &s0, &r, &spec), best) {
                (Ok(sol), Some((vector, list))) => {
                    prop_assert_eq!(eval_criteria(&u, &s0, &sol.status, &spec), vector);
                    let got: Vec<PackageId> = sol.status.installed().iter().cloned().collect();
                    prop_assert_eq!(got, list);
                }
                (Err(_), None) => {}
                (got, want) => prop_assert!(false, "optimize {:?} vs oracle {:?}", got.is_ok(), want),
            }
        }

        #[test]
        fn tightening_shrinks_solution_set(
            text in universe_text(),
            req in (0..3usize, 0..4usize),
            spec in spec_strategy(),
        ) {
            let u = parse_universe(&text).unwrap();
            let action = ["install", "remove", "upgrade"][req.0];
            let r = parse_request(&format!("{action} {}", NAMES[req.1])).unwrap();
            let s0 = Status::empty();
            let mut remaining: Vec<Status> = subsets(&u)
                .into_iter()
                .filter(|s| check_solution(&u, &s0, s, &r).ok())
                .collect();
            for k in 1..=spec.criteria().len() {
                let prefix = PreferenceSpec::new(spec.criteria()[..k].to_vec()).unwrap();
                let scores: Vec<ScoreVector> =
                    remaining.iter().map(|s| eval_criteria(&u, &s0, s, &prefix)).collect();
                let Some(min) = scores.iter().min().cloned() else { break };
                let next: Vec<Status> = remaining
                    .iter()
                    .zip(&scores)
                    .filter(|(_, v)| **v == min)
                    .map(|(s, _)| s.clone())
                    .collect();
                prop_assert!(next.iter().all(|s| remaining.contains(s)));
                prop_assert!(!next.is_empty());
                if let Ok(sol) = optimize(&u, &s0, &r, &prefix) {
                    prop_assert!(next.contains(&sol.status));
                }
                remaining = next;
            }
        }
    }
}
