//! A small CDCL solver: two watched literals, first-UIP clause learning,
//! non-chronological backjumping, and native `sum(w * lit) <= bound`
//! constraints for the optimizer.
//!
//! Decisions always pick the lowest-numbered unassigned variable and try
//! its preferred phase (`false` unless set) first, so identical inputs give
//! identical models. There are no restarts and learned clauses are never
//! deleted, which keeps the search complete.

use std::ops::Not;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn pos(self) -> Lit {
        Lit(self.0 << 1)
    }

    pub fn neg(self) -> Lit {
        Lit(self.0 << 1 | 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Lit(u32);

impl Lit {
    pub fn new(var: Var, positive: bool) -> Lit {
        if positive {
            var.pos()
        } else {
            var.neg()
        }
    }

    pub fn var(self) -> Var {
        Var(self.0 >> 1)
    }

    pub fn is_positive(self) -> bool {
        self.0 & 1 == 0
    }

    fn code(self) -> usize {
        self.0 as usize
    }

    /// Truth of this literal under a full model.
    pub fn eval(self, model: &[bool]) -> bool {
        model[self.var().index()] == self.is_positive()
    }
}

impl Not for Lit {
    type Output = Lit;

    fn not(self) -> Lit {
        Lit(self.0 ^ 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reason {
    None,
    Clause(u32),
    Pb(u32),
}

#[derive(Debug, Clone)]
struct Pb {
    terms: Vec<(Lit, u64)>,
    bound: u64,
    true_sum: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Solver {
    clauses: Vec<Vec<Lit>>,
    watches: Vec<Vec<u32>>,
    pbs: Vec<Pb>,
    pb_occurs: Vec<Vec<(u32, u64)>>,
    value: Vec<Option<bool>>,
    level: Vec<u32>,
    reason: Vec<Reason>,
    trail_pos: Vec<u32>,
    trail: Vec<Lit>,
    trail_lim: Vec<usize>,
    qhead: usize,
    seen: Vec<bool>,
    phase: Vec<bool>,
    decide_from: usize,
    unsat: bool,
    conflicts: u64,
}

impl Solver {
    pub fn new() -> Self {
        Solver::default()
    }

    pub fn with_vars(n: usize) -> Self {
        let mut s = Solver::new();
        for _ in 0..n {
            s.new_var();
        }
        s
    }

    pub fn new_var(&mut self) -> Var {
        let v = Var(self.value.len() as u32);
        self.value.push(None);
        self.level.push(0);
        self.reason.push(Reason::None);
        self.trail_pos.push(0);
        self.seen.push(false);
        self.phase.push(false);
        self.watches.push(Vec::new());
        self.watches.push(Vec::new());
        self.pb_occurs.push(Vec::new());
        self.pb_occurs.push(Vec::new());
        v
    }

    /// Value tried first when branching on `v` (default `false`).
    pub fn set_phase(&mut self, v: Var, value: bool) {
        self.phase[v.index()] = value;
    }

    pub fn num_vars(&self) -> usize {
        self.value.len()
    }

    /// Number of conflicts seen so far, across all calls.
    pub fn conflicts(&self) -> u64 {
        self.conflicts
    }

    /// False once the constraint set is known to be unsatisfiable.
    pub fn is_consistent(&self) -> bool {
        !self.unsat
    }

    fn lit_value(&self, l: Lit) -> Option<bool> {
        self.value[l.var().index()].map(|v| v == l.is_positive())
    }

    fn decision_level(&self) -> u32 {
        self.trail_lim.len() as u32
    }

    fn assign(&mut self, l: Lit, reason: Reason) {
        let v = l.var().index();
        debug_assert!(self.value[v].is_none());
        self.value[v] = Some(l.is_positive());
        self.level[v] = self.decision_level();
        self.reason[v] = reason;
        self.trail_pos[v] = self.trail.len() as u32;
        self.trail.push(l);
        for &(pb, w) in &self.pb_occurs[l.code()] {
            self.pbs[pb as usize].true_sum += w;
        }
    }

    fn backtrack(&mut self, to_level: u32) {
        if self.decision_level() <= to_level {
            return;
        }
        let keep = self.trail_lim[to_level as usize];
        for i in (keep..self.trail.len()).rev() {
            let l = self.trail[i];
            let v = l.var().index();
            self.value[v] = None;
            self.reason[v] = Reason::None;
            for &(pb, w) in &self.pb_occurs[l.code()] {
                self.pbs[pb as usize].true_sum -= w;
            }
            self.decide_from = self.decide_from.min(v);
        }
        self.trail.truncate(keep);
        self.trail_lim.truncate(to_level as usize);
        self.qhead = self.qhead.min(keep);
    }

    /// Adds a clause. Returns false if the solver became unsatisfiable.
    pub fn add_clause(&mut self, lits: &[Lit]) -> bool {
        if self.unsat {
            return false;
        }
        self.backtrack(0);
        let mut c: Vec<Lit> = lits.to_vec();
        c.sort();
        c.dedup();
        if c.windows(2).any(|w| w[0] == !w[1]) {
            return true;
        }
        if c.iter().any(|&l| self.lit_value(l) == Some(true)) {
            return true;
        }
        c.retain(|&l| self.lit_value(l).is_none());
        match c.len() {
            0 => {
                self.unsat = true;
                false
            }
            1 => {
                self.assign(c[0], Reason::None);
                if self.propagate().is_some() {
                    self.unsat = true;
                }
                !self.unsat
            }
            _ => {
                self.attach(c);
                true
            }
        }
    }

    fn attach(&mut self, c: Vec<Lit>) -> u32 {
        let ci = self.clauses.len() as u32;
        self.watches[c[0].code()].push(ci);
        self.watches[c[1].code()].push(ci);
        self.clauses.push(c);
        ci
    }

    /// Adds `sum(weight * lit) <= bound`. Literals must be over distinct
    /// variables.
    pub fn add_at_most(&mut self, terms: &[(Lit, u64)], bound: u64) -> bool {
        if self.unsat {
            return false;
        }
        self.backtrack(0);
        let mut terms: Vec<(Lit, u64)> = terms.iter().copied().filter(|&(_, w)| w > 0).collect();
        terms.sort();
        let mut merged: Vec<(Lit, u64)> = Vec::with_capacity(terms.len());
        for (l, w) in terms {
            match merged.last_mut() {
                Some((pl, pw)) if *pl == l => *pw += w,
                _ => merged.push((l, w)),
            }
        }
        debug_assert!(
            merged.windows(2).all(|w| w[0].0.var() != w[1].0.var()),
            "complementary literals in cardinality constraint"
        );
        let pb = self.pbs.len() as u32;
        let mut true_sum = 0;
        for &(l, w) in &merged {
            self.pb_occurs[l.code()].push((pb, w));
            if self.lit_value(l) == Some(true) {
                true_sum += w;
            }
        }
        self.pbs.push(Pb {
            terms: merged,
            bound,
            true_sum,
        });
        if true_sum > bound {
            self.unsat = true;
            return false;
        }
        let forced = self.pb_forced(pb);
        for l in forced {
            self.assign(!l, Reason::Pb(pb));
        }
        if self.propagate().is_some() {
            self.unsat = true;
        }
        !self.unsat
    }

    /// Unassigned literals of `pb` that no longer fit under its bound.
    fn pb_forced(&self, pb: u32) -> Vec<Lit> {
        let c = &self.pbs[pb as usize];
        let slack = c.bound - c.true_sum;
        c.terms
            .iter()
            .filter(|&&(l, w)| w > slack && self.lit_value(l).is_none())
            .map(|&(l, _)| l)
            .collect()
    }

    fn propagate(&mut self) -> Option<Reason> {
        while self.qhead < self.trail.len() {
            let p = self.trail[self.qhead];
            self.qhead += 1;
            let false_lit = !p;

            let mut ws = std::mem::take(&mut self.watches[false_lit.code()]);
            let mut i = 0;
            let mut j = 0;
            let mut conflict = None;
            while i < ws.len() {
                let ci = ws[i];
                i += 1;
                let clause = &mut self.clauses[ci as usize];
                if clause[0] == false_lit {
                    clause.swap(0, 1);
                }
                let first = clause[0];
                let first_val = self.value[first.var().index()].map(|v| v == first.is_positive());
                if first_val == Some(true) {
                    ws[j] = ci;
                    j += 1;
                    continue;
                }
                let mut moved = false;
                for k in 2..clause.len() {
                    let l = clause[k];
                    let lv = self.value[l.var().index()].map(|v| v == l.is_positive());
                    if lv != Some(false) {
                        clause.swap(1, k);
                        self.watches[clause[1].code()].push(ci);
                        moved = true;
                        break;
                    }
                }
                if moved {
                    continue;
                }
                ws[j] = ci;
                j += 1;
                if first_val == Some(false) {
                    conflict = Some(Reason::Clause(ci));
                    while i < ws.len() {
                        ws[j] = ws[i];
                        i += 1;
                        j += 1;
                    }
                } else {
                    self.assign(first, Reason::Clause(ci));
                }
            }
            ws.truncate(j);
            self.watches[false_lit.code()] = ws;
            if conflict.is_some() {
                return conflict;
            }

            for k in 0..self.pb_occurs[p.code()].len() {
                let pb = self.pb_occurs[p.code()][k].0;
                let c = &self.pbs[pb as usize];
                if c.true_sum > c.bound {
                    return Some(Reason::Pb(pb));
                }
                for l in self.pb_forced(pb) {
                    self.assign(!l, Reason::Pb(pb));
                }
            }
        }
        None
    }

    /// Literals of the implication (or conflict) clause, excluding the
    /// implied literal; all of them are false under the current assignment.
    fn explain(&self, reason: Reason, implied: Option<Lit>) -> Vec<Lit> {
        match reason {
            Reason::None => Vec::new(),
            Reason::Clause(ci) => self.clauses[ci as usize]
                .iter()
                .copied()
                .filter(|&l| Some(l) != implied)
                .collect(),
            Reason::Pb(pb) => {
                let limit = implied.map_or(u32::MAX, |l| self.trail_pos[l.var().index()]);
                self.pbs[pb as usize]
                    .terms
                    .iter()
                    .filter(|&&(l, _)| {
                        self.lit_value(l) == Some(true) && self.trail_pos[l.var().index()] < limit
                    })
                    .map(|&(l, _)| !l)
                    .collect()
            }
        }
    }

    fn analyze(&mut self, conflict: Reason) -> (Vec<Lit>, u32) {
        let current = self.decision_level();
        let mut learnt = vec![Lit(0)];
        let mut pending = 0usize;
        let mut idx = self.trail.len();
        let mut lits = self.explain(conflict, None);
        loop {
            for &q in &lits {
                let v = q.var().index();
                if !self.seen[v] && self.level[v] > 0 {
                    self.seen[v] = true;
                    if self.level[v] >= current {
                        pending += 1;
                    } else {
                        learnt.push(q);
                    }
                }
            }
            let p = loop {
                idx -= 1;
                let l = self.trail[idx];
                if self.seen[l.var().index()] {
                    break l;
                }
            };
            self.seen[p.var().index()] = false;
            pending -= 1;
            if pending == 0 {
                learnt[0] = !p;
                break;
            }
            lits = self.explain(self.reason[p.var().index()], Some(p));
        }
        for l in &learnt[1..] {
            self.seen[l.var().index()] = false;
        }
        let mut backjump = 0;
        if learnt.len() > 1 {
            let mut best = 1;
            for k in 2..learnt.len() {
                if self.level[learnt[k].var().index()] > self.level[learnt[best].var().index()] {
                    best = k;
                }
            }
            learnt.swap(1, best);
            backjump = self.level[learnt[1].var().index()];
        }
        (learnt, backjump)
    }

    fn pick_branch(&mut self) -> Option<Var> {
        while self.decide_from < self.value.len() {
            if self.value[self.decide_from].is_none() {
                return Some(Var(self.decide_from as u32));
            }
            self.decide_from += 1;
        }
        None
    }

    /// Searches for a model extending `assumptions`. Returns `None` when the
    /// constraints (together with the assumptions) are unsatisfiable.
    pub fn solve(&mut self, assumptions: &[Lit]) -> Option<Vec<bool>> {
        if self.unsat {
            return None;
        }
        self.backtrack(0);
        if self.propagate().is_some() {
            self.unsat = true;
            return None;
        }
        loop {
            if let Some(conflict) = self.propagate() {
                self.conflicts += 1;
                if self.decision_level() == 0 {
                    self.unsat = true;
                    return None;
                }
                let (learnt, backjump) = self.analyze(conflict);
                self.backtrack(backjump);
                if learnt.len() == 1 {
                    self.assign(learnt[0], Reason::None);
                } else {
                    let asserting = learnt[0];
                    let ci = self.attach(learnt);
                    self.assign(asserting, Reason::Clause(ci));
                }
                continue;
            }
            let dl = self.decision_level() as usize;
            if dl < assumptions.len() {
                let a = assumptions[dl];
                match self.lit_value(a) {
                    Some(true) => self.trail_lim.push(self.trail.len()),
                    Some(false) => {
                        self.backtrack(0);
                        return None;
                    }
                    None => {
                        self.trail_lim.push(self.trail.len());
                        self.assign(a, Reason::None);
                    }
                }
                continue;
            }
            match self.pick_branch() {
                None => {
                    let model = self.value.iter().map(|v| v.unwrap_or(false)).collect();
                    self.backtrack(0);
                    return Some(model);
                }
                Some(v) => {
                    self.trail_lim.push(self.trail.len());
                    self.assign(Lit::new(v, self.phase[v.index()]), Reason::None);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lit(x: i32) -> Lit {
        Lit::new(Var(x.unsigned_abs() - 1), x > 0)
    }

    fn brute_force(n: usize, clauses: &[Vec<i32>], pbs: &[(Vec<(i32, u64)>, u64)]) -> bool {
        (0u32..1 << n).any(|mask| {
            let model: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            clauses
                .iter()
                .all(|c| c.iter().any(|&x| lit(x).eval(&model)))
                && pbs.iter().all(|(terms, bound)| {
                    terms
                        .iter()
                        .filter(|(x, _)| lit(*x).eval(&model))
                        .map(|(_, w)| w)
                        .sum::<u64>()
                        <= *bound
                })
        })
    }

    fn check_model(model: &[bool], clauses: &[Vec<i32>], pbs: &[(Vec<(i32, u64)>, u64)]) -> bool {
        clauses
            .iter()
            .all(|c| c.iter().any(|&x| lit(x).eval(model)))
            && pbs.iter().all(|(terms, bound)| {
                terms
                    .iter()
                    .filter(|(x, _)| lit(*x).eval(model))
                    .map(|(_, w)| w)
                    .sum::<u64>()
                    <= *bound
            })
    }

    #[test]
    fn pigeonhole_two_units() {
        let mut s = Solver::with_vars(2);
        s.add_clause(&[lit(1)]);
        s.add_clause(&[lit(2)]);
        s.add_clause(&[lit(-1), lit(-2)]);
        assert!(s.solve(&[]).is_none());
    }

    #[test]
    fn assumptions_do_not_poison() {
        let mut s = Solver::with_vars(3);
        s.add_clause(&[lit(1), lit(2)]);
        s.add_clause(&[lit(-1), lit(3)]);
        assert!(s.solve(&[lit(-2), lit(-3)]).is_none());
        let m = s.solve(&[lit(-2)]).unwrap();
        assert!(m[0] && m[2]);
        assert!(s.solve(&[]).is_some());
    }

    #[test]
    fn cardinality_bound() {
        let mut s = Solver::with_vars(4);
        s.add_clause(&[lit(1), lit(2)]);
        s.add_clause(&[lit(3), lit(4)]);
        let terms: Vec<(Lit, u64)> = (1..=4).map(|x| (lit(x), 1)).collect();
        assert!(s.add_at_most(&terms, 2));
        let m = s.solve(&[]).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 2);
        assert!(!s.add_at_most(&terms, 1) || s.solve(&[]).is_none());
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<Vec<i32>>, Vec<(Vec<(i32, u64)>, u64)>)> {
        (1usize..9).prop_flat_map(|n| {
            let lit = (1..=n as i32, prop::bool::ANY).prop_map(|(v, s)| if s { v } else { -v });
            let clause = prop::collection::vec(lit, 1..4);
            let pb_terms = prop::collection::btree_map(1..=n as i32, 1u64..6, 1..=n)
                .prop_map(|m| m.into_iter().collect::<Vec<_>>());
            let pb = (pb_terms, 0u64..12);
            (
                Just(n),
                prop::collection::vec(clause, 0..(3 * n + 2)),
                prop::collection::vec(pb, 0..3),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(600))]
        #[test]
        fn agrees_with_enumeration((n, clauses, pbs) in instance()) {
            let mut s = Solver::with_vars(n);
            for c in &clauses {
                let lits: Vec<Lit> = c.iter().map(|&x| lit(x)).collect();
                s.add_clause(&lits);
            }
            for (terms, bound) in &pbs {
                let t: Vec<(Lit, u64)> = terms.iter().map(|&(x, w)| (lit(x), w)).collect();
                s.add_at_most(&t, *bound);
            }
            let expected = brute_force(n, &clauses, &pbs);
            match s.solve(&[]) {
                Some(m) => {
                    prop_assert!(expected);
                    prop_assert!(check_model(&m, &clauses, &pbs));
                }
                None => prop_assert!(!expected),
            }
        }
    }
}
