use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::tarjan_scc;
use petgraph::graphmap::DiGraphMap;

use crate::universe::{PackageId, Status, Universe};

/// Orders `nodes` so that every package comes after the packages it
/// depends on, where dependencies are resolved against `within`.
///
/// Cycles are broken by dropping, one at a time, the smallest
/// `(dependency, dependent)` edge inside a strongly connected component.
/// Remaining ties go to the smallest id.
pub fn dependency_order(u: &Universe, nodes: &BTreeSet<PackageId>, within: &Status) -> Vec<PackageId> {
    let ids: Vec<&PackageId> = nodes.iter().collect();
    let index: BTreeMap<&PackageId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    // Edge dep -> pkg: dep must be configured first.
    let mut g: DiGraphMap<usize, ()> = DiGraphMap::new();
    for i in 0..ids.len() {
        g.add_node(i);
    }
    for (i, id) in ids.iter().enumerate() {
        let Some(p) = u.get(id) else { continue };
        for clause in &p.rel.depends {
            for atom in clause {
                for dep in within.installed() {
                    if let Some(&j) = index.get(dep) {
                        if j != i && u.satisfies(atom, dep) {
                            g.add_edge(j, i, ());
                        }
                    }
                }
            }
        }
    }

    // Node indices follow id order, so comparing indices compares ids.
    loop {
        let cyclic_edge = tarjan_scc(&g)
            .into_iter()
            .filter(|c| c.len() > 1)
            .filter_map(|c| {
                let inside: BTreeSet<usize> = c.into_iter().collect();
                g.all_edges()
                    .filter(|(a, b, _)| inside.contains(a) && inside.contains(b))
                    .map(|(a, b, _)| (a, b))
                    .min()
            })
            .min();
        match cyclic_edge {
            Some((a, b)) => {
                g.remove_edge(a, b);
            }
            None => break,
        }
    }

    let mut indegree: Vec<usize> = (0..ids.len())
        .map(|i| g.neighbors_directed(i, petgraph::Direction::Incoming).count())
        .collect();
    let mut ready: BTreeSet<usize> = (0..ids.len()).filter(|&i| indegree[i] == 0).collect();
    let mut out = Vec::with_capacity(ids.len());
    while let Some(i) = ready.pop_first() {
        out.push(ids[i].clone());
        for j in g.neighbors_directed(i, petgraph::Direction::Outgoing) {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.insert(j);
            }
        }
    }
    debug_assert_eq!(out.len(), ids.len());
    out
}
