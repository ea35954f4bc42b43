use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::mscript::{parse_keyvalue, render_keyvalue};
use crate::universe::ConfSyntax;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    KeptLocal,
    TookNew,
    Merged,
    Conflict,
}

impl fmt::Display for MergeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeKind::KeptLocal => "kept-local",
            MergeKind::TookNew => "took-new",
            MergeKind::Merged => "merged",
            MergeKind::Conflict => "conflict",
        })
    }
}

/// Both variants of a region that was changed differently on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictHunk {
    /// `line N` (1-based, in base) or `key K`.
    pub location: String,
    pub base: Vec<String>,
    pub local: Vec<String>,
    pub incoming: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub kind: MergeKind,
    /// Merged bytes. For a line conflict, the hunks are shown inline
    /// between conflict markers.
    pub content: Vec<u8>,
    pub hunks: Vec<ConflictHunk>,
    /// Set when a keyvalue merge fell back to lines because an input did
    /// not parse.
    pub fallback: bool,
}

impl MergeOutcome {
    fn plain(kind: MergeKind, content: &[u8]) -> Self {
        MergeOutcome {
            kind,
            content: content.to_vec(),
            hunks: Vec::new(),
            fallback: false,
        }
    }

    pub fn is_conflict(&self) -> bool {
        self.kind == MergeKind::Conflict
    }
}

/// Changes on one side only win; identical input on a side short-circuits.
fn shortcut(base: &[u8], local: &[u8], incoming: &[u8]) -> Option<MergeOutcome> {
    if local == base {
        Some(MergeOutcome::plain(MergeKind::TookNew, incoming))
    } else if incoming == base || incoming == local {
        Some(MergeOutcome::plain(MergeKind::KeptLocal, local))
    } else {
        None
    }
}

fn is_text(b: &[u8]) -> bool {
    !b.contains(&0) && std::str::from_utf8(b).is_ok()
}

/// Three-way line merge.
pub fn merge3(base: &[u8], local: &[u8], incoming: &[u8]) -> MergeOutcome {
    if let Some(o) = shortcut(base, local, incoming) {
        return o;
    }
    if !(is_text(base) && is_text(local) && is_text(incoming)) {
        let lossy = |b: &[u8]| vec![String::from_utf8_lossy(b).into_owned()];
        return MergeOutcome {
            kind: MergeKind::Conflict,
            content: local.to_vec(),
            hunks: vec![ConflictHunk {
                location: "binary content".into(),
                base: lossy(base),
                local: lossy(local),
                incoming: lossy(incoming),
            }],
            fallback: false,
        };
    }
    let split = |b: &[u8]| -> Vec<String> {
        std::str::from_utf8(b)
            .expect("checked")
            .split_inclusive('\n')
            .map(String::from)
            .collect()
    };
    let (b, l, i) = (split(base), split(local), split(incoming));
    let ml = lcs_map(&b, &l);
    let mi = lcs_map(&b, &i);

    let mut out: Vec<String> = Vec::new();
    let mut hunks = Vec::new();
    let (mut pb, mut pl, mut pi) = (0, 0, 0);
    loop {
        while pb < b.len() && ml[pb] == Some(pl) && mi[pb] == Some(pi) {
            out.push(b[pb].clone());
            pb += 1;
            pl += 1;
            pi += 1;
        }
        if pb == b.len() && pl == l.len() && pi == i.len() {
            break;
        }
        // Next base line kept by both sides closes the unstable chunk.
        let next = (pb..b.len()).find_map(|k| Some((k, ml[k]?, mi[k]?)));
        let (nb, nl, ni) = next.unwrap_or((b.len(), l.len(), i.len()));
        let (cb, cl, ci) = (&b[pb..nb], &l[pl..nl], &i[pi..ni]);
        if cl == cb {
            out.extend_from_slice(ci);
        } else if ci == cb || cl == ci {
            out.extend_from_slice(cl);
        } else {
            hunks.push(ConflictHunk {
                location: format!("line {}", pb + 1),
                base: cb.to_vec(),
                local: cl.to_vec(),
                incoming: ci.to_vec(),
            });
            marker(&mut out, "<<<<<<< local");
            push_lines(&mut out, cl);
            marker(&mut out, "||||||| base");
            push_lines(&mut out, cb);
            marker(&mut out, "=======");
            push_lines(&mut out, ci);
            marker(&mut out, ">>>>>>> incoming");
        }
        pb = nb;
        pl = nl;
        pi = ni;
    }
    MergeOutcome {
        kind: if hunks.is_empty() {
            MergeKind::Merged
        } else {
            MergeKind::Conflict
        },
        content: out.concat().into_bytes(),
        hunks,
        fallback: false,
    }
}

fn marker(out: &mut Vec<String>, m: &str) {
    out.push(format!("{m}\n"));
}

fn push_lines(out: &mut Vec<String>, lines: &[String]) {
    for l in lines {
        if l.ends_with('\n') {
            out.push(l.clone());
        } else {
            out.push(format!("{l}\n"));
        }
    }
}

/// For each line of `a`, its partner in `b` under one longest common
/// subsequence. Ties prefer the earliest match in `a`.
fn lcs_map(a: &[String], b: &[String]) -> Vec<Option<usize>> {
    let (n, m) = (a.len(), b.len());
    // suffix table: t[x][y] = LCS length of a[x..], b[y..]
    let mut t = vec![vec![0u32; m + 1]; n + 1];
    for x in (0..n).rev() {
        for y in (0..m).rev() {
            t[x][y] = if a[x] == b[y] {
                t[x + 1][y + 1] + 1
            } else {
                t[x + 1][y].max(t[x][y + 1])
            };
        }
    }
    let mut map = vec![None; n];
    let (mut x, mut y) = (0, 0);
    while x < n && y < m {
        if a[x] == b[y] {
            map[x] = Some(y);
            x += 1;
            y += 1;
        } else if t[x + 1][y] >= t[x][y + 1] {
            x += 1;
        } else {
            y += 1;
        }
    }
    map
}

/// Merge under a syntax hint. Keyvalue inputs are merged key by key, so
/// reordering lines never conflicts; the result is written sorted.
pub fn structured_merge(base: &[u8], local: &[u8], incoming: &[u8], syntax: ConfSyntax) -> MergeOutcome {
    if syntax == ConfSyntax::Lines {
        return merge3(base, local, incoming);
    }
    if let Some(o) = shortcut(base, local, incoming) {
        return o;
    }
    let (Ok(b), Ok(l), Ok(i)) = (parse_keyvalue(base), parse_keyvalue(local), parse_keyvalue(incoming)) else {
        return MergeOutcome {
            fallback: true,
            ..merge3(base, local, incoming)
        };
    };
    let keys: BTreeSet<&String> = b.keys().chain(l.keys()).chain(i.keys()).collect();
    let mut out = BTreeMap::new();
    let mut hunks = Vec::new();
    for k in keys {
        let (vb, vl, vi) = (b.get(k), l.get(k), i.get(k));
        let v = if vl == vb {
            vi
        } else if vi == vb || vl == vi {
            vl
        } else {
            let kv = |v: Option<&String>| v.map(|v| format!("{k}={v}")).into_iter().collect();
            hunks.push(ConflictHunk {
                location: format!("key {k}"),
                base: kv(vb),
                local: kv(vl),
                incoming: kv(vi),
            });
            vl
        };
        if let Some(v) = v {
            out.insert(k.clone(), v.clone());
        }
    }
    MergeOutcome {
        kind: if hunks.is_empty() {
            MergeKind::Merged
        } else {
            MergeKind::Conflict
        },
        content: render_keyvalue(&out),
        hunks,
        fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(o: &MergeOutcome) -> &str {
        std::str::from_utf8(&o.content).unwrap()
    }

    #[test]
    fn one_sided() {
        let o = merge3(b"a\n", b"a\n", b"b\n");
        assert_eq!((o.kind, s(&o)), (MergeKind::TookNew, "b\n"));
        let o = merge3(b"a\n", b"l\n", b"a\n");
        assert_eq!((o.kind, s(&o)), (MergeKind::KeptLocal, "l\n"));
    }

    #[test]
    fn disjoint_edits_merge() {
        let o = merge3(b"a\nb\nc\n", b"A\nb\nc\n", b"a\nb\nC\n");
        assert_eq!((o.kind, s(&o)), (MergeKind::Merged, "A\nb\nC\n"));
    }

    #[test]
    fn overlapping_edits_conflict() {
        let o = merge3(b"a\nb\nc\n", b"a\nX\nc\n", b"a\nY\nc\n");
        assert_eq!(o.kind, MergeKind::Conflict);
        assert_eq!(o.hunks.len(), 1);
        assert_eq!(o.hunks[0].location, "line 2");
        assert_eq!(o.hunks[0].local, vec!["X\n"]);
        assert_eq!(
            s(&o),
            "a\n<<<<<<< local\nX\n||||||| base\nb\n=======\nY\n>>>>>>> incoming\nc\n"
        );
    }

    #[test]
    fn binary_conflicts() {
        let o = merge3(b"\0a", b"\0b", b"\0c");
        assert!(o.is_conflict());
        assert_eq!(o.content, b"\0b");
    }

    #[test]
    fn keyvalue_reorder_is_not_a_conflict() {
        let base = b"a=1\nb=2\n";
        let o = structured_merge(base, b"b=2\na=1\n", b"a=1\nb=3\n", ConfSyntax::KeyValue);
        assert_eq!((o.kind, s(&o)), (MergeKind::Merged, "a=1\nb=3\n"));
        let lines = structured_merge(base, b"b=2\na=1\n", b"a=1\nb=3\n", ConfSyntax::Lines);
        assert!(lines.is_conflict());
    }

    #[test]
    fn keyvalue_conflict_is_per_key() {
        let o = structured_merge(b"a=1\nb=2\n", b"a=x\nb=2\nc=9\n", b"a=y\nb=5\n", ConfSyntax::KeyValue);
        assert_eq!(o.kind, MergeKind::Conflict);
        assert_eq!(o.hunks.len(), 1);
        assert_eq!(o.hunks[0].location, "key a");
        assert_eq!(s(&o), "a=x\nb=5\nc=9\n");
    }

    #[test]
    fn keyvalue_fallback() {
        let o = structured_merge(b"a=1\n", b"junk\n", b"a=2\n", ConfSyntax::KeyValue);
        assert!(o.fallback);
    }

    /// Oracle for small inputs: apply each side's single-line replacements
    /// against a base of distinct lines.
    fn replace_oracle(base: &[&str], l: &BTreeMap<usize, String>, i: &BTreeMap<usize, String>) -> Option<String> {
        let mut out = String::new();
        for (k, b) in base.iter().enumerate() {
            let line = match (l.get(&k), i.get(&k)) {
                (Some(x), Some(y)) if x != y => return None,
                (Some(x), _) | (None, Some(x)) => x.clone(),
                (None, None) => b.to_string(),
            };
            out += &line;
            out += "\n";
        }
        Some(out)
    }

    fn lines(v: &[&str]) -> Vec<u8> {
        v.iter().map(|l| format!("{l}\n")).collect::<String>().into_bytes()
    }

    fn kv_text(pairs: &[(String, String)]) -> Vec<u8> {
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect::<String>().into_bytes()
    }

    proptest! {
        #[test]
        fn identity_laws(b in "[ab\n]{0,12}", x in "[abc\n]{0,12}") {
            let (b, x) = (b.as_bytes(), x.as_bytes());
            let o = merge3(b, b, x);
            prop_assert_eq!((o.kind, o.content), (MergeKind::TookNew, x.to_vec()));
            if x != b {
                let o = merge3(b, x, b);
                prop_assert_eq!((o.kind, o.content), (MergeKind::KeptLocal, x.to_vec()));
            }
        }

        #[test]
        fn conflicts_are_symmetric(b in "[abc\n]{0,14}", l in "[abc\n]{0,14}", i in "[abc\n]{0,14}") {
            let (b, l, i) = (b.as_bytes(), l.as_bytes(), i.as_bytes());
            let x = merge3(b, l, i);
            let y = merge3(b, i, l);
            prop_assert_eq!(x.is_conflict(), y.is_conflict());
            prop_assert_eq!(x.hunks.len(), y.hunks.len());
            if !x.is_conflict() {
                prop_assert_eq!(x.content, y.content);
            }
        }

        #[test]
        fn replacements_match_oracle(
            l in prop::collection::btree_map(0usize..5, "[xyz]", 0..3),
            i in prop::collection::btree_map(0usize..5, "[xyz]", 0..3),
        ) {
            let base = ["a", "b", "c", "d", "e"];
            let side = |m: &BTreeMap<usize, String>| {
                let v: Vec<String> = base.iter().enumerate()
                    .map(|(k, b)| m.get(&k).cloned().unwrap_or(b.to_string())).collect();
                lines(&v.iter().map(String::as_str).collect::<Vec<_>>())
            };
            let o = merge3(&lines(&base), &side(&l), &side(&i));
            match replace_oracle(&base, &l, &i) {
                // Adjacent edits from both sides share a chunk and may conflict.
                Some(expected) if !o.is_conflict() => prop_assert_eq!(s(&o), expected.as_str()),
                Some(_) => {
                    let adjacent = l.keys().any(|a| i.keys().any(|b| a.abs_diff(*b) <= 1 && l[a] != base[*a] && i[b] != base[*b]));
                    prop_assert!(adjacent);
                }
                None => prop_assert!(o.is_conflict()),
            }
        }

        #[test]
        fn keyvalue_is_permutation_invariant(
            b in prop::collection::btree_map("[a-d]", "[0-2]", 0..4),
            l in prop::collection::btree_map("[a-d]", "[0-2]", 0..4),
            i in prop::collection::btree_map("[a-d]", "[0-2]", 0..4),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = |m: &BTreeMap<String, String>| {
                let mut v: Vec<(String, String)> = m.clone().into_iter().collect();
                v.shuffle(&mut rng);
                kv_text(&v)
            };
            let sorted = |m: &BTreeMap<String, String>| kv_text(&m.clone().into_iter().collect::<Vec<_>>());
            let x = structured_merge(&sorted(&b), &sorted(&l), &sorted(&i), ConfSyntax::KeyValue);
            let y = structured_merge(&shuffled(&b), &shuffled(&l), &shuffled(&i), ConfSyntax::KeyValue);
            prop_assert_eq!(x.is_conflict(), y.is_conflict());
            prop_assert_eq!(parse_keyvalue(&x.content).unwrap(), parse_keyvalue(&y.content).unwrap());
        }

        #[test]
        fn keyvalue_union_from_empty_base(
            l in prop::collection::btree_map("[a-c]", "[0-2]", 0..3),
            i in prop::collection::btree_map("[d-f]", "[0-2]", 0..3),
        ) {
            let o = structured_merge(b"", &kv_text(&l.clone().into_iter().collect::<Vec<_>>()),
                                     &kv_text(&i.clone().into_iter().collect::<Vec<_>>()), ConfSyntax::KeyValue);
            prop_assert!(!o.is_conflict());
            let mut union = l.clone();
            union.extend(i.clone());
            prop_assert_eq!(parse_keyvalue(&o.content).unwrap(), union);
        }
    }
}
