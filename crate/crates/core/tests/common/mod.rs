//! Random instance generators and brute-force oracles shared by the
//! integration suites. The oracles work on the generator's own model, not on
//! the library's parsed universe, so they share no code with the solver.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const OPS: [&str; 5] = ["<<", "<=", "=", ">=", ">>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MAtom {
    pub name: String,
    pub cons: Option<(&'static str, u32)>,
}

impl MAtom {
    pub fn bare(name: &str) -> Self {
        MAtom {
            name: name.to_string(),
            cons: None,
        }
    }

    pub fn render(&self) -> String {
        match self.cons {
            None => self.name.clone(),
            Some((op, v)) => format!("{} ({op} {v})", self.name),
        }
    }
}

pub fn admits(cons: Option<(&str, u32)>, v: u32) -> bool {
    match cons {
        None => true,
        Some(("<<", c)) => v < c,
        Some(("<=", c)) => v <= c,
        Some(("=", c)) => v == c,
        Some((">=", c)) => v >= c,
        Some((">>", c)) => v > c,
        Some((op, _)) => panic!("unknown operator {op}"),
    }
}

#[derive(Debug, Clone)]
pub struct MPkg {
    pub name: String,
    pub ver: u32,
    pub size: u64,
    pub maint: String,
    pub depends: Vec<Vec<MAtom>>,
    pub conflicts: Vec<MAtom>,
    pub provides: Vec<(String, Option<u32>)>,
    pub files: Vec<String>,
    pub conffiles: Vec<String>,
    pub keyvalue: Vec<String>,
    pub scripts: Vec<(&'static str, String)>,
}

impl MPkg {
    pub fn new(name: &str, ver: u32) -> Self {
        MPkg {
            name: name.to_string(),
            ver,
            size: 1,
            maint: "nobody".into(),
            depends: Vec::new(),
            conflicts: Vec::new(),
            provides: Vec::new(),
            files: Vec::new(),
            conffiles: Vec::new(),
            keyvalue: Vec::new(),
            scripts: Vec::new(),
        }
    }

    pub fn id(&self) -> String {
        format!("{} {}", self.name, self.ver)
    }

    pub fn dir(&self) -> String {
        format!("{}_{}", self.name, self.ver)
    }

    /// Does this package satisfy `a`, by name or through a provide?
    pub fn meets(&self, a: &MAtom) -> bool {
        (self.name == a.name && admits(a.cons, self.ver))
            || self.provides.iter().any(|(f, v)| {
                f == &a.name
                    && match (a.cons, v) {
                        (None, _) => true,
                        (Some(c), Some(v)) => admits(Some(c), *v),
                        (Some(_), None) => false,
                    }
            })
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "Package: {}\nVersion: {}\nSize: {}\nMaintainer: {}\n",
            self.name, self.ver, self.size, self.maint
        );
        if !self.depends.is_empty() {
            let cs: Vec<String> = self
                .depends
                .iter()
                .map(|c| c.iter().map(MAtom::render).collect::<Vec<_>>().join(" | "))
                .collect();
            s += &format!("Depends: {}\n", cs.join(", "));
        }
        if !self.conflicts.is_empty() {
            let cs: Vec<String> = self.conflicts.iter().map(MAtom::render).collect();
            s += &format!("Conflicts: {}\n", cs.join(", "));
        }
        if !self.provides.is_empty() {
            let ps: Vec<String> = self
                .provides
                .iter()
                .map(|(f, v)| match v {
                    None => f.clone(),
                    Some(v) => format!("{f} (= {v})"),
                })
                .collect();
            s += &format!("Provides: {}\n", ps.join(", "));
        }
        if !self.files.is_empty() {
            s += &format!("Files: {}\n", self.files.join(", "));
        }
        if !self.conffiles.is_empty() {
            s += &format!("Conffiles: {}\n", self.conffiles.join(", "));
        }
        if !self.keyvalue.is_empty() {
            let hs: Vec<String> = self.keyvalue.iter().map(|p| format!("{p}=keyvalue")).collect();
            s += &format!("Conffile-Syntax: {}\n", hs.join(", "));
        }
        for (hook, _) in &self.scripts {
            let key = format!("{}{}", hook[..1].to_uppercase(), &hook[1..]);
            s += &format!("{key}: scripts/{hook}\n");
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct Model {
    pub pkgs: Vec<MPkg>,
}

impl Model {
    pub fn render(&self) -> String {
        self.pkgs.iter().map(MPkg::render).collect::<Vec<_>>().join("\n")
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.pkgs.iter().position(|p| p.id() == id)
    }

    pub fn latest(&self, name: &str) -> Option<u32> {
        self.pkgs.iter().filter(|p| p.name == name).map(|p| p.ver).max()
    }

    /// Can packages `i` and `j` not be installed together?
    pub fn clash(&self, i: usize, j: usize) -> bool {
        let (p, q) = (&self.pkgs[i], &self.pkgs[j]);
        if i == j {
            return false;
        }
        if p.name == q.name {
            return true;
        }
        let declared = |a: &MPkg, b: &MPkg| a.conflicts.iter().any(|c| c.name != a.name && b.meets(c));
        declared(p, q) || declared(q, p) || p.files.iter().any(|f| q.files.contains(f))
    }

    /// Dependencies and conflicts hold inside `set`.
    pub fn consistent(&self, set: &[usize]) -> bool {
        for &i in set {
            for clause in &self.pkgs[i].depends {
                if !clause.iter().any(|a| set.iter().any(|&j| self.pkgs[j].meets(a))) {
                    return false;
                }
            }
        }
        for (k, &i) in set.iter().enumerate() {
            for &j in &set[k + 1..] {
                if self.clash(i, j) {
                    return false;
                }
            }
        }
        true
    }

    pub fn request_holds(&self, s0: &[usize], set: &[usize], r: &[(&'static str, MAtom)]) -> bool {
        r.iter().all(|(action, a)| {
            let by_name = |j: usize| self.pkgs[j].name == a.name && admits(a.cons, self.pkgs[j].ver);
            let install = || {
                set.iter().any(|&j| {
                    by_name(j) || (a.cons.is_none() && self.pkgs[j].provides.iter().any(|(f, _)| f == &a.name))
                })
            };
            let before = s0.iter().map(|&j| &self.pkgs[j]).find(|p| p.name == a.name);
            match (*action, before) {
                ("install", _) | ("upgrade", None) => install(),
                ("remove", _) => !set.iter().any(|&j| by_name(j)),
                ("upgrade", Some(b)) => set.iter().any(|&j| by_name(j) && self.pkgs[j].ver >= b.ver),
                (other, _) => panic!("unknown action {other}"),
            }
        })
    }

    /// Every subset of the model that solves the request, by brute force.
    pub fn solutions(&self, s0: &[usize], r: &[(&'static str, MAtom)]) -> Vec<Vec<usize>> {
        let n = self.pkgs.len();
        assert!(n <= 16, "enumeration is exponential");
        (0u32..1 << n)
            .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).collect::<Vec<_>>())
            .filter(|set| self.consistent(set) && self.request_holds(s0, set, r))
            .collect()
    }

    pub fn ids(&self, set: &[usize]) -> BTreeSet<String> {
        set.iter().map(|&i| self.pkgs[i].id()).collect()
    }
}

pub fn render_request(r: &[(&'static str, MAtom)]) -> String {
    r.iter()
        .map(|(act, a)| format!("{act} {}", a.render()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Knobs for [`random_model`].
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_pkgs: usize,
    pub names: usize,
    pub virtuals: usize,
}

fn random_atom(rng: &mut ChaCha8Rng, targets: &[String], versioned: f64) -> MAtom {
    let name = targets.choose(rng).unwrap().clone();
    let cons = rng
        .gen_bool(versioned)
        .then(|| (*OPS.choose(rng).unwrap(), rng.gen_range(1..=3)));
    MAtom { name, cons }
}

/// A random universe with relationship densities drawn per instance.
pub fn random_model(rng: &mut ChaCha8Rng, shape: Shape) -> Model {
    let names: Vec<String> = (0..shape.names).map(|i| format!("p{i}")).collect();
    let virtuals: Vec<String> = (0..shape.virtuals).map(|i| format!("v{i}")).collect();
    let targets: Vec<String> = names.iter().chain(&virtuals).cloned().collect();
    let dep_p = rng.gen_range(0.0..0.8);
    let conf_p = rng.gen_range(0.0..0.5);
    let prov_p = rng.gen_range(0.0..0.5);
    let versioned = rng.gen_range(0.0..0.5);

    let n = rng.gen_range(1..=shape.max_pkgs);
    let mut slots: Vec<(String, u32)> = names.iter().flat_map(|nm| (1..=3).map(move |v| (nm.clone(), v))).collect();
    slots.shuffle(rng);
    slots.truncate(n);
    slots.sort();

    let mut pkgs = Vec::new();
    for (name, ver) in slots {
        let mut p = MPkg::new(&name, ver);
        p.size = rng.gen_range(1..50);
        p.maint = ["alice", "bob"].choose(rng).unwrap().to_string();
        while rng.gen_bool(dep_p) && p.depends.len() < 3 {
            let width = rng.gen_range(1..=2);
            p.depends.push((0..width).map(|_| random_atom(rng, &targets, versioned)).collect());
        }
        while rng.gen_bool(conf_p) && p.conflicts.len() < 2 {
            p.conflicts.push(random_atom(rng, &targets, versioned));
        }
        if !virtuals.is_empty() && rng.gen_bool(prov_p) {
            let f = virtuals.choose(rng).unwrap().clone();
            let v = rng.gen_bool(0.5).then(|| rng.gen_range(1..=3));
            p.provides.push((f, v));
        }
        pkgs.push(p);
    }
    Model { pkgs }
}

/// A random installed set with at most one version per name.
pub fn random_s0(rng: &mut ChaCha8Rng, m: &Model) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..m.pkgs.len() {
        if rng.gen_bool(0.3) && seen.insert(m.pkgs[i].name.clone()) {
            out.push(i);
        }
    }
    out
}

/// One to three request atoms on distinct names, never contradictory.
pub fn random_request(rng: &mut ChaCha8Rng, shape: Shape) -> Vec<(&'static str, MAtom)> {
    let mut targets: Vec<String> = (0..shape.names).map(|i| format!("p{i}")).collect();
    targets.extend((0..shape.virtuals).map(|i| format!("v{i}")));
    targets.shuffle(rng);
    let k = rng.gen_range(1..=3.min(targets.len()));
    targets[..k]
        .iter()
        .map(|t| {
            let action = *["install", "install", "remove", "upgrade"].choose(rng).unwrap();
            let cons = rng.gen_bool(0.3).then(|| (*OPS.choose(rng).unwrap(), rng.gen_range(1..=3)));
            (action, MAtom { name: t.clone(), cons })
        })
        .collect()
}

/// Criterion values of a solution, written from the definitions.
pub fn oracle_scores(m: &Model, s0: &[usize], set: &[usize], spec: &[OracleCriterion]) -> Vec<u64> {
    let before: BTreeMap<&str, u32> = s0.iter().map(|&i| (m.pkgs[i].name.as_str(), m.pkgs[i].ver)).collect();
    let after: BTreeMap<&str, u32> = set.iter().map(|&i| (m.pkgs[i].name.as_str(), m.pkgs[i].ver)).collect();
    spec.iter()
        .map(|c| match c {
            OracleCriterion::Removed => before.keys().filter(|n| !after.contains_key(*n)).count() as u64,
            OracleCriterion::Changed => before
                .iter()
                .filter(|(n, v)| after.get(*n).is_some_and(|w| w != *v))
                .count() as u64,
            OracleCriterion::New => after.keys().filter(|n| !before.contains_key(*n)).count() as u64,
            OracleCriterion::Download => set
                .iter()
                .filter(|i| !s0.contains(i))
                .map(|&i| m.pkgs[i].size)
                .sum(),
            OracleCriterion::NotUpToDate => set
                .iter()
                .filter(|&&i| m.latest(&m.pkgs[i].name) != Some(m.pkgs[i].ver))
                .count() as u64,
            OracleCriterion::BlacklistName(prefix) => {
                set.iter().filter(|&&i| m.pkgs[i].name.starts_with(prefix.as_str())).count() as u64
            }
            OracleCriterion::BlacklistMaint(who) => set.iter().filter(|&&i| &m.pkgs[i].maint == who).count() as u64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleCriterion {
    Removed,
    Changed,
    New,
    Download,
    NotUpToDate,
    BlacklistName(String),
    BlacklistMaint(String),
}

impl OracleCriterion {
    pub fn render(&self) -> String {
        match self {
            OracleCriterion::Removed => "-removed".into(),
            OracleCriterion::Changed => "-changed".into(),
            OracleCriterion::New => "-new".into(),
            OracleCriterion::Download => "-download".into(),
            OracleCriterion::NotUpToDate => "-notuptodate".into(),
            OracleCriterion::BlacklistName(p) => format!("-blacklist:name:{p}*"),
            OracleCriterion::BlacklistMaint(m) => format!("-blacklist:maint:{m}"),
        }
    }
}

/// A random non-empty criteria list with at most one blacklist.
pub fn random_spec(rng: &mut ChaCha8Rng, names: usize) -> Vec<OracleCriterion> {
    let mut pool = vec![
        OracleCriterion::Removed,
        OracleCriterion::Changed,
        OracleCriterion::New,
        OracleCriterion::Download,
        OracleCriterion::NotUpToDate,
    ];
    pool.push(if rng.gen_bool(0.5) {
        OracleCriterion::BlacklistName(format!("p{}", rng.gen_range(0..names)))
    } else {
        OracleCriterion::BlacklistMaint(["alice", "bob"].choose(rng).unwrap().to_string())
    });
    pool.shuffle(rng);
    pool.truncate(rng.gen_range(1..=pool.len()));
    pool
}

/// Every file and directory under `root` with its mode and contents,
/// leaving out the engine's lock, history, archive and download cache.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, (u32, Option<Vec<u8>>)> {
    let skip = [".pkgdb/lock", ".pkgdb/history", ".pkgdb/archive", ".pkgdb/cache"];
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).min_depth(1) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
        if skip.iter().any(|s| rel.starts_with(s)) {
            continue;
        }
        let mode = e.metadata().unwrap().permissions().mode() & 0o7777;
        let bytes = e.file_type().is_file().then(|| fs::read(e.path()).unwrap());
        out.insert(rel, (mode, bytes));
    }
    out
}

/// Recursive copy that keeps file and directory modes.
pub fn copy_tree(src: &Path, dst: &Path) {
    for e in walkdir::WalkDir::new(src) {
        let e = e.unwrap();
        let target = dst.join(e.path().strip_prefix(src).unwrap());
        let perms = e.metadata().unwrap().permissions();
        if e.file_type().is_dir() {
            fs::create_dir_all(&target).unwrap();
        } else {
            fs::copy(e.path(), &target).unwrap();
        }
        fs::set_permissions(&target, perms).unwrap();
    }
}

pub fn write_file(path: &Path, text: impl AsRef<[u8]>) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, text).unwrap();
}

pub const ATERM_PACKAGES: &str = "\
Package: aterm
Version: 1.0.1-4
Size: 340
Depends: libafterimage0
Files: usr/bin/aterm, etc/aterm.conf
Conffiles: etc/aterm.conf
Postinst: scripts/postinst

Package: libafterimage0
Version: 2.2.8-2
Size: 46
Files: usr/lib/libAfterImage.so.0
";

/// The two-package aterm repository with payloads.
pub fn aterm_repo(repo: &Path, postinst: &str) {
    write_file(&repo.join("Packages"), ATERM_PACKAGES);
    let a = repo.join("aterm_1.0.1-4");
    write_file(&a.join("usr/bin/aterm"), "aterm\n");
    write_file(&a.join("etc/aterm.conf"), "font=fixed\n");
    write_file(&a.join("scripts/postinst"), postinst);
    write_file(&repo.join("libafterimage0_2.2.8-2/usr/lib/libAfterImage.so.0"), "lib\n");
}
