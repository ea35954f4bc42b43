//! The package universe: versions, relationships, repository metadata and
//! installed status.

mod relation;
mod stanza;
mod status;
mod version;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use relation::{
    admits, format_clause, parse_atom_list, parse_depends, parse_provides, Atom, Clause,
    Constraint, Op, PackageName, Provide, RelPath, Relationship,
};
pub use stanza::{parse_stanzas, Field, Stanza};
pub use status::{parse_status, Status};
pub use version::{compare_versions, Version};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UniverseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<UniverseError>,
    },
    #[error("malformed version {0:?}")]
    BadVersion(String),
    #[error("malformed package name {0:?}")]
    BadName(String),
    #[error("malformed version constraint {0:?}")]
    BadConstraint(String),
    #[error("malformed path {0:?}")]
    BadPath(String),
    #[error("line {line}: duplicate package {id}")]
    DuplicatePackage { line: usize, id: PackageId },
    #[error("line {line}: missing required field {key}")]
    MissingField { line: usize, key: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("status not a subset of universe: {0} is unknown")]
    NotSubset(PackageId),
    #[error("{path} is claimed by both {first} and {second}")]
    FileClash {
        path: RelPath,
        first: PackageId,
        second: PackageId,
    },
    #[error("status lists two versions of {0}")]
    TwoVersions(PackageName),
}

impl UniverseError {
    fn at(self, line: usize) -> Self {
        match self {
            e @ (UniverseError::Syntax { .. }
            | UniverseError::AtLine { .. }
            | UniverseError::DuplicatePackage { .. }
            | UniverseError::MissingField { .. }) => e,
            e => UniverseError::AtLine {
                line,
                source: Box::new(e),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PackageId {
    pub name: PackageName,
    pub version: Version,
}

impl PackageId {
    pub fn new(name: PackageName, version: Version) -> Self {
        PackageId { name, version }
    }

    /// Parses `name version` or `name_version`.
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        let (name, version) = s
            .trim()
            .split_once([' ', '_'])
            .ok_or_else(|| UniverseError::Invalid(format!("expected `name version`, got {s:?}")))?;
        Ok(PackageId::new(
            PackageName::parse(name)?,
            Version::parse(version.trim())?,
        ))
    }

    /// `<name>_<version>`, the payload directory name.
    pub fn archive_name(&self) -> String {
        format!("{}_{}", self.name, self.version)
    }
}

impl fmt::Display for PackageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, self.version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hook {
    Preinst,
    Postinst,
    Prerm,
    Postrm,
}

impl Hook {
    pub const ALL: [Hook; 4] = [Hook::Preinst, Hook::Postinst, Hook::Prerm, Hook::Postrm];

    pub fn as_str(self) -> &'static str {
        match self {
            Hook::Preinst => "preinst",
            Hook::Postinst => "postinst",
            Hook::Prerm => "prerm",
            Hook::Postrm => "postrm",
        }
    }

    fn field(self) -> &'static str {
        match self {
            Hook::Preinst => "Preinst",
            Hook::Postinst => "Postinst",
            Hook::Prerm => "Prerm",
            Hook::Postrm => "Postrm",
        }
    }
}

impl fmt::Display for Hook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Merge syntax hint for a conffile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum ConfSyntax {
    #[default]
    Lines,
    KeyValue,
}

impl ConfSyntax {
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        match s.trim() {
            "lines" => Ok(ConfSyntax::Lines),
            "keyvalue" => Ok(ConfSyntax::KeyValue),
            other => Err(UniverseError::Invalid(format!("unknown conffile syntax {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConfSyntax::Lines => "lines",
            ConfSyntax::KeyValue => "keyvalue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Package {
    pub id: PackageId,
    pub rel: Relationship,
    pub size_kb: u64,
    pub maintainer: String,
    pub files: Vec<RelPath>,
    pub conffiles: Vec<RelPath>,
    pub conffile_syntax: BTreeMap<RelPath, ConfSyntax>,
    /// Payload-relative script paths.
    pub scripts: BTreeMap<Hook, RelPath>,
}

impl Package {
    pub fn new(id: PackageId) -> Self {
        Package {
            id,
            rel: Relationship::default(),
            size_kb: 0,
            maintainer: String::new(),
            files: Vec::new(),
            conffiles: Vec::new(),
            conffile_syntax: BTreeMap::new(),
            scripts: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &PackageName {
        &self.id.name
    }

    pub fn version(&self) -> &Version {
        &self.id.version
    }

    pub fn is_conffile(&self, path: &RelPath) -> bool {
        self.conffiles.contains(path)
    }

    pub fn syntax_of(&self, path: &RelPath) -> ConfSyntax {
        self.conffile_syntax.get(path).copied().unwrap_or_default()
    }

    fn validate(&mut self) -> Result<(), UniverseError> {
        let own = self.id.name.clone();
        self.rel.conflicts.retain(|a| a.name != own);
        let mut seen = BTreeSet::new();
        for f in &self.files {
            if f.is_internal() {
                return Err(UniverseError::Invalid(format!(
                    "{}: file {f} is inside the engine database",
                    self.id
                )));
            }
            if !seen.insert(f) {
                return Err(UniverseError::Invalid(format!(
                    "{}: file {f} listed twice",
                    self.id
                )));
            }
        }
        for c in &self.conffiles {
            if !seen.contains(c) {
                return Err(UniverseError::Invalid(format!(
                    "{}: conffile {c} is not among Files",
                    self.id
                )));
            }
        }
        for p in self.conffile_syntax.keys() {
            if !self.conffiles.contains(p) {
                return Err(UniverseError::Invalid(format!(
                    "{}: syntax hint for {p}, which is not a conffile",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// True iff `candidate` satisfies `atom`, either by name and version or
/// through one of its provides.
pub fn satisfies(atom: &Atom, candidate: &Package) -> bool {
    (candidate.id.name == atom.name && admits(atom.constraint.as_ref(), &candidate.id.version))
        || candidate.rel.provides.iter().any(|p| p.satisfies(atom))
}

/// Why two packages cannot be installed together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConflictReason {
    /// `by` declares a conflict atom matching the other package.
    Declared { by: PackageId, atom: Atom },
    /// Two versions of one package.
    SameName,
    /// Both ship the same path.
    SharedFile(RelPath),
}

impl fmt::Display for ConflictReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConflictReason::Declared { by, atom } => write!(f, "{by} conflicts with {atom}"),
            ConflictReason::SameName => f.write_str("two versions of the same package"),
            ConflictReason::SharedFile(p) => write!(f, "both ship {p}"),
        }
    }
}

/// The set of known packages. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Universe {
    packages: BTreeMap<PackageId, Package>,
    providers: BTreeMap<PackageName, BTreeSet<PackageId>>,
    by_name: BTreeMap<PackageName, Vec<PackageId>>,
    conflicts: BTreeMap<(PackageId, PackageId), ConflictReason>,
}

impl Universe {
    pub fn new(packages: impl IntoIterator<Item = Package>) -> Result<Self, UniverseError> {
        let mut map = BTreeMap::new();
        for mut p in packages {
            p.validate()?;
            if map.contains_key(&p.id) {
                return Err(UniverseError::DuplicatePackage { line: 0, id: p.id });
            }
            map.insert(p.id.clone(), p);
        }
        Ok(Self::index(map))
    }

    fn index(packages: BTreeMap<PackageId, Package>) -> Self {
        let providers = Self::build_provider_index(packages.values());
        let mut by_name: BTreeMap<PackageName, Vec<PackageId>> = BTreeMap::new();
        for id in packages.keys() {
            by_name.entry(id.name.clone()).or_default().push(id.clone());
        }
        let mut u = Universe {
            packages,
            providers,
            by_name,
            conflicts: BTreeMap::new(),
        };
        u.conflicts = u.compute_conflicts();
        u
    }

    /// Inverse of the provides fields: feature name to providing packages.
    pub fn build_provider_index<'a>(
        packages: impl IntoIterator<Item = &'a Package>,
    ) -> BTreeMap<PackageName, BTreeSet<PackageId>> {
        let mut index: BTreeMap<PackageName, BTreeSet<PackageId>> = BTreeMap::new();
        for p in packages {
            for prov in &p.rel.provides {
                index
                    .entry(prov.feature.clone())
                    .or_default()
                    .insert(p.id.clone());
            }
        }
        index
    }

    fn compute_conflicts(&self) -> BTreeMap<(PackageId, PackageId), ConflictReason> {
        let mut out = BTreeMap::new();
        let mut add = |a: &PackageId, b: &PackageId, why: ConflictReason| {
            let key = if a < b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            out.entry(key).or_insert(why);
        };
        for p in self.packages.values() {
            for atom in &p.rel.conflicts {
                for q in self.satisfiers(atom) {
                    if q != &p.id {
                        add(
                            &p.id,
                            q,
                            ConflictReason::Declared {
                                by: p.id.clone(),
                                atom: atom.clone(),
                            },
                        );
                    }
                }
            }
        }
        for versions in self.by_name.values() {
            for (i, a) in versions.iter().enumerate() {
                for b in &versions[i + 1..] {
                    add(a, b, ConflictReason::SameName);
                }
            }
        }
        let mut owners: BTreeMap<&RelPath, Vec<&PackageId>> = BTreeMap::new();
        for p in self.packages.values() {
            for f in &p.files {
                owners.entry(f).or_default().push(&p.id);
            }
        }
        for (path, ids) in owners {
            for (i, a) in ids.iter().enumerate() {
                for b in &ids[i + 1..] {
                    if a.name != b.name {
                        add(a, b, ConflictReason::SharedFile(path.clone()));
                    }
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, UniverseError> {
        parse_universe(text)
    }

    pub fn len(&self) -> usize {
        self.packages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packages.is_empty()
    }

    pub fn get(&self, id: &PackageId) -> Option<&Package> {
        self.packages.get(id)
    }

    pub fn contains(&self, id: &PackageId) -> bool {
        self.packages.contains_key(id)
    }

    /// Packages in `PackageId` order.
    pub fn packages(&self) -> impl Iterator<Item = &Package> {
        self.packages.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &PackageId> {
        self.packages.keys()
    }

    pub fn provider_index(&self) -> &BTreeMap<PackageName, BTreeSet<PackageId>> {
        &self.providers
    }

    pub fn names(&self) -> impl Iterator<Item = &PackageName> {
        self.by_name.keys()
    }

    /// All versions of `name`, ascending.
    pub fn versions_of(&self, name: &PackageName) -> &[PackageId] {
        self.by_name.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn latest(&self, name: &PackageName) -> Option<&PackageId> {
        self.versions_of(name).last()
    }

    pub fn satisfies(&self, atom: &Atom, candidate: &PackageId) -> bool {
        self.get(candidate).is_some_and(|p| satisfies(atom, p))
    }

    /// Every package satisfying `atom`, in id order.
    pub fn satisfiers(&self, atom: &Atom) -> Vec<&PackageId> {
        let mut out: BTreeSet<&PackageId> = self
            .versions_of(&atom.name)
            .iter()
            .filter(|id| admits(atom.constraint.as_ref(), &id.version))
            .collect();
        if let Some(provs) = self.providers.get(&atom.name) {
            for id in provs {
                if self.packages[id].rel.provides.iter().any(|p| p.satisfies(atom)) {
                    out.insert(id);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Pairs `(a, b)` with `a < b` that may not be installed together.
    pub fn conflict_pairs(&self) -> &BTreeMap<(PackageId, PackageId), ConflictReason> {
        &self.conflicts
    }

    pub fn conflict_between(&self, a: &PackageId, b: &PackageId) -> Option<&ConflictReason> {
        if a < b {
            self.conflicts.get(&(a.clone(), b.clone()))
        } else {
            self.conflicts.get(&(b.clone(), a.clone()))
        }
    }

    /// Serializes back to repository metadata.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.packages.values().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_package(&mut out, p);
        }
        out
    }
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(sep)
}

fn write_package(out: &mut String, p: &Package) {
    use std::fmt::Write;
    let _ = writeln!(out, "Package: {}", p.id.name);
    let _ = writeln!(out, "Version: {}", p.id.version);
    if !p.maintainer.is_empty() {
        let _ = writeln!(out, "Maintainer: {}", p.maintainer);
    }
    if p.size_kb != 0 {
        let _ = writeln!(out, "Size: {}", p.size_kb);
    }
    if !p.rel.depends.is_empty() {
        let clauses: Vec<String> = p.rel.depends.iter().map(format_clause).collect();
        let _ = writeln!(out, "Depends: {}", clauses.join(", "));
    }
    if !p.rel.conflicts.is_empty() {
        let _ = writeln!(out, "Conflicts: {}", join(&p.rel.conflicts, ", "));
    }
    if !p.rel.provides.is_empty() {
        let _ = writeln!(out, "Provides: {}", join(&p.rel.provides, ", "));
    }
    if !p.files.is_empty() {
        let _ = writeln!(out, "Files: {}", join(&p.files, ", "));
    }
    if !p.conffiles.is_empty() {
        let _ = writeln!(out, "Conffiles: {}", join(&p.conffiles, ", "));
    }
    if !p.conffile_syntax.is_empty() {
        let hints: Vec<String> = p
            .conffile_syntax
            .iter()
            .map(|(path, s)| format!("{path}={}", s.as_str()))
            .collect();
        let _ = writeln!(out, "Conffile-Syntax: {}", hints.join(", "));
    }
    for (hook, path) in &p.scripts {
        let _ = writeln!(out, "{}: {}", hook.field(), path);
    }
}

fn parse_paths(s: &str) -> Result<Vec<RelPath>, UniverseError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(RelPath::parse)
        .collect()
}

fn package_from_stanza(st: &Stanza) -> Result<Package, UniverseError> {
    let required = |key: &'static str| {
        st.get(key)
            .ok_or(UniverseError::MissingField { line: st.line, key })
    };
    let name_f = required("Package")?;
    let ver_f = required("Version")?;
    let name = PackageName::parse(&name_f.value).map_err(|e| e.at(name_f.line))?;
    let version = Version::parse(&ver_f.value).map_err(|e| e.at(ver_f.line))?;
    let mut p = Package::new(PackageId::new(name, version));

    for f in &st.fields {
        let at = |e: UniverseError| e.at(f.line);
        match f.key.to_ascii_lowercase().as_str() {
            "package" | "version" => {}
            "depends" => p.rel.depends = parse_depends(&f.value).map_err(at)?,
            "conflicts" => p.rel.conflicts = parse_atom_list(&f.value).map_err(at)?,
            "provides" => p.rel.provides = parse_provides(&f.value).map_err(at)?,
            "size" => {
                p.size_kb = f.value.parse().map_err(|_| {
                    at(UniverseError::Invalid(format!("bad Size {:?}", f.value)))
                })?
            }
            "maintainer" => p.maintainer = f.value.clone(),
            "files" => p.files = parse_paths(&f.value).map_err(at)?,
            "conffiles" => p.conffiles = parse_paths(&f.value).map_err(at)?,
            "conffile-syntax" => {
                for hint in f.value.split(',').map(str::trim).filter(|h| !h.is_empty()) {
                    let (path, syntax) = hint.split_once('=').ok_or_else(|| {
                        at(UniverseError::Invalid(format!(
                            "expected path=syntax, got {hint:?}"
                        )))
                    })?;
                    p.conffile_syntax.insert(
                        RelPath::parse(path.trim()).map_err(at)?,
                        ConfSyntax::parse(syntax).map_err(at)?,
                    );
                }
            }
            key => {
                if let Some(hook) = Hook::ALL.into_iter().find(|h| h.as_str() == key) {
                    p.scripts.insert(hook, RelPath::parse(&f.value).map_err(at)?);
                }
                // other fields are carried by real archives but unused here
            }
        }
    }
    p.validate().map_err(|e| e.at(st.line))?;
    Ok(p)
}

/// Parses repository metadata into a universe.
pub fn parse_universe(text: &str) -> Result<Universe, UniverseError> {
    let mut map = BTreeMap::new();
    for st in parse_stanzas(text)? {
        let p = package_from_stanza(&st)?;
        if map.contains_key(&p.id) {
            return Err(UniverseError::DuplicatePackage {
                line: st.line,
                id: p.id,
            });
        }
        map.insert(p.id.clone(), p);
    }
    Ok(Universe::index(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const ATERM: &str = "\
Package: aterm
Version: 1.0.1-4
Size: 340
Depends: libafterimage0

Package: libafterimage0
Version: 2.2.8-2
Size: 46
";

    fn id(s: &str) -> PackageId {
        PackageId::parse(s).unwrap()
    }

    #[test]
    fn parses_aterm_fixture() {
        let u = parse_universe(ATERM).unwrap();
        assert_eq!(u.len(), 2);
        let aterm = u.get(&id("aterm 1.0.1-4")).unwrap();
        assert_eq!(aterm.rel.depends.len(), 1);
        let clauses: usize = u.packages().map(|p| p.rel.depends.len()).sum();
        assert_eq!(clauses, 1);
        let lib = u.get(&id("libafterimage0 2.2.8-2")).unwrap();
        assert!(satisfies(&aterm.rel.depends[0][0], lib));
    }

    #[test]
    fn empty_universe() {
        assert!(parse_universe("").unwrap().is_empty());
    }

    #[test]
    fn provider_index_matches_rebuild() {
        let text = "Package: exim\nVersion: 4.92\nProvides: mail-agent\n\n\
                    Package: postfix\nVersion: 3.4\nProvides: mail-agent (= 1.0), smtpd\n\n\
                    Package: mutt\nVersion: 1.10\nDepends: mail-agent\n";
        let u = parse_universe(text).unwrap();
        let ma = PackageName::parse("mail-agent").unwrap();
        let expected: BTreeSet<PackageId> = [id("exim 4.92"), id("postfix 3.4")].into();
        assert_eq!(u.provider_index()[&ma], expected);
        assert_eq!(u.provider_index(), &Universe::build_provider_index(u.packages()));

        let atom = Atom::parse("mail-agent").unwrap();
        let exim = u.get(&id("exim 4.92")).unwrap();
        assert!(satisfies(&atom, exim));
        // oracle: scan the index by hand
        let via_index: Vec<&PackageId> = u.provider_index()[&ma].iter().collect();
        assert_eq!(u.satisfiers(&atom), via_index);

        let versioned = Atom::parse("mail-agent (>= 1)").unwrap();
        assert_eq!(u.satisfiers(&versioned), vec![&id("postfix 3.4")]);
    }

    #[test]
    fn satisfies_versions() {
        let u = parse_universe("Package: foo\nVersion: 1.0\n").unwrap();
        let foo = u.get(&id("foo 1.0")).unwrap();
        assert!(!satisfies(&Atom::parse("foo (>= 2)").unwrap(), foo));
        assert!(satisfies(&Atom::parse("foo (<< 2)").unwrap(), foo));
        assert!(satisfies(&Atom::parse("foo").unwrap(), foo));
    }

    #[test]
    fn errors() {
        let dup = "Package: a\nVersion: 1.0\n\nPackage: a\nVersion: 1-0\n";
        assert!(matches!(
            parse_universe(dup),
            Err(UniverseError::DuplicatePackage { line: 4, .. })
        ));
        let bad_ver = "Package: a\nVersion: 1..0\n";
        assert!(matches!(
            parse_universe(bad_ver),
            Err(UniverseError::AtLine { line: 2, .. })
        ));
        let bad_dep = "Package: a\nVersion: 1\nDepends: b (> 1)\n";
        assert!(matches!(
            parse_universe(bad_dep),
            Err(UniverseError::AtLine { line: 3, .. })
        ));
        let missing = "Package: a\n";
        assert!(matches!(
            parse_universe(missing),
            Err(UniverseError::MissingField { key: "Version", .. })
        ));
        let conf = "Package: a\nVersion: 1\nFiles: x\nConffiles: y\n";
        assert!(parse_universe(conf).is_err());
        let internal = "Package: a\nVersion: 1\nFiles: .pkgdb/status\n";
        assert!(parse_universe(internal).is_err());
    }

    #[test]
    fn self_conflicts_dropped() {
        let u = parse_universe(
            "Package: a\nVersion: 1\nConflicts: a, feat\nProvides: feat\n\n\
             Package: b\nVersion: 1\nProvides: feat\n",
        )
        .unwrap();
        let a = u.get(&id("a 1")).unwrap();
        assert_eq!(a.rel.conflicts.len(), 1);
        assert!(u.conflict_between(&id("a 1"), &id("b 1")).is_some());
        assert_eq!(u.conflict_pairs().len(), 1);
    }

    #[test]
    fn implicit_conflicts() {
        let u = parse_universe(
            "Package: a\nVersion: 1\nFiles: usr/bin/x\n\n\
             Package: a\nVersion: 2\nFiles: usr/bin/x\n\n\
             Package: b\nVersion: 1\nFiles: usr/bin/x\n",
        )
        .unwrap();
        assert_eq!(
            u.conflict_between(&id("a 1"), &id("a 2")),
            Some(&ConflictReason::SameName)
        );
        assert!(matches!(
            u.conflict_between(&id("b 1"), &id("a 2")),
            Some(ConflictReason::SharedFile(_))
        ));
    }

    #[test]
    fn round_trip_fixture() {
        let text = "Package: a\nVersion: 1.0-1\nMaintainer: Jo <jo@example.org>\nSize: 12\n\
                    Depends: b (>= 2) | c, d\nConflicts: e (<< 1)\nProvides: f (= 3)\n\
                    Files: etc/a.conf, usr/bin/a\nConffiles: etc/a.conf\n\
                    Conffile-Syntax: etc/a.conf=keyvalue\nPostinst: scripts/postinst\n";
        let u = parse_universe(text).unwrap();
        let again = parse_universe(&u.to_text()).unwrap();
        assert_eq!(u, again);
    }
}
