use std::fmt;
use std::str::FromStr;

use super::{UniverseError, Version};

/// A package or feature name, `[a-z0-9][a-z0-9.+-]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PackageName(String);

impl PackageName {
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        let mut bytes = s.bytes();
        let first_ok = matches!(bytes.next(), Some(b) if b.is_ascii_lowercase() || b.is_ascii_digit());
        let rest_ok = bytes.all(|b| {
            b.is_ascii_lowercase() || b.is_ascii_digit() || matches!(b, b'.' | b'+' | b'-')
        });
        if first_ok && rest_ok {
            Ok(PackageName(s.to_string()))
        } else {
            Err(UniverseError::BadName(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PackageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for PackageName {
    type Err = UniverseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PackageName::parse(s)
    }
}

impl PartialEq<str> for PackageName {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

impl Op {
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        Ok(match s {
            "<<" => Op::Lt,
            "<=" => Op::Le,
            "=" => Op::Eq,
            ">=" => Op::Ge,
            ">>" => Op::Gt,
            other => return Err(UniverseError::BadConstraint(other.to_string())),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Lt => "<<",
            Op::Le => "<=",
            Op::Eq => "=",
            Op::Ge => ">=",
            Op::Gt => ">>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub op: Op,
    pub version: Version,
}

impl Constraint {
    pub fn admits(&self, v: &Version) -> bool {
        let ord = v.cmp(&self.version);
        match self.op {
            Op::Lt => ord.is_lt(),
            Op::Le => ord.is_le(),
            Op::Eq => ord.is_eq(),
            Op::Ge => ord.is_ge(),
            Op::Gt => ord.is_gt(),
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.op.as_str(), self.version)
    }
}

/// Admits `v` when there is no constraint.
pub fn admits(constraint: Option<&Constraint>, v: &Version) -> bool {
    constraint.is_none_or(|c| c.admits(v))
}

/// `name` or `name (op version)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub name: PackageName,
    pub constraint: Option<Constraint>,
}

impl Atom {
    pub fn unversioned(name: PackageName) -> Self {
        Atom {
            name,
            constraint: None,
        }
    }

    /// Parses `name` or `name (op version)`; surrounding whitespace ignored.
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        let s = s.trim();
        match s.find('(') {
            None => {
                if s.contains(')') {
                    return Err(UniverseError::BadConstraint(s.to_string()));
                }
                Ok(Atom::unversioned(PackageName::parse(s)?))
            }
            Some(open) => {
                let name = PackageName::parse(s[..open].trim())?;
                let inner = s[open + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| UniverseError::BadConstraint(s.to_string()))?;
                let constraint = parse_constraint(inner)?;
                Ok(Atom {
                    name,
                    constraint: Some(constraint),
                })
            }
        }
    }
}

fn parse_constraint(inner: &str) -> Result<Constraint, UniverseError> {
    let inner = inner.trim();
    let split = inner
        .find(|c: char| !matches!(c, '<' | '>' | '='))
        .ok_or_else(|| UniverseError::BadConstraint(inner.to_string()))?;
    let op = Op::parse(&inner[..split])?;
    let version = Version::parse(inner[split..].trim())?;
    Ok(Constraint { op, version })
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.constraint {
            None => write!(f, "{}", self.name),
            Some(c) => write!(f, "{} ({})", self.name, c),
        }
    }
}

/// One feature declared in `Provides:`, optionally pinned with `(= v)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Provide {
    pub feature: PackageName,
    pub version: Option<Version>,
}

impl Provide {
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        let atom = Atom::parse(s)?;
        match atom.constraint {
            None => Ok(Provide {
                feature: atom.name,
                version: None,
            }),
            Some(Constraint { op: Op::Eq, version }) => Ok(Provide {
                feature: atom.name,
                version: Some(version),
            }),
            Some(_) => Err(UniverseError::BadConstraint(format!(
                "provides may only use `=`: {s}"
            ))),
        }
    }

    /// Versioned provides satisfy any atom whose constraint admits the
    /// provided version; bare provides only satisfy unversioned atoms.
    pub fn satisfies(&self, atom: &Atom) -> bool {
        if self.feature != atom.name {
            return false;
        }
        match (&atom.constraint, &self.version) {
            (None, _) => true,
            (Some(c), Some(v)) => c.admits(v),
            (Some(_), None) => false,
        }
    }
}

impl fmt::Display for Provide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.version {
            None => write!(f, "{}", self.feature),
            Some(v) => write!(f, "{} (= {})", self.feature, v),
        }
    }
}

/// A disjunction of atoms; satisfied when any atom is.
pub type Clause = Vec<Atom>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Relationship {
    pub depends: Vec<Clause>,
    pub conflicts: Vec<Atom>,
    pub provides: Vec<Provide>,
}

/// Parses `clause (',' clause)*` where `clause := atom ('|' atom)*`.
pub fn parse_depends(s: &str) -> Result<Vec<Clause>, UniverseError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|clause| clause.split('|').map(Atom::parse).collect())
        .collect()
}

pub fn parse_atom_list(s: &str) -> Result<Vec<Atom>, UniverseError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(Atom::parse).collect()
}

pub fn parse_provides(s: &str) -> Result<Vec<Provide>, UniverseError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(Provide::parse).collect()
}

pub fn format_clause(clause: &Clause) -> String {
    clause
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" | ")
}

/// A normalized sandbox-relative path: no leading `/`, no empty, `.` or
/// `..` segments.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelPath(String);

impl RelPath {
    pub fn parse(s: &str) -> Result<Self, UniverseError> {
        let bad = || UniverseError::BadPath(s.to_string());
        if s.is_empty() || s.starts_with('/') || s.contains('\\') || s.contains('\0') {
            return Err(bad());
        }
        if s
            .split('/')
            .any(|seg| seg.is_empty() || seg == "." || seg == ".." || seg.trim() != seg)
        {
            return Err(bad());
        }
        Ok(RelPath(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parent(&self) -> Option<RelPath> {
        self.0.rfind('/').map(|i| RelPath(self.0[..i].to_string()))
    }

    /// Ancestors from the outermost directory inward, excluding self.
    pub fn ancestors(&self) -> Vec<RelPath> {
        self.0
            .match_indices('/')
            .map(|(i, _)| RelPath(self.0[..i].to_string()))
            .collect()
    }

    pub fn join(&self, child: &str) -> Result<RelPath, UniverseError> {
        RelPath::parse(&format!("{}/{}", self.0, child))
    }

    pub fn with_suffix(&self, suffix: &str) -> RelPath {
        RelPath(format!("{}{}", self.0, suffix))
    }

    /// True for paths under the engine's private `.pkgdb` directory.
    pub fn is_internal(&self) -> bool {
        self.0 == ".pkgdb" || self.0.starts_with(".pkgdb/")
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RelPath {
    type Err = UniverseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelPath::parse(s)
    }
}
