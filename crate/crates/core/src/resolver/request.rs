use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::universe::{Atom, PackageName, UniverseError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("empty request")]
    Empty,
    #[error("request atom {index}: {message}")]
    Syntax { index: usize, message: String },
    #[error("request atom {index}: {source}")]
    Atom {
        index: usize,
        #[source]
        source: UniverseError,
    },
    #[error("contradictory request: {name} is both {first} and {second}")]
    Contradictory {
        name: PackageName,
        first: Action,
        second: Action,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Install,
    Remove,
    Upgrade,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Install => "install",
            Action::Remove => "remove",
            Action::Upgrade => "upgrade",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestAtom {
    pub action: Action,
    pub atom: Atom,
}

impl RequestAtom {
    pub fn new(action: Action, atom: Atom) -> Self {
        RequestAtom { action, atom }
    }

    pub fn name(&self) -> &PackageName {
        &self.atom.name
    }
}

impl fmt::Display for RequestAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.action, self.atom)
    }
}

/// A conjunction of install/remove/upgrade atoms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Request {
    atoms: Vec<RequestAtom>,
}

impl Request {
    /// The request that asks for nothing. Only reachable programmatically;
    /// the textual grammar needs at least one atom.
    pub fn empty() -> Self {
        Request::default()
    }

    pub fn new(atoms: Vec<RequestAtom>) -> Result<Self, RequestError> {
        let mut seen: BTreeMap<&PackageName, Action> = BTreeMap::new();
        for a in &atoms {
            if let Some(&prev) = seen.get(&a.atom.name) {
                let clash = (prev == Action::Remove) != (a.action == Action::Remove);
                if clash {
                    return Err(RequestError::Contradictory {
                        name: a.atom.name.clone(),
                        first: prev,
                        second: a.action,
                    });
                }
            } else {
                seen.insert(&a.atom.name, a.action);
            }
        }
        Ok(Request { atoms })
    }

    pub fn install(atom: Atom) -> Self {
        Request {
            atoms: vec![RequestAtom::new(Action::Install, atom)],
        }
    }

    pub fn atoms(&self) -> &[RequestAtom] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// True if `name` is mentioned by an install or upgrade atom.
    pub fn mentions(&self, name: &PackageName) -> bool {
        self.atoms
            .iter()
            .any(|a| a.action != Action::Remove && &a.atom.name == name)
    }
}

impl fmt::Display for Request {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Parses `atom (',' atom)*` with `atom := action name ['(' op version ')']`.
pub fn parse_request(text: &str) -> Result<Request, RequestError> {
    if text.trim().is_empty() {
        return Err(RequestError::Empty);
    }
    let mut atoms = Vec::new();
    for (index, part) in text.split(',').enumerate() {
        let part = part.trim();
        let (verb, rest) = part
            .split_once(char::is_whitespace)
            .ok_or_else(|| RequestError::Syntax {
                index,
                message: format!("expected `<action> <package>`, got {part:?}"),
            })?;
        let action = match verb {
            "install" => Action::Install,
            "remove" => Action::Remove,
            "upgrade" => Action::Upgrade,
            other => {
                return Err(RequestError::Syntax {
                    index,
                    message: format!("unknown action {other:?}"),
                })
            }
        };
        let atom = Atom::parse(rest).map_err(|source| RequestError::Atom { index, source })?;
        atoms.push(RequestAtom::new(action, atom));
    }
    Request::new(atoms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn install_aterm() {
        let r = parse_request("install aterm").unwrap();
        assert_eq!(r.atoms().len(), 1);
        assert_eq!(r.atoms()[0].action, Action::Install);
        assert_eq!(r.atoms()[0].atom.name.as_str(), "aterm");
        assert!(r.atoms()[0].atom.constraint.is_none());
    }

    #[test]
    fn two_atoms() {
        let r = parse_request("remove aterm, install bash (>= 4.0)").unwrap();
        assert_eq!(r.atoms().len(), 2);
        assert_eq!(r.to_string(), "remove aterm, install bash (>= 4.0)");
        assert_eq!(parse_request(&r.to_string()).unwrap(), r);
    }

    #[test]
    fn rejects() {
        assert!(matches!(
            parse_request("install x, remove x"),
            Err(RequestError::Contradictory { .. })
        ));
        assert!(matches!(
            parse_request("upgrade x, remove x (<< 2)"),
            Err(RequestError::Contradictory { .. })
        ));
        assert!(parse_request("install x, upgrade x").is_ok());
        assert!(matches!(parse_request(""), Err(RequestError::Empty)));
        assert!(matches!(parse_request("purge x"), Err(RequestError::Syntax { .. })));
        assert!(matches!(parse_request("install"), Err(RequestError::Syntax { .. })));
        assert!(matches!(parse_request("install x,"), Err(RequestError::Syntax { .. })));
        assert!(matches!(
            parse_request("install X"),
            Err(RequestError::Atom { index: 0, .. })
        ));
    }
}
