use std::collections::{BTreeMap, BTreeSet};

use super::{parse_stanzas, PackageId, PackageName, RelPath, Universe, UniverseError, Version};

/// The installed set and the files each installed package owns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Status {
    installed: BTreeSet<PackageId>,
    owned: BTreeMap<RelPath, PackageId>,
}

impl Status {
    pub fn empty() -> Self {
        Status::default()
    }

    /// Builds a status from ids, checking that each is in `universe`, that
    /// no name appears twice and that no path has two owners.
    pub fn build(
        universe: &Universe,
        ids: impl IntoIterator<Item = PackageId>,
    ) -> Result<Self, UniverseError> {
        let mut installed = BTreeSet::new();
        let mut names = BTreeSet::new();
        let mut owned = BTreeMap::new();
        for id in ids {
            let pkg = universe
                .get(&id)
                .ok_or_else(|| UniverseError::NotSubset(id.clone()))?;
            if installed.contains(&id) {
                continue;
            }
            if !names.insert(id.name.clone()) {
                return Err(UniverseError::TwoVersions(id.name));
            }
            for f in &pkg.files {
                if let Some(prev) = owned.insert(f.clone(), id.clone()) {
                    return Err(UniverseError::FileClash {
                        path: f.clone(),
                        first: prev,
                        second: id,
                    });
                }
            }
            installed.insert(id);
        }
        Ok(Status { installed, owned })
    }

    pub fn installed(&self) -> &BTreeSet<PackageId> {
        &self.installed
    }

    pub fn owned_files(&self) -> &BTreeMap<RelPath, PackageId> {
        &self.owned
    }

    pub fn contains(&self, id: &PackageId) -> bool {
        self.installed.contains(id)
    }

    pub fn len(&self) -> usize {
        self.installed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.installed.is_empty()
    }

    /// The installed version of `name`, if any.
    pub fn installed_version(&self, name: &PackageName) -> Option<&PackageId> {
        self.installed.iter().find(|id| &id.name == name)
    }

    pub fn names(&self) -> BTreeSet<&PackageName> {
        self.installed.iter().map(|id| &id.name).collect()
    }

    pub fn owner_of(&self, path: &RelPath) -> Option<&PackageId> {
        self.owned.get(path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, id) in self.installed.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("Package: {}\nVersion: {}\n", id.name, id.version));
        }
        out
    }
}

/// Parses a status file (stanzas with `Package` and `Version` only).
pub fn parse_status(text: &str, universe: &Universe) -> Result<Status, UniverseError> {
    let mut ids = Vec::new();
    for st in parse_stanzas(text)? {
        for f in &st.fields {
            if !f.key.eq_ignore_ascii_case("package") && !f.key.eq_ignore_ascii_case("version") {
                return Err(UniverseError::Syntax {
                    line: f.line,
                    message: format!("unexpected field {} in status file", f.key),
                });
            }
        }
        let name = st
            .get("Package")
            .ok_or(UniverseError::MissingField {
                line: st.line,
                key: "Package",
            })?;
        let version = st.get("Version").ok_or(UniverseError::MissingField {
            line: st.line,
            key: "Version",
        })?;
        let id = PackageId::new(
            PackageName::parse(&name.value).map_err(|e| e.at(name.line))?,
            Version::parse(&version.value).map_err(|e| e.at(version.line))?,
        );
        ids.push(id);
    }
    Status::build(universe, ids)
}
