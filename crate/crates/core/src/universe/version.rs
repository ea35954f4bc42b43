use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use super::UniverseError;

/// A package version.
///
/// Versions are split on `.` and `-` into segments. Purely numeric segments
/// compare as integers, other segments compare bytewise, and a numeric
/// segment sorts before an alphanumeric one. A missing segment sorts before
/// any present segment, so `1.0 < 1.0.1`.
///
/// Equality follows the ordering: `1.01` and `1.1` are the same version even
/// though their raw strings differ.
#[derive(Clone)]
pub struct Version {
    raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment<'a> {
    /// Digits with leading zeros stripped (`"0"` becomes `""`).
    Numeric(&'a str),
    Alpha(&'a str),
}

impl<'a> Segment<'a> {
    fn classify(s: &'a str) -> Self {
        if s.bytes().all(|b| b.is_ascii_digit()) {
            Segment::Numeric(s.trim_start_matches('0'))
        } else {
            Segment::Alpha(s)
        }
    }
}

impl Ord for Segment<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Segment::Numeric(a), Segment::Numeric(b)) => {
                a.len().cmp(&b.len()).then_with(|| a.cmp(b))
            }
            (Segment::Numeric(_), Segment::Alpha(_)) => Ordering::Less,
            (Segment::Alpha(_), Segment::Numeric(_)) => Ordering::Greater,
            (Segment::Alpha(a), Segment::Alpha(b)) => a.as_bytes().cmp(b.as_bytes()),
        }
    }
}

impl PartialOrd for Segment<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn valid_segment_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'+'
}

impl Version {
    pub fn parse(raw: &str) -> Result<Self, UniverseError> {
        let bad = || UniverseError::BadVersion(raw.to_string());
        if raw.is_empty() {
            return Err(bad());
        }
        for seg in raw.split(['.', '-']) {
            if seg.is_empty() || !seg.bytes().all(valid_segment_byte) {
                return Err(bad());
            }
        }
        Ok(Version {
            raw: raw.to_string(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    fn segments(&self) -> impl Iterator<Item = Segment<'_>> {
        self.raw.split(['.', '-']).map(Segment::classify)
    }
}

/// Segment-wise comparison of two versions.
pub fn compare_versions(a: &Version, b: &Version) -> Ordering {
    let mut left = a.segments();
    let mut right = b.segments();
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => match x.cmp(&y) {
                Ordering::Equal => continue,
                ord => return ord,
            },
        }
    }
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        compare_versions(self, other)
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Version {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Version {}

impl Hash for Version {
    fn hash<H: Hasher>(&self, state: &mut H) {
        for seg in self.segments() {
            match seg {
                Segment::Numeric(d) => {
                    0u8.hash(state);
                    d.hash(state);
                }
                Segment::Alpha(s) => {
                    1u8.hash(state);
                    s.hash(state);
                }
            }
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl fmt::Debug for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Version({})", self.raw)
    }
}

impl FromStr for Version {
    type Err = UniverseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Version::parse(s)
    }
}
