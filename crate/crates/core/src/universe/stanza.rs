//! Blank-line separated `Key: value` stanzas.
//!
//! Lines starting with whitespace continue the previous field's value, and
//! lines starting with `#` are comments.

use super::UniverseError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stanza {
    /// 1-based line of the first field.
    pub line: usize,
    pub fields: Vec<Field>,
}

impl Stanza {
    pub fn get(&self, key: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.key.eq_ignore_ascii_case(key))
    }

    pub fn value(&self, key: &str) -> Option<&str> {
        self.get(key).map(|f| f.value.as_str())
    }
}

pub fn parse_stanzas(text: &str) -> Result<Vec<Stanza>, UniverseError> {
    let mut out = Vec::new();
    let mut current: Option<Stanza> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            if let Some(s) = current.take() {
                out.push(s);
            }
            continue;
        }
        if raw.starts_with('#') {
            continue;
        }
        if raw.starts_with([' ', '\t']) {
            let field = current
                .as_mut()
                .and_then(|s| s.fields.last_mut())
                .ok_or_else(|| UniverseError::Syntax {
                    line,
                    message: "continuation line without a field".into(),
                })?;
            if !field.value.is_empty() {
                field.value.push(' ');
            }
            field.value.push_str(raw.trim());
            continue;
        }
        let (key, value) = raw.split_once(':').ok_or_else(|| UniverseError::Syntax {
            line,
            message: format!("expected `Key: value`, got {raw:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(UniverseError::Syntax {
                line,
                message: format!("invalid field name {key:?}"),
            });
        }
        let stanza = current.get_or_insert_with(|| Stanza {
            line,
            fields: Vec::new(),
        });
        if stanza.get(key).is_some() {
            return Err(UniverseError::Syntax {
                line,
                message: format!("duplicate field {key}"),
            });
        }
        stanza.fields.push(Field {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    if let Some(s) = current.take() {
        out.push(s);
    }
    Ok(out)
}
