use thiserror::Error;

use crate::universe::RelPath;

use super::{ScriptProgram, Step};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

/// Parses a script. Paths are validated with the substitution variables
/// replaced by a placeholder, so `etc/$PKG` is accepted but `../x` is not.
pub fn parse_script(text: &str) -> Result<ScriptProgram, ParseError> {
    let mut p = ScriptProgram::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| ParseError { line: i + 1, message };
        let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim_start();
        let step = match kw {
            "mkdir" => Step::Mkdir(path(words::<1>(kw, rest).map_err(err)?[0]).map_err(err)?),
            "remove" => Step::Remove(path(words::<1>(kw, rest).map_err(err)?[0]).map_err(err)?),
            "copy" => {
                let [a, b] = words::<2>(kw, rest).map_err(err)?;
                Step::Copy(path(a).map_err(err)?, path(b).map_err(err)?)
            }
            "append" => {
                let (f, line) = head_and_rest(kw, rest).map_err(err)?;
                Step::Append(path(f).map_err(err)?, line.to_string())
            }
            "setkey" => {
                let (f, tail) = head_and_rest(kw, rest).map_err(err)?;
                let (k, v) = head_and_rest(kw, tail).map_err(err)?;
                Step::SetKey(path(f).map_err(err)?, key(k).map_err(err)?, v.to_string())
            }
            "delkey" => {
                let [f, k] = words::<2>(kw, rest).map_err(err)?;
                Step::DelKey(path(f).map_err(err)?, key(k).map_err(err)?)
            }
            "update-cache" => {
                let [c, g] = words::<2>(kw, rest).map_err(err)?;
                glob::Pattern::new(g).map_err(|e| err(format!("bad glob {g:?}: {e}")))?;
                Step::UpdateCache(path(c).map_err(err)?, g.to_string())
            }
            "adduser" => Step::AddUser(words::<1>(kw, rest).map_err(err)?[0].to_string()),
            "deluser" => Step::DelUser(words::<1>(kw, rest).map_err(err)?[0].to_string()),
            "fail" => {
                if rest.is_empty() {
                    return Err(err("fail needs a message".into()));
                }
                Step::Fail(rest.to_string())
            }
            other => return Err(err(format!("unknown primitive {other:?}"))),
        };
        p.steps.push(step);
        p.lines.push(i + 1);
    }
    Ok(p)
}

fn words<'a, const N: usize>(kw: &str, rest: &'a str) -> Result<[&'a str; N], String> {
    let ws: Vec<&str> = rest.split_whitespace().collect();
    ws.try_into()
        .map_err(|ws: Vec<&str>| format!("{kw} takes {N} argument(s), got {}", ws.len()))
}

/// First word and the non-empty remainder of the line.
fn head_and_rest<'a>(kw: &str, rest: &'a str) -> Result<(&'a str, &'a str), String> {
    match rest.split_once(char::is_whitespace) {
        Some((h, t)) if !t.trim().is_empty() => Ok((h, t.trim())),
        _ => Err(format!("{kw}: missing argument")),
    }
}

fn path(s: &str) -> Result<String, String> {
    let probe = s.replace("$PKG", "x").replace("$OLD", "x").replace("$NEW", "x");
    let p = RelPath::parse(&probe).map_err(|e| format!("bad path {s:?}: {e}"))?;
    if p.is_internal() {
        return Err(format!("{s} is reserved for the engine"));
    }
    Ok(s.to_string())
}

fn key(s: &str) -> Result<String, String> {
    if s.contains('=') {
        return Err(format!("bad key {s:?}"));
    }
    Ok(s.to_string())
}
