//! Line-oriented `kind key=value key=(a,b,c)` records used by the scene and
//! primitive file formats.

use nalgebra::Vector3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Value {
    Number(f64),
    Tuple(Vec<f64>),
}

#[derive(Debug, Clone)]
pub(crate) struct Record {
    pub line: usize,
    pub kind: String,
    pub fields: Vec<(String, Value)>,
}

impl Record {
    fn find(&self, keys: &[&str]) -> Option<&Value> {
        self.fields
            .iter()
            .find(|(k, _)| keys.iter().any(|key| k.eq_ignore_ascii_case(key)))
            .map(|(_, v)| v)
    }

    pub fn has(&self, keys: &[&str]) -> bool {
        self.find(keys).is_some()
    }

    pub fn number(&self, keys: &[&str]) -> Result<f64> {
        match self.find(keys) {
            Some(Value::Number(x)) => Ok(*x),
            Some(Value::Tuple(_)) => Err(Error::parse(self.line, format!("{} must be a scalar", keys[0]))),
            None => Err(Error::parse(self.line, format!("missing field {}", keys[0]))),
        }
    }

    pub fn opt_number(&self, keys: &[&str]) -> Result<Option<f64>> {
        if self.has(keys) {
            self.number(keys).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn tuple(&self, keys: &[&str], len: usize) -> Result<Vec<f64>> {
        match self.find(keys) {
            Some(Value::Tuple(v)) if v.len() == len => Ok(v.clone()),
            Some(Value::Tuple(v)) => Err(Error::parse(
                self.line,
                format!("{} expects {len} components, got {}", keys[0], v.len()),
            )),
            Some(Value::Number(_)) => Err(Error::parse(self.line, format!("{} must be a tuple", keys[0]))),
            None => Err(Error::parse(self.line, format!("missing field {}", keys[0]))),
        }
    }

    pub fn vector3(&self, keys: &[&str]) -> Result<Vector3<f64>> {
        let v = self.tuple(keys, 3)?;
        Ok(Vector3::new(v[0], v[1], v[2]))
    }
}

/// Parses every non-empty, non-comment line. Accepts an optional `|`
/// separator between records on one line.
pub(crate) fn parse_records(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for chunk in line.split('|') {
            if chunk.trim().is_empty() {
                continue;
            }
            out.push(parse_record(chunk, idx + 1)?);
        }
    }
    Ok(out)
}

fn parse_record(chunk: &str, line: usize) -> Result<Record> {
    let tokens = tokenize(chunk, line)?;
    let mut iter = tokens.into_iter();
    let kind = iter
        .next()
        .ok_or_else(|| Error::parse(line, "empty record"))?;
    if kind.contains('=') {
        return Err(Error::parse(line, format!("record must start with a kind, got {kind:?}")));
    }
    let mut fields = Vec::new();
    for tok in iter {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected key=value, got {tok:?}")))?;
        fields.push((key.trim().to_string(), parse_value(value.trim(), line)?));
    }
    Ok(Record {
        line,
        kind: kind.to_ascii_lowercase(),
        fields,
    })
}

/// Splits on whitespace outside parentheses.
fn tokenize(chunk: &str, line: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut depth = 0i32;
    for c in chunk.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::parse(line, "unbalanced ')'"));
                }
                cur.push(c);
            }
            c if c.is_whitespace() && depth == 0 => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            c if c.is_whitespace() => {}
            _ => cur.push(c),
        }
    }
    if depth != 0 {
        return Err(Error::parse(line, "unbalanced '('"));
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    // Allow `key = value` with spaces around '='.
    let mut merged: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        if t == "=" && !merged.is_empty() && i + 1 < tokens.len() {
            let last = merged.pop().unwrap_or_default();
            merged.push(format!("{last}={}", tokens[i + 1]));
            i += 2;
        } else if t.ends_with('=') && i + 1 < tokens.len() && !tokens[i + 1].contains('=') {
            merged.push(format!("{t}{}", tokens[i + 1]));
            i += 2;
        } else if t.starts_with('=') && !merged.is_empty() {
            let last = merged.pop().unwrap_or_default();
            merged.push(format!("{last}{t}"));
            i += 1;
        } else {
            merged.push(t.clone());
            i += 1;
        }
    }
    Ok(merged)
}

fn parse_value(s: &str, line: usize) -> Result<Value> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::parse(line, format!("invalid number {:?}", t.trim())))
    };
    if let Some(inner) = s.strip_prefix('(') {
        let inner = inner
            .strip_suffix(')')
            .ok_or_else(|| Error::parse(line, format!("unterminated tuple {s:?}")))?;
        if inner.trim().is_empty() {
            return Ok(Value::Tuple(Vec::new()));
        }
        let v = inner.split(',').map(num).collect::<Result<Vec<_>>>()?;
        Ok(Value::Tuple(v))
    } else {
        Ok(Value::Number(num(s)?))
    }
}

/// Nine significant digits in scientific notation; parses back bit-exactly
/// to the same nine-digit decimal.
pub(crate) fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        // Normalize negative zero.
        return "0.00000000e0".to_string();
    }
    format!("{x:.8e}")
}

pub(crate) fn fmt_tuple(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
    format!("({})", parts.join(","))
}
