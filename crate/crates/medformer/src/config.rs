//! A deliberately small config-text format: indentation-nested mappings,
//! block sequences, and plain scalars — the YAML subset the project's config
//! files actually use.
//!
//! Supported: `key: value`, `key:` followed by a deeper-indented block,
//! `- item` scalar sequence entries, `- key: value` mapping entries whose
//! remaining fields align under the first key, full-line `#` comments, and
//! blank lines. Not supported (rejected with a line number): tabs, flow
//! style (`[..]`/`{..}`), anchors/aliases (`&`/`*`), and duplicate keys.
//! Scalars are kept as strings; consumers convert with the typed accessors,
//! which name the offending path in their errors.

use std::fmt::Write as _;

use thiserror::Error;

/// Errors from parsing or interpreting config text.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config field '{path}': {msg}")]
    Schema { path: String, msg: String },
    #[error("cannot read config file '{path}': {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

/// Parsed config tree. Mapping entries preserve file order.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Str(String),
    Map(Vec<(String, Value)>),
    Seq(Vec<Value>),
    /// A key with no value and no nested block (reads as an empty map or
    /// empty sequence, whichever the consumer expects).
    Empty,
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&[(String, Value)]> {
        match self {
            Value::Map(m) => Some(m),
            Value::Empty => Some(&[]),
            _ => None,
        }
    }

    pub fn as_seq(&self) -> Option<&[Value]> {
        match self {
            Value::Seq(s) => Some(s),
            Value::Empty => Some(&[]),
            _ => None,
        }
    }

    /// Look up a mapping entry by key.
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.as_map()?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    // ----- typed accessors; `path` only feeds error messages -----

    pub fn expect_map(&self, path: &str) -> Result<&[(String, Value)], ConfigError> {
        self.as_map()
            .ok_or_else(|| ConfigError::schema(path, "expected a mapping"))
    }

    pub fn expect_seq(&self, path: &str) -> Result<&[Value], ConfigError> {
        self.as_seq()
            .ok_or_else(|| ConfigError::schema(path, "expected a sequence"))
    }

    pub fn expect_str(&self, path: &str) -> Result<&str, ConfigError> {
        self.as_str()
            .ok_or_else(|| ConfigError::schema(path, "expected a scalar"))
    }

    pub fn expect_parsed<T: std::str::FromStr>(&self, path: &str) -> Result<T, ConfigError> {
        let s = self.expect_str(path)?;
        s.parse().map_err(|_| {
            ConfigError::schema(
                path,
                format!(
                    "cannot parse '{s}' as {}",
                    std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")
                ),
            )
        })
    }

    pub fn expect_bool(&self, path: &str) -> Result<bool, ConfigError> {
        match self.expect_str(path)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::schema(
                path,
                format!("expected true/false, got '{other}'"),
            )),
        }
    }
}

struct Line {
    no: usize,
    indent: usize,
    text: String,
}

fn err(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Parse {
        line,
        msg: msg.into(),
    }
}

fn lex(text: &str) -> Result<Vec<Line>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        if raw.contains('\t') {
            return Err(err(no, "tabs are not allowed; indent with spaces"));
        }
        let indent = raw.len() - raw.trim_start_matches(' ').len();
        let body = raw[indent..].trim_end();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        out.push(Line {
            no,
            indent,
            text: body.to_string(),
        });
    }
    Ok(out)
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn check_scalar(line: usize, s: &str) -> Result<String, ConfigError> {
    if s.starts_with('[') || s.starts_with('{') {
        return Err(err(line, "flow-style collections are not supported"));
    }
    if s.starts_with('&') || s.starts_with('*') {
        return Err(err(line, "anchors and aliases are not supported"));
    }
    // Strip one layer of matching quotes.
    let bytes = s.as_bytes();
    if s.len() >= 2
        && (bytes[0] == b'"' || bytes[0] == b'\'')
        && bytes[s.len() - 1] == bytes[0]
    {
        return Ok(s[1..s.len() - 1].to_string());
    }
    Ok(s.to_string())
}

/// Split `key: value` / `key:`; returns (key, rest-after-colon).
fn split_key(line: &Line) -> Result<(String, String), ConfigError> {
    let Some(colon) = line.text.find(':') else {
        return Err(err(line.no, format!("expected 'key:' in '{}'", line.text)));
    };
    let key = line.text[..colon].trim_end();
    if !valid_key(key) {
        return Err(err(line.no, format!("invalid key '{key}'")));
    }
    let rest = line.text[colon + 1..].trim();
    if !rest.is_empty() && !line.text[colon + 1..].starts_with(' ') {
        return Err(err(line.no, "':' must be followed by a space or end of line"));
    }
    Ok((key.to_string(), rest.to_string()))
}

struct Parser {
    lines: Vec<Line>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Line> {
        self.lines.get(self.pos)
    }

    fn block(&mut self, indent: usize) -> Result<Value, ConfigError> {
        let Some(first) = self.peek() else {
            return Ok(Value::Empty);
        };
        if first.text.starts_with("- ") || first.text == "-" {
            self.seq(indent)
        } else {
            self.map(indent)
        }
    }

    fn map(&mut self, indent: usize) -> Result<Value, ConfigError> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(line.no, "unexpected indentation"));
            }
            if line.text.starts_with("- ") || line.text == "-" {
                return Err(err(line.no, "sequence item in a mapping block"));
            }
            let no = line.no;
            let (key, rest) = split_key(line)?;
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(err(no, format!("duplicate key '{key}'")));
            }
            self.pos += 1;
            let value = if rest.is_empty() {
                match self.peek() {
                    Some(next) if next.indent > indent => {
                        let child = next.indent;
                        self.block(child)?
                    }
                    _ => Value::Empty,
                }
            } else {
                Value::Str(check_scalar(no, &rest)?)
            };
            entries.push((key, value));
        }
        Ok(Value::Map(entries))
    }

    fn seq(&mut self, indent: usize) -> Result<Value, ConfigError> {
        let mut items = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(line.no, "unexpected indentation"));
            }
            if !line.text.starts_with("- ") {
                if line.text == "-" {
                    return Err(err(line.no, "empty sequence item"));
                }
                break;
            }
            let no = line.no;
            let rest = line.text[2..].trim_start().to_string();
            if rest.is_empty() {
                return Err(err(no, "empty sequence item"));
            }
            let extra = line.text.len() - rest.len(); // "- " plus any padding
            if looks_like_mapping(&rest) {
                // Rewrite the item head as a mapping line at its own column
                // and let the map parser pick up the aligned fields below.
                let item_indent = indent + extra;
                self.lines[self.pos] = Line {
                    no,
                    indent: item_indent,
                    text: rest,
                };
                items.push(self.map(item_indent)?);
            } else {
                self.pos += 1;
                items.push(Value::Str(check_scalar(no, &rest)?));
            }
        }
        Ok(Value::Seq(items))
    }
}

fn looks_like_mapping(s: &str) -> bool {
    match s.find(':') {
        Some(i) => s[i + 1..].is_empty() || s[i + 1..].starts_with(' '),
        None => false,
    }
}

/// Parse a config document. The top level must be a mapping.
pub fn parse(text: &str) -> Result<Value, ConfigError> {
    let lines = lex(text)?;
    if lines.is_empty() {
        return Ok(Value::Map(Vec::new()));
    }
    let base = lines[0].indent;
    let first_no = lines[0].no;
    let mut parser = Parser { lines, pos: 0 };
    let v = parser.map(base)?;
    if let Some(line) = parser.peek() {
        return Err(err(line.no, "unexpected dedent below the document root"));
    }
    if base != 0 {
        return Err(err(first_no, "document root must not be indented"));
    }
    Ok(v)
}

fn needs_quotes(s: &str) -> bool {
    s.is_empty()
        || s.contains(':')
        || s.contains('#')
        || s.starts_with(['[', '{', '&', '*', '-', '\'', '"', ' '])
        || s.ends_with(' ')
}

fn emit_scalar(s: &str) -> String {
    if needs_quotes(s) {
        format!("\"{s}\"")
    } else {
        s.to_string()
    }
}

fn emit(v: &Value, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match v {
        Value::Map(entries) => {
            for (k, child) in entries {
                match child {
                    Value::Str(s) => {
                        let _ = writeln!(out, "{pad}{k}: {}", emit_scalar(s));
                    }
                    Value::Empty => {
                        let _ = writeln!(out, "{pad}{k}:");
                    }
                    _ => {
                        let _ = writeln!(out, "{pad}{k}:");
                        emit(child, indent + 1, out);
                    }
                }
            }
        }
        Value::Seq(items) => {
            for item in items {
                match item {
                    Value::Str(s) => {
                        let _ = writeln!(out, "{pad}- {}", emit_scalar(s));
                    }
                    Value::Map(entries) if !entries.is_empty() => {
                        let mut body = String::new();
                        emit(item, 0, &mut body);
                        for (i, line) in body.lines().enumerate() {
                            if i == 0 {
                                let _ = writeln!(out, "{pad}- {line}");
                            } else {
                                let _ = writeln!(out, "{pad}  {line}");
                            }
                        }
                    }
                    _ => {
                        // Empty maps/seqs inside sequences do not occur in
                        // our configs; emit a placeholder scalar.
                        let _ = writeln!(out, "{pad}- \"\"");
                    }
                }
            }
        }
        Value::Str(s) => {
            let _ = writeln!(out, "{pad}{}", emit_scalar(s));
        }
        Value::Empty => {}
    }
}

/// Serialize a tree to canonical text (2-space indents, stable field order).
/// `parse(to_text(v))` reproduces `v` up to `Empty`/empty-collection
/// coercion.
pub fn to_text(v: &Value) -> String {
    let mut out = String::new();
    emit(v, 0, &mut out);
    out
}

/// Parse a config file from disk.
pub fn parse_file(path: &std::path::Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scalars_nesting_and_sequences() {
        let text = "\
name: run1
model:
  hidden_dim: 32
  heads: 4
tasks:
  - name: a
    classes: 2
  - name: b
seeds:
  - 1
  - 2
";
        let v = parse(text).unwrap();
        assert_eq!(v.get("name").unwrap().as_str(), Some("run1"));
        let model = v.get("model").unwrap();
        assert_eq!(model.get("hidden_dim").unwrap().as_str(), Some("32"));
        let tasks = v.get("tasks").unwrap().as_seq().unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].get("classes").unwrap().as_str(), Some("2"));
        assert_eq!(tasks[1].get("name").unwrap().as_str(), Some("b"));
        let seeds = v.get("seeds").unwrap().as_seq().unwrap();
        assert_eq!(seeds[0].as_str(), Some("1"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let v = parse("# header\n\na: 1\n# tail\nb: 2\n").unwrap();
        assert_eq!(v.get("a").unwrap().as_str(), Some("1"));
        assert_eq!(v.get("b").unwrap().as_str(), Some("2"));
    }

    #[test]
    fn duplicate_keys_are_rejected_with_the_line() {
        let e = parse("a: 1\nb: 2\na: 3\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("duplicate key 'a'"), "{msg}");
    }

    #[test]
    fn tabs_flow_style_and_anchors_are_rejected() {
        assert!(parse("a:\n\tb: 1\n").unwrap_err().to_string().contains("tabs"));
        assert!(parse("a: [1, 2]\n")
            .unwrap_err()
            .to_string()
            .contains("flow-style"));
        assert!(parse("a: {b: 1}\n")
            .unwrap_err()
            .to_string()
            .contains("flow-style"));
        assert!(parse("a: &anchor\n")
            .unwrap_err()
            .to_string()
            .contains("anchors"));
    }

    #[test]
    fn bare_key_reads_as_empty_collection() {
        let v = parse("empty_list:\nafter: 1\n").unwrap();
        assert_eq!(v.get("empty_list").unwrap().as_seq(), Some(&[][..]));
        assert_eq!(v.get("empty_list").unwrap().as_map(), Some(&[][..]));
    }

    #[test]
    fn stray_indentation_is_an_error() {
        let e = parse("a: 1\n    b: 2\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
    }

    #[test]
    fn quoted_scalars_keep_special_characters() {
        let v = parse("path: \"runs: 2026\"\n").unwrap();
        assert_eq!(v.get("path").unwrap().as_str(), Some("runs: 2026"));
    }

    #[test]
    fn typed_accessors_name_the_path() {
        let v = parse("lr: fast\n").unwrap();
        let e = v.get("lr").unwrap().expect_parsed::<f64>("train.lr").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("train.lr"), "{msg}");
        assert!(msg.contains("fast"), "{msg}");
    }

    #[test]
    fn canonical_round_trip_is_stable() {
        let text = "\
model:
  hidden_dim: 32
tasks:
  - name: a
    kind: synthetic
  - name: b
seed: 7
";
        let v = parse(text).unwrap();
        let emitted = to_text(&v);
        let v2 = parse(&emitted).unwrap();
        assert_eq!(to_text(&v2), emitted);
        assert_eq!(v2, v);
    }
}
