//! The fenced `meta` block grammar, shared by task files and skill files:
//! a code fence with the info string `meta`, holding `key: value` lines.
//!
//! The block must be the first non-blank content of the file. Keys are
//! `[A-Za-z0-9_-]+`; the value is everything after the first `:`, trimmed.
//! Blank lines inside the fence are allowed; anything else is malformed.

/// One `key: value` line with its 1-based line number in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct MetaSyntaxError {
    pub line: usize,
    pub reason: String,
}

/// Extract the leading meta block, if any. Returns the parsed entries and the
/// byte offset where the rest of the file begins (0 when no block exists).
pub(crate) fn split_meta_block(raw: &str) -> Result<(Vec<KvEntry>, usize), MetaSyntaxError> {
    let mut offset = 0usize;
    let mut line_no = 0usize;
    let mut lines = raw.split_inclusive('\n');

    // Skip leading blank lines.
    let open_line = loop {
        let Some(line) = lines.next() else {
            return Ok((Vec::new(), 0));
        };
        line_no += 1;
        if line.trim().is_empty() {
            offset += line.len();
            continue;
        }
        break line;
    };

    if open_line.trim_end() != "```meta" {
        return Ok((Vec::new(), 0));
    }
    let open_line_no = line_no;
    offset += open_line.len();

    let mut entries = Vec::new();
    for line in lines {
        line_no += 1;
        offset += line.len();
        let text = line.trim_end_matches(['\n', '\r']);
        if text.trim() == "```" {
            return Ok((entries, offset));
        }
        if text.trim().is_empty() {
            continue;
        }
        entries.push(parse_kv_line(text, line_no)?);
    }
    Err(MetaSyntaxError {
        line: open_line_no,
        reason: "meta block is never closed".to_string(),
    })
}

fn parse_kv_line(text: &str, line: usize) -> Result<KvEntry, MetaSyntaxError> {
    let Some((key, value)) = text.split_once(':') else {
        return Err(MetaSyntaxError {
            line,
            reason: format!("expected `key: value`, got {text:?}"),
        });
    };
    let key = key.trim();
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(MetaSyntaxError {
            line,
            reason: format!("invalid key {key:?}"),
        });
    }
    let value = value.trim();
    if value.is_empty() {
        return Err(MetaSyntaxError {
            line,
            reason: format!("key {key:?} has an empty value"),
        });
    }
    Ok(KvEntry {
        key: key.to_string(),
        value: value.to_string(),
        line,
    })
}

/// Parse a boolean value: exactly `true` or `false`.
pub(crate) fn parse_bool(entry: &KvEntry) -> Result<bool, MetaSyntaxError> {
    match entry.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(MetaSyntaxError {
            line: entry.line,
            reason: format!("key {:?} expects true or false, got {other:?}", entry.key),
        }),
    }
}

/// Parse a positive integer value.
pub(crate) fn parse_positive_u64(entry: &KvEntry) -> Result<u64, MetaSyntaxError> {
    match entry.value.parse::<u64>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(MetaSyntaxError {
            line: entry.line,
            reason: format!(
                "key {:?} expects a positive integer, got {:?}",
                entry.key, entry.value
            ),
        }),
    }
}

/// Split a comma-separated list value into trimmed, non-empty items.
pub(crate) fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}
