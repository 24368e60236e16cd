use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

/// JSON-lines diagnostics: one object per line with `level`, `command` and
/// `event` keys plus the event's own fields.
pub struct Logger<'a> {
    sink: &'a mut dyn Write,
    command: &'static str,
}

impl<'a> Logger<'a> {
    pub fn new(sink: &'a mut dyn Write, command: &'static str) -> Self {
        Self { sink, command }
    }

    pub fn info(&mut self, event: &str, fields: Value) {
        self.emit("info", event, fields);
    }

    pub fn warn(&mut self, event: &str, fields: Value) {
        self.emit("warn", event, fields);
    }

    pub fn error(&mut self, message: &str) {
        self.emit("error", "failed", serde_json::json!({ "message": message }));
    }

    fn emit(&mut self, level: &str, event: &str, fields: Value) {
        let mut line = Map::new();
        line.insert("level".into(), level.into());
        line.insert("command".into(), self.command.into());
        line.insert("event".into(), event.into());
        if let Value::Object(extra) = fields {
            line.extend(extra);
        }
        let _ = writeln!(self.sink, "{}", Value::Object(line));
    }
}

/// Sibling temporary path used while a file is being written.
pub fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes to a temporary sibling and renames it into place, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = temp_path(path);
    let result = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Appends `suffix` to the full file name: `model.bin` → `model.bin.log`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Left-aligned first column, right-aligned numbers, two-space gutters.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut text = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i == 0 {
                text.push_str(&format!("{cell:<w$}"));
            } else {
                text.push_str(&format!("  {cell:>w$}"));
            }
        }
        out.push_str(text.trim_end());
        out.push('\n');
    };
    line(&mut header.iter().copied());
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}
