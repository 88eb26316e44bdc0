//! Line-delimited JSON events on stderr.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use serde_json::{json, Map, Value};

static QUIET: AtomicBool = AtomicBool::new(false);

pub fn set_quiet(q: bool) {
    QUIET.store(q, Ordering::Relaxed);
}

/// Writes `{"level": .., "event": .., ...fields}` as one line.
pub fn emit(level: &str, event: &str, fields: Value) {
    if QUIET.load(Ordering::Relaxed) && level != "error" {
        return;
    }
    let mut obj = Map::new();
    obj.insert("level".into(), json!(level));
    obj.insert("event".into(), json!(event));
    if let Value::Object(extra) = fields {
        obj.extend(extra);
    }
    let line = Value::Object(obj).to_string();
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

pub fn info(event: &str, fields: Value) {
    emit("info", event, fields);
}

pub fn warn(event: &str, fields: Value) {
    emit("warn", event, fields);
}
