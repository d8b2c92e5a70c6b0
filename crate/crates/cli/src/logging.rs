//! Line-delimited JSON log records on stderr. The level comes from
//! `OFDIFF_LOG` (`error`, `info` or `debug`; default `info`).

use std::io::Write as _;

use log::{LevelFilter, Log, Metadata, Record};

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata<'_>) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record<'_>) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = serde_json::json!({
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }

    fn flush(&self) {}
}

pub fn level_from_env(value: Option<&str>) -> LevelFilter {
    match value.map(str::trim) {
        Some("error") => LevelFilter::Error,
        Some("debug") => LevelFilter::Debug,
        Some("off") => LevelFilter::Off,
        _ => LevelFilter::Info,
    }
}

/// Installs the logger once; later calls are no-ops.
pub fn init() {
    let level = level_from_env(std::env::var("OFDIFF_LOG").ok().as_deref());
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}

