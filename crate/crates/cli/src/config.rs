//! Layered configuration: defaults, then `--config`, then flags.

use std::path::Path;

use dsn3d_core::kv::KvMap;
use dsn3d_core::volume::DEFAULT_WINDOW;

use crate::args::Common;
use crate::error::{CliError, CliResult};

pub const RESOLVED_NAME: &str = "resolved.cfg";

pub fn is_window_key(key: &str) -> bool {
    matches!(key, "window_lo" | "window_hi")
}

/// Merges the config file with flag overrides and rejects keys outside `allowed`.
///
/// `flags` come from dedicated options; `--set` entries and `--seed` are added here.
pub fn resolve(common: &Common, flags: KvMap, allowed: impl Fn(&str) -> bool) -> CliResult<KvMap> {
    let mut kv = match &common.config {
        Some(path) => KvMap::read(path).map_err(|e| CliError::Config(e.to_string()))?,
        None => KvMap::new(),
    };
    let mut over = KvMap::new();
    for entry in &common.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{entry}`")))?;
        over.set(k.trim(), v.trim());
    }
    over.merge(&flags);
    if let Some(seed) = common.seed {
        over.set("seed", seed);
    }
    kv.merge(&over);
    kv.reject_unknown(|k| allowed(k) || k == "seed")?;
    Ok(kv)
}

/// `(lo, hi)` intensity window, defaulting to the soft-tissue window.
pub fn window(kv: &KvMap) -> CliResult<(f64, f64)> {
    let lo = kv.parsed_or("window_lo", DEFAULT_WINDOW.0)?;
    let hi = kv.parsed_or("window_hi", DEFAULT_WINDOW.1)?;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(CliError::Config(format!("window needs window_lo < window_hi, got {lo}, {hi}")));
    }
    Ok((lo, hi))
}

pub fn window_kv(lo: f64, hi: f64) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("window_lo", lo);
    kv.set("window_hi", hi);
    kv
}

pub fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("{}: cannot create output directory: {e}", out.display())))
}

pub fn write_resolved(out: &Path, kv: &KvMap) -> CliResult<()> {
    kv.write(&out.join(RESOLVED_NAME)).map_err(|e| CliError::Data(e.to_string()))
}
