//! `-key value` configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use streamsim_core::{CacheConfig, SimConfig, StatsMode};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("expected `-key`, found `{0}`")]
    ExpectedKey(String),
    #[error("missing value for `{0}`")]
    MissingValue(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`")]
    BadValue { key: String, value: String },
}

pub fn parse_stats_mode(s: &str) -> Option<StatsMode> {
    match s {
        "per_stream" => Some(StatsMode::PerStream),
        "legacy" => Some(StatsMode::Legacy),
        _ => None,
    }
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
}

/// Applies every `-key value` pair of `text` in order, so a later value for
/// the same key wins.
pub fn apply_config_str(cfg: &mut SimConfig, text: &str) -> Result<(), ConfigError> {
    let mut it = tokens(text);
    while let Some(tok) = it.next() {
        let Some(key) = tok.strip_prefix('-') else {
            return Err(ConfigError::ExpectedKey(tok.to_owned()));
        };
        let value = it
            .next()
            .ok_or_else(|| ConfigError::MissingValue(tok.to_owned()))?;
        set(cfg, key, value)?;
    }
    Ok(())
}

fn set(cfg: &mut SimConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
    };
    let num = || value.parse::<usize>().map_err(|_| bad());
    let flag = || match value {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad()),
    };
    match key {
        "gpgpu_concurrent_kernel_sm" => cfg.concurrent_kernel_sm = flag()?,
        "serialize_streams" => cfg.serialize_streams = flag()?,
        "stats_mode" => cfg.stats_mode = parse_stats_mode(value).ok_or_else(bad)?,
        "num_sms" => cfg.num_sms = num()?,
        "max_blocks_per_sm" => cfg.max_blocks_per_sm = num()?,
        "issue_width" => cfg.issue_width = num()?,
        "l2_miss_lat" => cfg.l2_miss_latency = num()? as u64,
        _ => {
            let (cache, field) = if let Some(f) = key.strip_prefix("l1_") {
                (&mut cfg.l1, f)
            } else if let Some(f) = key.strip_prefix("l2_") {
                (&mut cfg.l2, f)
            } else {
                return Err(ConfigError::UnknownKey(key.to_owned()));
            };
            set_cache(cache, field, num()?)
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
        }
    }
    Ok(())
}

fn set_cache(c: &mut CacheConfig, field: &str, v: usize) -> Option<()> {
    match field {
        "sets" => c.num_sets = v,
        "ways" => c.num_ways = v,
        "line" => c.line_size = v as u64,
        "mshr" => c.mshr_entries = v,
        "merge" => c.mshr_max_merge = v,
        "missq" => c.miss_queue_depth = v,
        "hit_lat" => c.hit_latency = v as u64,
        _ => return None,
    }
    Some(())
}

/// Defaults overridden by each file in turn.
pub fn load_config<P: AsRef<Path>>(paths: &[P]) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    for p in paths {
        let p = p.as_ref();
        let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.to_owned(),
            source,
        })?;
        apply_config_str(&mut cfg, &text)?;
    }
    Ok(cfg)
}
