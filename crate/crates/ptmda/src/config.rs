//! Flat key=value experiment configuration. One file describes one run;
//! every key can also be set from the command line, so a config plus its
//! overrides is a complete, archivable record of an experiment.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Every recognized key, in the order `config_to_text` writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "momentum",
    "weight_decay",
    "kappa",
    "epochs_stage1",
    "epochs_stage2",
    "batch_size",
    "seed",
    "norm",
    "use_adv",
    "use_mc",
    "use_pt",
    "detach_phi",
    "refresh_pseudo_labels",
    "hidden_dims",
    "feature_dim",
    "disc_hidden",
    "d0",
    "d_r",
    "norm_eps",
    "norm_momentum",
    "precision",
];

fn parse_as<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("key {key}: expected true or false, got {other:?}"))),
    }
}

/// Comma-separated dims; the empty string means no hidden layers.
pub fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse_as(key, p.trim())).collect()
}

fn dims_to_string(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Sets one configuration key from its textual value. Shared by the file
/// parser and the command-line overrides so both validate identically.
pub fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "lr" => cfg.lr = parse_as(key, value)?,
        "momentum" => cfg.momentum = parse_as(key, value)?,
        "weight_decay" => cfg.weight_decay = parse_as(key, value)?,
        "kappa" => cfg.kappa = parse_as(key, value)?,
        "epochs_stage1" => cfg.epochs_stage1 = parse_as(key, value)?,
        "epochs_stage2" => cfg.epochs_stage2 = parse_as(key, value)?,
        "batch_size" => cfg.batch_size = parse_as(key, value)?,
        "seed" => cfg.seed = parse_as(key, value)?,
        "norm" => cfg.norm = parse_as(key, value)?,
        "use_adv" => cfg.use_adv = parse_bool(key, value)?,
        "use_mc" => cfg.use_mc = parse_bool(key, value)?,
        "use_pt" => cfg.use_pt = parse_bool(key, value)?,
        "detach_phi" => cfg.detach_phi = parse_bool(key, value)?,
        "refresh_pseudo_labels" => cfg.refresh_pseudo_labels = parse_bool(key, value)?,
        "hidden_dims" => cfg.hidden_dims = parse_dims(key, value)?,
        "feature_dim" => cfg.feature_dim = parse_as(key, value)?,
        "disc_hidden" => cfg.disc_hidden = parse_as(key, value)?,
        "d0" => cfg.d0 = parse_as(key, value)?,
        "d_r" => cfg.d_r = parse_as(key, value)?,
        "norm_eps" => cfg.norm_eps = parse_as(key, value)?,
        "norm_momentum" => cfg.norm_momentum = parse_as(key, value)?,
        "precision" => cfg.precision = parse_as(key, value)?,
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parses `key = value` lines into ordered pairs. `#` starts a comment,
/// blank lines are ignored, duplicate keys are rejected.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value, got {raw:?}", idx + 1)));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", idx + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", idx + 1)));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Applies a config file's contents on top of `cfg`.
pub fn apply_config_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (key, value) in parse_config_text(text)? {
        set_key(cfg, &key, &value)?;
    }
    Ok(())
}

/// Reads and applies a config file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = TrainConfig::default();
    apply_config_text(&mut cfg, &text)?;
    Ok(cfg)
}

/// Serializes every key; `parse_config_text` of the result reproduces the
/// config exactly (floats print in shortest round-trip form).
pub fn config_to_text(cfg: &TrainConfig) -> String {
    let pairs: Vec<(&str, String)> = vec![
        ("lr", format!("{}", cfg.lr)),
        ("momentum", format!("{}", cfg.momentum)),
        ("weight_decay", format!("{}", cfg.weight_decay)),
        ("kappa", format!("{}", cfg.kappa)),
        ("epochs_stage1", cfg.epochs_stage1.to_string()),
        ("epochs_stage2", cfg.epochs_stage2.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("seed", cfg.seed.to_string()),
        ("norm", cfg.norm.to_string()),
        ("use_adv", cfg.use_adv.to_string()),
        ("use_mc", cfg.use_mc.to_string()),
        ("use_pt", cfg.use_pt.to_string()),
        ("detach_phi", cfg.detach_phi.to_string()),
        ("refresh_pseudo_labels", cfg.refresh_pseudo_labels.to_string()),
        ("hidden_dims", dims_to_string(&cfg.hidden_dims)),
        ("feature_dim", cfg.feature_dim.to_string()),
        ("disc_hidden", cfg.disc_hidden.to_string()),
        ("d0", cfg.d0.to_string()),
        ("d_r", cfg.d_r.to_string()),
        ("norm_eps", format!("{}", cfg.norm_eps)),
        ("norm_momentum", format!("{}", cfg.norm_momentum)),
        ("precision", cfg.precision.to_string()),
    ];
    debug_assert_eq!(pairs.len(), CONFIG_KEYS.len());
    let mut out = String::new();
    for (key, value) in pairs {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(&value);
        out.push('\n');
    }
    out
}
