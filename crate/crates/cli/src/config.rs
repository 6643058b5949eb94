use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Reads a TOML or JSON config into a JSON object.
///
/// A run manifest written by this tool is accepted as well; its
/// `resolved_config` is used, so `--config out/manifest.json` replays a run.
pub fn load_table(path: &Path, subcommand: &str) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parse_err = |message: String| CliError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
    } else {
        let t: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        serde_json::to_value(t).map_err(|e| parse_err(e.to_string()))?
    };
    let Value::Object(mut obj) = value else {
        return Err(parse_err("top level must be a table".into()));
    };
    if obj.contains_key("resolved_config") && obj.contains_key("tool") {
        let sub = obj
            .get("subcommand")
            .and_then(Value::as_str)
            .unwrap_or_default();
        if sub != subcommand {
            return Err(parse_err(format!(
                "manifest was written by `{sub}`, not `{subcommand}`"
            )));
        }
        match obj.remove("resolved_config") {
            Some(Value::Object(inner)) => obj = inner,
            _ => return Err(parse_err("`resolved_config` must be a table".into())),
        }
    }
    Ok(obj)
}

/// Strict deserialization: unknown keys and type errors are parse failures.
pub fn from_table<T: DeserializeOwned>(path: &Path, table: Map<String, Value>) -> CliResult<T> {
    serde_json::from_value(Value::Object(table)).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Removes a CLI-only key and decodes it.
pub fn take<T: DeserializeOwned>(
    path: &Path,
    table: &mut Map<String, Value>,
    key: &str,
) -> CliResult<Option<T>> {
    match table.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v)
            .map(Some)
            .map_err(|e| CliError::Parse {
                path: path.to_path_buf(),
                message: format!("`{key}`: {e}"),
            }),
    }
}

pub fn check_params(key: &str, params: &[f64]) -> CliResult<()> {
    if params.is_empty() {
        return Err(CliError::invalid(key, "must not be empty"));
    }
    for (i, &p) in params.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(CliError::invalid(
                format!("{key}[{i}]"),
                format!("{p} must be a finite non-negative number"),
            ));
        }
    }
    Ok(())
}

pub fn check_cfo(spec: &dmubf::cfo::CfoSpec) -> CliResult<()> {
    use dmubf::cfo::CfoSpec;
    let (key, v) = match *spec {
        CfoSpec::Fixed { eps } => ("cfo.eps", eps),
        CfoSpec::Uniform { alpha } => ("cfo.alpha", alpha),
        CfoSpec::Normal { beta } => ("cfo.beta", beta),
    };
    let ok = match spec {
        CfoSpec::Fixed { .. } => v.is_finite(),
        _ => v.is_finite() && v >= 0.0,
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::invalid(key, format!("{v} is out of range")))
    }
}

pub fn check_system(cfg: &dmubf::ofdm::SystemConfig) -> CliResult<()> {
    let counts = [
        ("config.num_daps", cfg.num_daps),
        ("config.antennas_per_dap", cfg.antennas_per_dap),
        ("config.num_users", cfg.num_users),
        ("config.num_subcarriers", cfg.num_subcarriers),
        ("config.slot_symbols", cfg.slot_symbols),
    ];
    for (key, v) in counts {
        if v == 0 {
            return Err(CliError::invalid(key, "must be positive"));
        }
    }
    let reals = [
        ("config.subcarrier_spacing_hz", cfg.subcarrier_spacing_hz),
        ("config.carrier_freq_hz", cfg.carrier_freq_hz),
        ("config.ul_power", cfg.ul_power),
        ("config.noise_var", cfg.noise_var),
    ];
    for (key, v) in reals {
        if !(v.is_finite() && v > 0.0) {
            return Err(CliError::invalid(key, format!("{v} must be positive")));
        }
    }
    cfg.validate().map_err(|e| CliError::invalid("config", e))
}

pub fn check_symbols(symbols: &[usize], slot_symbols: usize) -> CliResult<()> {
    if symbols.is_empty() {
        return Err(CliError::invalid("symbols", "must not be empty"));
    }
    for (i, &n) in symbols.iter().enumerate() {
        if n >= slot_symbols {
            return Err(CliError::invalid(
                format!("symbols[{i}]"),
                format!("{n} is not below config.slot_symbols = {slot_symbols}"),
            ));
        }
    }
    Ok(())
}
