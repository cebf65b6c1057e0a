//! Scenario loading with environment and flag overrides applied to the raw
//! TOML tree before it is checked against the schema.

use std::path::Path;

use lbmpc::runtime::{RuntimeError, Scenario};
use toml::{Table, Value};

/// Prefix of environment overrides. `LBMPC_SCHEDULE__SEED=3` sets
/// `schedule.seed`; `__` separates path segments because keys contain `_`.
pub const ENV_PREFIX: &str = "LBMPC_";

#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub deterministic: bool,
    pub seed: Option<u64>,
    pub root_on_massflow: bool,
}

fn parse_value(raw: &str) -> Value {
    // Bare strings are not valid TOML values; wrap the text as a one-key document.
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<(), RuntimeError> {
    let (last, parents) = path.split_last().ok_or_else(|| RuntimeError::Config("empty override path".into()))?;
    let mut table = root;
    for (i, key) in parents.iter().enumerate() {
        let entry = table.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(RuntimeError::Config(format!(
                    "override path {} runs through a non-table value",
                    path[..=i].join(".")
                )))
            }
        };
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// `(key path, value)` pairs taken from `LBMPC_*` variables.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(Vec<String>, Value)> {
    let mut out: Vec<(Vec<String>, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
            if path.iter().any(String::is_empty) {
                return None;
            }
            Some((path, parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Parses a scenario, applying `env` then `flags` on top of the file contents.
pub fn load_scenario_str(
    text: &str,
    env: &[(Vec<String>, Value)],
    flags: &FlagOverrides,
) -> Result<Scenario, RuntimeError> {
    let mut root: Table = text.parse().map_err(|e: toml::de::Error| RuntimeError::Config(e.to_string()))?;
    for (path, value) in env {
        set_path(&mut root, path, value.clone())?;
    }
    let key = |s: &[&str]| s.iter().map(|p| p.to_string()).collect::<Vec<_>>();
    if flags.deterministic {
        set_path(&mut root, &key(&["schedule", "deterministic"]), Value::Boolean(true))?;
    }
    if let Some(seed) = flags.seed {
        let seed = i64::try_from(seed).map_err(|_| RuntimeError::Config("--seed must fit in an i64".into()))?;
        set_path(&mut root, &key(&["schedule", "seed"]), Value::Integer(seed))?;
    }
    if flags.root_on_massflow {
        set_path(&mut root, &key(&["plant", "compressor", "root_on_massflow"]), Value::Boolean(true))?;
    }
    Scenario::from_toml_str(&toml::to_string(&root).map_err(|e| RuntimeError::Config(e.to_string()))?)
}

pub fn load_scenario(
    path: &Path,
    env: &[(Vec<String>, Value)],
    flags: &FlagOverrides,
) -> Result<Scenario, RuntimeError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RuntimeError::Config(format!("cannot read {}: {e}", path.display())))?;
    load_scenario_str(&text, env, flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_paths_are_lowercased_and_split() {
        let env = env_overrides(vars(&[
            ("LBMPC_CONTROLLER__HORIZON", "7"),
            ("LBMPC_PLANT__STATE_LOWER", "[-1.0, -2.0]"),
            ("HOME", "/root"),
        ]));
        assert_eq!(env.len(), 2);
        assert_eq!(env[0].0, vec!["controller", "horizon"]);
        assert_eq!(env[0].1, Value::Integer(7));
        assert_eq!(env[1].0, vec!["plant", "state_lower"]);
    }

    #[test]
    fn bare_words_become_strings() {
        assert_eq!(parse_value("dnn"), Value::String("dnn".into()));
        assert_eq!(parse_value("true"), Value::Boolean(true));
    }

    #[test]
    fn flags_win_over_env_and_file() {
        let env = env_overrides(vars(&[("LBMPC_SCHEDULE__SEED", "3"), ("LBMPC_ORACLE__KIND", "dnn")]));
        let flags = FlagOverrides { deterministic: true, seed: Some(9), root_on_massflow: true };
        let s = load_scenario_str("[plant]\n[schedule]\ndeterministic = false\nseed = 1\n", &env, &flags).unwrap();
        assert_eq!(s.schedule.seed, 9);
        assert!(s.schedule.deterministic);
        assert!(s.plant.compressor.root_on_massflow);
        assert_eq!(s.oracle.kind, lbmpc::runtime::OracleKind::Dnn);
    }

    #[test]
    fn misspelled_env_key_is_an_error() {
        let env = env_overrides(vars(&[("LBMPC_CONTROLLER__HORIZN", "7")]));
        let err = load_scenario_str("[plant]\n", &env, &FlagOverrides::default()).unwrap_err();
        assert!(matches!(err, RuntimeError::Config(ref s) if s.contains("horizn")), "{err}");
    }
}
