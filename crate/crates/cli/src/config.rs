//! Run configuration: defaults, then the config file, then `--set` flags.

use std::path::Path;

use anyhow::{bail, Context};
use offclip_core::trainer::{SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.synthetic.validate().context("invalid [synthetic] section")?;
        self.train.validate().context("invalid [train] section")?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Builds the effective config.
///
/// `sets` are `section.field=value` pairs with TOML values, e.g.
/// `train.epochs=5` or `train.loss_mode="baseline"`. A global `seed` replaces
/// both section seeds.
pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            toml::from_str::<toml::Table>(&text)
                .with_context(|| format!("cannot parse config file {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    for set in sets {
        apply_set(&mut table, set)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .context("invalid configuration")?;
    if let Some(seed) = seed {
        cfg.synthetic.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_set(table: &mut toml::Table, set: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = set.split_once('=') else {
        bail!("--set expects section.field=value, got `{set}`");
    };
    let Some((section, field)) = key.trim().split_once('.') else {
        bail!("--set key `{key}` must look like section.field");
    };
    let value = parse_value(raw.trim())
        .with_context(|| format!("cannot parse value for `{key}`"))?;
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let Some(section_table) = entry.as_table_mut() else {
        bail!("`{section}` is not a table");
    };
    section_table.insert(field.to_string(), value);
    Ok(())
}

/// TOML literal, falling back to a bare string so `loss_mode=baseline` works.
fn parse_value(raw: &str) -> anyhow::Result<toml::Value> {
    let doc: Result<toml::Table, _> = toml::from_str(&format!("v = {raw}"));
    match doc {
        Ok(mut t) => Ok(t.remove("v").expect("key was just parsed")),
        Err(_) if !raw.is_empty() && raw.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
            Ok(toml::Value::String(raw.to_string()))
        }
        Err(e) => Err(e.into()),
    }
}
