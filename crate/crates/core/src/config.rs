//! TOML experiment files.
//!
//! ```toml
//! [job]            # any JobConfig field, plus `preset = "<name>"`
//! [channel]        # overrides on top of the profile named by job.channel
//! [costmodel]      # any CostModelParams field
//! [pricing]        # unit prices, used by both the job and the cost model
//! [presets.<name>] # extra presets: partial [job] tables
//! ```
//!
//! Keys are layered: defaults, then the preset, then `[job]`. Unknown keys are rejected
//! and every error names the offending key path.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::costmodel::{CostModelParams, Pricing};
use crate::error::{Error, Result};
use crate::runtime::JobConfig;
use crate::storage::{lookup_profile, ChannelProfile};

/// Environment variable that replaces `job.seed`.
pub const SEED_ENV: &str = "FAASML_SEED";

/// A parsed and validated experiment file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub job: JobConfig,
    pub costmodel: CostModelParams,
    pub pricing: Pricing,
    /// Preset applied to `job`, if any.
    pub preset: Option<String>,
}

/// Model, cluster count, worker count, batch size and loss threshold of the benchmark
/// settings. Datasets are not bundled, so `job.data` still has to point at the data.
pub fn builtin_presets() -> BTreeMap<String, Table> {
    let rows: [(&str, &str, usize, usize, usize, f64); 9] = [
        ("higgs_lr", "lr", 10, 10_000, 10, 0.66),
        ("higgs_svm", "svm", 10, 10_000, 10, 0.48),
        ("higgs_kmeans", "kmeans", 10, 10_000, 10, 0.15),
        ("rcv1_lr", "lr", 5, 2_000, 10, 0.68),
        ("rcv1_svm", "svm", 5, 2_000, 10, 0.05),
        ("rcv1_kmeans", "kmeans", 50, 2_000, 3, 0.01),
        ("yfcc_lr", "lr", 100, 800, 10, 50.0),
        ("yfcc_svm", "svm", 100, 800, 10, 50.0),
        ("yfcc_kmeans", "kmeans", 100, 800, 10, 50.0),
    ];
    rows.into_iter()
        .map(|(name, model, workers, batch, k, threshold)| {
            let mut t = Table::new();
            t.insert("model".into(), Value::String(model.into()));
            t.insert("workers".into(), Value::Integer(workers as i64));
            t.insert("batch_size".into(), Value::Integer(batch as i64));
            t.insert("k".into(), Value::Integer(k as i64));
            t.insert("threshold".into(), Value::Float(threshold));
            let algorithm = if model == "kmeans" { "kmeans_em" } else { "ga_sgd" };
            t.insert("algorithm".into(), Value::String(algorithm.into()));
            (name.to_string(), t)
        })
        .collect()
}

fn typed<T: DeserializeOwned>(section: &str, table: Table) -> Result<T> {
    serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." {
            section.to_string()
        } else {
            format!("{section}.{path}")
        };
        Error::config(key, e.into_inner().to_string())
    })
}

fn section(root: &mut Table, name: &str) -> Result<Option<Table>> {
    match root.remove(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(other) => Err(Error::config(
            name,
            format!("expected a table, found {}", other.type_str()),
        )),
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
        ConfigFile::parse(&text)
    }

    /// Parses without consulting the environment.
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut root: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        let job = section(&mut root, "job")?.unwrap_or_default();
        let channel = section(&mut root, "channel")?;
        let costmodel = section(&mut root, "costmodel")?.unwrap_or_default();
        let pricing = section(&mut root, "pricing")?;
        let user_presets = section(&mut root, "presets")?.unwrap_or_default();
        if let Some(key) = root.keys().next() {
            return Err(Error::config(
                key,
                "unknown section; expected job, channel, costmodel, pricing or presets",
            ));
        }

        let mut presets = builtin_presets();
        for (name, value) in user_presets {
            let Value::Table(t) = value else {
                return Err(Error::config(format!("presets.{name}"), "expected a table"));
            };
            if t.contains_key("preset") {
                return Err(Error::config(
                    format!("presets.{name}.preset"),
                    "presets cannot refer to other presets",
                ));
            }
            typed::<JobConfig>(&format!("presets.{name}"), t.clone())?;
            presets.insert(name, t);
        }

        let mut job = job;
        let preset = match job.remove("preset") {
            None => None,
            Some(Value::String(name)) => Some(name),
            Some(other) => {
                return Err(Error::config(
                    "job.preset",
                    format!("expected a string, found {}", other.type_str()),
                ))
            }
        };
        let mut merged = Table::new();
        if let Some(name) = &preset {
            let t = presets.get(name).ok_or_else(|| {
                let known: Vec<&str> = presets.keys().map(String::as_str).collect();
                Error::config(
                    "job.preset",
                    format!("unknown preset \"{name}\"; known presets: {}", known.join(", ")),
                )
            })?;
            merged.extend(t.clone());
        }
        merged.extend(job);
        let mut job: JobConfig = typed("job", merged)?;

        let mut costmodel: CostModelParams = typed("costmodel", costmodel)?;
        let pricing: Pricing = match pricing {
            Some(t) => {
                let p: Pricing = typed("pricing", t)?;
                costmodel.pricing = p.clone();
                job.pricing = p.clone();
                p
            }
            None => job.pricing.clone(),
        };

        if let Some(overrides) = channel {
            let base = match &job.channel_profile {
                Some(p) => p.clone(),
                None => lookup_profile(&job.channel).map_err(|e| Error::config("job.channel", e.to_string()))?,
            };
            let Value::Table(mut t) = Value::try_from(&base).map_err(|e| Error::config("channel", e.to_string()))?
            else {
                unreachable!("a struct serializes to a table")
            };
            t.extend(overrides);
            let profile: ChannelProfile = typed("channel", t)?;
            job.channel_profile = Some(profile);
        }

        job.validate()?;
        costmodel.t_faas.validate("costmodel.t_faas")?;
        costmodel.t_iaas.validate("costmodel.t_iaas")?;
        Ok(ConfigFile {
            job,
            costmodel,
            pricing,
            preset,
        })
    }

    /// Applies `FAASML_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.job.seed = v
                .trim()
                .parse()
                .map_err(|e| Error::config(SEED_ENV, format!("\"{v}\" is not a u64 seed: {e}")))?;
        }
        Ok(())
    }
}

/// Cost-model constants from either a full experiment file (its `[costmodel]` and
/// `[pricing]` sections) or a bare table of `CostModelParams` fields.
pub fn parse_constants(text: &str) -> Result<CostModelParams> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
    let sections = ["job", "channel", "costmodel", "pricing", "presets"];
    if root.keys().any(|k| sections.contains(&k.as_str())) {
        return ConfigFile::parse(text).map(|c| c.costmodel);
    }
    let p: CostModelParams = typed("costmodel", root)?;
    p.validate()?;
    Ok(p)
}

pub fn load_constants(path: &Path) -> Result<CostModelParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    parse_constants(&text)
}
