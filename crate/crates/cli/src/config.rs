//! Config file loading and flag overrides (flag > file > default).

use std::path::Path;

use repsurgery::loss::LossKind;
use repsurgery::merge::CoefficientMode;
use repsurgery::pipeline::{MergeMethod, RunConfig};
use repsurgery::surgery::Regime;
use repsurgery::Error;

/// Values given on the command line. `None` leaves the file/default value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<MergeMethod>,
    pub lambda: Option<f64>,
    pub trim: Option<f64>,
    pub mode: Option<CoefficientMode>,
    pub rank: Option<usize>,
    pub loss: Option<LossKind>,
    pub lr: Option<f64>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub ratio: Option<f64>,
    pub regime: Option<Regime>,
    pub out: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.method {
            cfg.merge.method = v;
        }
        if let Some(v) = self.lambda {
            cfg.merge.lambda = v;
        }
        if let Some(v) = self.trim {
            cfg.merge.trim_fraction = v;
        }
        if let Some(v) = self.mode {
            cfg.merge.adamerging.mode = v;
        }
        let s = &mut cfg.surgery;
        if let Some(v) = self.rank {
            s.rank = v;
        }
        if let Some(v) = self.loss {
            s.loss = v;
        }
        if let Some(v) = self.lr {
            s.adam.lr = v;
        }
        if let Some(v) = self.iters {
            s.iterations = v;
        }
        if let Some(v) = self.batch {
            s.batch_size = v;
        }
        if let Some(v) = self.ratio {
            s.data_ratio = v;
        }
        if let Some(v) = self.regime {
            s.regime = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
    }
}

/// Parses a config file. Keys the file leaves out keep their values from
/// [`RunConfig::default`], including inside partially given tables.
pub fn parse_config(text: &str) -> Result<RunConfig, Error> {
    let invalid = |e: &dyn std::fmt::Display| Error::Config(format!("invalid config: {e}"));
    let file: toml::Table = toml::from_str(text).map_err(|e| invalid(&e))?;
    let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| invalid(&e))?;
    overlay(&mut merged, file);
    merged.try_into().map_err(|e| invalid(&e))
}

fn overlay(base: &mut toml::Table, file: toml::Table) {
    for (key, value) in file {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(f)) => overlay(b, f),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub fn to_toml(cfg: &RunConfig) -> Result<String, Error> {
    toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
}

/// Reads `path` (if any), applies overrides and validates the result.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text)?
        }
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
