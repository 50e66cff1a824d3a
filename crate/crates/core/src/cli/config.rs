//! TOML run configuration.
//!
//! ```toml
//! [model]
//! m0 = 0.0
//! m1 = 0.5
//! sigma = 1.0
//!
//! [harvest]
//! family = "exponential"
//! mean = [0.2, 0.3, 0.4]   # or a single number
//! sense_cost = 0.5
//! warmup = 30000           # battery slots before monitoring starts
//!
//! [detector]
//! h = 10.0                 # or a list
//! gate_mode = "full-battery"
//!
//! [experiment]
//! n_runs = 20000
//! seed = 1
//! ```
//!
//! `[stationary]` and `[constants]` tune the numerical solvers and are optional.

use std::path::Path;

use toml::{Table, Value};

use crate::change_model::ChangeModel;
use crate::error::{Error, Result};
use crate::gating::FULL_BATTERY;
use crate::harvest::HarvestParams;
use crate::montecarlo::DEFAULT_TAIL_WINDOW;
use crate::renewal::RenewalSettings;
use crate::stationary::{DEFAULT_N_POINTS, DEFAULT_TOL};

const HARVEST_RESERVED: [&str; 5] = ["family", "mean", "sense_cost", "initial_level", "warmup"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarySettings {
    pub n_points: usize,
    pub tol: f64,
    pub grid_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Config {
    /// Effective configuration, including command-line overrides.
    pub table: Table,
    pub model: ChangeModel,
    pub harvest_family: String,
    pub harvest_params: HarvestParams,
    pub harvest_means: Vec<f64>,
    pub sense_cost: f64,
    pub initial_level: Option<f64>,
    /// Battery slots simulated before monitoring starts.
    pub warmup: u64,
    pub thresholds: Vec<f64>,
    pub gate_mode: String,
    pub n_runs: usize,
    pub max_steps: Option<u64>,
    pub change_point: u64,
    pub tail_window: (f64, f64),
    pub seed: u64,
    pub stationary: StationarySettings,
    pub renewal: RenewalSettings,
    /// `false` substitutes ungated ladder moments and `ζ̄` into the deficit formulas.
    pub gated_ladder: bool,
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let (section, name) = key.split_once('.').expect("keys are section.name");
    table.get(section)?.as_table()?.get(name)
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(Error::Config(format!("`{key}` must be a number, got {other}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        // Large counts are often written as 1e6.
        Value::Float(x) if *x >= 0.0 && x.fract() == 0.0 && *x < 1.8e19 => Ok(*x as u64),
        other => Err(Error::Config(format!("`{key}` must be a non-negative integer, got {other}"))),
    }
}

fn req_f64(t: &Table, key: &str) -> Result<f64> {
    as_f64(key, lookup(t, key).ok_or_else(|| Error::MissingKey(key.into()))?)
}

fn opt_f64(t: &Table, key: &str) -> Result<Option<f64>> {
    lookup(t, key).map(|v| as_f64(key, v)).transpose()
}

fn opt_u64(t: &Table, key: &str) -> Result<Option<u64>> {
    lookup(t, key).map(|v| as_u64(key, v)).transpose()
}

fn opt_str(t: &Table, key: &str) -> Result<Option<String>> {
    lookup(t, key)
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("`{key}` must be a string")))
        })
        .transpose()
}

/// A number or a list of numbers.
fn req_list(t: &Table, key: &str) -> Result<Vec<f64>> {
    match lookup(t, key).ok_or_else(|| Error::MissingKey(key.into()))? {
        Value::Array(items) => items.iter().map(|v| as_f64(key, v)).collect(),
        v => Ok(vec![as_f64(key, v)?]),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Accepts a config file or a run manifest (whose `[config]` table is used).
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        if let Some(Value::Table(inner)) = table.get("config") {
            if table.contains_key("tool") {
                table = inner.clone();
            }
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let t = &table;
        let model = ChangeModel::new(
            opt_f64(t, "model.m0")?.unwrap_or(0.0),
            req_f64(t, "model.m1")?,
            req_f64(t, "model.sigma")?,
        )?;

        let harvest_means = req_list(t, "harvest.mean")?;
        let sense_cost = req_f64(t, "harvest.sense_cost")?;
        let mut harvest_params = HarvestParams::new();
        if let Some(Value::Table(section)) = t.get("harvest") {
            for (k, v) in section.iter().filter(|(k, _)| !HARVEST_RESERVED.contains(&k.as_str())) {
                harvest_params.insert(k.clone(), as_f64(&format!("harvest.{k}"), v)?);
            }
        }

        let thresholds = req_list(t, "detector.h")?;
        let tail_window = match lookup(t, "experiment.tail_window") {
            None => DEFAULT_TAIL_WINDOW,
            Some(Value::Array(v)) if v.len() == 2 => (
                as_f64("experiment.tail_window", &v[0])?,
                as_f64("experiment.tail_window", &v[1])?,
            ),
            Some(_) => return Err(Error::Config("`experiment.tail_window` must be [lo, hi]".into())),
        };

        let d = RenewalSettings::default();
        let renewal = RenewalSettings {
            ladder_reps: opt_u64(t, "constants.ladder_reps")?.map_or(d.ladder_reps, |v| v as usize),
            zeta_reps: opt_u64(t, "constants.zeta_reps")?.map_or(d.zeta_reps, |v| v as usize),
            horizon: opt_u64(t, "constants.horizon")?.unwrap_or(d.horizon),
            delta_reps: opt_u64(t, "constants.delta_reps")?.map_or(d.delta_reps, |v| v as usize),
            h_probe: opt_f64(t, "constants.h_probe")?,
            neg_reps: opt_u64(t, "constants.neg_reps")?.map_or(d.neg_reps, |v| v as usize),
        };
        let gated_ladder = match lookup(t, "constants.gated_ladder") {
            None => true,
            Some(Value::Boolean(b)) => *b,
            Some(_) => return Err(Error::Config("`constants.gated_ladder` must be a boolean".into())),
        };

        let cfg = Config {
            model,
            harvest_family: opt_str(t, "harvest.family")?.unwrap_or_else(|| "exponential".into()),
            harvest_params,
            harvest_means,
            sense_cost,
            initial_level: opt_f64(t, "harvest.initial_level")?,
            warmup: opt_u64(t, "harvest.warmup")?.unwrap_or(0),
            thresholds,
            gate_mode: opt_str(t, "detector.gate_mode")?.unwrap_or_else(|| FULL_BATTERY.into()),
            n_runs: opt_u64(t, "experiment.n_runs")?.unwrap_or(20_000) as usize,
            max_steps: opt_u64(t, "experiment.max_steps")?,
            change_point: opt_u64(t, "experiment.change_point")?.unwrap_or(1),
            tail_window,
            seed: opt_u64(t, "experiment.seed")?.unwrap_or(1),
            stationary: StationarySettings {
                n_points: opt_u64(t, "stationary.n_points")?.map_or(DEFAULT_N_POINTS, |v| v as usize),
                tol: opt_f64(t, "stationary.tol")?.unwrap_or(DEFAULT_TOL),
                grid_max: opt_f64(t, "stationary.grid_max")?,
            },
            renewal,
            gated_ladder,
            table,
        };
        if cfg.n_runs == 0 {
            return Err(Error::Config("`experiment.n_runs` must be >= 1".into()));
        }
        if cfg.change_point == 0 {
            return Err(Error::Config("`experiment.change_point` starts at slot 1".into()));
        }
        if !(cfg.sense_cost > 0.0) {
            return Err(Error::Config("`harvest.sense_cost` must be > 0".into()));
        }
        Ok(cfg)
    }

    /// Records the effective seed so the config echo reproduces the run.
    pub fn override_seed(&mut self, seed: u64) -> Result<()> {
        let i = i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} does not fit a TOML integer")))?;
        self.seed = seed;
        let section = self
            .table
            .entry("experiment")
            .or_insert_with(|| Value::Table(Table::new()));
        match section {
            Value::Table(s) => {
                s.insert("seed".into(), Value::Integer(i));
                Ok(())
            }
            _ => Err(Error::Config("`experiment` must be a table".into())),
        }
    }

    /// Value of a `section.name` key in the effective configuration.
    pub fn echo(&self, key: &str) -> Option<&Value> {
        lookup(&self.table, key)
    }
}
