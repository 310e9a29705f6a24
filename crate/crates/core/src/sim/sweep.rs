//! Parameter grids over a scenario template.

use super::config::ScenarioConfig;
use super::metrics::Metrics;
use super::runner::run;
use crate::config::ConfigError;
use rayon::prelude::*;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid axis `{0}`: expected key=value[,value...]")]
    Syntax(String),
    #[error("grid is empty")]
    Empty,
    #[error("grid point {index}")]
    Point {
        index: usize,
        #[source]
        source: ConfigError,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One dimension of a grid: a dotted config key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl FromStr for GridAxis {
    type Err = SweepError;

    /// `traffic.beacon_interval_ms=100,200,500`. Values are TOML literals;
    /// anything else is taken as a bare string.
    fn from_str(s: &str) -> Result<Self, SweepError> {
        let (key, values) = s.split_once('=').ok_or_else(|| SweepError::Syntax(s.to_string()))?;
        let key = key.trim();
        if key.is_empty() || values.trim().is_empty() {
            return Err(SweepError::Syntax(s.to_string()));
        }
        Ok(GridAxis { key: key.to_string(), values: values.split(',').map(parse_value).collect() })
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<(String, toml::Value)>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| ConfigError::invalid(key, "path crosses a non-table value"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(ConfigError::invalid(key, "empty key"))
}

fn point_keys(point: &[(String, toml::Value)]) -> String {
    point.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(", ")
}

/// Configuration of grid point `index`: the template with the point's
/// overrides and seed `template.seed ^ index`.
pub fn point_config(
    template: &ScenarioConfig,
    point: &[(String, toml::Value)],
    index: usize,
) -> Result<ScenarioConfig, ConfigError> {
    template.validate()?;
    let mut v = toml::Value::try_from(template).map_err(|e| ConfigError::invalid("scenario", e.to_string()))?;
    for (k, val) in point {
        set_path(&mut v, k, val.clone())?;
    }
    let mut cfg: ScenarioConfig =
        v.try_into().map_err(|e: toml::de::Error| ConfigError::invalid(point_keys(point), e.message().to_string()))?;
    cfg.seed = template.seed ^ index as u64;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs every grid point, `jobs` at a time, and returns rows in grid order.
pub fn sweep(template: &ScenarioConfig, axes: &[GridAxis], jobs: usize) -> Result<Vec<Metrics>, SweepError> {
    let points = grid_points(axes);
    if points.is_empty() {
        return Err(SweepError::Empty);
    }
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, p)| point_config(template, p, i).map_err(|source| SweepError::Point { index: i, source }))
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;
    pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(index, cfg)| run(cfg).map_err(|source| SweepError::Point { index, source }))
            .collect()
    })
}
