//! Cartesian-product sweeps over experiment flags.

use std::path::Path;

use peftsam_core::interactive::EVAL_CORRECTIONS;
use peftsam_core::peft::{Alpha, LoraScope, Method, PeftConfig};
use peftsam_core::{Error, Result};
use rayon::prelude::*;
use serde_json::{Map, Value};

use crate::config::ExperimentConfig;
use crate::evaluate::{csv_field, csv_header, csv_row, ResultRecord};
use crate::run::{default_tasks, eval_checkpoint, open_data, train_run};

/// Flag names as given on the command line; values are JSON scalars.
pub type Grid = Vec<(String, Vec<Value>)>;

pub fn parse_grid(text: &str) -> Result<Grid> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid file: {e}")))?;
    let Value::Object(map) = v else {
        return Err(Error::Config("grid file must be a JSON object".into()));
    };
    let mut grid = Vec::new();
    for (k, vals) in map {
        match vals {
            Value::Array(a) if !a.is_empty() => grid.push((k, a)),
            _ => return Err(Error::Config(format!("grid entry {k:?} must be a non-empty list"))),
        }
    }
    Ok(grid)
}

/// Every combination, with keys in sorted order and the last key varying
/// fastest.
pub fn expand(grid: &Grid) -> Vec<Map<String, Value>> {
    let mut out = vec![Map::new()];
    for (k, vals) in grid {
        out = out
            .into_iter()
            .flat_map(|m| {
                vals.iter().map(move |v| {
                    let mut m = m.clone();
                    m.insert(k.clone(), v.clone());
                    m
                })
            })
            .collect();
    }
    out
}

fn as_str(k: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(Error::Config(format!("{k}: expected a string or number, got {v}"))),
    }
}

fn as_f64(k: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| Error::Config(format!("{k}: bad number {n}"))),
        Value::String(s) => s.parse().map_err(|_| Error::Config(format!("{k}: bad number {s:?}"))),
        _ => Err(Error::Config(format!("{k}: expected a number, got {v}"))),
    }
}

fn as_usize(k: &str, v: &Value) -> Result<usize> {
    let f = as_f64(k, v)?;
    if f < 0.0 || f.fract() != 0.0 {
        return Err(Error::Config(format!("{k}: expected a non-negative integer, got {v}")));
    }
    Ok(f as usize)
}

/// Applies one grid point to `base`. The method is applied first so the
/// other flags land on the right PEFT configuration.
pub fn apply_overrides(base: &ExperimentConfig, point: &Map<String, Value>) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    if let Some(v) = point.get("method") {
        let m: Method = as_str("method", v)?.parse()?;
        cfg.peft = Some(PeftConfig::new(m));
    }
    let peft = |cfg: &mut ExperimentConfig, k: &str| -> Result<()> {
        if cfg.peft.is_none() {
            return Err(Error::Config(format!("{k} needs a PEFT method")));
        }
        Ok(())
    };
    for (k, v) in point {
        let key = k.replace('-', "_");
        match key.as_str() {
            "method" => {}
            "rank" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().rank = Some(as_usize(k, v)?);
            }
            "alpha" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().alpha = Some(as_str(k, v)?.parse::<Alpha>()?);
            }
            "lora_scope" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().lora_scope = Some(as_str(k, v)?.parse::<LoraScope>()?);
            }
            "proj" | "projection_size" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().projection_size = Some(as_usize(k, v)?);
            }
            "dropout" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().dropout = Some(as_f64(k, v)?);
            }
            "late_fraction" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().late_fraction = Some(as_f64(k, v)?);
            }
            "quant_block" => {
                peft(&mut cfg, k)?;
                cfg.peft.as_mut().unwrap().quant_block = Some(as_usize(k, v)?);
            }
            "lr" => cfg.train.lr = as_f64(k, v)?,
            "batch_size" => cfg.train.batch_size = as_usize(k, v)?,
            "objects_per_image" => cfg.train.objects_per_image = as_usize(k, v)?,
            "patience" => cfg.train.patience = as_usize(k, v)?,
            "max_epochs" => cfg.train.max_epochs = as_usize(k, v)?,
            "n_train" => cfg.n_train = Some(as_usize(k, v)?),
            "seed" => {
                cfg.seed = as_usize(k, v)? as u64;
                cfg.train.seed = cfg.seed;
            }
            _ => return Err(Error::Config(format!("unknown sweep flag {k:?}"))),
        }
    }
    cfg.validate_for_training()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: Map<String, Value>,
    pub config: Option<ExperimentConfig>,
    pub records: Vec<ResultRecord>,
    pub error: Option<String>,
}

/// Runs every grid point, at most `jobs` at a time. A failing point
/// becomes a failed row and the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, grid: &Grid, jobs: usize) -> Result<Vec<SweepRow>> {
    let points = expand(grid);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let rows = pool.install(|| {
        points
            .into_par_iter()
            .map(|point| {
                let cfg = match apply_overrides(base, &point) {
                    Ok(c) => c,
                    Err(e) => {
                        return SweepRow {
                            point,
                            config: None,
                            records: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                };
                let result = (|| -> Result<Vec<ResultRecord>> {
                    let run = train_run(&cfg, &mut |_| {})?;
                    let data = open_data(&cfg)?;
                    let tasks = if cfg.tasks.is_empty() {
                        default_tasks(data.manifest.task)
                    } else {
                        cfg.tasks.clone()
                    };
                    let out = eval_checkpoint(&run.checkpoint, &data, &tasks, EVAL_CORRECTIONS, cfg.seed)?;
                    Ok(out.summary)
                })();
                match result {
                    Ok(records) => SweepRow {
                        point,
                        config: Some(cfg),
                        records,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("sweep point {} failed: {e}", Value::Object(point.clone()));
                        SweepRow {
                            point,
                            config: Some(cfg),
                            records: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });
    Ok(rows)
}

/// Merged table: the fixed result columns plus `status` and the grid
/// point as JSON. A failed point contributes one row with empty result
/// fields.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = csv_header(&["status", "config"]);
    for row in rows {
        let point = csv_field(&Value::Object(row.point.clone()).to_string());
        match &row.error {
            None => {
                for r in &row.records {
                    out.push_str(&format!("{},ok,{point}\n", csv_row(r)));
                }
            }
            Some(e) => {
                let cfg = row.config.as_ref();
                out.push_str(&format!(
                    "{},{},{},,,,,{},{point}\n",
                    csv_field(&cfg.map_or(String::new(), |c| c.experiment_id())),
                    csv_field(&cfg.map_or(String::new(), |c| c.method_name())),
                    cfg.map_or(String::new(), |c| c.seed.to_string()),
                    csv_field(&format!("failed: {e}")),
                ));
            }
        }
    }
    out
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_grid(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use peftsam_core::peft::Method;

    #[test]
    fn grid_expands_to_the_cartesian_product() {
        let grid = parse_grid(r#"{"rank": [2, 4], "method": ["lora", "qlora"], "lr": [1e-3]}"#).unwrap();
        let points = expand(&grid);
        assert_eq!(points.len(), 4);
        let ranks: Vec<_> = points.iter().map(|p| p["rank"].as_u64().unwrap()).collect();
        assert_eq!(ranks, [2, 4, 2, 4]);
        assert!(parse_grid(r#"{"rank": []}"#).is_err());
        assert!(parse_grid("[1]").is_err());
    }

    #[test]
    fn overrides_land_on_the_peft_config() {
        let mut base = ExperimentConfig::new("toy", None, 0);
        base.data = Some("d".into());
        let point = expand(&parse_grid(r#"{"method": ["lora"], "rank": [8], "lr": ["0.01"], "seed": [5]}"#).unwrap())
            .remove(0);
        let cfg = apply_overrides(&base, &point).unwrap();
        let p = cfg.peft.unwrap();
        assert_eq!((p.method, p.rank), (Method::Lora, Some(8)));
        assert_eq!((cfg.train.lr, cfg.seed, cfg.train.seed), (0.01, 5, 5));
        let bad = expand(&parse_grid(r#"{"rank": [8]}"#).unwrap()).remove(0);
        assert!(apply_overrides(&base, &bad).is_err());
        let unknown = expand(&parse_grid(r#"{"colour": [1]}"#).unwrap()).remove(0);
        assert!(apply_overrides(&base, &unknown).is_err());
    }
}
