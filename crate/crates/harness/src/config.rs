use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use peftsam_core::interactive::{StartKind, TrainConfig};
use peftsam_core::peft::PeftConfig;
use peftsam_core::samlite::ModelConfig;
use peftsam_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Ais,
    Point,
    Box,
    Ip,
    Ib,
}

impl EvalTask {
    pub const ALL: [EvalTask; 5] = [EvalTask::Ais, EvalTask::Point, EvalTask::Box, EvalTask::Ip, EvalTask::Ib];

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Ais => "ais",
            EvalTask::Point => "point",
            EvalTask::Box => "box",
            EvalTask::Ip => "ip",
            EvalTask::Ib => "ib",
        }
    }

    /// Prompt kind of an interactive task.
    pub fn start(self) -> Option<StartKind> {
        match self {
            EvalTask::Point | EvalTask::Ip => Some(StartKind::Point),
            EvalTask::Box | EvalTask::Ib => Some(StartKind::Box),
            EvalTask::Ais => None,
        }
    }

    /// Whether the task reads the metric after the last correction.
    pub fn is_final(self) -> bool {
        matches!(self, EvalTask::Ip | EvalTask::Ib)
    }

    pub fn parse_list(s: &str) -> Result<Vec<EvalTask>> {
        let mut out: Vec<EvalTask> = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("no evaluation tasks given".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for EvalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        EvalTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (ais, point, box, ip, ib)")))
    }
}

/// Everything needed to rebuild and retrain one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    #[serde(default)]
    pub peft: Option<PeftConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub tasks: Vec<EvalTask>,
    /// Use only the first `n_train` training images.
    #[serde(default)]
    pub n_train: Option<usize>,
    /// Base weights to start from instead of the seeded initialization.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(preset: &str, peft: Option<PeftConfig>, seed: u64) -> Self {
        Self {
            preset: preset.into(),
            peft,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            data: None,
            tasks: Vec::new(),
            n_train: None,
            init: None,
            seed,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::preset(&self.preset)
    }

    pub fn method_name(&self) -> String {
        self.peft.as_ref().map_or("none".into(), |p| p.method.to_string())
    }

    /// Stable identifier derived from the full configuration.
    pub fn experiment_id(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{}-{:08x}", self.method_name(), h as u32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if let Some(p) = &self.peft {
            p.validate()?;
        }
        self.train.validate()?;
        if self.n_train == Some(0) {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }

    /// Checks that can only fail for trainable presets.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.model_config()?.count_only() {
            return Err(Error::Config(format!(
                "preset {} is count-only and cannot be trained",
                self.preset
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_lists_are_sorted_and_deduplicated() {
        let t = EvalTask::parse_list("ib, AIS,box,ib").unwrap();
        assert_eq!(t, vec![EvalTask::Ais, EvalTask::Box, EvalTask::Ib]);
        assert!(EvalTask::parse_list(" , ").is_err());
        assert!(EvalTask::parse_list("ais,boxes").is_err());
    }
}
