//! Append-only run manifest kept at `<output_dir>/manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FORMAT: &str = "xaimi-run/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TrainTarget,
    Breach,
    TrainInversion,
    TrainSurrogate,
    Evaluate,
    Analyze,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::TrainTarget,
        Stage::Breach,
        Stage::TrainInversion,
        Stage::TrainSurrogate,
        Stage::Evaluate,
        Stage::Analyze,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::TrainTarget => "train-target",
            Stage::Breach => "breach",
            Stage::TrainInversion => "train-inversion",
            Stage::TrainSurrogate => "train-surrogate",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }

    /// Stages that must have completed first. `evaluate` additionally needs
    /// `train-surrogate` when the surrogate attack is enabled.
    pub fn prerequisites(self, surrogate: bool) -> Vec<Stage> {
        match self {
            Stage::TrainTarget => vec![],
            Stage::Breach => vec![Stage::TrainTarget],
            Stage::TrainInversion | Stage::TrainSurrogate => vec![Stage::Breach],
            Stage::Evaluate if surrogate => vec![Stage::TrainInversion, Stage::TrainSurrogate],
            Stage::Evaluate => vec![Stage::TrainInversion],
            Stage::Analyze | Stage::Report => vec![Stage::Evaluate],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config_hash: String,
    pub wall_clock_seconds: f64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    /// Stage-specific summary values (accuracies, counts).
    #[serde(default)]
    pub summary: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub run_name: String,
    pub config_hash: String,
    #[serde(default)]
    pub split_checksum: Option<String>,
    #[serde(default)]
    pub dataset_checksum: Option<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    /// Opens the manifest in `dir`, creating it when absent. A manifest
    /// written under another config hash is refused.
    pub fn open_or_create(dir: &Path, run_name: &str, config_hash: &str) -> Result<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            let m = Self {
                format: MANIFEST_FORMAT.into(),
                run_name: run_name.into(),
                config_hash: config_hash.into(),
                split_checksum: None,
                dataset_checksum: None,
                stages: Vec::new(),
            };
            io::write_json(&path, &m)?;
            return Ok(m);
        }
        let m: Self = io::read_json(&path)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Load { path, reason: format!("unknown format {}", m.format) });
        }
        if m.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{} belongs to config {}, not {config_hash}; use a fresh output_dir",
                dir.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.record(stage).is_some()
    }

    /// First missing prerequisite of `stage`, as an actionable error.
    pub fn check_prerequisites(&self, stage: Stage, surrogate: bool) -> Result<()> {
        match stage.prerequisites(surrogate).into_iter().find(|p| !self.is_complete(*p)) {
            Some(missing) => {
                Err(Error::MissingPrerequisite { stage: stage.as_str().into(), missing: missing.as_str().into() })
            }
            None => Ok(()),
        }
    }

    /// Appends a completed stage and persists. Records are never replaced.
    pub fn append(&mut self, dir: &Path, record: StageRecord) -> Result<()> {
        if self.is_complete(record.stage) {
            return Err(Error::Invalid(format!("stage {} already recorded", record.stage)));
        }
        self.stages.push(record);
        io::write_json(&Self::path(dir), self)
    }

    pub fn set_checksums(&mut self, dir: &Path, split: String, dataset: String) -> Result<()> {
        for (slot, value, name) in
            [(&mut self.split_checksum, split, "split"), (&mut self.dataset_checksum, dataset, "dataset")]
        {
            match slot {
                Some(old) if *old != value => {
                    return Err(Error::Provenance(format!("{name} checksum changed from {old} to {value}")))
                }
                _ => *slot = Some(value),
            }
        }
        io::write_json(&Self::path(dir), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stage: Stage) -> StageRecord {
        StageRecord {
            stage,
            config_hash: "h".into(),
            wall_clock_seconds: 0.0,
            artifacts: vec![],
            summary: BTreeMap::new(),
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.as_str()).unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.as_str()));
        }
        assert!(Stage::parse("train").is_err());
    }

    #[test]
    fn prerequisites_name_the_missing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open_or_create(dir.path(), "t", "h").unwrap();
        let err = m.check_prerequisites(Stage::Evaluate, false).unwrap_err();
        assert!(matches!(&err, Error::MissingPrerequisite { missing, .. } if missing == "train-inversion"));
        m.append(dir.path(), rec(Stage::TrainTarget)).unwrap();
        m.append(dir.path(), rec(Stage::Breach)).unwrap();
        m.append(dir.path(), rec(Stage::TrainInversion)).unwrap();
        assert!(m.check_prerequisites(Stage::Evaluate, false).is_ok());
        let err = m.check_prerequisites(Stage::Evaluate, true).unwrap_err();
        assert!(matches!(&err, Error::MissingPrerequisite { missing, .. } if missing == "train-surrogate"));
    }

    #[test]
    fn manifest_is_append_only_and_hash_bound() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::open_or_create(dir.path(), "t", "h").unwrap();
        m.append(dir.path(), rec(Stage::TrainTarget)).unwrap();
        assert!(m.append(dir.path(), rec(Stage::TrainTarget)).is_err());
        let again = RunManifest::open_or_create(dir.path(), "t", "h").unwrap();
        assert_eq!(again.stages.len(), 1);
        assert!(matches!(RunManifest::open_or_create(dir.path(), "t", "other"), Err(Error::Config(_))));
    }
}
