//! Declarative experiment configuration (TOML).

use std::collections::BTreeSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetProfile;
use crate::error::{Error, Result};
use crate::io;
use crate::spec::InversionMethod;
use crate::surrogate::SurrogateMode;
use crate::xai::ExplanationKind;
use crate::zoo::TrainingConfig;
use crate::Parallelism;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    #[serde(default)]
    pub scale: ScaleSection,
    #[serde(default)]
    pub target: TrainingConfig,
    /// Attack-evaluation classifier.
    #[serde(default)]
    pub eval: TrainingConfig,
    #[serde(default = "inversion_default")]
    pub inversion: TrainingConfig,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub matrix: MatrixSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub report: ReportSection,
}

fn inversion_default() -> TrainingConfig {
    TrainingConfig { learning_rate: 1e-3, ..TrainingConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub parallel: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Built-in profile name, or `custom` with [`DataSection::custom`].
    pub profile: String,
    #[serde(default)]
    pub custom: Option<DatasetProfile>,
    pub source: PathBuf,
    /// Use a seeded random subset of `limit` instances (0 = all).
    #[serde(default)]
    pub limit: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    /// Channel divisor applied to the target, surrogate and eval classifiers.
    #[serde(default = "one")]
    pub classifier_divisor: usize,
    /// Channel divisor applied to inversion models.
    #[serde(default = "one")]
    pub inversion_divisor: usize,
}

fn one() -> usize {
    1
}

impl Default for ScaleSection {
    fn default() -> Self {
        Self { classifier_divisor: 1, inversion_divisor: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub mode: SurrogateMode,
    /// Image-inverter architecture; needs an explanation input.
    #[serde(default = "flatten_unet")]
    pub method: InversionMethod,
    #[serde(default)]
    pub classifier: TrainingConfig,
    #[serde(default = "inversion_default")]
    pub explanation_inverter: TrainingConfig,
    #[serde(default = "inversion_default")]
    pub image_inverter: TrainingConfig,
}

fn flatten_unet() -> InversionMethod {
    InversionMethod::FlattenUnet
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            enabled: false,
            mode: SurrogateMode::default(),
            method: InversionMethod::FlattenUnet,
            classifier: TrainingConfig::default(),
            explanation_inverter: inversion_default(),
            image_inverter: inversion_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    pub methods: Vec<InversionMethod>,
    pub explanations: Vec<ExplanationKind>,
    /// Additional `(method, explanation)` runs outside the cross product.
    #[serde(default)]
    pub extra: Vec<(InversionMethod, ExplanationKind)>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            methods: InversionMethod::ALL.to_vec(),
            explanations: vec![
                ExplanationKind::Gradient,
                ExplanationKind::GradInput,
                ExplanationKind::GradCam,
                ExplanationKind::Lrp,
            ],
            extra: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "ssim_sigma")]
    pub ssim_sigma: f64,
}

fn ssim_sigma() -> f64 {
    1.5
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { ssim_sigma: 1.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Rows in each original-vs-reconstruction image grid.
    #[serde(default = "samples")]
    pub samples: usize,
}

fn samples() -> usize {
    6
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { samples: 6 }
    }
}

/// One inversion model to train and evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub method: InversionMethod,
    pub explanation: Option<ExplanationKind>,
}

impl RunKey {
    pub fn id(&self) -> String {
        match self.explanation {
            Some(e) => format!("{}-{}", self.method.as_str(), e.as_str()),
            None => self.method.as_str().to_string(),
        }
    }
}

/// Surrogate-attack evaluation runs.
pub const SURROGATE_RS_CAM: &str = "surrogate-rs_cam";
pub const SURROGATE_S_CAM: &str = "surrogate-s_cam";

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving relative data and output paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // absolute and `..`-free, so the config hash does not depend on how
        // the config path was spelled
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(parent).map_err(|e| Error::io(parent, e))?;
        cfg.run.output_dir = normalize(&base.join(&cfg.run.output_dir));
        cfg.data.source = normalize(&base.join(&cfg.data.source));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let profile = self.profile()?;
        profile.validate()?;
        for (name, t) in [
            ("target", &self.target),
            ("eval", &self.eval),
            ("inversion", &self.inversion),
            ("surrogate.classifier", &self.surrogate.classifier),
            ("surrogate.explanation_inverter", &self.surrogate.explanation_inverter),
            ("surrogate.image_inverter", &self.surrogate.image_inverter),
        ] {
            t.validate().map_err(|e| Error::Config(format!("[{name}]: {e}")))?;
        }
        if self.scale.classifier_divisor == 0 || self.scale.inversion_divisor == 0 {
            return Err(Error::Config("scale divisors must be ≥ 1".into()));
        }
        if !(self.metrics.ssim_sigma > 0.0) {
            return Err(Error::Config("metrics.ssim_sigma must be positive".into()));
        }
        if self.report.samples == 0 {
            return Err(Error::Config("report.samples must be ≥ 1".into()));
        }
        if self.surrogate.enabled && !self.surrogate.method.needs_explanation() {
            return Err(Error::Config("surrogate.method must take an explanation input".into()));
        }
        if self.runs().is_empty() {
            return Err(Error::Config("the run matrix is empty".into()));
        }
        Ok(())
    }

    pub fn profile(&self) -> Result<DatasetProfile> {
        match (self.data.profile.as_str(), &self.data.custom) {
            ("custom", Some(p)) => Ok(p.clone()),
            ("custom", None) => Err(Error::Config("data.profile = \"custom\" needs [data.custom]".into())),
            (name, None) => {
                DatasetProfile::builtin(name).ok_or_else(|| Error::Config(format!("unknown dataset profile `{name}`")))
            }
            (_, Some(_)) => Err(Error::Config("[data.custom] is only read with profile = \"custom\"".into())),
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.run.parallel {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    /// Deduplicated runs in a stable order. `prediction_only` appears once,
    /// without an explanation.
    pub fn runs(&self) -> Vec<RunKey> {
        let mut set = BTreeSet::new();
        let mut add = |method: InversionMethod, e: Option<ExplanationKind>| {
            set.insert(RunKey { method, explanation: if method.needs_explanation() { e } else { None } });
        };
        for &m in &self.matrix.methods {
            if m.needs_explanation() {
                for &e in &self.matrix.explanations {
                    add(m, Some(e));
                }
            } else {
                add(m, None);
            }
        }
        for &(m, e) in &self.matrix.extra {
            add(m, Some(e));
        }
        set.into_iter().collect()
    }

    /// Explanation kinds the breach must capture.
    pub fn breach_kinds(&self) -> Vec<ExplanationKind> {
        let mut kinds: BTreeSet<ExplanationKind> = self.runs().iter().filter_map(|r| r.explanation).collect();
        // relevance and typicalness factors are read from Grad-CAM
        kinds.insert(ExplanationKind::GradCam);
        ExplanationKind::ALL.into_iter().filter(|k| kinds.contains(k)).collect()
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_string(&value).expect("json").as_bytes()))
    }

    /// Seed for a named component, mixed from `run.seed` and the section seed.
    pub fn derive_seed(&self, label: &str, section_seed: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.run.seed.to_le_bytes());
        h.update(section_seed.to_le_bytes());
        h.update(label.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Training config for `label` with its derived seed.
    pub fn training(&self, label: &str, base: &TrainingConfig) -> TrainingConfig {
        TrainingConfig { seed: self.derive_seed(label, base.seed), ..base.clone() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

/// Lexically resolves `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[run]
name = "t"
seed = 3
output_dir = "out"

[data]
profile = "mnist"
source = "data/mnist10k"
"#;

    #[test]
    fn defaults_give_the_full_matrix() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let runs = cfg.runs();
        assert_eq!(runs.len(), 17);
        assert_eq!(runs.iter().filter(|r| r.explanation.is_none()).count(), 1);
        assert_eq!(cfg.metrics.ssim_sigma, 1.5);
        assert_eq!(cfg.report.samples, 6);
        assert_eq!(cfg.target.learning_rate, 1e-4);
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&format!("{MINIMAL}\n# comment\n")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.run.seed = 4;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[metrics]\nssim_sigma = 0.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[metrics]\nsigma = 1.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&MINIMAL.replace("mnist\"", "nope\"")).is_err());
    }

    #[test]
    fn extra_runs_and_breach_kinds() {
        let text = format!(
            "{MINIMAL}\n[matrix]\nmethods = [\"prediction_only\", \"flatten_unet\"]\nexplanations = [\"lrp\"]\nextra = [[\"flatten_unet\", \"partial_cam\"], [\"flatten_unet\", \"lrp\"]]\n"
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        let ids: Vec<String> = cfg.runs().iter().map(RunKey::id).collect();
        assert_eq!(ids, ["prediction_only", "flatten_unet-lrp", "flatten_unet-partial_cam"]);
        assert_eq!(
            cfg.breach_kinds(),
            vec![ExplanationKind::GradCam, ExplanationKind::Lrp, ExplanationKind::PartialCam]
        );
    }

    #[test]
    fn derived_seeds_differ_by_label() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_ne!(cfg.derive_seed("target", 0), cfg.derive_seed("eval", 0));
        assert_eq!(cfg.derive_seed("target", 0), cfg.derive_seed("target", 0));
    }
}
