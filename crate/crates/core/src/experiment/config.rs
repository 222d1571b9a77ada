//! Experiment configuration: a JSON document with one section per stage.
//! Sections are parsed independently so a broken file reports every
//! problem at once.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::MMD_MAX_PER_SIDE;
use crate::impute::ImputeConfig;
use crate::missingness::MissingnessSpec;
use crate::model::ModelConfig;
use crate::theory::TheoryConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Complete data, simulated missingness, train, impute, score.
    SimulateImpute,
    /// Gaussian mixture with pattern-indexed components; estimate a mean.
    MixtureMean,
    /// Cross-validated choice of the data latent dimension.
    CvSelect,
    Theory,
    /// Impute a CSV with a saved model.
    ImputeCsv,
    /// Sample synthetic rows from a saved model.
    Generate,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SimulateImpute => "simulate-impute",
            Self::MixtureMean => "mixture-mean",
            Self::CvSelect => "cv-select",
            Self::Theory => "theory",
            Self::ImputeCsv => "impute-csv",
            Self::Generate => "generate",
        }
    }
}

fn default_noise_std() -> f64 {
    0.1
}
fn default_factor_width() -> usize {
    8
}
fn default_missing_token() -> String {
    "NA".into()
}

/// Where the rows come from. Generator seeds are per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    LatentFactor {
        n: usize,
        p: usize,
        latent_dim: usize,
        #[serde(default = "default_noise_std")]
        noise_std: f64,
        #[serde(default = "default_factor_width")]
        hidden_width: usize,
    },
    GaussianMixture {
        n: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_missing_token")]
        missing_token: String,
    },
}

impl DataSource {
    /// Column count when it is known without reading files.
    pub fn known_p(&self) -> Option<usize> {
        match self {
            Self::LatentFactor { p, .. } => Some(*p),
            Self::GaussianMixture { .. } => Some(3),
            Self::Csv { .. } => None,
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Self::LatentFactor {
                n,
                p,
                latent_dim,
                noise_std,
                hidden_width,
            } => {
                if *n < 2 {
                    out.push("data.n must be at least 2".into());
                }
                if *p == 0 {
                    out.push("data.p must be at least 1".into());
                }
                if *latent_dim == 0 {
                    out.push("data.latent_dim must be at least 1".into());
                }
                if *hidden_width == 0 {
                    out.push("data.hidden_width must be at least 1".into());
                }
                if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    out.push("data.noise_std must be finite and nonnegative".into());
                }
            }
            Self::GaussianMixture { n } => {
                if *n < 2 {
                    out.push("data.n must be at least 2".into());
                }
            }
            Self::Csv { path, .. } => {
                if path.as_os_str().is_empty() {
                    out.push("data.path must not be empty".into());
                }
            }
        }
        out
    }
}

fn default_bootstrap() -> usize {
    1000
}
fn default_mmd_side() -> usize {
    MMD_MAX_PER_SIDE
}
fn default_target() -> usize {
    2
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rows per side for MMD; larger samples are subsampled.
    #[serde(default = "default_mmd_side")]
    pub mmd_max_per_side: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap_reps: usize,
    /// Also impute with the untrained initial model.
    #[serde(default = "yes")]
    pub untrained_baseline: bool,
    /// MMD² between two independent draws of the ground truth.
    #[serde(default = "yes")]
    pub mmd_null: bool,
    /// Rows to generate; the data row count when absent.
    #[serde(default)]
    pub generated_rows: Option<usize>,
    /// Column whose mean is estimated (mixture experiments).
    #[serde(default = "default_target")]
    pub target_column: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mmd_max_per_side: MMD_MAX_PER_SIDE,
            bootstrap_reps: 1000,
            untrained_baseline: true,
            mmd_null: true,
            generated_rows: None,
            target_column: 2,
        }
    }
}

impl EvalConfig {
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mmd_max_per_side < 2 {
            out.push("eval.mmd_max_per_side must be at least 2".into());
        }
        if self.bootstrap_reps < 100 {
            out.push("eval.bootstrap_reps must be at least 100".into());
        }
        if self.generated_rows == Some(0) {
            out.push("eval.generated_rows must be at least 1".into());
        }
        out
    }
}

fn default_folds() -> usize {
    5
}
fn default_mask_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    #[serde(default)]
    pub candidates: Vec<usize>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_mask_fraction")]
    pub mask_fraction: f64,
}

impl Default for CvSection {
    fn default() -> Self {
        Self {
            candidates: Vec::new(),
            folds: 5,
            mask_fraction: 0.2,
        }
    }
}

/// A fully resolved experiment. Serializing it gives back every default,
/// and that echo is what reports embed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub name: String,
    pub replications: usize,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: Option<DataSource>,
    pub missingness: Option<MissingnessSpec>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub impute: ImputeConfig,
    pub eval: EvalConfig,
    pub cv: CvSection,
    pub theory: TheoryConfig,
    /// Checkpoint read by `impute-csv` and `generate`.
    pub model_path: Option<PathBuf>,
}

const SECTIONS: [&str; 14] = [
    "kind",
    "name",
    "replications",
    "base_seed",
    "output_dir",
    "data",
    "missingness",
    "model",
    "train",
    "impute",
    "eval",
    "cv",
    "theory",
    "model_path",
];

/// Deserializes one section, recording the failure instead of returning it.
fn section<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key).filter(|v| !v.is_null())?;
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            problems.push(format!("{key}: {e}"));
            None
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config, listing every problem found.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("not valid JSON: {e}")]))?;
        Self::from_value(&value)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn from_value(value: &Value) -> Result<Self> {
        let Some(obj) = value.as_object() else {
            return Err(Error::Config(vec!["top level must be a JSON object".into()]));
        };
        let mut problems = Vec::new();
        for key in obj.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                problems.push(format!(
                    "unknown field `{key}` (expected one of {})",
                    SECTIONS.join(", ")
                ));
            }
        }
        let kind: Option<ExperimentKind> = section(obj, "kind", &mut problems);
        if !obj.contains_key("kind") {
            problems.push(
                "kind: missing (one of simulate-impute, mixture-mean, cv-select, theory, impute-csv, generate)".into(),
            );
        }
        let name: Option<String> = section(obj, "name", &mut problems);
        let replications: Option<usize> = section(obj, "replications", &mut problems);
        let base_seed: Option<u64> = section(obj, "base_seed", &mut problems);
        let output_dir: Option<PathBuf> = section(obj, "output_dir", &mut problems);
        let data: Option<DataSource> = section(obj, "data", &mut problems);
        let missingness: Option<MissingnessSpec> = section(obj, "missingness", &mut problems);
        let train: Option<TrainConfig> = section(obj, "train", &mut problems);
        let impute: Option<ImputeConfig> = section(obj, "impute", &mut problems);
        let eval: Option<EvalConfig> = section(obj, "eval", &mut problems);
        let cv: Option<CvSection> = section(obj, "cv", &mut problems);
        let theory: Option<TheoryConfig> = section(obj, "theory", &mut problems);
        let model_path: Option<PathBuf> = section(obj, "model_path", &mut problems);

        // The model's width defaults to the data's.
        let model: Option<ModelConfig> = match obj.get("model") {
            Some(Value::Object(m)) => {
                let mut m = m.clone();
                if !m.contains_key("p") {
                    match data.as_ref().and_then(DataSource::known_p) {
                        Some(p) => {
                            m.insert("p".into(), p.into());
                        }
                        None => problems.push("model.p: required when the data width is not known in advance".into()),
                    }
                }
                section(
                    &Map::from_iter([("model".to_string(), Value::Object(m))]),
                    "model",
                    &mut problems,
                )
            }
            None | Some(Value::Null) => None,
            Some(_) => {
                problems.push("model: expected an object".into());
                None
            }
        };

        let config = Self {
            kind: kind.unwrap_or(ExperimentKind::Theory),
            name: name.unwrap_or_else(|| kind.map(|k| k.as_str().to_string()).unwrap_or_default()),
            replications: replications.unwrap_or(1),
            base_seed: base_seed.unwrap_or(0),
            output_dir,
            data,
            missingness,
            model,
            train: train.unwrap_or_default(),
            impute: impute.unwrap_or_default(),
            eval: eval.unwrap_or_default(),
            cv: cv.unwrap_or_default(),
            theory: theory.unwrap_or_default(),
            model_path,
        };
        // Semantic checks only make sense once the kind is known.
        if kind.is_some() {
            let attempted = |k: &str| obj.get(k).is_some_and(|v| !v.is_null());
            problems.extend(config.semantic_problems(&attempted));
        }
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Every inconsistency in an already-typed config.
    pub fn problems(&self) -> Vec<String> {
        self.semantic_problems(&|_| false)
    }

    fn semantic_problems(&self, attempted: &dyn Fn(&str) -> bool) -> Vec<String> {
        use ExperimentKind::*;
        let mut out = Vec::new();
        if self.replications == 0 {
            out.push("replications must be at least 1".into());
        }
        let needs_data = matches!(self.kind, SimulateImpute | MixtureMean | CvSelect | ImputeCsv);
        let needs_model = matches!(self.kind, SimulateImpute | MixtureMean | CvSelect);
        // A section that was present but failed to parse is already reported.
        if needs_data && self.data.is_none() && !attempted("data") {
            out.push(format!("data: required for {}", self.kind.as_str()));
        }
        if needs_model && self.model.is_none() && !attempted("model") {
            out.push(format!("model: required for {}", self.kind.as_str()));
        }
        if let Some(d) = &self.data {
            out.extend(d.problems());
            match (self.kind, d) {
                (MixtureMean, DataSource::GaussianMixture { .. }) => {}
                (MixtureMean, _) => out.push("data.generator must be gaussian_mixture for mixture-mean".into()),
                (SimulateImpute | CvSelect, DataSource::GaussianMixture { .. }) => {
                    out.push("data.generator gaussian_mixture already carries its own mask; use mixture-mean".into())
                }
                (_, DataSource::Csv { .. }) => {}
                (ImputeCsv, _) => out.push("data.generator must be csv for impute-csv".into()),
                _ => {}
            }
        }
        if self.kind == SimulateImpute && self.missingness.is_none() && !attempted("missingness") {
            out.push("missingness: required for simulate-impute".into());
        }
        if let (Some(m), Some(p)) = (&self.missingness, self.data.as_ref().and_then(DataSource::known_p)) {
            out.extend(m.problems(p).into_iter().map(|s| format!("missingness: {s}")));
        }
        if let Some(m) = &self.model {
            out.extend(m.problems());
            if let Some(p) = self.data.as_ref().and_then(DataSource::known_p) {
                if m.p != p {
                    out.push(format!("model.p = {} does not match the data width {p}", m.p));
                }
            }
        }
        out.extend(self.train.problems());
        out.extend(self.impute.problems());
        out.extend(self.eval.problems());
        if self.kind == MixtureMean && self.eval.target_column >= 3 {
            out.push(format!(
                "eval.target_column {} is outside the 3 mixture columns",
                self.eval.target_column
            ));
        }
        if self.kind == CvSelect {
            if self.cv.candidates.is_empty() {
                out.push("cv.candidates: at least one candidate is required".into());
            }
            if self.cv.folds < 2 {
                out.push("cv.folds must be at least 2".into());
            }
            if !(self.cv.mask_fraction > 0.0 && self.cv.mask_fraction <= 0.5) {
                out.push("cv.mask_fraction must be in (0, 0.5]".into());
            }
            if let Some(p) = self.data.as_ref().and_then(DataSource::known_p) {
                if let Some(c) = self.cv.candidates.iter().find(|&&c| c == 0 || c > p) {
                    out.push(format!("cv.candidates: {c} is outside 1..={p}"));
                }
            }
        }
        if matches!(self.kind, ImputeCsv | Generate) && self.model_path.is_none() {
            out.push(format!("model_path: required for {}", self.kind.as_str()));
        }
        if self.kind == ImputeCsv && self.output_dir.is_none() {
            out.push("output_dir: required for impute-csv".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// The resolved config as JSON, every default filled in.
    pub fn resolved(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn problems_of(v: Value) -> Vec<String> {
        match ExperimentConfig::from_value(&v) {
            Err(Error::Config(p)) => p,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_theory_config_fills_defaults() {
        let c = ExperimentConfig::from_value(&json!({"kind": "theory"})).unwrap();
        assert_eq!(c.replications, 1);
        assert_eq!(c.theory, TheoryConfig::default());
        assert_eq!(c.train, TrainConfig::default());
        let echo = c.resolved();
        assert_eq!(echo["train"]["batch_size"], 16);
        assert_eq!(echo["impute"]["b"], 10000);
    }

    #[test]
    fn model_width_comes_from_the_data() {
        let c = ExperimentConfig::from_value(&json!({
            "kind": "mixture-mean",
            "data": {"generator": "gaussian_mixture", "n": 100},
            "model": {"kappa1": 2}
        }))
        .unwrap();
        assert_eq!(c.model.unwrap().p, 3);
    }

    #[test]
    fn problems_are_listed_exhaustively() {
        let p = problems_of(json!({
            "kind": "simulate-impute",
            "replications": 0,
            "bogus": 1,
            "train": {"batch_size": 0, "learning_rate": -1.0},
            "impute": {"b": "many"},
            "eval": {"bootstrap_reps": 5}
        }));
        let has = |s: &str| p.iter().any(|x| x.contains(s));
        assert!(has("bogus"), "{p:?}");
        assert!(has("replications"), "{p:?}");
        assert!(has("batch_size"), "{p:?}");
        assert!(has("learning_rate"), "{p:?}");
        assert!(has("impute:"), "{p:?}");
        assert!(has("bootstrap_reps"), "{p:?}");
        assert!(has("data: required"), "{p:?}");
        assert!(has("model: required"), "{p:?}");
        assert!(has("missingness: required"), "{p:?}");
        assert!(p.len() >= 9);
    }

    #[test]
    fn kind_is_required_and_checked() {
        assert!(problems_of(json!({})).iter().any(|s| s.starts_with("kind")));
        assert!(problems_of(json!({"kind": "dance"}))
            .iter()
            .any(|s| s.starts_with("kind")));
        assert!(problems_of(json!([1, 2])).iter().any(|s| s.contains("object")));
    }

    #[test]
    fn mismatched_model_width() {
        let p = problems_of(json!({
            "kind": "simulate-impute",
            "data": {"generator": "latent_factor", "n": 10, "p": 3, "latent_dim": 1},
            "missingness": {"mechanism": "latent"},
            "model": {"p": 4, "kappa1": 1}
        }));
        assert!(p.iter().any(|s| s.contains("model.p = 4")), "{p:?}");
    }

    #[test]
    fn file_kinds_need_a_model_path() {
        let p = problems_of(json!({"kind": "generate"}));
        assert!(p.iter().any(|s| s.starts_with("model_path")), "{p:?}");
    }
}
