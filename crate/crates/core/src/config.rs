//! Pipeline configuration file (TOML). Every section is optional and
//! defaults to the standard constants.
//!
//! ```toml
//! [extract]
//! step = 0.5
//!
//! [distill]
//! epsilon = 0.05
//! max_iters = 20
//!
//! [retrieval]
//! k = 8
//! threshold = 0.7
//!
//! [predict]
//! runs = 3
//!
//! [policy]
//! kind = "stub"
//! damping = 0.7
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::DistillConfig;
use crate::error::{Error, Result};
use crate::evaluation::SyntheticTeacherConfig;
use crate::haga::{HagaGrid, DEFAULT_STEP};
use crate::knowledge_base::{
    Embedder, KnowledgeBase, RemoteEmbedder, RetrievalConfig, Standardization, StandardizedEmbedder,
};
use crate::policy::{Policy, RemoteConfig, RemotePolicy, StubPolicy};
use crate::prediction::PredictConfig;
use crate::schema::FeatureShapMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub step: f64,
}

impl Default for ExtractSection {
    fn default() -> Self {
        ExtractSection { step: DEFAULT_STEP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub runs: usize,
    pub require_precedents: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            runs: 3,
            require_precedents: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Stub,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub damping: f64,
    pub remote: RemoteConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            kind: PolicyKind::Stub,
            damping: StubPolicy::default().damping,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Standardized,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub base_url: String,
    pub model: String,
    pub token_env: String,
    pub timeout_secs: f64,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection {
            kind: EmbedderKind::Standardized,
            base_url: "http://localhost:8000/v1".into(),
            model: "bge-large-en-v1.5".into(),
            token_env: "SHAPDISTILL_API_KEY".into(),
            timeout_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub rows: usize,
    #[serde(flatten)]
    pub teacher: SyntheticTeacherConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            rows: 300,
            teacher: SyntheticTeacherConfig::default(),
        }
    }
}

/// Default file locations; command-line arguments take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub schema: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub acpb: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub extract: ExtractSection,
    pub distill: DistillConfig,
    pub retrieval: RetrievalConfig,
    pub predict: PredictSection,
    pub policy: PolicySection,
    pub embedder: EmbedderSection,
    pub synth: SynthSection,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        HagaGrid::new(self.extract.step)?;
        let d = &self.distill;
        if !(d.epsilon >= 0.0 && d.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "distill.epsilon must be non-negative, got {}",
                d.epsilon
            )));
        }
        if !(d.max_weight > 0.0 && d.max_weight.is_finite()) {
            return Err(Error::Config(format!(
                "distill.max_weight must be positive, got {}",
                d.max_weight
            )));
        }
        if self.retrieval.k == 0 {
            return Err(Error::Config("retrieval.k must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.retrieval.threshold) {
            return Err(Error::Config(format!(
                "retrieval.threshold must lie in [-1, 1], got {}",
                self.retrieval.threshold
            )));
        }
        if self.predict.runs == 0 || self.predict.runs.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "predict.runs must be odd, got {}",
                self.predict.runs
            )));
        }
        StubPolicy::new(self.policy.damping).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> HagaGrid {
        HagaGrid {
            step: self.extract.step,
        }
    }

    pub fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            runs: self.predict.runs,
            retrieval: self.retrieval,
            max_weight: self.distill.max_weight,
            require_precedents: self.predict.require_precedents,
        }
    }

    pub fn make_policy(&self) -> Result<Box<dyn Policy>> {
        Ok(match self.policy.kind {
            PolicyKind::Stub => Box::new(
                StubPolicy::new(self.policy.damping).map_err(|e| Error::Config(e.to_string()))?,
            ),
            PolicyKind::Remote => Box::new(RemotePolicy::new(self.policy.remote.clone())),
        })
    }

    fn remote_embedder(&self, names: Vec<String>) -> Arc<dyn Embedder> {
        let e = &self.embedder;
        Arc::new(RemoteEmbedder::new(
            &e.base_url,
            &e.model,
            &e.token_env,
            Duration::from_secs_f64(e.timeout_secs),
            names,
        ))
    }

    /// Empty store for a training cohort with the configured embedder.
    pub fn new_store(&self, matrix: &FeatureShapMatrix) -> KnowledgeBase {
        let stats = Standardization::from_matrix(matrix);
        let embedder: Arc<dyn Embedder> = match self.embedder.kind {
            EmbedderKind::Standardized => Arc::new(StandardizedEmbedder {
                stats: stats.clone(),
            }),
            EmbedderKind::Remote => self.remote_embedder(
                matrix
                    .schema
                    .features()
                    .iter()
                    .map(|f| f.name.clone())
                    .collect(),
            ),
        };
        KnowledgeBase::with_embedder(&matrix.schema, stats, self.retrieval, embedder)
    }

    pub fn open_store(
        &self,
        path: impl AsRef<Path>,
        feature_names: Vec<String>,
    ) -> Result<KnowledgeBase> {
        match self.embedder.kind {
            EmbedderKind::Standardized => KnowledgeBase::open(path),
            EmbedderKind::Remote => {
                KnowledgeBase::open_with(path, self.remote_embedder(feature_names))
            }
        }
    }

    /// SHA-256 over the settings that influence outputs (paths excluded).
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_constants() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c.distill.epsilon, 0.05);
        assert_eq!(c.distill.max_iters, 20);
        assert_eq!(c.retrieval.k, 8);
        assert_eq!(c.retrieval.threshold, 0.7);
        assert_eq!(c.predict.runs, 3);
        assert_eq!(c.extract.step, 0.5);
        assert_eq!(c.policy.kind, PolicyKind::Stub);
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn overrides_and_validation() {
        let c = PipelineConfig::from_toml(
            "[extract]\nstep = 1.0\n[predict]\nruns = 5\n[policy]\nkind = \"remote\"\n[policy.remote]\nmodel = \"m\"\n[synth]\nseed = 9\nrows = 10\n",
        )
        .unwrap();
        assert_eq!(c.extract.step, 1.0);
        assert_eq!(c.predict.runs, 5);
        assert_eq!(c.policy.remote.model, "m");
        assert_eq!(c.synth.teacher.seed, 9);
        assert_eq!(c.synth.rows, 10);
        assert!(PipelineConfig::from_toml("[predict]\nruns = 4\n").is_err());
        assert!(PipelineConfig::from_toml("[extract]\nstep = 0\n").is_err());
        assert!(PipelineConfig::from_toml("[nope]\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.store = Some("x.kb".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.retrieval.k = 5;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
