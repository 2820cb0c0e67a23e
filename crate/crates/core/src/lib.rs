//! Distil a tabular teacher model's per-sample feature attributions into a
//! probabilistic contribution base, calibrate per-case feature weights
//! against the teacher's probabilities, and predict new cases from a
//! grouped-retrieval case base.
//!
//! Pipeline: [`schema::load_matrix`] → [`cacs::extract`] →
//! [`calibration::distill_cohort`] → [`prediction::predict_voted`] →
//! [`prediction::generate_report`].

pub mod cacs;
pub mod calibration;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod haga;
pub mod knowledge_base;
pub mod policy;
pub mod prediction;
pub mod schema;

pub use cacs::{contribution_probability, sigmoid, Acpb, PatientFeatureTable};
pub use calibration::{
    compute_reward, distill_cohort, distill_record, infer_probability, DistillConfig,
    DistillationOutcome, FailureCaseBase, RewardSignal, WeightSet,
};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use haga::{assign_interval, HagaGrid};
pub use knowledge_base::{KnowledgeBase, RetrievalConfig, RetrievalResult, Tier};
pub use policy::{Policy, PolicyError, RemoteConfig, RemotePolicy, StubPolicy};
pub use prediction::{
    generate_report, predict_once, predict_voted, DiagnosisReport, PredictConfig,
};
pub use schema::{FeatureKind, FeatureSchema, FeatureShapMatrix, FeatureSpec, Label, SampleRecord};
