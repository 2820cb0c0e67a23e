//! Reward-driven weight calibration against teacher probabilities.
//!
//! Each record starts from all-one weights. The inferred probability
//! `0.5 + sum(c_i * w_i)` is scored against the teacher probability; while
//! the relative deviation exceeds `epsilon` the policy proposes new weights,
//! fed with the reward, its guidance string, and a three-slot FIFO of recent
//! failures.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cacs::{Acpb, PatientFeatureTable};
use crate::error::{Error, Result};
use crate::knowledge_base::KnowledgeBase;
use crate::policy::{Policy, PolicyRequest, RequestMode};
use crate::schema::{FeatureShapMatrix, Label, SampleRecord};

pub const BASE_PROBABILITY: f64 = 0.5;
/// Relative deviation below which a prediction earns the full score.
pub const ACCEPTANCE_BAND: f64 = 0.05;
pub const FULL_SCORE: f64 = 10.0;
pub const DEFAULT_MAX_WEIGHT: f64 = 10.0;
pub const FAILURE_CAPACITY: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightSet(Vec<f64>);

impl WeightSet {
    pub fn ones(n: usize) -> Self {
        WeightSet(vec![1.0; n])
    }

    pub fn new(weights: Vec<f64>) -> Self {
        WeightSet(weights)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Clamps every weight into `[0, max]`; non-finite weights become 1.
    /// Returns `(index, original)` for each weight that changed.
    pub fn clamp(&mut self, max: f64) -> Vec<(usize, f64)> {
        let mut changed = Vec::new();
        for (i, w) in self.0.iter_mut().enumerate() {
            let original = *w;
            let fixed = if original.is_nan() {
                1.0
            } else {
                original.clamp(0.0, max)
            };
            if fixed != original {
                changed.push((i, original));
                *w = fixed;
            }
        }
        changed
    }
}

/// `0.5 + sum(c_i * w_i)` before clamping.
pub fn raw_probability(table: &PatientFeatureTable, weights: &WeightSet) -> Result<f64> {
    if table.len() != weights.len() {
        return Err(Error::Arity {
            expected: table.len(),
            got: weights.len(),
        });
    }
    Ok(BASE_PROBABILITY
        + table
            .contributions()
            .zip(weights.as_slice())
            .map(|(c, w)| c * w)
            .sum::<f64>())
}

pub fn infer_probability(table: &PatientFeatureTable, weights: &WeightSet) -> Result<f64> {
    raw_probability(table, weights).map(|p| p.clamp(0.0, 1.0))
}

/// How the decision-boundary alignment term is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentRule {
    /// `(teacher - 0.5) * (infer - 0.5)`.
    #[default]
    Centered,
    /// `(teacher - 0.5) * infer`, kept for comparison runs.
    Literal,
}

impl AlignmentRule {
    pub fn evaluate(self, teacher: f64, infer: f64) -> f64 {
        match self {
            AlignmentRule::Centered => (teacher - 0.5) * (infer - 0.5),
            AlignmentRule::Literal => (teacher - 0.5) * infer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    Over,
    Under,
    Acceptable,
    Contradicts,
}

impl Guidance {
    pub fn text(self) -> &'static str {
        match self {
            Guidance::Over => {
                "Your inferred probability is significantly higher than actual levels"
            }
            Guidance::Under => {
                "Your inferred probability is significantly lower than actual levels"
            }
            Guidance::Acceptable => "Prediction direction correct with acceptable deviation",
            Guidance::Contradicts => {
                "Warning: Prediction contradicts factual direction. Re-examine decision basis"
            }
        }
    }
}

pub fn guidance_text(teacher_prob: f64, infer_prob: f64, diff: f64, alignment: f64) -> Guidance {
    if alignment <= 0.0 {
        Guidance::Contradicts
    } else if diff <= ACCEPTANCE_BAND {
        Guidance::Acceptable
    } else if infer_prob > teacher_prob {
        Guidance::Over
    } else {
        Guidance::Under
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSignal {
    /// `|teacher - infer| / teacher`.
    pub diff: f64,
    /// Value of the alignment term; only its sign matters.
    pub alignment: f64,
    pub score: f64,
    pub guidance: Guidance,
}

impl RewardSignal {
    pub fn guidance_text(&self) -> &'static str {
        self.guidance.text()
    }
}

pub fn compute_reward(teacher_prob: f64, infer_prob: f64) -> RewardSignal {
    compute_reward_with(teacher_prob, infer_prob, AlignmentRule::Centered)
}

pub fn compute_reward_with(
    teacher_prob: f64,
    infer_prob: f64,
    rule: AlignmentRule,
) -> RewardSignal {
    let gap = (teacher_prob - infer_prob).abs();
    let diff = gap / teacher_prob;
    let alignment = rule.evaluate(teacher_prob, infer_prob);
    let score = if alignment <= 0.0 {
        0.0
    } else if diff <= ACCEPTANCE_BAND {
        FULL_SCORE
    } else {
        teacher_prob / gap
    };
    RewardSignal {
        diff,
        alignment,
        score,
        guidance: guidance_text(teacher_prob, infer_prob, diff, alignment),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub weights: WeightSet,
    pub infer_prob: f64,
    pub teacher_prob: f64,
    pub diff: f64,
    pub iteration: usize,
}

/// The three most recent failures, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureCaseBase {
    cases: VecDeque<FailureCase>,
}

impl FailureCaseBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, case: FailureCase) -> Result<()> {
        if case.diff.is_nan() || case.diff <= ACCEPTANCE_BAND {
            return Err(Error::NotAFailure(case.diff));
        }
        if self.cases.len() == FAILURE_CAPACITY {
            self.cases.pop_front();
        }
        self.cases.push_back(case);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FailureCase> {
        self.cases.iter()
    }

    pub fn to_vec(&self) -> Vec<FailureCase> {
        self.cases.iter().cloned().collect()
    }
}

/// Functional form of [`FailureCaseBase::push`].
pub fn push_failure(mut base: FailureCaseBase, case: FailureCase) -> Result<FailureCaseBase> {
    base.push(case)?;
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticState {
    pub table: PatientFeatureTable,
    pub weights: WeightSet,
    pub infer_prob: f64,
    pub guidance: String,
}

impl DiagnosticState {
    pub fn cold_start(table: PatientFeatureTable) -> Result<Self> {
        let weights = WeightSet::ones(table.len());
        let infer_prob = infer_probability(&table, &weights)?;
        Ok(DiagnosticState {
            table,
            weights,
            infer_prob,
            guidance: String::new(),
        })
    }

    /// Replaces the weights and recomputes the inferred probability.
    pub fn set_weights(&mut self, weights: WeightSet) -> Result<()> {
        self.infer_prob = infer_probability(&self.table, &weights)?;
        self.weights = weights;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub max_weight: f64,
    pub alignment: AlignmentRule,
    pub include_unconverged: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            epsilon: ACCEPTANCE_BAND,
            max_iters: 20,
            max_weight: DEFAULT_MAX_WEIGHT,
            alignment: AlignmentRule::Centered,
            include_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub infer_prob: f64,
    pub diff: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationOutcome {
    pub sample_id: String,
    pub teacher_prob: f64,
    pub label: Option<Label>,
    pub converged: bool,
    pub state: DiagnosticState,
    pub reward: RewardSignal,
    /// Number of policy weight updates applied.
    pub iterations: usize,
    pub trajectory: Vec<TrajectoryPoint>,
}

pub fn distill_record(
    record: &SampleRecord,
    acpb: &Acpb,
    policy: &dyn Policy,
    config: &DistillConfig,
) -> Result<DistillationOutcome> {
    let teacher = record.teacher_prob.ok_or_else(|| Error::InvalidRecord {
        row: 0,
        sample_id: record.sample_id.clone(),
        feature: None,
        message: "distillation needs a teacher probability".into(),
    })?;
    let table = acpb.match_record(record)?;
    let mut state = DiagnosticState::cold_start(table)?;
    let mut reward = compute_reward_with(teacher, state.infer_prob, config.alignment);
    let mut trajectory = vec![TrajectoryPoint {
        iteration: 0,
        infer_prob: state.infer_prob,
        diff: reward.diff,
        score: reward.score,
    }];
    let mut failures = FailureCaseBase::new();
    let request =
        |mode, state: &DiagnosticState, reward: &RewardSignal, failures: &FailureCaseBase| {
            PolicyRequest {
                mode,
                features: acpb.schema.features().to_vec(),
                state: state.clone(),
                reward: Some(reward.clone()),
                failures: failures.to_vec(),
                teacher_prob: Some(teacher),
                precedents: Vec::new(),
                run: 0,
                max_weight: config.max_weight,
            }
        };

    if reward.diff <= config.epsilon {
        // Already within the band: the policy only writes the guidance.
        let resp = policy
            .propose(&request(RequestMode::Describe, &state, &reward, &failures))
            .map_err(|source| Error::Policy {
                iteration: 0,
                source,
            })?;
        state.guidance = resp.guidance;
        return Ok(DistillationOutcome {
            sample_id: record.sample_id.clone(),
            teacher_prob: teacher,
            label: record.label,
            converged: true,
            state,
            reward,
            iterations: 0,
            trajectory,
        });
    }

    // with epsilon below the band a cold start can miss yet not count as a failure
    if reward.diff > ACCEPTANCE_BAND {
        failures.push(FailureCase {
            weights: state.weights.clone(),
            infer_prob: state.infer_prob,
            teacher_prob: teacher,
            diff: reward.diff,
            iteration: 0,
        })?;
    }

    let mut converged = false;
    let mut iterations = 0;
    for iteration in 1..=config.max_iters {
        let resp = policy
            .propose(&request(RequestMode::Calibrate, &state, &reward, &failures))
            .map_err(|source| Error::Policy { iteration, source })?;
        let mut weights = resp.weights;
        if weights.len() != state.table.len() {
            return Err(Error::Policy {
                iteration,
                source: crate::policy::PolicyError::Arity {
                    expected: state.table.len(),
                    got: weights.len(),
                },
            });
        }
        weights.clamp(config.max_weight);
        state.set_weights(weights)?;
        state.guidance = resp.guidance;
        reward = compute_reward_with(teacher, state.infer_prob, config.alignment);
        iterations = iteration;
        trajectory.push(TrajectoryPoint {
            iteration,
            infer_prob: state.infer_prob,
            diff: reward.diff,
            score: reward.score,
        });
        debug!(
            "{} iter {iteration}: p={:.6} diff={:.6} score={:.4}",
            record.sample_id, state.infer_prob, reward.diff, reward.score
        );
        if reward.diff <= config.epsilon {
            converged = true;
            break;
        }
        if reward.diff > ACCEPTANCE_BAND {
            failures.push(FailureCase {
                weights: state.weights.clone(),
                infer_prob: state.infer_prob,
                teacher_prob: teacher,
                diff: reward.diff,
                iteration,
            })?;
        }
    }

    Ok(DistillationOutcome {
        sample_id: record.sample_id.clone(),
        teacher_prob: teacher,
        label: record.label,
        converged,
        state,
        reward,
        iterations,
        trajectory,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub sample_id: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_diff: f64,
    pub final_score: f64,
    pub stored_entry: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub total: usize,
    pub converged: usize,
    pub unconverged: usize,
    pub stored: usize,
    pub convergence_rate: Option<f64>,
    pub unconverged_ids: Vec<String>,
    pub records: Vec<RecordSummary>,
    /// Records whose distillation errored (e.g. the policy endpoint was
    /// unreachable); they are neither summarised above nor stored.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed: Vec<RecordFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub sample_id: String,
    pub error: String,
}

impl CohortSummary {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Distils every row, then saves outcomes to `sink` in row order.
///
/// Records are processed in parallel; saving is sequential so entry ids
/// follow row order regardless of scheduling. A record whose distillation
/// errors is listed in [`CohortSummary::failed`] and the rest still run;
/// check that list before treating the cohort as complete.
pub fn distill_cohort(
    matrix: &FeatureShapMatrix,
    acpb: &Acpb,
    policy: &dyn Policy,
    config: &DistillConfig,
    sink: &KnowledgeBase,
) -> Result<CohortSummary> {
    let results: Vec<Result<DistillationOutcome>> = matrix
        .rows
        .par_iter()
        .map(|r| distill_record(r, acpb, policy, config))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut unconverged_ids = Vec::new();
    let mut failed = Vec::new();
    let mut stored = 0;
    for (row, result) in matrix.rows.iter().zip(&results) {
        let outcome = match result {
            Ok(o) => o,
            Err(e) => {
                warn!("{}: {e}", row.sample_id);
                failed.push(RecordFailure {
                    sample_id: row.sample_id.clone(),
                    error: e.to_string(),
                });
                continue;
            }
        };
        let stored_entry = if outcome.converged || config.include_unconverged {
            stored += 1;
            Some(sink.save_entry(outcome, config.include_unconverged)?)
        } else {
            None
        };
        if !outcome.converged {
            unconverged_ids.push(outcome.sample_id.clone());
        }
        records.push(RecordSummary {
            sample_id: outcome.sample_id.clone(),
            converged: outcome.converged,
            iterations: outcome.iterations,
            final_diff: outcome.reward.diff,
            final_score: outcome.reward.score,
            stored_entry,
        });
    }
    let total = matrix.rows.len();
    let converged = records.len() - unconverged_ids.len();
    Ok(CohortSummary {
        total,
        converged,
        unconverged: unconverged_ids.len(),
        stored,
        convergence_rate: (total > 0).then(|| converged as f64 / total as f64),
        unconverged_ids,
        records,
        failed,
    })
}
