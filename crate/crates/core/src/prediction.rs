//! Prediction for new cases: retrieval, policy weights, majority vote and
//! the diagnosis report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cacs::{Acpb, PatientFeatureTable};
use crate::calibration::{
    raw_probability, DiagnosticState, WeightSet, BASE_PROBABILITY, DEFAULT_MAX_WEIGHT,
};
use crate::error::{Error, Result};
use crate::knowledge_base::{KnowledgeBase, RetrievalConfig, RetrievalResult, Tier};
use crate::policy::{Policy, PolicyRequest, Precedent, RequestMode, ResponseMeta};
use crate::schema::{Label, SampleRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    /// Number of voting runs; must be odd.
    pub runs: usize,
    pub retrieval: RetrievalConfig,
    pub max_weight: f64,
    /// Fail with [`Error::NoPrecedents`] instead of predicting out of support.
    pub require_precedents: bool,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            runs: 3,
            retrieval: RetrievalConfig::default(),
            max_weight: DEFAULT_MAX_WEIGHT,
            require_precedents: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRun {
    pub run: usize,
    pub retrieved: RetrievalResult,
    pub hypothesis: String,
    pub weights: WeightSet,
    pub raw_probability: f64,
    pub probability: f64,
    pub classification: Label,
    pub meta: ResponseMeta,
}

/// One prediction: match, retrieve, ask the policy for weights, classify.
pub fn predict_once(
    case: &SampleRecord,
    acpb: &Acpb,
    store: &KnowledgeBase,
    policy: &dyn Policy,
    config: &PredictConfig,
    run: usize,
) -> Result<PredictionRun> {
    let table = acpb.match_record(case)?;
    let retrieved = store.fgmr_retrieve(&table, &config.retrieval)?;
    if retrieved.candidates.is_empty() && config.require_precedents {
        return Err(Error::NoPrecedents);
    }
    let precedents = retrieved
        .candidates
        .iter()
        .filter_map(|c| {
            store.get(c.entry_id).map(|e| Precedent {
                entry_id: e.entry_id,
                similarity: c.mean_similarity,
                weights: e.weights.clone(),
                guidance: e.guidance.clone(),
                teacher_prob: e.teacher_prob,
                label: e.label,
            })
        })
        .collect();
    let state = DiagnosticState::cold_start(table)?;
    let req = PolicyRequest {
        mode: RequestMode::Predict,
        features: acpb.schema.features().to_vec(),
        state,
        reward: None,
        failures: Vec::new(),
        teacher_prob: None,
        precedents,
        run,
        max_weight: config.max_weight,
    };
    let resp = policy.propose(&req).map_err(|source| Error::Policy {
        iteration: 0,
        source,
    })?;
    let mut weights = resp.weights;
    if weights.len() != req.state.table.len() {
        return Err(Error::Policy {
            iteration: 0,
            source: crate::policy::PolicyError::Arity {
                expected: req.state.table.len(),
                got: weights.len(),
            },
        });
    }
    weights.clamp(config.max_weight);
    let raw = raw_probability(&req.state.table, &weights)?;
    let probability = raw.clamp(0.0, 1.0);
    Ok(PredictionRun {
        run,
        retrieved,
        hypothesis: resp.guidance,
        weights,
        raw_probability: raw,
        probability,
        classification: Label::from_probability(probability),
        meta: resp.meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub healthy: usize,
    pub unhealthy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotedPrediction {
    pub sample_id: String,
    pub classification: Label,
    /// Mean probability over the runs that voted with the majority.
    pub probability: f64,
    pub tally: VoteTally,
    pub runs: Vec<PredictionRun>,
}

impl VotedPrediction {
    /// First run agreeing with the final classification.
    pub fn representative(&self) -> &PredictionRun {
        self.runs
            .iter()
            .find(|r| r.classification == self.classification)
            .expect("majority class has at least one run")
    }
}

/// Majority class and the mean probability of its runs. Order of `runs`
/// does not matter.
pub fn tally_votes(runs: &[PredictionRun]) -> (Label, f64, VoteTally) {
    let unhealthy = runs
        .iter()
        .filter(|r| r.classification == Label::Unhealthy)
        .count();
    let tally = VoteTally {
        healthy: runs.len() - unhealthy,
        unhealthy,
    };
    let class = if unhealthy > tally.healthy {
        Label::Unhealthy
    } else {
        Label::Healthy
    };
    let mut probs: Vec<f64> = runs
        .iter()
        .filter(|r| r.classification == class)
        .map(|r| r.probability)
        .collect();
    probs.sort_by(f64::total_cmp);
    let mean = probs.iter().sum::<f64>() / probs.len().max(1) as f64;
    (class, mean, tally)
}

/// Runs `config.runs` predictions concurrently and takes the majority.
pub fn predict_voted(
    case: &SampleRecord,
    acpb: &Acpb,
    store: &KnowledgeBase,
    policy: &dyn Policy,
    config: &PredictConfig,
) -> Result<VotedPrediction> {
    if config.runs == 0 || config.runs.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "voting runs must be odd, got {}",
            config.runs
        )));
    }
    let results: Vec<Result<PredictionRun>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.runs)
            .map(|run| s.spawn(move || predict_once(case, acpb, store, policy, config, run)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction thread panicked"))
            .collect()
    });
    let mut completed = Vec::with_capacity(results.len());
    let mut failure = None;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => completed.push(run),
            Err(e) if failure.is_none() => failure = Some((i, e)),
            Err(_) => {}
        }
    }
    if let Some((failed_run, source)) = failure {
        return Err(Error::Vote {
            failed_run,
            completed,
            source: Box::new(source),
        });
    }
    let (classification, probability, tally) = tally_votes(&completed);
    Ok(VotedPrediction {
        sample_id: case.sample_id.clone(),
        classification,
        probability,
        tally,
        runs: completed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Precedents agree on all three feature groups.
    Strict,
    /// Precedents come from the majority or global tier.
    NonStrict,
    OutOfSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionLine {
    pub feature: String,
    pub contribution: f64,
    pub weight: f64,
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecedentLine {
    pub entry_id: u64,
    pub sample_id: String,
    pub similarities: [f64; 3],
    pub mean_similarity: f64,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub sample_id: String,
    pub classification: Label,
    pub probability: f64,
    pub raw_probability: f64,
    pub tally: VoteTally,
    pub run_probabilities: Vec<f64>,
    pub contributions: Vec<ContributionLine>,
    pub tier: Tier,
    pub support: Support,
    pub precedents: Vec<PrecedentLine>,
    pub guidance: String,
    pub config_fingerprint: String,
}

/// Builds the report from the first run that voted with the majority.
pub fn generate_report(
    voted: &VotedPrediction,
    table: &PatientFeatureTable,
    acpb: &Acpb,
    store: &KnowledgeBase,
    config_fingerprint: &str,
) -> Result<DiagnosisReport> {
    let run = voted.representative();
    let raw = raw_probability(table, &run.weights)?;
    let mut contributions: Vec<ContributionLine> = table
        .entries
        .iter()
        .zip(run.weights.as_slice())
        .zip(acpb.schema.features())
        .map(|((e, &w), spec)| ContributionLine {
            feature: spec.name.clone(),
            contribution: e.contribution,
            weight: w,
            weighted: e.contribution * w,
        })
        .collect();
    contributions.sort_by(|a, b| b.weighted.abs().total_cmp(&a.weighted.abs()));
    let precedents: Vec<PrecedentLine> = run
        .retrieved
        .candidates
        .iter()
        .map(|c| {
            let entry = store.get(c.entry_id);
            PrecedentLine {
                entry_id: c.entry_id,
                sample_id: entry
                    .as_ref()
                    .map(|e| e.sample_id.clone())
                    .unwrap_or_default(),
                similarities: c.similarities,
                mean_similarity: c.mean_similarity,
                label: entry.and_then(|e| e.label),
            }
        })
        .collect();
    let support = match (run.retrieved.tier, precedents.is_empty()) {
        (_, true) => Support::OutOfSupport,
        (Tier::Intersection, false) => Support::Strict,
        _ => Support::NonStrict,
    };
    Ok(DiagnosisReport {
        sample_id: voted.sample_id.clone(),
        classification: voted.classification,
        probability: voted.probability,
        raw_probability: raw,
        tally: voted.tally,
        run_probabilities: voted.runs.iter().map(|r| r.probability).collect(),
        contributions,
        tier: run.retrieved.tier,
        support,
        precedents,
        guidance: run.hypothesis.clone(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}

impl DiagnosisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Diagnosis report: {}", self.sample_id);
        let _ = writeln!(
            s,
            "Classification: {} (code {})",
            self.classification,
            self.classification.code()
        );
        let _ = writeln!(s, "Probability: {:.6}", self.probability);
        let _ = writeln!(s, "Raw probability: {:.6}", self.raw_probability);
        let _ = writeln!(
            s,
            "Votes: healthy {} / unhealthy {} ({})",
            self.tally.healthy,
            self.tally.unhealthy,
            self.run_probabilities
                .iter()
                .map(|p| format!("{p:.6}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let support = match self.support {
            Support::Strict => "strict",
            Support::NonStrict => "non-strict",
            Support::OutOfSupport => "out of support",
        };
        let tier = serde_json::to_value(self.tier).expect("tier serializes");
        let _ = writeln!(
            s,
            "Precedent support: {support} (tier {})",
            tier.as_str().unwrap_or("?")
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Contributions (c * w, ranked by magnitude; base {BASE_PROBABILITY}):"
        );
        let width = self
            .contributions
            .iter()
            .map(|c| c.feature.len())
            .max()
            .unwrap_or(0);
        for c in &self.contributions {
            let _ = writeln!(
                s,
                "  {:<width$}  {:+.6}  (c {:+.6}, w {:.6})",
                c.feature, c.weighted, c.contribution, c.weight
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Precedents:");
        if self.precedents.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for p in &self.precedents {
            let label = p.label.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "  #{} {}  label {}  similarity {:.6} [{:.6}, {:.6}, {:.6}]",
                p.entry_id,
                p.sample_id,
                label,
                p.mean_similarity,
                p.similarities[0],
                p.similarities[1],
                p.similarities[2]
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Guidance:");
        let _ = writeln!(s, "  {}", self.guidance);
        let _ = writeln!(s);
        let _ = writeln!(s, "Config fingerprint: {}", self.config_fingerprint);
        s
    }

    pub fn write(&self, text_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (t, j) = (text_path.as_ref(), json_path.as_ref());
        fs::write(t, self.render_text()).map_err(|e| Error::io(t, e))?;
        fs::write(j, self.to_json()).map_err(|e| Error::io(j, e))
    }
}
