//! Metrics, bias statistics, concordance and the synthetic additive teacher.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cacs::{sigmoid, Acpb};
use crate::calibration::{infer_probability, WeightSet};
use crate::error::{Error, Result};
use crate::haga::{HagaGrid, DEFAULT_STEP};
use crate::schema::{
    FeatureKind, FeatureSchema, FeatureShapMatrix, FeatureSpec, Label, SampleRecord,
};

/// Positive class is unhealthy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn from_labels(predicted: &[Label], truth: &[Label]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::LengthMismatch {
                left: predicted.len(),
                right: truth.len(),
            });
        }
        let mut cm = ConfusionMatrix::default();
        for (p, t) in predicted.iter().zip(truth) {
            match (p, t) {
                (Label::Unhealthy, Label::Unhealthy) => cm.tp += 1,
                (Label::Healthy, Label::Healthy) => cm.tn += 1,
                (Label::Unhealthy, Label::Healthy) => cm.fp += 1,
                (Label::Healthy, Label::Unhealthy) => cm.fn_ += 1,
            }
        }
        Ok(cm)
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub unhealthy: ClassMetrics,
    pub healthy: ClassMetrics,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn class(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> Metrics {
    Metrics {
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        unhealthy: class(cm.tp, cm.fp, cm.fn_),
        healthy: class(cm.tn, cm.fn_, cm.fp),
    }
}

/// Statistics of `|a - b|` with population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn bias_stats(teacher_probs: &[f64], infer_probs: &[f64]) -> Result<BiasStats> {
    if teacher_probs.len() != infer_probs.len() {
        return Err(Error::LengthMismatch {
            left: teacher_probs.len(),
            right: infer_probs.len(),
        });
    }
    if teacher_probs.is_empty() {
        return Err(Error::EmptyInput("bias statistics"));
    }
    let d: Vec<f64> = teacher_probs
        .iter()
        .zip(infer_probs)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    let std = (d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
    let mut sorted = d;
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(BiasStats {
        n,
        mean,
        std,
        median,
        min: sorted[0],
        max: sorted[n - 1],
    })
}

/// Teacher probability against the cold-start inferred probability
/// (all weights 1) for every row of `matrix`.
pub fn cacs_fidelity(matrix: &FeatureShapMatrix, acpb: &Acpb) -> Result<BiasStats> {
    let mut teacher = Vec::with_capacity(matrix.len());
    let mut inferred = Vec::with_capacity(matrix.len());
    for row in &matrix.rows {
        let table = acpb.match_record(row)?;
        inferred.push(infer_probability(&table, &WeightSet::ones(table.len()))?);
        teacher.push(
            row.teacher_prob
                .expect("matrix rows carry teacher probabilities"),
        );
    }
    bias_stats(&teacher, &inferred)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcordanceCategory {
    BothCorrect,
    BothWrong,
    AOnlyCorrect,
    BOnlyCorrect,
}

impl ConcordanceCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ConcordanceCategory::BothCorrect => "both_correct",
            ConcordanceCategory::BothWrong => "both_wrong",
            ConcordanceCategory::AOnlyCorrect => "a_only_correct",
            ConcordanceCategory::BOnlyCorrect => "b_only_correct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceFractions {
    pub both_correct: f64,
    pub both_wrong: f64,
    pub a_only_correct: f64,
    pub b_only_correct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceBreakdown {
    pub n: usize,
    pub both_correct: usize,
    pub both_wrong: usize,
    pub a_only_correct: usize,
    pub b_only_correct: usize,
    /// Absent when `n == 0`.
    pub fractions: Option<ConcordanceFractions>,
    pub categories: Vec<ConcordanceCategory>,
}

impl ConcordanceBreakdown {
    pub fn from_counts(
        both_correct: usize,
        both_wrong: usize,
        a_only_correct: usize,
        b_only_correct: usize,
    ) -> Self {
        let n = both_correct + both_wrong + a_only_correct + b_only_correct;
        let f = |c: usize| c as f64 / n as f64;
        ConcordanceBreakdown {
            n,
            both_correct,
            both_wrong,
            a_only_correct,
            b_only_correct,
            fractions: (n > 0).then(|| ConcordanceFractions {
                both_correct: f(both_correct),
                both_wrong: f(both_wrong),
                a_only_correct: f(a_only_correct),
                b_only_correct: f(b_only_correct),
            }),
            categories: Vec::new(),
        }
    }
}

pub fn concordance(
    preds_a: &[Label],
    preds_b: &[Label],
    truth: &[Label],
) -> Result<ConcordanceBreakdown> {
    for len in [preds_b.len(), truth.len()] {
        if len != preds_a.len() {
            return Err(Error::LengthMismatch {
                left: preds_a.len(),
                right: len,
            });
        }
    }
    let categories: Vec<ConcordanceCategory> = preds_a
        .iter()
        .zip(preds_b)
        .zip(truth)
        .map(|((a, b), t)| match (a == t, b == t) {
            (true, true) => ConcordanceCategory::BothCorrect,
            (false, false) => ConcordanceCategory::BothWrong,
            (true, false) => ConcordanceCategory::AOnlyCorrect,
            (false, true) => ConcordanceCategory::BOnlyCorrect,
        })
        .collect();
    let count = |c| categories.iter().filter(|&&x| x == c).count();
    let mut out = ConcordanceBreakdown::from_counts(
        count(ConcordanceCategory::BothCorrect),
        count(ConcordanceCategory::BothWrong),
        count(ConcordanceCategory::AOnlyCorrect),
        count(ConcordanceCategory::BOnlyCorrect),
    );
    out.categories = categories;
    Ok(out)
}

pub const MAX_SHAPLEY_FEATURES: usize = 8;

/// Exact Shapley values of `f` at `x` by enumerating every coalition;
/// absent features take their value from `means`.
pub fn shapley_brute(f: &dyn Fn(&[f64]) -> f64, means: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if means.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: means.len(),
        });
    }
    if n > MAX_SHAPLEY_FEATURES {
        return Err(Error::TooManyFeatures {
            max: MAX_SHAPLEY_FEATURES,
            got: n,
        });
    }
    let values: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            let point: Vec<f64> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { x[i] } else { means[i] })
                .collect();
            f(&point)
        })
        .collect();
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    Ok((0..n)
        .map(|i| {
            let mut phi = 0.0;
            for mask in 0..1usize << n {
                if mask >> i & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact[s] * fact[n - s - 1] / fact[n];
                phi += w * (values[mask | 1 << i] - values[mask]);
            }
            phi
        })
        .collect())
}

/// One feature of the synthetic teacher. Values are drawn uniformly over
/// `levels` consecutive grid intervals starting at `first_level`; the
/// effect is constant within each interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeature {
    pub name: String,
    pub kind: FeatureKind,
    pub first_level: i64,
    /// Effect per level; its length is the number of levels.
    pub effects: Vec<f64>,
}

impl SynthFeature {
    /// Grid midpoint of level `j` (integers for integer-kind features).
    pub fn midpoint(&self, j: usize) -> f64 {
        let m = self.first_level + j as i64;
        match self.kind {
            FeatureKind::Integer => m as f64,
            FeatureKind::Continuous => m as f64 * DEFAULT_STEP,
        }
    }

    /// `E[f_i]` under the uniform level distribution.
    pub fn expected_effect(&self) -> f64 {
        self.effects.iter().sum::<f64>() / self.effects.len() as f64
    }

    pub fn effect_at(&self, value: f64) -> f64 {
        let m = match self.kind {
            FeatureKind::Integer => value.round() as i64,
            FeatureKind::Continuous => HagaGrid::default().index_of(value),
        };
        let j = (m - self.first_level).clamp(0, self.effects.len() as i64 - 1);
        self.effects[j as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTeacherConfig {
    pub seed: u64,
    pub n_features: usize,
    pub levels: usize,
    /// Raw effects are drawn from `[-max_effect, max_effect]` and then
    /// centred, so attributions stay within `2 * max_effect`.
    pub max_effect: f64,
    pub intercept: f64,
    /// Every `integer_every`-th feature is integer-kind; 0 disables.
    pub integer_every: usize,
    /// Explicit features; generated from the seed when empty.
    pub features: Vec<SynthFeature>,
}

impl Default for SyntheticTeacherConfig {
    fn default() -> Self {
        SyntheticTeacherConfig {
            seed: 1,
            n_features: 15,
            levels: 6,
            max_effect: 0.15,
            intercept: 0.0,
            integer_every: 3,
            features: Vec::new(),
        }
    }
}

impl SyntheticTeacherConfig {
    pub fn resolved_features(&self) -> Result<Vec<SynthFeature>> {
        if !self.features.is_empty() {
            for f in &self.features {
                if f.effects.is_empty() || f.effects.iter().any(|e| !e.is_finite()) {
                    return Err(Error::Config(format!(
                        "feature `{}` needs finite effects",
                        f.name
                    )));
                }
            }
            return Ok(self.features.clone());
        }
        if self.levels == 0 || !(self.max_effect >= 0.0 && self.max_effect.is_finite()) {
            return Err(Error::Config(
                "levels must be positive and max_effect non-negative".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        Ok((0..self.n_features)
            .map(|i| {
                let kind = if self.integer_every > 0 && (i + 1) % self.integer_every == 0 {
                    FeatureKind::Integer
                } else {
                    FeatureKind::Continuous
                };
                let first_level = rng.random_range(-4i64..=4);
                let mut effects: Vec<f64> = (0..self.levels)
                    .map(|_| rng.random_range(-self.max_effect..=self.max_effect))
                    .collect();
                let mean = effects.iter().sum::<f64>() / effects.len() as f64;
                effects.iter_mut().for_each(|e| *e -= mean);
                SynthFeature {
                    name: format!("x{:02}", i + 1),
                    kind,
                    first_level,
                    effects,
                }
            })
            .collect())
    }
}

/// The additive teacher `f(x) = intercept + sum_i f_i(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveTeacher {
    pub features: Vec<SynthFeature>,
    pub intercept: f64,
}

impl AdditiveTeacher {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .features
                .iter()
                .zip(x)
                .map(|(f, &v)| f.effect_at(v))
                .sum::<f64>()
    }

    pub fn base_value(&self) -> f64 {
        self.intercept
            + self
                .features
                .iter()
                .map(SynthFeature::expected_effect)
                .sum::<f64>()
    }

    /// `f_i(x_i) - E[f_i]`.
    pub fn attributions(&self, x: &[f64]) -> Vec<f64> {
        self.features
            .iter()
            .zip(x)
            .map(|(f, &v)| f.effect_at(v) - f.expected_effect())
            .collect()
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            self.features
                .iter()
                .map(|f| FeatureSpec::new(f.name.clone(), f.kind, "synthetic"))
                .collect(),
            None,
        )
    }
}

/// Draws `n` rows from the synthetic teacher; identical for identical configs.
pub fn synth_generate(config: &SyntheticTeacherConfig, n: usize) -> Result<FeatureShapMatrix> {
    let teacher = AdditiveTeacher {
        features: config.resolved_features()?,
        intercept: config.intercept,
    };
    let schema = teacher.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hw = DEFAULT_STEP / 2.0;
    let width = (n.max(1) as f64).log10().floor() as usize + 1;
    let rows = (0..n)
        .map(|r| {
            let values: Vec<f64> = teacher
                .features
                .iter()
                .map(|f| {
                    let mid = f.midpoint(rng.random_range(0..f.effects.len()));
                    match f.kind {
                        FeatureKind::Integer => mid,
                        FeatureKind::Continuous => mid + rng.random_range(-hw..hw),
                    }
                })
                .collect();
            let shap = teacher.attributions(&values);
            let teacher_prob = sigmoid(teacher.base_value() + shap.iter().sum::<f64>());
            SampleRecord {
                sample_id: format!("syn{:0width$}", r + 1),
                values,
                shap: Some(shap),
                teacher_prob: Some(teacher_prob),
                label: Some(Label::from_probability(teacher_prob)),
            }
        })
        .collect();
    FeatureShapMatrix::new(schema, teacher.base_value(), rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub sample_ids: Vec<String>,
    pub model_a: ModelEvaluation,
    pub model_b: Option<ModelEvaluation>,
    pub concordance: Option<ConcordanceBreakdown>,
    pub bias: Option<BiasStats>,
}

/// Rows of a `sample_id,<value>` file.
pub type Column = [(String, f64)];

/// Two-column CSV `sample_id,<value>` with a header row.
pub fn load_column(path: impl AsRef<Path>) -> Result<Vec<(String, f64)>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(&ctx, e))?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&ctx, e))?;
        if rec.len() < 2 {
            return Err(Error::parse(
                &ctx,
                format!("row {} has {} column(s), expected 2", i + 1, rec.len()),
            ));
        }
        let v: f64 = rec[1].parse().map_err(|_| Error::InvalidRecord {
            row: i + 1,
            sample_id: rec[0].to_string(),
            feature: None,
            message: format!("non-numeric value `{}`", &rec[1]),
        })?;
        out.push((rec[0].to_string(), v));
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, Label)>> {
    let path = path.as_ref();
    load_column(path)?
        .into_iter()
        .enumerate()
        .map(|(i, (id, v))| {
            let label = match v {
                0.0 => Label::Healthy,
                1.0 => Label::Unhealthy,
                _ => {
                    return Err(Error::InvalidRecord {
                        row: i + 1,
                        sample_id: id,
                        feature: None,
                        message: format!("label must be 0 or 1, got {v}"),
                    })
                }
            };
            Ok((id, label))
        })
        .collect()
}

/// Checks that `other` lists the same sample ids in the same order.
pub fn check_aligned<T, U>(
    reference: &[(String, T)],
    other: &[(String, U)],
    what: &str,
) -> Result<()> {
    if reference.len() != other.len() {
        return Err(Error::LengthMismatch {
            left: reference.len(),
            right: other.len(),
        });
    }
    for (i, ((a, _), (b, _))) in reference.iter().zip(other).enumerate() {
        if a != b {
            return Err(Error::parse(
                what,
                format!("row {} has sample `{b}`, expected `{a}`", i + 1),
            ));
        }
    }
    Ok(())
}

pub fn evaluate(
    truth: &[(String, Label)],
    preds_a: &[(String, Label)],
    preds_b: Option<&[(String, Label)]>,
    probs: Option<(&Column, &Column)>,
) -> Result<EvaluationReport> {
    check_aligned(truth, preds_a, "predictions A")?;
    let labels = |v: &[(String, Label)]| v.iter().map(|(_, l)| *l).collect::<Vec<_>>();
    let t = labels(truth);
    let a = labels(preds_a);
    let cm_a = ConfusionMatrix::from_labels(&a, &t)?;
    let (model_b, conc) = match preds_b {
        Some(pb) => {
            check_aligned(truth, pb, "predictions B")?;
            let b = labels(pb);
            let cm_b = ConfusionMatrix::from_labels(&b, &t)?;
            (
                Some(ModelEvaluation {
                    confusion: cm_b,
                    metrics: class_metrics(&cm_b),
                }),
                Some(concordance(&a, &b, &t)?),
            )
        }
        None => (None, None),
    };
    let bias = match probs {
        Some((tp, ip)) => {
            check_aligned(tp, ip, "probabilities")?;
            let x: Vec<f64> = tp.iter().map(|(_, v)| *v).collect();
            let y: Vec<f64> = ip.iter().map(|(_, v)| *v).collect();
            Some(bias_stats(&x, &y)?)
        }
        None => None,
    };
    Ok(EvaluationReport {
        n: truth.len(),
        sample_ids: truth.iter().map(|(id, _)| id.clone()).collect(),
        model_a: ModelEvaluation {
            confusion: cm_a,
            metrics: class_metrics(&cm_a),
        },
        model_b,
        concordance: conc,
        bias,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "undefined".into())
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serializes") + "\n"
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut model = |name: &str, m: &ModelEvaluation| {
            let c = m.confusion;
            let _ = writeln!(s, "== {name} ==");
            let _ = writeln!(s, "confusion (rows truth, cols predicted):");
            let _ = writeln!(s, "              healthy  unhealthy");
            let _ = writeln!(s, "  healthy    {:>8}  {:>9}", c.tn, c.fp);
            let _ = writeln!(s, "  unhealthy  {:>8}  {:>9}", c.fn_, c.tp);
            let _ = writeln!(s, "accuracy {}", opt(m.metrics.accuracy));
            let _ = writeln!(s, "  class      precision  recall     f1         support");
            for (label, cm) in [
                ("healthy", m.metrics.healthy),
                ("unhealthy", m.metrics.unhealthy),
            ] {
                let _ = writeln!(
                    s,
                    "  {label:<9}  {:<9}  {:<9}  {:<9}  {}",
                    opt(cm.precision),
                    opt(cm.recall),
                    opt(cm.f1),
                    cm.support
                );
            }
            let _ = writeln!(s);
        };
        model("model A", &self.model_a);
        if let Some(b) = &self.model_b {
            model("model B", b);
        }
        if let Some(c) = &self.concordance {
            let pct = |f: Option<f64>| {
                f.map(|x| format!("{:.1}%", 100.0 * x))
                    .unwrap_or_else(|| "undefined".into())
            };
            let fr = c.fractions;
            let _ = writeln!(s, "== concordance (n = {}) ==", c.n);
            let _ = writeln!(
                s,
                "  both correct    {:>5}  {}",
                c.both_correct,
                pct(fr.map(|f| f.both_correct))
            );
            let _ = writeln!(
                s,
                "  both wrong      {:>5}  {}",
                c.both_wrong,
                pct(fr.map(|f| f.both_wrong))
            );
            let _ = writeln!(
                s,
                "  only A correct  {:>5}  {}",
                c.a_only_correct,
                pct(fr.map(|f| f.a_only_correct))
            );
            let _ = writeln!(
                s,
                "  only B correct  {:>5}  {}",
                c.b_only_correct,
                pct(fr.map(|f| f.b_only_correct))
            );
            let _ = writeln!(s);
        }
        if let Some(b) = &self.bias {
            let _ = writeln!(s, "== absolute probability deviation (n = {}) ==", b.n);
            let _ = writeln!(
                s,
                "  mean {:.6}  std {:.6}  median {:.6}  min {:.6}  max {:.6}",
                b.mean, b.std, b.median, b.min, b.max
            );
        }
        s
    }

    /// `sample_id,category` lines, one per sample.
    pub fn render_categories(&self) -> Option<String> {
        let c = self.concordance.as_ref()?;
        let mut s = String::from("sample_id,category\n");
        for (id, cat) in self.sample_ids.iter().zip(&c.categories) {
            let _ = writeln!(s, "{id},{}", cat.as_str());
        }
        Some(s)
    }
}

/// Per-category sample counts, keyed by category name.
pub fn category_counts(categories: &[ConcordanceCategory]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for c in categories {
        *m.entry(c.as_str()).or_default() += 1;
    }
    m
}
