//! Half-step aligned group averaging.
//!
//! Continuous values are assigned to the midpoint grid `x_m = step * m`,
//! `m` any integer, each midpoint owning the half-open interval
//! `[x_m - step/2, x_m + step/2)`. Integer-kind values are their own
//! midpoint. Attributions are averaged per interval to form the SHAP
//! knowledge base.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{FeatureKind, FeatureShapMatrix};

pub const DEFAULT_STEP: f64 = 0.5;

/// Midpoint spacing. The interval half-width is always `step / 2` so the
/// intervals tile the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HagaGrid {
    pub step: f64,
}

impl Default for HagaGrid {
    fn default() -> Self {
        HagaGrid { step: DEFAULT_STEP }
    }
}

impl HagaGrid {
    pub fn new(step: f64) -> Result<Self> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Config(format!(
                "grid step must be positive, got {step}"
            )));
        }
        Ok(HagaGrid { step })
    }

    pub fn half_width(&self) -> f64 {
        self.step / 2.0
    }

    /// Half-open membership test `[mid - hw, mid + hw)`.
    pub fn contains(&self, midpoint: f64, value: f64) -> bool {
        let hw = self.half_width();
        midpoint - hw <= value && value < midpoint + hw
    }

    pub fn midpoint(&self, m: i64) -> f64 {
        m as f64 * self.step
    }

    /// Grid index of the interval holding a continuous value.
    pub fn index_of(&self, value: f64) -> i64 {
        let mut m = ((value + self.half_width()) / self.step).floor() as i64;
        // The division can round across a boundary; settle on the exact predicate.
        while value < self.midpoint(m) - self.half_width() {
            m -= 1;
        }
        while value >= self.midpoint(m) + self.half_width() {
            m += 1;
        }
        m
    }

    pub fn assign(&self, value: f64, kind: FeatureKind) -> Result<f64> {
        match kind {
            FeatureKind::Continuous => Ok(self.midpoint(self.index_of(value))),
            FeatureKind::Integer => {
                if value.fract() != 0.0 || !value.is_finite() {
                    Err(Error::NotWhole(value))
                } else {
                    Ok(value)
                }
            }
        }
    }
}

/// Midpoint for `value` on the default 0.5 grid.
pub fn assign_interval(value: f64, kind: FeatureKind) -> Result<f64> {
    HagaGrid::default().assign(value, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalStat {
    pub midpoint: f64,
    pub mean_shap: f64,
    pub count: usize,
}

/// Per-feature interval means, midpoints strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapKnowledgeBase {
    pub grid: HagaGrid,
    pub features: Vec<Vec<IntervalStat>>,
}

impl ShapKnowledgeBase {
    pub fn nearest_midpoint(&self, feature: usize, value: f64) -> Result<f64> {
        let entries = &self.features[feature];
        nearest_index(entries, |e| e.midpoint, value)
            .map(|i| entries[i].midpoint)
            .ok_or_else(|| Error::EmptySubBase(format!("#{feature}")))
    }
}

/// Index of the entry whose midpoint is closest to `value`; ties go to the
/// smaller midpoint. `entries` must be sorted by midpoint.
pub fn nearest_index<T>(entries: &[T], midpoint: impl Fn(&T) -> f64, value: f64) -> Option<usize> {
    if entries.is_empty() {
        return None;
    }
    let hi = entries.partition_point(|e| midpoint(e) < value);
    if hi == 0 {
        return Some(0);
    }
    if hi == entries.len() {
        return Some(entries.len() - 1);
    }
    let lo = hi - 1;
    let d_lo = value - midpoint(&entries[lo]);
    let d_hi = midpoint(&entries[hi]) - value;
    Some(if d_hi < d_lo { hi } else { lo })
}

/// Groups every feature column of `matrix` into intervals and averages the
/// attributions in each.
pub fn build_knowledge_base(
    matrix: &FeatureShapMatrix,
    grid: HagaGrid,
) -> Result<ShapKnowledgeBase> {
    let features = matrix
        .schema
        .features()
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut pairs = matrix
                .rows
                .iter()
                .map(|r| {
                    let shap = r.shap.as_ref().expect("matrix rows carry attributions")[j];
                    grid.assign(r.values[j], spec.kind).map(|m| (m, shap))
                })
                .collect::<Result<Vec<_>>>()?;
            // Sorting by (midpoint, attribution) makes the sums independent of row order.
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let mut out: Vec<IntervalStat> = Vec::new();
            let mut sum = 0.0;
            for (i, &(mid, shap)) in pairs.iter().enumerate() {
                match out.last_mut() {
                    Some(last) if last.midpoint == mid => {
                        sum += shap;
                        last.count += 1;
                    }
                    _ => {
                        if let Some(last) = out.last_mut() {
                            last.mean_shap = sum / last.count as f64;
                        }
                        out.push(IntervalStat {
                            midpoint: mid,
                            mean_shap: 0.0,
                            count: 1,
                        });
                        sum = shap;
                    }
                }
                if i + 1 == pairs.len() {
                    let last = out.last_mut().unwrap();
                    last.mean_shap = sum / last.count as f64;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapKnowledgeBase { grid, features })
}
