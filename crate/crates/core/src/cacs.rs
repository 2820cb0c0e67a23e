//! Contrastive attribution via sigmoid: every interval mean attribution
//! `phi` becomes a contribution probability `sigmoid(z + phi) - sigmoid(z)`
//! with `z` the matrix base value. The result is the average contribution
//! probability base (ACPB) that records are matched against.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haga::{self, HagaGrid, ShapKnowledgeBase};
use crate::schema::{FeatureSchema, FeatureShapMatrix, SampleRecord};

/// Logistic function, evaluated without overflow on either tail.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid(z + phi) - sigmoid(z)`.
///
/// Computed as `sinh(phi/2) / (2 cosh((z+phi)/2) cosh(z/2))`, which is the
/// same quantity without cancellation: the sign follows `phi` and small
/// attributions never collapse to zero.
pub fn contribution_probability(base_value: f64, mean_shap: f64) -> f64 {
    let num = (mean_shap / 2.0).sinh();
    let den = 2.0 * ((base_value + mean_shap) / 2.0).cosh() * (base_value / 2.0).cosh();
    num / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcpbEntry {
    pub midpoint: f64,
    pub mean_shap: f64,
    pub contribution_prob: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcpbFeature {
    pub name: String,
    pub entries: Vec<AcpbEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acpb {
    pub format: String,
    pub version: u32,
    pub base_value: f64,
    pub grid: HagaGrid,
    pub schema: FeatureSchema,
    pub features: Vec<AcpbFeature>,
}

pub const ACPB_FORMAT: &str = "acpb";
pub const ACPB_VERSION: u32 = 1;

pub fn build_acpb(
    skb: &ShapKnowledgeBase,
    schema: &FeatureSchema,
    base_value: f64,
) -> Result<Acpb> {
    if skb.features.len() != schema.len() {
        return Err(Error::SchemaMismatch(format!(
            "knowledge base has {} features, schema {}",
            skb.features.len(),
            schema.len()
        )));
    }
    let features = skb
        .features
        .iter()
        .zip(schema.features())
        .map(|(stats, spec)| AcpbFeature {
            name: spec.name.clone(),
            entries: stats
                .iter()
                .map(|s| AcpbEntry {
                    midpoint: s.midpoint,
                    mean_shap: s.mean_shap,
                    contribution_prob: contribution_probability(base_value, s.mean_shap),
                    count: s.count,
                })
                .collect(),
        })
        .collect();
    Ok(Acpb {
        format: ACPB_FORMAT.into(),
        version: ACPB_VERSION,
        base_value,
        grid: skb.grid,
        schema: schema.clone(),
        features,
    })
}

/// HAGA followed by CACS over a whole matrix.
pub fn extract(matrix: &FeatureShapMatrix, grid: HagaGrid) -> Result<Acpb> {
    if matrix.rows.is_empty() {
        return Err(Error::EmptyInput("extraction"));
    }
    let skb = haga::build_knowledge_base(matrix, grid)?;
    build_acpb(&skb, &matrix.schema, matrix.base_value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub raw_value: f64,
    pub midpoint: f64,
    pub contribution: f64,
}

/// A record's values matched to the nearest ACPB intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFeatureTable {
    pub entries: Vec<FeatureMatch>,
}

impl PatientFeatureTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contributions(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.contribution)
    }

    pub fn raw_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|e| e.raw_value)
    }
}

impl Acpb {
    pub fn nearest_midpoint(&self, feature: usize, value: f64) -> Result<f64> {
        let f = &self.features[feature];
        haga::nearest_index(&f.entries, |e| e.midpoint, value)
            .map(|i| f.entries[i].midpoint)
            .ok_or_else(|| Error::EmptySubBase(f.name.clone()))
    }

    pub fn match_values(&self, values: &[f64]) -> Result<PatientFeatureTable> {
        if values.len() != self.features.len() {
            return Err(Error::Arity {
                expected: self.features.len(),
                got: values.len(),
            });
        }
        let entries = values
            .iter()
            .zip(&self.features)
            .map(|(&v, f)| {
                let i = haga::nearest_index(&f.entries, |e| e.midpoint, v)
                    .ok_or_else(|| Error::EmptySubBase(f.name.clone()))?;
                Ok(FeatureMatch {
                    raw_value: v,
                    midpoint: f.entries[i].midpoint,
                    contribution: f.entries[i].contribution_prob,
                })
            })
            .collect::<Result<_>>()?;
        Ok(PatientFeatureTable { entries })
    }

    pub fn match_record(&self, record: &SampleRecord) -> Result<PatientFeatureTable> {
        self.match_values(&record.values)
    }

    pub fn interval_counts(&self) -> Vec<(String, usize)> {
        self.features
            .iter()
            .map(|f| (f.name.clone(), f.entries.len()))
            .collect()
    }
}

pub fn match_record(record: &SampleRecord, acpb: &Acpb) -> Result<PatientFeatureTable> {
    acpb.match_record(record)
}

pub fn write_acpb(path: impl AsRef<Path>, acpb: &Acpb) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(acpb).expect("acpb serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_acpb(path: impl AsRef<Path>) -> Result<Acpb> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let acpb: Acpb =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    if acpb.format != ACPB_FORMAT || acpb.version != ACPB_VERSION {
        return Err(Error::parse(
            path.display().to_string(),
            format!("unsupported format {} v{}", acpb.format, acpb.version),
        ));
    }
    if acpb.features.len() != acpb.schema.len() {
        return Err(Error::SchemaMismatch(
            "ACPB feature count differs from its schema".into(),
        ));
    }
    Ok(acpb)
}
