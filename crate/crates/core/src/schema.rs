//! Feature schema and the teacher's exported files: the attribution matrix
//! (values, attributions, teacher probability, label per sample) and single
//! case files holding raw values only.
//!
//! Matrix files are CSV with a leading `# base_value=<f64>` metadata line,
//! then a header `sample_id, v_<name>.., s_<name>.., teacher_prob, label`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Integer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default)]
    pub description: String,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind, description: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind,
            description: description.into(),
        }
    }
}

/// Ordered features plus the three equal-sized retrieval groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
    groups: [Vec<usize>; 3],
}

/// On-disk shape of a schema: groups are listed by feature name.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    features: Vec<FeatureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<Vec<Vec<String>>>,
}

impl TryFrom<SchemaFile> for FeatureSchema {
    type Error = Error;

    fn try_from(file: SchemaFile) -> Result<Self> {
        let groups = match file.groups {
            None => None,
            Some(named) => {
                if named.len() != 3 {
                    return Err(Error::Schema(format!(
                        "expected 3 groups, got {}",
                        named.len()
                    )));
                }
                let mut out: [Vec<usize>; 3] = Default::default();
                for (slot, names) in out.iter_mut().zip(named) {
                    for name in names {
                        let idx = file
                            .features
                            .iter()
                            .position(|f| f.name == name)
                            .ok_or_else(|| {
                                Error::Schema(format!("group names unknown feature `{name}`"))
                            })?;
                        slot.push(idx);
                    }
                }
                Some(out)
            }
        };
        FeatureSchema::new(file.features, groups)
    }
}

impl From<FeatureSchema> for SchemaFile {
    fn from(schema: FeatureSchema) -> Self {
        let groups = schema
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| schema.features[i].name.clone()).collect())
            .collect();
        SchemaFile {
            features: schema.features,
            groups: Some(groups),
        }
    }
}

impl FeatureSchema {
    /// Validates names and the partition. With `groups == None` the features
    /// are split into contiguous thirds in declared order.
    pub fn new(features: Vec<FeatureSpec>, groups: Option<[Vec<usize>; 3]>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Schema("no features declared".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(Error::Schema("empty feature name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!(
                    "duplicate feature name `{}`",
                    f.name
                )));
            }
        }
        let n = features.len();
        let groups = match groups {
            Some(g) => g,
            None => {
                if !n.is_multiple_of(3) {
                    return Err(Error::Schema(format!(
                        "{n} features cannot be divided into 3 equal groups"
                    )));
                }
                let third = n / 3;
                [
                    (0..third).collect(),
                    (third..2 * third).collect(),
                    (2 * third..n).collect(),
                ]
            }
        };
        validate_partition(&groups, n)?;
        Ok(FeatureSchema { features, groups })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn groups(&self) -> &[Vec<usize>; 3] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Stable digest of names, kinds and grouping. Descriptions are excluded
    /// so rewording them does not invalidate stores.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.features {
            h.update(f.name.as_bytes());
            h.update([0u8]);
            h.update(match f.kind {
                FeatureKind::Continuous => b"c",
                FeatureKind::Integer => b"i",
            });
        }
        for g in &self.groups {
            h.update(b"|");
            for i in g {
                h.update((*i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks arity, finiteness and integer-kind wholeness of raw values.
    pub fn check_values(&self, values: &[f64]) -> std::result::Result<(), (Option<usize>, String)> {
        if values.len() != self.len() {
            return Err((
                None,
                format!("expected {} values, got {}", self.len(), values.len()),
            ));
        }
        for (j, (&v, spec)) in values.iter().zip(&self.features).enumerate() {
            if !v.is_finite() {
                return Err((Some(j), format!("value {v} is not finite")));
            }
            if spec.kind == FeatureKind::Integer && v.fract() != 0.0 {
                return Err((Some(j), format!("integer feature holds {v}")));
            }
        }
        Ok(())
    }
}

fn validate_partition(groups: &[Vec<usize>; 3], n: usize) -> Result<()> {
    let size = groups[0].len();
    if groups.iter().any(|g| g.len() != size) || size * 3 != n {
        return Err(Error::Schema(format!(
            "groups of sizes {}/{}/{} are not an equal 3-way split of {n} features",
            groups[0].len(),
            groups[1].len(),
            groups[2].len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in groups.iter().flatten() {
        if i >= n {
            return Err(Error::Schema(format!("group index {i} out of range")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Schema(format!(
                "feature index {i} appears in two groups"
            )));
        }
    }
    Ok(())
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<FeatureSchema> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn write_schema(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(schema).expect("schema serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Healthy = 0,
    Unhealthy = 1,
}

impl Label {
    /// Probabilities at or above 0.5 are unhealthy.
    pub fn from_probability(p: f64) -> Self {
        if p >= 0.5 {
            Label::Unhealthy
        } else {
            Label::Healthy
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.code()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Healthy),
            1 => Ok(Label::Unhealthy),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Healthy => "healthy",
            Label::Unhealthy => "unhealthy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shap: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl SampleRecord {
    pub fn unlabeled(sample_id: impl Into<String>, values: Vec<f64>) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            values,
            shap: None,
            teacher_prob: None,
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureShapMatrix {
    pub schema: FeatureSchema,
    pub base_value: f64,
    pub rows: Vec<SampleRecord>,
}

impl FeatureShapMatrix {
    /// Validates every row against the schema.
    pub fn new(schema: FeatureSchema, base_value: f64, rows: Vec<SampleRecord>) -> Result<Self> {
        if !base_value.is_finite() {
            return Err(Error::parse(
                "matrix",
                format!("base_value {base_value} is not finite"),
            ));
        }
        for (i, row) in rows.iter().enumerate() {
            validate_matrix_row(&schema, i + 1, row)?;
        }
        Ok(FeatureShapMatrix {
            schema,
            base_value,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn validate_matrix_row(schema: &FeatureSchema, row: usize, rec: &SampleRecord) -> Result<()> {
    let invalid = |feature: Option<usize>, message: String| Error::InvalidRecord {
        row,
        sample_id: rec.sample_id.clone(),
        feature: feature.map(|j| schema.features()[j].name.clone()),
        message,
    };
    schema
        .check_values(&rec.values)
        .map_err(|(j, m)| invalid(j, m))?;
    let shap = rec
        .shap
        .as_ref()
        .ok_or_else(|| invalid(None, "missing attributions".into()))?;
    if shap.len() != schema.len() {
        return Err(invalid(
            None,
            format!("expected {} attributions, got {}", schema.len(), shap.len()),
        ));
    }
    if let Some(j) = shap.iter().position(|s| !s.is_finite()) {
        return Err(invalid(
            Some(j),
            format!("attribution {} is not finite", shap[j]),
        ));
    }
    match rec.teacher_prob {
        Some(p) if p > 0.0 && p < 1.0 => Ok(()),
        Some(p) => Err(invalid(None, format!("teacher_prob {p} outside (0, 1)"))),
        None => Err(invalid(None, "missing teacher_prob".into())),
    }
}

const BASE_VALUE_PREFIX: &str = "# base_value=";

fn matrix_header(schema: &FeatureSchema) -> Vec<String> {
    let mut cols = vec!["sample_id".to_string()];
    cols.extend(schema.features().iter().map(|f| format!("v_{}", f.name)));
    cols.extend(schema.features().iter().map(|f| format!("s_{}", f.name)));
    cols.push("teacher_prob".into());
    cols.push("label".into());
    cols
}

fn column_positions(
    header: &csv::StringRecord,
    wanted: &[String],
    context: &str,
) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            header
                .iter()
                .position(|h| h.trim() == w)
                .ok_or_else(|| Error::MissingColumn {
                    context: context.to_string(),
                    column: w.clone(),
                })
        })
        .collect()
}

fn parse_cell(raw: &str, row: usize, sample_id: &str, feature: Option<&str>) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::InvalidRecord {
        row,
        sample_id: sample_id.to_string(),
        feature: feature.map(str::to_string),
        message: format!("non-numeric cell `{raw}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidRecord {
            row,
            sample_id: sample_id.to_string(),
            feature: feature.map(str::to_string),
            message: format!("non-finite cell `{raw}`"),
        });
    }
    Ok(v)
}

pub fn load_matrix(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<FeatureShapMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, schema, &path.display().to_string())
}

pub fn parse_matrix(
    text: &str,
    schema: &FeatureSchema,
    context: &str,
) -> Result<FeatureShapMatrix> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let base_value: f64 = first
        .trim()
        .strip_prefix(BASE_VALUE_PREFIX)
        .ok_or_else(|| Error::parse(context, "first line must be `# base_value=<number>`"))?
        .trim()
        .parse()
        .map_err(|e| Error::parse(context, format!("base_value: {e}")))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(rest.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(context, e))?
        .clone();
    let wanted = matrix_header(schema);
    let pos = column_positions(&header, &wanted, context)?;
    let n = schema.len();

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::parse(context, e))?;
        let cell = |k: usize| rec.get(pos[k]).unwrap_or("");
        let sample_id = cell(0).to_string();
        let mut values = Vec::with_capacity(n);
        let mut shap = Vec::with_capacity(n);
        for (j, f) in schema.features().iter().enumerate() {
            values.push(parse_cell(cell(1 + j), row, &sample_id, Some(&f.name))?);
            shap.push(parse_cell(cell(1 + n + j), row, &sample_id, Some(&f.name))?);
        }
        let teacher_prob = parse_cell(cell(1 + 2 * n), row, &sample_id, None)?;
        let label = match cell(2 + 2 * n).trim() {
            "" => None,
            "0" => Some(Label::Healthy),
            "1" => Some(Label::Unhealthy),
            other => {
                return Err(Error::InvalidRecord {
                    row,
                    sample_id,
                    feature: None,
                    message: format!("label `{other}` is not 0 or 1"),
                })
            }
        };
        rows.push(SampleRecord {
            sample_id,
            values,
            shap: Some(shap),
            teacher_prob: Some(teacher_prob),
            label,
        });
    }
    FeatureShapMatrix::new(schema.clone(), base_value, rows)
}

pub fn write_matrix(path: impl AsRef<Path>, matrix: &FeatureShapMatrix) -> Result<()> {
    let path = path.as_ref();
    let text = render_matrix(matrix);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_matrix(matrix: &FeatureShapMatrix) -> String {
    let mut out = Vec::new();
    writeln!(out, "{BASE_VALUE_PREFIX}{}", matrix.base_value).unwrap();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(matrix_header(&matrix.schema)).unwrap();
        for r in &matrix.rows {
            let mut rec = vec![r.sample_id.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.extend(r.shap.iter().flatten().map(|v| v.to_string()));
            rec.push(r.teacher_prob.map(|p| p.to_string()).unwrap_or_default());
            rec.push(r.label.map(|l| l.code().to_string()).unwrap_or_default());
            w.write_record(rec).unwrap();
        }
        w.flush().unwrap();
    }
    String::from_utf8(out).expect("csv output is utf-8")
}

/// Reads a case file: header `sample_id, v_<name>..` and exactly one record.
pub fn load_case(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<SampleRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_case(&text, schema, &path.display().to_string())
}

pub fn parse_case(text: &str, schema: &FeatureSchema, context: &str) -> Result<SampleRecord> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(context, e))?
        .clone();
    let mut records = reader.records();
    let rec = records
        .next()
        .ok_or_else(|| Error::parse(context, "case file holds no record"))?
        .map_err(|e| Error::parse(context, e))?;
    if records.next().is_some() {
        return Err(Error::parse(
            context,
            "case file holds more than one record",
        ));
    }
    let expected = schema.len();
    if header.len() != expected + 1 || rec.len() != expected + 1 {
        return Err(Error::Arity {
            expected,
            got: rec.len().max(header.len()).saturating_sub(1),
        });
    }
    let wanted: Vec<String> = std::iter::once("sample_id".to_string())
        .chain(schema.features().iter().map(|f| format!("v_{}", f.name)))
        .collect();
    let pos = column_positions(&header, &wanted, context)?;
    let sample_id = rec[pos[0]].to_string();
    let values = schema
        .features()
        .iter()
        .enumerate()
        .map(|(j, f)| parse_cell(&rec[pos[1 + j]], 1, &sample_id, Some(&f.name)))
        .collect::<Result<Vec<_>>>()?;
    schema
        .check_values(&values)
        .map_err(|(j, message)| Error::InvalidRecord {
            row: 1,
            sample_id: sample_id.clone(),
            feature: j.map(|j| schema.features()[j].name.clone()),
            message,
        })?;
    Ok(SampleRecord::unlabeled(sample_id, values))
}

pub fn write_case(
    path: impl AsRef<Path>,
    schema: &FeatureSchema,
    record: &SampleRecord,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["sample_id".to_string()];
        header.extend(schema.features().iter().map(|f| format!("v_{}", f.name)));
        w.write_record(header).unwrap();
        let mut rec = vec![record.sample_id.clone()];
        rec.extend(record.values.iter().map(|v| v.to_string()));
        w.write_record(rec).unwrap();
        w.flush().unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn specs(n: usize) -> Vec<FeatureSpec> {
        (0..n)
            .map(|i| {
                let kind = if i % 3 == 2 {
                    FeatureKind::Integer
                } else {
                    FeatureKind::Continuous
                };
                FeatureSpec::new(format!("f{i}"), kind, format!("feature {i}"))
            })
            .collect()
    }

    #[test]
    fn default_partition_is_contiguous_thirds() {
        let s = FeatureSchema::new(specs(15), None).unwrap();
        assert_eq!(s.groups()[0], (0..5).collect::<Vec<_>>());
        assert_eq!(s.groups()[1], (5..10).collect::<Vec<_>>());
        assert_eq!(s.groups()[2], (10..15).collect::<Vec<_>>());
    }

    #[test]
    fn explicit_partition_is_kept() {
        let g = [
            vec![0, 3, 6, 9, 12],
            vec![1, 4, 7, 10, 13],
            vec![2, 5, 8, 11, 14],
        ];
        let s = FeatureSchema::new(specs(15), Some(g.clone())).unwrap();
        assert_eq!(s.groups(), &g);
    }

    #[test]
    fn fourteen_features_cannot_split() {
        assert!(matches!(
            FeatureSchema::new(specs(14), None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn bad_partitions_rejected() {
        let overlap = [vec![0, 1], vec![1, 2], vec![4, 5]];
        assert!(FeatureSchema::new(specs(6), Some(overlap)).is_err());
        let unequal = [vec![0], vec![1, 2], vec![3, 4, 5]];
        assert!(FeatureSchema::new(specs(6), Some(unequal)).is_err());
        let mut dup = specs(3);
        dup[2].name = "f0".into();
        assert!(FeatureSchema::new(dup, None).is_err());
    }

    #[test]
    fn schema_file_uses_group_names() {
        let text = r#"{"features":[
            {"name":"a","kind":"continuous","description":"x"},
            {"name":"b","kind":"integer"},
            {"name":"c","kind":"continuous"}],
            "groups":[["c"],["a"],["b"]]}"#;
        let s: FeatureSchema = serde_json::from_str(text).unwrap();
        assert_eq!(s.groups(), &[vec![2], vec![0], vec![1]]);
        assert_eq!(s.features()[1].kind, FeatureKind::Integer);
        let back: FeatureSchema =
            serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    fn small_matrix_text(tp: &str, int_value: &str) -> (FeatureSchema, String) {
        let schema = FeatureSchema::new(specs(3), None).unwrap();
        let text = format!(
            "# base_value=-0.25\n\
             sample_id,v_f0,v_f1,v_f2,s_f0,s_f1,s_f2,teacher_prob,label\n\
             a,0.6,1.1,2,0.1,-0.2,0.05,0.55,1\n\
             b,0.4,1.3,{int_value},0.2,0.1,0.0,{tp},\n"
        );
        (schema, text)
    }

    #[test]
    fn parses_matrix() {
        let (schema, text) = small_matrix_text("0.4", "3");
        let m = parse_matrix(&text, &schema, "t").unwrap();
        assert_eq!(m.base_value, -0.25);
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[0].label, Some(Label::Unhealthy));
        assert_eq!(m.rows[1].label, None);
        assert_eq!(m.rows[1].shap.as_ref().unwrap()[0], 0.2);
    }

    #[test]
    fn teacher_prob_of_one_rejected_with_row() {
        let (schema, text) = small_matrix_text("1.0", "3");
        let err = parse_matrix(&text, &schema, "t").unwrap_err();
        match err {
            Error::InvalidRecord { row, sample_id, .. } => {
                assert_eq!(row, 2);
                assert_eq!(sample_id, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fractional_integer_feature_names_row_and_feature() {
        let (schema, text) = small_matrix_text("0.4", "2.5");
        let err = parse_matrix(&text, &schema, "t").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("f2"), "{msg}");
    }

    #[test]
    fn missing_column_named() {
        let (schema, text) = small_matrix_text("0.4", "3");
        let text = text.replace("s_f1", "s_zz");
        match parse_matrix(&text, &schema, "t").unwrap_err() {
            Error::MissingColumn { column, .. } => assert_eq!(column, "s_f1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_rejected() {
        let (schema, text) = small_matrix_text("abc", "3");
        assert!(matches!(
            parse_matrix(&text, &schema, "t"),
            Err(Error::InvalidRecord { row: 2, .. })
        ));
    }

    #[test]
    fn case_arity_and_numeric_checks() {
        let schema = FeatureSchema::new(specs(3), None).unwrap();
        let ok = parse_case("sample_id,v_f0,v_f1,v_f2\nq,0.5,1.0,2\n", &schema, "c").unwrap();
        assert_eq!(ok.values, vec![0.5, 1.0, 2.0]);
        assert!(ok.shap.is_none() && ok.teacher_prob.is_none());

        let extra = parse_case(
            "sample_id,v_f0,v_f1,v_f2,v_f3\nq,0.5,1.0,2,4\n",
            &schema,
            "c",
        );
        assert!(matches!(
            extra,
            Err(Error::Arity {
                expected: 3,
                got: 4
            })
        ));

        let nan = parse_case("sample_id,v_f0,v_f1,v_f2\nq,NaN,1.0,2\n", &schema, "c");
        assert!(matches!(nan, Err(Error::InvalidRecord { .. })));
    }
}
