//! Diagnosis knowledge base: an append-only store of calibrated cases with
//! feature-grouped multi-round retrieval.
//!
//! Every entry carries one vector per feature group. A query is embedded the
//! same way, each group returns its top-k entries above the cosine
//! threshold, and the final precedent set is the three-way intersection.
//! When the intersection is empty the entries found by at least two groups
//! are used, and failing that the global top-k by mean similarity.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cacs::PatientFeatureTable;
use crate::calibration::{DistillationOutcome, WeightSet};
use crate::error::{Error, Result};
use crate::schema::{FeatureSchema, FeatureShapMatrix, Label};

pub const STORE_MAGIC: &str = "SDKB";
pub const STORE_VERSION: u32 = 1;
pub const STANDARDIZED_EMBEDDER_ID: &str = "standardized-raw-v1";

/// Cosine similarity. Two zero vectors count as identical (1.0); a zero
/// vector against a non-zero one scores 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Per-feature mean and population standard deviation of the training cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn from_matrix(matrix: &FeatureShapMatrix) -> Self {
        Self::from_rows(
            matrix.schema.len(),
            matrix.rows.iter().map(|r| r.values.as_slice()),
        )
    }

    pub fn from_rows<'a>(n: usize, rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let count = rows.clone().count();
        if count == 0 {
            return Standardization {
                mean: vec![0.0; n],
                std: vec![0.0; n],
            };
        }
        let mut mean = vec![0.0; n];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; n];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / count as f64).sqrt()).collect();
        Standardization { mean, std }
    }

    pub fn standardize(&self, feature: usize, value: f64) -> f64 {
        let sd = self.std[feature];
        if sd > 0.0 {
            (value - self.mean[feature]) / sd
        } else {
            0.0
        }
    }
}

/// Maps one feature group of a table to a retrieval vector.
pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn is_deterministic(&self) -> bool;
    fn embed_group(&self, table: &PatientFeatureTable, group: &[usize]) -> Result<Vec<f64>>;
}

/// Group raw values standardized by frozen cohort statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedEmbedder {
    pub stats: Standardization,
}

impl Embedder for StandardizedEmbedder {
    fn id(&self) -> String {
        STANDARDIZED_EMBEDDER_ID.into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn embed_group(&self, table: &PatientFeatureTable, group: &[usize]) -> Result<Vec<f64>> {
        group
            .iter()
            .map(|&j| {
                let e = table
                    .entries
                    .get(j)
                    .filter(|_| j < self.stats.mean.len())
                    .ok_or_else(|| Error::Embedding(format!("unknown feature index {j}")))?;
                Ok(self.stats.standardize(j, e.raw_value))
            })
            .collect()
    }
}

pub fn embed_group(
    table: &PatientFeatureTable,
    group: &[usize],
    embedder: &dyn Embedder,
) -> Result<Vec<f64>> {
    embedder.embed_group(table, group)
}

/// Text-embedding endpoint client (`POST {base_url}/embeddings`). The group is
/// rendered as `name: value` lines.
pub struct RemoteEmbedder {
    pub base_url: String,
    pub model: String,
    pub feature_names: Vec<String>,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        token_env: &str,
        timeout: Duration,
        feature_names: Vec<String>,
    ) -> Self {
        RemoteEmbedder {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            feature_names,
            token: std::env::var(token_env).ok().filter(|t| !t.is_empty()),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(true)
                .build()
                .into(),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn embed_group(&self, table: &PatientFeatureTable, group: &[usize]) -> Result<Vec<f64>> {
        let mut text = String::new();
        for &j in group {
            let (name, e) = self
                .feature_names
                .get(j)
                .zip(table.entries.get(j))
                .ok_or_else(|| Error::Embedding(format!("unknown feature index {j}")))?;
            text.push_str(&format!("{name}: {}\n", e.raw_value));
        }
        let mut req = self.agent.post(&format!("{}/embeddings", self.base_url));
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let value: serde_json::Value = req
            .send_json(serde_json::json!({ "model": self.model, "input": text }))
            .map_err(|e| Error::Embedding(e.to_string()))?
            .into_body()
            .read_json()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        value["data"][0]["embedding"]
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_f64()).collect::<Option<Vec<f64>>>())
            .ok_or_else(|| Error::Embedding("reply has no data[0].embedding".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub threshold: f64,
    /// Fall back to the global top-k when neither the intersection nor the
    /// two-of-three majority yields a precedent.
    pub global_fallback: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 8,
            threshold: 0.7,
            global_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Intersection,
    Majority,
    Global,
    /// Nothing qualified and the global fallback is disabled.
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkbEntry {
    pub entry_id: u64,
    pub sample_id: String,
    pub vectors: [Vec<f64>; 3],
    pub table: PatientFeatureTable,
    pub weights: WeightSet,
    pub guidance: String,
    pub teacher_prob: f64,
    pub infer_prob: f64,
    pub label: Option<Label>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub schema_fingerprint: String,
    pub embedder_id: String,
    pub standardization: Standardization,
    pub groups: [Vec<usize>; 3],
    pub retrieval: RetrievalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entry_id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entry_id: u64,
    pub similarities: [f64; 3],
    pub mean_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub groups: [Vec<Hit>; 3],
    pub candidates: Vec<Candidate>,
    pub tier: Tier,
}

impl RetrievalResult {
    pub fn final_ids(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.entry_id).collect()
    }
}

/// Ranking used everywhere: similarity descending, then entry id ascending.
fn rank(a_sim: f64, a_id: u64, b_sim: f64, b_id: u64) -> Ordering {
    b_sim.total_cmp(&a_sim).then(a_id.cmp(&b_id))
}

pub type Snapshot = Arc<Vec<Arc<DkbEntry>>>;

pub struct KnowledgeBase {
    header: StoreHeader,
    embedder: Arc<dyn Embedder>,
    entries: RwLock<Snapshot>,
}

impl std::fmt::Debug for KnowledgeBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeBase")
            .field("header", &self.header)
            .field("entries", &self.len())
            .finish()
    }
}

impl KnowledgeBase {
    /// New store using the standardized embedder with statistics frozen from
    /// the training cohort.
    pub fn for_cohort(matrix: &FeatureShapMatrix, retrieval: RetrievalConfig) -> Self {
        let stats = Standardization::from_matrix(matrix);
        Self::with_embedder(
            &matrix.schema,
            stats.clone(),
            retrieval,
            Arc::new(StandardizedEmbedder { stats }),
        )
    }

    pub fn with_embedder(
        schema: &FeatureSchema,
        standardization: Standardization,
        retrieval: RetrievalConfig,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        KnowledgeBase {
            header: StoreHeader {
                schema_fingerprint: schema.fingerprint(),
                embedder_id: embedder.id(),
                standardization,
                groups: schema.groups().clone(),
                retrieval,
            },
            embedder,
            entries: RwLock::new(Arc::new(Vec::new())),
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        self.header.retrieval
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Immutable view of the entries at this moment.
    pub fn snapshot(&self) -> Snapshot {
        Arc::clone(&self.entries.read().unwrap())
    }

    pub fn get(&self, entry_id: u64) -> Option<Arc<DkbEntry>> {
        self.snapshot().get(entry_id as usize).cloned()
    }

    pub fn embed(&self, table: &PatientFeatureTable) -> Result<[Vec<f64>; 3]> {
        let g = &self.header.groups;
        Ok([
            self.embedder.embed_group(table, &g[0])?,
            self.embedder.embed_group(table, &g[1])?,
            self.embedder.embed_group(table, &g[2])?,
        ])
    }

    /// Appends a distilled case. Unconverged outcomes need `include_unconverged`.
    pub fn save_entry(
        &self,
        outcome: &DistillationOutcome,
        include_unconverged: bool,
    ) -> Result<u64> {
        if !outcome.converged && !include_unconverged {
            return Err(Error::Unconverged(outcome.sample_id.clone()));
        }
        let vectors = self.embed(&outcome.state.table)?;
        let mut guard = self.entries.write().unwrap();
        let entry_id = guard.len() as u64;
        Arc::make_mut(&mut guard).push(Arc::new(DkbEntry {
            entry_id,
            sample_id: outcome.sample_id.clone(),
            vectors,
            table: outcome.state.table.clone(),
            weights: outcome.state.weights.clone(),
            guidance: outcome.state.guidance.clone(),
            teacher_prob: outcome.teacher_prob,
            infer_prob: outcome.state.infer_prob,
            label: outcome.label,
            converged: outcome.converged,
        }));
        Ok(entry_id)
    }

    /// Grouped top-k retrieval with intersection selection.
    pub fn fgmr_retrieve(
        &self,
        table: &PatientFeatureTable,
        config: &RetrievalConfig,
    ) -> Result<RetrievalResult> {
        let entries = self.snapshot();
        if entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        let query = self.embed(table)?;

        // similarity of every entry in each group, reused for the candidates
        let sims: Vec<[f64; 3]> = entries
            .iter()
            .map(|e| [0, 1, 2].map(|g| cosine_similarity(&query[g], &e.vectors[g])))
            .collect();

        let groups = [0, 1, 2].map(|g| top_k_heap(&sims, g, config));
        let sets: Vec<BTreeSet<u64>> = groups
            .iter()
            .map(|hits| hits.iter().map(|h| h.entry_id).collect())
            .collect();

        let inter: BTreeSet<u64> = sets[0]
            .intersection(&sets[1])
            .copied()
            .collect::<BTreeSet<_>>()
            .intersection(&sets[2])
            .copied()
            .collect();
        let (ids, tier): (Vec<u64>, Tier) = if !inter.is_empty() {
            (inter.into_iter().collect(), Tier::Intersection)
        } else {
            let pairs: BTreeSet<u64> = [(0, 1), (0, 2), (1, 2)]
                .iter()
                .flat_map(|&(a, b)| sets[a].intersection(&sets[b]).copied().collect::<Vec<_>>())
                .collect();
            if !pairs.is_empty() {
                (pairs.into_iter().collect(), Tier::Majority)
            } else if config.global_fallback {
                let mut heap = BinaryHeap::new();
                for (i, s) in sims.iter().enumerate() {
                    push_bounded(&mut heap, mean3(s), i as u64, config.k);
                }
                (heap.into_iter().map(|r| r.id).collect(), Tier::Global)
            } else {
                (Vec::new(), Tier::Unsupported)
            }
        };
        let mut candidates: Vec<Candidate> = ids
            .into_iter()
            .map(|id| {
                let s = sims[id as usize];
                Candidate {
                    entry_id: id,
                    similarities: s,
                    mean_similarity: mean3(&s),
                }
            })
            .collect();
        candidates
            .sort_by(|a, b| rank(a.mean_similarity, a.entry_id, b.mean_similarity, b.entry_id));
        Ok(RetrievalResult {
            groups,
            candidates,
            tier,
        })
    }

    /// Exhaustive reference implementation of [`Self::fgmr_retrieve`].
    pub fn brute_force_retrieve(
        &self,
        table: &PatientFeatureTable,
        config: &RetrievalConfig,
    ) -> Result<RetrievalResult> {
        let entries = self.snapshot();
        if entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        let query = self.embed(table)?;
        let mut groups: [Vec<Hit>; 3] = Default::default();
        let mut votes: BTreeMap<u64, usize> = BTreeMap::new();
        for g in 0..3 {
            let mut all: Vec<Hit> = entries
                .iter()
                .map(|e| Hit {
                    entry_id: e.entry_id,
                    similarity: cosine_similarity(&query[g], &e.vectors[g]),
                })
                .filter(|h| h.similarity >= config.threshold)
                .collect();
            all.sort_by(|a, b| rank(a.similarity, a.entry_id, b.similarity, b.entry_id));
            all.truncate(config.k);
            for h in &all {
                *votes.entry(h.entry_id).or_default() += 1;
            }
            groups[g] = all;
        }
        let with_votes = |n: usize| -> Vec<u64> {
            votes
                .iter()
                .filter(|(_, &v)| v >= n)
                .map(|(&id, _)| id)
                .collect()
        };
        let sims_of = |id: u64| -> [f64; 3] {
            let e = &entries[id as usize];
            [0, 1, 2].map(|g| cosine_similarity(&query[g], &e.vectors[g]))
        };
        let (ids, tier) = if !with_votes(3).is_empty() {
            (with_votes(3), Tier::Intersection)
        } else if !with_votes(2).is_empty() {
            (with_votes(2), Tier::Majority)
        } else if config.global_fallback {
            let mut all: Vec<(u64, f64)> = entries
                .iter()
                .map(|e| (e.entry_id, mean3(&sims_of(e.entry_id))))
                .collect();
            all.sort_by(|a, b| rank(a.1, a.0, b.1, b.0));
            all.truncate(config.k);
            (all.into_iter().map(|(id, _)| id).collect(), Tier::Global)
        } else {
            (Vec::new(), Tier::Unsupported)
        };
        let mut candidates: Vec<Candidate> = ids
            .into_iter()
            .map(|id| {
                let s = sims_of(id);
                Candidate {
                    entry_id: id,
                    similarities: s,
                    mean_similarity: mean3(&s),
                }
            })
            .collect();
        candidates
            .sort_by(|a, b| rank(a.mean_similarity, a.entry_id, b.mean_similarity, b.entry_id));
        Ok(RetrievalResult {
            groups,
            candidates,
            tier,
        })
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let snapshot = self.snapshot();
        let payload = serde_json::to_vec(&StorePayloadRef {
            header: &self.header,
            entries: snapshot.iter().map(|e| e.as_ref()).collect(),
        })
        .expect("store serializes");
        let digest = hex::encode(Sha256::digest(&payload));
        let mut out = format!("{STORE_MAGIC} {STORE_VERSION} sha256={digest}\n").into_bytes();
        out.extend_from_slice(&payload);
        out
    }

    /// Opens a store written with the standardized embedder.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, None)
    }

    /// Opens a store whose vectors came from `embedder`; ids must match.
    pub fn open_with(path: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, Some(embedder))
    }

    pub fn from_bytes(bytes: &[u8], embedder: Option<Arc<dyn Embedder>>) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse("store", "missing header line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::parse("store", e))?;
        let mut parts = line.split(' ');
        if parts.next() != Some(STORE_MAGIC) {
            return Err(Error::parse("store", "not a knowledge-base file"));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("store", "bad version field"))?;
        if version != STORE_VERSION {
            return Err(Error::StoreVersion {
                found: version,
                expected: STORE_VERSION,
            });
        }
        let expected = parts
            .next()
            .and_then(|s| s.strip_prefix("sha256="))
            .ok_or_else(|| Error::parse("store", "missing checksum"))?
            .to_string();
        let payload = &bytes[nl + 1..];
        let actual = hex::encode(Sha256::digest(payload));
        if actual != expected {
            return Err(Error::Checksum { expected, actual });
        }
        let parsed: StorePayload =
            serde_json::from_slice(payload).map_err(|e| Error::parse("store", e))?;
        let embedder: Arc<dyn Embedder> = match embedder {
            Some(e) => e,
            None if parsed.header.embedder_id == STANDARDIZED_EMBEDDER_ID => {
                Arc::new(StandardizedEmbedder {
                    stats: parsed.header.standardization.clone(),
                })
            }
            None => {
                return Err(Error::Embedding(format!(
                    "store was built with embedder `{}`; open it with that embedder",
                    parsed.header.embedder_id
                )))
            }
        };
        if embedder.id() != parsed.header.embedder_id {
            return Err(Error::Embedding(format!(
                "store embedder `{}` differs from `{}`",
                parsed.header.embedder_id,
                embedder.id()
            )));
        }
        for (i, e) in parsed.entries.iter().enumerate() {
            if e.entry_id != i as u64 {
                return Err(Error::parse(
                    "store",
                    format!("entry {i} has id {}", e.entry_id),
                ));
            }
        }
        Ok(KnowledgeBase {
            header: parsed.header,
            embedder,
            entries: RwLock::new(Arc::new(parsed.entries.into_iter().map(Arc::new).collect())),
        })
    }

    /// Errors unless this store was built for `schema`.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.header.schema_fingerprint != schema.fingerprint() {
            return Err(Error::SchemaMismatch(
                "store was built for a different feature schema".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct StorePayloadRef<'a> {
    header: &'a StoreHeader,
    entries: Vec<&'a DkbEntry>,
}

#[derive(Deserialize)]
struct StorePayload {
    header: StoreHeader,
    entries: Vec<DkbEntry>,
}

fn mean3(s: &[f64; 3]) -> f64 {
    (s[0] + s[1] + s[2]) / 3.0
}

/// Heap item ordered so the *worst* ranked element is at the top.
#[derive(Debug, PartialEq)]
struct Ranked {
    sim: f64,
    id: u64,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank(self.sim, self.id, other.sim, other.id)
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn push_bounded(heap: &mut BinaryHeap<Ranked>, sim: f64, id: u64, k: usize) {
    if k == 0 {
        return;
    }
    let item = Ranked { sim, id };
    if heap.len() < k {
        heap.push(item);
    } else if let Some(worst) = heap.peek() {
        if item < *worst {
            heap.pop();
            heap.push(item);
        }
    }
}

fn top_k_heap(sims: &[[f64; 3]], group: usize, config: &RetrievalConfig) -> Vec<Hit> {
    let mut heap = BinaryHeap::with_capacity(config.k + 1);
    for (i, s) in sims.iter().enumerate() {
        if s[group] >= config.threshold {
            push_bounded(&mut heap, s[group], i as u64, config.k);
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|r| Hit {
            entry_id: r.id,
            similarity: r.sim,
        })
        .collect()
}
