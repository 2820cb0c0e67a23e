//! Weight/guidance policies for the calibration loop and for prediction.
//!
//! [`StubPolicy`] is a deterministic damped-correction rule that keeps the
//! whole pipeline runnable offline. [`RemotePolicy`] talks to any
//! chat-completions endpoint and expects the reply block grammar parsed by
//! [`parse_response`]:
//!
//! ````text
//! ```WEIGHTS
//! grip_strength = 1.25
//! gait_speed = 0.8
//! ```
//! ```GUIDANCE
//! One paragraph of guidance.
//! ```
//! ````

use std::fmt::Write as _;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{DiagnosticState, FailureCase, RewardSignal, WeightSet};
use crate::schema::{FeatureSpec, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    /// Weights should move the inferred probability toward the teacher's.
    Calibrate,
    /// The state is already acceptable; only guidance text is wanted.
    Describe,
    /// New case: derive weights from retrieved precedents.
    Predict,
}

/// A retrieved knowledge-base case offered to the policy during prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precedent {
    pub entry_id: u64,
    pub similarity: f64,
    pub weights: WeightSet,
    pub guidance: String,
    pub teacher_prob: f64,
    pub label: Option<Label>,
}

/// Everything a policy may look at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub mode: RequestMode,
    pub features: Vec<FeatureSpec>,
    pub state: DiagnosticState,
    pub reward: Option<RewardSignal>,
    pub failures: Vec<FailureCase>,
    pub teacher_prob: Option<f64>,
    pub precedents: Vec<Precedent>,
    /// Voting run index; remote policies may vary sampling per run.
    pub run: usize,
    pub max_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseMeta {
    pub retries: usize,
    pub reparse_attempts: usize,
    pub fallback: bool,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyResponse {
    pub weights: WeightSet,
    pub guidance: String,
    #[serde(default)]
    pub meta: ResponseMeta,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed reply: {0}")]
    Malformed(MalformedReply),
    #[error("policy returned {got} weights, expected {expected}")]
    Arity { expected: usize, got: usize },
    #[error("policy configuration: {0}")]
    Config(String),
}

pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, req: &PolicyRequest) -> Result<PolicyResponse, PolicyError>;
}

/// Features ordered by `|c_i * w_i|`, largest first.
fn leading_factors(req: &PolicyRequest, weights: &WeightSet, n: usize) -> String {
    let mut items: Vec<(usize, f64)> = req
        .state
        .table
        .contributions()
        .zip(weights.as_slice())
        .map(|(c, w)| c * w)
        .enumerate()
        .collect();
    items.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    items
        .iter()
        .take(n)
        .map(|&(i, v)| {
            let name = req.features.get(i).map(|f| f.name.as_str()).unwrap_or("?");
            format!("{name} ({v:+.4})")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Deterministic surrogate policy.
///
/// Calibration: when the inference sits on the teacher's side of 0.5 every
/// weight is multiplied by `1 + damping * ((t - 0.5) / (p - 0.5) - 1)`;
/// otherwise the weights of features pulling against the teacher's side
/// are multiplied by `1 - damping`. Prediction: similarity-weighted mean of
/// the precedents' weights, or all ones without precedents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubPolicy {
    pub damping: f64,
}

impl Default for StubPolicy {
    fn default() -> Self {
        StubPolicy { damping: 0.7 }
    }
}

impl StubPolicy {
    pub fn new(damping: f64) -> Result<Self, PolicyError> {
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(PolicyError::Config(format!(
                "damping must be in (0, 1], got {damping}"
            )));
        }
        Ok(StubPolicy { damping })
    }

    fn calibrate(&self, req: &PolicyRequest) -> PolicyResponse {
        let n = req.state.weights.len();
        let p = req.state.infer_prob;
        let Some(t) = req.teacher_prob else {
            return PolicyResponse {
                weights: req.state.weights.clone(),
                guidance: "No teacher probability supplied; weights unchanged.".into(),
                meta: ResponseMeta::default(),
            };
        };
        let alignment = (t - 0.5) * (p - 0.5);
        let mut weights = req.state.weights.clone().into_vec();
        let adjustment;
        if alignment > 0.0 && (p - 0.5).abs() > 1e-9 {
            let scale = 1.0 + self.damping * ((t - 0.5) / (p - 0.5) - 1.0);
            weights.iter_mut().for_each(|w| *w *= scale);
            adjustment = format!("Scaled all weights by {scale:.6}.");
        } else {
            let target = (t - 0.5).signum();
            let opposing: Vec<usize> = req
                .state
                .table
                .contributions()
                .zip(&weights)
                .enumerate()
                .filter(|(_, (c, w))| t != 0.5 && (c * *w) * target < 0.0)
                .map(|(i, _)| i)
                .collect();
            if opposing.is_empty() {
                adjustment = "No actionable signal; weights unchanged.".to_string();
            } else {
                for &i in &opposing {
                    weights[i] *= 1.0 - self.damping;
                }
                let names: Vec<&str> = opposing
                    .iter()
                    .map(|&i| req.features.get(i).map(|f| f.name.as_str()).unwrap_or("?"))
                    .collect();
                adjustment = format!(
                    "Down-weighted {} opposing feature(s) by factor {:.6}: {}.",
                    opposing.len(),
                    1.0 - self.damping,
                    names.join(", ")
                );
            }
        }
        let mut weights = WeightSet::new(weights);
        debug_assert_eq!(weights.len(), n);
        weights.clamp(req.max_weight);
        let lead = leading_factors(req, &weights, 3);
        let reward = req
            .reward
            .as_ref()
            .map(|r| format!("{}. ", r.guidance_text()))
            .unwrap_or_default();
        PolicyResponse {
            guidance: format!("{reward}{adjustment} Leading factors: {lead}."),
            weights,
            meta: ResponseMeta::default(),
        }
    }

    fn describe(&self, req: &PolicyRequest) -> PolicyResponse {
        let reward = req
            .reward
            .as_ref()
            .map(|r| format!("{}. ", r.guidance_text()))
            .unwrap_or_default();
        PolicyResponse {
            guidance: format!(
                "{reward}Leading factors: {}.",
                leading_factors(req, &req.state.weights, 3)
            ),
            weights: req.state.weights.clone(),
            meta: ResponseMeta::default(),
        }
    }

    fn predict(&self, req: &PolicyRequest) -> PolicyResponse {
        let n = req.state.weights.len();
        let usable: Vec<&Precedent> = req
            .precedents
            .iter()
            .filter(|p| p.weights.len() == n)
            .collect();
        let (weights, how) = if usable.is_empty() {
            (
                WeightSet::ones(n),
                "No precedent retrieved; using uniform weights.".to_string(),
            )
        } else {
            let mut coef: Vec<f64> = usable.iter().map(|p| p.similarity.max(0.0)).collect();
            let total: f64 = coef.iter().sum();
            if total <= 0.0 {
                coef = vec![1.0; usable.len()];
            }
            let total: f64 = coef.iter().sum();
            let mut mean = vec![0.0; n];
            for (p, c) in usable.iter().zip(&coef) {
                for (m, w) in mean.iter_mut().zip(p.weights.as_slice()) {
                    *m += c * w;
                }
            }
            mean.iter_mut().for_each(|m| *m /= total);
            let mut ws = WeightSet::new(mean);
            ws.clamp(req.max_weight);
            let ids: Vec<String> = usable.iter().map(|p| p.entry_id.to_string()).collect();
            (
                ws,
                format!(
                    "Weights averaged over {} precedent(s) [{}] by similarity.",
                    usable.len(),
                    ids.join(", ")
                ),
            )
        };
        PolicyResponse {
            guidance: format!(
                "{how} Leading factors: {}.",
                leading_factors(req, &weights, 3)
            ),
            weights,
            meta: ResponseMeta::default(),
        }
    }
}

impl Policy for StubPolicy {
    fn name(&self) -> &str {
        "stub"
    }

    fn propose(&self, req: &PolicyRequest) -> Result<PolicyResponse, PolicyError> {
        Ok(match req.mode {
            RequestMode::Calibrate => self.calibrate(req),
            RequestMode::Describe => self.describe(req),
            RequestMode::Predict => self.predict(req),
        })
    }
}

/// Why a reply could not be turned into a [`PolicyResponse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalformedReply {
    pub problems: Vec<String>,
}

impl std::fmt::Display for MalformedReply {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.problems.join("; "))
    }
}

fn fenced_block<'a>(lines: &[&'a str], tag: &str, from: usize) -> Option<(Vec<&'a str>, usize)> {
    let open = format!("```{tag}");
    let start = lines[from..].iter().position(|l| l.trim() == open)? + from;
    let len = lines[start + 1..].iter().position(|l| l.trim() == "```")?;
    Some((lines[start + 1..start + 1 + len].to_vec(), start + 2 + len))
}

/// Extracts the first WEIGHTS block (one `name = <decimal>` line per feature)
/// and the GUIDANCE block that follows it. Out-of-range weights are clamped
/// into `[0, max_weight]` and reported in `meta.notices`.
pub fn parse_response(
    raw: &str,
    features: &[FeatureSpec],
    max_weight: f64,
) -> Result<PolicyResponse, MalformedReply> {
    let lines: Vec<&str> = raw.lines().collect();
    let mut problems = Vec::new();
    let Some((block, after)) = fenced_block(&lines, "WEIGHTS", 0) else {
        return Err(MalformedReply {
            problems: vec!["no ```WEIGHTS block".into()],
        });
    };
    let mut slots: Vec<Option<f64>> = vec![None; features.len()];
    for line in block.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        let Some((name, value)) = line.split_once('=') else {
            problems.push(format!("line `{line}` is not `name = value`"));
            continue;
        };
        let (name, value) = (name.trim(), value.trim());
        let Some(idx) = features.iter().position(|f| f.name == name) else {
            problems.push(format!("unknown feature `{name}`"));
            continue;
        };
        match value.parse::<f64>() {
            Ok(v) if v.is_finite() => {
                if slots[idx].replace(v).is_some() {
                    problems.push(format!("feature `{name}` listed twice"));
                }
            }
            _ => problems.push(format!("weight `{value}` for `{name}` is not a number")),
        }
    }
    for (slot, f) in slots.iter().zip(features) {
        if slot.is_none() {
            problems.push(format!("missing weight for `{}`", f.name));
        }
    }
    let guidance = fenced_block(&lines, "GUIDANCE", after)
        .map(|(b, _)| b.join("\n").trim().to_string())
        .filter(|g| !g.is_empty());
    if guidance.is_none() {
        problems.push("no ```GUIDANCE block after the weights".into());
    }
    if !problems.is_empty() {
        return Err(MalformedReply { problems });
    }
    let mut weights = WeightSet::new(slots.into_iter().map(Option::unwrap).collect());
    let notices = weights
        .clamp(max_weight)
        .into_iter()
        .map(|(i, orig)| {
            format!(
                "weight for `{}` clamped from {orig} to {}",
                features[i].name,
                weights.as_slice()[i]
            )
        })
        .collect();
    Ok(PolicyResponse {
        weights,
        guidance: guidance.unwrap(),
        meta: ResponseMeta {
            notices,
            ..ResponseMeta::default()
        },
    })
}

/// Renders a response in the reply block grammar.
pub fn render_reply(response: &PolicyResponse, features: &[FeatureSpec]) -> String {
    let mut out = String::from("```WEIGHTS\n");
    for (f, w) in features.iter().zip(response.weights.as_slice()) {
        writeln!(out, "{} = {w}", f.name).unwrap();
    }
    out.push_str("```\n```GUIDANCE\n");
    out.push_str(response.guidance.trim());
    out.push_str("\n```\n");
    out
}

/// Versioned prompt asset with `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub version: &'static str,
    pub text: &'static str,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            version: "policy-v1",
            text: include_str!("../assets/policy_prompt_v1.txt"),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, req: &PolicyRequest) -> String {
        let task = match req.mode {
            RequestMode::Calibrate => {
                "adjust the weights so the inferred probability matches the reference probability, and explain the assessment."
            }
            RequestMode::Describe => {
                "the inferred probability already matches the reference; keep the weights and write the diagnosis guidance."
            }
            RequestMode::Predict => {
                "form a hypothesis for this new patient, refine it with the similar solved cases below, and propose personalised weights."
            }
        };
        let mut table = String::from(
            "| feature | description | value | interval | contribution |\n|---|---|---|---|---|\n",
        );
        for (f, e) in req.features.iter().zip(&req.state.table.entries) {
            writeln!(
                table,
                "| {} | {} | {} | {} | {:+.6} |",
                f.name, f.description, e.raw_value, e.midpoint, e.contribution
            )
            .unwrap();
        }
        let weights = req
            .features
            .iter()
            .zip(req.state.weights.as_slice())
            .map(|(f, w)| format!("{} = {w}", f.name))
            .collect::<Vec<_>>()
            .join("\n");
        let reward_block = match (&req.reward, req.teacher_prob) {
            (Some(r), Some(t)) => format!(
                "Reference probability: {t}\nRelative deviation: {:.6}\nScore: {:.4}\nGuidance: {}\n",
                r.diff,
                r.score,
                r.guidance_text()
            ),
            _ => String::new(),
        };
        let failures = if req.failures.is_empty() {
            "(none)".to_string()
        } else {
            req.failures
                .iter()
                .map(|c| {
                    format!(
                        "- iteration {}: inferred {:.6} vs reference {:.6} (deviation {:.4}), weights [{}]",
                        c.iteration,
                        c.infer_prob,
                        c.teacher_prob,
                        c.diff,
                        c.weights
                            .as_slice()
                            .iter()
                            .map(|w| format!("{w:.4}"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let precedents = if req.precedents.is_empty() {
            String::new()
        } else {
            let mut s = String::from("\nSimilar solved cases:\n");
            for p in &req.precedents {
                writeln!(
                    s,
                    "- case {} (similarity {:.4}, reference probability {:.4}{}): weights [{}]\n  guidance: {}",
                    p.entry_id,
                    p.similarity,
                    p.teacher_prob,
                    p.label.map(|l| format!(", {l}")).unwrap_or_default(),
                    p.weights
                        .as_slice()
                        .iter()
                        .map(|w| format!("{w:.4}"))
                        .collect::<Vec<_>>()
                        .join(", "),
                    p.guidance
                )
                .unwrap();
            }
            s
        };
        let weight_lines = req
            .features
            .iter()
            .map(|f| format!("{} = <decimal>", f.name))
            .collect::<Vec<_>>()
            .join("\n");
        self.text
            .replace("{task}", task)
            .replace("{feature_table}", table.trim_end())
            .replace("{weights}", &weights)
            .replace("{infer_prob}", &format!("{:.6}", req.state.infer_prob))
            .replace("{reward_block}", &reward_block)
            .replace("{failures}", &failures)
            .replace("{precedents}", &precedents)
            .replace("{max_weight}", &req.max_weight.to_string())
            .replace("{weight_lines}", &weight_lines)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// e.g. `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub temperature: f64,
    /// Temperature used for voting runs after the first.
    pub vote_temperature: Option<f64>,
    pub max_reparse: usize,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "deepseek-r1:8b".into(),
            token_env: "SHAPDISTILL_API_KEY".into(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_ms: 500,
            temperature: 0.0,
            vote_temperature: None,
            max_reparse: 2,
            max_in_flight: 4,
        }
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

/// Chat-completions client acting as a policy.
pub struct RemotePolicy {
    config: RemoteConfig,
    template: PromptTemplate,
    agent: ureq::Agent,
    token: Option<String>,
    in_flight: InFlight,
}

impl RemotePolicy {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty());
        RemotePolicy {
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit: config.max_in_flight.max(1),
            },
            config,
            template: PromptTemplate::default(),
            agent,
            token,
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    fn temperature(&self, run: usize) -> f64 {
        match (run, self.config.vote_temperature) {
            (r, Some(t)) if r > 0 => t,
            _ => self.config.temperature,
        }
    }

    fn chat_once(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, String> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
        });
        let mut req = self.agent.post(&url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp
            .into_body()
            .read_json()
            .map_err(|e| format!("reply is not JSON: {e}"))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "reply has no choices[0].message.content".to_string())
    }

    /// One logical request with transport retries and exponential backoff.
    fn chat(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        retries: &mut usize,
    ) -> Result<String, PolicyError> {
        let _slot = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            match self.chat_once(messages, temperature) {
                Ok(text) => return Ok(text),
                Err(message) => {
                    if attempt >= self.config.max_retries {
                        return Err(PolicyError::Transport {
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    warn!("policy request failed (attempt {}): {message}", attempt + 1);
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                    *retries += 1;
                }
            }
        }
    }
}

impl Policy for RemotePolicy {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose(&self, req: &PolicyRequest) -> Result<PolicyResponse, PolicyError> {
        let mut messages = vec![
            ChatMessage {
                role: "system".into(),
                content: "You are a careful clinical reasoning assistant. Follow the reply format exactly.".into(),
            },
            ChatMessage {
                role: "user".into(),
                content: self.template.render(req),
            },
        ];
        let temperature = self.temperature(req.run);
        let mut meta = ResponseMeta::default();
        loop {
            let reply = self.chat(&messages, temperature, &mut meta.retries)?;
            match parse_response(&reply, &req.features, req.max_weight) {
                Ok(mut resp) => {
                    meta.notices.append(&mut resp.meta.notices);
                    resp.meta = meta;
                    if req.mode == RequestMode::Describe {
                        resp.weights = req.state.weights.clone();
                    }
                    return Ok(resp);
                }
                Err(bad) if meta.reparse_attempts < self.config.max_reparse => {
                    meta.reparse_attempts += 1;
                    messages.push(ChatMessage {
                        role: "assistant".into(),
                        content: reply,
                    });
                    messages.push(ChatMessage {
                        role: "user".into(),
                        content: format!(
                            "Your reply could not be parsed ({bad}). Reply again with the ```WEIGHTS block listing every feature once and the ```GUIDANCE block."
                        ),
                    });
                }
                Err(bad) => {
                    warn!("policy reply malformed after {} reparse attempt(s), keeping previous weights: {bad}", meta.reparse_attempts);
                    meta.fallback = true;
                    meta.notices.push(format!("malformed reply: {bad}"));
                    return Ok(PolicyResponse {
                        weights: req.state.weights.clone(),
                        guidance: req.state.guidance.clone(),
                        meta,
                    });
                }
            }
        }
    }
}
