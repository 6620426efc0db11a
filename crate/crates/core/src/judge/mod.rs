//! LLM-as-a-judge scoring against an OpenAI-compatible chat endpoint, and
//! ASR / AvgSim aggregation.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "PRAF_JUDGE_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
const TEMPLATE: &str = include_str!("prompt.txt");

/// Fills the rubric template. Inputs are inserted literally, so braces in
/// either text are never treated as placeholders.
pub fn build_prompt(target_text: &str, adversarial_text: &str) -> Result<String> {
    check_text("target_text", target_text)?;
    check_text("adversarial_text", adversarial_text)?;
    let (head, rest) = TEMPLATE.split_once("{target_text}").expect("template has target slot");
    let (mid, tail) = rest.split_once("{adversarial_text}").expect("template has adversarial slot");
    let mut out = String::with_capacity(TEMPLATE.len() + target_text.len() + adversarial_text.len());
    out.push_str(head);
    out.push_str(target_text);
    out.push_str(mid);
    out.push_str(adversarial_text);
    out.push_str(tail);
    Ok(out)
}

fn check_text(name: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Contract(format!("{name} is empty")));
    }
    Ok(())
}

fn default_endpoint() -> String {
    DEFAULT_ENDPOINT.to_string()
}
fn default_thresholds() -> Vec<f64> {
    vec![0.5]
}
fn default_concurrency() -> usize {
    4
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}

/// `[judge]` section. `model` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSettings {
    pub model: String,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Count `score >= threshold` as a success instead of `score > threshold`.
    #[serde(default)]
    pub inclusive: bool,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Extra attempts after the first one.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

impl JudgeSettings {
    pub fn new(model: impl Into<String>, endpoint: impl Into<String>) -> Self {
        JudgeSettings {
            model: model.into(),
            endpoint: endpoint.into(),
            thresholds: default_thresholds(),
            inclusive: false,
            max_concurrency: default_concurrency(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.trim().is_empty() {
            return Err(Error::Config("judge.model must be set".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("judge.endpoint must be set".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(format!("judge.thresholds must be non-empty values in [0, 1], got {:?}", self.thresholds)));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config("judge.max_concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub target_text: String,
    pub adversarial_text: String,
    pub model_name: String,
    pub endpoint_url: String,
}

impl JudgeRequest {
    pub fn new(pair: &CaptionPair, settings: &JudgeSettings) -> Result<Self> {
        check_text("target_text", &pair.target_text)?;
        check_text("adversarial_text", &pair.adversarial_text)?;
        Ok(JudgeRequest {
            target_text: pair.target_text.clone(),
            adversarial_text: pair.adversarial_text.clone(),
            model_name: settings.model.clone(),
            endpoint_url: settings.endpoint.clone(),
        })
    }

    pub fn prompt(&self) -> Result<String> {
        build_prompt(&self.target_text, &self.adversarial_text)
    }
}

/// One line of the captions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub target_text: String,
    pub adversarial_text: String,
}

/// Reads a JSON-lines captions file; blank lines are skipped.
pub fn load_caption_pairs(path: impl AsRef<Path>) -> Result<Vec<CaptionPair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?").expect("valid regex"))
}

/// First real number in `reply`, clamped to `[0, 1]`.
pub fn parse_score(reply: &str) -> Option<f64> {
    let raw: f64 = number_pattern().find(reply)?.as_str().parse().ok()?;
    if !raw.is_finite() {
        return None;
    }
    let clamped = raw.clamp(0.0, 1.0);
    if clamped != raw {
        log::warn!("judge score {raw} clamped to {clamped}");
    }
    Some(clamped)
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReplyMessage,
}

#[derive(Deserialize)]
struct ChatReplyMessage {
    content: Option<String>,
}

enum Attempt {
    Done(f64),
    Retry(String),
    Fatal(String),
}

pub struct JudgeClient {
    settings: JudgeSettings,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl JudgeClient {
    /// Reads the API key from `PRAF_JUDGE_API_KEY` if set.
    pub fn new(settings: JudgeSettings) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(settings, key)
    }

    pub fn with_api_key(settings: JudgeSettings, api_key: Option<String>) -> Result<Self> {
        settings.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(JudgeClient { settings, http, api_key })
    }

    pub fn settings(&self) -> &JudgeSettings {
        &self.settings
    }

    fn attempt(&self, req: &JudgeRequest, prompt: &str) -> Attempt {
        let body = ChatBody { model: &req.model_name, messages: [ChatMessage { role: "user", content: prompt }] };
        let mut builder = self.http.post(&req.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("request failed: {e}")),
        };
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Retry(format!("endpoint returned {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(format!("endpoint returned {status}"));
        }
        let reply: ChatReply = match resp.json() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("malformed response body: {e}")),
        };
        let content = reply.choices.into_iter().next().and_then(|c| c.message.content).unwrap_or_default();
        match parse_score(&content) {
            Some(s) => Attempt::Done(s),
            None => Attempt::Retry(format!("non-numeric reply {content:?}")),
        }
    }

    /// Scores one request, retrying transient failures with exponential backoff.
    pub fn query(&self, req: &JudgeRequest) -> Result<f64> {
        let prompt = req.prompt()?;
        let mut last = String::new();
        for attempt in 0..=self.settings.max_retries {
            if attempt > 0 {
                let delay = self.settings.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("judge retry {attempt} after {delay} ms: {last}");
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(req, &prompt) {
                Attempt::Done(s) => return Ok(s),
                Attempt::Retry(msg) => last = msg,
                Attempt::Fatal(msg) => return Err(Error::Scoring(msg)),
            }
        }
        Err(Error::Scoring(format!("gave up after {} attempt(s): {last}", self.settings.max_retries + 1)))
    }

    /// Scores every pair with at most `max_concurrency` requests in flight.
    /// Results keep the input order.
    pub fn score_all(&self, pairs: &[CaptionPair]) -> Vec<Result<f64>> {
        let slots: Vec<Mutex<Option<Result<f64>>>> = pairs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.settings.max_concurrency.min(pairs.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(pair) = pairs.get(i) else { break };
                    let r = JudgeRequest::new(pair, &self.settings).and_then(|req| self.query(&req));
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }

    pub fn evaluate(&self, pairs: &[CaptionPair]) -> Result<EvalReport> {
        let results = self.score_all(pairs);
        EvalReport::from_results(&self.settings, &results)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub threshold: f64,
    pub asr: f64,
    pub avg_sim: f64,
}

/// Success rate per threshold and the threshold-independent mean score.
/// Success is `s > t`, or `s >= t` when `inclusive`.
pub fn aggregate(scores: &[f64], thresholds: &[f64], inclusive: bool) -> Result<Vec<EvalSummary>> {
    if scores.is_empty() {
        return Err(Error::Contract("no scores to aggregate".into()));
    }
    let n = scores.len() as f64;
    let avg_sim = scores.iter().sum::<f64>() / n;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = scores.iter().filter(|&&s| if inclusive { s >= t } else { s > t }).count();
            EvalSummary { threshold: t, asr: hits as f64 / n, avg_sim }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnscoredSample {
    pub index: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub inclusive: bool,
    pub total: usize,
    pub scored: usize,
    pub unscored: usize,
    pub summaries: Vec<EvalSummary>,
    pub scores: Vec<Option<f64>>,
    pub failures: Vec<UnscoredSample>,
}

impl EvalReport {
    /// Unscored samples are listed but left out of every aggregate.
    pub fn from_results(settings: &JudgeSettings, results: &[Result<f64>]) -> Result<Self> {
        let scores: Vec<Option<f64>> = results.iter().map(|r| r.as_ref().ok().copied()).collect();
        let failures: Vec<UnscoredSample> = results
            .iter()
            .enumerate()
            .filter_map(|(index, r)| r.as_ref().err().map(|e| UnscoredSample { index, error: e.to_string() }))
            .collect();
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        let summaries = aggregate(&ok, &settings.thresholds, settings.inclusive)?;
        Ok(EvalReport {
            model: settings.model.clone(),
            inclusive: settings.inclusive,
            total: results.len(),
            scored: ok.len(),
            unscored: failures.len(),
            summaries,
            scores,
            failures,
        })
    }
}
