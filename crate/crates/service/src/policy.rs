//! A policy backed by any text-completion endpoint.
//!
//! Request body:
//! ```json
//! {"model": "m", "prompt": "<context>", "temperature": 0.0, "top_p": 1.0,
//!  "top_k": -1, "max_tokens": 512, "logprobs": false, "seed": 17}
//! ```
//! Response body: `{"text": "<message>", "token_logprobs": [-0.1, ...]}`,
//! where `token_logprobs` is optional.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use kgenv_core::rollout::{Policy, PolicyContext, PolicyError};
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// -1 disables top-k.
    pub top_k: i64,
    pub max_tokens: usize,
}

impl SamplingParams {
    /// Stochastic sampling used when collecting rollouts.
    pub fn collection() -> Self {
        Self { temperature: 1.0, top_p: 1.0, top_k: -1, max_tokens: 512 }
    }

    /// Greedy decoding used for evaluation.
    pub fn evaluation() -> Self {
        Self { temperature: 0.0, ..Self::collection() }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::collection()
    }
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    top_k: i64,
    max_tokens: usize,
    logprobs: bool,
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    text: String,
    #[serde(default)]
    token_logprobs: Option<Vec<f64>>,
}

type TurnKey = (String, usize, usize);

pub struct RemotePolicy {
    http: Client,
    url: String,
    model: String,
    pub sampling: SamplingParams,
    pub attempts: u32,
    pub backoff: Duration,
    pub request_logprobs: bool,
    logprobs: Mutex<HashMap<TurnKey, Vec<f64>>>,
}

impl RemotePolicy {
    pub fn new(url: impl Into<String>, model: impl Into<String>, sampling: SamplingParams, timeout: Duration) -> Result<Self, PolicyError> {
        let http = Client::builder().timeout(timeout).build().map_err(|e| PolicyError::fatal(e.to_string()))?;
        Ok(Self {
            http,
            url: url.into(),
            model: model.into(),
            sampling,
            attempts: 3,
            backoff: Duration::from_millis(250),
            request_logprobs: false,
            logprobs: Mutex::new(HashMap::new()),
        })
    }

    fn once(&self, ctx: &PolicyContext<'_>) -> Result<CompletionResponse, PolicyError> {
        let body = CompletionRequest {
            model: &self.model,
            prompt: ctx.context,
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            top_k: self.sampling.top_k,
            max_tokens: self.sampling.max_tokens,
            logprobs: self.request_logprobs,
            seed: turn_seed(ctx),
        };
        let resp = self.http.post(&self.url).json(&body).send().map_err(|e| PolicyError::retriable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(PolicyError::retriable(format!("endpoint answered {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(PolicyError::fatal(format!("endpoint answered {status}: {text}")));
        }
        resp.json().map_err(|e| PolicyError::fatal(format!("bad completion body: {e}")))
    }
}

fn turn_seed(ctx: &PolicyContext<'_>) -> u64 {
    ctx.seed ^ ((ctx.rollout_index as u64) << 32) ^ ctx.turn_index as u64
}

impl Policy for RemotePolicy {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let mut delay = self.backoff;
        let mut last = PolicyError::fatal("no attempts made");
        for attempt in 1..=self.attempts.max(1) {
            match self.once(ctx) {
                Ok(c) => {
                    if let Some(lp) = c.token_logprobs {
                        let key = (ctx.sample_id.to_owned(), ctx.rollout_index, ctx.turn_index);
                        self.logprobs.lock().unwrap_or_else(|e| e.into_inner()).insert(key, lp);
                    }
                    return Ok(c.text);
                }
                Err(e) if e.retriable && attempt < self.attempts => {
                    log::warn!("completion attempt {attempt} failed: {}; retrying in {delay:?}", e.message);
                    std::thread::sleep(delay);
                    delay *= 2;
                    last = e;
                }
                Err(e) => return Err(e),
            }
        }
        Err(last)
    }

    fn token_logprobs(&self, ctx: &PolicyContext<'_>, _message: &str) -> Option<Result<Vec<f64>, PolicyError>> {
        let key = (ctx.sample_id.to_owned(), ctx.rollout_index, ctx.turn_index);
        self.logprobs.lock().unwrap_or_else(|e| e.into_inner()).remove(&key).map(Ok)
    }
}
