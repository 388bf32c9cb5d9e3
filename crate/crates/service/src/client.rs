use std::time::Duration;

use kgenv_core::eval::ExecutorSource;
use kgenv_core::protocol::{Executor, ExecutorError};
use kgenv_core::retrieval::{ActionCall, FormatMode, Observation};
use kgenv_core::QASample;
use reqwest::blocking::Client;
use thiserror::Error;

use crate::wire::{Health, RetrieveRequest, RetrieveResponse, SampleInfo};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response carries no observation: {0}")]
    NoObservation(String),
}

/// Blocking client for the retrieval service.
#[derive(Debug, Clone)]
pub struct KgClient {
    base: String,
    http: Client,
}

impl KgClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = Client::builder().timeout(Duration::from_secs(30)).build()?;
        Ok(Self { base: base_url.trim_end_matches('/').to_owned(), http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            Ok(resp)
        } else {
            Err(ClientError::Status { status: status.as_u16(), body: resp.text().unwrap_or_default() })
        }
    }

    pub fn retrieve(&self, req: &RetrieveRequest) -> Result<RetrieveResponse, ClientError> {
        let resp = self.http.post(format!("{}/retrieve", self.base)).json(req).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    pub fn retrieve_batch(&self, reqs: &[RetrieveRequest]) -> Result<Vec<RetrieveResponse>, ClientError> {
        let resp = self.http.post(format!("{}/retrieve/batch", self.base)).json(reqs).send()?;
        Ok(Self::check(resp)?.json()?)
    }

    /// Posts raw bytes to a path and returns status and body text.
    pub fn post_raw(&self, path: &str, body: Vec<u8>) -> Result<(u16, String), ClientError> {
        let resp = self
            .http
            .post(format!("{}{path}", self.base))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()?;
        let status = resp.status().as_u16();
        Ok((status, resp.text()?))
    }

    pub fn get_raw(&self, path: &str) -> Result<(u16, String), ClientError> {
        let resp = self.http.get(format!("{}{path}", self.base)).send()?;
        let status = resp.status().as_u16();
        Ok((status, resp.text()?))
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        Ok(Self::check(self.http.get(format!("{}/health", self.base)).send()?)?.json()?)
    }

    pub fn sample_info(&self, sample_id: &str) -> Result<SampleInfo, ClientError> {
        let mut url = reqwest::Url::parse(&self.base).map_err(|e| ClientError::NoObservation(e.to_string()))?;
        url.path_segments_mut()
            .map_err(|_| ClientError::NoObservation("base url cannot carry a path".into()))?
            .extend(["samples", sample_id]);
        Ok(Self::check(self.http.get(url).send()?)?.json()?)
    }
}

/// Executes a sample's retrieval calls on a remote service.
#[derive(Debug, Clone)]
pub struct RemoteExecutor {
    client: KgClient,
    sample_id: String,
    format: Option<FormatMode>,
}

impl RemoteExecutor {
    pub fn new(client: KgClient, sample_id: impl Into<String>, format: Option<FormatMode>) -> Self {
        Self { client, sample_id: sample_id.into(), format }
    }
}

impl Executor for RemoteExecutor {
    fn execute(&self, call: &ActionCall) -> Result<Observation, ExecutorError> {
        let mut req = RetrieveRequest::new(self.sample_id.clone(), call);
        req.format_mode = self.format;
        let resp = self.client.retrieve(&req).map_err(|e| ExecutorError(e.to_string()))?;
        resp.to_observation()
            .ok_or_else(|| ExecutorError(format!("response without observation: {}", resp.rendered_text)))
    }
}

/// Routes every sample to the same remote service.
#[derive(Debug, Clone)]
pub struct RemoteGraphs {
    pub client: KgClient,
    pub format: Option<FormatMode>,
}

impl ExecutorSource for RemoteGraphs {
    fn executor_for<'a>(&'a self, sample: &'a QASample) -> Box<dyn Executor + Sync + 'a> {
        Box::new(RemoteExecutor::new(self.client.clone(), sample.sample_id.clone(), self.format))
    }
}
