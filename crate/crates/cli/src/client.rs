//! Thin blocking client for the scoring service's HTTP API.
//!
//! Request and response types are shared with the server crate, so
//! round-trips are lossless; errors carry the server's kind and message.

use std::time::Duration;

use anyhow::{bail, Context, Result};
use privscore_service::types::{
    ErrorEnvelope, JobView, RecordSubmission, RegisterResponse, ScoresResponse, SubmitResponse,
    TaskRegistration,
};
use serde::de::DeserializeOwned;

/// Blocking HTTP client bound to one server.
pub struct Client {
    http: reqwest::blocking::Client,
    base: String,
}

impl Client {
    /// `server` may omit the scheme (`127.0.0.1:8080` works); trailing
    /// slashes are stripped.
    pub fn new(server: &str) -> Result<Self> {
        let trimmed = server.trim_end_matches('/');
        let base = if trimmed.contains("://") {
            trimmed.to_string()
        } else {
            format!("http://{trimmed}")
        };
        // Registration trains the shadow ensemble before replying, which can
        // outlive any fixed request timeout; callers bound their own waits.
        let http = reqwest::blocking::Client::builder()
            .timeout(None::<Duration>)
            .build()
            .context("building http client")?;
        Ok(Self { http, base })
    }

    pub fn register(&self, registration: &TaskRegistration) -> Result<RegisterResponse> {
        let url = format!("{}/tasks", self.base);
        let resp = self
            .http
            .post(&url)
            .json(registration)
            .send()
            .with_context(|| format!("POST {url}"))?;
        decode(resp)
    }

    pub fn submit(&self, task_id: &str, submission: &RecordSubmission) -> Result<SubmitResponse> {
        let url = format!("{}/tasks/{task_id}/records", self.base);
        let resp = self
            .http
            .post(&url)
            .json(submission)
            .send()
            .with_context(|| format!("POST {url}"))?;
        decode(resp)
    }

    pub fn trigger(&self, task_id: &str) -> Result<JobView> {
        let url = format!("{}/tasks/{task_id}/jobs", self.base);
        let resp = self
            .http
            .post(&url)
            .send()
            .with_context(|| format!("POST {url}"))?;
        decode(resp)
    }

    pub fn job(&self, job_id: &str) -> Result<JobView> {
        let url = format!("{}/jobs/{job_id}", self.base);
        let resp = self.http.get(&url).send().with_context(|| format!("GET {url}"))?;
        decode(resp)
    }

    pub fn task_jobs(&self, task_id: &str) -> Result<Vec<JobView>> {
        let url = format!("{}/tasks/{task_id}/jobs", self.base);
        let resp = self.http.get(&url).send().with_context(|| format!("GET {url}"))?;
        decode(resp)
    }

    /// Ids are `[A-Za-z0-9_-]` by construction, so inlining the contributor
    /// into the query string needs no escaping.
    pub fn scores(&self, task_id: &str, contributor: &str) -> Result<ScoresResponse> {
        let url = format!(
            "{}/tasks/{task_id}/scores?contributor={contributor}",
            self.base
        );
        let resp = self.http.get(&url).send().with_context(|| format!("GET {url}"))?;
        decode(resp)
    }
}

fn decode<T: DeserializeOwned>(resp: reqwest::blocking::Response) -> Result<T> {
    let status = resp.status();
    let text = resp.text().context("reading response body")?;
    if status.is_success() {
        return serde_json::from_str(&text)
            .with_context(|| format!("unexpected response body: {text}"));
    }
    match serde_json::from_str::<ErrorEnvelope>(&text) {
        Ok(env) => bail!(
            "{} ({}): {}",
            env.error.kind,
            status.as_u16(),
            env.error.message
        ),
        Err(_) => bail!("http {}: {text}", status.as_u16()),
    }
}
