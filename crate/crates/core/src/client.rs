//! Blocking client for the experimenter API, used by the CLI.

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::Method;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach {url}: {detail}")]
    Unreachable { url: String, detail: String },
    /// Non-2xx answer; `kind` is the server's error code.
    #[error("{status} {kind}: {message}")]
    Api { status: u16, kind: String, message: String, details: Option<Value> },
}

impl ClientError {
    pub fn kind(&self) -> &str {
        match self {
            ClientError::Unreachable { .. } => "unreachable",
            ClientError::Api { kind, .. } => kind,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    token: Option<String>,
    http: Client,
}

impl ApiClient {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Result<Self, ClientError> {
        let base = base.into().trim_end_matches('/').to_owned();
        let http = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ClientError::Unreachable {
                url: base.clone(),
                detail: e.to_string(),
            })?;
        Ok(Self { base, token, http })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> (String, RequestBuilder) {
        let url = format!("{}{path}", self.base);
        let mut rb = self.http.request(method, &url);
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        (url, rb)
    }

    fn send(&self, url: String, rb: RequestBuilder) -> Result<String, ClientError> {
        let resp = rb.send().map_err(|e| ClientError::Unreachable {
            url: url.clone(),
            detail: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ClientError::Unreachable {
            url,
            detail: e.to_string(),
        })?;
        if status.is_success() {
            return Ok(text);
        }
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::Null);
        Err(ClientError::Api {
            status: status.as_u16(),
            kind: body["error"].as_str().unwrap_or("http_error").to_owned(),
            message: body["message"].as_str().map_or(text.clone(), str::to_owned),
            details: body.get("details").cloned(),
        })
    }

    fn json(&self, method: Method, path: &str, body: Option<&Value>) -> Result<Value, ClientError> {
        let (url, mut rb) = self.request(method, path);
        if let Some(b) = body {
            rb = rb.json(b);
        }
        let text = self.send(url, rb)?;
        Ok(serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    pub fn get(&self, path: &str) -> Result<Value, ClientError> {
        self.json(Method::GET, path, None)
    }

    pub fn get_text(&self, path: &str) -> Result<String, ClientError> {
        let (url, rb) = self.request(Method::GET, path);
        self.send(url, rb)
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        self.json(Method::POST, path, Some(body))
    }

    pub fn put(&self, path: &str, body: &Value) -> Result<Value, ClientError> {
        self.json(Method::PUT, path, Some(body))
    }

    pub fn delete(&self, path: &str) -> Result<Value, ClientError> {
        self.json(Method::DELETE, path, None)
    }
}
