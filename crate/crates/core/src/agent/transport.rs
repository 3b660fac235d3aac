use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;

use super::{Ack, AgentConfig, AgentRequest, SendError, Transport};

/// Talks to the gateway's `/agent/...` endpoints.
pub struct HttpTransport {
    client: Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, SendError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| SendError::Network(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, config: &AgentConfig, request: &AgentRequest) -> Result<Ack, SendError> {
        let base = format!(
            "{}/agent/executions/{}",
            config.server.trim_end_matches('/'),
            config.execution_id
        );
        let builder = match request {
            AgentRequest::State(update) => self.client.put(format!("{base}/state")).json(update),
            AgentRequest::Metric(m) => self.client.post(format!("{base}/metrics")).json(m),
            AgentRequest::Csv { batch_id, payload } => self
                .client
                .post(format!("{base}/metrics/csv"))
                .header("content-type", "text/csv")
                .header("x-batch-id", batch_id)
                .body(payload.clone()),
        };
        let resp = builder
            .bearer_auth(&config.token)
            .send()
            .map_err(|e| SendError::Network(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| SendError::Network(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&body).map_err(|e| SendError::Rejected {
                status: status.as_u16(),
                body: format!("unreadable acknowledgement: {e}"),
            });
        }
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(SendError::Network(format!("{status}: {body}")));
        }
        Err(SendError::Rejected {
            status: status.as_u16(),
            body,
        })
    }
}
