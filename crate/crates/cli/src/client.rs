//! Blocking HTTP client for the ingestion service.

use std::time::Duration;

use impact_core::{StoredRecord, UplinkBatch};
use serde::de::DeserializeOwned;

use crate::server::{AckBody, ErrorBody, API_KEY_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] ureq::Error),
    #[error("server answered {status}: {message}")]
    Status { status: u16, message: String },
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(_) => None,
        }
    }
}

pub struct Client {
    base: String,
    api_key: String,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base_url: &str, api_key: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self { base: base_url.trim_end_matches('/').to_string(), api_key: api_key.to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn finish<T: DeserializeOwned>(resp: ureq::http::Response<ureq::Body>) -> Result<T, ClientError> {
        let status = resp.status().as_u16();
        let mut body = resp.into_body();
        if status == 200 {
            return Ok(body.read_json()?);
        }
        let text = body.read_to_string().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|e| e.error).unwrap_or(text);
        Err(ClientError::Status { status, message })
    }

    pub fn health(&self) -> Result<(), ClientError> {
        let resp = self.agent.get(self.url("/v1/health")).call()?;
        Self::finish::<serde_json::Value>(resp).map(|_| ())
    }

    pub fn post_batch(&self, batch: &UplinkBatch) -> Result<AckBody, ClientError> {
        let body = serde_json::to_vec(batch).expect("batch serializes");
        let resp = self
            .agent
            .post(self.url("/v1/batches"))
            .header(API_KEY_HEADER, &self.api_key)
            .header("content-type", "application/json")
            .send(&body[..])?;
        Self::finish(resp)
    }

    pub fn query_records(&self, device_id: &str, from: i64, to: i64) -> Result<Vec<StoredRecord>, ClientError> {
        let resp = self
            .agent
            .get(self.url("/v1/records"))
            .header(API_KEY_HEADER, &self.api_key)
            .query("device_id", device_id)
            .query("from", from.to_string())
            .query("to", to.to_string())
            .call()?;
        Self::finish(resp)
    }

    pub fn devices(&self) -> Result<Vec<String>, ClientError> {
        let resp = self.agent.get(self.url("/v1/devices")).header(API_KEY_HEADER, &self.api_key).call()?;
        Self::finish(resp)
    }
}
