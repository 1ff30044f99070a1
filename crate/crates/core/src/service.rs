//! Wire client for the model sidecar, plus the retry and in-flight limiting
//! used by every remote call.
//!
//! Endpoints (HTTP, JSON bodies):
//!
//! | method | path               | request                      | response                                  |
//! |--------|--------------------|------------------------------|-------------------------------------------|
//! | GET    | `/v1/profile`      |                              | `{"model_name": str, "dim": int}`         |
//! | POST   | `/v1/embed-image`  | `{"image_ref": str}`         | `{"embedding": [float; dim]}`             |
//! | POST   | `/v1/embed-text`   | `{"texts": [str]}`           | `{"embeddings": [[float; dim]]}`          |
//! | POST   | `/v1/describe`     | `{"image_ref": str, "prompt": str}` | `{"text": str, "metadata": {..}}`  |
//!
//! Failures carry `{"error": {"code": str, "message": str}}` with a 4xx/5xx status.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("service unreachable: {0}")]
    Unreachable(String),
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("service error `{code}`: {message}")]
    Remote { code: String, message: String },
    #[error("malformed service payload: {0}")]
    BadPayload(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<ServiceError>,
    },
}

/// Errors a [`RetryPolicy`] knows how to classify.
pub trait Retryable: Sized {
    /// Whether another attempt could plausibly succeed.
    fn is_transient(&self) -> bool;
    /// Wraps the last error once retries are used up.
    fn exhausted(attempts: u32, last: Self) -> Self;
}

impl Retryable for ServiceError {
    fn is_transient(&self) -> bool {
        ServiceError::is_transient(self)
    }

    fn exhausted(attempts: u32, last: Self) -> Self {
        ServiceError::RetriesExhausted {
            attempts,
            last: Box::new(last),
        }
    }
}

impl ServiceError {
    /// Whether another attempt could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ServiceError::Unreachable(_) => true,
            ServiceError::Status { status, .. } => transient_status(*status),
            _ => false,
        }
    }
}

fn transient_status(status: u16) -> bool {
    matches!(status, 408 | 429) || (500..600).contains(&status)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedImageRequest {
    pub image_ref: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedImageResponse {
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedTextRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedTextResponse {
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DescribeRequest {
    pub image_ref: String,
    pub prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DescribeResponse {
    pub text: String,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProfileResponse {
    pub model_name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorPayload {
    pub error: ErrorBody,
}

/// Bounded exponential backoff: attempt `n` (0-based) waits
/// `min(base * factor^n, max_delay)` before retrying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub base: Duration,
    pub factor: f64,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base: Duration::from_millis(250),
            factor: 2.0,
            max_delay: Duration::from_secs(8),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// No sleeping between attempts; for tests and local stubs.
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base: Duration::ZERO,
            factor: 1.0,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let scaled = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        Duration::from_secs_f64(scaled.min(self.max_delay.as_secs_f64()))
    }

    /// Runs `op` until it succeeds, fails permanently, or retries run out.
    pub fn run<T, E: Retryable + std::fmt::Display>(&self, mut op: impl FnMut() -> Result<T, E>) -> Result<T, E> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    let wait = self.delay(attempt);
                    log::debug!("transient failure ({e}), retry {} in {wait:?}", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) if e.is_transient() => return Err(E::exhausted(attempt + 1, e)),
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore capping concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        InFlightGuard { limit: self }
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limit.current.lock().unwrap() -= 1;
        self.limit.freed.notify_one();
    }
}

/// Blocking HTTP client for the sidecar. Makes exactly one request per call;
/// retries are layered on top by callers.
#[derive(Debug)]
pub struct SidecarClient {
    base_url: String,
    http: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl SidecarClient {
    pub fn new(base_url: impl Into<String>, max_in_flight: usize, timeout: Duration) -> Result<Self, ServiceError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            http,
            limit: InFlightLimit::new(max_in_flight),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn decode<T: for<'de> Deserialize<'de>>(resp: reqwest::blocking::Response) -> Result<T, ServiceError> {
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        if !status.is_success() {
            if let Ok(p) = serde_json::from_str::<ErrorPayload>(&body) {
                if !transient_status(status.as_u16()) {
                    return Err(ServiceError::Remote {
                        code: p.error.code,
                        message: p.error.message,
                    });
                }
            }
            return Err(ServiceError::Status {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&body).map_err(|e| ServiceError::BadPayload(e.to_string()))
    }

    fn post<Q: Serialize, T: for<'de> Deserialize<'de>>(&self, path: &str, body: &Q) -> Result<T, ServiceError> {
        let _slot = self.limit.acquire();
        let resp = self
            .http
            .post(format!("{}{path}", self.base_url))
            .json(body)
            .send()
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        Self::decode(resp)
    }

    pub fn profile(&self) -> Result<ProfileResponse, ServiceError> {
        let _slot = self.limit.acquire();
        let resp = self
            .http
            .get(format!("{}/v1/profile", self.base_url))
            .send()
            .map_err(|e| ServiceError::Unreachable(e.to_string()))?;
        Self::decode(resp)
    }

    pub fn embed_image(&self, image_ref: &str) -> Result<Vec<f32>, ServiceError> {
        let r: EmbedImageResponse = self.post(
            "/v1/embed-image",
            &EmbedImageRequest {
                image_ref: image_ref.to_string(),
            },
        )?;
        Ok(r.embedding)
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ServiceError> {
        let r: EmbedTextResponse = self.post(
            "/v1/embed-text",
            &EmbedTextRequest {
                texts: texts.to_vec(),
            },
        )?;
        Ok(r.embeddings)
    }

    pub fn describe(&self, image_ref: &str, prompt: &str) -> Result<DescribeResponse, ServiceError> {
        self.post(
            "/v1/describe",
            &DescribeRequest {
                image_ref: image_ref.to_string(),
                prompt: prompt.to_string(),
            },
        )
    }
}
