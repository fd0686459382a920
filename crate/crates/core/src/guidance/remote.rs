use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{image_hash, GuidanceResult};
use crate::error::{Error, Result};
use crate::image::Image;

pub const EMBEDDING_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8700`.
    pub endpoint: String,
    pub retries: u32,
    pub timeout_secs: f64,
    pub retry_backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8700".into(),
            retries: 3,
            timeout_secs: 120.0,
            retry_backoff_ms: 250,
        }
    }
}

/// Failure of one attempt; `retry` marks transient ones.
struct Attempt {
    reason: String,
    retry: bool,
    protocol: bool,
}

impl Attempt {
    fn transient(reason: String) -> Self {
        Self {
            reason,
            retry: true,
            protocol: false,
        }
    }

    fn fatal(reason: String) -> Self {
        Self {
            reason,
            retry: false,
            protocol: false,
        }
    }

    fn protocol(reason: String) -> Self {
        Self {
            reason,
            retry: false,
            protocol: true,
        }
    }
}

#[derive(Deserialize)]
struct GuidanceReply {
    loss: f64,
    grad_b64: String,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f64>,
}

/// Client for the HTTP guidance protocol.
///
/// Results are cached by `(image hash, prompt)` for the current step only;
/// text embeddings are cached for the client's lifetime.
pub struct RemoteGuidance {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache_step: Option<u64>,
    cache: HashMap<(u64, String), GuidanceResult>,
    text_embeddings: HashMap<String, Vec<f64>>,
    requests: u64,
}

impl RemoteGuidance {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let url = config.endpoint.trim_end_matches('/');
        let rest = url
            .strip_prefix("http://")
            .ok_or_else(|| Error::param(format!("endpoint must be an http:// URL, got {url:?}")))?;
        if rest.is_empty() || rest.contains(char::is_whitespace) {
            return Err(Error::param(format!("malformed endpoint {url:?}")));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(Error::param("timeout must be positive"));
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Ok(Self {
            config: RemoteConfig {
                endpoint: url.to_string(),
                ..config
            },
            agent,
            cache_step: None,
            cache: HashMap::new(),
            text_embeddings: HashMap::new(),
            requests: 0,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests
    }

    fn once(&mut self, method: &str, path: &str, body: Option<&Value>) -> std::result::Result<String, Attempt> {
        self.requests += 1;
        let url = format!("{}{}", self.config.endpoint, path);
        let req = self.agent.request(method, &url);
        let resp = match body {
            Some(b) => req.send_json(b.clone()),
            None => req.call(),
        };
        match resp {
            Ok(r) => r
                .into_string()
                .map_err(|e| Attempt::transient(format!("reading response: {e}"))),
            Err(ureq::Error::Status(code, r)) => {
                let detail = r
                    .into_string()
                    .ok()
                    .and_then(|s| serde_json::from_str::<Value>(&s).ok())
                    .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
                    .unwrap_or_default();
                let reason = format!("HTTP {code} from {path}: {detail}");
                if code >= 500 {
                    Err(Attempt::transient(reason))
                } else {
                    Err(Attempt::fatal(reason))
                }
            }
            Err(e) => Err(Attempt::transient(format!("{path}: {e}"))),
        }
    }

    fn call<T>(
        &mut self,
        step: u64,
        method: &str,
        path: &str,
        body: Option<Value>,
        parse: impl Fn(&str) -> std::result::Result<T, Attempt>,
    ) -> Result<T> {
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.retry_backoff_ms * attempt as u64));
            }
            let failure = match self.once(method, path, body.as_ref()) {
                Ok(text) => match parse(&text) {
                    Ok(v) => return Ok(v),
                    Err(a) => a,
                },
                Err(a) => a,
            };
            if failure.protocol {
                return Err(Error::Protocol(failure.reason));
            }
            log::warn!("guidance attempt {} failed: {}", attempt + 1, failure.reason);
            last = failure.reason;
            if !failure.retry {
                break;
            }
        }
        Err(Error::Transport { step, reason: last })
    }

    /// Scores `image` against `prompt`. Returns the service's loss (negative
    /// cosine similarity) and its gradient with respect to the image.
    pub fn score(&mut self, image: &Image, prompt: &str, step: u64) -> Result<GuidanceResult> {
        if prompt.trim().is_empty() {
            return Err(Error::param("prompt must be non-empty"));
        }
        if self.cache_step != Some(step) {
            self.cache.clear();
            self.cache_step = Some(step);
        }
        let key = (image_hash(image), prompt.to_string());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let body = json!({
            "width": image.width(),
            "height": image.height(),
            "prompt": prompt,
            "image_b64": B64.encode(image.to_f32_le_bytes()),
        });
        let (w, h) = (image.width(), image.height());
        let result = self.call(step, "POST", "/v1/guidance", Some(body), |text| {
            let reply: GuidanceReply = parse_json(text)?;
            let bytes = B64
                .decode(reply.grad_b64.as_bytes())
                .map_err(|e| Attempt::transient(format!("grad_b64 is not base64: {e}")))?;
            let grad = Image::from_f32_le_bytes(w, h, &bytes)
                .map_err(|e| Attempt::transient(e.to_string()))?
                .into_data();
            let result = GuidanceResult { loss: reply.loss, grad };
            if !result.is_finite() {
                return Err(Attempt::protocol("non-finite value in guidance response".into()));
            }
            Ok(result)
        })?;
        self.cache.insert(key, result.clone());
        Ok(result)
    }

    pub fn embed_text(&mut self, prompt: &str) -> Result<Vec<f64>> {
        if let Some(e) = self.text_embeddings.get(prompt) {
            return Ok(e.clone());
        }
        let e = self.call(0, "POST", "/v1/embed_text", Some(json!({ "prompt": prompt })), parse_embedding)?;
        self.text_embeddings.insert(prompt.to_string(), e.clone());
        Ok(e)
    }

    pub fn embed_image(&mut self, image: &Image) -> Result<Vec<f64>> {
        let body = json!({
            "width": image.width(),
            "height": image.height(),
            "image_b64": B64.encode(image.to_f32_le_bytes()),
        });
        self.call(0, "POST", "/v1/embed_image", Some(body), parse_embedding)
    }

    pub fn health(&mut self) -> Result<()> {
        self.call(0, "GET", "/v1/health", None, |_| Ok(()))
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> std::result::Result<T, Attempt> {
    serde_json::from_str(text).map_err(|e| {
        // Python's json module writes bare NaN/Infinity tokens.
        if text.contains("NaN") || text.contains("Infinity") {
            Attempt::protocol("non-finite value in response".into())
        } else {
            Attempt::transient(format!("malformed response: {e}"))
        }
    })
}

fn parse_embedding(text: &str) -> std::result::Result<Vec<f64>, Attempt> {
    let reply: EmbeddingReply = parse_json(text)?;
    if reply.embedding.len() != EMBEDDING_DIM {
        return Err(Attempt::transient(format!(
            "embedding has {} entries, expected {EMBEDDING_DIM}",
            reply.embedding.len()
        )));
    }
    if reply.embedding.iter().any(|v| !v.is_finite()) {
        return Err(Attempt::protocol("non-finite embedding entry".into()));
    }
    Ok(reply.embedding)
}
