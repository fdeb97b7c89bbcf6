//! Client for OpenAI-compatible chat-completion endpoints.
//!
//! Yes/no questions request a single token with `top_logprobs`; the logits
//! for "yes" and "no" are read off the first position. Log-probabilities
//! stand in for logits: the two-way softmax only depends on their
//! difference, which the shared normalizer cancels.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ModelBackend, Request, YesNoLogits, SATURATED_GAP};
use crate::error::{Error, Result};
use crate::image::ImageLocation;

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const MAX_RETRIES_LIMIT: u32 = 10;
const TOP_LOGPROBS: u32 = 20;
const GENERATION_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_model")]
    pub model_id: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_model() -> String {
    "default".into()
}
fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key: None,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parsed = url::Url::parse(&self.base_url)
            .map_err(|e| Error::InvalidInput(format!("endpoint url `{}`: {e}", self.base_url)))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(Error::InvalidInput(format!(
                "endpoint url `{}` must be http(s)",
                self.base_url
            )));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::InvalidInput(format!(
                "timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return Err(Error::InvalidInput(format!(
                "max_retries {} exceeds {MAX_RETRIES_LIMIT}",
                self.max_retries
            )));
        }
        if self.model_id.trim().is_empty() {
            return Err(Error::InvalidInput("model_id must be non-empty".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

pub struct OpenAiBackend {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    backoff_base: Duration,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("base_url", &self.config.base_url)
            .field("model_id", &self.config.model_id)
            .finish()
    }
}

impl OpenAiBackend {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout())
            .build()
            .map_err(|e| Error::InvalidInput(format!("http client: {e}")))?;
        Ok(Self {
            config,
            client,
            backoff_base: Duration::from_millis(250),
        })
    }

    /// Sets the first retry delay; later retries double it.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn messages(&self, request: &Request) -> Result<Vec<Value>> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({ "role": "system", "content": system }));
        }
        let content = match &request.prompt.image {
            None => json!(request.prompt.text),
            Some(image) => {
                let url = match image.location() {
                    ImageLocation::Url(u) => u.clone(),
                    ImageLocation::File(path) => {
                        let bytes = image.read_bytes()?;
                        let mime = match path
                            .extension()
                            .and_then(|e| e.to_str())
                            .map(str::to_ascii_lowercase)
                            .as_deref()
                        {
                            Some("jpg" | "jpeg") => "image/jpeg",
                            Some("gif") => "image/gif",
                            Some("webp") => "image/webp",
                            _ => "image/png",
                        };
                        format!(
                            "data:{mime};base64,{}",
                            base64::engine::general_purpose::STANDARD.encode(bytes)
                        )
                    }
                };
                let (before, after) = request.prompt.segments();
                let mut parts = Vec::new();
                if !before.is_empty() {
                    parts.push(json!({ "type": "text", "text": before }));
                }
                parts.push(json!({ "type": "image_url", "image_url": { "url": url } }));
                if !after.is_empty() {
                    parts.push(json!({ "type": "text", "text": after }));
                }
                Value::Array(parts)
            }
        };
        messages.push(json!({ "role": "user", "content": content }));
        Ok(messages)
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let url = self.endpoint();
        let mut last_error = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            let mut req = self.client.post(&url).json(body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<Value>().map_err(|e| Error::Protocol {
                            backend: self.identity(),
                            message: format!("response is not JSON: {e}"),
                        });
                    }
                    let text = resp.text().unwrap_or_default();
                    last_error = format!("HTTP {status}: {}", truncate(&text, 200));
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(Error::BackendUnavailable {
                            backend: self.identity(),
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            log::debug!("{} attempt {} failed: {last_error}", self.identity(), attempt + 1);
        }
        Err(Error::BackendUnavailable {
            backend: self.identity(),
            attempts,
            message: last_error,
        })
    }

    fn protocol(&self, message: impl Into<String>) -> Error {
        Error::Protocol {
            backend: self.identity(),
            message: message.into(),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Which answer a detokenized token stands for, if any.
pub fn classify_token(token: &str) -> Option<bool> {
    let t = token
        .trim_start_matches(|c: char| c.is_whitespace() || c == '\u{2581}' || c == '\u{120}')
        .trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | '!'))
        .to_lowercase();
    match t.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

fn log_sum_exp(xs: &[f64]) -> Option<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return None;
    }
    Some(m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

/// Outcome of reading yes/no evidence from a top-k list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extraction {
    Logits(YesNoLogits),
    /// Neither token was listed; the caller decides from the greedy token.
    Missing,
}

/// Combines every yes/no variant in `top` (token, logprob). When only one
/// class is listed, the other is bounded by the smaller of the lowest
/// listed logprob and the unlisted probability mass.
pub fn extract_yes_no(top: &[(String, f64)]) -> Result<Extraction> {
    let mut yes = Vec::new();
    let mut no = Vec::new();
    for (tok, lp) in top {
        if !lp.is_finite() {
            continue;
        }
        match classify_token(tok) {
            Some(true) => yes.push(*lp),
            Some(false) => no.push(*lp),
            None => {}
        }
    }
    let (ly, ln) = match (log_sum_exp(&yes), log_sum_exp(&no)) {
        (None, None) => return Ok(Extraction::Missing),
        (Some(y), Some(n)) => (y, n),
        (present_y, present_n) => {
            let lowest = top
                .iter()
                .map(|(_, lp)| *lp)
                .filter(|lp| lp.is_finite())
                .fold(f64::INFINITY, f64::min);
            let listed: f64 = top.iter().map(|(_, lp)| lp.exp()).filter(|p| p.is_finite()).sum();
            let leftover = 1.0 - listed;
            let bound = if leftover > 0.0 {
                leftover.ln().min(lowest)
            } else {
                -SATURATED_GAP
            };
            let bound = bound.max(-SATURATED_GAP);
            (present_y.unwrap_or(bound), present_n.unwrap_or(bound))
        }
    };
    Ok(Extraction::Logits(YesNoLogits::new(ly, ln)?))
}

/// Logits assigning all mass to the class of the greedy token.
pub fn greedy_fallback(token: &str) -> YesNoLogits {
    if classify_token(token) == Some(true) {
        YesNoLogits {
            logit_yes: 0.0,
            logit_no: -SATURATED_GAP,
        }
    } else {
        YesNoLogits {
            logit_yes: -SATURATED_GAP,
            logit_no: 0.0,
        }
    }
}

impl ModelBackend for OpenAiBackend {
    fn identity(&self) -> String {
        format!("openai:{}:{}", self.config.base_url.trim_end_matches('/'), self.config.model_id)
    }

    fn yes_no(&self, request: &Request) -> Result<YesNoLogits> {
        let body = json!({
            "model": self.config.model_id,
            "messages": self.messages(request)?,
            "temperature": 0,
            "max_tokens": 1,
            "logprobs": true,
            "top_logprobs": TOP_LOGPROBS,
        });
        let resp = self.post(&body)?;
        let choice = &resp["choices"][0];
        let first = choice["logprobs"]["content"]
            .get(0)
            .ok_or_else(|| self.protocol("response carries no logprobs"))?;
        let top = first["top_logprobs"]
            .as_array()
            .ok_or_else(|| self.protocol("response carries no top_logprobs"))?;
        let mut pairs = Vec::with_capacity(top.len());
        for entry in top {
            let tok = entry["token"]
                .as_str()
                .ok_or_else(|| self.protocol("top_logprobs entry without token"))?;
            let lp = entry["logprob"]
                .as_f64()
                .ok_or_else(|| self.protocol("top_logprobs entry without logprob"))?;
            pairs.push((tok.to_owned(), lp));
        }
        match extract_yes_no(&pairs)? {
            Extraction::Logits(l) => Ok(l),
            Extraction::Missing => {
                let token = first["token"]
                    .as_str()
                    .or_else(|| choice["message"]["content"].as_str())
                    .unwrap_or("");
                log::warn!(
                    "{}: neither yes nor no in top-{}; using greedy token {token:?}",
                    self.identity(),
                    pairs.len()
                );
                Ok(greedy_fallback(token))
            }
        }
    }

    fn generate(&self, request: &Request) -> Result<String> {
        let body = json!({
            "model": self.config.model_id,
            "messages": self.messages(request)?,
            "temperature": 0,
            "max_tokens": GENERATION_MAX_TOKENS,
        });
        let resp = self.post(&body)?;
        resp["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| self.protocol("response has no message content"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::yes_no_probability;

    fn pairs(xs: &[(&str, f64)]) -> Vec<(String, f64)> {
        xs.iter().map(|(t, l)| (t.to_string(), *l)).collect()
    }

    #[test]
    fn token_variants() {
        for t in ["yes", "Yes", " YES", "\u{2581}Yes", "\u{120}yes"] {
            assert_eq!(classify_token(t), Some(true), "{t:?}");
        }
        assert_eq!(classify_token(" No"), Some(false));
        assert_eq!(classify_token("Yes."), Some(true));
        assert_eq!(classify_token("yesterday"), None);
        assert_eq!(classify_token("maybe"), None);
    }

    #[test]
    fn logprobs_renormalize_to_pair_probability() {
        let top = pairs(&[("Yes", (0.6f64).ln()), ("No", (0.2f64).ln()), ("The", (0.1f64).ln())]);
        let Extraction::Logits(l) = extract_yes_no(&top).unwrap() else {
            panic!("expected logits");
        };
        assert!((yes_no_probability(l).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn variants_are_pooled() {
        let top = pairs(&[("Yes", (0.3f64).ln()), (" yes", (0.3f64).ln()), ("No", (0.2f64).ln())]);
        let Extraction::Logits(l) = extract_yes_no(&top).unwrap() else {
            panic!()
        };
        assert!((yes_no_probability(l).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_bounded() {
        let top = pairs(&[("Yes", (0.9f64).ln()), ("Sure", (0.05f64).ln())]);
        let Extraction::Logits(l) = extract_yes_no(&top).unwrap() else {
            panic!()
        };
        // "no" bounded by min(0.05 unlisted mass, 0.05 lowest listed)
        let p = yes_no_probability(l).unwrap();
        assert!((p - 0.9 / 0.95).abs() < 1e-9, "{p}");
    }

    #[test]
    fn neither_class_reports_missing() {
        let top = pairs(&[("The", -0.1), ("A", -3.0)]);
        assert_eq!(extract_yes_no(&top).unwrap(), Extraction::Missing);
        assert_eq!(yes_no_probability(greedy_fallback("Yes")).unwrap(), 1.0);
        assert_eq!(yes_no_probability(greedy_fallback("The")).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(EndpointConfig::new("http://localhost:8000/v1", "m").validate().is_ok());
        assert!(EndpointConfig::new("not a url", "m").validate().is_err());
        assert!(EndpointConfig::new("ftp://x", "m").validate().is_err());
        let mut c = EndpointConfig::new("http://x", "m");
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
        c.timeout_secs = 1.0;
        c.max_retries = 11;
        assert!(c.validate().is_err());
    }
}
