use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde_json::{json, Value};

use super::cache::ContentCache;
use super::provider::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::kg_text::PromptDocument;

pub const API_KEY_ENV: &str = "COLAKG_API_KEY";

/// Generic JSON-over-HTTP chat and embedding endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub chat_url: String,
    pub embed_url: String,
    pub chat_model: String,
    pub embed_model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub dim: usize,
    /// Request field carrying the chat messages.
    pub chat_messages_field: String,
    /// JSON pointer to the completion text in the chat response.
    pub chat_response_pointer: String,
    /// Request field carrying the text to embed.
    pub embed_input_field: String,
    /// JSON pointer to the vector in the embedding response.
    pub embed_response_pointer: String,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            chat_url: "https://api.deepseek.com/chat/completions".into(),
            embed_url: "http://localhost:8080/v1/embeddings".into(),
            chat_model: "deepseek-chat".into(),
            embed_model: "sup-simcse-roberta-large".into(),
            temperature: 0.0,
            top_p: 0.001,
            dim: 1024,
            chat_messages_field: "messages".into(),
            chat_response_pointer: "/choices/0/message/content".into(),
            embed_input_field: "input".into(),
            embed_response_pointer: "/data/0/embedding".into(),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct RemoteProvider {
    cfg: RemoteConfig,
    api_key: String,
    agent: ureq::Agent,
    cache: ContentCache,
    network_calls: AtomicUsize,
}

impl RemoteProvider {
    /// Reads the credential from `COLAKG_API_KEY`.
    pub fn from_env(cfg: RemoteConfig, cache: ContentCache) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or(Error::Credential(API_KEY_ENV))?;
        Ok(Self::with_key(cfg, cache, key))
    }

    pub fn with_key(cfg: RemoteConfig, cache: ContentCache, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            api_key,
            agent,
            cache,
            network_calls: AtomicUsize::new(0),
        }
    }

    /// Requests actually sent over the network (including retries).
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn post_with_retry(&self, url: &str, body: &Value) -> Result<Value> {
        let mut last_status = String::from("none");
        let mut last_detail = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let sent = self
                .agent
                .post(url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body);
            match sent {
                Ok(resp) if resp.status().is_success() => {
                    match resp.into_body().read_json::<Value>() {
                        Ok(v) => return Ok(v),
                        Err(e) => {
                            last_status = "200".into();
                            last_detail = format!("invalid JSON body: {e}");
                        }
                    }
                }
                Ok(resp) => {
                    last_status = resp.status().as_u16().to_string();
                    last_detail = resp.into_body().read_to_string().unwrap_or_default();
                }
                Err(e) => {
                    last_status = "transport".into();
                    last_detail = e.to_string();
                }
            }
            log::warn!("request to {url} failed (attempt {attempt}, status {last_status})");
            if attempt < self.cfg.max_attempts {
                std::thread::sleep(self.cfg.backoff * 2u32.pow(attempt - 1));
            }
        }
        Err(Error::Remote {
            attempts: self.cfg.max_attempts,
            status: last_status,
            detail: last_detail.chars().take(200).collect(),
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn tag(&self) -> String {
        format!("remote:{}:{}", self.cfg.chat_model, self.cfg.embed_model)
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn comprehend(&self, prompt: &PromptDocument) -> Result<String> {
        let full = format!("{}\n{}", prompt.system_instruction, prompt.body);
        let key = ContentCache::key(&[&self.tag(), prompt.kind.as_str(), &full]);
        if let Some(hit) = self.cache.get_text(&key) {
            return Ok(hit);
        }
        let mut req = json!({
            "model": self.cfg.chat_model,
            "temperature": self.cfg.temperature,
            "top_p": self.cfg.top_p,
        });
        req[&self.cfg.chat_messages_field] = json!([
            {"role": "system", "content": prompt.system_instruction},
            {"role": "user", "content": prompt.body},
        ]);
        let resp = self.post_with_retry(&self.cfg.chat_url, &req)?;
        let text = resp
            .pointer(&self.cfg.chat_response_pointer)
            .and_then(Value::as_str)
            .unwrap_or("")
            .trim()
            .to_owned();
        if text.is_empty() {
            return Err(Error::Provider(format!(
                "empty comprehension for {} {}",
                prompt.kind.as_str(),
                prompt.subject_id
            )));
        }
        self.cache.put_text(&key, &text)?;
        Ok(text)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if text.trim().is_empty() {
            return Err(Error::Provider("cannot embed empty text".into()));
        }
        let key = ContentCache::key(&[&self.tag(), "embed", text]);
        if let Some(v) = self.cache.get_vector(&key) {
            if v.len() == self.cfg.dim {
                return Ok(v);
            }
        }
        let mut req = json!({ "model": self.cfg.embed_model });
        req[&self.cfg.embed_input_field] = json!(text);
        let resp = self.post_with_retry(&self.cfg.embed_url, &req)?;
        let arr = resp
            .pointer(&self.cfg.embed_response_pointer)
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Provider("embedding response has no vector".into()))?;
        let v: Vec<f32> = arr
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Provider("embedding vector holds non-numbers".into()))?;
        if v.len() != self.cfg.dim {
            return Err(Error::Shape(format!(
                "endpoint returned {} components, configured dimension is {}",
                v.len(),
                self.cfg.dim
            )));
        }
        self.cache.put_vector(&key, &v)?;
        Ok(v)
    }
}
