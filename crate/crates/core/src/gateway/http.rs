use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::{Backend, BackendError, BackendReply, Locality, ModelRequest};
use crate::flow::ModelRole;

/// Settings for a chat-completion style HTTP backend.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub id: String,
    pub locality: Locality,
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub role_models: BTreeMap<ModelRole, String>,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Reads `{PREFIX}_URL`, `{PREFIX}_KEY`, `{PREFIX}_MODEL`, `{PREFIX}_MODEL_<ROLE>`,
    /// `{PREFIX}_LOCALITY` and `{PREFIX}_TIMEOUT_SECS`. Returns `None` when no URL is set.
    pub fn from_env(prefix: &str, id: &str, default_locality: Locality) -> Option<Self> {
        Self::from_lookup(prefix, id, default_locality, |k| std::env::var(k).ok())
    }

    pub fn from_lookup(
        prefix: &str,
        id: &str,
        default_locality: Locality,
        get: impl Fn(&str) -> Option<String>,
    ) -> Option<Self> {
        let url = get(&format!("{prefix}_URL"))?;
        let locality = match get(&format!("{prefix}_LOCALITY")).as_deref() {
            Some("local") => Locality::Local,
            Some("cloud") => Locality::Cloud,
            _ => default_locality,
        };
        let role_models = ModelRole::ALL
            .into_iter()
            .filter_map(|r| get(&format!("{prefix}_MODEL_{}", r.as_str().to_ascii_uppercase())).map(|m| (r, m)))
            .collect();
        let timeout = get(&format!("{prefix}_TIMEOUT_SECS")).and_then(|s| s.parse().ok()).unwrap_or(30);
        Some(Self {
            id: id.to_string(),
            locality,
            url,
            api_key: get(&format!("{prefix}_KEY")),
            model: get(&format!("{prefix}_MODEL")).unwrap_or_else(|| "default".into()),
            role_models,
            timeout: Duration::from_secs(timeout),
        })
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn body(&self, req: &ModelRequest) -> Json {
        let model = self.config.role_models.get(&req.role).unwrap_or(&self.config.model);
        let mut messages = Vec::new();
        if !req.system_prompt.is_empty() {
            messages.push(json!({"role": "system", "content": req.system_prompt}));
        }
        messages.push(json!({"role": "user", "content": req.user_prompt}));
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": req.temperature,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn parse_reply(v: &Json) -> Result<BackendReply, BackendError> {
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Json::as_str)
        .ok_or_else(|| BackendError::Failed("response lacks choices[0].message.content".into()))?;
    Ok(BackendReply {
        text: text.to_string(),
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Json::as_u64),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Json::as_u64),
    })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn locality(&self) -> Locality {
        self.config.locality
    }

    fn complete(&self, req: &ModelRequest) -> Result<BackendReply, BackendError> {
        let mut call = self.client.post(&self.config.url).json(&self.body(req));
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Unavailable(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::Failed(format!("status {status}")));
        }
        let v: Json = resp.json().map_err(|e| BackendError::Failed(e.to_string()))?;
        parse_reply(&v)
    }
}
