//! HTTP backend speaking the OpenAI-compatible completion and embedding
//! wire format (`POST /chat/completions`, `POST /embeddings`).

use super::{
    Backend, BackendError, BackendInfo, CompletionRequest, CompletionResponse, EmbeddingVector,
    FinishReason, Role, Usage,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::{Duration, Instant};

/// Which served model each role is routed to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleModels {
    pub instructor: String,
    pub coder: String,
    pub judge: String,
    pub decontaminator: String,
}

impl Default for RoleModels {
    fn default() -> Self {
        RoleModels {
            instructor: "instructor".to_string(),
            coder: "coder".to_string(),
            judge: "coder".to_string(),
            decontaminator: "judge".to_string(),
        }
    }
}

impl RoleModels {
    pub fn for_role(&self, role: Role) -> &str {
        match role {
            Role::Instructor => &self.instructor,
            Role::Coder => &self.coder,
            Role::Judge => &self.judge,
            Role::Decontaminator => &self.decontaminator,
        }
    }
}

/// Connection settings for an OpenAI-compatible serving endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpSettings {
    /// Base URL for completions, e.g. `http://host:8000/v1`.
    pub base_url: String,
    /// Base URL for embeddings; falls back to `base_url` when absent.
    pub embedding_base_url: Option<String>,
    /// Bearer token attached to every request when present.
    pub api_key: Option<String>,
    pub models: RoleModels,
    pub embedding_model: String,
    pub timeout_secs: u64,
}

impl Default for HttpSettings {
    fn default() -> Self {
        HttpSettings {
            base_url: "http://127.0.0.1:8000/v1".to_string(),
            embedding_base_url: None,
            api_key: None,
            models: RoleModels::default(),
            embedding_model: "embedder".to_string(),
            timeout_secs: 120,
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Serialize)]
struct EmbeddingRequestBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponseBody {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

/// Backend that forwards every call to a remote serving endpoint.
#[derive(Debug)]
pub struct HttpBackend {
    settings: HttpSettings,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Transport(format!("client build failed: {e}")))?;
        Ok(HttpBackend { settings, client })
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    fn endpoint(base: &str, path: &str) -> String {
        format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    fn apply_auth(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.settings.api_key {
            Some(key) => req.bearer_auth(key),
            None => req,
        }
    }

    async fn post_json<T: serde::de::DeserializeOwned>(
        &self,
        url: &str,
        body: &impl Serialize,
    ) -> Result<T, BackendError> {
        let response = self
            .apply_auth(self.client.post(url).json(body))
            .send()
            .await
            .map_err(|e| BackendError::Transport(format!("request to {url} failed: {e}")))?;
        let status = response.status();
        if status.is_success() {
            response
                .json::<T>()
                .await
                .map_err(|e| BackendError::Malformed(format!("undecodable response body: {e}")))
        } else {
            let body = response.text().await.unwrap_or_default();
            let detail = format!("{url} returned {status}: {}", truncate_body(&body));
            // Timeouts, throttling, and server faults are worth retrying;
            // other client errors are not.
            if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
                Err(BackendError::Transport(detail))
            } else {
                Err(BackendError::Rejected(detail))
            }
        }
    }
}

fn truncate_body(body: &str) -> String {
    const LIMIT: usize = 300;
    let trimmed = body.trim();
    if trimmed.len() <= LIMIT {
        trimmed.to_string()
    } else {
        let cut = trimmed
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}…", &trimmed[..cut])
    }
}

#[async_trait::async_trait]
impl Backend for HttpBackend {
    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, BackendError> {
        let url = Self::endpoint(&self.settings.base_url, "chat/completions");
        let body = ChatRequestBody {
            model: self.settings.models.for_role(request.role),
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            top_p: request.top_p,
            max_tokens: request.max_new_tokens,
            stop: if request.stop_sequences.is_empty() {
                None
            } else {
                Some(&request.stop_sequences)
            },
        };
        let started = Instant::now();
        let parsed: ChatResponseBody = self.post_json(&url, &body).await?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Malformed("response had no choices".to_string()))?;
        let text = choice
            .message
            .content
            .ok_or_else(|| BackendError::Malformed("choice had no message content".to_string()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        Ok(CompletionResponse {
            text,
            finish_reason,
            usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
            latency: started.elapsed(),
        })
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let base = self
            .settings
            .embedding_base_url
            .as_deref()
            .unwrap_or(&self.settings.base_url);
        let url = Self::endpoint(base, "embeddings");
        let body = EmbeddingRequestBody {
            model: &self.settings.embedding_model,
            input: texts,
        };
        let parsed: EmbeddingResponseBody = self.post_json(&url, &body).await?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        // The wire format allows out-of-order data entries; restore by index.
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for datum in parsed.data {
            let slot = slots.get_mut(datum.index).ok_or_else(|| {
                BackendError::Malformed(format!("embedding index {} out of range", datum.index))
            })?;
            if slot.replace(datum.embedding).is_some() {
                return Err(BackendError::Malformed(format!(
                    "duplicate embedding index {}",
                    datum.index
                )));
            }
        }
        slots
            .into_iter()
            .map(|slot| {
                slot.map(|values| EmbeddingVector {
                    values,
                    model_tag: self.settings.embedding_model.clone(),
                })
                .ok_or_else(|| BackendError::Malformed("missing embedding index".to_string()))
            })
            .collect()
    }

    fn describe(&self) -> BackendInfo {
        let completion_models = Role::ALL
            .iter()
            .map(|role| {
                (
                    role.as_str().to_string(),
                    self.settings.models.for_role(*role).to_string(),
                )
            })
            .collect::<HashMap<_, _>>();
        BackendInfo {
            mode: "http".to_string(),
            completion_models,
            embedding_model: self.settings.embedding_model.clone(),
            base_url: Some(self.settings.base_url.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_join_tolerates_slashes() {
        assert_eq!(
            HttpBackend::endpoint("http://h:1/v1/", "/chat/completions"),
            "http://h:1/v1/chat/completions"
        );
        assert_eq!(
            HttpBackend::endpoint("http://h:1/v1", "embeddings"),
            "http://h:1/v1/embeddings"
        );
    }

    #[test]
    fn role_models_route_each_role() {
        let models = RoleModels {
            instructor: "a".into(),
            coder: "b".into(),
            judge: "c".into(),
            decontaminator: "d".into(),
        };
        assert_eq!(models.for_role(Role::Instructor), "a");
        assert_eq!(models.for_role(Role::Coder), "b");
        assert_eq!(models.for_role(Role::Judge), "c");
        assert_eq!(models.for_role(Role::Decontaminator), "d");
    }

    #[test]
    fn body_truncation_is_utf8_safe() {
        let long = "é".repeat(400);
        let out = truncate_body(&long);
        assert!(out.ends_with('…'));
        assert!(out.len() <= 310);
    }
}
