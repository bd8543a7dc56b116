//! HTTP transport speaking the chat-completions wire format.

use base64::Engine;
use serde_json::{json, Value};

use super::templates::RenderedPrompt;
use super::{GenerationRequest, HttpEndpointConfig, TransportFailure};

pub(super) struct HttpTransport {
    config: HttpEndpointConfig,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: HttpEndpointConfig) -> HttpTransport {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(
                config.request_timeout_s,
            )))
            .build()
            .into();
        HttpTransport { config, agent }
    }

    pub fn send(
        &self,
        rendered: &RenderedPrompt,
        req: &GenerationRequest,
    ) -> Result<String, TransportFailure> {
        let body = self.build_body(rendered, req);
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut request = self.agent.post(&url).header("content-type", "application/json");
        if let Some(env) = &self.config.api_key_env {
            if let Ok(key) = std::env::var(env) {
                request = request.header("authorization", &format!("Bearer {key}"));
            }
        }
        let mut response = request.send_json(&body).map_err(|e| {
            let retryable = match &e {
                // Client-side request construction errors will not heal.
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                ureq::Error::Json(_) => false,
                _ => true,
            };
            TransportFailure {
                retryable,
                detail: e.to_string(),
            }
        })?;
        let value: Value = response.body_mut().read_json().map_err(|e| TransportFailure {
            retryable: false,
            detail: format!("response body not JSON: {e}"),
        })?;
        extract_content(&value).ok_or_else(|| TransportFailure {
            retryable: false,
            detail: "no choices[0].message.content in response".to_string(),
        })
    }

    fn build_body(&self, rendered: &RenderedPrompt, req: &GenerationRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &rendered.system {
            messages.push(json!({
                "role": "system",
                "content": [{"type": "text", "text": system}],
            }));
        }
        let mut content = vec![json!({"type": "text", "text": rendered.user})];
        if let Some(image) = &req.image {
            let uri = format!(
                "data:{};base64,{}",
                image.media_type,
                base64::engine::general_purpose::STANDARD.encode(&image.bytes)
            );
            content.push(json!({"type": "image_url", "image_url": {"url": uri}}));
        }
        messages.push(json!({"role": "user", "content": content}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }
}

/// Pull the assistant text out of a chat-completions response; content may
/// be a plain string or a list of text parts.
fn extract_content(value: &Value) -> Option<String> {
    let content = value.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => {
            let mut out = String::new();
            for part in parts {
                if let Some(text) = part.get("text").and_then(|t| t.as_str()) {
                    out.push_str(text);
                }
            }
            Some(out)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_string_and_parts_both_parse() {
        let v: Value = serde_json::from_str(
            r#"{"choices":[{"message":{"content":"hello"}}]}"#,
        )
        .unwrap();
        assert_eq!(extract_content(&v).unwrap(), "hello");

        let v: Value = serde_json::from_str(
            r#"{"choices":[{"message":{"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]}}]}"#,
        )
        .unwrap();
        assert_eq!(extract_content(&v).unwrap(), "ab");

        let v: Value = serde_json::from_str(r#"{"error":"nope"}"#).unwrap();
        assert!(extract_content(&v).is_none());
    }

    #[test]
    fn body_carries_temperature_and_image_payload() {
        let cfg = HttpEndpointConfig {
            base_url: "http://localhost:9".to_string(),
            model: "m".to_string(),
            api_key_env: None,
            request_timeout_s: 1,
        };
        let transport = HttpTransport::new(cfg);
        let rendered = RenderedPrompt {
            system: Some("sys".to_string()),
            user: "user".to_string(),
        };
        let mut req = super::super::GenerationRequest::new(
            super::super::TemplateId::Img2Tikz,
            "e",
        );
        req.temperature = 0.7;
        req.image = Some(super::super::AttachedImage {
            asset_id: "a".to_string(),
            digest_hex: "d".to_string(),
            media_type: "image/png".to_string(),
            bytes: vec![1, 2, 3],
        });
        let body = transport.build_body(&rendered, &req);
        assert_eq!(body["temperature"], 0.7);
        assert_eq!(body["messages"][0]["role"], "system");
        let image_url = body["messages"][1]["content"][1]["image_url"]["url"]
            .as_str()
            .unwrap();
        assert!(image_url.starts_with("data:image/png;base64,"));
    }
}
