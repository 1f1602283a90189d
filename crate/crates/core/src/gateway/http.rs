//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatRequest, GatewayError, LlmBackend};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub embedding_model: String,
    pub timeout: Duration,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.cfg.endpoint)
            .field("embedding_model", &self.cfg.embedding_model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, GatewayError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| GatewayError::Config(format!("environment variable `{var}` is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, api_key, agent })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: Value) -> Result<Value, GatewayError> {
        let mut request = self.agent.post(&self.url(path));
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;
        match status {
            200..=299 => {
                serde_json::from_str(&text).map_err(|e| GatewayError::Backend(format!("invalid JSON from {path}: {e}")))
            }
            429 => Err(GatewayError::RateLimited(text)),
            _ => Err(GatewayError::Backend(format!("HTTP {status} from {path}: {text}"))),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = json!({
            "model": req.model_tag,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        let resp = self.post("chat/completions", body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Backend("response has no choices[0].message.content".into()))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({ "model": self.cfg.embedding_model, "input": text });
        let resp = self.post("embeddings", body)?;
        let arr = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Backend("response has no data[0].embedding".into()))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| GatewayError::Backend("non-numeric embedding component".into()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ChatMessage, Role};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves each canned (status, body) once, in order, then stops.
    fn serve(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1")
    }

    fn backend(endpoint: String) -> HttpBackend {
        HttpBackend::new(HttpBackendConfig {
            endpoint,
            embedding_model: "emb".into(),
            timeout: Duration::from_secs(5),
            api_key_env: None,
        })
        .unwrap()
    }

    fn req() -> ChatRequest {
        ChatRequest {
            messages: vec![ChatMessage::new(Role::User, "hi")],
            temperature: 0.0,
            model_tag: "m".into(),
        }
    }

    #[test]
    fn parses_chat_and_embedding_payloads() {
        let url = serve(vec![
            (
                200,
                r#"{"choices":[{"message":{"role":"assistant","content":"OK"}}]}"#.into(),
            ),
            (200, r#"{"data":[{"embedding":[0.6,0.8]}]}"#.into()),
        ]);
        let b = backend(url);
        assert_eq!(b.chat(&req()).unwrap(), "OK");
        assert_eq!(b.embed("x").unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn status_429_maps_to_rate_limited() {
        let url = serve(vec![(429, "{}".into())]);
        assert!(matches!(backend(url).chat(&req()), Err(GatewayError::RateLimited(_))));
    }

    #[test]
    fn closed_port_is_unreachable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let b = backend(format!("http://{addr}"));
        assert!(matches!(b.chat(&req()), Err(GatewayError::BackendUnreachable(_))));
    }

    #[test]
    fn missing_api_key_variable_is_a_config_error() {
        let err = HttpBackend::new(HttpBackendConfig {
            endpoint: "http://localhost".into(),
            embedding_model: "e".into(),
            timeout: Duration::from_secs(1),
            api_key_env: Some("AUTODEV_TEST_SURELY_UNSET_KEY".into()),
        })
        .unwrap_err();
        assert!(err.to_string().contains("AUTODEV_TEST_SURELY_UNSET_KEY"));
    }
}
