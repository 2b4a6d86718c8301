//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde_json::{json, Value};

use super::provider::ChatProvider;
use super::PromptRequest;

/// Environment variable holding the API key for a provider id, e.g.
/// `openai-main` reads `CIG_OPENAI_MAIN_API_KEY`.
pub fn api_key_var(provider_id: &str) -> String {
    let id: String = provider_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("CIG_{id}_API_KEY")
}

#[derive(Debug)]
pub struct OpenAiCompatible {
    base_url: String,
    api_key: Option<String>,
    models: Vec<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn new(
        provider_id: &str,
        base_url: &str,
        models: Vec<String>,
        timeout: Duration,
    ) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(api_key_var(provider_id)).ok(),
            models,
            client,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn body(request: &PromptRequest) -> Value {
        let mut body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
        });
        let p = &request.params;
        if let Some(t) = p.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(s) = p.seed {
            body["seed"] = json!(s);
        }
        if let Some(e) = &p.effort {
            body["reasoning_effort"] = json!(e);
        }
        body
    }
}

impl ChatProvider for OpenAiCompatible {
    fn complete(&self, request: &PromptRequest) -> Result<String, String> {
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&Self::body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        let body: Value = resp.json().map_err(|e| format!("status {status}: {e}"))?;
        if !status.is_success() {
            return Err(format!("status {status}: {body}"));
        }
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }

    fn supports_model(&self, model_id: &str) -> bool {
        self.models.is_empty() || self.models.iter().any(|m| m == model_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::DecodingParams;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves exactly one HTTP request and returns the request body.
    fn one_shot_server(reply: &'static str) -> (String, std::thread::JoinHandle<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (headers, String::from_utf8(body).unwrap())
        });
        (addr, handle)
    }

    #[test]
    fn posts_chat_completion_and_reads_content() {
        let (addr, handle) = one_shot_server(
            r#"{"choices":[{"message":{"role":"assistant","content":"{\"label\":\"neutral\"}"}}]}"#,
        );
        let provider = OpenAiCompatible::new("stub", &addr, vec![], Duration::from_secs(5))
            .unwrap()
            .with_api_key("secret");
        let req = PromptRequest {
            provider_id: "stub".into(),
            model_id: "m1".into(),
            prompt_text: "hello".into(),
            params: DecodingParams {
                temperature: Some(0.0),
                seed: Some(7),
                effort: Some("minimal".into()),
            },
            schema_id: "nli_judgment".into(),
            inputs: Value::Null,
            label: None,
        };
        assert_eq!(provider.complete(&req).unwrap(), r#"{"label":"neutral"}"#);
        let (headers, body) = handle.join().unwrap();
        assert!(headers
            .to_ascii_lowercase()
            .contains("authorization: bearer secret"));
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "m1");
        assert_eq!(body["seed"], 7);
        assert_eq!(body["reasoning_effort"], "minimal");
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn key_variable_name() {
        assert_eq!(api_key_var("openai-main"), "CIG_OPENAI_MAIN_API_KEY");
    }
}
