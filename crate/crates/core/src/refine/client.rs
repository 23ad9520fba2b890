use std::collections::VecDeque;
use std::io::BufRead;
use std::time::Duration;

use super::RefineError;

pub const URL_VAR: &str = "DEMANDFORGE_LLM_URL";
pub const KEY_VAR: &str = "DEMANDFORGE_LLM_KEY";

/// Language-model access used by the refinement loop.
pub trait LlmClient: Send {
    /// Free-text completion for a prompt.
    fn compile(&mut self, prompt: &str) -> Result<String, RefineError>;
    /// Yes/no verdict for a reflection prompt.
    fn reflect(&mut self, prompt: &str) -> Result<bool, RefineError>;
    fn is_mock(&self) -> bool;
}

/// Replays canned completions in order. Each script line is a JSON value:
/// a string is used verbatim, anything else is re-serialized compactly.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    script: VecDeque<String>,
    prompts: Vec<String>,
}

impl MockClient {
    pub fn new<I, S>(completions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: completions.into_iter().map(Into::into).collect(),
            prompts: Vec::new(),
        }
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, RefineError> {
        let mut lines = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| RefineError::Client(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| RefineError::Client(format!("mock script line {}: {e}", n + 1)))?;
            lines.push(match value {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            });
        }
        Ok(Self::new(lines))
    }

    pub fn remaining(&self) -> usize {
        self.script.len()
    }

    /// Prompts received so far, in order.
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }
}

impl LlmClient for MockClient {
    fn compile(&mut self, prompt: &str) -> Result<String, RefineError> {
        self.prompts.push(prompt.to_string());
        self.script.pop_front().ok_or(RefineError::ScriptExhausted)
    }

    fn reflect(&mut self, _prompt: &str) -> Result<bool, RefineError> {
        Ok(true)
    }

    fn is_mock(&self) -> bool {
        true
    }
}

/// JSON-over-HTTP completion endpoint: POSTs `{"prompt": ...}` and reads
/// `{"completion": ...}`.
pub struct HttpClient {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            key,
            agent,
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, RefineError> {
        let url = std::env::var(URL_VAR).map_err(|_| RefineError::Client(format!("{URL_VAR} is not set")))?;
        Ok(Self::new(url, std::env::var(KEY_VAR).ok(), timeout))
    }

    fn complete(&self, prompt: &str) -> Result<String, RefineError> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => RefineError::Timeout(e.to_string()),
            other => RefineError::Client(other.to_string()),
        })?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| RefineError::Client(e.to_string()))?;
        if !status.is_success() {
            return Err(RefineError::Client(format!("endpoint returned {status}: {text}")));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RefineError::Client(format!("bad response body: {e}")))?;
        value
            .get("completion")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| RefineError::Client("response has no completion field".into()))
    }
}

impl LlmClient for HttpClient {
    fn compile(&mut self, prompt: &str) -> Result<String, RefineError> {
        self.complete(prompt)
    }

    fn reflect(&mut self, prompt: &str) -> Result<bool, RefineError> {
        let answer = self.complete(prompt)?;
        let first = answer
            .trim_start()
            .split(|c: char| !c.is_ascii_alphabetic())
            .next()
            .unwrap_or("")
            .to_ascii_lowercase();
        Ok(matches!(first.as_str(), "yes" | "true"))
    }

    fn is_mock(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_replays_in_order() {
        let script = "\"first\"\n\n{\"atoms\": []}\n";
        let mut m = MockClient::from_jsonl(script.as_bytes()).unwrap();
        assert_eq!(m.remaining(), 2);
        assert_eq!(m.compile("a").unwrap(), "first");
        assert_eq!(m.compile("b").unwrap(), "{\"atoms\":[]}");
        assert!(matches!(m.compile("c"), Err(RefineError::ScriptExhausted)));
        assert_eq!(m.prompts(), ["a", "b", "c"]);
        assert!(m.is_mock());
    }

    #[test]
    fn bad_script_line() {
        assert!(MockClient::from_jsonl("not json\n".as_bytes()).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_client_error() {
        let mut c = HttpClient::new("http://127.0.0.1:9/complete", None, Duration::from_millis(300));
        assert!(matches!(c.compile("x"), Err(RefineError::Client(_))));
        assert!(!c.is_mock());
    }
}
