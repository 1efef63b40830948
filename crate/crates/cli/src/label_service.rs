use dior::baselines::{LabelClient, LabelRequest};
use dior::DiorError;

/// Environment variable naming the live label-generation endpoint.
pub const LABEL_ENDPOINT_ENV: &str = "DIOR_LABEL_ENDPOINT";

/// Label client posting `{"condition", "count", "prompt"}` as JSON to an
/// HTTP endpoint. The reply is either the comma-separated line itself or a
/// JSON object with a `response` string.
#[derive(Debug, Clone)]
pub struct HttpLabelClient {
    endpoint: String,
}

impl HttpLabelClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(LABEL_ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .map(Self::new)
    }
}

fn reply_text(body: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(body) {
        Ok(serde_json::Value::Object(map)) => match map.get("response") {
            Some(serde_json::Value::String(s)) => s.clone(),
            _ => body.to_string(),
        },
        _ => body.to_string(),
    }
}

impl LabelClient for HttpLabelClient {
    fn complete(&self, request: &LabelRequest) -> dior::Result<String> {
        let body = serde_json::json!({
            "condition": request.condition,
            "count": request.count,
            "prompt": request.prompt(),
        });
        let failed = |e: ureq::Error| DiorError::Generation(format!("label service {}: {e}", self.endpoint));
        let mut response = ureq::post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(failed)?;
        let text = response.body_mut().read_to_string().map_err(failed)?;
        Ok(reply_text(&text))
    }
}
