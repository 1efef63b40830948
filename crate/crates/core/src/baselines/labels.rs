//! Automatic label vocabularies for subspace baselines, produced by a text
//! generation service from a fixed request prompt.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DiorError, Result};

/// Label counts requested in a vocabulary-size sweep.
pub const LABEL_SWEEP_COUNTS: [usize; 10] = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];

/// Prompt sent to the generation service.
pub fn label_generation_prompt(condition: &str, count: usize) -> String {
    format!("Generate {count} labels in English to classify {condition} and output them in comma-separated format:")
}

/// One request to a label service.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelRequest {
    pub condition: String,
    pub count: usize,
}

impl LabelRequest {
    pub fn prompt(&self) -> String {
        label_generation_prompt(&self.condition, self.count)
    }
}

/// A text-generation service that answers label requests with a single
/// comma-separated line.
pub trait LabelClient {
    fn complete(&self, request: &LabelRequest) -> Result<String>;
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureLine {
    condition: String,
    count: usize,
    response: String,
}

/// Offline client answering from canned responses keyed by request.
#[derive(Debug, Clone, Default)]
pub struct FixtureLabelClient {
    responses: HashMap<LabelRequest, String>,
}

impl FixtureLabelClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, condition: impl Into<String>, count: usize, response: impl Into<String>) {
        self.responses.insert(
            LabelRequest {
                condition: condition.into(),
                count,
            },
            response.into(),
        );
    }

    /// Parses line-delimited `{condition, count, response}` records.
    pub fn parse(text: &str) -> Result<Self> {
        let mut client = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| DiorError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            client.insert(rec.condition, rec.count, rec.response);
        }
        Ok(client)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl LabelClient for FixtureLabelClient {
    fn complete(&self, request: &LabelRequest) -> Result<String> {
        self.responses.get(request).cloned().ok_or_else(|| {
            DiorError::Generation(format!(
                "no fixture response for condition `{}` with count {}",
                request.condition, request.count
            ))
        })
    }
}

/// A generated label vocabulary for one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub condition: String,
    pub labels: Vec<String>,
    /// Number of labels that was asked for; the response may differ.
    pub requested: usize,
}

impl LabelSet {
    /// A label set from known class names, e.g. a dataset vocabulary.
    pub fn from_labels<S: Into<String>>(condition: impl Into<String>, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels = dedup(labels.into_iter().map(Into::into));
        if labels.len() < 2 {
            return Err(DiorError::Input("a label set needs at least two distinct labels".into()));
        }
        let requested = labels.len();
        Ok(Self {
            condition: condition.into(),
            labels,
            requested,
        })
    }
}

fn dedup(labels: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen = HashSet::new();
    labels
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty() && seen.insert(l.to_lowercase()))
        .collect()
}

/// Splits a comma-separated response into trimmed, case-insensitively unique
/// labels in order of first appearance. Surrounding quotes and a trailing
/// period are dropped.
pub fn parse_label_response(response: &str) -> Result<Vec<String>> {
    let line = response.trim();
    if line.is_empty() {
        return Err(DiorError::Generation("empty label response".into()));
    }
    let labels = dedup(
        line.split(',')
            .map(|l| l.trim().trim_matches(|c| c == '"' || c == '\'').trim_end_matches('.').to_string()),
    );
    if labels.len() < 2 {
        return Err(DiorError::Generation(format!(
            "label response has fewer than two distinct labels: `{line}`"
        )));
    }
    Ok(labels)
}

pub fn generate_condition_labels(client: &dyn LabelClient, condition: &str, count: usize) -> Result<LabelSet> {
    if count < 2 {
        return Err(DiorError::Input("label count must be at least 2".into()));
    }
    let request = LabelRequest {
        condition: condition.to_string(),
        count,
    };
    let labels = parse_label_response(&client.complete(&request)?)?;
    Ok(LabelSet {
        condition: condition.to_string(),
        labels,
        requested: count,
    })
}

/// One label set per sweep count, in ascending count order.
pub fn label_count_sweep(client: &dyn LabelClient, condition: &str) -> Result<Vec<LabelSet>> {
    LABEL_SWEEP_COUNTS
        .iter()
        .map(|&count| generate_condition_labels(client, condition, count))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_text() {
        assert_eq!(
            label_generation_prompt("car color", 30),
            "Generate 30 labels in English to classify car color and output them in comma-separated format:"
        );
    }

    #[test]
    fn fixture_parse_and_answer() {
        let client = FixtureLabelClient::parse(
            "{\"condition\":\"car color\",\"count\":3,\"response\":\"red, blue, green\"}\n\n\
             {\"condition\":\"car color\",\"count\":4,\"response\":\"\"}\n",
        )
        .unwrap();
        let set = generate_condition_labels(&client, "car color", 3).unwrap();
        assert_eq!(set.labels, ["red", "blue", "green"]);
        assert_eq!(set.requested, 3);
        assert!(matches!(
            generate_condition_labels(&client, "car color", 4),
            Err(DiorError::Generation(_))
        ));
        assert!(matches!(
            generate_condition_labels(&client, "car color", 5),
            Err(DiorError::Generation(_))
        ));
        assert!(matches!(
            FixtureLabelClient::parse("{\"condition\":\"x\"}"),
            Err(DiorError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn response_cleanup() {
        assert_eq!(
            parse_label_response(" Red,red , \"blue\",, green.\n").unwrap(),
            ["Red", "blue", "green"]
        );
        assert!(parse_label_response("red, RED").is_err());
        assert!(parse_label_response("   ").is_err());
    }

    #[test]
    fn sweep_requests_every_count() {
        let mut client = FixtureLabelClient::new();
        for n in LABEL_SWEEP_COUNTS {
            let labels: Vec<String> = (0..n).map(|i| format!("shade{i}")).collect();
            client.insert("color", n, labels.join(", "));
        }
        let sets = label_count_sweep(&client, "color").unwrap();
        assert_eq!(sets.len(), 10);
        assert_eq!(sets.iter().map(|s| s.requested).collect::<Vec<_>>(), LABEL_SWEEP_COUNTS);
        assert_eq!(sets[9].labels.len(), 100);
    }
}
