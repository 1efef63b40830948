//! Prompt rendering for conditional embedding extraction.
//!
//! A prompt is `{Verb} the image[ in one word][{connector} {condition}]:`.
//! Condition strings are inserted verbatim.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DiorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Describe,
    Express,
    Summarize,
    Capture,
    Depict,
}

impl Verb {
    pub const ALL: [Verb; 5] = [
        Verb::Describe,
        Verb::Express,
        Verb::Summarize,
        Verb::Capture,
        Verb::Depict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Describe => "Describe",
            Verb::Express => "Express",
            Verb::Summarize => "Summarize",
            Verb::Capture => "Capture",
            Verb::Depict => "Depict",
        }
    }

    /// Text placed between the head of the prompt and the condition,
    /// including its leading separator.
    pub fn connector(self) -> &'static str {
        match self {
            Verb::Describe | Verb::Summarize => " regarding",
            Verb::Express => " in terms of",
            Verb::Capture => " based on",
            Verb::Depict => ", considering",
        }
    }
}

impl FromStr for Verb {
    type Err = DiorError;

    fn from_str(s: &str) -> Result<Self> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| DiorError::Input(format!("unknown prompt verb `{s}`")))
    }
}

/// Which prompt to render: verb plus the one-word and condition constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub verb: Verb,
    pub one_word: bool,
    pub with_condition: bool,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            verb: Verb::Describe,
            one_word: true,
            with_condition: true,
        }
    }
}

impl PromptSpec {
    pub fn new(verb: Verb, one_word: bool, with_condition: bool) -> Self {
        Self {
            verb,
            one_word,
            with_condition,
        }
    }

    /// The condition-independent head, e.g. `Describe the image in one word`.
    pub fn head(&self) -> String {
        let mut s = format!("{} the image", self.verb.as_str());
        if self.one_word {
            s.push_str(" in one word");
        }
        s
    }

    /// Template form with a literal `{condition}` placeholder. Used as the
    /// prompt identity of a store, which spans several conditions.
    pub fn template(&self) -> String {
        if self.with_condition {
            format!("{}{} {{condition}}:", self.head(), self.verb.connector())
        } else {
            format!("{}:", self.head())
        }
    }
}

/// Render the exact prompt string for `spec`. A condition must be supplied
/// exactly when the variant asks for one.
pub fn render_prompt(spec: &PromptSpec, condition: Option<&str>) -> Result<String> {
    match (spec.with_condition, condition) {
        (true, Some(c)) => Ok(format!("{}{} {c}:", spec.head(), spec.verb.connector())),
        (true, None) => Err(DiorError::Input(
            "prompt spec requires a condition but none was given".into(),
        )),
        (false, None) => Ok(format!("{}:", spec.head())),
        (false, Some(_)) => Err(DiorError::Input(
            "prompt spec has no condition slot but a condition was given".into(),
        )),
    }
}

/// The seven prompt variants compared in the robustness ablation, in order:
/// default, no condition, no one-word constraint, then the four other verbs.
pub fn variant_catalog() -> Vec<PromptSpec> {
    vec![
        PromptSpec::new(Verb::Describe, true, true),
        PromptSpec::new(Verb::Describe, true, false),
        PromptSpec::new(Verb::Describe, false, true),
        PromptSpec::new(Verb::Express, true, true),
        PromptSpec::new(Verb::Summarize, true, true),
        PromptSpec::new(Verb::Capture, true, true),
        PromptSpec::new(Verb::Depict, true, true),
    ]
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "verb={},oneword={},cond={}",
            self.verb.as_str().to_ascii_lowercase(),
            u8::from(self.one_word),
            u8::from(self.with_condition)
        )
    }
}

/// Parses `verb=describe,oneword=1,cond=1`. Missing keys take the default.
impl FromStr for PromptSpec {
    type Err = DiorError;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = PromptSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| DiorError::Input(format!("malformed prompt spec entry `{part}`")))?;
            let flag = || match value.trim() {
                "1" | "true" => Ok(true),
                "0" | "false" => Ok(false),
                other => Err(DiorError::Input(format!("bad flag value `{other}` for `{key}`"))),
            };
            match key.trim() {
                "verb" => spec.verb = value.trim().parse()?,
                "oneword" => spec.one_word = flag()?,
                "cond" => spec.with_condition = flag()?,
                other => {
                    return Err(DiorError::Input(format!("unknown prompt spec key `{other}`")))
                }
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(spec: PromptSpec, c: &str) -> String {
        render_prompt(&spec, spec.with_condition.then_some(c)).unwrap()
    }

    #[test]
    fn default_prompt() {
        assert_eq!(
            render_prompt(&PromptSpec::default(), Some("texture type")).unwrap(),
            "Describe the image in one word regarding texture type:"
        );
    }

    #[test]
    fn conditionless_prompt() {
        let spec = PromptSpec::new(Verb::Describe, true, false);
        assert_eq!(render_prompt(&spec, None).unwrap(), "Describe the image in one word:");
        assert!(render_prompt(&spec, Some("color")).is_err());
    }

    #[test]
    fn missing_condition_is_error() {
        assert!(matches!(
            render_prompt(&PromptSpec::default(), None),
            Err(DiorError::Input(_))
        ));
    }

    #[test]
    fn catalog_matches_printed_variants() {
        let c = "clothing category";
        let got: Vec<String> = variant_catalog().into_iter().map(|s| render(s, c)).collect();
        assert_eq!(
            got,
            vec![
                "Describe the image in one word regarding clothing category:",
                "Describe the image in one word:",
                "Describe the image regarding clothing category:",
                "Express the image in one word in terms of clothing category:",
                "Summarize the image in one word regarding clothing category:",
                "Capture the image in one word based on clothing category:",
                "Depict the image in one word, considering clothing category:",
            ]
        );
    }

    #[test]
    fn catalog_is_injective() {
        let mut got: Vec<String> = variant_catalog().into_iter().map(|s| render(s, "fit")).collect();
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 7);
    }

    #[test]
    fn cli_string_round_trip() {
        for spec in variant_catalog() {
            assert_eq!(spec.to_string().parse::<PromptSpec>().unwrap(), spec);
        }
        let spec: PromptSpec = "verb=express,oneword=1,cond=1".parse().unwrap();
        assert_eq!(spec.verb, Verb::Express);
        assert!("verb=paint".parse::<PromptSpec>().is_err());
        assert!("oneword".parse::<PromptSpec>().is_err());
    }

    #[test]
    fn template_has_placeholder() {
        assert_eq!(
            PromptSpec::default().template(),
            "Describe the image in one word regarding {condition}:"
        );
    }
}
