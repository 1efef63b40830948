//! Shared domain types and manifest ingestion.
//!
//! Manifests are line-delimited JSON. The first line is a header record, every
//! following non-blank line is one item (or one GeneCIS query).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DiorError, Result};
use crate::prompting::PromptSpec;

pub const MANIFEST_SCHEMA: &str = "dior-manifest/1";
pub const GENECIS_SCHEMA: &str = "dior-genecis/1";

/// A reference to an image on disk. No pixel data is held.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub path: PathBuf,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
        }
    }
}

/// A named aspect under which images are compared, e.g. `texture type`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

impl Condition {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            classes: None,
        }
    }

    pub fn with_classes<S: Into<String>>(name: impl Into<String>, classes: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            classes: Some(classes.into_iter().map(Into::into).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Index,
    Both,
}

impl Role {
    pub fn is_query(self) -> bool {
        matches!(self, Role::Query | Role::Both)
    }

    pub fn is_index(self) -> bool {
        matches!(self, Role::Index | Role::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: ImageRef,
    pub role: Role,
    pub labels: BTreeMap<String, String>,
}

/// A dataset: images with one class label per condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset: String,
    pub conditions: Vec<Condition>,
    pub items: Vec<ManifestItem>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    schema: String,
    dataset: String,
    conditions: Vec<Condition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemLine {
    id: String,
    path: PathBuf,
    role: Role,
    labels: BTreeMap<String, String>,
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_line<T: for<'de> Deserialize<'de>>(line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| DiorError::Format {
        line: line_no,
        message: e.to_string(),
    })
}

fn invalid(item: &str, condition: Option<&str>, message: impl Into<String>) -> DiorError {
    DiorError::Validation {
        item: item.to_string(),
        condition: condition.map(str::to_string),
        message: message.into(),
    }
}

impl DatasetManifest {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn condition_names(&self) -> Vec<String> {
        self.conditions.iter().map(|c| c.name.clone()).collect()
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|i| i.image.id == id)
    }

    /// Map from image id to class label under `condition`.
    pub fn labels_for(&self, condition: &str) -> Result<HashMap<String, String>> {
        if self.condition(condition).is_none() {
            return Err(DiorError::Config(format!(
                "condition `{condition}` is not declared in manifest `{}`",
                self.dataset
            )));
        }
        self.items
            .iter()
            .map(|item| {
                item.labels
                    .get(condition)
                    .map(|l| (item.image.id.clone(), l.clone()))
                    .ok_or_else(|| invalid(&item.image.id, Some(condition), "missing label"))
            })
            .collect()
    }

    pub fn queries(&self) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(|i| i.role.is_query())
    }

    pub fn index(&self) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(|i| i.role.is_index())
    }

    /// A manifest restricted to the given item ids, keeping manifest order.
    /// Vocabularies are dropped because a subset need not cover every class.
    pub fn subset(&self, dataset: impl Into<String>, ids: &HashSet<String>) -> DatasetManifest {
        DatasetManifest {
            dataset: dataset.into(),
            conditions: self
                .conditions
                .iter()
                .map(|c| Condition::new(c.name.clone()))
                .collect(),
            items: self
                .items
                .iter()
                .filter(|i| ids.contains(&i.image.id))
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for c in &self.conditions {
            if c.name.is_empty() {
                return Err(invalid("<header>", None, "condition name is empty"));
            }
            if !names.insert(c.name.as_str()) {
                return Err(invalid("<header>", Some(&c.name), "condition declared twice"));
            }
            if let Some(classes) = &c.classes {
                let unique: HashSet<_> = classes.iter().collect();
                if unique.len() != classes.len() {
                    return Err(invalid("<header>", Some(&c.name), "vocabulary has duplicate entries"));
                }
            }
        }

        let mut ids = HashSet::new();
        let mut seen: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for item in &self.items {
            let id = item.image.id.as_str();
            if id.is_empty() {
                return Err(invalid("<empty id>", None, "item id is empty"));
            }
            if !ids.insert(id) {
                return Err(invalid(id, None, "duplicate item id"));
            }
            if item.image.path.as_os_str().is_empty() {
                return Err(invalid(id, None, "item path is empty"));
            }
            for key in item.labels.keys() {
                if !names.contains(key.as_str()) {
                    return Err(invalid(id, Some(key), "label for undeclared condition"));
                }
            }
            for c in &self.conditions {
                let label = item
                    .labels
                    .get(&c.name)
                    .ok_or_else(|| invalid(id, Some(&c.name), "missing label"))?;
                if label.is_empty() {
                    return Err(invalid(id, Some(&c.name), "empty label"));
                }
                if let Some(classes) = &c.classes {
                    if !classes.contains(label) {
                        return Err(invalid(
                            id,
                            Some(&c.name),
                            format!("label `{label}` is not in the declared vocabulary"),
                        ));
                    }
                }
                seen.entry(c.name.as_str()).or_default().insert(label.as_str());
            }
        }

        if !self.items.is_empty() {
            for c in &self.conditions {
                if let Some(classes) = &c.classes {
                    let used = seen.get(c.name.as_str()).map_or(0, BTreeSet::len);
                    if used != classes.len() {
                        return Err(invalid(
                            "<header>",
                            Some(&c.name),
                            format!(
                                "vocabulary declares {} classes but items use {used}",
                                classes.len()
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_manifest_string(&self) -> String {
        let header = ManifestHeader {
            schema: MANIFEST_SCHEMA.to_string(),
            dataset: self.dataset.clone(),
            conditions: self.conditions.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for item in &self.items {
            let line = ItemLine {
                id: item.image.id.clone(),
                path: item.image.path.clone(),
                role: item.role,
                labels: item.labels.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("item serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_manifest_string())?;
        Ok(())
    }
}

impl FromStr for DatasetManifest {
    type Err = DiorError;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = non_blank_lines(text);
        let (line_no, header_line) = lines.next().ok_or(DiorError::Format {
            line: 1,
            message: "missing header record".into(),
        })?;
        let header: ManifestHeader = parse_line(line_no, header_line)?;
        if header.schema != MANIFEST_SCHEMA {
            return Err(DiorError::Format {
                line: line_no,
                message: format!("unsupported schema `{}`", header.schema),
            });
        }
        let items = lines
            .map(|(n, l)| {
                let rec: ItemLine = parse_line(n, l)?;
                Ok(ManifestItem {
                    image: ImageRef::new(rec.id, rec.path),
                    role: rec.role,
                    labels: rec.labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = DatasetManifest {
            dataset: header.dataset,
            conditions: header.conditions,
            items,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    std::fs::read_to_string(path)?.parse()
}

/// One GeneCIS focus query: rank the candidates against the query under the
/// condition text; exactly one candidate is correct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneCisQuery {
    pub id: String,
    pub query: ImageRef,
    pub condition: String,
    pub candidates: Vec<ImageRef>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneCisManifest {
    pub dataset: String,
    pub queries: Vec<GeneCisQuery>,
}

#[derive(Serialize, Deserialize)]
struct GeneCisHeader {
    schema: String,
    #[serde(default)]
    dataset: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneCisLine {
    id: String,
    query: PathBuf,
    condition: String,
    candidates: Vec<PathBuf>,
    answer: usize,
}

fn path_ref(p: PathBuf) -> ImageRef {
    ImageRef::new(p.to_string_lossy().into_owned(), p)
}

impl GeneCisManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for q in &self.queries {
            if q.id.is_empty() || !ids.insert(q.id.as_str()) {
                return Err(invalid(&q.id, None, "query id empty or duplicated"));
            }
            if q.query.path.as_os_str().is_empty() {
                return Err(invalid(&q.id, None, "query path is empty"));
            }
            if q.condition.is_empty() {
                return Err(invalid(&q.id, None, "condition text is empty"));
            }
            let n = q.candidates.len();
            if n != 10 && n != 15 {
                return Err(invalid(
                    &q.id,
                    Some(&q.condition),
                    format!("expected 10 or 15 candidates, found {n}"),
                ));
            }
            if q.answer >= n {
                return Err(invalid(
                    &q.id,
                    Some(&q.condition),
                    format!("answer index {} out of range for {n} candidates", q.answer),
                ));
            }
            let unique: HashSet<_> = q.candidates.iter().map(|c| &c.path).collect();
            if unique.len() != n || q.candidates.iter().any(|c| c.path.as_os_str().is_empty()) {
                return Err(invalid(&q.id, None, "candidate paths must be non-empty and distinct"));
            }
        }
        Ok(())
    }

    pub fn to_manifest_string(&self) -> String {
        let header = GeneCisHeader {
            schema: GENECIS_SCHEMA.to_string(),
            dataset: self.dataset.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for q in &self.queries {
            let line = GeneCisLine {
                id: q.id.clone(),
                query: q.query.path.clone(),
                condition: q.condition.clone(),
                candidates: q.candidates.iter().map(|c| c.path.clone()).collect(),
                answer: q.answer,
            };
            out.push_str(&serde_json::to_string(&line).expect("query serializes"));
            out.push('\n');
        }
        out
    }
}

impl FromStr for GeneCisManifest {
    type Err = DiorError;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = non_blank_lines(text);
        let (line_no, header_line) = lines.next().ok_or(DiorError::Format {
            line: 1,
            message: "missing header record".into(),
        })?;
        let header: GeneCisHeader = parse_line(line_no, header_line)?;
        if header.schema != GENECIS_SCHEMA {
            return Err(DiorError::Format {
                line: line_no,
                message: format!("unsupported schema `{}`", header.schema),
            });
        }
        let queries = lines
            .map(|(n, l)| {
                let rec: GeneCisLine = parse_line(n, l)?;
                Ok(GeneCisQuery {
                    id: rec.id,
                    query: path_ref(rec.query),
                    condition: rec.condition,
                    candidates: rec.candidates.into_iter().map(path_ref).collect(),
                    answer: rec.answer,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = GeneCisManifest {
            dataset: header.dataset,
            queries,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn load_genecis_manifest(path: impl AsRef<Path>) -> Result<GeneCisManifest> {
    std::fs::read_to_string(path)?.parse()
}

/// Which hidden-state layer to read. Layer 0 is the embedding output, layer
/// `L` the last transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum LayerSelector {
    Index(usize),
    #[default]
    Final,
}

impl LayerSelector {
    pub fn resolve(self, layer_count: usize) -> Result<usize> {
        match self {
            LayerSelector::Final => Ok(layer_count),
            LayerSelector::Index(i) if i <= layer_count => Ok(i),
            LayerSelector::Index(i) => Err(DiorError::Config(format!(
                "layer {i} out of range (backend has {layer_count} layers)"
            ))),
        }
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelector::Index(i) => write!(f, "{i}"),
            LayerSelector::Final => f.write_str("final"),
        }
    }
}

impl FromStr for LayerSelector {
    type Err = DiorError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            return Ok(LayerSelector::Final);
        }
        s.parse()
            .map(LayerSelector::Index)
            .map_err(|_| DiorError::Input(format!("bad layer selector `{s}`")))
    }
}

/// Which token's hidden state becomes the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TokenStrategy {
    #[default]
    LastInput,
    FirstOutput,
    MeanOutput,
}

impl TokenStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenStrategy::LastInput => "last_input",
            TokenStrategy::FirstOutput => "first_output",
            TokenStrategy::MeanOutput => "mean_output",
        }
    }
}

impl fmt::Display for TokenStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TokenStrategy {
    type Err = DiorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_input" => Ok(TokenStrategy::LastInput),
            "first_output" => Ok(TokenStrategy::FirstOutput),
            "mean_output" => Ok(TokenStrategy::MeanOutput),
            other => Err(DiorError::Input(format!("unknown token strategy `{other}`"))),
        }
    }
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExtractionConfig {
    pub layer: LayerSelector,
    pub strategy: TokenStrategy,
    pub prompt: PromptSpec,
    /// Generation cap for `mean_output`.
    pub max_new_tokens: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            layer: LayerSelector::Final,
            strategy: TokenStrategy::LastInput,
            prompt: PromptSpec::default(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl ExtractionConfig {
    /// Checks the config against a backend with `layer_count` transformer
    /// layers and returns the resolved layer index.
    pub fn validate(&self, layer_count: usize) -> Result<usize> {
        if self.max_new_tokens == 0 {
            return Err(DiorError::Config("max_new_tokens must be at least 1".into()));
        }
        let layer = self.layer.resolve(layer_count)?;
        if self.strategy != TokenStrategy::LastInput && layer != layer_count {
            return Err(DiorError::Config(format!(
                "{} is only defined at the final layer, got layer {layer}",
                self.strategy
            )));
        }
        Ok(layer)
    }
}
