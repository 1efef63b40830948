//! Binary embedding store.
//!
//! Layout: the magic `DIOREMB1`, a `u32` LE header length, a UTF-8 JSON
//! header, then `count` records of `[u16 LE key length, key bytes, dim x f32
//! LE]`. A key is `image_id` and `condition` joined by a tab. Every store
//! holds embeddings from exactly one configuration.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::SubspaceModel;
use crate::error::{DiorError, Result};
use crate::extraction::EmbeddingRecord;
use crate::manifest::TokenStrategy;

pub const STORE_MAGIC: &[u8; 8] = b"DIOREMB1";
pub const STORE_SCHEMA_VERSION: u32 = 1;
pub const STORE_DTYPE: &str = "f32le";

const KEY_SEPARATOR: char = '\t';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreRole {
    Embeddings,
    Subspace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreHeader {
    pub schema_version: u32,
    pub role: StoreRole,
    /// Producing method, e.g. `dior`, `clip`, `indirect`, `capemb`.
    pub method: String,
    pub model_id: String,
    /// Prompt template; `{condition}` stands for the record's condition.
    pub prompt: String,
    pub layer: Option<usize>,
    pub strategy: Option<String>,
    pub dim: usize,
    pub dtype: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl StoreHeader {
    /// Header for a store of extraction or baseline records. All records must
    /// share one configuration and dimension.
    pub fn for_records(method: &str, prompt_template: &str, records: &[EmbeddingRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| DiorError::Input("cannot build a store header without records".into()))?;
        if let Some(odd) = records.iter().find(|r| !r.same_config(first)) {
            return Err(DiorError::Consistency(format!(
                "record `{}`/`{}` differs in configuration from `{}`/`{}`",
                odd.image_id, odd.condition, first.image_id, first.condition
            )));
        }
        Ok(Self {
            schema_version: STORE_SCHEMA_VERSION,
            role: StoreRole::Embeddings,
            method: method.to_string(),
            model_id: first.model_id.clone(),
            prompt: prompt_template.to_string(),
            layer: Some(first.layer),
            strategy: Some(first.strategy.as_str().to_string()),
            dim: first.vector.len(),
            dtype: STORE_DTYPE.to_string(),
            count: records.len(),
            extra: BTreeMap::new(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.schema_version != STORE_SCHEMA_VERSION {
            return Err(DiorError::StoreFormat(format!(
                "unsupported schema version {}",
                self.schema_version
            )));
        }
        if self.dtype != STORE_DTYPE {
            return Err(DiorError::StoreFormat(format!("unsupported element type `{}`", self.dtype)));
        }
        if self.dim == 0 {
            return Err(DiorError::StoreFormat("dimension must be at least 1".into()));
        }
        if let Some(s) = &self.strategy {
            s.parse::<TokenStrategy>()
                .map_err(|_| DiorError::StoreFormat(format!("unknown token strategy `{s}`")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub image_id: String,
    pub condition: String,
    pub vector: Vec<f32>,
}

impl StoreRecord {
    fn key(&self) -> String {
        format!("{}{KEY_SEPARATOR}{}", self.image_id, self.condition)
    }
}

impl From<&EmbeddingRecord> for StoreRecord {
    fn from(r: &EmbeddingRecord) -> Self {
        Self {
            image_id: r.image_id.clone(),
            condition: r.condition.clone(),
            vector: r.vector.clone(),
        }
    }
}

/// Serializes a store to bytes after checking the records against the
/// header.
pub fn encode_store(header: &StoreHeader, records: &[StoreRecord]) -> Result<Vec<u8>> {
    header.validate()?;
    if header.count != records.len() {
        return Err(DiorError::Consistency(format!(
            "header declares {} records, got {}",
            header.count,
            records.len()
        )));
    }
    let mut keys = HashSet::with_capacity(records.len());
    for r in records {
        if r.vector.len() != header.dim {
            return Err(DiorError::Consistency(format!(
                "record `{}`/`{}` has dimension {}, header declares {}",
                r.image_id,
                r.condition,
                r.vector.len(),
                header.dim
            )));
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            return Err(DiorError::Numeric(format!("record `{}`/`{}`", r.image_id, r.condition)));
        }
        if r.image_id.contains(KEY_SEPARATOR) || r.condition.contains(KEY_SEPARATOR) {
            return Err(DiorError::Input(format!("tab in store key `{}`", r.image_id)));
        }
        let key = r.key();
        if key.len() > usize::from(u16::MAX) {
            return Err(DiorError::Input(format!("store key of {} bytes is too long", key.len())));
        }
        if !keys.insert(key) {
            return Err(DiorError::Consistency(format!(
                "duplicate record `{}`/`{}`",
                r.image_id, r.condition
            )));
        }
    }

    let header_json = serde_json::to_vec(header).map_err(|e| DiorError::StoreFormat(e.to_string()))?;
    let header_len = u32::try_from(header_json.len()).map_err(|_| DiorError::StoreFormat("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header_json.len() + records.len() * (16 + 4 * header.dim));
    out.extend_from_slice(STORE_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_json);
    for r in records {
        let key = r.key();
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a store and returns the number of bytes written. Nothing is
/// written when validation fails. An existing file is replaced only with
/// `overwrite`.
pub fn write_store(path: impl AsRef<Path>, header: &StoreHeader, records: &[StoreRecord], overwrite: bool) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_store(header, records)?;
    if overwrite {
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(format!(".partial-{}", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        let mut file = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)?;
    } else {
        let mut file = match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(DiorError::Refused(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        file.write_all(&bytes)?;
    }
    Ok(bytes.len() as u64)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DiorError::Corruption {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses store bytes.
pub fn decode_store(bytes: &[u8]) -> Result<(StoreHeader, Vec<StoreRecord>)> {
    let magic_len = bytes.len().min(STORE_MAGIC.len());
    if bytes[..magic_len] != STORE_MAGIC[..magic_len] {
        return Err(DiorError::StoreFormat("bad magic, not an embedding store".into()));
    }
    let mut cur = Cursor { bytes, pos: 0 };
    cur.take(STORE_MAGIC.len(), "magic")?;
    let header_len = u32::from_le_bytes(cur.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header_at = cur.pos;
    let header_bytes = cur.take(header_len, "header")?;
    let header: StoreHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| DiorError::StoreFormat(format!("header at byte {header_at}: {e}")))?;
    header.validate()?;

    let mut records = Vec::with_capacity(header.count.min(1 << 20));
    let mut keys = HashSet::with_capacity(header.count.min(1 << 20));
    for _ in 0..header.count {
        let at = cur.pos;
        let key_len = u16::from_le_bytes(cur.take(2, "key length")?.try_into().expect("2 bytes")) as usize;
        let key = std::str::from_utf8(cur.take(key_len, "key")?)
            .map_err(|_| DiorError::Corruption {
                offset: at as u64 + 2,
                message: "key is not UTF-8".into(),
            })?;
        let (image_id, condition) = key.split_once(KEY_SEPARATOR).ok_or_else(|| DiorError::Corruption {
            offset: at as u64 + 2,
            message: format!("key `{key}` has no separator"),
        })?;
        if !keys.insert(key) {
            return Err(DiorError::Corruption {
                offset: at as u64,
                message: format!("duplicate key `{key}`"),
            });
        }
        let raw = cur.take(4 * header.dim, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(StoreRecord {
            image_id: image_id.to_string(),
            condition: condition.to_string(),
            vector,
        });
    }
    if cur.pos != bytes.len() {
        return Err(DiorError::Corruption {
            offset: cur.pos as u64,
            message: format!("{} bytes after the last record", bytes.len() - cur.pos),
        });
    }
    Ok((header, records))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<(StoreHeader, Vec<StoreRecord>)> {
    decode_store(&fs::read(path)?)
}

/// Writes extraction or baseline records with a header derived from them.
pub fn write_embeddings(
    path: impl AsRef<Path>,
    method: &str,
    prompt_template: &str,
    records: &[EmbeddingRecord],
    overwrite: bool,
) -> Result<u64> {
    let header = StoreHeader::for_records(method, prompt_template, records)?;
    let rows: Vec<StoreRecord> = records.iter().map(StoreRecord::from).collect();
    write_store(path, &header, &rows, overwrite)
}

/// Rebuilds [`EmbeddingRecord`]s from an embeddings store. Stores without a
/// layer or strategy (e.g. from image-only encoders) read as layer 0 and
/// `last_input`.
pub fn embedding_records(header: &StoreHeader, records: Vec<StoreRecord>) -> Result<Vec<EmbeddingRecord>> {
    if header.role != StoreRole::Embeddings {
        return Err(DiorError::StoreFormat("store does not hold embeddings".into()));
    }
    let strategy = match &header.strategy {
        Some(s) => s.parse()?,
        None => TokenStrategy::LastInput,
    };
    Ok(records
        .into_iter()
        .map(|r| EmbeddingRecord {
            prompt: header.prompt.replace("{condition}", &r.condition),
            image_id: r.image_id,
            condition: r.condition,
            model_id: header.model_id.clone(),
            layer: header.layer.unwrap_or(0),
            strategy,
            vector: r.vector,
        })
        .collect())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let (header, records) = read_store(path)?;
    let records = embedding_records(&header, records)?;
    Ok((header, records))
}

#[derive(Debug, Serialize, Deserialize)]
struct SubspaceMeta {
    condition: String,
    labels: Vec<String>,
    label_template: String,
    rule: crate::baselines::ComponentRule,
    eigenvalues: Vec<f64>,
    explained_variance: Vec<f64>,
    rank: usize,
    clamped: bool,
}

const SUBSPACE_MEAN_KEY: &str = "mean";

/// Stores a fitted subspace: the mean and each component as f32 records,
/// everything else in the header. Values read back are rounded to f32.
pub fn write_subspace(path: impl AsRef<Path>, model_id: &str, model: &SubspaceModel, overwrite: bool) -> Result<u64> {
    let meta = SubspaceMeta {
        condition: model.condition.clone(),
        labels: model.labels.clone(),
        label_template: model.label_template.clone(),
        rule: model.rule,
        eigenvalues: model.eigenvalues.clone(),
        explained_variance: model.explained_variance.clone(),
        rank: model.rank,
        clamped: model.clamped,
    };
    let to_f32 = |v: &[f64]| v.iter().map(|x| *x as f32).collect::<Vec<f32>>();
    let mut records = vec![StoreRecord {
        image_id: SUBSPACE_MEAN_KEY.into(),
        condition: model.condition.clone(),
        vector: to_f32(&model.mean),
    }];
    records.extend(model.components.iter().enumerate().map(|(i, c)| StoreRecord {
        image_id: format!("component:{i}"),
        condition: model.condition.clone(),
        vector: to_f32(c),
    }));
    let header = StoreHeader {
        schema_version: STORE_SCHEMA_VERSION,
        role: StoreRole::Subspace,
        method: "indirect".into(),
        model_id: model_id.to_string(),
        prompt: model.label_template.clone(),
        layer: None,
        strategy: None,
        dim: model.dim(),
        dtype: STORE_DTYPE.into(),
        count: records.len(),
        extra: BTreeMap::from([(
            "subspace".to_string(),
            serde_json::to_value(&meta).map_err(|e| DiorError::StoreFormat(e.to_string()))?,
        )]),
    };
    write_store(path, &header, &records, overwrite)
}

pub fn read_subspace(path: impl AsRef<Path>) -> Result<(StoreHeader, SubspaceModel)> {
    let (header, records) = read_store(path)?;
    if header.role != StoreRole::Subspace {
        return Err(DiorError::StoreFormat("store does not hold a subspace".into()));
    }
    let meta: SubspaceMeta = header
        .extra
        .get("subspace")
        .cloned()
        .ok_or_else(|| DiorError::StoreFormat("subspace metadata missing".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| DiorError::StoreFormat(e.to_string())))?;
    let widen = |v: &[f32]| v.iter().map(|x| f64::from(*x)).collect::<Vec<f64>>();
    let mut mean = None;
    let mut components = vec![None; records.len().saturating_sub(1)];
    for r in &records {
        if r.image_id == SUBSPACE_MEAN_KEY {
            mean = Some(widen(&r.vector));
        } else if let Some(i) = r.image_id.strip_prefix("component:").and_then(|i| i.parse::<usize>().ok()) {
            if let Some(slot) = components.get_mut(i) {
                *slot = Some(widen(&r.vector));
                continue;
            }
            return Err(DiorError::StoreFormat(format!("component index {i} out of range")));
        } else {
            return Err(DiorError::StoreFormat(format!("unexpected subspace record `{}`", r.image_id)));
        }
    }
    let components = components
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| DiorError::StoreFormat("subspace components missing".into()))?;
    let model = SubspaceModel {
        condition: meta.condition,
        labels: meta.labels,
        label_template: meta.label_template,
        rule: meta.rule,
        mean: mean.ok_or_else(|| DiorError::StoreFormat("subspace mean missing".into()))?,
        components,
        eigenvalues: meta.eigenvalues,
        explained_variance: meta.explained_variance,
        rank: meta.rank,
        clamped: meta.clamped,
    };
    Ok((header, model))
}
