//! The vision-language model contract.
//!
//! A backend projects image patches into the language model's embedding
//! space, tokenizes prompts, runs the decoder with access to every layer's
//! hidden states, predicts the next token from a final-layer hidden state,
//! and can resume a forward pass from a cached prefix.

pub(crate) mod toy;

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{DiorError, Result};
use crate::manifest::ImageRef;

pub use toy::{make_toy_backend, ToyBackend, ToyConfig};

/// Row-major dense matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiorError::Input("ragged matrix rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn with_cols(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "row width mismatch");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Tokenized prompt. `pieces` are the surface strings of each token;
/// joining them with single spaces reproduces `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    pieces: Vec<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, pieces: Vec<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(DiorError::Input("token sequence must not be empty".into()));
        }
        if ids.len() != pieces.len() {
            return Err(DiorError::Input("token ids and pieces differ in length".into()));
        }
        Ok(Self { ids, pieces })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn text(&self) -> String {
        self.pieces.join(" ")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The first `n` tokens. `n` must be at least 1.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(self.ids[..n].to_vec(), self.pieces[..n].to_vec())
    }

    pub fn push(&mut self, id: u32, piece: String) {
        self.ids.push(id);
        self.pieces.push(piece);
    }
}

/// Projected image-patch embeddings plus a digest of the bytes they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    vectors: Matrix,
    digest: [u8; 32],
}

impl PatchEmbeddings {
    pub fn new(vectors: Matrix, digest: [u8; 32]) -> Result<Self> {
        if vectors.rows() == 0 {
            return Err(DiorError::Input("at least one patch is required".into()));
        }
        if !vectors.is_finite() {
            return Err(DiorError::Numeric("patch embeddings".into()));
        }
        Ok(Self { vectors, digest })
    }

    /// Patch embeddings whose digest is taken over the vector bytes
    /// themselves, for callers that have no source file.
    pub fn from_matrix(vectors: Matrix) -> Result<Self> {
        let mut h = Sha256::new();
        for v in vectors.as_slice() {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize().into();
        Self::new(vectors, digest)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn digest(&self) -> &[u8; 32] {
        &self.digest
    }
}

/// Hidden states for layers `0..=L` at every position of the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn new(layers: Vec<Matrix>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(DiorError::Input("hidden states need at least one layer".into()));
        };
        if layers
            .iter()
            .any(|m| m.rows() != first.rows() || m.cols() != first.cols())
        {
            return Err(DiorError::Consistency("hidden-state layers differ in shape".into()));
        }
        Ok(Self { layers })
    }

    /// Number of stored layers, `L + 1`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l]
    }

    pub fn at(&self, layer: usize, position: usize) -> &[f32] {
        self.layers[layer].row(position)
    }

    pub fn last(&self, layer: usize) -> &[f32] {
        self.at(layer, self.seq_len() - 1)
    }
}

/// Cached attention state for the first `len` positions of a sequence.
#[derive(Debug, Clone)]
pub struct PrefixState {
    pub(crate) model_id: String,
    pub(crate) fingerprint: [u8; 32],
    pub(crate) len: usize,
    /// Per transformer layer, one key and one value row per cached position.
    pub(crate) keys: Vec<Matrix>,
    pub(crate) values: Vec<Matrix>,
    /// Hidden states for layers `0..=L` at the cached positions.
    pub(crate) hidden: Vec<Matrix>,
}

impl PrefixState {
    /// Number of cached positions, image patches included.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// The same cache cut back to its first `positions` positions. `patches`
    /// and `token_ids` must be the sequence this state was built from.
    pub fn truncate(&self, positions: usize, patches: &PatchEmbeddings, token_ids: &[u32]) -> Result<Self> {
        if prefix_fingerprint(&self.model_id, patches, token_ids, self.len) != self.fingerprint {
            return Err(DiorError::CacheMismatch(
                "cannot truncate: sequence does not match cached state".into(),
            ));
        }
        if positions > self.len {
            return Err(DiorError::CacheMismatch(format!(
                "cannot extend a {}-position cache to {positions}",
                self.len
            )));
        }
        let cut = |m: &Matrix| Matrix {
            rows: positions,
            cols: m.cols,
            data: m.data[..positions * m.cols].to_vec(),
        };
        Ok(Self {
            model_id: self.model_id.clone(),
            fingerprint: prefix_fingerprint(&self.model_id, patches, token_ids, positions),
            len: positions,
            keys: self.keys.iter().map(cut).collect(),
            values: self.values.iter().map(cut).collect(),
            hidden: self.hidden.iter().map(cut).collect(),
        })
    }
}

/// Hash identifying the first `positions` positions of `patches ⧺ tokens`.
pub fn prefix_fingerprint(
    model_id: &str,
    patches: &PatchEmbeddings,
    token_ids: &[u32],
    positions: usize,
) -> [u8; 32] {
    let m = patches.len();
    let text = positions.saturating_sub(m).min(token_ids.len());
    let mut h = Sha256::new();
    h.update(b"dior-prefix/1");
    h.update((model_id.len() as u64).to_le_bytes());
    h.update(model_id.as_bytes());
    h.update(patches.digest());
    h.update((m as u64).to_le_bytes());
    h.update((positions as u64).to_le_bytes());
    for id in &token_ids[..text] {
        h.update(id.to_le_bytes());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendInfo {
    pub model_id: String,
    pub hidden_dim: usize,
    /// Number of transformer layers `L`; hidden states span layers `0..=L`.
    pub layer_count: usize,
    pub tokenizer_id: String,
    pub patch_policy: String,
}

/// One greedily generated token with the final-layer hidden state at the
/// position where it was fed back into the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedToken {
    pub token: u32,
    pub hidden: Vec<f32>,
}

pub trait VisionLanguageBackend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    fn encode_image_patches(&self, image: &ImageRef) -> Result<PatchEmbeddings>;

    fn tokenize(&self, text: &str) -> Result<TokenSequence>;

    fn detokenize(&self, ids: &[u32]) -> String;

    /// Runs the decoder over `patches ⧺ tokens`. With a prefix, positions
    /// it covers are taken from the cache and only the rest is computed.
    fn forward_hidden_states(
        &self,
        patches: &PatchEmbeddings,
        tokens: &TokenSequence,
        prefix: Option<&PrefixState>,
    ) -> Result<(HiddenStates, PrefixState)>;

    /// The text-generation head: the token predicted from a final-layer
    /// hidden state. The first output token is predicted from the hidden
    /// state of the last prompt position, with no shift.
    fn next_token(&self, final_hidden: &[f32]) -> u32;

    fn eos_token(&self) -> u32;

    /// Total number of sequence positions pushed through the decoder so far.
    fn computed_positions(&self) -> u64;

    /// Wraps a raw prompt in the model's chat format when enabled.
    fn render_input(&self, prompt: &str) -> String {
        prompt.to_string()
    }

    /// Greedy (temperature 0) decoding. Stops after the end-of-sequence
    /// token or `max_tokens` tokens, whichever comes first.
    fn greedy_decode(
        &self,
        patches: &PatchEmbeddings,
        tokens: &TokenSequence,
        max_tokens: usize,
    ) -> Result<Vec<DecodedToken>> {
        self.greedy_decode_from(patches, tokens, None, max_tokens)
    }

    fn greedy_decode_from(
        &self,
        patches: &PatchEmbeddings,
        tokens: &TokenSequence,
        prefix: Option<&PrefixState>,
        max_tokens: usize,
    ) -> Result<Vec<DecodedToken>> {
        if max_tokens == 0 {
            return Err(DiorError::Input("max_tokens must be at least 1".into()));
        }
        let layers = self.info().layer_count;
        let (hidden, mut state) = self.forward_hidden_states(patches, tokens, prefix)?;
        let mut next = self.next_token(hidden.last(layers));
        let mut seq = tokens.clone();
        let mut out = Vec::with_capacity(max_tokens);
        loop {
            seq.push(next, self.detokenize(&[next]));
            let (hidden, extended) = self.forward_hidden_states(patches, &seq, Some(&state))?;
            state = extended;
            let h = hidden.last(layers).to_vec();
            out.push(DecodedToken {
                token: next,
                hidden: h,
            });
            if next == self.eos_token() || out.len() == max_tokens {
                break;
            }
            next = self.next_token(&out[out.len() - 1].hidden);
        }
        Ok(out)
    }
}

impl fmt::Debug for dyn VisionLanguageBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VisionLanguageBackend")
            .field("model_id", &self.info().model_id)
            .finish()
    }
}

/// Construction options understood by registered backends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendOptions {
    pub seed: u64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub vocab: usize,
    pub patches: usize,
    pub chat_template: bool,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            hidden_dim: 32,
            layers: 4,
            vocab: 64,
            patches: 4,
            chat_template: false,
        }
    }
}

type Constructor = Box<dyn Fn(&BackendOptions) -> Result<Box<dyn VisionLanguageBackend>> + Send + Sync>;

/// Backends keyed by name.
pub struct BackendRegistry {
    constructors: BTreeMap<String, Constructor>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            constructors: BTreeMap::new(),
        }
    }

    /// A registry holding the seeded `toy` backend.
    pub fn with_builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("toy", |opts| {
            let cfg = ToyConfig {
                seed: opts.seed,
                hidden_dim: opts.hidden_dim,
                layers: opts.layers,
                vocab: opts.vocab,
                patches: opts.patches,
                chat_template: opts.chat_template,
            };
            Ok(Box::new(ToyBackend::new(cfg)?) as Box<dyn VisionLanguageBackend>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&BackendOptions) -> Result<Box<dyn VisionLanguageBackend>> + Send + Sync + 'static,
    {
        self.constructors.insert(name.to_string(), Box::new(ctor));
    }

    pub fn names(&self) -> Vec<&str> {
        self.constructors.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, opts: &BackendOptions) -> Result<Box<dyn VisionLanguageBackend>> {
        let ctor = self.constructors.get(name).ok_or_else(|| {
            DiorError::Config(format!(
                "unknown backend `{name}` (available: {})",
                self.names().join(", ")
            ))
        })?;
        ctor(opts)
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}
