//! A seeded miniature decoder implementing the full backend contract.
//!
//! Pre-norm single-head transformer with sinusoidal positions. Image
//! "encoding" maps horizontal strips of the decoded image to mean colour plus
//! features derived from a SHA-256 of the file bytes, then projects them to
//! the hidden width. Every operation is a pure function of the seed and the
//! inputs, and cached prefixes reproduce uncached runs bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{
    prefix_fingerprint, BackendInfo, HiddenStates, Matrix, PatchEmbeddings, PrefixState,
    TokenSequence, VisionLanguageBackend,
};
use crate::error::{DiorError, Result};
use crate::manifest::ImageRef;

/// Per-patch raw feature width before projection.
pub(crate) const FEATURES: usize = 8;

const EOS: u32 = 0;

const LEXICON: &[&str] = &[
    "<eos>", "red", "blue", "green", "yellow", "black", "white", "orange", "purple", "pink",
    "brown", "gray", "circle", "square", "triangle", "star", "sedan", "coupe", "truck", "van",
    "striped", "plain", "floral", "dotted", "cotton", "denim", "leather", "silk", "loose",
    "fitted", "dress", "shirt", "jacket", "skirt", "drama", "comedy", "horror", "action",
    "sparrow", "finch", "warbler", "gull", "painting", "sketch", "clipart", "photo", "dog",
    "cat",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyConfig {
    pub seed: u64,
    pub hidden_dim: usize,
    pub layers: usize,
    pub vocab: usize,
    pub patches: usize,
    pub chat_template: bool,
}

struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

pub struct ToyBackend {
    config: ToyConfig,
    info: BackendInfo,
    patch_proj: Matrix,
    token_emb: Matrix,
    layers: Vec<LayerWeights>,
    head: Matrix,
    computed: AtomicU64,
}

/// Builds a toy backend; all sizes must be at least 1.
pub fn make_toy_backend(seed: u64, d: usize, layers: usize, vocab: usize, patches: usize) -> Result<ToyBackend> {
    ToyBackend::new(ToyConfig {
        seed,
        hidden_dim: d,
        layers,
        vocab,
        patches,
        chat_template: false,
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let rows: Vec<Vec<f32>> = (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows).expect("rectangular")
}

fn matvec(m: &Matrix, x: &[f32]) -> Vec<f32> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

fn positional(pos: usize, d: usize) -> impl Iterator<Item = f32> {
    (0..d).map(move |i| {
        let freq = 1.0 / 10000f32.powf((i / 2 * 2) as f32 / d as f32);
        let angle = pos as f32 * freq;
        0.1 * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

fn stable_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Decodes an image file and returns the SHA-256 of its bytes together with
/// `patches` feature rows of width [`FEATURES`].
pub(crate) fn image_features(image: &ImageRef, patches: usize) -> Result<([u8; 32], Vec<[f32; FEATURES]>)> {
    let bytes = std::fs::read(&image.path).map_err(|e| {
        DiorError::Input(format!("cannot read image `{}` ({}): {e}", image.id, image.path.display()))
    })?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| {
        DiorError::Input(format!("cannot decode image `{}` ({}): {e}", image.id, image.path.display()))
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let digest: [u8; 32] = Sha256::digest(&bytes).into();

    let rows = (0..patches)
        .map(|j| {
            let top = (j as u64 * u64::from(h) / patches as u64) as u32;
            let bottom = (((j + 1) as u64 * u64::from(h) / patches as u64) as u32).max(top + 1).min(h);
            let top = top.min(bottom.saturating_sub(1));
            let mut sum = [0f64; 3];
            let mut sq = 0f64;
            let mut n = 0f64;
            for y in top..bottom {
                for x in 0..w {
                    let p = rgb.get_pixel(x, y).0;
                    for c in 0..3 {
                        sum[c] += f64::from(p[c]) / 255.0;
                    }
                    let lum = (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 765.0;
                    sq += lum * lum;
                    n += 1.0;
                }
            }
            let mean = sum.map(|s| s / n.max(1.0));
            let lum = (mean[0] + mean[1] + mean[2]) / 3.0;
            let var = (sq / n.max(1.0) - lum * lum).max(0.0);

            let mut hasher = Sha256::new();
            hasher.update(digest);
            hasher.update((j as u64).to_le_bytes());
            let noise = hasher.finalize();

            let mut row = [0f32; FEATURES];
            row[0] = mean[0] as f32;
            row[1] = mean[1] as f32;
            row[2] = mean[2] as f32;
            row[3] = var.sqrt() as f32;
            for k in 0..4 {
                row[4 + k] = (f32::from(noise[k]) / 127.5 - 1.0) * 0.1;
            }
            row
        })
        .collect();
    Ok((digest, rows))
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let ToyConfig {
            seed,
            hidden_dim: d,
            layers,
            vocab,
            patches,
            ..
        } = config;
        if d == 0 || layers == 0 || vocab == 0 || patches == 0 {
            return Err(DiorError::Input(format!(
                "toy backend sizes must be >= 1 (d={d}, layers={layers}, vocab={vocab}, patches={patches})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = 1.0 / (d as f32).sqrt();
        let patch_proj = random_matrix(&mut rng, d, FEATURES, 1.0);
        let token_emb = random_matrix(&mut rng, vocab, d, 0.5);
        let layer_weights = (0..layers)
            .map(|_| LayerWeights {
                wq: random_matrix(&mut rng, d, d, inv),
                wk: random_matrix(&mut rng, d, d, inv),
                wv: random_matrix(&mut rng, d, d, inv),
                wo: random_matrix(&mut rng, d, d, inv * 0.5),
                w1: random_matrix(&mut rng, 2 * d, d, inv),
                w2: random_matrix(&mut rng, d, 2 * d, inv * 0.5 / 2f32.sqrt()),
            })
            .collect();
        let head = random_matrix(&mut rng, vocab, d, inv);
        let info = BackendInfo {
            model_id: format!("toy-s{seed}-d{d}-l{layers}-v{vocab}-p{patches}"),
            hidden_dim: d,
            layer_count: layers,
            tokenizer_id: format!("toy-whitespace-v{vocab}"),
            patch_policy: format!("fixed:{patches}"),
        };
        Ok(Self {
            config,
            info,
            patch_proj,
            token_emb,
            layers: layer_weights,
            head,
            computed: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    fn token_id(&self, piece: &str) -> u32 {
        let vocab = self.config.vocab;
        if let Some(i) = LEXICON.iter().position(|w| *w == piece).filter(|&i| i < vocab) {
            return i as u32;
        }
        if let Some(i) = piece
            .strip_prefix('w')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&i| i >= LEXICON.len() && i < vocab)
        {
            return i as u32;
        }
        if vocab == 1 {
            return 0;
        }
        (1 + stable_hash(piece.as_bytes()) % (vocab as u64 - 1)) as u32
    }

    fn word(id: u32) -> String {
        LEXICON
            .get(id as usize)
            .map_or_else(|| format!("w{id}"), |w| (*w).to_string())
    }

    /// Layer-0 input for one position: patch or token embedding plus position.
    fn input_row(&self, patches: &PatchEmbeddings, ids: &[u32], pos: usize) -> Vec<f32> {
        let m = patches.len();
        let base = if pos < m {
            patches.vectors().row(pos)
        } else {
            self.token_emb.row(ids[pos - m] as usize)
        };
        base.iter()
            .zip(positional(pos, self.info.hidden_dim))
            .map(|(a, b)| a + b)
            .collect()
    }
}

impl VisionLanguageBackend for ToyBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode_image_patches(&self, image: &ImageRef) -> Result<PatchEmbeddings> {
        let (digest, features) = image_features(image, self.config.patches)?;
        let rows: Vec<Vec<f32>> = features.iter().map(|f| matvec(&self.patch_proj, f)).collect();
        PatchEmbeddings::new(Matrix::from_rows(&rows)?, digest)
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let pieces: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if pieces.is_empty() {
            return Err(DiorError::Input("cannot tokenize empty text".into()));
        }
        let ids = pieces.iter().map(|p| self.token_id(p)).collect();
        TokenSequence::new(ids, pieces)
    }

    fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| Self::word(id)).collect::<Vec<_>>().join(" ")
    }

    fn forward_hidden_states(
        &self,
        patches: &PatchEmbeddings,
        tokens: &TokenSequence,
        prefix: Option<&PrefixState>,
    ) -> Result<(HiddenStates, PrefixState)> {
        let d = self.info.hidden_dim;
        let n_layers = self.config.layers;
        if patches.vectors().cols() != d {
            return Err(DiorError::Input(format!(
                "patch width {} does not match hidden width {d}",
                patches.vectors().cols()
            )));
        }
        let ids = tokens.ids();
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            return Err(DiorError::Input(format!("token id {bad} outside vocabulary")));
        }
        let total = patches.len() + tokens.len();

        let (start, mut keys, mut values, mut hidden) = match prefix {
            Some(p) => {
                if p.model_id != self.info.model_id {
                    return Err(DiorError::CacheMismatch(format!(
                        "prefix built by `{}`, applied to `{}`",
                        p.model_id, self.info.model_id
                    )));
                }
                if p.len > total {
                    return Err(DiorError::CacheMismatch(format!(
                        "prefix covers {} positions but sequence has {total}",
                        p.len
                    )));
                }
                if prefix_fingerprint(&self.info.model_id, patches, ids, p.len) != p.fingerprint {
                    return Err(DiorError::CacheMismatch(
                        "fingerprint differs from the leading positions of this sequence".into(),
                    ));
                }
                (p.len, p.keys.clone(), p.values.clone(), p.hidden.clone())
            }
            None => (
                0,
                vec![Matrix::with_cols(d); n_layers],
                vec![Matrix::with_cols(d); n_layers],
                vec![Matrix::with_cols(d); n_layers + 1],
            ),
        };

        for pos in start..total {
            hidden[0].push_row(&self.input_row(patches, ids, pos));
        }
        let scale = 1.0 / (d as f32).sqrt();
        for (l, w) in self.layers.iter().enumerate() {
            for pos in start..total {
                let x = hidden[l].row(pos).to_vec();
                let normed = rms_norm(&x);
                let q = matvec(&w.wq, &normed);
                keys[l].push_row(&matvec(&w.wk, &normed));
                values[l].push_row(&matvec(&w.wv, &normed));

                let scores: Vec<f32> = (0..=pos)
                    .map(|j| keys[l].row(j).iter().zip(&q).map(|(a, b)| a * b).sum::<f32>() * scale)
                    .collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exp: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f32 = exp.iter().sum();
                let mut attended = vec![0f32; d];
                for (j, e) in exp.iter().enumerate() {
                    let p = e / denom;
                    for (a, v) in attended.iter_mut().zip(values[l].row(j)) {
                        *a += p * v;
                    }
                }
                let mixed = matvec(&w.wo, &attended);
                let h: Vec<f32> = x.iter().zip(&mixed).map(|(a, b)| a + b).collect();
                let up: Vec<f32> = matvec(&w.w1, &rms_norm(&h)).into_iter().map(gelu).collect();
                let down = matvec(&w.w2, &up);
                let out: Vec<f32> = h.iter().zip(&down).map(|(a, b)| a + b).collect();
                hidden[l + 1].push_row(&out);
            }
        }
        self.computed.fetch_add((total - start) as u64, Ordering::Relaxed);

        if let Some(l) = hidden.iter().position(|m| !m.is_finite()) {
            return Err(DiorError::Numeric(format!("toy backend layer {l}")));
        }
        let state = PrefixState {
            model_id: self.info.model_id.clone(),
            fingerprint: prefix_fingerprint(&self.info.model_id, patches, ids, total),
            len: total,
            keys,
            values,
            hidden: hidden.clone(),
        };
        Ok((HiddenStates::new(hidden)?, state))
    }

    fn next_token(&self, final_hidden: &[f32]) -> u32 {
        let logits = matvec(&self.head, &rms_norm(final_hidden));
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best as u32
    }

    fn eos_token(&self) -> u32 {
        EOS
    }

    fn computed_positions(&self) -> u64 {
        self.computed.load(Ordering::Relaxed)
    }

    fn render_input(&self, prompt: &str) -> String {
        if self.config.chat_template {
            format!("<|user|> <|image|> {prompt} <|assistant|>")
        } else {
            prompt.to_string()
        }
    }
}
