//! Caption-then-embed baseline: decode a short answer to the conditional
//! prompt and embed the answer text.

use super::text::TextEmbedder;
use crate::backend::VisionLanguageBackend;
use crate::error::{DiorError, Result};
use crate::manifest::{ImageRef, DEFAULT_MAX_NEW_TOKENS};
use crate::prompting::{render_prompt, PromptSpec};

/// Produces a caption for an image given a prompt.
pub trait Captioner {
    fn caption(&self, image: &ImageRef, prompt: &str) -> Result<String>;
}

/// Greedy decoding with a vision-language backend, up to end of sequence or
/// `max_new_tokens`.
pub struct BackendCaptioner<'a> {
    pub backend: &'a dyn VisionLanguageBackend,
    pub max_new_tokens: usize,
}

impl<'a> BackendCaptioner<'a> {
    pub fn new(backend: &'a dyn VisionLanguageBackend) -> Self {
        Self {
            backend,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

impl Captioner for BackendCaptioner<'_> {
    fn caption(&self, image: &ImageRef, prompt: &str) -> Result<String> {
        let patches = self.backend.encode_image_patches(image)?;
        let tokens = self.backend.tokenize(&self.backend.render_input(prompt))?;
        let decoded = self.backend.greedy_decode(&patches, &tokens, self.max_new_tokens)?;
        let eos = self.backend.eos_token();
        let ids: Vec<u32> = decoded.iter().map(|t| t.token).take_while(|&t| t != eos).collect();
        if ids.is_empty() {
            return Ok(String::new());
        }
        Ok(self.backend.detokenize(&ids))
    }
}

/// Caption of `image` under `condition`, embedded as text.
pub fn capemb_embed(
    captioner: &dyn Captioner,
    embedder: &dyn TextEmbedder,
    image: &ImageRef,
    condition: &str,
    spec: &PromptSpec,
) -> Result<(String, Vec<f32>)> {
    let prompt = render_prompt(spec, spec.with_condition.then_some(condition))?;
    let caption = captioner.caption(image, &prompt)?;
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(DiorError::Generation(format!("empty caption for `{}`", image.id)));
    }
    Ok((caption.to_string(), embedder.embed_text(caption)?))
}
