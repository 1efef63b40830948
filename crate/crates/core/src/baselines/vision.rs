//! Unconditioned global image embeddings from a vision encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backend::toy::{image_features, FEATURES};
use crate::error::{DiorError, Result};
use crate::manifest::ImageRef;

/// An image-only encoder producing one vector per image.
pub trait VisionEncoder: Send + Sync {
    fn encoder_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f32>>;
}

/// Seeded stand-in for a contrastive image tower: strip features of the
/// decoded image through a fixed random projection and `tanh`.
pub struct ToyVisionEncoder {
    id: String,
    patches: usize,
    dim: usize,
    projection: Vec<f32>,
}

impl ToyVisionEncoder {
    pub fn new(seed: u64, dim: usize, patches: usize) -> Result<Self> {
        if dim == 0 || patches == 0 {
            return Err(DiorError::Input("vision encoder sizes must be positive".into()));
        }
        let inputs = patches * FEATURES;
        let scale = 1.0 / (inputs as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5649_5349_4f4e);
        let projection = (0..dim * inputs)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        Ok(Self {
            id: format!("toy-vision-s{seed}-d{dim}-p{patches}"),
            patches,
            dim,
            projection,
        })
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &ImageRef) -> Result<Vec<f32>> {
        let (_, rows) = image_features(image, self.patches)?;
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Ok(self
            .projection
            .chunks(flat.len())
            .map(|w| w.iter().zip(&flat).map(|(a, b)| a * b).sum::<f32>().tanh())
            .collect())
    }
}

/// The encoder's embedding of `image`, checked for shape and finiteness.
pub fn global_image_embed(encoder: &dyn VisionEncoder, image: &ImageRef) -> Result<Vec<f32>> {
    let v = encoder.embed_image(image)?;
    if v.len() != encoder.dim() {
        return Err(DiorError::Consistency(format!(
            "encoder `{}` returned {} values, declared {}",
            encoder.encoder_id(),
            v.len(),
            encoder.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(DiorError::Numeric(format!("global embedding of `{}`", image.id)));
    }
    Ok(v)
}
