//! Role interfaces for the three external models (instruction LLM, text-to-image
//! generator, vision-language embedder), plus HTTP clients and deterministic toys.

mod http;
mod stack;
mod toy;

pub use http::{HttpBackend, HttpConfig, BACKEND_URL_ENV};
pub use stack::{tokenize, StackForward, TextEncoder, ToyDiffStack};
pub use toy::{GlyphShape, ToyGlyphWorld, ToyInstructionLlm};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCapabilities {
    pub resolutions: Vec<u32>,
    pub supports_text_encoder_gradients: bool,
}

/// A text-to-image generator. `generate` must be deterministic in `(prompt, seed)`.
pub trait TextToImageBackend: Send + Sync {
    fn capabilities(&self) -> GeneratorCapabilities;
    fn generate(&self, prompt: &str, resolution: u32, seed: u64) -> Result<Image>;
}

/// The discriminator's image and text towers.
pub trait VisionLanguageEmbedder: Send + Sync {
    fn embedding_dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// A generator exposing a differentiable path from its text encoder to the
/// discriminator similarities of the categories it models.
pub trait DifferentiableGenerator: TextToImageBackend {
    fn modelled_categories(&self) -> Vec<String>;
    fn text_encoder(&self) -> &TextEncoder;
    /// Similarities for every modelled category, given the encoded prompt.
    fn similarity_forward(&self, latent: &[f64]) -> Result<Vec<f64>>;
    /// dL/d(latent) given dL/d(similarities).
    fn similarity_backward(&self, latent: &[f64], grad: &[f64]) -> Result<Vec<f64>>;
    /// Hash of every parameter outside the text encoder.
    fn frozen_fingerprint(&self) -> String;
}

pub trait InstructionLlmBackend: Send + Sync {
    /// Exactly `n` non-empty completions for `instruction`.
    fn complete(&self, instruction: &str, n: usize) -> Result<Vec<String>>;
}

/// Generate through `backend`, checking the resolution and the output contract.
pub fn generate(
    backend: &dyn TextToImageBackend,
    prompt: &str,
    resolution: u32,
    seed: u64,
) -> Result<Image> {
    let caps = backend.capabilities();
    if !caps.resolutions.contains(&resolution) {
        return Err(Error::UnsupportedResolution {
            requested: resolution,
            supported: caps.resolutions,
        });
    }
    let image = backend.generate(prompt, resolution, seed)?;
    if image.width() != resolution || image.height() != resolution {
        return Err(Error::Backend(format!(
            "requested {resolution}x{resolution}, backend returned {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(image)
}

fn check_vector(v: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Backend("embedding contains non-finite values".into()));
    }
    Ok(v)
}

pub fn embed_image(embedder: &dyn VisionLanguageEmbedder, image: &Image) -> Result<Vec<f64>> {
    check_vector(embedder.embed_image(image)?, embedder.embedding_dim())
}

pub fn embed_text(embedder: &dyn VisionLanguageEmbedder, text: &str) -> Result<Vec<f64>> {
    check_vector(embedder.embed_text(text)?, embedder.embedding_dim())
}

/// Case-insensitive, word-bounded occurrences of `names` in `text`, longest name first.
/// Returns the matched name indices in ascending order.
pub fn find_mentions<S: AsRef<str>>(text: &str, names: &[S]) -> Vec<usize> {
    let lower = text.to_lowercase();
    let bytes = lower.as_bytes();
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(names[i].as_ref().len()));
    let mut taken = vec![false; bytes.len()];
    let mut found = Vec::new();
    for i in order {
        let needle = names[i].as_ref().to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut start = 0;
        while let Some(pos) = lower[start..].find(&needle) {
            let s = start + pos;
            let e = s + needle.len();
            let left_ok = s == 0 || !is_word_byte(bytes[s - 1]);
            let right_ok = e == bytes.len() || !is_word_byte(bytes[e]);
            if left_ok && right_ok && !taken[s..e].iter().any(|&t| t) {
                taken[s..e].iter_mut().for_each(|t| *t = true);
                found.push(i);
                break;
            }
            start = s + 1;
            while !lower.is_char_boundary(start) {
                start += 1;
            }
        }
    }
    found.sort_unstable();
    found
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}
