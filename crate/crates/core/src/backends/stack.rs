//! A small differentiable generator+discriminator path for text-encoder tuning.
//!
//! prompt --(trainable text encoder)--> latent z
//!        --(frozen)--> similarities u = bias + gain * tanh(W z)
//!        --(frozen)--> presence probability q = sigmoid(sharpness * (u - 0.5))
//!
//! Sampling draws every modelled category independently with probability q, so
//! the miss behaviour of the generator is coupled to the latent the encoder produces.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DifferentiableGenerator, GeneratorCapabilities, TextToImageBackend, ToyGlyphWorld};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Bag-of-tokens text encoder: the latent is the mean of the token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    dim: usize,
    seed: u64,
    init_scale: f64,
    /// Materialized token embeddings; tokens absent here use their seeded initial value.
    table: BTreeMap<String, Vec<f64>>,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64, init_scale: f64) -> Self {
        TextEncoder {
            dim,
            seed,
            init_scale,
            table: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.table
    }

    fn initial(&self, token: &str) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive(self.seed, seed::hash_str(token)));
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * self.init_scale
            })
            .collect()
    }

    pub fn embedding(&self, token: &str) -> Vec<f64> {
        self.table
            .get(token)
            .cloned()
            .unwrap_or_else(|| self.initial(token))
    }

    pub fn set_embedding(&mut self, token: &str, value: Vec<f64>) -> Result<()> {
        if value.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: value.len(),
            });
        }
        self.table.insert(token.to_string(), value);
        Ok(())
    }

    /// Hash of every stored embedding that differs from its seeded initial value.
    pub fn fingerprint(&self) -> String {
        let mut parts: Vec<Vec<f64>> = Vec::new();
        for (token, value) in &self.table {
            if *value != self.initial(token) {
                parts.push(vec![f64::from_bits(seed::hash_str(token))]);
                parts.push(value.clone());
            }
        }
        seed::fingerprint_f64(parts.iter().map(Vec::as_slice))
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut z = vec![0.0; self.dim];
        if tokens.is_empty() {
            return z;
        }
        for t in &tokens {
            for (zi, e) in z.iter_mut().zip(self.embedding(t)) {
                *zi += e;
            }
        }
        let n = tokens.len() as f64;
        z.iter_mut().for_each(|v| *v /= n);
        z
    }

    /// Gradient of a loss w.r.t. each token embedding used by `text`, given dL/dz.
    pub fn backward(&self, text: &str, grad_z: &[f64]) -> BTreeMap<String, Vec<f64>> {
        let tokens = tokenize(text);
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        if tokens.is_empty() {
            return grads;
        }
        let n = tokens.len() as f64;
        for t in tokens {
            let g = grads.entry(t).or_insert_with(|| vec![0.0; self.dim]);
            for (gi, dz) in g.iter_mut().zip(grad_z) {
                *gi += dz / n;
            }
        }
        grads
    }
}

#[derive(Debug, Clone)]
pub struct StackForward {
    pub similarities: Vec<f64>,
    pub presence: Vec<f64>,
    /// Mode image: every category whose presence probability is at least one half.
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct ToyDiffStack {
    world: ToyGlyphWorld,
    categories: Vec<usize>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    gain: f64,
    sharpness: f64,
    encoder: TextEncoder,
}

const CATEGORY_TOKEN_GAIN: f64 = 7.0;
const FILLER_SCALE: f64 = 0.3;

impl ToyDiffStack {
    /// Build a stack over `categories` (indices into `world`) with a pretrained-style encoder
    /// whose category tokens point weakly along their frozen read-out directions.
    pub fn new(world: ToyGlyphWorld, categories: Vec<usize>, latent_dim: usize, seed: u64) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::EmptyInput("stack needs categories".into()));
        }
        if let Some(&bad) = categories.iter().find(|&&c| c >= world.categories().len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: world.categories().len(),
            });
        }
        let mut rng = seed::rng(seed::derive(seed, 0x57AC));
        let weights: Vec<Vec<f64>> = categories
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let mut encoder = TextEncoder::new(latent_dim, seed::derive(seed, 0x7E47), FILLER_SCALE);
        for (row, &c) in weights.iter().zip(&categories) {
            let name_tokens = tokenize(&world.categories()[c]);
            let share = CATEGORY_TOKEN_GAIN / name_tokens.len() as f64;
            for t in name_tokens {
                encoder.set_embedding(&t, row.iter().map(|w| w * share).collect())?;
            }
        }
        Ok(ToyDiffStack {
            world,
            bias: vec![0.0; categories.len()],
            categories,
            weights,
            gain: 1.0,
            sharpness: 8.0,
            encoder,
        })
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.categories.len() {
            return Err(Error::DimensionMismatch {
                expected: self.categories.len(),
                actual: bias.len(),
            });
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn world(&self) -> &ToyGlyphWorld {
        &self.world
    }

    /// World indices of the modelled categories, in similarity order.
    pub fn categories(&self) -> &[usize] {
        &self.categories
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories
            .iter()
            .map(|&c| self.world.categories()[c].clone())
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn set_encoder(&mut self, encoder: TextEncoder) -> Result<()> {
        if encoder.dim() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                actual: encoder.dim(),
            });
        }
        self.encoder = encoder;
        Ok(())
    }

    /// Hash of every parameter outside the text encoder.
    pub fn frozen_fingerprint(&self) -> String {
        let scalars = [self.gain, self.sharpness];
        let cats: Vec<f64> = self.categories.iter().map(|&c| c as f64).collect();
        seed::fingerprint_f64(
            self.weights
                .iter()
                .map(Vec::as_slice)
                .chain([self.bias.as_slice(), &scalars[..], &cats[..]]),
        )
    }

    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        if latent.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                actual: latent.len(),
            });
        }
        Ok(())
    }

    fn similarities(&self, latent: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| {
                let a: f64 = row.iter().zip(latent).map(|(w, z)| w * z).sum();
                b + self.gain * a.tanh()
            })
            .collect()
    }

    fn presence(&self, similarities: &[f64]) -> Vec<f64> {
        similarities
            .iter()
            .map(|u| 1.0 / (1.0 + (-self.sharpness * (u - 0.5)).exp()))
            .collect()
    }

    pub fn forward(&self, latent: &[f64]) -> Result<StackForward> {
        self.check_latent(latent)?;
        let similarities = self.similarities(latent);
        let presence = self.presence(&similarities);
        let drawn: Vec<usize> = presence
            .iter()
            .zip(&self.categories)
            .filter(|(q, _)| **q >= 0.5)
            .map(|(_, &c)| c)
            .collect();
        let image = self.world.render(&drawn, 0);
        Ok(StackForward {
            similarities,
            presence,
            image,
        })
    }

    /// dL/dz given dL/du.
    pub fn backward(&self, latent: &[f64], grad_similarities: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        if grad_similarities.len() != self.categories.len() {
            return Err(Error::DimensionMismatch {
                expected: self.categories.len(),
                actual: grad_similarities.len(),
            });
        }
        let mut grad = vec![0.0; latent.len()];
        for (row, g) in self.weights.iter().zip(grad_similarities) {
            let a: f64 = row.iter().zip(latent).map(|(w, z)| w * z).sum();
            let da = g * self.gain * (1.0 - a.tanh().powi(2));
            for (gz, w) in grad.iter_mut().zip(row) {
                *gz += da * w;
            }
        }
        Ok(grad)
    }

    pub fn encode(&self, prompt: &str) -> Vec<f64> {
        self.encoder.encode(prompt)
    }
}

impl TextToImageBackend for ToyDiffStack {
    fn capabilities(&self) -> GeneratorCapabilities {
        GeneratorCapabilities {
            resolutions: vec![self.world.canvas_size()],
            supports_text_encoder_gradients: true,
        }
    }

    fn generate(&self, prompt: &str, resolution: u32, seed: u64) -> Result<Image> {
        if resolution != self.world.canvas_size() {
            return Err(Error::UnsupportedResolution {
                requested: resolution,
                supported: vec![self.world.canvas_size()],
            });
        }
        let z = self.encode(prompt);
        let presence = self.presence(&self.similarities(&z));
        let mut rng = seed::rng(seed::derive(seed, seed::hash_str(prompt)));
        let drawn: Vec<usize> = presence
            .iter()
            .zip(&self.categories)
            .filter(|(q, _)| rng.random::<f64>() < **q)
            .map(|(_, &c)| c)
            .collect();
        Ok(self.world.render(&drawn, seed::derive(seed, 1)))
    }
}

impl DifferentiableGenerator for ToyDiffStack {
    fn modelled_categories(&self) -> Vec<String> {
        self.category_names()
    }

    fn text_encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    fn similarity_forward(&self, latent: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(latent)?;
        Ok(self.similarities(latent))
    }

    fn similarity_backward(&self, latent: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        self.backward(latent, grad)
    }

    fn frozen_fingerprint(&self) -> String {
        ToyDiffStack::frozen_fingerprint(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack() -> ToyDiffStack {
        let world = ToyGlyphWorld::new(&["person", "cat", "bus", "kite"], 64).unwrap();
        ToyDiffStack::new(world, vec![1, 2, 3], 8, 42).unwrap()
    }

    #[test]
    fn similarity_gradient_matches_central_differences() {
        let s = stack();
        let mut rng = seed::rng(9);
        for _ in 0..20 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g_u: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = s.backward(&z, &g_u).unwrap();
            let h = 1e-5;
            for d in 0..8 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[d] += h;
                zm[d] -= h;
                let f = |z: &[f64]| -> f64 {
                    s.forward(z)
                        .unwrap()
                        .similarities
                        .iter()
                        .zip(&g_u)
                        .map(|(u, g)| u * g)
                        .sum()
                };
                let numeric = (f(&zp) - f(&zm)) / (2.0 * h);
                let rel = (analytic[d] - numeric).abs() / numeric.abs().max(1e-8);
                assert!(rel < 1e-4 || (analytic[d] - numeric).abs() < 1e-10, "d={d} {analytic:?} {numeric}");
            }
        }
    }

    #[test]
    fn zero_latent_yields_bias() {
        let s = stack().with_bias(vec![0.1, -0.2, 0.3]).unwrap();
        let out = s.forward(&[0.0; 8]).unwrap();
        assert_eq!(out.similarities, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn forward_ignores_sampling_seed() {
        let s = stack();
        let z = s.encode("a cat next to a bus");
        let a = s.forward(&z).unwrap();
        let b = s.forward(&z).unwrap();
        assert_eq!(a.similarities, b.similarities);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn rejects_wrong_latent_size() {
        let s = stack();
        assert!(matches!(
            s.forward(&[0.0; 3]),
            Err(Error::DimensionMismatch { expected: 8, actual: 3 })
        ));
    }

    #[test]
    fn encoder_gradient_matches_central_differences() {
        let s = stack();
        let enc = s.encoder().clone();
        let text = "a cat next to a cat and a bus";
        let gz: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let grads = enc.backward(text, &gz);
        let objective = |e: &TextEncoder| -> f64 { e.encode(text).iter().zip(&gz).map(|(a, b)| a * b).sum() };
        for (token, g) in &grads {
            for d in 0..8 {
                let mut ep = enc.clone();
                let mut em = enc.clone();
                let mut v = enc.embedding(token);
                v[d] += 1e-5;
                ep.set_embedding(token, v.clone()).unwrap();
                v[d] -= 2e-5;
                em.set_embedding(token, v).unwrap();
                let numeric = (objective(&ep) - objective(&em)) / 2e-5;
                assert!((numeric - g[d]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn generation_depends_on_seed_only_through_sampling() {
        let s = stack();
        let a = s.generate("a cat next to a bus", 64, 1).unwrap();
        let b = s.generate("a cat next to a bus", 64, 1).unwrap();
        assert_eq!(a, b);
        assert!(s.capabilities().supports_text_encoder_gradients);
    }
}
