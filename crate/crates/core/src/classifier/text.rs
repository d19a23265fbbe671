//! Dual learnable prompt contexts and the frozen text tower that encodes them.
//!
//! Each class owns a positive and a negative context of `context_len` token
//! vectors. A prompt is the context plus the class-name token; the tower adds
//! fixed positional vectors, mean-pools, and applies a fixed linear map.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamePosition {
    Front,
    Middle,
    #[default]
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    pub classes: Vec<String>,
    pub context_len: usize,
    pub token_dim: usize,
    pub feature_dim: usize,
    pub name_position: NamePosition,
    /// `[class][token][dim]`
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
    /// Frozen: `[class][dim]` name-token embeddings.
    pub name_tokens: Vec<f64>,
    /// Frozen: `[context_len + 1][dim]` positional vectors.
    pub positions: Vec<f64>,
    /// Frozen: `[feature_dim][token_dim]` output map.
    pub tower: Vec<f64>,
}

const CONTEXT_INIT_STD: f64 = 0.02;
const POSITION_STD: f64 = 0.1;

/// Seeded embedding of a word, independent of where the class sits in the label list.
fn name_embedding(name: &str, dim: usize, vocab_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::derive(vocab_seed, seed::hash_str(name)));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl PromptBank {
    pub fn new(
        classes: &[String],
        context_len: usize,
        token_dim: usize,
        feature_dim: usize,
        name_position: NamePosition,
        seed: u64,
    ) -> Result<Self> {
        if classes.is_empty() || context_len == 0 || token_dim == 0 || feature_dim == 0 {
            return Err(Error::InvalidConfig("prompt bank dimensions must be positive".into()));
        }
        let q = classes.len();
        let ctx = Normal::new(0.0, CONTEXT_INIT_STD).expect("positive std");
        let mut pos_rng = seed::rng(seed::derive(seed, 1));
        let mut neg_rng = seed::rng(seed::derive(seed, 2));
        let n_ctx = q * context_len * token_dim;
        // The tower and vocabulary play the part of pretrained weights: they depend only on the dimensions.
        let frozen_seed = 0x7E47_0000 ^ ((token_dim as u64) << 16) ^ feature_dim as u64;
        let mut frozen = seed::rng(frozen_seed);
        let positions_dist = Normal::new(0.0, POSITION_STD).expect("positive std");
        let tower_dist = Normal::new(0.0, 1.0 / (token_dim as f64).sqrt()).expect("positive std");
        Ok(PromptBank {
            classes: classes.to_vec(),
            context_len,
            token_dim,
            feature_dim,
            name_position,
            positive: (0..n_ctx).map(|_| ctx.sample(&mut pos_rng)).collect(),
            negative: (0..n_ctx).map(|_| ctx.sample(&mut neg_rng)).collect(),
            name_tokens: classes
                .iter()
                .flat_map(|c| name_embedding(c, token_dim, frozen_seed))
                .collect(),
            positions: (0..(context_len + 1) * token_dim)
                .map(|_| positions_dist.sample(&mut frozen))
                .collect(),
            tower: (0..feature_dim * token_dim)
                .map(|_| tower_dist.sample(&mut frozen))
                .collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn name_slot(&self) -> usize {
        match self.name_position {
            NamePosition::Front => 0,
            NamePosition::Middle => self.context_len / 2,
            NamePosition::End => self.context_len,
        }
    }

    fn context(&self, polarity: Polarity) -> &[f64] {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }

    /// Token sequence for one prompt, positional vectors included.
    fn sequence(&self, class: usize, polarity: Polarity) -> Vec<Vec<f64>> {
        let (m, e) = (self.context_len, self.token_dim);
        let ctx = self.context(polarity);
        let name_slot = self.name_slot();
        let mut ctx_tokens = (0..m).map(|t| &ctx[(class * m + t) * e..(class * m + t + 1) * e]);
        (0..=m)
            .map(|slot| {
                let token = if slot == name_slot {
                    &self.name_tokens[class * e..(class + 1) * e]
                } else {
                    ctx_tokens.next().expect("context token")
                };
                token
                    .iter()
                    .zip(&self.positions[slot * e..(slot + 1) * e])
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect()
    }

    fn encode(&self, class: usize, polarity: Polarity) -> Vec<f64> {
        let seq = self.sequence(class, polarity);
        let e = self.token_dim;
        let mut pooled = vec![0.0; e];
        for tok in &seq {
            for (p, v) in pooled.iter_mut().zip(tok) {
                *p += v;
            }
        }
        let n = seq.len() as f64;
        pooled.iter_mut().for_each(|v| *v /= n);
        (0..self.feature_dim)
            .map(|r| (0..e).map(|k| self.tower[r * e + k] * pooled[k]).sum())
            .collect()
    }

    /// `[class][feature]` text features for the given polarity.
    pub fn features(&self, polarity: Polarity) -> Vec<Vec<f64>> {
        (0..self.num_classes()).map(|c| self.encode(c, polarity)).collect()
    }

    /// Gradient w.r.t. the context of `polarity` given dL/d(features), accumulated into `grad`.
    pub fn backward(&self, d_features: &[Vec<f64>], grad: &mut [f64]) {
        let (m, e) = (self.context_len, self.token_dim);
        let scale = 1.0 / (m + 1) as f64;
        for (class, df) in d_features.iter().enumerate() {
            let d_pooled: Vec<f64> = (0..e)
                .map(|k| (0..self.feature_dim).map(|r| self.tower[r * e + k] * df[r]).sum::<f64>() * scale)
                .collect();
            for t in 0..m {
                for (g, d) in grad[(class * m + t) * e..(class * m + t + 1) * e].iter_mut().zip(&d_pooled) {
                    *g += d;
                }
            }
        }
    }

    pub fn frozen_fingerprint(&self) -> String {
        seed::fingerprint_f64([&self.name_tokens[..], &self.positions[..], &self.tower[..]])
    }

    pub fn context_fingerprint(&self) -> String {
        seed::fingerprint_f64([&self.positive[..], &self.negative[..]])
    }
}
