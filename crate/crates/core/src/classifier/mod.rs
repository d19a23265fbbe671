//! Dual-prompt zero-shot multi-label classifier with optional global feature
//! fusion in the visual encoder.

pub mod encoder;
pub mod gff;
pub mod heads;
pub mod tensor;
pub mod text;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use encoder::VisualEncoder;
pub use gff::{fuse_layer, gff_forward, GffParams, NormMode};
pub use heads::{aggregate_regions, binary_probability, region_similarities};
pub use text::{NamePosition, Polarity, PromptBank};
pub use train::{train_classifier, EpochRecord, TrainConfig};

use crate::data::{write_file, LabelSpace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

/// Which parameter groups are trained, and in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PromptsOnly,
    SyncPromptsEncoder,
    EncoderThenPrompts,
    PromptsThenEncoder,
    PromptsThenGff,
    #[default]
    SyncPromptsGff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSet {
    Prompts,
    Encoder,
    Gff,
    /// Text tower and vocabulary; never trained.
    Frozen,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::PromptsOnly,
        Strategy::SyncPromptsEncoder,
        Strategy::EncoderThenPrompts,
        Strategy::PromptsThenEncoder,
        Strategy::PromptsThenGff,
        Strategy::SyncPromptsGff,
    ];

    /// Parameter sets trained in each stage.
    pub fn stages(self) -> Vec<Vec<ParamSet>> {
        use ParamSet::*;
        match self {
            Strategy::PromptsOnly => vec![vec![Prompts]],
            Strategy::SyncPromptsEncoder => vec![vec![Prompts, Encoder]],
            Strategy::EncoderThenPrompts => vec![vec![Encoder], vec![Prompts]],
            Strategy::PromptsThenEncoder => vec![vec![Prompts], vec![Encoder]],
            Strategy::PromptsThenGff => vec![vec![Prompts], vec![Gff]],
            Strategy::SyncPromptsGff => vec![vec![Prompts, Gff]],
        }
    }

    pub fn trainable(self) -> Vec<ParamSet> {
        let mut sets: Vec<ParamSet> = self.stages().into_iter().flatten().collect();
        sets.sort();
        sets.dedup();
        sets
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PromptsOnly => "prompts_only",
            Strategy::SyncPromptsEncoder => "sync_prompts_encoder",
            Strategy::EncoderThenPrompts => "encoder_then_prompts",
            Strategy::PromptsThenEncoder => "prompts_then_encoder",
            Strategy::PromptsThenGff => "prompts_then_gff",
            Strategy::SyncPromptsGff => "sync_prompts_gff",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Side of the square grid images are resampled to.
    pub input_side: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub context_len: usize,
    /// Number of 3x3 blocks after the stem.
    pub blocks: usize,
    /// Blocks (0-based) that carry a fusion branch.
    pub gff_sites: Vec<usize>,
    pub gff_heads: usize,
    pub gff_head_mean: bool,
    pub name_position: NamePosition,
    pub tau: f64,
    /// Seed of the stand-in pretrained visual encoder.
    pub encoder_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            input_side: 16,
            channels: 16,
            feature_dim: 16,
            token_dim: 16,
            context_len: 16,
            blocks: 2,
            gff_sites: vec![0, 1],
            gff_heads: 2,
            gff_head_mean: false,
            name_position: NamePosition::End,
            tau: 0.07,
            encoder_seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if let Some(&bad) = self.gff_sites.iter().find(|&&s| s >= self.blocks) {
            return Err(Error::InvalidConfig(format!(
                "gff site {bad} outside the {} fused blocks",
                self.blocks
            )));
        }
        if self.gff_heads == 0 || self.context_len == 0 {
            return Err(Error::InvalidConfig("gff_heads and context_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub config: ClassifierConfig,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub strategy: Strategy,
    pub prompts: PromptBank,
    pub encoder: VisualEncoder,
    pub gff: Vec<Option<GffParams>>,
    pub history: Vec<EpochRecord>,
}

impl ClassifierState {
    pub fn new(label_space: &LabelSpace, config: ClassifierConfig, strategy: Strategy, seed: u64) -> Result<Self> {
        config.validate()?;
        let prompts = PromptBank::new(
            label_space.names(),
            config.context_len,
            config.token_dim,
            config.feature_dim,
            config.name_position,
            seed::derive(seed, 0xC0),
        )?;
        let encoder = VisualEncoder::new(
            config.input_side,
            config.channels,
            config.feature_dim,
            config.blocks,
            config.encoder_seed,
        )?;
        let mut rng = seed::rng(seed::derive(seed, 0x6FF));
        let gff = (0..config.blocks)
            .map(|b| {
                if config.gff_sites.contains(&b) {
                    let mut p = GffParams::init(config.channels, config.gff_heads, &mut rng)?;
                    p.head_mean = config.gff_head_mean;
                    Ok(Some(p))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        Ok(ClassifierState {
            config,
            seen: label_space.seen_names(),
            unseen: label_space.unseen_names(),
            strategy,
            prompts,
            encoder,
            gff,
            history: Vec::new(),
        })
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(&self.seen, &self.unseen)
    }

    pub fn classes(&self) -> &[String] {
        &self.prompts.classes
    }

    /// Same network with the fusion branches removed.
    pub fn without_gff(&self) -> Self {
        ClassifierState {
            gff: vec![None; self.gff.len()],
            ..self.clone()
        }
    }

    pub fn fingerprint(&self, set: ParamSet) -> String {
        match set {
            ParamSet::Prompts => self.prompts.context_fingerprint(),
            ParamSet::Encoder => self.encoder.fingerprint(),
            ParamSet::Frozen => self.prompts.frozen_fingerprint(),
            ParamSet::Gff => {
                let mut parts: Vec<&[f64]> = Vec::new();
                for p in self.gff.iter().flatten() {
                    parts.extend([
                        &p.attn[..],
                        &p.gate[..],
                        &p.gate_bias[..],
                        &p.norm_scale[..],
                        &p.norm_shift[..],
                        &p.running_mean[..],
                        &p.running_var[..],
                    ]);
                }
                seed::fingerprint_f64(parts)
            }
        }
    }

    pub fn fingerprints(&self) -> BTreeMap<ParamSet, String> {
        [ParamSet::Prompts, ParamSet::Encoder, ParamSet::Gff, ParamSet::Frozen]
            .into_iter()
            .map(|s| (s, self.fingerprint(s)))
            .collect()
    }

    /// Probabilities for every class, in label order, for each image (evaluation mode).
    pub fn predict_all(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let pos = self.prompts.features(Polarity::Positive);
        let neg = self.prompts.features(Polarity::Negative);
        let chunks: Vec<Vec<Vec<f64>>> = images
            .par_chunks(16)
            .map(|chunk| {
                let inputs = chunk.iter().map(|im| self.encoder.input_tensor(im)).collect();
                let (regions, _) = encoder::encode_batch(&self.encoder, &self.gff, inputs, NormMode::Eval)?;
                regions
                    .iter()
                    .map(|r| Ok(heads::head_forward(r, &pos, &neg, self.config.tau)?.probs))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: ClassifierState = serde_json::from_str(&text)?;
        state.config.validate()?;
        Ok(state)
    }
}

/// Scores over `label_subset`, in the subset's order.
pub fn predict<S: AsRef<str>>(image: &Image, state: &ClassifierState, label_subset: &[S]) -> Result<Vec<f64>> {
    let idx: Vec<usize> = label_subset
        .iter()
        .map(|name| {
            let name = name.as_ref();
            state.classes().iter().position(|c| c == name).ok_or_else(|| Error::UnknownCategory {
                name: name.to_string(),
                line: None,
            })
        })
        .collect::<Result<_>>()?;
    let all = state.predict_all(&[image])?.remove(0);
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ToyGlyphWorld;

    fn setup() -> (LabelSpace, ClassifierState, ToyGlyphWorld) {
        let ls = LabelSpace::new(&["person", "car"], &["cat", "bus"]).unwrap();
        let cfg = ClassifierConfig {
            context_len: 4,
            ..ClassifierConfig::default()
        };
        let state = ClassifierState::new(&ls, cfg, Strategy::SyncPromptsGff, 1).unwrap();
        let world = ToyGlyphWorld::new(ls.names(), 64).unwrap();
        (ls, state, world)
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.name()));
        }
        assert!("fine_tune_everything".parse::<Strategy>().is_err());
    }

    #[test]
    fn fresh_gff_is_an_exact_identity() {
        let (_, state, world) = setup();
        let images: Vec<Image> = (0..4).map(|i| world.render(&[i % 4, (i + 1) % 4], i as u64)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let with = state.predict_all(&refs).unwrap();
        let without = state.without_gff().predict_all(&refs).unwrap();
        for (a, b) in with.iter().flatten().zip(without.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn predict_restricts_to_subset() {
        let (_, state, world) = setup();
        let img = world.render(&[2], 0);
        let one = predict(&img, &state, &["cat"]).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one[0] > 0.0 && one[0] < 1.0);
        assert_eq!(predict(&img, &state, &state.unseen).unwrap().len(), 2);
        assert!(predict(&img, &state, &["zebra"]).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let (_, state, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        state.save(&path).unwrap();
        assert_eq!(ClassifierState::load(&path).unwrap(), state);
    }

    #[test]
    fn config_validation() {
        let bad = ClassifierConfig {
            gff_sites: vec![5],
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig {
            tau: 0.0,
            ..ClassifierConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
