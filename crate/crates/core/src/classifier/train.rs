//! Asymmetric-loss training of the classifier under a fine-tuning strategy.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{encode_backward, encode_batch, EncoderGrads};
use super::gff::{update_running_stats, NormMode};
use super::heads::{head_backward, head_forward};
use super::tensor::FeatureMap;
use super::{ClassifierState, ParamSet, Polarity};
use crate::data::{DatasetManifest, Provenance};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::seed;
use crate::tuner::{asl_loss, AslParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub asl: AslParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            weight_decay: 0.0,
            batch_size: 16,
            asl: AslParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub loss: f64,
}

struct Sample {
    input: FeatureMap,
    positives: BTreeSet<usize>,
}

struct StepGrads {
    loss: f64,
    positive: Vec<f64>,
    negative: Vec<f64>,
    visual: Option<EncoderGrads>,
}

fn update(opt: &mut AdamW, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
    opt.update(name, param, grad)
}

/// Classes that contribute to the loss: every seen class, and unseen classes
/// only when the training set holds a positive for them.
fn loss_classes(state: &ClassifierState, train: &DatasetManifest) -> Vec<bool> {
    let counts = train.positive_counts();
    let n_seen = state.seen.len();
    (0..state.classes().len()).map(|c| c < n_seen || counts[c] > 0).collect()
}

fn step(
    state: &ClassifierState,
    batch: &[&Sample],
    cached_regions: Option<&[&Vec<Vec<f64>>]>,
    trainable: &[ParamSet],
    mode: NormMode,
    mask: &[bool],
    asl: &AslParams,
) -> Result<(StepGrads, Option<super::encoder::EncoderCache>)> {
    let needs_visual = trainable.contains(&ParamSet::Encoder) || trainable.contains(&ParamSet::Gff);
    let (regions, cache) = match cached_regions {
        Some(r) => (r.iter().map(|v| (*v).clone()).collect::<Vec<_>>(), None),
        None => {
            let inputs = batch.iter().map(|s| s.input.clone()).collect();
            let (r, c) = encode_batch(&state.encoder, &state.gff, inputs, mode)?;
            (r, Some(c))
        }
    };
    let pos_text = state.prompts.features(Polarity::Positive);
    let neg_text = state.prompts.features(Polarity::Negative);
    let tau = state.config.tau;
    let q = state.classes().len();
    let scale = 1.0 / batch.len() as f64;
    let per_image: Vec<(f64, super::heads::HeadGrads)> = batch
        .par_iter()
        .zip(&regions)
        .map(|(sample, r)| {
            let fwd = head_forward(r, &pos_text, &neg_text, tau)?;
            let (mut pos_p, mut neg_p, mut pos_ix, mut neg_ix) = (vec![], vec![], vec![], vec![]);
            for c in (0..q).filter(|&c| mask[c]) {
                if sample.positives.contains(&c) {
                    pos_p.push(fwd.probs[c]);
                    pos_ix.push(c);
                } else {
                    neg_p.push(fwd.probs[c]);
                    neg_ix.push(c);
                }
            }
            let out = asl_loss(&pos_p, &neg_p, asl)?;
            let mut d_probs = vec![0.0; q];
            for (&c, g) in pos_ix.iter().zip(&out.grad_pos).chain(neg_ix.iter().zip(&out.grad_neg)) {
                d_probs[c] = g * scale;
            }
            Ok((out.loss, head_backward(r, &pos_text, &neg_text, &fwd, &d_probs, tau)))
        })
        .collect::<Result<_>>()?;

    let dim = state.prompts.feature_dim;
    let mut loss = 0.0;
    let mut d_pos = vec![vec![0.0; dim]; q];
    let mut d_neg = vec![vec![0.0; dim]; q];
    let mut d_regions = Vec::with_capacity(per_image.len());
    for (l, g) in per_image {
        loss += l * scale;
        for (acc, v) in d_pos.iter_mut().flatten().zip(g.positive_text.iter().flatten()) {
            *acc += v;
        }
        for (acc, v) in d_neg.iter_mut().flatten().zip(g.negative_text.iter().flatten()) {
            *acc += v;
        }
        d_regions.push(g.regions);
    }
    let mut positive = vec![0.0; state.prompts.positive.len()];
    let mut negative = vec![0.0; state.prompts.negative.len()];
    state.prompts.backward(&d_pos, &mut positive);
    state.prompts.backward(&d_neg, &mut negative);
    let visual = match (&cache, needs_visual) {
        (Some(c), true) => Some(encode_backward(
            &state.encoder,
            &state.gff,
            c,
            &d_regions,
            trainable.contains(&ParamSet::Encoder),
        )),
        _ => None,
    };
    Ok((
        StepGrads {
            loss,
            positive,
            negative,
            visual,
        },
        cache,
    ))
}

fn apply(state: &mut ClassifierState, grads: &StepGrads, trainable: &[ParamSet], opt: &mut AdamW) -> Result<()> {
    if trainable.contains(&ParamSet::Prompts) {
        update(opt, "prompts.positive", &mut state.prompts.positive, &grads.positive)?;
        update(opt, "prompts.negative", &mut state.prompts.negative, &grads.negative)?;
    }
    let Some(visual) = &grads.visual else {
        return Ok(());
    };
    if trainable.contains(&ParamSet::Encoder) {
        let (enc, g) = (&mut state.encoder, &visual.encoder);
        update(opt, "encoder.stem.weight", &mut enc.stem.weight, &g.stem.weight)?;
        update(opt, "encoder.stem.bias", &mut enc.stem.bias, &g.stem.bias)?;
        for (b, (conv, gc)) in enc.blocks.iter_mut().zip(&g.blocks).enumerate() {
            update(opt, &format!("encoder.block{b}.weight"), &mut conv.weight, &gc.weight)?;
            update(opt, &format!("encoder.block{b}.bias"), &mut conv.bias, &gc.bias)?;
        }
        update(opt, "encoder.projection", &mut enc.projection, &g.projection)?;
        update(opt, "encoder.projection_bias", &mut enc.projection_bias, &g.projection_bias)?;
    }
    if trainable.contains(&ParamSet::Gff) {
        for (b, (p, g)) in state.gff.iter_mut().zip(&visual.gff).enumerate() {
            if let (Some(p), Some(g)) = (p.as_mut(), g.as_ref()) {
                update(opt, &format!("gff{b}.attn"), &mut p.attn, &g.attn)?;
                update(opt, &format!("gff{b}.gate"), &mut p.gate, &g.gate)?;
                update(opt, &format!("gff{b}.gate_bias"), &mut p.gate_bias, &g.gate_bias)?;
                update(opt, &format!("gff{b}.norm_scale"), &mut p.norm_scale, &g.norm_scale)?;
                update(opt, &format!("gff{b}.norm_shift"), &mut p.norm_shift, &g.norm_shift)?;
            }
        }
    }
    Ok(())
}

/// Train `state` on `train` following its strategy. Two-stage strategies run
/// each stage for the full epoch count with a fresh optimizer; when
/// `checkpoint_dir` is given the state after every stage is written there.
pub fn train_classifier(
    train: &DatasetManifest,
    mut state: ClassifierState,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<ClassifierState> {
    config.asl.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training manifest has no records".into()));
    }
    if train.label_space != state.label_space()? {
        return Err(Error::LabelSpaceMismatch);
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    train.validate()?;
    let samples: Vec<Sample> = train
        .records
        .par_iter()
        .map(|r| {
            let img = train.load_image(r)?;
            Ok(Sample {
                input: state.encoder.input_tensor(&img),
                positives: r.positives.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mask = loss_classes(&state, train);
    log::info!(
        "training {} on {} records ({} synthetic)",
        state.strategy,
        samples.len(),
        train.count_provenance(Provenance::Synthetic)
    );
    // A zero learning rate is a dry run: losses are recorded, nothing moves.
    let dry_run = config.learning_rate == 0.0;
    let stages = state.strategy.stages();
    let n_stages = stages.len();
    for (stage, trainable) in stages.into_iter().enumerate() {
        let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
        let visual_trained = trainable.contains(&ParamSet::Encoder) || trainable.contains(&ParamSet::Gff);
        let mode = if trainable.contains(&ParamSet::Gff) && !dry_run {
            NormMode::Train
        } else {
            NormMode::Eval
        };
        // With the visual side frozen, region features never change within the stage.
        let cached: Option<Vec<Vec<Vec<f64>>>> = if visual_trained {
            None
        } else {
            let inputs: Vec<FeatureMap> = samples.iter().map(|s| s.input.clone()).collect();
            let chunks: Vec<Vec<Vec<Vec<f64>>>> = inputs
                .par_chunks(32)
                .map(|c| Ok(encode_batch(&state.encoder, &state.gff, c.to_vec(), NormMode::Eval)?.0))
                .collect::<Result<_>>()?;
            Some(chunks.into_iter().flatten().collect())
        };
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive(config.seed, (stage * 1_000_003 + epoch) as u64)));
            let mut epoch_loss = 0.0;
            for idx in order.chunks(config.batch_size) {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                let cached_batch: Option<Vec<&Vec<Vec<f64>>>> =
                    cached.as_ref().map(|c| idx.iter().map(|&i| &c[i]).collect());
                let (grads, cache) = step(
                    &state,
                    &batch,
                    cached_batch.as_deref(),
                    &trainable,
                    mode,
                    &mask,
                    &config.asl,
                )?;
                if !grads.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step: state.history.len(),
                        detail: format!("stage {stage} epoch {epoch}"),
                    });
                }
                epoch_loss += grads.loss * batch.len() as f64;
                if dry_run {
                    continue;
                }
                apply(&mut state, &grads, &trainable, &mut opt)?;
                if mode == NormMode::Train {
                    if let Some(cache) = &cache {
                        for (p, norm) in state.gff.iter_mut().zip(cache.norm_caches()) {
                            if let (Some(p), Some(norm)) = (p.as_mut(), norm) {
                                update_running_stats(p, norm);
                            }
                        }
                    }
                }
            }
            let loss = epoch_loss / samples.len() as f64;
            log::debug!("stage {stage} epoch {epoch}: loss {loss:.5}");
            state.history.push(EpochRecord { stage, epoch, loss });
        }
        if let Some(dir) = checkpoint_dir {
            let name = if stage + 1 == n_stages {
                "classifier.json".to_string()
            } else {
                format!("classifier.stage{}.json", stage + 1)
            };
            state.save(&dir.join(name))?;
        }
    }
    Ok(state)
}
