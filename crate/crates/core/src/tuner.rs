//! Asymmetric loss, and fine-tuning of a generator's text encoder so that its
//! images score as class-discriminative under the Grouping Softmax.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{generate, DifferentiableGenerator, TextEncoder, TextToImageBackend};
use crate::data::write_file;
use crate::error::{Error, Result};
use crate::filter::{grouping_softmax, grouping_softmax_backward, qualify, Discriminator, QualificationPolicy};
use crate::optim::AdamW;
use crate::prompts::PromptRecord;
use crate::seed;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AslParams {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    /// Probability shift applied to negatives before focusing.
    pub margin: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        AslParams {
            gamma_plus: 0.0,
            gamma_minus: 4.0,
            margin: 0.0,
        }
    }
}

impl AslParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_plus >= 0.0
            && self.gamma_minus >= 0.0
            && (0.0..1.0).contains(&self.margin)
            && self.gamma_plus.is_finite()
            && self.gamma_minus.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid ASL parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AslOutput {
    pub loss: f64,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

// x^g with the convention 0^0 = 1.
fn pow(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

// g * x^(g-1), zero when g = 0 and taken as zero at x = 0.
fn dpow(x: f64, g: f64) -> f64 {
    if g == 0.0 || x == 0.0 {
        0.0
    } else {
        g * x.powf(g - 1.0)
    }
}

/// Minimized asymmetric loss over positive and negative probabilities.
/// Inputs are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is zero where clamping is active.
pub fn asl_loss(pos: &[f64], neg: &[f64], params: &AslParams) -> Result<AslOutput> {
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::EmptyInput("asl_loss needs at least one probability".into()));
    }
    if let Some(bad) = pos.iter().chain(neg).find(|p| !p.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("probability {bad}"),
        });
    }
    let clamp = |p: f64| (p.clamp(PROB_EPS, 1.0 - PROB_EPS), p > PROB_EPS && p < 1.0 - PROB_EPS);
    let mut loss = 0.0;
    let mut grad_pos = Vec::with_capacity(pos.len());
    for &raw in pos {
        let (p, live) = clamp(raw);
        let g = params.gamma_plus;
        loss -= pow(1.0 - p, g) * p.ln();
        let d = dpow(1.0 - p, g) * p.ln() - pow(1.0 - p, g) / p;
        grad_pos.push(if live { d } else { 0.0 });
    }
    let mut grad_neg = Vec::with_capacity(neg.len());
    for &raw in neg {
        let (p, live) = clamp(raw);
        let g = params.gamma_minus;
        let pm = (p - params.margin).max(0.0);
        loss -= pow(pm, g) * (1.0 - pm).ln();
        let d = if pm > 0.0 {
            -dpow(pm, g) * (1.0 - pm).ln() + pow(pm, g) / (1.0 - pm)
        } else {
            0.0
        };
        grad_neg.push(if live { d } else { 0.0 });
    }
    Ok(AslOutput {
        loss,
        grad_pos,
        grad_neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunerConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Prompts per step; `None` uses every prompt each step.
    pub batch_size: Option<usize>,
    pub asl: AslParams,
    pub seed: u64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            steps: 200,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            batch_size: None,
            asl: AslParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerState {
    pub text_encoder: TextEncoder,
    pub frozen_fingerprint: String,
    pub step_count: usize,
    pub learning_rate: f64,
    pub optimizer: AdamW,
    pub losses: Vec<f64>,
}

impl TunerState {
    pub fn new(stack: &dyn DifferentiableGenerator, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !stack.capabilities().supports_text_encoder_gradients {
            return Err(Error::NonDifferentiableBackend);
        }
        Ok(TunerState {
            text_encoder: stack.text_encoder().clone(),
            frozen_fingerprint: stack.frozen_fingerprint(),
            step_count: 0,
            learning_rate,
            optimizer: AdamW::new(learning_rate, weight_decay),
            losses: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn positions(names: &[String], categories: &[String]) -> Result<Vec<usize>> {
    categories
        .iter()
        .map(|c| {
            names.iter().position(|n| n == c).ok_or_else(|| Error::UnknownCategory {
                name: c.clone(),
                line: None,
            })
        })
        .collect()
}

/// Loss and per-token gradients for one prompt under the current encoder.
fn prompt_loss(
    stack: &dyn DifferentiableGenerator,
    encoder: &TextEncoder,
    names: &[String],
    prompt: &PromptRecord,
    asl: &AslParams,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let positives = positions(names, &prompt.categories)?;
    let text = prompt.text();
    let z = encoder.encode(text);
    let u = stack.similarity_forward(&z)?;
    let (v_p, v_n) = grouping_softmax(&u, &positives)?;
    let out = asl_loss(&v_p, &v_n, asl)?;
    let grad_u = grouping_softmax_backward(&u, &positives, &out.grad_pos, &out.grad_neg)?;
    let grad_z = stack.similarity_backward(&z, &grad_u)?;
    Ok((out.loss, encoder.backward(text, &grad_z)))
}

/// One optimizer step on the text encoder over a batch of prompts; returns the mean loss.
pub fn tuner_step(
    stack: &dyn DifferentiableGenerator,
    prompts: &[&PromptRecord],
    mut state: TunerState,
    asl: &AslParams,
) -> Result<(TunerState, f64)> {
    if !stack.capabilities().supports_text_encoder_gradients {
        return Err(Error::NonDifferentiableBackend);
    }
    if prompts.is_empty() {
        return Err(Error::EmptyInput("tuner batch".into()));
    }
    if stack.frozen_fingerprint() != state.frozen_fingerprint {
        return Err(Error::InvalidConfig(
            "tuner state belongs to a different generator".into(),
        ));
    }
    let names = stack.modelled_categories();
    let results: Vec<(f64, BTreeMap<String, Vec<f64>>)> = prompts
        .par_iter()
        .map(|p| prompt_loss(stack, &state.text_encoder, &names, p, asl))
        .collect::<Result<_>>()?;
    let scale = 1.0 / prompts.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, g) in results {
        loss += l * scale;
        for (token, grad) in g {
            let acc = grads.entry(token).or_insert_with(|| vec![0.0; grad.len()]);
            for (a, v) in acc.iter_mut().zip(grad) {
                *a += v * scale;
            }
        }
    }
    if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step_count,
            detail: format!("loss {loss} over prompts {:?}", prompts.iter().map(|p| &p.id).collect::<Vec<_>>()),
        });
    }
    state.optimizer.lr = state.learning_rate;
    for (token, grad) in grads {
        let mut value = state.text_encoder.embedding(&token);
        state.optimizer.update(&format!("token:{token}"), &mut value, &grad)?;
        state.text_encoder.set_embedding(&token, value)?;
    }
    state.step_count += 1;
    state.losses.push(loss);
    Ok((state, loss))
}

/// Run `config.steps` tuner steps, starting from `state` or a fresh one.
pub fn finetune(
    stack: &dyn DifferentiableGenerator,
    prompts: &[PromptRecord],
    config: &TunerConfig,
    state: Option<TunerState>,
) -> Result<TunerState> {
    config.asl.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyInput("no prompts to tune on".into()));
    }
    let mut state = match state {
        Some(s) => s,
        None => TunerState::new(stack, config.learning_rate, config.weight_decay)?,
    };
    let start = state.step_count;
    for step in start..start + config.steps {
        let batch: Vec<&PromptRecord> = match config.batch_size {
            Some(b) if b < prompts.len() => {
                let mut rng = seed::rng(seed::derive(config.seed, step as u64));
                sample(&mut rng, prompts.len(), b.max(1))
                    .into_iter()
                    .map(|i| &prompts[i])
                    .collect()
            }
            _ => prompts.iter().collect(),
        };
        let (next, loss) = tuner_step(stack, &batch, state, &config.asl)?;
        state = next;
        if step % 50 == 0 {
            log::info!("tuner step {step}: loss {loss:.5}");
        }
    }
    Ok(state)
}

/// Fraction of generations accepted by the discriminator, one generation per
/// sample with prompts taken round-robin.
pub fn qualified_rate(
    generator: &dyn TextToImageBackend,
    discriminator: &Discriminator,
    policy: &QualificationPolicy,
    prompts: &[PromptRecord],
    n_samples: usize,
    resolution: u32,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("qualified_rate needs n_samples >= 1".into()));
    }
    if prompts.is_empty() {
        return Err(Error::EmptyInput("qualified_rate needs prompts".into()));
    }
    let accepted: Vec<bool> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let prompt = &prompts[i % prompts.len()];
            let positives = positions(discriminator.labels(), &prompt.categories)?;
            let image = generate(generator, prompt.text(), resolution, seed::derive(seed, i as u64))?;
            let report = discriminator.score(&image, &positives)?;
            Ok(qualify(&report, policy).accepted)
        })
        .collect::<Result<_>>()?;
    Ok(accepted.iter().filter(|&&a| a).count() as f64 / n_samples as f64)
}
