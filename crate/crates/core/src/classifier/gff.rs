//! Global feature fusion: a branch parallel to a 3x3 convolution that pools
//! multi-head, spatially attended global contexts and redistributes them with
//! per-position gates. Its output passes through a batch-style normalization
//! whose scale and shift start at zero, so a freshly inserted branch adds exactly
//! nothing to the pretrained path.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Conv3x3, FeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GffParams {
    pub channels: usize,
    pub heads: usize,
    /// Average over heads instead of summing.
    pub head_mean: bool,
    /// `[head][2C]` attention-logit transform.
    pub attn: Vec<f64>,
    /// `[head][2C]` gate transform.
    pub gate: Vec<f64>,
    pub gate_bias: Vec<f64>,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl GffParams {
    pub fn init<R: Rng>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || channels == 0 {
            return Err(Error::InvalidConfig("gff needs at least one head and channel".into()));
        }
        let std = (1.0 / (2 * channels) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(rng)).collect() };
        Ok(GffParams {
            channels,
            heads,
            head_mean: false,
            attn: draw(heads * 2 * channels),
            gate: draw(heads * 2 * channels),
            gate_bias: vec![0.0; heads],
            norm_scale: vec![0.0; channels],
            norm_shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Zeroed container with the same shapes, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        GffParams {
            attn: z(&self.attn),
            gate: z(&self.gate),
            gate_bias: z(&self.gate_bias),
            norm_scale: z(&self.norm_scale),
            norm_shift: z(&self.norm_shift),
            running_mean: z(&self.running_mean),
            running_var: z(&self.running_var),
            ..self.clone()
        }
    }

    fn check(&self, f: &FeatureMap) -> Result<()> {
        if f.channels != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                actual: f.channels,
            });
        }
        if f.positions() == 0 {
            return Err(Error::EmptyInput("gff input has no positions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are reported for the caller to fold in.
    Train,
    /// Running statistics.
    Eval,
}

/// Intermediate values of the pre-normalization branch for one image.
#[derive(Debug, Clone)]
pub struct BranchCache {
    /// Concatenated `[F; broadcast global]`, `[2C][P]`.
    pub joined: Vec<f64>,
    /// Softmax attention over positions, `[head][P]`.
    pub attention: Vec<f64>,
    /// Sigmoid gates, `[head][P]`.
    pub gates: Vec<f64>,
    /// Head contexts, `[head][C]`.
    pub contexts: Vec<f64>,
}

/// Steps before normalization: global pooling, joint 1x1 transforms, spatial
/// softmax attention, gated redistribution of the head contexts.
pub fn branch_forward(f: &FeatureMap, p: &GffParams) -> Result<(FeatureMap, BranchCache)> {
    p.check(f)?;
    let (c, np, h) = (f.channels, f.positions(), p.heads);
    let mut joined = vec![0.0; 2 * c * np];
    for ch in 0..c {
        let src = f.channel(ch);
        let mean = src.iter().sum::<f64>() / np as f64;
        joined[ch * np..(ch + 1) * np].copy_from_slice(src);
        joined[(c + ch) * np..(c + ch + 1) * np].iter_mut().for_each(|v| *v = mean);
    }
    let project = |w: &[f64], t: usize, pos: usize| -> f64 {
        (0..2 * c).map(|k| w[t * 2 * c + k] * joined[k * np + pos]).sum()
    };
    let mut attention = vec![0.0; h * np];
    let mut gates = vec![0.0; h * np];
    for t in 0..h {
        let logits: Vec<f64> = (0..np).map(|pos| project(&p.attn, t, pos)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for pos in 0..np {
            attention[t * np + pos] = exps[pos] / z;
            let g = project(&p.gate, t, pos) + p.gate_bias[t];
            gates[t * np + pos] = 1.0 / (1.0 + (-g).exp());
        }
    }
    let mut contexts = vec![0.0; h * c];
    for t in 0..h {
        for ch in 0..c {
            let src = f.channel(ch);
            contexts[t * c + ch] = (0..np).map(|pos| attention[t * np + pos] * src[pos]).sum();
        }
    }
    let head_weight = if p.head_mean { 1.0 / h as f64 } else { 1.0 };
    let mut out = FeatureMap::zeros(c, f.height, f.width);
    for ch in 0..c {
        let dst = out.channel_mut(ch);
        for (pos, d) in dst.iter_mut().enumerate() {
            *d = head_weight * (0..h).map(|t| gates[t * np + pos] * contexts[t * c + ch]).sum::<f64>();
        }
    }
    Ok((
        out,
        BranchCache {
            joined,
            attention,
            gates,
            contexts,
        },
    ))
}

/// Accumulates transform gradients into `grads`; returns dL/dF.
pub fn branch_backward(
    f: &FeatureMap,
    p: &GffParams,
    cache: &BranchCache,
    d_out: &FeatureMap,
    grads: &mut GffParams,
) -> FeatureMap {
    let (c, np, h) = (f.channels, f.positions(), p.heads);
    let head_weight = if p.head_mean { 1.0 / h as f64 } else { 1.0 };
    let mut d_gates = vec![0.0; h * np];
    let mut d_contexts = vec![0.0; h * c];
    for t in 0..h {
        for pos in 0..np {
            d_gates[t * np + pos] = head_weight
                * (0..c)
                    .map(|ch| d_out.channel(ch)[pos] * cache.contexts[t * c + ch])
                    .sum::<f64>();
        }
        for ch in 0..c {
            let g = d_out.channel(ch);
            d_contexts[t * c + ch] =
                head_weight * (0..np).map(|pos| g[pos] * cache.gates[t * np + pos]).sum::<f64>();
        }
    }
    let mut df = FeatureMap::zeros(c, f.height, f.width);
    let mut d_joined = vec![0.0; 2 * c * np];
    for t in 0..h {
        let a = &cache.attention[t * np..(t + 1) * np];
        // Context pooling: c_t = sum_p A_t(p) F(:, p).
        let d_attn: Vec<f64> = (0..np)
            .map(|pos| (0..c).map(|ch| d_contexts[t * c + ch] * f.channel(ch)[pos]).sum())
            .collect();
        for ch in 0..c {
            let dc = d_contexts[t * c + ch];
            for (pos, d) in df.channel_mut(ch).iter_mut().enumerate() {
                *d += a[pos] * dc;
            }
        }
        let dot: f64 = a.iter().zip(&d_attn).map(|(x, y)| x * y).sum();
        for pos in 0..np {
            let d_logit_a = a[pos] * (d_attn[pos] - dot);
            let b = cache.gates[t * np + pos];
            let d_logit_g = d_gates[t * np + pos] * b * (1.0 - b);
            grads.gate_bias[t] += d_logit_g;
            for k in 0..2 * c {
                let x = cache.joined[k * np + pos];
                grads.attn[t * 2 * c + k] += d_logit_a * x;
                grads.gate[t * 2 * c + k] += d_logit_g * x;
                d_joined[k * np + pos] += p.attn[t * 2 * c + k] * d_logit_a + p.gate[t * 2 * c + k] * d_logit_g;
            }
        }
    }
    for ch in 0..c {
        let d_global: f64 = d_joined[(c + ch) * np..(c + ch + 1) * np].iter().sum::<f64>() / np as f64;
        for (pos, d) in df.channel_mut(ch).iter_mut().enumerate() {
            *d += d_joined[ch * np + pos] + d_global;
        }
    }
    df
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Vec<FeatureMap>,
    pub inv_std: Vec<f64>,
    pub mode: NormMode,
    /// Batch mean and unbiased variance per channel (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

pub fn norm_forward(xs: &[FeatureMap], p: &GffParams, mode: NormMode) -> (Vec<FeatureMap>, NormCache) {
    let c = p.channels;
    let (mean, var, batch_var) = match mode {
        NormMode::Eval => (p.running_mean.clone(), p.running_var.clone(), Vec::new()),
        NormMode::Train => {
            let count = xs.iter().map(FeatureMap::positions).sum::<usize>() as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                mean[ch] = xs.iter().flat_map(|x| x.channel(ch)).sum::<f64>() / count;
                var[ch] = xs
                    .iter()
                    .flat_map(|x| x.channel(ch))
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>()
                    / count;
            }
            let unbiased = var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect();
            (mean, var, unbiased)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(xs.len());
    let mut outputs = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xh = x.clone();
        let mut y = x.clone();
        for ch in 0..c {
            for (n, o) in xh.channel_mut(ch).iter_mut().zip(y.channel_mut(ch)) {
                *n = (*n - mean[ch]) * inv_std[ch];
                *o = p.norm_scale[ch] * *n + p.norm_shift[ch];
            }
        }
        normalized.push(xh);
        outputs.push(y);
    }
    let batch_mean = if mode == NormMode::Train { mean } else { Vec::new() };
    (
        outputs,
        NormCache {
            normalized,
            inv_std,
            mode,
            batch_mean,
            batch_var,
        },
    )
}

/// Accumulates scale/shift gradients into `grads`; returns dL/dx per image.
pub fn norm_backward(p: &GffParams, cache: &NormCache, dys: &[FeatureMap], grads: &mut GffParams) -> Vec<FeatureMap> {
    let c = p.channels;
    let mut dxs: Vec<FeatureMap> = dys.to_vec();
    for ch in 0..c {
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        let mut count = 0.0;
        for (dy, xh) in dys.iter().zip(&cache.normalized) {
            for (g, n) in dy.channel(ch).iter().zip(xh.channel(ch)) {
                grads.norm_scale[ch] += g * n;
                grads.norm_shift[ch] += g;
                let dxh = g * p.norm_scale[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * n;
                count += 1.0;
            }
        }
        let inv = cache.inv_std[ch];
        for ((dx, dy), xh) in dxs.iter_mut().zip(dys).zip(&cache.normalized) {
            for ((d, g), n) in dx.channel_mut(ch).iter_mut().zip(dy.channel(ch)).zip(xh.channel(ch)) {
                let dxh = g * p.norm_scale[ch];
                *d = match cache.mode {
                    NormMode::Eval => dxh * inv,
                    NormMode::Train => inv * (dxh - sum_dxh / count - n * sum_dxh_xh / count),
                };
            }
        }
    }
    dxs
}

/// Fold batch statistics into the running estimates.
pub fn update_running_stats(p: &mut GffParams, cache: &NormCache) {
    if cache.mode != NormMode::Train {
        return;
    }
    let m = p.momentum;
    for ch in 0..p.channels {
        p.running_mean[ch] = (1.0 - m) * p.running_mean[ch] + m * cache.batch_mean[ch];
        p.running_var[ch] = (1.0 - m) * p.running_var[ch] + m * cache.batch_var[ch];
    }
}

/// Full branch over a batch.
pub fn gff_forward_batch(
    fs: &[FeatureMap],
    p: &GffParams,
    mode: NormMode,
) -> Result<(Vec<FeatureMap>, Vec<BranchCache>, NormCache)> {
    let mut pre = Vec::with_capacity(fs.len());
    let mut caches = Vec::with_capacity(fs.len());
    for f in fs {
        let (o, cache) = branch_forward(f, p)?;
        pre.push(o);
        caches.push(cache);
    }
    let (out, norm) = norm_forward(&pre, p, mode);
    Ok((out, caches, norm))
}

/// Single-image branch in evaluation mode.
pub fn gff_forward(f: &FeatureMap, p: &GffParams) -> Result<FeatureMap> {
    let (mut out, _, _) = gff_forward_batch(std::slice::from_ref(f), p, NormMode::Eval)?;
    Ok(out.remove(0))
}

/// Convolution plus fusion branch.
pub fn fuse_layer(f: &FeatureMap, conv: &Conv3x3, p: &GffParams) -> Result<FeatureMap> {
    let mut y = conv.forward(f)?;
    let g = gff_forward(f, p)?;
    if !y.same_shape(&g) {
        return Err(Error::DimensionMismatch {
            expected: y.data.len(),
            actual: g.data.len(),
        });
    }
    y.add_assign(&g);
    Ok(y)
}
