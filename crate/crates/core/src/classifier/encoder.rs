//! Toy visual encoder: a convolutional stem, then 3x3 blocks that can carry a
//! fusion branch, then a per-position projection into the text feature space.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gff::{
    branch_backward, gff_forward_batch, norm_backward, BranchCache, GffParams, NormCache, NormMode,
};
use super::tensor::{avg_pool2, avg_pool2_backward, relu, relu_backward, Conv3x3, FeatureMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub input_side: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub stem: Conv3x3,
    pub blocks: Vec<Conv3x3>,
    /// `[feature][channel]`
    pub projection: Vec<f64>,
    pub projection_bias: Vec<f64>,
}

impl VisualEncoder {
    pub fn new(input_side: usize, channels: usize, feature_dim: usize, n_blocks: usize, seed: u64) -> Result<Self> {
        if input_side < 2 || !input_side.is_multiple_of(2) || channels == 0 || feature_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "bad encoder shape: side {input_side}, channels {channels}, features {feature_dim}"
            )));
        }
        let mut rng = seed::rng(seed::derive(seed, 0xE1C));
        let stem = Conv3x3::init(3, channels, &mut rng);
        let blocks = (0..n_blocks).map(|_| Conv3x3::init(channels, channels, &mut rng)).collect();
        let proj = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).expect("positive std");
        Ok(VisualEncoder {
            input_side,
            channels,
            feature_dim,
            stem,
            blocks,
            projection: (0..feature_dim * channels).map(|_| proj.sample(&mut rng)).collect(),
            projection_bias: (0..feature_dim).map(|_| proj.sample(&mut rng)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        VisualEncoder {
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(Conv3x3::zeros_like).collect(),
            projection: vec![0.0; self.projection.len()],
            projection_bias: vec![0.0; self.projection_bias.len()],
            ..self.clone()
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut parts: Vec<&[f64]> = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            parts.push(&b.weight);
            parts.push(&b.bias);
        }
        parts.push(&self.projection);
        parts.push(&self.projection_bias);
        seed::fingerprint_f64(parts)
    }

    pub fn input_tensor(&self, image: &Image) -> FeatureMap {
        let s = self.input_side;
        FeatureMap::from_data(3, s, s, image.to_chw_grid(s)).expect("grid has 3*s*s values")
    }

    pub fn regions_per_image(&self) -> usize {
        (self.input_side / 2).pow(2)
    }

    fn project(&self, map: &FeatureMap) -> Vec<Vec<f64>> {
        let c = self.channels;
        (0..map.positions())
            .map(|p| {
                (0..self.feature_dim)
                    .map(|r| {
                        self.projection_bias[r]
                            + (0..c).map(|ch| self.projection[r * c + ch] * map.channel(ch)[p]).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }
}

struct BlockCache {
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    gff: Option<(Vec<BranchCache>, NormCache)>,
}

pub struct EncoderCache {
    inputs: Vec<FeatureMap>,
    stem_pre: Vec<FeatureMap>,
    blocks: Vec<BlockCache>,
    outputs: Vec<FeatureMap>,
}

impl EncoderCache {
    /// Normalization caches of the fusion branches, by block.
    pub fn norm_caches(&self) -> Vec<Option<&NormCache>> {
        self.blocks.iter().map(|b| b.gff.as_ref().map(|(_, n)| n)).collect()
    }
}

/// Regions `[image][position][feature]` for a batch, plus what backward needs.
pub fn encode_batch(
    enc: &VisualEncoder,
    gff: &[Option<GffParams>],
    inputs: Vec<FeatureMap>,
    mode: NormMode,
) -> Result<(Vec<Vec<Vec<f64>>>, EncoderCache)> {
    if gff.len() != enc.blocks.len() {
        return Err(Error::DimensionMismatch {
            expected: enc.blocks.len(),
            actual: gff.len(),
        });
    }
    let stem_pre: Vec<FeatureMap> = inputs.par_iter().map(|x| enc.stem.forward(x)).collect::<Result<_>>()?;
    let mut xs: Vec<FeatureMap> = stem_pre.iter().map(|p| avg_pool2(&relu(p))).collect();
    let mut blocks = Vec::with_capacity(enc.blocks.len());
    for (conv, site) in enc.blocks.iter().zip(gff) {
        let mut pre: Vec<FeatureMap> = xs.par_iter().map(|x| conv.forward(x)).collect::<Result<_>>()?;
        let gff_cache = match site {
            Some(p) => {
                let (out, branch, norm) = gff_forward_batch(&xs, p, mode)?;
                for (y, g) in pre.iter_mut().zip(&out) {
                    y.add_assign(g);
                }
                Some((branch, norm))
            }
            None => None,
        };
        let next = pre.iter().map(relu).collect();
        blocks.push(BlockCache {
            inputs: std::mem::replace(&mut xs, next),
            pre,
            gff: gff_cache,
        });
    }
    let regions = xs.par_iter().map(|m| enc.project(m)).collect();
    Ok((
        regions,
        EncoderCache {
            inputs,
            stem_pre,
            blocks,
            outputs: xs,
        },
    ))
}

pub struct EncoderGrads {
    pub encoder: VisualEncoder,
    pub gff: Vec<Option<GffParams>>,
}

/// Backpropagate region gradients. The stem is skipped unless `include_stem`.
pub fn encode_backward(
    enc: &VisualEncoder,
    gff: &[Option<GffParams>],
    cache: &EncoderCache,
    d_regions: &[Vec<Vec<f64>>],
    include_stem: bool,
) -> EncoderGrads {
    let mut grads = EncoderGrads {
        encoder: enc.zeros_like(),
        gff: gff.iter().map(|g| g.as_ref().map(GffParams::zeros_like)).collect(),
    };
    let c = enc.channels;
    let d = enc.feature_dim;
    let mut d_maps: Vec<FeatureMap> = Vec::with_capacity(d_regions.len());
    for (out, dr) in cache.outputs.iter().zip(d_regions) {
        let mut dm = FeatureMap::zeros(c, out.height, out.width);
        for (p, g) in dr.iter().enumerate() {
            for r in 0..d {
                grads.encoder.projection_bias[r] += g[r];
                for ch in 0..c {
                    grads.encoder.projection[r * c + ch] += g[r] * out.channel(ch)[p];
                    dm.channel_mut(ch)[p] += enc.projection[r * c + ch] * g[r];
                }
            }
        }
        d_maps.push(dm);
    }
    for (b, block) in cache.blocks.iter().enumerate().rev() {
        let d_pre: Vec<FeatureMap> = block.pre.iter().zip(&d_maps).map(|(p, g)| relu_backward(p, g)).collect();
        let conv = &enc.blocks[b];
        let conv_parts: Vec<(FeatureMap, Conv3x3)> = block
            .inputs
            .par_iter()
            .zip(&d_pre)
            .map(|(x, g)| {
                let mut cg = conv.zeros_like();
                let dx = conv.backward(x, g, &mut cg);
                (dx, cg)
            })
            .collect();
        let mut dxs = Vec::with_capacity(conv_parts.len());
        for (dx, cg) in conv_parts {
            for (a, v) in grads.encoder.blocks[b].weight.iter_mut().zip(&cg.weight) {
                *a += v;
            }
            for (a, v) in grads.encoder.blocks[b].bias.iter_mut().zip(&cg.bias) {
                *a += v;
            }
            dxs.push(dx);
        }
        if let (Some(p), Some((branch, norm)), Some(g)) = (&gff[b], &block.gff, grads.gff[b].as_mut()) {
            let d_branch = norm_backward(p, norm, &d_pre, g);
            for ((x, bc), (db, dx)) in block.inputs.iter().zip(branch).zip(d_branch.iter().zip(dxs.iter_mut())) {
                let dgx = branch_backward(x, p, bc, db, g);
                dx.add_assign(&dgx);
            }
        }
        d_maps = dxs;
    }
    if include_stem {
        for ((x, pre), d_pooled) in cache.inputs.iter().zip(&cache.stem_pre).zip(&d_maps) {
            let d_act = avg_pool2_backward((pre.channels, pre.height, pre.width), d_pooled);
            let d_pre = relu_backward(pre, &d_act);
            enc.stem.backward(x, &d_pre, &mut grads.encoder.stem);
        }
    }
    grads
}
