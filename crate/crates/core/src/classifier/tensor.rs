//! Channel-major feature maps and the handful of layers the toy visual encoder needs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch {
                expected: channels * height * width,
                actual: data.len(),
            });
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.positions();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.positions();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let std = (2.0 / (9 * in_channels) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Conv3x3 {
            in_channels,
            out_channels,
            weight: (0..out_channels * in_channels * 9).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv3x3 {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..*self
        }
    }

    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.channels != self.in_channels {
            return Err(Error::DimensionMismatch {
                expected: self.in_channels,
                actual: x.channels,
            });
        }
        let (h, w) = (x.height, x.width);
        let mut y = FeatureMap::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let out = y.channel_mut(o);
            out.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let inp = x.channel(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.w(o, i, ky, kx);
                        for yy in 0..h {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                out[yy * w + xx] += k * inp[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads`; returns dL/dx.
    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grads: &mut Conv3x3) -> FeatureMap {
        let (h, w) = (x.height, x.width);
        let mut dx = FeatureMap::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            let g = dy.channel(o);
            grads.bias[o] += g.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let inp = x.channel(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((o * self.in_channels + i) * 3 + ky) * 3 + kx;
                        let k = self.weight[widx];
                        let mut dw = 0.0;
                        let dxi = dx.channel_mut(i);
                        for yy in 0..h {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let s = sy as usize * w + sx as usize;
                                dw += g[yy * w + xx] * inp[s];
                                dxi[s] += g[yy * w + xx] * k;
                            }
                        }
                        grads.weight[widx] += dw;
                    }
                }
            }
        }
        dx
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        ..x.clone()
    }
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &FeatureMap, dy: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        ..dy.clone()
    }
}

/// Non-overlapping 2x2 average pooling.
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut y = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for yy in 0..h {
            for xx in 0..w {
                let s = |dy: usize, dx: usize| src[(2 * yy + dy) * x.width + 2 * xx + dx];
                dst[yy * w + xx] = 0.25 * (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1));
            }
        }
    }
    y
}

pub fn avg_pool2_backward(input_shape: (usize, usize, usize), dy: &FeatureMap) -> FeatureMap {
    let (c, h, w) = input_shape;
    let mut dx = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let g = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for yy in 0..h {
            for xx in 0..w {
                dst[yy * w + xx] = 0.25 * g[(yy / 2) * dy.width + xx / 2];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_map(c: usize, h: usize, w: usize, s: u64) -> FeatureMap {
        let mut rng = seed::rng(s);
        FeatureMap::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = seed::rng(1);
        let conv = Conv3x3::init(2, 3, &mut rng);
        let x = random_map(2, 4, 5, 2);
        let y = conv.forward(&x).unwrap();
        let (o, yy, xx) = (1, 0, 4);
        let mut expect = conv.bias[o];
        for i in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                        expect += conv.w(o, i, ky, kx) * x.channel(i)[sy as usize * 5 + sx as usize];
                    }
                }
            }
        }
        assert!((y.channel(o)[yy * 5 + xx] - expect).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_matches_central_differences() {
        let mut rng = seed::rng(3);
        let conv = Conv3x3::init(2, 2, &mut rng);
        let x = random_map(2, 3, 3, 4);
        let dy = random_map(2, 3, 3, 5);
        let mut grads = conv.zeros_like();
        let dx = conv.backward(&x, &dy, &mut grads);
        let loss = |c: &Conv3x3, x: &FeatureMap| -> f64 {
            c.forward(x).unwrap().data.iter().zip(&dy.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [0, 7, 20, 35] {
            let (mut p, mut m) = (conv.clone(), conv.clone());
            p.weight[idx] += h;
            m.weight[idx] -= h;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((num - grads.weight[idx]).abs() < 1e-7);
        }
        for idx in [0, 4, 17] {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[idx] += h;
            m.data[idx] -= h;
            let num = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((num - dx.data[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_averages_and_spreads_gradient() {
        let x = FeatureMap::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(avg_pool2(&x).data, vec![3.0]);
        let dy = FeatureMap::from_data(1, 1, 1, vec![4.0]).unwrap();
        assert_eq!(avg_pool2_backward((1, 2, 2), &dy).data, vec![1.0; 4]);
    }
}
