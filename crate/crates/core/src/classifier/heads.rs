//! Region-to-prompt cosine similarities, class-specific region aggregation,
//! and the positive-vs-negative binary probability.

use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[region][class]` cosine similarities against positive and negative text features.
pub fn region_similarities(
    regions: &[Vec<f64>],
    positive_text: &[Vec<f64>],
    negative_text: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if regions.is_empty() {
        return Err(Error::EmptyInput("no regions".into()));
    }
    if positive_text.len() != negative_text.len() {
        return Err(Error::DimensionMismatch {
            expected: positive_text.len(),
            actual: negative_text.len(),
        });
    }
    let dim = regions[0].len();
    let all = regions.iter().chain(positive_text).chain(negative_text);
    let mut norms = Vec::new();
    for v in all {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        norms.push(n);
    }
    let (rn, rest) = norms.split_at(regions.len());
    let (pn, nn) = rest.split_at(positive_text.len());
    let sims = |texts: &[Vec<f64>], tn: &[f64]| -> Vec<Vec<f64>> {
        regions
            .iter()
            .zip(rn)
            .map(|(r, a)| texts.iter().zip(tn).map(|(t, b)| dot(r, t) / (a * b)).collect())
            .collect()
    };
    Ok((sims(positive_text, pn), sims(negative_text, nn)))
}

/// Per class: softmax weights over regions from the positive similarities, applied to both.
pub fn aggregate_regions(s_plus: &[Vec<f64>], s_minus: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if s_plus.is_empty() || s_plus.len() != s_minus.len() {
        return Err(Error::DimensionMismatch {
            expected: s_plus.len(),
            actual: s_minus.len(),
        });
    }
    let q = s_plus[0].len();
    let mut agg_plus = vec![0.0; q];
    let mut agg_minus = vec![0.0; q];
    for c in 0..q {
        let w = region_weights(s_plus, c);
        agg_plus[c] = w.iter().zip(s_plus).map(|(w, row)| w * row[c]).sum();
        agg_minus[c] = w.iter().zip(s_minus).map(|(w, row)| w * row[c]).sum();
    }
    Ok((agg_plus, agg_minus))
}

fn region_weights(s_plus: &[Vec<f64>], class: usize) -> Vec<f64> {
    let max = s_plus.iter().map(|r| r[class]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s_plus.iter().map(|r| (r[class] - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `exp(S+/tau) / (exp(S+/tau) + exp(S-/tau))`, written as a logistic for stability.
pub fn binary_probability(s_plus: f64, s_minus: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    Ok(logistic((s_plus - s_minus) / tau))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct HeadForward {
    pub s_plus: Vec<Vec<f64>>,
    pub s_minus: Vec<Vec<f64>>,
    pub agg_plus: Vec<f64>,
    pub agg_minus: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn head_forward(
    regions: &[Vec<f64>],
    positive_text: &[Vec<f64>],
    negative_text: &[Vec<f64>],
    tau: f64,
) -> Result<HeadForward> {
    let (s_plus, s_minus) = region_similarities(regions, positive_text, negative_text)?;
    let (agg_plus, agg_minus) = aggregate_regions(&s_plus, &s_minus)?;
    let probs = agg_plus
        .iter()
        .zip(&agg_minus)
        .map(|(p, m)| binary_probability(*p, *m, tau))
        .collect::<Result<_>>()?;
    Ok(HeadForward {
        s_plus,
        s_minus,
        agg_plus,
        agg_minus,
        probs,
    })
}

/// Gradients of a loss w.r.t. the head inputs given dL/dp per class.
pub struct HeadGrads {
    pub regions: Vec<Vec<f64>>,
    pub positive_text: Vec<Vec<f64>>,
    pub negative_text: Vec<Vec<f64>>,
}

// d cos(a, b) / da scaled by g, accumulated into out.
fn cosine_grad_into(out: &mut [f64], a: &[f64], b: &[f64], cos: f64, g: f64) {
    let (na, nb) = (norm(a), norm(b));
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += g * (y / (na * nb) - cos * x / (na * na));
    }
}

pub fn head_backward(
    regions: &[Vec<f64>],
    positive_text: &[Vec<f64>],
    negative_text: &[Vec<f64>],
    fwd: &HeadForward,
    d_probs: &[f64],
    tau: f64,
) -> HeadGrads {
    let dim = regions[0].len();
    let q = positive_text.len();
    let mut grads = HeadGrads {
        regions: vec![vec![0.0; dim]; regions.len()],
        positive_text: vec![vec![0.0; dim]; q],
        negative_text: vec![vec![0.0; dim]; q],
    };
    for c in 0..q {
        let p = fwd.probs[c];
        let d_logit = d_probs[c] * p * (1.0 - p) / tau;
        let (g_plus, g_minus) = (d_logit, -d_logit);
        let w = region_weights(&fwd.s_plus, c);
        for (i, region) in regions.iter().enumerate() {
            let sp = fwd.s_plus[i][c];
            let sm = fwd.s_minus[i][c];
            let ds_plus = g_plus * w[i] * (1.0 + sp - fwd.agg_plus[c]) + g_minus * w[i] * (sm - fwd.agg_minus[c]);
            let ds_minus = g_minus * w[i];
            cosine_grad_into(&mut grads.regions[i], region, &positive_text[c], sp, ds_plus);
            cosine_grad_into(&mut grads.positive_text[c], &positive_text[c], region, sp, ds_plus);
            cosine_grad_into(&mut grads.regions[i], region, &negative_text[c], sm, ds_minus);
            cosine_grad_into(&mut grads.negative_text[c], &negative_text[c], region, sm, ds_minus);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(rows: usize, dim: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
        (0..rows).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn cosine_cases() {
        let r = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        let pos = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let neg = vec![vec![2.0, 0.0], vec![1.0, 0.0]];
        let (sp, sm) = region_similarities(&r, &pos, &neg).unwrap();
        assert!((sp[0][0] - 1.0).abs() < 1e-15);
        assert_eq!(sm[1][0], 0.0);
        let expect = (3.0 - 2.0) / (5f64.sqrt() * 10f64.sqrt());
        assert!((sp[0][1] - expect).abs() < 1e-15);
        assert!((sp[1][1] + 1.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            region_similarities(&[vec![0.0, 0.0]], &pos, &neg),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn aggregation_degenerate_cases() {
        let (p, m) = aggregate_regions(&[vec![0.3]], &[vec![-0.1]]).unwrap();
        assert_eq!((p[0], m[0]), (0.3, -0.1));
        let (p, m) = aggregate_regions(&[vec![0.2], vec![0.2]], &[vec![0.4], vec![0.4]]).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-15 && (m[0] - 0.4).abs() < 1e-15);
        let sp = vec![vec![20.5], vec![0.5], vec![0.1]];
        let sm = vec![vec![0.0], vec![1.0], vec![1.0]];
        let (p, _) = aggregate_regions(&sp, &sm).unwrap();
        assert!((p[0] - 20.5).abs() < 1e-6);
    }

    #[test]
    fn probability_closed_forms() {
        assert_eq!(binary_probability(0.3, 0.3, 0.07).unwrap(), 0.5);
        let tau = 0.07;
        let p = binary_probability(0.1 + tau * 9f64.ln(), 0.1, tau).unwrap();
        assert!((p - 0.9).abs() < 1e-12);
        assert!(binary_probability(0.5, 0.1, 1e-4).unwrap() > 1.0 - 1e-12);
        assert!(binary_probability(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn head_gradients_match_central_differences() {
        // Two classes, three-by-three regions.
        let mut rng = seed::rng(21);
        let regions = random(9, 4, &mut rng);
        let pos = random(2, 4, &mut rng);
        let neg = random(2, 4, &mut rng);
        let d_probs = vec![0.7, -1.2];
        let tau = 0.5;
        let loss = |r: &[Vec<f64>], p: &[Vec<f64>], n: &[Vec<f64>]| -> f64 {
            let f = head_forward(r, p, n, tau).unwrap();
            f.probs.iter().zip(&d_probs).map(|(a, b)| a * b).sum()
        };
        let fwd = head_forward(&regions, &pos, &neg, tau).unwrap();
        let g = head_backward(&regions, &pos, &neg, &fwd, &d_probs, tau);
        let h = 1e-6;
        let check = |num: f64, ana: f64| {
            assert!((num - ana).abs() / num.abs().max(1e-5) < 1e-4, "{num} vs {ana}");
        };
        for i in 0..9 {
            for d in 0..4 {
                let (mut a, mut b) = (regions.clone(), regions.clone());
                a[i][d] += h;
                b[i][d] -= h;
                check((loss(&a, &pos, &neg) - loss(&b, &pos, &neg)) / (2.0 * h), g.regions[i][d]);
            }
        }
        for c in 0..2 {
            for d in 0..4 {
                let (mut a, mut b) = (pos.clone(), pos.clone());
                a[c][d] += h;
                b[c][d] -= h;
                check((loss(&regions, &a, &neg) - loss(&regions, &b, &neg)) / (2.0 * h), g.positive_text[c][d]);
                let (mut a, mut b) = (neg.clone(), neg.clone());
                a[c][d] += h;
                b[c][d] -= h;
                check((loss(&regions, &pos, &a) - loss(&regions, &pos, &b)) / (2.0 * h), g.negative_text[c][d]);
            }
        }
    }
}
