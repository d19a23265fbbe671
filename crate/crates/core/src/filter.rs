//! The discriminator: cosine similarities between an image and category names,
//! Grouping Softmax over them, and the qualification decision.
//!
//! Grouping Softmax pairs every positive similarity with the full set of
//! negatives and normalizes each group on its own, so co-occurring positives do
//! not compete for probability mass. Negative probabilities are averaged over
//! the groups.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{embed_image, embed_text, VisionLanguageEmbedder};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Names of the scored categories, in the order of `u`.
    pub labels: Vec<String>,
    pub u: Vec<f64>,
    pub positives_idx: Vec<usize>,
    pub v_p: Vec<f64>,
    pub v_n: Vec<f64>,
}

impl SimilarityReport {
    pub fn new(labels: Vec<String>, u: Vec<f64>, positives_idx: Vec<usize>) -> Result<Self> {
        if labels.len() != u.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                actual: u.len(),
            });
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::Backend("non-finite similarity".into()));
        }
        let (v_p, v_n) = grouping_softmax(&u, &positives_idx)?;
        Ok(SimilarityReport {
            labels,
            u,
            positives_idx,
            v_p,
            v_n,
        })
    }

    /// Indices of the negatives, in the order of `v_n`.
    pub fn negatives_idx(&self) -> Vec<usize> {
        negatives(self.u.len(), &self.positives_idx)
    }
}

fn negatives(m: usize, positives: &[usize]) -> Vec<usize> {
    (0..m).filter(|i| !positives.contains(i)).collect()
}

fn check_positives(m: usize, positives: &[usize]) -> Result<()> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("positive index list".into()));
    }
    let mut seen = BTreeSet::new();
    for &p in positives {
        if p >= m {
            return Err(Error::IndexOutOfRange { index: p, len: m });
        }
        if !seen.insert(p) {
            return Err(Error::DuplicateIndex(p));
        }
    }
    Ok(())
}

/// Per-group softmax probabilities: for each positive, `[p, n_1 .. n_k]`.
fn group_probabilities(u: &[f64], positives: &[usize], negs: &[usize]) -> Vec<(f64, Vec<f64>)> {
    positives
        .iter()
        .map(|&p| {
            let max = negs.iter().map(|&n| u[n]).fold(u[p], f64::max);
            let ep = (u[p] - max).exp();
            let en: Vec<f64> = negs.iter().map(|&n| (u[n] - max).exp()).collect();
            let z = ep + en.iter().sum::<f64>();
            (ep / z, en.into_iter().map(|e| e / z).collect())
        })
        .collect()
}

/// Returns `(v_p, v_n)`; `v_n` follows the ascending order of the negative indices.
pub fn grouping_softmax(u: &[f64], positives_idx: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_positives(u.len(), positives_idx)?;
    let negs = negatives(u.len(), positives_idx);
    let groups = group_probabilities(u, positives_idx, &negs);
    let j = positives_idx.len() as f64;
    let v_p = groups.iter().map(|(p, _)| *p).collect();
    let mut v_n = vec![0.0; negs.len()];
    for (_, ns) in &groups {
        for (acc, v) in v_n.iter_mut().zip(ns) {
            *acc += v;
        }
    }
    v_n.iter_mut().for_each(|v| *v /= j);
    Ok((v_p, v_n))
}

/// Vector-Jacobian product of [`grouping_softmax`]: dL/du given dL/dv_p and dL/dv_n.
pub fn grouping_softmax_backward(
    u: &[f64],
    positives_idx: &[usize],
    grad_p: &[f64],
    grad_n: &[f64],
) -> Result<Vec<f64>> {
    check_positives(u.len(), positives_idx)?;
    let negs = negatives(u.len(), positives_idx);
    if grad_p.len() != positives_idx.len() || grad_n.len() != negs.len() {
        return Err(Error::DimensionMismatch {
            expected: positives_idx.len() + negs.len(),
            actual: grad_p.len() + grad_n.len(),
        });
    }
    let j = positives_idx.len() as f64;
    let mut grad = vec![0.0; u.len()];
    for ((&p, (sp, sn)), gp) in positives_idx
        .iter()
        .zip(group_probabilities(u, positives_idx, &negs))
        .zip(grad_p)
    {
        // Upstream for this group's outputs, then the softmax VJP s * (g - <s, g>).
        let gn: Vec<f64> = grad_n.iter().map(|g| g / j).collect();
        let dot = sp * gp + sn.iter().zip(&gn).map(|(s, g)| s * g).sum::<f64>();
        grad[p] += sp * (gp - dot);
        for ((&n, s), g) in negs.iter().zip(&sn).zip(&gn) {
            grad[n] += s * (g - dot);
        }
    }
    Ok(grad)
}

/// Cosine similarity; zero-norm vectors are an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_similarities<S: AsRef<str>>(
    embedder: &dyn VisionLanguageEmbedder,
    image: &Image,
    names: &[S],
) -> Result<Vec<f64>> {
    if names.is_empty() {
        return Err(Error::EmptyInput("label list".into()));
    }
    let img = embed_image(embedder, image)?;
    names
        .iter()
        .map(|n| cosine(&img, &embed_text(embedder, n.as_ref())?))
        .collect()
}

/// An embedder bound to a fixed label list, with the text side embedded once.
pub struct Discriminator<'a> {
    embedder: &'a dyn VisionLanguageEmbedder,
    labels: Vec<String>,
    text_embeddings: Vec<Vec<f64>>,
}

impl<'a> Discriminator<'a> {
    pub fn new(embedder: &'a dyn VisionLanguageEmbedder, labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyInput("label list".into()));
        }
        let text_embeddings = labels
            .iter()
            .map(|l| embed_text(embedder, l))
            .collect::<Result<_>>()?;
        Ok(Discriminator {
            embedder,
            labels,
            text_embeddings,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn similarities(&self, image: &Image) -> Result<Vec<f64>> {
        let img = embed_image(self.embedder, image)?;
        self.text_embeddings.iter().map(|t| cosine(&img, t)).collect()
    }

    pub fn score(&self, image: &Image, positives_idx: &[usize]) -> Result<SimilarityReport> {
        SimilarityReport::new(
            self.labels.clone(),
            self.similarities(image)?,
            positives_idx.to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualificationMode {
    StrictTopj,
    FineGrainedTopk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationPolicy {
    pub lambda_threshold: f64,
    pub mode: QualificationMode,
    pub topk: Option<usize>,
    /// Threshold for promoting extra top-k categories; defaults to `lambda_threshold`.
    pub extra_positive_lambda: Option<f64>,
}

impl QualificationPolicy {
    pub fn strict(lambda: f64) -> Self {
        QualificationPolicy {
            lambda_threshold: lambda,
            mode: QualificationMode::StrictTopj,
            topk: None,
            extra_positive_lambda: None,
        }
    }

    pub fn fine_grained(lambda: f64, topk: usize) -> Self {
        QualificationPolicy {
            lambda_threshold: lambda,
            mode: QualificationMode::FineGrainedTopk,
            topk: Some(topk),
            extra_positive_lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_threshold > 0.0 && self.lambda_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in (0, 1), got {}",
                self.lambda_threshold
            )));
        }
        if self.mode == QualificationMode::FineGrainedTopk && !matches!(self.topk, Some(k) if k >= 1) {
            return Err(Error::InvalidConfig("fine-grained mode needs topk >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BelowLambda,
    RankFail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Qualification {
    pub accepted: bool,
    /// Indices into the report's label list.
    pub final_positives: BTreeSet<usize>,
    pub reason: Option<RejectReason>,
}

impl Qualification {
    fn reject(reason: RejectReason) -> Self {
        Qualification {
            accepted: false,
            final_positives: BTreeSet::new(),
            reason: Some(reason),
        }
    }
}

/// Accept or reject a scored image. Exact ties at the rank boundary reject.
pub fn qualify(report: &SimilarityReport, policy: &QualificationPolicy) -> Qualification {
    let lambda = policy.lambda_threshold;
    if report.v_p.iter().any(|&p| p <= lambda) {
        return Qualification::reject(RejectReason::BelowLambda);
    }
    let negs = report.negatives_idx();
    let positives: BTreeSet<usize> = report.positives_idx.iter().copied().collect();
    match policy.mode {
        QualificationMode::StrictTopj => {
            let min_p = report.v_p.iter().copied().fold(f64::INFINITY, f64::min);
            let max_n = report.v_n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min_p <= max_n {
                return Qualification::reject(RejectReason::RankFail);
            }
            Qualification {
                accepted: true,
                final_positives: positives,
                reason: None,
            }
        }
        QualificationMode::FineGrainedTopk => {
            let k = policy.topk.unwrap_or(report.positives_idx.len());
            // V over label order: positives carry v_p, negatives v_n.
            let mut values = vec![0.0; report.u.len()];
            for (&i, &v) in report.positives_idx.iter().zip(&report.v_p) {
                values[i] = v;
            }
            for (&i, &v) in negs.iter().zip(&report.v_n) {
                values[i] = v;
            }
            for &p in &report.positives_idx {
                let v = values[p];
                let ahead = (0..values.len())
                    .filter(|&x| x != p)
                    .filter(|&x| values[x] > v || (values[x] == v && !positives.contains(&x)))
                    .count();
                if ahead >= k {
                    return Qualification::reject(RejectReason::RankFail);
                }
            }
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            let extra_lambda = policy.extra_positive_lambda.unwrap_or(lambda);
            let mut final_positives = positives;
            for &c in order.iter().take(k) {
                if values[c] > extra_lambda {
                    final_positives.insert(c);
                }
            }
            Qualification {
                accepted: true,
                final_positives,
                reason: None,
            }
        }
    }
}
