//! Zero-shot evaluation: mean average precision and top-K precision/recall/F1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierState;
use crate::data::{write_file, DatasetManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Unseen classes only.
    Zsl,
    /// Seen and unseen classes together.
    Gzsl,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zsl" => Ok(EvalMode::Zsl),
            "gzsl" => Ok(EvalMode::Gzsl),
            _ => Err(Error::InvalidConfig(format!("unknown eval mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Counts pooled over all images.
    #[default]
    Micro,
    /// Per-class scores averaged over classes.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        Prf::from_pr(ratio(tp, fp), ratio(tp, fn_))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn check_shapes(scores: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("no images to evaluate".into()));
    }
    let q = scores[0].len();
    for row in scores.iter().map(Vec::len).chain(truth.iter().map(Vec::len)) {
        if row != q {
            return Err(Error::DimensionMismatch { expected: q, actual: row });
        }
    }
    Ok(q)
}

/// Indices of the `k` highest scores; ties go to the lower class index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Precision, recall and F1 of predicting each image's top-`k` classes.
pub fn topk_prf(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize) -> Result<Prf> {
    topk_prf_with(scores, truth, k, Averaging::Micro)
}

pub fn topk_prf_with(scores: &[Vec<f64>], truth: &[Vec<bool>], k: usize, averaging: Averaging) -> Result<Prf> {
    let q = check_shapes(scores, truth)?;
    if k == 0 || k > q {
        return Err(Error::InvalidConfig(format!("top-k must lie in 1..={q}, got {k}")));
    }
    // [class] -> (tp, fp, fn)
    let mut counts = vec![(0usize, 0usize, 0usize); q];
    for (row, t) in scores.iter().zip(truth) {
        let predicted: BTreeSet<usize> = top_k(row, k).into_iter().collect();
        for c in 0..q {
            match (predicted.contains(&c), t[c]) {
                (true, true) => counts[c].0 += 1,
                (true, false) => counts[c].1 += 1,
                (false, true) => counts[c].2 += 1,
                (false, false) => {}
            }
        }
    }
    Ok(match averaging {
        Averaging::Micro => {
            let (tp, fp, fn_) = counts
                .iter()
                .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
            Prf::from_counts(tp, fp, fn_)
        }
        Averaging::Macro => {
            let per: Vec<Prf> = counts.iter().map(|&(tp, fp, fn_)| Prf::from_counts(tp, fp, fn_)).collect();
            let mean = |f: fn(&Prf) -> f64| per.iter().map(f).sum::<f64>() / q as f64;
            Prf::from_pr(mean(|p| p.precision), mean(|p| p.recall))
        }
    })
}

/// All-points average precision of one class; `None` when it has no positives.
/// Images are ranked by descending score, ties by image index.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let n_pos = truth.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// Per class of the subset, in subset order; `None` for excluded classes.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean AP over `class_subset`. Classes with no positives are excluded with a warning.
pub fn mean_average_precision(scores: &[Vec<f64>], truth: &[Vec<bool>], class_subset: &[usize]) -> Result<MapResult> {
    let q = check_shapes(scores, truth)?;
    if let Some(&bad) = class_subset.iter().find(|&&c| c >= q) {
        return Err(Error::IndexOutOfRange { index: bad, len: q });
    }
    let mut per_class = Vec::with_capacity(class_subset.len());
    let mut excluded = Vec::new();
    for &c in class_subset {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[c]).collect();
        let ap = average_precision(&col, &t);
        if ap.is_none() {
            log::warn!("class {c} has no positives; excluded from mAP");
            excluded.push(c);
        }
        per_class.push(ap);
    }
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::EmptyInput("no class in the subset has a positive".into()));
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub classes: Vec<String>,
    /// SHA-256 over the evaluated class names, in order.
    pub label_subset_fingerprint: String,
    pub images: usize,
    pub map: f64,
    pub per_k: BTreeMap<usize, Prf>,
    /// Same order as `classes`; null for classes without test positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn subset_fingerprint<S: AsRef<str>>(names: &[S]) -> String {
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_ref().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Build a report from full score and truth matrices over `names`, restricted to `subset`.
///
/// In ZSL mode only images with a positive inside the subset are scored, as
/// an image holding nothing but seen classes has no correct unseen answer.
pub fn report_from_scores(
    mode: EvalMode,
    names: &[String],
    subset: &[usize],
    scores: &[Vec<f64>],
    truth: &[Vec<bool>],
    ks: &[usize],
    averaging: Averaging,
) -> Result<EvalReport> {
    check_shapes(scores, truth)?;
    let mut sub_scores = Vec::new();
    let mut sub_truth = Vec::new();
    for (s, t) in scores.iter().zip(truth) {
        let tr: Vec<bool> = subset.iter().map(|&c| t[c]).collect();
        if mode == EvalMode::Zsl && !tr.contains(&true) {
            continue;
        }
        sub_scores.push(subset.iter().map(|&c| s[c]).collect::<Vec<f64>>());
        sub_truth.push(tr);
    }
    let local: Vec<usize> = (0..subset.len()).collect();
    let m = mean_average_precision(&sub_scores, &sub_truth, &local)?;
    let mut per_k = BTreeMap::new();
    for &k in ks {
        per_k.insert(k, topk_prf_with(&sub_scores, &sub_truth, k, averaging)?);
    }
    let classes: Vec<String> = subset.iter().map(|&c| names[c].clone()).collect();
    Ok(EvalReport {
        mode,
        label_subset_fingerprint: subset_fingerprint(&classes),
        excluded: m.excluded.iter().map(|&c| classes[c].clone()).collect(),
        classes,
        images: sub_scores.len(),
        map: m.map,
        per_k,
        per_class_ap: m.per_class,
    })
}

/// Score `test` with `state` and report ZSL (unseen only) or GZSL (all classes) metrics.
pub fn evaluate(
    state: &ClassifierState,
    test: &DatasetManifest,
    mode: EvalMode,
    ks: &[usize],
    averaging: Averaging,
) -> Result<EvalReport> {
    let ls = state.label_space()?;
    if test.label_space != ls {
        return Err(Error::LabelSpaceMismatch);
    }
    let images = test
        .records
        .iter()
        .map(|r| test.load_image(r))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&crate::image::Image> = images.iter().map(|i| i.as_ref()).collect();
    let scores = state.predict_all(&refs)?;
    let truth: Vec<Vec<bool>> = test
        .records
        .iter()
        .map(|r| (0..ls.len()).map(|c| r.positives.contains(&c)).collect())
        .collect();
    let subset: Vec<usize> = match mode {
        EvalMode::Zsl => ls.unseen().to_vec(),
        EvalMode::Gzsl => (0..ls.len()).collect(),
    };
    if subset.is_empty() {
        return Err(Error::EmptyInput("no classes to evaluate".into()));
    }
    report_from_scores(mode, ls.names(), &subset, &scores, &truth, ks, averaging)
}
