//! Rejection-sampling construction of the synthetic training set.
//!
//! Each round plans a batch of attempts sequentially (tuple, prompt, seed),
//! generates and scores them in parallel, then accounts for the results in
//! attempt order. Only the accounting pass decides completion, so results do
//! not depend on worker scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{generate, TextToImageBackend, VisionLanguageEmbedder};
use crate::data::{merge_datasets, write_file, DatasetManifest, ImageRef, LabelSpace, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::filter::{qualify, Discriminator, QualificationPolicy, RejectReason, SimilarityReport};
use crate::image::Image;
use crate::prompts::PromptStore;
use crate::seed;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub below_lambda: usize,
    pub rank_fail: usize,
    pub backend_error: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLedger {
    pub k: usize,
    pub per_category_counts: BTreeMap<String, usize>,
    pub attempts: usize,
    pub accepted: usize,
    pub rejections: RejectionCounts,
    /// Accepted images that could credit no category because all of theirs were complete.
    pub surplus: usize,
    pub rng_seed: u64,
    /// Categories credited by each kept record, in manifest order.
    pub credited: Vec<Vec<String>>,
}

impl GenerationLedger {
    fn new(unseen: &[String], k: usize, rng_seed: u64) -> Self {
        GenerationLedger {
            k,
            per_category_counts: unseen.iter().map(|c| (c.clone(), 0)).collect(),
            attempts: 0,
            accepted: 0,
            rejections: RejectionCounts::default(),
            surplus: 0,
            rng_seed,
            credited: Vec::new(),
        }
    }

    pub fn remaining(&self) -> Vec<String> {
        self.per_category_counts
            .iter()
            .filter(|(_, &n)| n < self.k)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn deficits(&self) -> Vec<(String, usize)> {
        self.per_category_counts
            .iter()
            .filter(|(_, &n)| n < self.k)
            .map(|(c, &n)| (c.clone(), self.k - n))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.per_category_counts.values().all(|&n| n >= self.k)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `n` distinct categories with at least one from `remaining`; short tuples are
/// padded from `completed`. Output keeps the draw order.
pub fn sample_target_tuple<R: Rng>(
    remaining: &[String],
    completed: &[String],
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if remaining.is_empty() {
        return Err(Error::EmptyInput("no remaining categories".into()));
    }
    if n == 0 || remaining.len() + completed.len() < n {
        return Err(Error::TooFewCategories {
            needed: n.max(1),
            available: remaining.len() + completed.len(),
        });
    }
    let from_remaining = n.min(remaining.len());
    let mut tuple: Vec<String> = remaining
        .choose_multiple(rng, from_remaining)
        .cloned()
        .collect();
    tuple.extend(completed.choose_multiple(rng, n - from_remaining).cloned());
    Ok(tuple)
}

/// Which categories the discriminator scores against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorLabels {
    #[default]
    Unseen,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuilderConfig {
    pub k: usize,
    pub objects_per_image: usize,
    pub resolution: u32,
    /// Defaults to 100 times the minimum number of acceptances.
    pub attempt_budget: Option<usize>,
    pub batch_size: usize,
    pub labels: DiscriminatorLabels,
    pub seed: u64,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            k: 200,
            objects_per_image: 2,
            resolution: 768,
            attempt_budget: None,
            batch_size: 64,
            labels: DiscriminatorLabels::Unseen,
            seed: 0,
        }
    }
}

impl BuilderConfig {
    pub fn budget(&self, n_unseen: usize) -> usize {
        self.attempt_budget.unwrap_or_else(|| {
            let min = (n_unseen * self.k).div_ceil(self.objects_per_image.max(1));
            100 * min
        })
    }
}

/// Where accepted images go.
#[derive(Debug, Clone)]
pub enum ImageSink {
    Memory,
    /// PNG files under `<dir>/images/`, referenced relative to `dir`.
    Directory(PathBuf),
}

impl ImageSink {
    fn store(&self, image: Image, attempt: usize) -> Result<ImageRef> {
        match self {
            ImageSink::Memory => Ok(ImageRef::Memory(Arc::new(image))),
            ImageSink::Directory(dir) => {
                let rel = PathBuf::from("images").join(format!("{attempt:07}.png"));
                image.save_png(&dir.join(&rel))?;
                Ok(ImageRef::Path(rel))
            }
        }
    }

    fn base_dir(&self) -> Option<PathBuf> {
        match self {
            ImageSink::Memory => None,
            ImageSink::Directory(dir) => Some(dir.clone()),
        }
    }
}

struct Planned {
    attempt: usize,
    tuple: Vec<String>,
    prompt_id: String,
    prompt: String,
    seed: u64,
}

/// Generate, score and keep images until every unseen category owns `k`
/// credited positive labels.
#[allow(clippy::too_many_arguments)]
pub fn build_synthetic_dataset(
    generator: &dyn TextToImageBackend,
    embedder: &dyn VisionLanguageEmbedder,
    prompts: &PromptStore,
    label_space: &LabelSpace,
    policy: &QualificationPolicy,
    config: &BuilderConfig,
    sink: &ImageSink,
) -> Result<(DatasetManifest, GenerationLedger)> {
    policy.validate()?;
    let unseen = label_space.unseen_names();
    let n = config.objects_per_image;
    if unseen.len() < n || n == 0 {
        return Err(Error::TooFewCategories {
            needed: n.max(1),
            available: unseen.len(),
        });
    }
    let mut ledger = GenerationLedger::new(&unseen, config.k, config.seed);
    let mut manifest = DatasetManifest::new(label_space.clone(), Split::Train);
    manifest.base_dir = sink.base_dir();
    if config.k == 0 {
        return Ok((manifest, ledger));
    }
    let disc_labels = match config.labels {
        DiscriminatorLabels::Unseen => unseen.clone(),
        DiscriminatorLabels::All => label_space.names().to_vec(),
    };
    let discriminator = Discriminator::new(embedder, disc_labels.clone())?;
    let budget = config.budget(unseen.len());
    let mut plan_rng = seed::rng(seed::derive(config.seed, 0xB11D));

    while !ledger.is_complete() {
        if ledger.attempts >= budget {
            let deficits = ledger.deficits();
            return Err(Error::AttemptBudgetExhausted {
                budget,
                deficits,
                ledger: Box::new(ledger),
            });
        }
        let remaining = ledger.remaining();
        let completed: Vec<String> = unseen.iter().filter(|c| !remaining.contains(c)).cloned().collect();
        let batch = config.batch_size.max(1).min(budget - ledger.attempts);
        let mut plans = Vec::with_capacity(batch);
        for i in 0..batch {
            let tuple = sample_target_tuple(&remaining, &completed, n, &mut plan_rng)?;
            let record = prompts.sample(&tuple, &mut plan_rng)?;
            let attempt = ledger.attempts + i;
            plans.push(Planned {
                attempt,
                prompt_id: record.id.clone(),
                prompt: record.augmented_text.clone(),
                tuple,
                seed: seed::derive(config.seed, attempt as u64),
            });
        }
        let outcomes: Vec<Result<(Image, SimilarityReport)>> = plans
            .par_iter()
            .map(|p| {
                let positives: Vec<usize> = p
                    .tuple
                    .iter()
                    .map(|c| disc_labels.iter().position(|l| l == c).expect("tuple drawn from unseen"))
                    .collect();
                let image = generate(generator, &p.prompt, config.resolution, p.seed)?;
                let report = discriminator.score(&image, &positives)?;
                Ok((image, report))
            })
            .collect();

        for (plan, outcome) in plans.into_iter().zip(outcomes) {
            ledger.attempts += 1;
            let (image, report) = match outcome {
                Ok(v) => v,
                Err(e @ (Error::Backend(_) | Error::BackendTimeout(_) | Error::BackendUnreachable(_))) => {
                    log::warn!("attempt {} failed: {e}", plan.attempt);
                    ledger.rejections.backend_error += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let q = qualify(&report, policy);
            if !q.accepted {
                match q.reason {
                    Some(RejectReason::BelowLambda) => ledger.rejections.below_lambda += 1,
                    _ => ledger.rejections.rank_fail += 1,
                }
                continue;
            }
            ledger.accepted += 1;
            let names: Vec<&String> = q.final_positives.iter().map(|&i| &report.labels[i]).collect();
            let credits: Vec<String> = names
                .iter()
                .filter(|c| ledger.per_category_counts.get(**c).is_some_and(|&n| n < config.k))
                .map(|c| (*c).clone())
                .collect();
            if credits.is_empty() {
                ledger.surplus += 1;
                continue;
            }
            for c in &credits {
                *ledger.per_category_counts.get_mut(c).expect("credited category") += 1;
            }
            let positives: BTreeSet<usize> = names
                .iter()
                .map(|c| label_space.resolve(c))
                .collect::<Result<_>>()?;
            let image_ref = sink.store(image, plan.attempt)?;
            manifest.records.push(SampleRecord::synthetic(
                image_ref,
                positives,
                plan.prompt_id,
                Some(report),
            ));
            ledger.credited.push(credits);
        }
    }
    manifest.validate()?;
    Ok((manifest, ledger))
}

pub fn finalize_training_set(real: &DatasetManifest, synthetic: &DatasetManifest) -> Result<DatasetManifest> {
    merge_datasets(real, synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ToyGlyphWorld, ToyInstructionLlm};
    use crate::prompts::build_prompt_store;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tuple_sampling_rules() {
        let mut rng = seed::rng(1);
        let t = sample_target_tuple(&names(&["cat"]), &names(&["bus"]), 2, &mut rng).unwrap();
        assert_eq!(t, names(&["cat", "bus"]));
        let many: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        for _ in 0..50 {
            let t = sample_target_tuple(&many, &[], 2, &mut rng).unwrap();
            assert_eq!(t.len(), 2);
            assert_ne!(t[0], t[1]);
        }
        let t = sample_target_tuple(&many, &[], 1, &mut rng).unwrap();
        assert_eq!(t.len(), 1);
        assert!(sample_target_tuple(&[], &many, 1, &mut rng).is_err());
    }

    fn setup(miss: f64) -> (ToyGlyphWorld, LabelSpace, PromptStore) {
        let ls = LabelSpace::new(&["person", "car"], &["cat", "bus", "kite"]).unwrap();
        let world = ToyGlyphWorld::new(ls.names(), 64).unwrap().with_miss_rate(miss).unwrap();
        let store = build_prompt_store(Some(&ToyInstructionLlm::new(0)), &ls, 2, 4).unwrap();
        (world, ls, store)
    }

    fn config(k: usize) -> BuilderConfig {
        BuilderConfig {
            k,
            objects_per_image: 2,
            resolution: 64,
            batch_size: 8,
            seed: 3,
            ..BuilderConfig::default()
        }
    }

    #[test]
    fn exact_counts_without_misses() {
        let (world, ls, store) = setup(0.0);
        let policy = QualificationPolicy::strict(0.5);
        let (m, ledger) =
            build_synthetic_dataset(&world, &world, &store, &ls, &policy, &config(5), &ImageSink::Memory).unwrap();
        assert!(ledger.per_category_counts.values().all(|&n| n == 5));
        assert!(m.len() >= 8);
        let mut recount: BTreeMap<&str, usize> = BTreeMap::new();
        for c in ledger.credited.iter().flatten() {
            *recount.entry(c).or_default() += 1;
        }
        assert!(recount.values().all(|&n| n == 5));
        assert_eq!(ledger.credited.len(), m.len());
    }

    #[test]
    fn zero_quota_does_nothing() {
        let (world, ls, store) = setup(0.0);
        let policy = QualificationPolicy::strict(0.5);
        let (m, ledger) =
            build_synthetic_dataset(&world, &world, &store, &ls, &policy, &config(0), &ImageSink::Memory).unwrap();
        assert!(m.is_empty());
        assert_eq!(ledger.attempts, 0);
    }

    #[test]
    fn budget_exhaustion_reports_deficits() {
        let (world, ls, store) = setup(1.0);
        let policy = QualificationPolicy::strict(0.5);
        let mut cfg = config(2);
        cfg.attempt_budget = Some(20);
        match build_synthetic_dataset(&world, &world, &store, &ls, &policy, &cfg, &ImageSink::Memory) {
            Err(Error::AttemptBudgetExhausted { budget, deficits, ledger }) => {
                assert_eq!(budget, 20);
                assert_eq!(deficits.len(), 3);
                assert_eq!(ledger.attempts, 20);
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_and_writes_pngs() {
        let (world, ls, store) = setup(0.3);
        let policy = QualificationPolicy::strict(0.5);
        let dir = tempfile::tempdir().unwrap();
        let sink = ImageSink::Directory(dir.path().to_path_buf());
        let (a, la) = build_synthetic_dataset(&world, &world, &store, &ls, &policy, &config(3), &sink).unwrap();
        let (b, lb) =
            build_synthetic_dataset(&world, &world, &store, &ls, &policy, &config(3), &ImageSink::Memory).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.len(), b.len());
        let img = a.load_image(&a.records[0]).unwrap();
        assert_eq!(img.width(), 64);
    }

    #[test]
    fn budget_default_scales_with_quota() {
        assert_eq!(config(5).budget(3), 100 * 8);
    }
}
