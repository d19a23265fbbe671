//! End-to-end runs: config files, run directories, and the six resumable stages
//! (prompts, finetune, generate, merge, train, eval).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    HttpBackend, HttpConfig, InstructionLlmBackend, TextToImageBackend, ToyDiffStack, ToyGlyphWorld,
    ToyInstructionLlm, VisionLanguageEmbedder,
};
use crate::builder::{build_synthetic_dataset, BuilderConfig, DiscriminatorLabels, GenerationLedger, ImageSink};
use crate::classifier::{train_classifier, ClassifierConfig, ClassifierState, TrainConfig};
use crate::data::{
    load_manifest, merge_datasets, save_manifest, write_file, DatasetManifest, ImageRef, LabelSpace, PipelineConfig,
    SampleRecord, Split,
};
use crate::error::{Error, Result};
use crate::filter::{qualify, Discriminator, Qualification, QualificationPolicy};
use crate::metrics::{evaluate, Averaging, EvalMode, EvalReport};
use crate::prompts::{build_prompt_store, PromptStore};
use crate::seed;
use crate::tuner::{finetune, qualified_rate, AslParams, TunerConfig, TunerState};

pub const RUN_MANIFEST: &str = "run.json";
pub const REAL_TRAIN: &str = "real_train.jsonl";
pub const TEST: &str = "test.jsonl";
pub const PROMPTS: &str = "prompts.jsonl";
pub const TUNER_STATE: &str = "finetune/tuner_state.json";
pub const FINETUNE_SUMMARY: &str = "finetune/summary.json";
pub const SYNTHETIC: &str = "synthetic.jsonl";
pub const LEDGER: &str = "ledger.json";
pub const TRAIN: &str = "train.jsonl";
pub const CHECKPOINT: &str = "checkpoints/classifier.json";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prompts,
    Finetune,
    Generate,
    Merge,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prompts,
        Stage::Finetune,
        Stage::Generate,
        Stage::Merge,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prompts => "prompts",
            Stage::Finetune => "finetune",
            Stage::Generate => "generate",
            Stage::Merge => "merge",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

fn default_seen() -> Vec<String> {
    ["person", "car", "dog", "tree", "house", "boat"].map(String::from).to_vec()
}

fn default_unseen() -> Vec<String> {
    ["cat", "bus", "bird"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsConfig {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl Default for LabelsConfig {
    fn default() -> Self {
        LabelsConfig {
            seen: default_seen(),
            unseen: default_unseen(),
        }
    }
}

/// Procedural real data for toy runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub canvas: u32,
    /// Chance that the toy generator leaves out each named target.
    pub miss_rate: f64,
    pub embed_noise: f64,
    /// Most glyphs drawn in one real image.
    pub max_objects: usize,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            train_images: 60,
            test_images: 60,
            canvas: 64,
            miss_rate: 0.3,
            embed_noise: 0.0,
            max_objects: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub toy: ToyDataConfig,
    /// Real training manifest (seen classes only); required outside toy mode.
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub url: Option<String>,
    pub timeout_s: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            url: None,
            timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    /// LLM captions per category tuple; 0 keeps only the fixed template.
    pub per_tuple: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { per_tuple: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub enabled: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: Option<usize>,
    /// Latent width of the toy differentiable stack.
    pub latent_dim: usize,
    /// Generations used to measure the qualified rate before and after tuning; 0 skips it.
    pub eval_samples: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            enabled: true,
            steps: 100,
            learning_rate: 0.05,
            weight_decay: 0.0,
            batch_size: None,
            latent_dim: 16,
            eval_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// When false the classifier trains on real data alone.
    pub enabled: bool,
    /// Defaults to the toy canvas, or 768 with a remote backend.
    pub resolution: Option<u32>,
    pub batch_size: usize,
    pub attempt_budget: Option<usize>,
    pub labels: DiscriminatorLabels,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            enabled: true,
            resolution: None,
            batch_size: 64,
            attempt_budget: None,
            labels: DiscriminatorLabels::Unseen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 16,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub modes: Vec<EvalMode>,
    pub topk: Vec<usize>,
    pub averaging: Averaging,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            modes: vec![EvalMode::Zsl, EvalMode::Gzsl],
            topk: vec![3],
            averaging: Averaging::Micro,
        }
    }
}

/// Everything a run needs; the snapshot in `run.json` is enough to replay it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: Option<String>,
    /// Use the procedural toy backends and data.
    pub toy: bool,
    pub params: PipelineConfig,
    pub labels: LabelsConfig,
    pub data: DataConfig,
    pub backend: BackendSection,
    pub prompts: PromptSection,
    pub finetune: FinetuneSection,
    pub generate: GenerateSection,
    pub classifier: ClassifierConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse and validate YAML; nothing runs if this fails.
    pub fn from_yaml(text: &str) -> Result<Self> {
        let config: RunConfig = serde_yaml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(&self.labels.seen, &self.labels.unseen)
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", self.params.seed))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.params.validate()?;
        self.classifier.validate()?;
        let ls = self.label_space()?;
        let j = self.params.objects_per_image_j;
        if self.generate.enabled && j > ls.unseen().len() {
            return bad(format!(
                "objects_per_image_j = {j} exceeds the {} unseen classes",
                ls.unseen().len()
            ));
        }
        if let Some(k) = self.params.topk_fine_grained {
            let n = match self.generate.labels {
                DiscriminatorLabels::Unseen => ls.unseen().len(),
                DiscriminatorLabels::All => ls.len(),
            };
            if k > n {
                return bad(format!("topk_fine_grained = {k} exceeds the {n} discriminator labels"));
            }
        }
        if self.eval.modes.is_empty() || self.eval.topk.is_empty() {
            return bad("eval needs at least one mode and one top-k".into());
        }
        for &mode in &self.eval.modes {
            let n = match mode {
                EvalMode::Zsl => ls.unseen().len(),
                EvalMode::Gzsl => ls.len(),
            };
            if let Some(&k) = self.eval.topk.iter().find(|&&k| k == 0 || k > n) {
                return bad(format!("top-{k} is impossible with {n} classes in {mode:?} mode"));
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be positive".into());
        }
        if !(self.train.learning_rate >= 0.0) || !(self.finetune.learning_rate >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if self.generate.batch_size == 0 {
            return bad("generate.batch_size must be positive".into());
        }
        if self.toy {
            let t = &self.data.toy;
            if t.train_images == 0 || t.test_images == 0 || t.max_objects == 0 {
                return bad("toy data sizes must be positive".into());
            }
            if t.max_objects > 9 {
                return bad("toy images hold at most nine glyphs".into());
            }
            ToyGlyphWorld::new(ls.names(), t.canvas)?
                .with_miss_rate(t.miss_rate)?
                .with_embed_noise(t.embed_noise)?;
            if self.finetune.latent_dim == 0 {
                return bad("finetune.latent_dim must be positive".into());
            }
        } else {
            if self.backend.url.is_none() {
                return bad("a backend url is required outside toy mode".into());
            }
            if self.data.train.is_none() || self.data.test.is_none() {
                return bad("data.train and data.test are required outside toy mode".into());
            }
            if self.finetune.enabled {
                return bad("finetune needs a differentiable generator; disable it for remote backends".into());
            }
        }
        if !(self.backend.timeout_s > 0.0) {
            return bad("backend.timeout_s must be positive".into());
        }
        Ok(())
    }

    pub fn policy(&self) -> QualificationPolicy {
        match self.params.topk_fine_grained {
            Some(k) => QualificationPolicy::fine_grained(self.params.lambda_threshold, k),
            None => QualificationPolicy::strict(self.params.lambda_threshold),
        }
    }

    fn asl(&self) -> AslParams {
        AslParams {
            gamma_plus: self.params.gamma_plus,
            gamma_minus: self.params.gamma_minus,
            margin: 0.0,
        }
    }

    pub fn resolution(&self) -> u32 {
        self.generate
            .resolution
            .unwrap_or(if self.toy { self.data.toy.canvas } else { 768 })
    }

    pub fn builder_config(&self) -> BuilderConfig {
        BuilderConfig {
            k: self.params.positives_per_category_k,
            objects_per_image: self.params.objects_per_image_j,
            resolution: self.resolution(),
            attempt_budget: self.generate.attempt_budget,
            batch_size: self.generate.batch_size,
            labels: self.generate.labels,
            seed: seed::derive(self.params.seed, 3),
        }
    }

    pub fn tuner_config(&self) -> TunerConfig {
        TunerConfig {
            steps: self.finetune.steps,
            learning_rate: self.finetune.learning_rate,
            weight_decay: self.finetune.weight_decay,
            batch_size: self.finetune.batch_size,
            asl: self.asl(),
            seed: seed::derive(self.params.seed, 2),
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            tau: self.params.tau,
            ..self.classifier.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            asl: self.asl(),
            seed: seed::derive(self.params.seed, 5),
        }
    }

    fn discriminator_labels(&self, ls: &LabelSpace) -> Vec<String> {
        match self.generate.labels {
            DiscriminatorLabels::Unseen => ls.unseen_names(),
            DiscriminatorLabels::All => ls.names().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: Stage,
    pub complete: bool,
    pub artifacts: Vec<String>,
    pub wall_clock_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub stages: Vec<StageStatus>,
}

impl RunManifest {
    fn new(config: &RunConfig) -> Self {
        RunManifest {
            run_id: config.run_id(),
            config: config.clone(),
            stages: Stage::ALL
                .iter()
                .map(|&stage| StageStatus {
                    stage,
                    complete: false,
                    artifacts: Vec::new(),
                    wall_clock_s: None,
                })
                .collect(),
        }
    }

    pub fn status(&self, stage: Stage) -> &StageStatus {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage has a status")
    }

    fn status_mut(&mut self, stage: Stage) -> &mut StageStatus {
        self.stages.iter_mut().find(|s| s.stage == stage).expect("every stage has a status")
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| s.complete)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        write_file(&run_dir.join(RUN_MANIFEST), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Qualified rate of the generator before and after text-encoder tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub samples: usize,
    pub qualified_rate_before: Option<f64>,
    pub qualified_rate_after: Option<f64>,
    pub losses: Vec<f64>,
}

impl FinetuneSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Eval reports of a run, keyed by mode.
pub type RunMetrics = BTreeMap<EvalMode, EvalReport>;

pub fn load_metrics(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

enum Backends {
    Toy {
        world: ToyGlyphWorld,
        llm: ToyInstructionLlm,
    },
    Remote(HttpBackend),
}

impl Backends {
    fn new(config: &RunConfig, ls: &LabelSpace) -> Result<Self> {
        if config.toy {
            let t = &config.data.toy;
            Ok(Backends::Toy {
                world: ToyGlyphWorld::new(ls.names(), t.canvas)?
                    .with_miss_rate(t.miss_rate)?
                    .with_embed_noise(t.embed_noise)?,
                llm: ToyInstructionLlm::new(seed::derive(config.params.seed, 1)),
            })
        } else {
            let url = config.backend.url.clone().ok_or_else(|| Error::InvalidConfig("no backend url".into()))?;
            let mut http = HttpConfig::new(url);
            http.timeout = std::time::Duration::from_secs_f64(config.backend.timeout_s);
            Ok(Backends::Remote(HttpBackend::new(http)))
        }
    }

    fn llm(&self) -> &dyn InstructionLlmBackend {
        match self {
            Backends::Toy { llm, .. } => llm,
            Backends::Remote(h) => h,
        }
    }

    fn embedder(&self) -> &dyn VisionLanguageEmbedder {
        match self {
            Backends::Toy { world, .. } => world,
            Backends::Remote(h) => h,
        }
    }

    fn plain_generator(&self) -> &dyn TextToImageBackend {
        match self {
            Backends::Toy { world, .. } => world,
            Backends::Remote(h) => h,
        }
    }
}

/// The toy differentiable generator over the unseen classes, before tuning.
pub fn toy_stack(config: &RunConfig, ls: &LabelSpace) -> Result<ToyDiffStack> {
    let world = ToyGlyphWorld::new(ls.names(), config.data.toy.canvas)?;
    ToyDiffStack::new(
        world,
        ls.unseen().to_vec(),
        config.finetune.latent_dim,
        seed::derive(config.params.seed, 0x57AC),
    )
}

/// Deterministic procedural real data: train images hold seen glyphs only,
/// test images draw from every class.
pub fn write_toy_data(config: &RunConfig, run_dir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let ls = config.label_space()?;
    let t = &config.data.toy;
    let world = ToyGlyphWorld::new(ls.names(), t.canvas)?;
    let make = |split: Split, n: usize, pool: Vec<usize>, salt: u64| -> Result<DatasetManifest> {
        let dir = match split {
            Split::Train => "data/train",
            Split::Test => "data/test",
        };
        let records: Vec<SampleRecord> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng(seed::derive(seed::derive(config.params.seed, salt), i as u64));
                let count = rng.random_range(1..=t.max_objects.min(pool.len()));
                let cats: Vec<usize> = pool.choose_multiple(&mut rng, count).copied().collect();
                let image = world.render(&cats, rng.random());
                let rel = PathBuf::from(dir).join(format!("{i:05}.png"));
                image.save_png(&run_dir.join(&rel))?;
                Ok(SampleRecord::real(ImageRef::Path(rel), cats.into_iter().collect::<BTreeSet<_>>()))
            })
            .collect::<Result<_>>()?;
        let mut m = DatasetManifest::from_records(ls.clone(), split, records)?;
        m.base_dir = Some(run_dir.to_path_buf());
        Ok(m)
    };
    if ls.seen().is_empty() {
        return Err(Error::EmptyInput("toy training data needs seen classes".into()));
    }
    let train = make(Split::Train, t.train_images, ls.seen().to_vec(), 0xDA7A)?;
    let test = make(Split::Test, t.test_images, (0..ls.len()).collect(), 0x7E57)?;
    save_manifest(&train, &run_dir.join(REAL_TRAIN))?;
    save_manifest(&test, &run_dir.join(TEST))?;
    Ok((train, test))
}

/// Re-express relative image paths against `new_base`, which must contain them.
pub fn rebase(manifest: &mut DatasetManifest, new_base: &Path) -> Result<()> {
    let Some(old) = manifest.base_dir.clone() else {
        return Ok(());
    };
    for r in &mut manifest.records {
        if let ImageRef::Path(p) = &mut r.image {
            if p.is_relative() {
                let full = old.join(&*p);
                *p = full
                    .strip_prefix(new_base)
                    .map_err(|_| Error::InvalidRecord(format!("{} lies outside {}", full.display(), new_base.display())))?
                    .to_path_buf();
            }
        }
    }
    manifest.base_dir = Some(new_base.to_path_buf());
    Ok(())
}

fn real_paths(config: &RunConfig, run_dir: &Path) -> (PathBuf, PathBuf) {
    if config.toy {
        (run_dir.join(REAL_TRAIN), run_dir.join(TEST))
    } else {
        (
            config.data.train.clone().expect("validated"),
            config.data.test.clone().expect("validated"),
        )
    }
}

/// Check that a completed stage's outputs still load.
fn verify_stage(stage: Stage, config: &RunConfig, run_dir: &Path) -> Result<()> {
    let ls = config.label_space()?;
    match stage {
        Stage::Prompts => PromptStore::load(&run_dir.join(PROMPTS)).map(drop),
        Stage::Finetune => {
            if config.finetune.enabled {
                TunerState::load(&run_dir.join(TUNER_STATE))?;
            }
            FinetuneSummary::load(&run_dir.join(FINETUNE_SUMMARY)).map(drop)
        }
        Stage::Generate => {
            let m = load_manifest(&run_dir.join(SYNTHETIC), &ls, Split::Train)?;
            for r in &m.records {
                m.load_image(r)?;
            }
            if config.generate.enabled {
                GenerationLedger::load(&run_dir.join(LEDGER))?;
            }
            Ok(())
        }
        Stage::Merge => load_manifest(&run_dir.join(TRAIN), &ls, Split::Train).map(drop),
        Stage::Train => ClassifierState::load(&run_dir.join(CHECKPOINT)).map(drop),
        Stage::Eval => load_metrics(&run_dir.join(METRICS)).map(drop),
    }
}

fn stage_error(stage: Stage, e: Error) -> Error {
    match e {
        // Keep the ledger reachable for callers that want the deficits.
        e @ Error::AttemptBudgetExhausted { .. } => e,
        e => Error::Stage {
            stage: stage.name().into(),
            message: e.to_string(),
        },
    }
}

/// Execute one stage, returning the artifacts it wrote (relative to the run directory).
fn run_stage(stage: Stage, config: &RunConfig, run_dir: &Path, backends: &Backends) -> Result<Vec<String>> {
    let ls = config.label_space()?;
    match stage {
        Stage::Prompts => {
            let llm = (config.prompts.per_tuple > 0).then(|| backends.llm());
            let store = if config.generate.enabled {
                build_prompt_store(llm, &ls, config.params.objects_per_image_j, config.prompts.per_tuple)?
            } else {
                PromptStore::new()
            };
            store.save(&run_dir.join(PROMPTS))?;
            Ok(vec![PROMPTS.into()])
        }
        Stage::Finetune => {
            let store = PromptStore::load(&run_dir.join(PROMPTS))?;
            let mut summary = FinetuneSummary {
                samples: config.finetune.eval_samples,
                qualified_rate_before: None,
                qualified_rate_after: None,
                losses: Vec::new(),
            };
            let mut artifacts = Vec::new();
            let measure = config.toy && config.finetune.eval_samples > 0 && !store.is_empty();
            let disc = Discriminator::new(backends.embedder(), config.discriminator_labels(&ls))?;
            let rate = |g: &dyn TextToImageBackend, salt: u64| {
                qualified_rate(
                    g,
                    &disc,
                    &config.policy(),
                    store.records(),
                    config.finetune.eval_samples,
                    config.resolution(),
                    seed::derive(config.params.seed, salt),
                )
            };
            if config.finetune.enabled && !store.is_empty() {
                let mut stack = toy_stack(config, &ls)?;
                if measure {
                    summary.qualified_rate_before = Some(rate(&stack, 0xB4)?);
                }
                let state = finetune(&stack, store.records(), &config.tuner_config(), None)?;
                state.save(&run_dir.join(TUNER_STATE))?;
                let state = TunerState::load(&run_dir.join(TUNER_STATE))?;
                stack.set_encoder(state.text_encoder)?;
                if measure {
                    summary.qualified_rate_after = Some(rate(&stack, 0xB4)?);
                }
                summary.losses = state.losses;
                artifacts.push(TUNER_STATE.to_string());
            } else if measure {
                summary.qualified_rate_before = Some(rate(backends.plain_generator(), 0xB4)?);
            }
            write_file(
                &run_dir.join(FINETUNE_SUMMARY),
                (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
            )?;
            artifacts.push(FINETUNE_SUMMARY.into());
            Ok(artifacts)
        }
        Stage::Generate => {
            let synth_dir = run_dir.join("synthetic");
            if synth_dir.exists() {
                fs::remove_dir_all(&synth_dir).map_err(|e| Error::io(&synth_dir, e))?;
            }
            if !config.generate.enabled {
                let mut empty = DatasetManifest::new(ls.clone(), Split::Train);
                empty.base_dir = Some(run_dir.to_path_buf());
                save_manifest(&empty, &run_dir.join(SYNTHETIC))?;
                return Ok(vec![SYNTHETIC.into()]);
            }
            let store = PromptStore::load(&run_dir.join(PROMPTS))?;
            let tuned;
            let generator: &dyn TextToImageBackend = if config.toy && config.finetune.enabled {
                let mut stack = toy_stack(config, &ls)?;
                stack.set_encoder(TunerState::load(&run_dir.join(TUNER_STATE))?.text_encoder)?;
                tuned = stack;
                &tuned
            } else {
                backends.plain_generator()
            };
            let sink = ImageSink::Directory(synth_dir);
            let outcome = build_synthetic_dataset(
                generator,
                backends.embedder(),
                &store,
                &ls,
                &config.policy(),
                &config.builder_config(),
                &sink,
            );
            let (mut manifest, ledger) = match outcome {
                Ok(v) => v,
                Err(Error::AttemptBudgetExhausted {
                    budget,
                    deficits,
                    ledger,
                }) => {
                    ledger.save(&run_dir.join(LEDGER))?;
                    return Err(Error::AttemptBudgetExhausted {
                        budget,
                        deficits,
                        ledger,
                    });
                }
                Err(e) => return Err(e),
            };
            rebase(&mut manifest, run_dir)?;
            save_manifest(&manifest, &run_dir.join(SYNTHETIC))?;
            ledger.save(&run_dir.join(LEDGER))?;
            Ok(vec![SYNTHETIC.into(), LEDGER.into(), "synthetic/images".into()])
        }
        Stage::Merge => {
            let (real_path, _) = real_paths(config, run_dir);
            let real = load_manifest(&real_path, &ls, Split::Train)?;
            let synthetic = load_manifest(&run_dir.join(SYNTHETIC), &ls, Split::Train)?;
            let mut merged = merge_datasets(&real, &synthetic)?;
            if merged.base_dir.is_some() {
                rebase(&mut merged, run_dir)?;
            }
            save_manifest(&merged, &run_dir.join(TRAIN))?;
            Ok(vec![TRAIN.into()])
        }
        Stage::Train => {
            let train = load_manifest(&run_dir.join(TRAIN), &ls, Split::Train)?;
            let state = ClassifierState::new(
                &ls,
                config.classifier_config(),
                config.params.strategy,
                seed::derive(config.params.seed, 4),
            )?;
            let ckpt_dir = run_dir.join("checkpoints");
            train_classifier(&train, state, &config.train_config(), Some(&ckpt_dir))?;
            Ok(vec![CHECKPOINT.into()])
        }
        Stage::Eval => {
            let (_, test_path) = real_paths(config, run_dir);
            let test = load_manifest(&test_path, &ls, Split::Test)?;
            let state = ClassifierState::load(&run_dir.join(CHECKPOINT))?;
            let mut metrics = RunMetrics::new();
            for &mode in &config.eval.modes {
                metrics.insert(mode, evaluate(&state, &test, mode, &config.eval.topk, config.eval.averaging)?);
            }
            write_file(&run_dir.join(METRICS), (serde_json::to_string_pretty(&metrics)? + "\n").as_bytes())?;
            Ok(vec![METRICS.into()])
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this stage has completed.
    pub stop_after: Option<Stage>,
}

/// Run every incomplete stage in order. A completed stage is skipped only if
/// its outputs still load; a failure leaves `run.json` describing what is done.
pub fn run_pipeline(config: &RunConfig, run_dir: &Path, options: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut manifest = if run_dir.join(RUN_MANIFEST).exists() {
        let existing = RunManifest::load(run_dir)?;
        if existing.config != *config {
            return Err(Error::InvalidConfig(format!(
                "{} holds a run with a different config",
                run_dir.display()
            )));
        }
        existing
    } else {
        RunManifest::new(config)
    };
    manifest.save(run_dir)?;
    let ls = config.label_space()?;
    if config.toy {
        let ok = load_manifest(&run_dir.join(REAL_TRAIN), &ls, Split::Train).is_ok()
            && load_manifest(&run_dir.join(TEST), &ls, Split::Test).is_ok();
        if !ok {
            write_toy_data(config, run_dir)?;
        }
    }
    let backends = Backends::new(config, &ls)?;
    let mut invalidated = false;
    for stage in Stage::ALL {
        let done = manifest.status(stage).complete && !invalidated && verify_stage(stage, config, run_dir).is_ok();
        if done {
            log::info!("stage {}: already complete", stage.name());
        } else {
            // Everything downstream of a rerun stage is stale.
            invalidated = true;
            for s in manifest.stages.iter_mut().filter(|s| s.stage >= stage) {
                s.complete = false;
            }
            log::info!("stage {}: running", stage.name());
            let start = Instant::now();
            let artifacts = run_stage(stage, config, run_dir, &backends).map_err(|e| {
                let _ = manifest.save(run_dir);
                stage_error(stage, e)
            })?;
            verify_stage(stage, config, run_dir).map_err(|e| stage_error(stage, e))?;
            let status = manifest.status_mut(stage);
            status.complete = true;
            status.artifacts = artifacts;
            status.wall_clock_s = Some(start.elapsed().as_secs_f64());
            manifest.save(run_dir)?;
        }
        if options.stop_after == Some(stage) {
            break;
        }
    }
    Ok(manifest)
}

pub fn run_pipeline_from_file(config_path: &Path, run_dir: &Path) -> Result<RunManifest> {
    run_pipeline(&RunConfig::load(config_path)?, run_dir, RunOptions::default())
}

/// Outcome of scoring an existing manifest against the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct RefilterOutcome {
    pub kept: DatasetManifest,
    pub qualifications: Vec<Qualification>,
}

/// Score every record of `manifest` with the configured discriminator and keep
/// the ones the policy accepts, with their credited positives.
pub fn refilter_manifest(config: &RunConfig, manifest: &DatasetManifest) -> Result<RefilterOutcome> {
    let ls = &manifest.label_space;
    let backends = Backends::new(config, ls)?;
    let labels = config.discriminator_labels(ls);
    let disc = Discriminator::new(backends.embedder(), labels.clone())?;
    let policy = config.policy();
    let images = load_images(manifest)?;
    let mut kept = DatasetManifest::new(ls.clone(), manifest.split);
    kept.base_dir = manifest.base_dir.clone();
    let mut qualifications = Vec::with_capacity(manifest.len());
    for (record, image) in manifest.records.iter().zip(&images) {
        let names: Vec<&str> = record.positives.iter().map(|&i| ls.name(i)).collect();
        let local: Option<Vec<usize>> =
            names.iter().map(|n| labels.iter().position(|l| l == n)).collect();
        let Some(local) = local else {
            return Err(Error::InvalidRecord(format!(
                "record positives {names:?} are not all discriminator labels"
            )));
        };
        let report = disc.score(image, &local)?;
        let q = qualify(&report, &policy);
        if q.accepted {
            let mut r = record.clone();
            r.positives = q.final_positives.iter().map(|&i| ls.resolve(&labels[i])).collect::<Result<_>>()?;
            r.scores = Some(report);
            kept.records.push(r);
        }
        qualifications.push(q);
    }
    Ok(RefilterOutcome { kept, qualifications })
}

/// Load the image behind every record; handy for callers that score a manifest.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<Arc<crate::image::Image>>> {
    manifest.records.par_iter().map(|r| manifest.load_image(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig {
            toy: true,
            ..RunConfig::default()
        };
        c.params.positives_per_category_k = 3;
        c.params.seed = 11;
        c.data.toy.train_images = 24;
        c.data.toy.test_images = 24;
        c.finetune.steps = 10;
        c.finetune.eval_samples = 20;
        c.train.epochs = 2;
        c.classifier.context_len = 2;
        c
    }

    #[test]
    fn defaults_follow_the_paper_hyper_parameters() {
        let c = RunConfig::default();
        assert_eq!(c.params.lambda_threshold, 0.5);
        assert_eq!(c.params.objects_per_image_j, 2);
        assert_eq!(c.params.positives_per_category_k, 200);
        assert_eq!((c.params.gamma_minus, c.params.gamma_plus), (4.0, 0.0));
    }

    #[test]
    fn bad_lambda_is_rejected_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.params.lambda_threshold = 1.5;
        assert!(matches!(run_pipeline(&c, dir.path(), RunOptions::default()), Err(Error::InvalidConfig(_))));
        assert!(!dir.path().join(RUN_MANIFEST).exists());
        assert!(RunConfig::from_yaml("toy: true\nparams:\n  lambda_threshold: 0.0\n").is_err());
        assert!(RunConfig::from_yaml("toy: true\nbogus: 1\n").is_err());
    }

    #[test]
    fn remote_mode_needs_paths_and_no_tuning() {
        let mut c = RunConfig::default();
        c.backend.url = Some("http://localhost:1".into());
        assert!(c.validate().is_err());
        c.data.train = Some("a.jsonl".into());
        c.data.test = Some("b.jsonl".into());
        assert!(c.validate().is_err());
        c.finetune.enabled = false;
        c.validate().unwrap();
    }

    #[test]
    fn yaml_round_trips() {
        let c = tiny();
        assert_eq!(RunConfig::from_yaml(&c.to_yaml().unwrap()).unwrap(), c);
    }

    #[test]
    fn toy_run_completes_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        let m = run_pipeline(&c, dir.path(), RunOptions::default()).unwrap();
        assert!(m.is_complete());
        let metrics = load_metrics(&dir.path().join(METRICS)).unwrap();
        assert!(metrics.contains_key(&EvalMode::Zsl) && metrics.contains_key(&EvalMode::Gzsl));
        let ledger = GenerationLedger::load(&dir.path().join(LEDGER)).unwrap();
        assert!(ledger.per_category_counts.values().all(|&n| n == 3));
        let before = fs::read(dir.path().join(METRICS)).unwrap();
        let again = run_pipeline(&c, dir.path(), RunOptions::default()).unwrap();
        assert_eq!(again.status(Stage::Train).wall_clock_s, m.status(Stage::Train).wall_clock_s);
        assert_eq!(fs::read(dir.path().join(METRICS)).unwrap(), before);
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny();
        run_pipeline(&c, dir.path(), RunOptions { stop_after: Some(Stage::Prompts) }).unwrap();
        let mut other = c.clone();
        other.params.seed = 12;
        assert!(run_pipeline(&other, dir.path(), RunOptions::default()).is_err());
    }
}
