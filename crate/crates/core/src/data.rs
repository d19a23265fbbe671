//! Label spaces, sample records, and JSON-Lines dataset manifests.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::Strategy;
use crate::error::{Error, Result};
use crate::filter::SimilarityReport;
use crate::image::Image;

/// The category universe, partitioned into seen and unseen classes.
///
/// Categories are ordered seen-first, then unseen, in the order given.
#[derive(Debug, Clone)]
pub struct LabelSpace {
    names: Vec<String>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceFile {
    seen: Vec<String>,
    unseen: Vec<String>,
}

impl PartialEq for LabelSpace {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.seen == other.seen && self.unseen == other.unseen
    }
}

impl LabelSpace {
    pub fn new<S: AsRef<str>>(seen: &[S], unseen: &[S]) -> Result<Self> {
        let names: Vec<String> = seen
            .iter()
            .chain(unseen.iter())
            .map(|s| s.as_ref().to_string())
            .collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::InvalidLabelSpace("empty category name".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidLabelSpace(format!(
                    "duplicate category name `{name}`"
                )));
            }
        }
        Ok(LabelSpace {
            seen: (0..seen.len()).collect(),
            unseen: (seen.len()..names.len()).collect(),
            names,
            index,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LabelSpaceFile = serde_json::from_str(text)?;
        Self::new(&file.seen, &file.unseen)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = LabelSpaceFile {
            seen: self.seen.iter().map(|&i| self.names[i].clone()).collect(),
            unseen: self.unseen.iter().map(|&i| self.names[i].clone()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("label space serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::UnknownCategory {
            name: name.to_string(),
            line: None,
        })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn is_unseen(&self, index: usize) -> bool {
        index >= self.seen.len() && index < self.names.len()
    }

    pub fn unseen_names(&self) -> Vec<String> {
        self.unseen.iter().map(|&i| self.names[i].clone()).collect()
    }

    pub fn seen_names(&self) -> Vec<String> {
        self.seen.iter().map(|&i| self.names[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a record's pixels live.
#[derive(Debug, Clone)]
pub enum ImageRef {
    /// Path relative to the manifest directory (or absolute).
    Path(PathBuf),
    Memory(Arc<Image>),
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ImageRef::Path(a), ImageRef::Path(b)) => a == b,
            (ImageRef::Memory(a), ImageRef::Memory(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

impl ImageRef {
    pub fn load(&self, base_dir: Option<&Path>) -> Result<Arc<Image>> {
        match self {
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
            ImageRef::Path(p) => {
                let full = match base_dir {
                    Some(base) if p.is_relative() => base.join(p),
                    _ => p.clone(),
                };
                Ok(Arc::new(Image::load_png(&full)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: ImageRef,
    pub positives: BTreeSet<usize>,
    pub provenance: Provenance,
    pub prompt_id: Option<String>,
    pub scores: Option<SimilarityReport>,
}

impl SampleRecord {
    pub fn real(image: ImageRef, positives: BTreeSet<usize>) -> Self {
        SampleRecord {
            image,
            positives,
            provenance: Provenance::Real,
            prompt_id: None,
            scores: None,
        }
    }

    pub fn synthetic(
        image: ImageRef,
        positives: BTreeSet<usize>,
        prompt_id: impl Into<String>,
        scores: Option<SimilarityReport>,
    ) -> Self {
        SampleRecord {
            image,
            positives,
            provenance: Provenance::Synthetic,
            prompt_id: Some(prompt_id.into()),
            scores,
        }
    }

    fn check(&self, labels: &LabelSpace) -> std::result::Result<(), String> {
        if self.positives.is_empty() {
            return Err("record has no positive labels".into());
        }
        if let Some(&bad) = self.positives.iter().find(|&&i| i >= labels.len()) {
            return Err(format!("positive index {bad} outside label space"));
        }
        if self.provenance == Provenance::Synthetic && self.prompt_id.is_none() {
            return Err("synthetic record without prompt_id".into());
        }
        Ok(())
    }
}

/// One line of the manifest JSONL file.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RecordLine {
    pub image: String,
    pub positives: Vec<String>,
    pub provenance: Provenance,
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<SimilarityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_positives: Option<Vec<String>>,
}

impl RecordLine {
    pub(crate) fn from_record(record: &SampleRecord, labels: &LabelSpace) -> Result<Self> {
        let image = match &record.image {
            ImageRef::Path(p) => p.to_string_lossy().replace('\\', "/"),
            ImageRef::Memory(_) => {
                return Err(Error::InvalidRecord(
                    "in-memory image cannot be written to a manifest".into(),
                ))
            }
        };
        Ok(RecordLine {
            image,
            positives: record
                .positives
                .iter()
                .map(|&i| labels.name(i).to_string())
                .collect(),
            provenance: record.provenance,
            prompt_id: record.prompt_id.clone(),
            scores: record.scores.clone(),
            accepted: None,
            final_positives: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub label_space: LabelSpace,
    pub records: Vec<SampleRecord>,
    pub split: Split,
    /// Directory relative image paths resolve against.
    pub base_dir: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(label_space: LabelSpace, split: Split) -> Self {
        DatasetManifest {
            label_space,
            records: Vec::new(),
            split,
            base_dir: None,
        }
    }

    /// Build from in-memory records, applying the same checks as [`load_manifest`].
    pub fn from_records(
        label_space: LabelSpace,
        split: Split,
        records: Vec<SampleRecord>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            label_space,
            records,
            split,
            base_dir: None,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, record) in self.records.iter().enumerate() {
            self.validate_record(record, i + 1)?;
        }
        Ok(())
    }

    fn validate_record(&self, record: &SampleRecord, line: usize) -> Result<()> {
        record
            .check(&self.label_space)
            .map_err(|m| Error::InvalidRecord(format!("line {line}: {m}")))?;
        if self.split == Split::Train {
            match record.provenance {
                Provenance::Real => {
                    if let Some(&u) = record
                        .positives
                        .iter()
                        .find(|&&i| self.label_space.is_unseen(i))
                    {
                        return Err(Error::SplitContamination {
                            line,
                            category: self.label_space.name(u).to_string(),
                        });
                    }
                }
                Provenance::Synthetic => {
                    if !record.positives.iter().any(|&i| self.label_space.is_unseen(i)) {
                        return Err(Error::InvalidRecord(format!(
                            "line {line}: synthetic training record has no unseen positive"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-category count of records carrying that category as a positive.
    pub fn positive_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_space.len()];
        for r in &self.records {
            for &p in &r.positives {
                counts[p] += 1;
            }
        }
        counts
    }

    pub fn load_image(&self, record: &SampleRecord) -> Result<Arc<Image>> {
        record.image.load(self.base_dir.as_deref())
    }

    pub fn count_provenance(&self, provenance: Provenance) -> usize {
        self.records
            .iter()
            .filter(|r| r.provenance == provenance)
            .count()
    }
}

/// Parse and validate a manifest. Image paths resolve against the file's directory.
pub fn load_manifest(path: &Path, label_space: &LabelSpace, split: Split) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = DatasetManifest::new(label_space.clone(), split);
    manifest.base_dir = path.parent().map(Path::to_path_buf);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = record_from_line(parsed, label_space, line_no)?;
        manifest.validate_record(&record, line_no)?;
        manifest.records.push(record);
    }
    Ok(manifest)
}

pub(crate) fn record_from_line(
    line: RecordLine,
    labels: &LabelSpace,
    line_no: usize,
) -> Result<SampleRecord> {
    let mut positives = BTreeSet::new();
    for name in &line.positives {
        let idx = labels.index_of(name).ok_or_else(|| Error::UnknownCategory {
            name: name.clone(),
            line: Some(line_no),
        })?;
        positives.insert(idx);
    }
    Ok(SampleRecord {
        image: ImageRef::Path(PathBuf::from(line.image)),
        positives,
        provenance: line.provenance,
        prompt_id: line.prompt_id,
        scores: line.scores,
    })
}

pub fn manifest_to_jsonl(manifest: &DatasetManifest) -> Result<String> {
    let mut out = String::new();
    for record in &manifest.records {
        let line = RecordLine::from_record(record, &manifest.label_space)?;
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    write_file(path, manifest_to_jsonl(manifest)?.as_bytes())
}

/// Concatenate two manifests over the same label space; records are not modified.
pub fn merge_datasets(real: &DatasetManifest, synthetic: &DatasetManifest) -> Result<DatasetManifest> {
    if real.label_space != synthetic.label_space {
        return Err(Error::LabelSpaceMismatch);
    }
    let mut records = real.records.clone();
    records.extend(synthetic.records.iter().cloned());
    // Relative paths from two directories cannot share one base; make them absolute.
    if real.base_dir != synthetic.base_dir {
        for (record, base) in records.iter_mut().zip(
            std::iter::repeat_n(real.base_dir.as_ref(), real.records.len())
                .chain(std::iter::repeat(synthetic.base_dir.as_ref())),
        ) {
            if let (ImageRef::Path(p), Some(base)) = (&mut record.image, base) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
    let base_dir = if real.base_dir == synthetic.base_dir {
        real.base_dir.clone()
    } else {
        None
    };
    Ok(DatasetManifest {
        label_space: real.label_space.clone(),
        records,
        split: real.split,
        base_dir,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn default_lambda() -> f64 {
    0.5
}
fn default_j() -> usize {
    2
}
fn default_k() -> usize {
    200
}
fn default_gamma_minus() -> f64 {
    4.0
}
fn default_tau() -> f64 {
    0.07
}

/// Hyper-parameters shared by the generation, filtering and training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_lambda")]
    pub lambda_threshold: f64,
    #[serde(default = "default_j")]
    pub objects_per_image_j: usize,
    #[serde(default = "default_k", rename = "positives_per_category_k")]
    pub positives_per_category_k: usize,
    #[serde(default)]
    pub topk_fine_grained: Option<usize>,
    #[serde(default)]
    pub gamma_plus: f64,
    #[serde(default = "default_gamma_minus")]
    pub gamma_minus: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            lambda_threshold: default_lambda(),
            objects_per_image_j: default_j(),
            positives_per_category_k: default_k(),
            topk_fine_grained: None,
            gamma_plus: 0.0,
            gamma_minus: default_gamma_minus(),
            tau: default_tau(),
            seed: 0,
            strategy: Strategy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda_threshold > 0.0 && self.lambda_threshold < 1.0) {
            return bad(format!(
                "lambda_threshold must lie in (0, 1), got {}",
                self.lambda_threshold
            ));
        }
        if self.objects_per_image_j == 0 {
            return bad("objects_per_image_j must be positive".into());
        }
        if self.positives_per_category_k == 0 {
            return bad("positives_per_category_k must be positive".into());
        }
        if self.topk_fine_grained == Some(0) {
            return bad("topk_fine_grained must be positive when set".into());
        }
        if !(self.gamma_plus >= 0.0 && self.gamma_plus.is_finite()) {
            return bad(format!("gamma_plus must be >= 0, got {}", self.gamma_plus));
        }
        if !(self.gamma_minus >= 0.0 && self.gamma_minus.is_finite()) {
            return bad(format!("gamma_minus must be >= 0, got {}", self.gamma_minus));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        Ok(())
    }
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} categories ({} seen, {} unseen)",
            self.len(),
            self.seen.len(),
            self.unseen.len()
        )
    }
}
