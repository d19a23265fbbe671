//! Prompt construction: fixed templates, LLM elaboration with a containment
//! check, and the on-disk prompt store.

use std::collections::BTreeMap;
use std::path::Path;

use itertools::Itertools;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::InstructionLlmBackend;
use crate::data::{write_file, LabelSpace};
use crate::error::{Error, Result};

/// Retries allowed per prompt still missing after the first request.
pub const RETRIES_PER_MISSING: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Fixed,
    LlmAugmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub categories: Vec<String>,
    #[serde(rename = "fixed")]
    pub fixed_template_text: String,
    #[serde(rename = "augmented")]
    pub augmented_text: String,
    pub source: PromptSource,
}

impl PromptRecord {
    /// The text sent to the generator.
    pub fn text(&self) -> &str {
        &self.augmented_text
    }
}

pub fn fill_fixed_template<S: AsRef<str>>(categories: &[S]) -> Result<String> {
    if categories.is_empty() {
        return Err(Error::EmptyInput("category tuple".into()));
    }
    let chain = categories.iter().map(|c| c.as_ref()).join(" next to a ");
    Ok(format!("A photo of a {chain}."))
}

/// Instruction for the LLM. The wording is our own reconstruction of an
/// in-context rewriting prompt; the `Objects:` line is machine-readable.
pub fn build_icl_instruction<S: AsRef<str>>(categories: &[S], n_prompts: usize) -> String {
    let names: Vec<&str> = categories.iter().map(|c| c.as_ref()).collect();
    let fixed = fill_fixed_template(&names).unwrap_or_default();
    let plural = if n_prompts == 1 { "caption" } else { "captions" };
    format!(
        "You write captions for a text-to-image model.\n\
         Example input: \"A photo of a cat next to a bus.\"\n\
         Example output: \"A cat perched on top of a bus next to a bustling city street.\"\n\
         Rewrite the input caption below into exactly {n_prompts} new {plural}, one per line.\n\
         Each caption must describe a different realistic scene and mention every listed object by its exact name.\n\
         Input: \"{fixed}\"\n\
         Objects: {}\n\
         Count: {n_prompts}",
        names.join(" | ")
    )
}

/// Case-insensitive check that every category name occurs in `text`.
pub fn mentions_all<S: AsRef<str>>(text: &str, categories: &[S]) -> bool {
    let lower = text.to_lowercase();
    categories
        .iter()
        .all(|c| lower.contains(&c.as_ref().to_lowercase()))
}

pub fn tuple_key<S: AsRef<str>>(categories: &[S]) -> String {
    categories.iter().map(|c| c.as_ref()).join("+")
}

fn clean_completion(text: &str) -> String {
    text.trim().trim_matches('"').trim().to_string()
}

/// Ask `llm` for `n` elaborations of the tuple, dropping outputs that fail the
/// containment check and re-asking within a bounded budget.
pub fn augment_prompts<S: AsRef<str>>(
    llm: &dyn InstructionLlmBackend,
    categories: &[S],
    n: usize,
) -> Result<Vec<PromptRecord>> {
    let names: Vec<String> = categories.iter().map(|c| c.as_ref().to_string()).collect();
    let fixed = fill_fixed_template(&names)?;
    let instruction = build_icl_instruction(&names, n);
    let mut accepted: Vec<String> = Vec::with_capacity(n);
    let take = |texts: Vec<String>, accepted: &mut Vec<String>| {
        for t in texts.into_iter().map(|t| clean_completion(&t)) {
            if accepted.len() == n {
                break;
            }
            if mentions_all(&t, &names) {
                accepted.push(t);
            } else {
                log::debug!("dropping prompt missing a target: {t:?}");
            }
        }
    };
    if n > 0 {
        take(llm.complete(&instruction, n)?, &mut accepted);
    }
    let mut budget = RETRIES_PER_MISSING * (n - accepted.len());
    let mut round = 1;
    while accepted.len() < n && budget > 0 {
        let missing = (n - accepted.len()).min(budget);
        budget -= missing;
        // A round marker keeps deterministic backends from repeating themselves.
        let retry = format!("{instruction}\nRound: {round}");
        let retry = retry.replace(&format!("Count: {n}"), &format!("Count: {missing}"));
        take(llm.complete(&retry, missing)?, &mut accepted);
        round += 1;
    }
    if accepted.len() < n {
        return Err(Error::InsufficientValidPrompts {
            categories: names,
            wanted: n,
            got: accepted.len(),
        });
    }
    let key = tuple_key(&names);
    Ok(accepted
        .into_iter()
        .enumerate()
        .map(|(i, text)| PromptRecord {
            id: format!("{key}#{i}"),
            categories: names.clone(),
            fixed_template_text: fixed.clone(),
            augmented_text: text,
            source: PromptSource::LlmAugmented,
        })
        .collect())
}

/// The single fixed-template record for a tuple, used when no LLM is involved.
pub fn fixed_prompt<S: AsRef<str>>(categories: &[S]) -> Result<PromptRecord> {
    let names: Vec<String> = categories.iter().map(|c| c.as_ref().to_string()).collect();
    let fixed = fill_fixed_template(&names)?;
    Ok(PromptRecord {
        id: format!("{}#fixed", tuple_key(&names)),
        categories: names,
        fixed_template_text: fixed.clone(),
        augmented_text: fixed,
        source: PromptSource::Fixed,
    })
}

/// All unordered `n`-combinations of the (unseen or all) categories, in label-space order.
pub fn enumerate_category_pairs(
    label_space: &LabelSpace,
    unseen_only: bool,
    n: usize,
) -> Result<Vec<Vec<String>>> {
    let pool = if unseen_only {
        label_space.unseen_names()
    } else {
        label_space.names().to_vec()
    };
    if n == 0 || pool.len() < n {
        return Err(Error::TooFewCategories {
            needed: n.max(1),
            available: pool.len(),
        });
    }
    Ok(pool.into_iter().combinations(n).collect())
}

/// Append-only collection of prompt records, indexed by unordered category tuple.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptStore {
    records: Vec<PromptRecord>,
    by_tuple: BTreeMap<Vec<String>, Vec<usize>>,
}

fn sorted(categories: &[String]) -> Vec<String> {
    let mut key = categories.to_vec();
    key.sort();
    key
}

impl PromptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<PromptRecord>) -> Result<Self> {
        let mut store = Self::new();
        for r in records {
            store.push(r)?;
        }
        Ok(store)
    }

    pub fn push(&mut self, record: PromptRecord) -> Result<()> {
        if record.categories.is_empty() {
            return Err(Error::InvalidRecord(format!("prompt {} has no categories", record.id)));
        }
        if !mentions_all(&record.augmented_text, &record.categories) {
            return Err(Error::InvalidRecord(format!(
                "prompt {} does not mention all of {:?}",
                record.id, record.categories
            )));
        }
        self.by_tuple
            .entry(sorted(&record.categories))
            .or_default()
            .push(self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose category set equals `categories`, in insertion order.
    pub fn for_tuple(&self, categories: &[String]) -> Vec<&PromptRecord> {
        self.by_tuple
            .get(&sorted(categories))
            .map(|ix| ix.iter().map(|&i| &self.records[i]).collect())
            .unwrap_or_default()
    }

    /// Uniform draw over the tuple's records.
    pub fn sample<R: Rng>(&self, categories: &[String], rng: &mut R) -> Result<&PromptRecord> {
        let ix = self
            .by_tuple
            .get(&sorted(categories))
            .filter(|ix| !ix.is_empty())
            .ok_or_else(|| Error::MissingPrompts(categories.to_vec()))?;
        Ok(&self.records[ix[rng.random_range(0..ix.len())]])
    }

    /// Error on the first tuple that has no record.
    pub fn check_complete(&self, tuples: &[Vec<String>]) -> Result<()> {
        match tuples.iter().find(|t| self.for_tuple(t).is_empty()) {
            Some(t) => Err(Error::MissingPrompts(t.clone())),
            None => Ok(()),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl()?.as_bytes())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: PromptRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Self::from_records(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Build the store for every `n_objects`-combination of unseen categories.
/// `n_per_tuple = 0` stores only the fixed template for each tuple.
pub fn build_prompt_store(
    llm: Option<&dyn InstructionLlmBackend>,
    label_space: &LabelSpace,
    n_objects: usize,
    n_per_tuple: usize,
) -> Result<PromptStore> {
    let tuples = enumerate_category_pairs(label_space, true, n_objects)?;
    let batches: Vec<Vec<PromptRecord>> = tuples
        .par_iter()
        .map(|t| match llm {
            Some(llm) if n_per_tuple > 0 => augment_prompts(llm, t, n_per_tuple),
            _ => Ok(vec![fixed_prompt(t)?]),
        })
        .collect::<Result<_>>()?;
    let store = PromptStore::from_records(batches.into_iter().flatten().collect())?;
    store.check_complete(&tuples)?;
    Ok(store)
}
