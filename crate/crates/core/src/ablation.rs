//! Ablation sweeps: one isolated pipeline run per grid cell.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::ToyGlyphWorld;
use crate::builder::GenerationLedger;
use crate::data::{load_manifest, write_file, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::pipeline::{load_metrics, run_pipeline, RunConfig, RunOptions, LEDGER, METRICS, SYNTHETIC};

/// Values to sweep; an empty axis keeps the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub lambda: Vec<f64>,
    pub objects_per_image: Vec<usize>,
    pub k: Vec<usize>,
}

impl AblationGrid {
    pub fn from_yaml(text: &str) -> Result<Self> {
        Ok(serde_yaml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty() && self.objects_per_image.is_empty() && self.k.is_empty()
    }

    /// Cell configs in row-major order (lambda, then objects per image, then K).
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("ablation grid has no values".into()));
        }
        let or_base = |v: &[f64], b: f64| if v.is_empty() { vec![b] } else { v.to_vec() };
        let or_base_u = |v: &[usize], b: usize| if v.is_empty() { vec![b] } else { v.to_vec() };
        let p = &base.params;
        let mut cells = Vec::new();
        for &lambda in &or_base(&self.lambda, p.lambda_threshold) {
            for &j in &or_base_u(&self.objects_per_image, p.objects_per_image_j) {
                for &k in &or_base_u(&self.k, p.positives_per_category_k) {
                    let mut c = base.clone();
                    c.params.lambda_threshold = lambda;
                    c.params.objects_per_image_j = j;
                    c.params.positives_per_category_k = k;
                    c.run_id = Some(format!("{}-l{lambda}-j{j}-k{k}", base.run_id()));
                    c.validate()?;
                    cells.push(c);
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub attempts: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub below_lambda: usize,
    pub rank_fail: usize,
}

impl From<&GenerationLedger> for LedgerSummary {
    fn from(l: &GenerationLedger) -> Self {
        LedgerSummary {
            attempts: l.attempts,
            accepted: l.accepted,
            acceptance_rate: l.acceptance_rate(),
            below_lambda: l.rejections.below_lambda,
            rank_fail: l.rejections.rank_fail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub lambda: f64,
    pub objects_per_image: usize,
    pub k: usize,
    pub error: Option<String>,
    pub ledger: Option<LedgerSummary>,
    /// Kept synthetic records whose pixels lack a credited label (toy runs only).
    pub oracle_false_accepts: Option<usize>,
    pub synthetic_records: Option<usize>,
    /// One report per configured eval mode.
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Count kept synthetic records whose pixel oracle misses one of their positives.
fn false_accepts(config: &RunConfig, cell_dir: &Path) -> Result<(usize, usize)> {
    let ls = config.label_space()?;
    let manifest = load_manifest(&cell_dir.join(SYNTHETIC), &ls, Split::Train)?;
    let world = ToyGlyphWorld::new(ls.names(), config.data.toy.canvas)?;
    let mut bad = 0;
    for r in &manifest.records {
        let seen = world.detect(&*manifest.load_image(r)?);
        if !r.positives.is_subset(&seen) {
            bad += 1;
        }
    }
    Ok((bad, manifest.len()))
}

fn run_cell(config: &RunConfig, name: &str, cell_dir: &Path) -> AblationRow {
    let p = &config.params;
    let mut row = AblationRow {
        cell: name.to_string(),
        lambda: p.lambda_threshold,
        objects_per_image: p.objects_per_image_j,
        k: p.positives_per_category_k,
        error: None,
        ledger: None,
        oracle_false_accepts: None,
        synthetic_records: None,
        reports: Vec::new(),
    };
    let outcome = run_pipeline(config, cell_dir, RunOptions::default());
    // The ledger is worth keeping even when generation ran out of budget.
    if let Ok(l) = GenerationLedger::load(&cell_dir.join(LEDGER)) {
        row.ledger = Some(LedgerSummary::from(&l));
    }
    match outcome {
        Ok(_) => {
            match load_metrics(&cell_dir.join(METRICS)) {
                Ok(m) => row.reports = m.into_values().collect(),
                Err(e) => row.error = Some(e.to_string()),
            }
            if config.toy && config.generate.enabled {
                match false_accepts(config, cell_dir) {
                    Ok((bad, n)) => {
                        row.oracle_false_accepts = Some(bad);
                        row.synthetic_records = Some(n);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
        }
        Err(e) => {
            log::warn!("ablation cell {name} failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Run every cell of `grid` under `out_dir/<cell>`. Cells run in parallel and
/// a failing cell is recorded without stopping the others.
pub fn run_ablation_grid(base: &RunConfig, grid: &AblationGrid, out_dir: &Path) -> Result<AblationTable> {
    let cells = grid.expand(base)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let name = format!("cell-{i:03}");
            run_cell(c, &name, &out_dir.join(&name))
        })
        .collect();
    let table = AblationTable { rows };
    table.save(&out_dir.join("ablation.json"))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_is_row_major_and_validated() {
        let base = RunConfig {
            toy: true,
            ..RunConfig::default()
        };
        let grid = AblationGrid {
            lambda: vec![0.3, 0.7],
            k: vec![5, 10],
            ..AblationGrid::default()
        };
        let cells = grid.expand(&base).unwrap();
        let got: Vec<(f64, usize)> = cells
            .iter()
            .map(|c| (c.params.lambda_threshold, c.params.positives_per_category_k))
            .collect();
        assert_eq!(got, vec![(0.3, 5), (0.3, 10), (0.7, 5), (0.7, 10)]);
        assert!(AblationGrid::default().expand(&base).is_err());
        let bad = AblationGrid {
            lambda: vec![1.2],
            ..AblationGrid::default()
        };
        assert!(bad.expand(&base).is_err());
        assert!(AblationGrid::from_yaml("lambda: [0.5]\nbogus: 1\n").is_err());
    }
}
