use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use forge_core::ablation::{run_ablation_grid, AblationGrid};
use forge_core::classifier::{predict, ClassifierState};
use forge_core::data::{load_manifest, save_manifest, DatasetManifest, ImageRef, Split};
use forge_core::image::Image;
use forge_core::metrics::{evaluate, Averaging, EvalMode};
use forge_core::pipeline::{refilter_manifest, run_pipeline, RunConfig, RunManifest, RunOptions, Stage, RUN_MANIFEST};
use forge_core::report::{emit_ablation_report, emit_report};

#[derive(Parser, Debug)]
#[command(name = "forge", version, about = "Synthetic-data pipeline for zero-shot multi-label classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run config (YAML). Defaults to the snapshot in the run directory, if any.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; defaults to runs/<run id>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Use the procedural toy backends and data.
    #[arg(long, global = true, conflicts_with = "backend_url")]
    toy: bool,
    #[arg(long, global = true, env = "ZSMLC_BACKEND_URL")]
    backend_url: Option<String>,
    #[arg(long, global = true)]
    backend_timeout_s: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the prompt store.
    Prompts,
    /// Tune the generator's text encoder (runs earlier stages if needed).
    Finetune,
    /// Build the filtered synthetic dataset (runs earlier stages if needed).
    Generate,
    /// Re-score a manifest with the discriminator and keep qualified records.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge real and synthetic data and train the classifier.
    Train,
    /// Score images with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated class names; defaults to every class.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "zsl")]
        mode: EvalMode,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        topk: Vec<usize>,
        #[arg(long)]
        macro_average: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one pipeline per cell of a parameter grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage and write the report.
    Run,
}

fn resolve_config(g: &Global) -> Result<(RunConfig, PathBuf)> {
    let mut config = match (&g.config, &g.run_dir) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(dir)) if dir.join(RUN_MANIFEST).exists() => RunManifest::load(dir)?.config,
        _ => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.params.seed = seed;
    }
    if g.toy {
        config.toy = true;
    }
    if let Some(url) = &g.backend_url {
        config.toy = false;
        config.backend.url = Some(url.clone());
    }
    if let Some(t) = g.backend_timeout_s {
        config.backend.timeout_s = t;
    }
    config.validate().context("invalid config")?;
    let run_dir = g
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(config.run_id()));
    Ok((config, run_dir))
}

fn run_until(g: &Global, stage: Stage) -> Result<()> {
    let (config, run_dir) = resolve_config(g)?;
    let manifest = run_pipeline(&config, &run_dir, RunOptions { stop_after: Some(stage) })?;
    for s in &manifest.stages {
        if s.complete {
            println!("{:<9} done  {}", s.stage.name(), s.artifacts.join(", "));
        }
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

/// Point relative image paths at `out_dir`, falling back to absolute paths.
fn anchor_paths(manifest: &mut DatasetManifest, out_dir: &Path) -> Result<()> {
    let base = std::path::absolute(manifest.base_dir.clone().unwrap_or_default())?;
    let out_dir = std::path::absolute(out_dir)?;
    for r in &mut manifest.records {
        if let ImageRef::Path(p) = &mut r.image {
            if p.is_relative() {
                let full = base.join(&*p);
                *p = full.strip_prefix(&out_dir).map(Path::to_path_buf).unwrap_or(full);
            }
        }
    }
    manifest.base_dir = Some(out_dir);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    match &cli.command {
        Command::Prompts => run_until(g, Stage::Prompts)?,
        Command::Finetune => run_until(g, Stage::Finetune)?,
        Command::Generate => run_until(g, Stage::Generate)?,
        Command::Train => run_until(g, Stage::Train)?,
        Command::Run => {
            let (config, run_dir) = resolve_config(g)?;
            run_pipeline(&config, &run_dir, RunOptions::default())?;
            for f in emit_report(&run_dir)? {
                println!("wrote {}", f.display());
            }
            print!("{}", std::fs::read_to_string(run_dir.join("report/metrics.md"))?);
        }
        Command::Filter { manifest, out } => {
            let (config, _) = resolve_config(g)?;
            let ls = config.label_space()?;
            let input = load_manifest(manifest, &ls, Split::Train)?;
            let outcome = refilter_manifest(&config, &input)?;
            let mut kept = outcome.kept;
            anchor_paths(&mut kept, out.parent().unwrap_or(Path::new(".")))?;
            save_manifest(&kept, out)?;
            println!("kept {} of {} records -> {}", kept.len(), input.len(), out.display());
        }
        Command::Predict { ckpt, labels, images } => {
            let state = ClassifierState::load(ckpt)?;
            let labels = if labels.is_empty() {
                state.classes().to_vec()
            } else {
                labels.clone()
            };
            for path in images {
                let image = Image::load_png(path)?;
                let scores = predict(&image, &state, &labels)?;
                let by_name: BTreeMap<&str, f64> = labels.iter().map(String::as_str).zip(scores).collect();
                println!("{}", serde_json::json!({ "image": path, "scores": by_name }));
            }
        }
        Command::Eval {
            ckpt,
            test,
            mode,
            topk,
            macro_average,
            out,
        } => {
            let state = ClassifierState::load(ckpt)?;
            let ls = state.label_space()?;
            let test = load_manifest(test, &ls, Split::Test)?;
            let averaging = if *macro_average { Averaging::Macro } else { Averaging::Micro };
            let report = evaluate(&state, &test, *mode, topk, averaging)?;
            match out {
                Some(path) => {
                    report.save(path)?;
                    println!("wrote {}", path.display());
                }
                None => println!("{}", report.to_json()?),
            }
        }
        Command::Ablate { grid, out } => {
            let (config, run_dir) = resolve_config(g)?;
            let grid = AblationGrid::load(grid)?;
            if grid.is_empty() {
                bail!("ablation grid has no values");
            }
            let out_dir = out.clone().unwrap_or(run_dir);
            let table = run_ablation_grid(&config, &grid, &out_dir)?;
            let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
            for f in emit_ablation_report(&table, &out_dir)? {
                println!("wrote {}", f.display());
            }
            println!("{} cells, {} failed", table.rows.len(), failed);
        }
    }
    Ok(())
}
