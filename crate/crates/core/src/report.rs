//! Static run reports: a markdown metrics table plus SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::ablation::AblationTable;
use crate::builder::GenerationLedger;
use crate::data::write_file;
use crate::error::{Error, Result};
use crate::metrics::EvalMode;
use crate::pipeline::{load_metrics, FinetuneSummary, RunManifest, FINETUNE_SUMMARY, LEDGER, METRICS};

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Stage {
        stage: "report".into(),
        message: e.to_string(),
    }
}

fn mode_name(m: EvalMode) -> &'static str {
    match m {
        EvalMode::Zsl => "ZSL",
        EvalMode::Gzsl => "GZSL",
    }
}

fn line_plot(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x0 == x1 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    let pad = 0.05 * (x1 - x0);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Write `report/metrics.md`, `report/qualified_rate.svg` and `report/topk_sweep.svg`.
pub fn emit_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::load(run_dir)?;
    if !manifest.is_complete() {
        let missing: Vec<&str> = manifest
            .stages
            .iter()
            .filter(|s| !s.complete)
            .map(|s| s.stage.name())
            .collect();
        return Err(Error::IncompleteRun(format!("stages not complete: {}", missing.join(", "))));
    }
    let metrics = load_metrics(&run_dir.join(METRICS))?;
    let summary = FinetuneSummary::load(&run_dir.join(FINETUNE_SUMMARY)).ok();
    let ledger = GenerationLedger::load(&run_dir.join(LEDGER)).ok();
    let out = run_dir.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut md = String::new();
    let _ = writeln!(md, "# Run `{}`\n", manifest.run_id);
    let _ = writeln!(md, "| mode | classes | images | mAP |");
    let _ = writeln!(md, "|---|---|---|---|");
    for (mode, r) in &metrics {
        let _ = writeln!(md, "| {} | {} | {} | {:.4} |", mode_name(*mode), r.classes.len(), r.images, r.map);
    }
    for (mode, r) in &metrics {
        let _ = writeln!(md, "\n## {} top-K\n", mode_name(*mode));
        let _ = writeln!(md, "| K | precision | recall | F1 |");
        let _ = writeln!(md, "|---|---|---|---|");
        for (k, p) in &r.per_k {
            let _ = writeln!(md, "| {k} | {:.4} | {:.4} | {:.4} |", p.precision, p.recall, p.f1);
        }
        let _ = writeln!(md, "\n| class | AP |");
        let _ = writeln!(md, "|---|---|");
        for (c, ap) in r.classes.iter().zip(&r.per_class_ap) {
            let ap = ap.map_or("excluded".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(md, "| {c} | {ap} |");
        }
    }
    if let Some(l) = &ledger {
        let _ = writeln!(md, "\n## Generation\n");
        let _ = writeln!(
            md,
            "{} attempts, {} accepted ({:.1}%), {} below threshold, {} failed the rank rule, {} backend errors, {} surplus.\n",
            l.attempts,
            l.accepted,
            100.0 * l.acceptance_rate(),
            l.rejections.below_lambda,
            l.rejections.rank_fail,
            l.rejections.backend_error,
            l.surplus
        );
        let _ = writeln!(md, "| category | credited |");
        let _ = writeln!(md, "|---|---|");
        for (c, n) in &l.per_category_counts {
            let _ = writeln!(md, "| {c} | {n}/{} |", l.k);
        }
    }
    let fmt_rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{:.3}", v));
    if let Some(s) = &summary {
        let _ = writeln!(md, "\n## Qualified rate\n");
        let _ = writeln!(
            md,
            "before tuning: {}, after tuning: {} ({} generations each)",
            fmt_rate(s.qualified_rate_before),
            fmt_rate(s.qualified_rate_after),
            s.samples
        );
    }
    let md_path = out.join("metrics.md");
    write_file(&md_path, md.as_bytes())?;

    let qr_path = out.join("qualified_rate.svg");
    let mut qr: Vec<(f64, f64)> = Vec::new();
    if let Some(s) = &summary {
        if let Some(b) = s.qualified_rate_before {
            qr.push((0.0, b));
        }
        if let Some(a) = s.qualified_rate_after {
            qr.push((1.0, a));
        }
    }
    line_plot(
        &qr_path,
        "Qualified rate before (0) and after (1) tuning",
        "tuning",
        &[("qualified rate".to_string(), qr)],
    )?;

    let sweep_path = out.join("topk_sweep.svg");
    let mut series = Vec::new();
    for (mode, r) in &metrics {
        let pts = |f: fn(&crate::metrics::Prf) -> f64| r.per_k.iter().map(|(k, p)| (*k as f64, f(p))).collect();
        series.push((format!("{} precision", mode_name(*mode)), pts(|p| p.precision)));
        series.push((format!("{} recall", mode_name(*mode)), pts(|p| p.recall)));
        series.push((format!("{} F1", mode_name(*mode)), pts(|p| p.f1)));
    }
    line_plot(&sweep_path, "Top-K sweep", "K", &series)?;
    Ok(vec![md_path, qr_path, sweep_path])
}

/// Write `ablation.md` (rows sorted by lambda) and `ablation.svg` under `out_dir`.
pub fn emit_ablation_report(table: &AblationTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::EmptyInput("ablation table has no rows".into()));
    }
    let mut rows: Vec<_> = table.rows.iter().collect();
    rows.sort_by(|a, b| {
        a.lambda
            .total_cmp(&b.lambda)
            .then(a.objects_per_image.cmp(&b.objects_per_image))
            .then(a.k.cmp(&b.k))
    });
    let mut md = String::from("| lambda | j | K | acceptance | false accepts | mAP | status |\n|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let acc = r.ledger.as_ref().map_or("n/a".into(), |l| format!("{:.3}", l.acceptance_rate));
        let fa = match (r.oracle_false_accepts, r.synthetic_records) {
            (Some(b), Some(n)) => format!("{b}/{n}"),
            _ => "n/a".into(),
        };
        let map = r.reports.first().map_or("n/a".into(), |e| format!("{:.4}", e.map));
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {}", e.replace('|', "/")));
        let _ = writeln!(md, "| {} | {} | {} | {acc} | {fa} | {map} | {status} |", r.lambda, r.objects_per_image, r.k);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let md_path = out_dir.join("ablation.md");
    write_file(&md_path, md.as_bytes())?;
    let svg_path = out_dir.join("ablation.svg");
    let map_pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.reports.first().map(|e| (r.lambda, e.map)))
        .collect();
    let acc_pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.ledger.as_ref().map(|l| (r.lambda, l.acceptance_rate)))
        .collect();
    line_plot(
        &svg_path,
        "Sweep over the acceptance threshold",
        "lambda",
        &[("mAP".into(), map_pts), ("acceptance rate".into(), acc_pts)],
    )?;
    Ok(vec![md_path, svg_path])
}
