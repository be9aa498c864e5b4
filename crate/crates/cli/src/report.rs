use std::fmt::Write as _;
use std::path::Path;

use ladder_core::artifacts::{read_json, write_text, MetricsFile, SlicesFile};
use ladder_core::pipeline::ModelMetrics;
use serde_json::json;

use crate::stages::run_paths;
use crate::CliError;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |x| format!("{x:.3}"))
}

fn escape(cell: &str) -> String {
    cell.replace('|', "\\|").replace('\n', " ")
}

fn model_row(out: &mut String, m: &ModelMetrics) {
    let (wga, cell) = m.wga.as_ref().map_or(("–".to_string(), "–".to_string()), |g| (format!("{:.3}", g.worst), g.worst_cell.clone()));
    let _ = writeln!(out, "| {} | {:.3} | {} | {} | {} |", escape(&m.name), m.mean_accuracy, wga, escape(&cell), opt(m.mean_auroc));
}

pub fn render(slices: &SlicesFile, metrics: Option<&MetricsFile>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Error slice report: {}\n", slices.dataset);
    let _ = writeln!(
        out,
        "Similarity `{}`, threshold policy `{}`, gap threshold {:.3}.\n",
        slices.similarity, slices.tau, slices.gap_threshold
    );

    if slices.reports.is_empty() {
        out.push_str("## No hypotheses\n\nThe hypothesis stage produced no hypotheses, so no slice was tested.\n");
    } else {
        let flagged = slices.reports.iter().filter(|r| r.is_error_slice).count();
        let _ = writeln!(out, "{flagged} of {} hypotheses flag an error slice.\n", slices.reports.len());
        let mut classes: Vec<usize> = slices.reports.iter().map(|r| r.class_label).collect();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let name = slices.class_names.get(c).map_or(String::new(), |n| format!(" ({})", escape(n)));
            let _ = writeln!(out, "## Class {c}{name}\n");
            out.push_str("| Hypothesis | Attribute | Slice size | Accuracy present | Accuracy absent | Gap | Error slice |\n");
            out.push_str("|---|---|---:|---:|---:|---:|:---:|\n");
            for r in slices.reports.iter().filter(|r| r.class_label == c) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} / {} | {} | {} | {:.3} | {} |",
                    escape(&r.hypothesis_id),
                    escape(&r.attribute),
                    r.slice_size,
                    r.class_size,
                    opt(r.accuracy_present),
                    opt(r.accuracy_absent),
                    r.gap,
                    if r.is_error_slice { "✓" } else { "" }
                );
            }
            out.push('\n');
        }
    }

    out.push_str("## Mitigation\n\n");
    match metrics {
        None => out.push_str("Not evaluated: run `ladder eval` to add before/after accuracy.\n"),
        Some(m) => {
            let e = &m.eval;
            let _ = writeln!(out, "Evaluated on `{}` ({} samples), groups by {}.\n", e.dataset, e.n_samples, e.group_keys.join(", "));
            out.push_str("| Model | Mean accuracy | WGA | Worst group | Mean AUROC |\n");
            out.push_str("|---|---:|---:|---|---:|\n");
            model_row(&mut out, &e.source);
            model_row(&mut out, &e.erm_head);
            model_row(&mut out, &e.ensemble);
            for h in &e.heads {
                model_row(&mut out, h);
            }
            if !m.precision_at_k.is_empty() {
                out.push_str("\n| k | Precision@k |\n|---:|---:|\n");
                let mut ks: Vec<(&String, &f64)> = m.precision_at_k.iter().collect();
                ks.sort_by_key(|(k, _)| k.parse::<usize>().unwrap_or(usize::MAX));
                for (k, p) in ks {
                    let _ = writeln!(out, "| {k} | {p:.3} |");
                }
            }
            if !e.routing.is_empty() {
                out.push_str("\n| Head | Attribute | Routed samples | CLIP score |\n|---|---|---:|---:|\n");
                for u in &e.routing {
                    let _ = writeln!(out, "| {} | {} | {} | {} |", escape(&u.hypothesis_id), escape(&u.attribute), u.routed, opt(u.clip_score));
                }
            }
        }
    }
    out
}

pub fn render_to_file(run_dir: &Path, output: &Path) -> Result<serde_json::Value, CliError> {
    let (slices_path, metrics_path) = run_paths(run_dir);
    if !slices_path.exists() {
        return Err(CliError::new("MissingInput", format!("{} not found; run `ladder slices` first", slices_path.display())));
    }
    let slices: SlicesFile = read_json(&slices_path)?;
    let metrics: Option<MetricsFile> = if metrics_path.exists() { Some(read_json(&metrics_path)?) } else { None };
    write_text(output, &render(&slices, metrics.as_ref()))?;
    Ok(json!({"stage": "report", "output": output.display().to_string(), "with_metrics": metrics.is_some()}))
}
