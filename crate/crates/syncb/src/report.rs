//! Report files: flat JSON, aligned text tables, history and curve CSVs.

use anyhow::Result;
use serde_json::{Map, Value};
use syncb_core::intervention::InterventionCurve;
use syncb_core::metrics::{EvalReport, Stat};
use syncb_core::training::TrainHistory;

fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

/// Flat JSON object of an aggregated report, keys sorted.
pub fn report_json(model: &str, report: &EvalReport) -> Result<String> {
    let mut map = Map::new();
    map.insert("model".into(), Value::String(model.into()));
    for (key, value) in report.flat_fields() {
        map.insert(key, number(value));
    }
    Ok(serde_json::to_string_pretty(&Value::Object(map))? + "\n")
}

fn pm(stat: Stat) -> String {
    format!("{:.4} ± {:.4}", stat.mean, stat.std)
}

/// Render rows of cells as a left-aligned table with a rule under the header.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_owned() + "\n"
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().take(cols).map(|&w| "-".repeat(w)).collect();
    out += &line(&rule);
    for row in rows {
        out += &line(row);
    }
    out
}

/// Metric / mean ± std table of one report.
pub fn report_table(model: &str, report: &EvalReport) -> String {
    let mut rows = vec![vec!["task accuracy".to_owned(), pm(report.task_accuracy)]];
    let mut push = |name: &str, stat: Option<Stat>| {
        if let Some(s) = stat {
            rows.push(vec![name.to_owned(), pm(s)]);
        }
    };
    push("concept accuracy", report.concept_accuracy);
    push("CB branch accuracy", report.cb_branch_accuracy);
    push("neural branch accuracy", report.nn_branch_accuracy);
    push("fraction routed CB", Some(report.fraction_routed_cb));
    if let Some(q) = report.routing_quantiles {
        push("routing score min", Some(q.min));
        push("routing score q1", Some(q.q1));
        push("routing score median", Some(q.median));
        push("routing score q3", Some(q.q3));
        push("routing score max", Some(q.max));
    }
    let seeds = if report.n_seeds == 1 { "seed" } else { "seeds" };
    let header = [format!("{model} ({} {seeds})", report.n_seeds), "mean ± std".to_owned()];
    aligned_table(&header, &rows)
}

pub fn history_csv(history: &TrainHistory) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "epoch",
        "task_cb",
        "task_nn",
        "task_total",
        "concept",
        "routing",
        "intervention",
        "total",
        "val_task_acc",
        "val_concept_acc",
    ])?;
    for r in history {
        let l = &r.losses;
        let mut row = vec![r.epoch.to_string()];
        row.extend(
            [l.task_cb, l.task_nn, l.task_total, l.concept, l.routing, l.intervention, l.total, r.val_task_acc]
                .iter()
                .map(|v| format!("{v:?}")),
        );
        row.push(r.val_concept_acc.map(|v| format!("{v:?}")).unwrap_or_default());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn curves_csv(curves: &[InterventionCurve]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["policy", "eval_mode", "requested", "budget_fraction", "budget_units", "task_accuracy"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.policy.name().to_owned(),
                c.eval_mode.name().to_owned(),
                format!("{:?}", p.requested),
                format!("{:?}", p.budget_fraction),
                p.budget_units.to_string(),
                format!("{:?}", p.task_accuracy),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
}

pub const ABLATION_COLUMNS: [&str; 4] = ["Concept Acc.", "Task Acc.", "CB Acc.", "Neural Acc."];

fn ablation_cells(report: &EvalReport) -> [Option<Stat>; 4] {
    [
        report.concept_accuracy,
        Some(report.task_accuracy),
        report.cb_branch_accuracy,
        report.nn_branch_accuracy,
    ]
}

/// Percentages as `mean ± std`, one row per variant.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut header = vec!["Variant".to_owned()];
    header.extend(ABLATION_COLUMNS.iter().map(|s| s.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.label.clone()];
            cells.extend(ablation_cells(&r.report).iter().map(|s| match s {
                Some(s) => format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std),
                None => "-".to_owned(),
            }));
            cells
        })
        .collect();
    aligned_table(&header, &body)
}

pub fn ablation_json(rows: &[AblationRow]) -> Result<String> {
    let list: Vec<Value> = rows
        .iter()
        .map(|r| {
            let mut map = Map::new();
            map.insert("variant".into(), Value::String(r.label.clone()));
            for (name, stat) in ABLATION_COLUMNS.iter().zip(ablation_cells(&r.report)) {
                if let Some(s) = stat {
                    let key = name.trim_end_matches('.').to_lowercase().replace(' ', "_");
                    map.insert(format!("{key}_mean"), number(s.mean));
                    map.insert(format!("{key}_std"), number(s.std));
                }
            }
            Value::Object(map)
        })
        .collect();
    Ok(serde_json::to_string_pretty(&list)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use syncb_core::metrics::{aggregate_seeds, EvalMetrics, Quantiles};

    fn report() -> EvalReport {
        let m = |a: f64| EvalMetrics {
            task_accuracy: a,
            concept_accuracy: Some(0.9),
            cb_branch_accuracy: Some(a),
            nn_branch_accuracy: None,
            routing_quantiles: Some(Quantiles::of(&[0.2, 0.6, 0.9])),
            fraction_routed_cb: 0.5,
        };
        aggregate_seeds(&[m(0.8), m(0.9)]).unwrap()
    }

    #[test]
    fn flat_json_has_stable_keys() {
        let text = report_json("syncbm", &report()).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["model"], "syncbm");
        assert!((v["task_accuracy_mean"].as_f64().unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(v["routing_median_mean"].as_f64().unwrap(), 0.6);
        assert!(v.get("nn_branch_accuracy_mean").is_none());
        assert_eq!(v["n_seeds"].as_f64().unwrap(), 2.0);
    }

    #[test]
    fn table_columns_align() {
        let t = aligned_table(
            &["a".into(), "bbb".into()],
            &[vec!["long cell".into(), "x".into()], vec!["s".into(), "yy".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        let col = lines[0].find("bbb").unwrap();
        assert_eq!(lines[2].find('x').unwrap(), col);
        assert_eq!(lines[3].find("yy").unwrap(), col);
    }

    #[test]
    fn ablation_layout() {
        let rows: Vec<AblationRow> = (0..5).map(|i| AblationRow { label: format!("v{i}"), report: report() }).collect();
        let t = ablation_table(&rows);
        assert_eq!(t.lines().count(), 7);
        assert!(t.lines().next().unwrap().contains("Neural Acc."));
        let v: Value = serde_json::from_str(&ablation_json(&rows).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 5);
        assert!(v[0].get("concept_acc_mean").is_some());
    }
}
