use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{EvalError, Metric, ProbeResult, SEQUENCE_AGGREGATION};
use crate::dataset::TaskLevel;

const CSV_HEADER: [&str; 7] = ["task", "level", "metric", "value", "embedding", "split", "seed"];

pub fn results_to_csv(results: &[ProbeResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("header");
    for r in results {
        w.serialize((&r.task, r.level, r.metric, r.value, &r.embedding, &r.split, r.seed))
            .expect("row");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn read_results(path: &Path) -> Result<Vec<ProbeResult>, EvalError> {
    let err = |msg: String| EvalError::Io {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(err(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    r.deserialize().map(|row| row.map_err(|e| err(e.to_string()))).collect()
}

/// Run label of a result file: its parent directory for `results.csv`,
/// otherwise its stem.
fn run_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "results" {
        if let Some(dir) = path.parent().and_then(Path::file_name) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

/// Reads result files as labelled runs. A file whose bytes equal an earlier
/// file is dropped, so merging duplicates changes nothing.
pub fn merge_result_files(paths: &[PathBuf]) -> Result<Vec<(String, Vec<ProbeResult>)>, EvalError> {
    let mut seen: Vec<Vec<u8>> = Vec::new();
    let mut runs: Vec<(String, Vec<ProbeResult>)> = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| EvalError::Io {
            path: p.clone(),
            msg: e.to_string(),
        })?;
        if seen.contains(&bytes) {
            log::info!("{} duplicates an earlier result file; ignored", p.display());
            continue;
        }
        seen.push(bytes);
        let mut label = run_label(p);
        let base = label.clone();
        let mut k = 2;
        while runs.iter().any(|(l, _)| *l == label) {
            label = format!("{base}#{k}");
            k += 1;
        }
        runs.push((label, read_results(p)?));
    }
    Ok(runs)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_value(metric: Metric, v: f64) -> String {
    match metric {
        Metric::F1 => format!("{v:.2}"),
        Metric::Mse => format!("{v:.4}"),
    }
}

fn row_label(run: &str, embedding: &str, single_run: bool) -> String {
    if single_run {
        embedding.to_string()
    } else {
        format!("{run}/{embedding}")
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let pad = widths[c] - s.chars().count();
                if c == 0 {
                    format!("{s}{}", " ".repeat(pad))
                } else {
                    format!("{}{s}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Per-level tables: one row per run and embedding, one column per task,
/// values averaged over seeds. The best entry of each column carries `*`.
pub fn render_table(runs: &[(String, Vec<ProbeResult>)]) -> String {
    let single = runs.len() == 1;
    let mut out = String::new();
    for (level, title) in [
        (TaskLevel::Sequence, "Sequence-level"),
        (TaskLevel::Frame, "Frame-level"),
    ] {
        let mut tasks: Vec<(String, Metric)> = Vec::new();
        let mut rows: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for (run, results) in runs {
            for r in results.iter().filter(|r| r.level == level) {
                if !tasks.iter().any(|(t, _)| *t == r.task) {
                    tasks.push((r.task.clone(), r.metric));
                }
                let label = row_label(run, &r.embedding, single);
                if !rows.contains(&label) {
                    rows.push(label.clone());
                }
                cells.entry((label, r.task.clone())).or_default().push(r.value);
            }
        }
        let _ = writeln!(out, "{title}");
        if tasks.is_empty() {
            out.push_str("  (no tasks)\n\n");
            continue;
        }
        let best: Vec<Option<f64>> = tasks
            .iter()
            .map(|(t, m)| {
                let vals = rows
                    .iter()
                    .filter_map(|r| cells.get(&(r.clone(), t.clone())).map(|v| mean(v)));
                if m.higher_is_better() {
                    vals.reduce(f64::max)
                } else {
                    vals.reduce(f64::min)
                }
            })
            .collect();
        let mut grid = vec![std::iter::once("embedding".to_string())
            .chain(tasks.iter().map(|(t, m)| format!("{t} {} {}", m.as_str(), m.arrow())))
            .collect::<Vec<_>>()];
        for r in &rows {
            let mut line = vec![r.clone()];
            for ((t, m), b) in tasks.iter().zip(&best) {
                line.push(match cells.get(&(r.clone(), t.clone())) {
                    Some(v) => {
                        let x = mean(v);
                        let mark = if Some(x) == *b { "*" } else { " " };
                        format!("{}{mark}", fmt_value(*m, x))
                    }
                    None => "- ".into(),
                });
            }
            grid.push(line);
        }
        out.push_str(&align(&grid));
        out.push('\n');
    }
    let _ = writeln!(out, "sequence aggregation: {SEQUENCE_AGGREGATION}");
    out
}

/// Averaged columns per run and embedding: sequence-level MSE, sequence-level
/// F1 and frame-level F1.
pub fn summary_table(runs: &[(String, Vec<ProbeResult>)]) -> String {
    let single = runs.len() == 1;
    let columns = [
        ("Seq MSE", TaskLevel::Sequence, Metric::Mse),
        ("Seq F1", TaskLevel::Sequence, Metric::F1),
        ("Frame F1", TaskLevel::Frame, Metric::F1),
    ];
    let mut grid = vec![std::iter::once("run".to_string())
        .chain(columns.iter().map(|(n, _, m)| format!("{n} {}", m.arrow())))
        .collect::<Vec<_>>()];
    let mut labels = BTreeSet::new();
    for (run, results) in runs {
        let mut embeddings: Vec<&str> = Vec::new();
        for r in results {
            if !embeddings.contains(&r.embedding.as_str()) {
                embeddings.push(&r.embedding);
            }
        }
        for e in embeddings {
            let label = row_label(run, e, single);
            if !labels.insert(label.clone()) {
                continue;
            }
            let mut line = vec![label];
            for (_, level, metric) in &columns {
                let vals: Vec<f64> = results
                    .iter()
                    .filter(|r| r.embedding == e && r.level == *level && r.metric == *metric)
                    .map(|r| r.value)
                    .collect();
                line.push(if vals.is_empty() {
                    "-".into()
                } else {
                    fmt_value(*metric, mean(&vals))
                });
            }
            grid.push(line);
        }
    }
    align(&grid)
}

/// Writes `report.csv` (results with a leading run column) and
/// `report.txt` (per-level tables and the averaged summary).
pub fn write_report(dir: &Path, runs: &[(String, Vec<ProbeResult>)]) -> Result<(PathBuf, PathBuf), EvalError> {
    let io = |path: &Path, e: std::io::Error| EvalError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("run").chain(CSV_HEADER))
        .expect("header");
    for (run, results) in runs {
        for r in results {
            w.serialize((run, &r.task, r.level, r.metric, r.value, &r.embedding, &r.split, r.seed))
                .expect("row");
        }
    }
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, w.into_inner().expect("flush")).map_err(|e| io(&csv_path, e))?;
    let text = format!("{}\nSummary\n{}", render_table(runs), summary_table(runs));
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, text).map_err(|e| io(&txt_path, e))?;
    Ok((csv_path, txt_path))
}
