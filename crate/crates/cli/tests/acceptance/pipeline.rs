//! Criteria that drive the `bams` binary end to end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bams::eval::read_results;

use crate::inprocess::{tiny_config, Outcome};

const BIN: &str = env!("CARGO_BIN_EXE_bams");

pub fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn bams(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| format!("cannot run bams: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "bams {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// `task -> value` for one results file.
fn scores(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    Ok(read_results(path)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|r| (r.task, r.value))
        .collect())
}

/// Results land in `root/<label>/results.csv`; the report names the run by `label`.
fn embed_and_probe(
    root: &Path,
    label: &str,
    ckpt: &Path,
    data: &Path,
    config: &Path,
    seed: &str,
    which: &str,
) -> Result<PathBuf, String> {
    let emb = root.join(format!("emb_{which}"));
    let res = root.join(label);
    bams(&[
        "embed",
        "--checkpoint",
        s(ckpt),
        "--data",
        s(data),
        "--out",
        s(&emb),
        "--which",
        which,
    ])?;
    bams(&[
        "probe",
        "--embeddings",
        s(&emb),
        "--data",
        s(data),
        "--out",
        s(&res),
        "--config",
        s(config),
        "--seed",
        seed,
    ])?;
    Ok(res.join("results.csv"))
}

fn all_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_pipeline(root: &Path, config: &Path) -> Result<(), String> {
    let data = root.join("data");
    let run = root.join("run");
    bams(&["generate", "--config", s(config), "--out", s(&data)])?;
    bams(&["train", "--config", s(config), "--data", s(&data), "--out", s(&run)])?;
    let res = embed_and_probe(root, "both", &run.join("model.ckpt"), &data, config, "3", "both")?;
    bams(&["report", "--results", s(&res), "--out", s(&root.join("report"))])?;
    Ok(())
}

pub fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config(3, 300, 6);
    cfg.data.n_sequences = 30;
    cfg.seed = 17;
    cfg.model.short.dropout = 0.1;
    cfg.model.long.dropout = 0.1;
    let config = tmp.path().join("small.toml");
    std::fs::write(&config, cfg.to_toml_string()).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_pipeline(&a, &config)?;
    small_pipeline(&b, &config)?;
    let mut compared = 0;
    for (what, rel) in [
        ("checkpoint", "run/model.ckpt"),
        ("embeddings", "emb_both"),
        ("report", "report/report.csv"),
    ] {
        let (pa, pb) = (a.join(rel), b.join(rel));
        let (fa, fb) = if pa.is_dir() {
            (all_files(&pa), all_files(&pb))
        } else {
            let read = |p: &Path| {
                std::fs::read(p)
                    .map(|d| vec![(PathBuf::new(), d)])
                    .map_err(|e| e.to_string())
            };
            (read(&pa)?, read(&pb)?)
        };
        if fa.is_empty() || fa != fb {
            return Err(format!("{what} differs between runs"));
        }
        compared += fa.len();
    }
    Ok(format!("{compared} files byte-identical across two runs"))
}

/// Probe scores of every arm for one seed.
pub struct SeedScores {
    pub seed: u64,
    pub short: BTreeMap<String, f64>,
    pub long: BTreeMap<String, f64>,
    pub both: BTreeMap<String, f64>,
    pub pca: BTreeMap<String, f64>,
    /// Ablation name -> scores of its concatenated embedding.
    pub ablations: BTreeMap<String, BTreeMap<String, f64>>,
    pub report: String,
}

pub fn desk_seed(root: &Path, seed: u64) -> Result<SeedScores, String> {
    let started = Instant::now();
    let config = desk_config();
    let config = config.as_path();
    let seed_arg = seed.to_string();
    let data = root.join("data");
    bams(&[
        "generate",
        "--config",
        s(config),
        "--out",
        s(&data),
        "--seed",
        &seed_arg,
    ])?;

    let train = |name: &str, ablate: Option<&str>| -> Result<PathBuf, String> {
        let run = root.join(name);
        let mut args = vec![
            "train",
            "--config",
            s(config),
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--seed",
            &seed_arg,
        ];
        if let Some(a) = ablate {
            args.extend(["--ablate", a]);
        }
        bams(&args)?;
        Ok(run.join("model.ckpt"))
    };
    let full = train("full", None)?;
    let full_dir = root.join("full");
    let short = embed_and_probe(&full_dir, "short", &full, &data, config, &seed_arg, "short")?;
    let long = embed_and_probe(&full_dir, "long", &full, &data, config, &seed_arg, "long")?;
    let both = embed_and_probe(&full_dir, "full", &full, &data, config, &seed_arg, "both")?;

    let pca_emb = root.join("pca_emb");
    let pca_res = root.join("pca");
    bams(&[
        "baseline",
        "--config",
        s(config),
        "--data",
        s(&data),
        "--out",
        s(&pca_emb),
    ])?;
    bams(&[
        "probe",
        "--embeddings",
        s(&pca_emb),
        "--data",
        s(&data),
        "--out",
        s(&pca_res),
        "--config",
        s(config),
        "--seed",
        &seed_arg,
    ])?;
    let pca = pca_res.join("results.csv");

    let mut ablations = BTreeMap::new();
    let mut files = vec![both.clone()];
    for a in ["hoa", "bootstrap", "multiscale"] {
        let ckpt = train(a, Some(a))?;
        let res = embed_and_probe(
            &root.join(a),
            &format!("no_{a}"),
            &ckpt,
            &data,
            config,
            &seed_arg,
            "both",
        )?;
        ablations.insert(a.to_string(), scores(&res)?);
        files.push(res);
    }
    let mut args = vec!["report", "--results"];
    args.extend(files.iter().map(|p| s(p)));
    let report_dir = root.join("report");
    args.extend(["--out", s(&report_dir)]);
    let table = bams(&args)?;
    eprintln!(
        "  seed {seed}: pipeline finished in {:.0} s",
        started.elapsed().as_secs_f64()
    );
    Ok(SeedScores {
        seed,
        short: scores(&short)?,
        long: scores(&long)?,
        both: scores(&both)?,
        pca: scores(&pca)?,
        ablations,
        report: table,
    })
}

pub const CLASS: &str = "agent_class";
pub const SPEED: &str = "target_speed";
pub const REGIME: &str = "regime";
pub const DIFFICULTY: &str = "difficulty";

fn get(m: &BTreeMap<String, f64>, task: &str) -> f64 {
    m.get(task).copied().unwrap_or(f64::NAN)
}

/// Sequence-level F1 tasks.
const SEQUENCE_F1: [&str; 1] = [CLASS];

fn sequence_f1_average(m: &BTreeMap<String, f64>) -> f64 {
    SEQUENCE_F1.iter().map(|t| get(m, t)).sum::<f64>() / SEQUENCE_F1.len() as f64
}

pub fn beats_pca(r: &SeedScores) -> Vec<(&'static str, bool)> {
    vec![
        (CLASS, get(&r.both, CLASS) > get(&r.pca, CLASS)),
        (SPEED, get(&r.both, SPEED) < get(&r.pca, SPEED)),
        (REGIME, get(&r.both, REGIME) > get(&r.pca, REGIME)),
        (DIFFICULTY, get(&r.both, DIFFICULTY) < get(&r.pca, DIFFICULTY)),
    ]
}

pub fn timescale_pattern(r: &SeedScores) -> Vec<(&'static str, bool)> {
    vec![
        ("long>short class", get(&r.long, CLASS) > get(&r.short, CLASS)),
        ("long>short speed", get(&r.long, SPEED) < get(&r.short, SPEED)),
        ("short>long regime", get(&r.short, REGIME) > get(&r.long, REGIME)),
    ]
}

pub fn ablation_order(r: &SeedScores) -> Vec<(String, bool)> {
    let full = sequence_f1_average(&r.both);
    r.ablations
        .iter()
        .map(|(name, m)| (name.clone(), full >= sequence_f1_average(m)))
        .collect()
}

pub fn describe(r: &SeedScores) -> String {
    let row = |name: &str, m: &BTreeMap<String, f64>| {
        format!(
            "    {name:<12} class F1 {:6.2}  speed MSE {:.4}  regime F1 {:6.2}  difficulty MSE {:.4}\n",
            get(m, CLASS),
            get(m, SPEED),
            get(m, REGIME),
            get(m, DIFFICULTY)
        )
    };
    let mut out = format!("  seed {}\n", r.seed);
    out += &row("short", &r.short);
    out += &row("long", &r.long);
    out += &row("short+long", &r.both);
    out += &row("pca", &r.pca);
    for (name, m) in &r.ablations {
        out += &row(&format!("no {name}"), m);
    }
    out
}
