use super::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

#[test]
fn pool_single_agent_has_zero_spread() {
    let z = t(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
    let p = pool_embeddings(&[z.clone()]).unwrap();
    assert_eq!(p.shape(), &[2, 6]);
    for r in 0..2 {
        assert_eq!(&p.row(r)[..3], z.row(r));
        assert!(p.row(r)[3..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn pool_two_agents_by_hand() {
    let a = t(1, 2, vec![1.0, 3.0]);
    let b = t(1, 2, vec![3.0, 1.0]);
    let p = pool_embeddings(&[a, b]).unwrap();
    assert_eq!(p.data(), &[2.0, 2.0, 2.0, 2.0]);
}

#[test]
fn pool_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let agents: Vec<Tensor> = (0..4)
        .map(|_| t(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let p = pool_embeddings(&agents).unwrap();
    let mut rev = agents.clone();
    rev.reverse();
    rev.swap(0, 2);
    let q = pool_embeddings(&rev).unwrap();
    assert_eq!(p, q);
    assert!(pool_embeddings(&[t(2, 3, vec![0.0; 6]), t(3, 3, vec![0.0; 9])]).is_err());
}

#[test]
fn ridge_recovers_realizable_target() {
    let x = gaussian(400, 6, 1);
    let w = [0.5, -1.0, 2.0, 0.0, 0.3, -0.7];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = x
        .row_iter()
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 1.5 + 1e-4 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let probe = fit_ridge(&x, &y, &ProbeOptions::default()).unwrap();
    let xt = gaussian(200, 6, 9);
    let yt: Vec<f64> = xt
        .row_iter()
        .map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 1.5)
        .collect();
    assert!(mse(&yt, &probe.predict(&xt)) < 1e-4);
}

fn duplicated(x: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    DMatrix::from_fn(x.nrows(), 2 * p, |i, j| x[(i, j % p)])
}

#[test]
fn duplicated_dimensions_leave_metrics_unchanged() {
    let x = gaussian(300, 5, 4);
    let xt = gaussian(100, 5, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = |m: &DMatrix<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        m.row_iter()
            .map(|r| r[0] - 0.5 * r[2] + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let (y, yt) = (f(&x, &mut rng), f(&xt, &mut rng));
    let opts = ProbeOptions::default();
    let a = mse(&yt, &fit_ridge(&x, &y, &opts).unwrap().predict(&xt));
    let b = mse(
        &yt,
        &fit_ridge(&duplicated(&x), &y, &opts).unwrap().predict(&duplicated(&xt)),
    );
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");

    let cls = |v: &[f64]| -> Vec<i64> { v.iter().map(|&s| i64::from(s > 0.0)).collect() };
    let (c, ct) = (cls(&y), cls(&yt));
    let fa = macro_f1(&ct, &fit_logistic(&x, &c, &opts, "t").unwrap().predict(&xt));
    let fb = macro_f1(
        &ct,
        &fit_logistic(&duplicated(&x), &c, &opts, "t")
            .unwrap()
            .predict(&duplicated(&xt)),
    );
    assert!((fa - fb).abs() < 1e-6, "{fa} vs {fb}");
}

#[test]
fn logistic_separates_and_rejects_single_class() {
    let x = gaussian(300, 3, 7);
    let y: Vec<i64> = x
        .row_iter()
        .map(|r| {
            if r[0] + r[1] > 0.5 {
                2
            } else if r[0] < -0.5 {
                0
            } else {
                1
            }
        })
        .collect();
    let probe = fit_logistic(&x, &y, &ProbeOptions::default(), "t").unwrap();
    assert!(macro_f1(&y, &probe.predict(&x)) > 90.0);
    assert!(matches!(
        fit_logistic(&x, &vec![1; 300], &ProbeOptions::default(), "t"),
        Err(EvalError::SingleClass { .. })
    ));
}

#[test]
fn random_labels_give_chance_f1() {
    // Null oracle: with labels independent of the features, the held-out
    // macro-F1 of a balanced binary task concentrates at 50.
    let mut scores = Vec::new();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = gaussian(2000, 16, 200 + seed);
        let xt = gaussian(2000, 16, 300 + seed);
        let y: Vec<i64> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        let yt: Vec<i64> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        let probe = fit_logistic(&x, &y, &ProbeOptions::default(), "t").unwrap();
        scores.push(macro_f1(&yt, &probe.predict(&xt)));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - 50.0).abs() < 5.0, "{scores:?}");
}

#[test]
fn macro_f1_fixtures() {
    assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 1, 0, 1]), 100.0);
    // class 0: tp 1, fp 1, fn 1 -> 0.5; class 1: tp 1, fp 1, fn 1 -> 0.5
    assert!((macro_f1(&[0, 0, 1, 1], &[0, 1, 0, 1]) - 50.0).abs() < 1e-12);
    // all predicted 0: class 0 F1 = 2/3, class 1 F1 = 0
    assert!((macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 0]) - 100.0 / 3.0).abs() < 1e-12);
}

#[test]
fn pca_reconstruction_is_monotone_and_centered() {
    let x =
        gaussian(500, 6, 8) * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![5.0, 3.0, 2.0, 1.0, 0.5, 0.1]));
    let mut last = f64::INFINITY;
    for d in 0..=6 {
        let pca = fit_pca(&x, d).unwrap();
        let e = pca.reconstruction_error(&x);
        assert!(e <= last + 1e-12);
        last = e;
        let z = pca.project(&x);
        for c in z.column_iter() {
            assert!((c.sum() / 500.0).abs() < 1e-9);
        }
    }
    assert!(last < 1e-20);
}

#[test]
fn pca_top_component_matches_major_axis() {
    // Covariance diag(9, 1) rotated by theta; major axis is (cos, sin).
    let theta: f64 = 0.6;
    let (c, s) = (theta.cos(), theta.sin());
    let raw = gaussian(10_000, 2, 10);
    let x = DMatrix::from_fn(10_000, 2, |i, j| {
        let (a, b) = (3.0 * raw[(i, 0)], raw[(i, 1)]);
        if j == 0 {
            c * a - s * b
        } else {
            s * a + c * b
        }
    });
    let pca = fit_pca(&x, 1).unwrap();
    let cos = (pca.components[(0, 0)] * c + pca.components[(0, 1)] * s).abs();
    assert!(cos > 0.99, "{cos}");
}

#[test]
fn pca_pads_beyond_rank() {
    let base = gaussian(50, 2, 11);
    let x = DMatrix::from_fn(50, 4, |i, j| base[(i, j % 2)]);
    let pca = fit_pca(&x, 4).unwrap();
    assert_eq!(pca.rank, 2);
    let z = pca.project(&x);
    assert!(z.column(2).iter().chain(z.column(3).iter()).all(|&v| v == 0.0));
}

#[test]
fn timescale_selection_dims() {
    let e = crate::model::Embedding {
        n_frames: 2,
        short: vec![1.0, 2.0, 3.0, 4.0],
        long: vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
        short_dim: 2,
        long_dim: 3,
    };
    assert_eq!(Timescale::Short.select(&e).shape(), &[2, 2]);
    assert_eq!(Timescale::Long.select(&e).shape(), &[2, 3]);
    let both = Timescale::Both.select(&e);
    assert_eq!(both.row(1), &[3.0, 4.0, 8.0, 9.0, 10.0]);
    assert_eq!("long".parse::<Timescale>().unwrap(), Timescale::Long);
}

fn sample_results(embedding: &str, shift: f64) -> Vec<ProbeResult> {
    vec![
        ProbeResult {
            task: "agent_class".into(),
            level: TaskLevel::Sequence,
            metric: Metric::F1,
            value: 80.0 + shift,
            embedding: embedding.into(),
            split: "public".into(),
            seed: 0,
        },
        ProbeResult {
            task: "target_speed".into(),
            level: TaskLevel::Sequence,
            metric: Metric::Mse,
            value: 0.1 - shift / 100.0,
            embedding: embedding.into(),
            split: "public".into(),
            seed: 0,
        },
    ]
}

#[test]
fn report_marks_best_and_arrows() {
    let runs = vec![(
        "run".to_string(),
        [sample_results("short", 0.0), sample_results("long", 5.0)].concat(),
    )];
    let text = render_table(&runs);
    assert!(text.contains("agent_class F1 (↑)"));
    assert!(text.contains("target_speed MSE (↓)"));
    assert!(text.contains("85.00*"));
    assert!(text.contains("0.0500*"));
    assert!(!text.contains("80.00*"));
    assert!(text.contains("Frame-level\n  (no tasks)"));
    assert_eq!(text, render_table(&runs));
}

#[test]
fn results_csv_round_trip_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sample_results("both", 1.0);
    let csv = results_to_csv(&rows);
    assert!(csv.starts_with("task,level,metric,value,embedding,split,seed\n"));
    let a = dir.path().join("a.csv");
    std::fs::write(&a, &csv).unwrap();
    assert_eq!(read_results(&a).unwrap(), rows);
    let once = merge_result_files(&[a.clone()]).unwrap();
    let twice = merge_result_files(&[a.clone(), a.clone()]).unwrap();
    assert_eq!(once, twice);
    assert_eq!(summary_table(&once), summary_table(&twice));
}

#[test]
fn summary_has_one_row_per_run() {
    let runs: Vec<(String, Vec<ProbeResult>)> = ["full", "hoa", "bootstrap", "multiscale"]
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), sample_results("both", i as f64)))
        .collect();
    let s = summary_table(&runs);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].contains("Seq MSE (↓)") && lines[0].contains("Seq F1 (↑)") && lines[0].contains("Frame F1 (↑)"));
}

#[test]
fn embedding_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = EmbeddingSet {
        embedding: "both".into(),
        dim: 2,
        sequences: vec![SequenceEmbedding {
            index: EmbeddingIndex {
                format_version: 1,
                id: "seq00001".into(),
                split: "train".into(),
                n_frames: 3,
                dim: 2,
                embedding: "both".into(),
                agents: 1,
                pooled: true,
            },
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5],
        }],
    };
    write_embeddings(dir.path(), &set, false).unwrap();
    assert_eq!(read_embeddings(dir.path()).unwrap(), set);
    assert!(write_embeddings(dir.path(), &set, false).is_err());
    write_embeddings(dir.path(), &set, true).unwrap();
}
