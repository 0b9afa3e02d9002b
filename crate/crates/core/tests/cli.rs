use std::path::Path;
use std::process::{Command, Output};

use dkaft::cli::{read_predictions, write_predictions};
use dkaft::data::Dataset;
use dkaft::gp::PredictiveDistribution;

fn dkaft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkaft"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dkaft(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> (String, String, String) {
    let [tr, va, te] = ["train", "val", "test"].map(|s| p(&dir.join(format!("{s}.jsonl"))).to_string());
    let mut args = vec![
        "synth", "--out", &tr, "--val-out", &va, "--val-frac", "0.2", "--test-out", &te, "--test-frac", "0.2",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    (tr, va, te)
}

const TINY: &[&str] = &[
    "--epochs", "2", "--n-seq-emb", "4", "--n-seq-repr", "4", "--num-inducing", "8", "--batch-size", "32",
];

#[test]
fn train_predict_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va, te) = synth(dir.path(), &["--n", "150", "--n-sta", "3", "--n-seq", "2", "--t-max", "6", "--censor-frac", "0.2"]);
    assert_eq!(Dataset::load_jsonl(&tr).unwrap().len(), 90);
    assert_eq!(Dataset::load_jsonl(&te).unwrap().len(), 30);

    for head in ["ppgp", "svgp", "exact", "linear"] {
        let model = dir.path().join(format!("{head}.json"));
        let mut args = vec!["train", "--train", &tr, "--val", &va, "--out", p(&model), "--head", head];
        args.extend_from_slice(TINY);
        ok(&args);
        let log = std::fs::read_to_string(dir.path().join(format!("{head}.log.csv"))).unwrap();
        assert_eq!(log.lines().next().unwrap(), "epoch,train_loss,val_loglik,wall_ms");
        assert_eq!(log.lines().count(), 3);

        let preds = dir.path().join(format!("{head}.pred.jsonl"));
        ok(&["predict", "--checkpoint", p(&model), "--data", &te, "--out", p(&preds)]);
        assert_eq!(read_predictions(&preds).unwrap().len(), 30);
        let out = ok(&["evaluate", "--predictions", p(&preds), "--data", &te, "--quantiles", "5"]);
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        for key in ["mad", "rmse_log", "c_index", "crps", "ks"] {
            assert!(report[key].as_f64().unwrap().is_finite(), "{head} {key}");
        }
        let qp = std::fs::read_to_string(dir.path().join(format!("{head}.pred.qp.csv"))).unwrap();
        assert_eq!(qp.lines().next().unwrap(), "q,mad_q,rmse_q,n_q");
        assert_eq!(qp.lines().count(), 1 + 5);
        let ecdf = std::fs::read_to_string(dir.path().join(format!("{head}.pred.ecdf.csv"))).unwrap();
        assert_eq!(ecdf.lines().count(), 1 + 30);
    }

    let linear = dir.path().join("linear.json");
    let mc = dir.path().join("mc.jsonl");
    ok(&["predict", "--checkpoint", p(&linear), "--data", &te, "--out", p(&mc), "--mc-dropout", "--passes", "5"]);
    assert!(read_predictions(&mc).unwrap().iter().any(|r| r.sigma_f2 > 0.0));
    // MC dropout needs the linear head
    let ppgp = dir.path().join("ppgp.json");
    assert_eq!(dkaft(&["predict", "--checkpoint", p(&ppgp), "--data", &te, "--out", p(&mc), "--mc-dropout"]).status.code(), Some(1));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let read = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        ok(&["synth", "--out", p(&path), "--n", "40", "--seed", seed, "--noise", "heteroscedastic"]);
        std::fs::read(path).unwrap()
    };
    let a = read("a.jsonl", "3");
    assert_eq!(a, read("b.jsonl", "3"));
    assert_ne!(a, read("c.jsonl", "4"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va, te) = synth(dir.path(), &["--n", "60", "--n-sta", "2", "--n-seq", "2", "--t-max", "4"]);
    let out = p(&dir.path().join("m.json")).to_string();

    assert_eq!(dkaft(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(dkaft(&["train", "--train", &tr]).status.code(), Some(1));
    let bad = dkaft(&["train", "--train", &tr, "--val", &va, "--out", &out, "--head", "forest"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("forest"));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 2\nnot_a_key = 1\n").unwrap();
    let bad = dkaft(&["train", "--train", &tr, "--val", &va, "--out", &out, "--config", p(&cfg)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let missing = dkaft(&["train", "--train", "/nonexistent.jsonl", "--val", &va, "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent.jsonl"));
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"x\"}\n").unwrap();
    let bad = dkaft(&["train", "--train", p(&broken), "--val", &va, "--out", &out]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("broken.jsonl:1"));

    // zero predictive variance cannot be scored
    let data = Dataset::load_jsonl(&te).unwrap();
    let preds: Vec<PredictiveDistribution> =
        data.records.iter().map(|r| PredictiveDistribution::new(r.log_time(), 0.0, 0.0)).collect();
    let pred_path = dir.path().join("zero.jsonl");
    write_predictions(&pred_path, &data, &preds).unwrap();
    assert_eq!(dkaft(&["evaluate", "--predictions", p(&pred_path), "--data", &te]).status.code(), Some(3));

    // prediction ids must match the data
    let short = Dataset {
        records: data.records[1..].to_vec(),
        ..data.clone()
    };
    write_predictions(&pred_path, &short, &preds[1..]).unwrap();
    let bad = dkaft(&["evaluate", "--predictions", p(&pred_path), "--data", &te]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains(&data.records[0].id));

    let exact = dkaft(&["train", "--train", &tr, "--val", &va, "--out", &out, "--head", "exact", "--max-exact-n", "10"]);
    assert_eq!(exact.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&exact.stderr).contains("O(n^3)"));
}

#[test]
fn perfect_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    ok(&["synth", "--out", p(&path), "--n", "200", "--seed", "9"]);
    let data = Dataset::load_jsonl(&path).unwrap();
    let preds: Vec<PredictiveDistribution> =
        data.records.iter().map(|r| PredictiveDistribution::new(r.log_time(), 0.0, 1e-6)).collect();
    let pred_path = dir.path().join("perfect.jsonl");
    write_predictions(&pred_path, &data, &preds).unwrap();
    let out = ok(&["evaluate", "--predictions", p(&pred_path), "--data", p(&path)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rmse_log"].as_f64().unwrap(), 0.0);
    assert!(report["mad"].as_f64().unwrap() < 1e-9);
    assert_eq!(report["c_index"].as_f64().unwrap(), 1.0);
}

#[test]
fn pretraining_writes_history_and_respects_patience() {
    let dir = tempfile::tempdir().unwrap();
    let tr = p(&dir.path().join("c.jsonl")).to_string();
    let va = p(&dir.path().join("cv.jsonl")).to_string();
    ok(&["synth", "--clusters", "--out", &tr, "--val-out", &va, "--val-frac", "0.25", "--n", "120", "--n-sta", "3", "--n-seq", "2", "--seed", "2"]);
    let enc = dir.path().join("enc.json");
    ok(&[
        "pretrain", "--train", &tr, "--val", &va, "--out", p(&enc), "--dml-bins", "3", "--dml-patience", "2",
        "--dml-max-epochs", "30", "--n-seq-emb", "4", "--n-seq-repr", "4",
    ]);
    let hist = std::fs::read_to_string(dir.path().join("enc.map_at_r.csv")).unwrap();
    let rows: Vec<Vec<&str>> = hist.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][0], "0");
    let maps: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(maps.iter().all(|m| (0.0..=1.0).contains(m)));
    let best = maps.iter().cloned().enumerate().fold((0, f64::MIN), |b, (i, m)| if m > b.1 { (i, m) } else { b });
    // training stops once patience is exhausted after the best epoch
    assert!(rows.len() - 1 <= best.0 + 3 || rows.len() - 1 == 30, "{hist}");

    let model = dir.path().join("m.json");
    let mut args = vec!["train", "--train", &tr, "--val", &va, "--out", p(&model), "--encoder-checkpoint", p(&enc)];
    args.extend_from_slice(TINY);
    ok(&args);
    // encoder shape mismatch is a configuration error
    let bad = dkaft(&["train", "--train", &tr, "--val", &va, "--out", p(&model), "--encoder-checkpoint", p(&enc), "--epochs", "1"]);
    assert_eq!(bad.status.code(), Some(1));
}
