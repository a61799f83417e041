use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rrl::corpus::{load_corpus, LabelSet};
use rrl::Checkpoint64;
use serde_json::Value;

fn rrl(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rrl"));
    cmd.args(args).env_remove("RR_SEED");
    if let Some(s) = seed_env {
        cmd.env("RR_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) {
    let out = rrl(args, None);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Small corpus split plus a two-epoch model under `dir`.
fn trained(dir: &Path) {
    ok(&["gen", "--out", p(&dir.join("gen")), "--n-docs", "10", "--n-labels", "3"]);
    ok(&["split", "--out", p(&dir.join("split")), "--in", p(&dir.join("gen/corpus.jsonl"))]);
    ok(&[
        "train", "--out", p(&dir.join("model")), "--train", p(&dir.join("split/train.jsonl")), "--val",
        p(&dir.join("split/val.jsonl")), "--epochs", "2", "--lr", "1e-3", "--embed-dim", "6", "--hidden", "3",
        "--hash-buckets", "256",
    ]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(rrl(&[], None).status.code(), Some(1));
    assert_eq!(rrl(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(rrl(&["gen", "--out", p(tmp.path()), "--bogus"], None).status.code(), Some(1));
    assert_eq!(rrl(&["--help"], None).status.code(), Some(0));
    assert_eq!(rrl(&["gen", "--out", p(tmp.path())], Some("not-a-number")).status.code(), Some(1));
    assert_eq!(rrl(&["gen", "--out", p(tmp.path()), "--n-labels", "1"], None).status.code(), Some(1));

    let missing = rrl(&["eval", "--out", p(tmp.path()), "--ckpt", "nope.bin", "--test", "nope.jsonl"], None);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    fs::write(tmp.path().join("labels.txt"), "A\nB\n").unwrap();
    fs::write(tmp.path().join("bad.jsonl"), "{not json}\n").unwrap();
    let bad = rrl(&["split", "--out", p(&tmp.path().join("o")), "--in", p(&tmp.path().join("bad.jsonl"))], None);
    assert_eq!(bad.status.code(), Some(2));
    let fr = rrl(&["split", "--out", p(&tmp.path().join("o")), "--in", p(&tmp.path().join("bad.jsonl")), "--fractions", "0.5,0.5"], None);
    assert_eq!(fr.status.code(), Some(1));
}

#[test]
fn seed_precedence_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let gen = |out: &str, extra: &[&str], env: Option<&str>| {
        let dir = d(out);
        let mut args = vec!["gen", "--out", p(&dir), "--n-docs", "3"];
        args.extend_from_slice(extra);
        assert_eq!(rrl(&args, env).status.code(), Some(0));
        fs::read(d(out).join("corpus.jsonl")).unwrap()
    };
    let default = gen("default", &[], None);
    let env5 = gen("env5", &[], Some("5"));
    let flag5 = gen("flag5", &["--seed", "5"], None);
    assert_ne!(default, env5);
    assert_eq!(env5, flag5);

    fs::write(d("cfg.json"), r#"{"seed": 9, "n_labels": 4}"#).unwrap();
    let cfg9 = gen("cfg9", &["--config", p(&d("cfg.json"))], Some("5"));
    let flag9 = gen("flag9", &["--seed", "9", "--n-labels", "4"], None);
    assert_eq!(cfg9, flag9);
    let flag_wins = gen("flag_wins", &["--config", p(&d("cfg.json")), "--seed", "5", "--n-labels", "4"], Some("7"));
    assert_eq!(flag_wins, gen("plain5", &["--seed", "5", "--n-labels", "4"], None));

    let m = json(&d("cfg9/manifest.json"));
    assert_eq!(m["command"], "gen");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["n_labels"], 4);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 1);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs {
        let bytes = fs::read(o["path"].as_str().unwrap()).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), rrl::checkpoint::sha256_hex(&bytes));
    }
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);

    fs::write(d("typo.json"), r#"{"n_lables": 4}"#).unwrap();
    assert_eq!(rrl(&["gen", "--out", p(&d("typo")), "--config", p(&d("typo.json"))], None).status.code(), Some(1));
}

#[test]
fn train_config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    trained(tmp.path());
    fs::write(d("train.json"), r#"{"epochs": 5, "learning_rates": [0.01], "model": {"hasher": {"embed_dim": 5}}}"#).unwrap();
    ok(&[
        "train", "--out", p(&d("m2")), "--config", p(&d("train.json")), "--train", p(&d("split/train.jsonl")), "--val",
        p(&d("split/val.jsonl")), "--epochs", "1", "--hidden", "3", "--hash-buckets", "128",
    ]);
    let m = json(&d("m2/manifest.json"));
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["learning_rates"][0], 0.01);
    assert_eq!(m["config"]["model"]["hasher"]["embed_dim"], 5);
    assert_eq!(m["config"]["model"]["encoder"]["h_sent"], 3);
    let history = json(&d("m2/history.json"));
    assert_eq!(history["history"].as_array().unwrap().len(), 1);
}

#[test]
fn label_file_mismatch_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    trained(tmp.path());
    let permuted = tmp.path().join("permuted.txt");
    fs::write(&permuted, "ROLE_1\nROLE_0\nROLE_2\n").unwrap();
    let out = rrl(
        &[
            "eval", "--out", p(&tmp.path().join("e")), "--ckpt", p(&tmp.path().join("model/model.bin")), "--test",
            p(&tmp.path().join("split/test.jsonl")), "--labels", p(&permuted),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label set mismatch"));
}

#[test]
fn eval_and_exclude_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    trained(tmp.path());
    let ckpt = d("model/model.bin");
    let test = d("split/val.jsonl");
    ok(&["eval", "--out", p(&d("all")), "--ckpt", p(&ckpt), "--test", p(&test)]);
    ok(&["eval", "--out", p(&d("ex")), "--ckpt", p(&ckpt), "--test", p(&test), "--exclude-labels", "ROLE_0"]);
    let (all, ex) = (json(&d("all/report.json")), json(&d("ex/report.json")));
    assert_eq!(all["micro_f1"], ex["micro_f1"]);
    assert_eq!(ex["labels"][0]["in_macro"], false);
    assert!(fs::read_to_string(d("all/report.txt")).unwrap().contains("macro-F1"));
    let unknown = rrl(&["eval", "--out", p(&d("u")), "--ckpt", p(&ckpt), "--test", p(&test), "--exclude-labels", "NOPE"], None);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn infer_grid_and_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    trained(tmp.path());
    let ckpt = d("model/model.bin");
    let val = d("split/val.jsonl");
    ok(&["datastore-build", "--out", p(&d("store")), "--ckpt", p(&ckpt), "--corpus", p(&d("split/train.jsonl"))]);
    let store = d("store/store.bin");

    // unlabeled input is accepted by infer
    fs::write(d("raw.jsonl"), "{\"doc_id\": \"x\", \"sentences\": [{\"text\": \"a b c\"}, {\"text\": \"d e\"}]}\n").unwrap();
    ok(&["infer", "--out", p(&d("viterbi")), "--ckpt", p(&ckpt), "--in", p(&d("raw.jsonl"))]);
    let line: Value = serde_json::from_str(fs::read_to_string(d("viterbi/predictions.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(line["doc_id"], "x");
    assert_eq!(line["labels"].as_array().unwrap().len(), 2);
    let needs_lambda = rrl(&["infer", "--out", p(&d("i")), "--ckpt", p(&ckpt), "--in", p(&val), "--store", p(&store)], None);
    assert_eq!(needs_lambda.status.code(), Some(1));
    ok(&["infer", "--out", p(&d("interp")), "--ckpt", p(&ckpt), "--in", p(&val), "--store", p(&store), "--lambda", "0.3", "--k", "4", "--tau", "0.5"]);

    ok(&["grid", "--out", p(&d("grid")), "--ckpt", p(&ckpt), "--store", p(&store), "--val", p(&val)]);
    let csv = fs::read_to_string(d("grid/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 11 * 6);
    assert!(csv.starts_with("lambda,k,macro_f1,micro_f1\n"));
    let grid = json(&d("grid/grid.json"));
    assert!(grid["best"]["macro_f1"].as_f64().unwrap() >= grid["rows"][60]["macro_f1"].as_f64().unwrap());

    ok(&["export-embeddings", "--out", p(&d("emb")), "--ckpt", p(&ckpt), "--in", p(&val)]);
    let tsv = fs::read_to_string(d("emb/embeddings.tsv")).unwrap();
    let labels = LabelSet::load(d("split/labels.txt")).unwrap();
    let corpus = load_corpus(&val, &labels).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 1 + corpus.num_sentences());
    assert!(lines[0].starts_with("doc_id\tposition\tgold_label\tv0"));
    let model = Checkpoint64::load(&ckpt).unwrap().model;
    let doc = &corpus.documents[0];
    let out = model.infer(&model.featurize(doc)).unwrap();
    let fields: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(fields[0], doc.doc_id);
    assert_eq!(fields[2], labels.name(doc.sentences[0].label));
    let values: Vec<f64> = fields[3..].iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values, out.reprs.row(0));
}

#[test]
fn prototype_stores_and_xdomain_without_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    trained(tmp.path());
    let ckpt = d("model/model.bin");
    let train = d("split/train.jsonl");
    for kind in ["single-proto", "multi-proto"] {
        ok(&["datastore-build", "--out", p(&d(kind)), "--ckpt", p(&ckpt), "--corpus", p(&train), "--kind", kind, "--k-clusters", "2"]);
        ok(&["grid", "--out", p(&d(&format!("{kind}-grid"))), "--ckpt", p(&ckpt), "--store", p(&d(kind).join("store.bin")), "--val", p(&d("split/val.jsonl"))]);
        let csv = fs::read_to_string(d(&format!("{kind}-grid")).join("grid.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 11);
        assert!(csv.lines().nth(1).unwrap().contains(",all,"));
    }
    ok(&["xdomain", "--out", p(&d("x")), "--ckpt", p(&ckpt), "--target", p(&d("split/test.jsonl"))]);
    let report = json(&d("x/report.json"));
    assert!(report["random_baseline"].is_null());
    assert!(report["target"]["macro_f1"].as_f64().is_some());
}

#[test]
fn gradcheck_command() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gradcheck", "--out", p(tmp.path())]);
    let report = json(&tmp.path().join("gradcheck.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["results"].as_array().unwrap().len(), 6);
    assert_eq!(rrl(&["gradcheck", "--out", p(tmp.path()), "--eps", "0"], None).status.code(), Some(1));
}
