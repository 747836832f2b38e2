use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = "seed: 3
num_train_epochs: 3
max_seq_length: 40
encoder:
  num_layers: 1
  num_attention_heads: 2
  hidden_size: 16
  intermediate_size: 32
soft_attention_layer_size: 8
soft_attention_hidden_size: 8
data:
  synthetic:
    n_train: 200
    n_dev: 40
    n_test: 40
lime:
  n_samples: 60
";

fn zeroshot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeroshot"))
        .args(args)
        .current_dir(dir)
        .env_remove("ZEROSHOT_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = zeroshot(dir, args);
    assert!(
        out.status.success(),
        "zeroshot {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn trained() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.yaml"), CONFIG).unwrap();
    ok(dir.path(), &["train", "--config", "config.yaml", "--out", "run"]);
    dir
}

fn score(dir: &Path, method: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "score",
        "--config",
        "config.yaml",
        "--checkpoint",
        "run/checkpoint.json",
        "--data",
        "run/test.tsv",
        "--method",
        method,
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn body(scores: &str) -> String {
    scores.lines().filter(|l| !l.starts_with("# method=")).collect::<Vec<_>>().join("\n")
}

#[test]
fn train_writes_loadable_artifacts() {
    let dir = trained();
    let d = dir.path();
    for f in ["checkpoint.json", "config.yaml", "train_log.jsonl", "train.tsv", "dev.tsv", "test.tsv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = read(d, "run/train_log.jsonl");
    let epochs = log.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count();
    assert_eq!(epochs, 3);
    let snapshot = read(d, "run/config.yaml");
    assert!(snapshot.contains("soft_attention_layer_size: 8"));
    assert!(snapshot.contains("initializer: glorot"));
    score(d, "weighted-soft", "ws.scores", &[]);
    assert!(read(d, "ws.scores").starts_with("# method=weighted-soft\n"));
}

#[test]
fn weighted_soft_at_beta_one_equals_soft() {
    let dir = trained();
    let d = dir.path();
    score(d, "soft", "soft.scores", &[]);
    score(d, "weighted-soft", "ws1.scores", &["--beta", "1"]);
    score(d, "weighted-soft", "ws2.scores", &["--beta", "2"]);
    let soft = read(d, "soft.scores");
    assert_eq!(body(&soft), body(&read(d, "ws1.scores")));
    assert_ne!(body(&soft), body(&read(d, "ws2.scores")));
}

#[test]
fn random_scores_are_seeded() {
    let dir = trained();
    let d = dir.path();
    score(d, "random", "a.scores", &["--seed", "11"]);
    score(d, "random", "b.scores", &["--seed", "11"]);
    score(d, "random", "c.scores", &["--seed", "12"]);
    assert_eq!(read(d, "a.scores"), read(d, "b.scores"));
    assert_ne!(read(d, "a.scores"), read(d, "c.scores"));
}

#[test]
fn head_selection_beats_random_on_dev() {
    let dir = trained();
    let d = dir.path();
    score(d, "head", "head.scores", &["--dev", "run/dev.tsv"]);
    let text = read(d, "head.scores");
    assert!(text.contains("# gold_token_labels_used=dev:head-selection+threshold"));
    let dev_map: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("# dev_map="))
        .unwrap()
        .parse()
        .unwrap();
    // random baseline on the same dev set
    ok(
        d,
        &[
            "score", "--checkpoint", "run/checkpoint.json", "--data", "run/dev.tsv", "--method", "random", "--out",
            "dev_random.scores",
        ],
    );
    let out = ok(d, &["eval", "--gold", "run/dev.tsv", "dev_random.scores"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let random_map = v["reports"][0]["map"].as_f64().unwrap();
    assert!(dev_map >= random_map, "head {dev_map} vs random {random_map}");
    // a fixed head and threshold need no dev labels
    score(d, "head", "fixed.scores", &["--head", "0:1", "--threshold", "0.2"]);
    assert!(!read(d, "fixed.scores").contains("gold_token_labels_used"));
}

#[test]
fn eval_aggregates_seeds_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("config.yaml"), CONFIG.replace("num_train_epochs: 3", "num_train_epochs: 1")).unwrap();
    ok(d, &["synth", "--config", "config.yaml", "--out", "data"]);
    let mut files = Vec::new();
    for seed in 0..5 {
        let s = seed.to_string();
        let run = format!("run{seed}");
        ok(
            d,
            &["train", "--config", "config.yaml", "--seed", &s, "--train", "data/train.tsv", "--dev", "data/dev.tsv", "--out", &run],
        );
        let ck = format!("{run}/checkpoint.json");
        for (method, prefix) in [("random", "r"), ("weighted-soft", "w")] {
            let f = format!("{prefix}{seed}.scores");
            ok(d, &["score", "--checkpoint", &ck, "--data", "data/test.tsv", "--method", method, "--seed", &s, "--out", &f]);
            files.push(f);
        }
    }
    let mut args = vec!["eval", "--gold", "data/test.tsv", "--compare", "weighted-soft,random"];
    args.extend(files.iter().map(String::as_str));
    let v: Value = serde_json::from_slice(&ok(d, &args).stdout).unwrap();
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 10);
    let mean_random: f64 = reports
        .iter()
        .filter(|r| r["name"] == "random")
        .map(|r| r["map"].as_f64().unwrap())
        .sum::<f64>()
        / 5.0;
    let agg = v["aggregates"].as_array().unwrap();
    assert_eq!(agg.len(), 2);
    let random_row = agg.iter().find(|a| a["method"] == "random").unwrap();
    assert!((random_row["map"].as_f64().unwrap() - mean_random).abs() < 1e-12);
    assert_eq!(random_row["seeds"].as_array().unwrap().len(), 5);
    assert_eq!(v["comparison"]["test"]["df"].as_f64(), Some(4.0));

    let mut args = vec!["eval", "--gold", "data/test.tsv", "--format", "table"];
    args.extend(files.iter().map(String::as_str));
    let table = String::from_utf8(ok(d, &args).stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["Method", "Sent", "F1", "P", "R", "F1", "MAP"]);
    assert!(table.contains("Weighted soft attention"));
    assert!(table.contains("Random baseline"));
}

#[test]
fn perfect_scores_give_a_perfect_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("gold.tsv"), "a\t0\nmay\t1\nb\t0\n\nc\t0\nd\t0\n").unwrap();
    fs::write(
        d.join("perfect.scores"),
        "# method=soft\n# threshold=0.5\n\n# sent_prob=0.9\na\t0.1\t0\nmay\t0.9\t1\nb\t0.2\t0\n\n\
         # sent_prob=0.1\nc\t0.1\t0\nd\t0.0\t0\n",
    )
    .unwrap();
    let v: Value = serde_json::from_slice(&ok(d, &["eval", "--gold", "gold.tsv", "perfect.scores"]).stdout).unwrap();
    let r = &v["reports"][0];
    for key in ["precision", "recall", "f1"] {
        assert_eq!(r["token"][key].as_f64(), Some(1.0), "{key}");
        assert_eq!(r["sentence"][key].as_f64(), Some(1.0), "{key}");
    }
    assert_eq!(r["map"].as_f64(), Some(1.0));
}

const SCORES_A: &str = "# method=weighted-soft\n# threshold=0.5\n\nmay\t0.9\t1\nbe\t0.1\t0\n\nit\t0.0\t0\n";
const SCORES_B: &str = "# method=head\n# threshold=0.3\n\nmay\t0.4\t1\nbe\t0.6\t1\n\nit\t1.0\t1\n";

#[test]
fn heatmap_matches_golden_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.scores"), SCORES_A).unwrap();
    fs::write(d.join("b.scores"), SCORES_B).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let html = ok(d, &["heatmap", "--format", "html", "a.scores", "b.scores"]).stdout;
    assert_eq!(String::from_utf8(html).unwrap(), fs::read_to_string(golden.join("heatmap.html")).unwrap());
    let ansi = ok(d, &["heatmap", "b.scores", "a.scores"]).stdout;
    assert_eq!(String::from_utf8(ansi).unwrap(), fs::read_to_string(golden.join("heatmap.ansi")).unwrap());
}

#[test]
fn config_precedence_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = CONFIG.replace("num_train_epochs: 3", "num_train_epochs: 1");
    fs::write(d.join("config.yaml"), &small).unwrap();
    ok(d, &["train", "--config", "config.yaml", "--out", "file"]);
    ok(d, &["train", "--config", "config.yaml", "--seed", "9", "--gamma", "0.5", "--out", "flag"]);
    let file = read(d, "file/config.yaml");
    let flag = read(d, "flag/config.yaml");
    assert!(file.contains("seed: 3\n") && file.contains("gamma: 0.1\n"));
    assert!(flag.contains("seed: 9\n") && flag.contains("gamma: 0.5\n"));
    assert!(file.contains("per_device_eval_batch_size: 64\n"));
}

#[test]
fn default_output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_zeroshot"))
        .args(["synth", "--seed", "4"])
        .current_dir(d)
        .env("ZEROSHOT_OUT_DIR", d.join("elsewhere"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("elsewhere/synthetic/train.tsv").exists());
    assert!(d.join("elsewhere/synthetic/cues.txt").exists());
}

#[test]
fn sweep_reports_one_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let small = CONFIG.replace("num_train_epochs: 3", "num_train_epochs: 1");
    fs::write(d.join("config.yaml"), &small).unwrap();
    let run = |betas: &str| {
        let out = ok(d, &["sweep", "--config", "config.yaml", "--betas", betas, "--seeds", "0,1", "--format", "json"]);
        serde_json::from_slice::<Value>(&out.stdout).unwrap()
    };
    let one = run("1");
    assert_eq!(one["summary"].as_array().unwrap().len(), 1);
    assert_eq!(one["rows"].as_array().unwrap().len(), 2);
    let two = run("1,2");
    assert_eq!(two["summary"].as_array().unwrap().len(), 2);
    assert_eq!(two, run("1,2"));
    let table = String::from_utf8(ok(d, &["sweep", "--config", "config.yaml", "--betas", "2", "--seeds", "0"]).stdout).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = trained();
    let d = dir.path();
    let code = |args: &[&str]| zeroshot(d, args).status.code().unwrap();
    fs::write(d.join("bad.yaml"), "initializer: xavier\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.yaml"]), 2);
    assert_eq!(code(&["train", "--config", "config.yaml", "--beta", "0.5"]), 2);
    assert_eq!(code(&["score", "--method", "nope", "--checkpoint", "x", "--data", "y"]), 2);
    assert_eq!(code(&["eval", "--gold", "missing.tsv", "x.scores"]), 3);

    score(d, "soft", "soft.scores", &[]);
    assert_eq!(code(&["eval", "--gold", "run/dev.tsv", "soft.scores"]), 3);
    fs::write(d.join("neg.tsv"), "a\t0\nb\t0\n").unwrap();
    fs::write(d.join("neg.scores"), "# method=soft\n# threshold=0.5\n\na\t0.1\t0\nb\t0.2\t0\n").unwrap();
    assert_eq!(code(&["eval", "--gold", "neg.tsv", "neg.scores"]), 4);

    let ck = read(d, "run/checkpoint.json").replacen("\"format_version\":1", "\"format_version\":2", 1);
    fs::write(d.join("old.json"), ck).unwrap();
    assert_eq!(
        code(&["score", "--checkpoint", "old.json", "--data", "run/test.tsv", "--method", "soft"]),
        5
    );
}
