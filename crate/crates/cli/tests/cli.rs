use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csn_core::learners::load_model;
use serde_json::Value;

fn csn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csn"))
        .args(args)
        .env_remove("CSN_SEED")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "\
# tiny gaussian run
model.hidden = 16
train.episodes = 30
train.val_interval = 10
train.val_episodes = 5
eval.episodes = 20
";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_episode_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let out = dir.path().join("out");
    let o = csn(&["train", s(&cfg), "--episodes", "0", "--seed", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = load_model(out.join("best.model")).unwrap();
    let mut config = csn_cli::load_config(&cfg, &["train.seed=4".into()]).unwrap();
    config.set("train.episodes", "0").unwrap();
    let (_, _, fresh) = csn_cli::build(&config).unwrap();
    for ((_, a), (_, b)) in saved.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let resolved = fs::read_to_string(out.join("resolved.config")).unwrap();
    assert!(resolved.contains("train.seed = 4"));
    assert!(resolved.contains("model.input = vector:16"));
}

fn metrics(out: &Path) -> Vec<Value> {
    fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("each line is one JSON object"))
        .collect()
}

/// A record without its wall-clock fields.
fn untimed(mut v: Value) -> Value {
    let obj = v.as_object_mut().unwrap();
    for k in ["timestamp", "ms_per_episode", "extract_ms"] {
        assert!(obj.remove(k).is_some(), "record lacks {k}");
    }
    v
}

#[test]
fn same_seed_gives_the_same_metrics_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = csn(&["train", s(&cfg), "--seed", "9", "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ma, mb) = (metrics(&a), metrics(&b));
    assert_eq!(ma.len(), 6);
    for rec in &ma {
        for key in ["episode", "split", "loss", "accuracy", "ms_per_episode", "extract_ms", "timestamp"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
    }
    let strip = |m: Vec<Value>| m.into_iter().map(untimed).collect::<Vec<_>>();
    assert_eq!(strip(ma), strip(mb));
    assert_eq!(fs::read(a.join("best.model")).unwrap(), fs::read(b.join("best.model")).unwrap());
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.config", "modle.arch = adaffn\n");
    let o = csn(&["train", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("modle.arch"), "{}", stderr(&o));
    let o = csn(&["train", s(&write_config(dir.path(), "ok.config", SMALL)), "--set", "train.lr=fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", &format!("{SMALL}train.lr = 1e300\n"));
    let o = csn(&["train", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn eval_is_deterministic_and_reports_the_episode_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let out = dir.path().join("out");
    assert!(csn(&["train", s(&cfg), "--episodes", "0", "--out", s(&out)]).status.success());
    let model = out.join("best.model");
    let run = || {
        let o = csn(&["eval", s(&model), "--config", s(&cfg), "--episodes", "400", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v
    };
    let (a, b) = (run(), run());
    for key in ["mean", "std", "ci95", "episodes"] {
        assert_eq!(a[key], b[key], "{key}");
    }
    assert_eq!(a["episodes"], 400);
    assert!(a["ms_per_episode"].is_number());
    let mean = a["mean"].as_f64().unwrap();
    assert!((0.10..=0.30).contains(&mean), "untrained mean {mean}");
}

#[test]
fn eval_rejects_a_model_for_another_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let out = dir.path().join("out");
    assert!(csn(&["train", s(&cfg), "--episodes", "0", "--out", s(&out)]).status.success());
    let cloze = write_config(dir.path(), "cloze.config", "source.kind = cloze\n");
    let o = csn(&["eval", s(&out.join("best.model")), "--config", s(&cloze), "--episodes", "5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = csn(&["eval", s(&out.join("best.model")), "--config", s(&cfg), "--set", "episode.way=4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_the_reference_models() {
    let dir = tempfile::tempdir().unwrap();
    let ffn = write_config(dir.path(), "ffn.config", "cond.mode = grad\nmodel.hidden = 8,8\nmodel.dropout = 0.3\n");
    let lstm = write_config(
        dir.path(),
        "lstm.config",
        "source.kind = cloze\nsource.seq_len = 3\nmodel.arch = adalstm\nmodel.hidden = 6\nmemory.key_hidden = 8\n",
    );
    for cfg in [&ffn, &lstm] {
        let o = csn(&["gradcheck", s(cfg), "--samples", "20"]);
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(o.status.success(), "{text}{}", stderr(&o));
        assert!(text.contains("PASS"), "{text}");
        for group in ["base", "key", "value"] {
            assert!(text.contains(group), "{text}");
        }
    }
}

#[test]
fn gradcheck_names_a_corrupted_op() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ffn.config", "model.hidden = 8\n");
    let o = csn(&["gradcheck", s(&cfg), "--samples", "10", "--corrupt", "tanh"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(1), "{text}");
    assert!(text.contains("FAIL"), "{text}");
    assert!(text.contains("tanh"), "{text}");
    let o = csn(&["gradcheck", s(&cfg), "--corrupt", "nosuchop"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grid_of_one_gives_one_csv_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let grid = write_config(dir.path(), "one.grid", "memory.value_fn = perceptron1\n");
    let csv = dir.path().join("out.csv");
    let o = csn(&["ablate", s(&cfg), "--grid", s(&grid), "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines[0].starts_with("combination,mean,ci95"));
    assert!(lines[1].starts_with("memory.value_fn=perceptron1,"));
    let bad = write_config(dir.path(), "bad.grid", "memory.value = mlp3\n");
    assert_eq!(csn(&["ablate", s(&cfg), "--grid", s(&bad)]).status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", SMALL);
    let run = |env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(format!("{env:?}{flag:?}").replace(['"', '(', ')'], ""));
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_csn"));
        cmd.args(["train", s(&cfg), "--episodes", "0", "--out", s(&out)]).env_remove("CSN_SEED");
        if let Some(e) = env {
            cmd.env("CSN_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("resolved.config")).unwrap()
    };
    assert!(run(None, None).contains("train.seed = 1"));
    assert!(run(Some("77"), None).contains("train.seed = 77"));
    assert!(run(Some("77"), Some("5")).contains("train.seed = 5"));
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csn"));
    let o = cmd.args(["train", s(&cfg), "--episodes", "0"]).env("CSN_SEED", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_counts_backward_traversals_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.config", "model.hidden = 16\nbench.warmup = 2\n");
    let o = csn(&["bench", s(&cfg), "--episodes", "5", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let modes = v["modes"].as_array().unwrap();
    let by = |name: &str| modes.iter().find(|m| m["mode"] == name).unwrap().clone();
    assert!(by("df")["backward_passes"].as_array().unwrap().iter().all(|n| n == 0));
    // 5-way 1-shot: one traversal per description example
    assert!(by("grad")["backward_passes"].as_array().unwrap().iter().all(|n| n == 5));
    assert!(v["grad_over_df"].as_f64().unwrap() > 0.0);
}
