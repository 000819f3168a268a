use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sunet");

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(BIN);
    for a in args {
        cmd.arg(a);
    }
    cmd.output().expect("spawn sunet")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// 12 small images (3 subjects of 4 slices) and a tiny model.
const SMALL: &str = r#"{
  "seed": 3,
  "data": { "generate": { "n": 12, "image_size": 16, "area_range": [10, 30], "slices_per_subject": 4 } },
  "backbone": { "base_channels": 2, "depth": 2, "input_size": [16, 16] },
  "channel": { "sentence_length": 4, "vocab_size": 6, "hidden_size": 6, "cell_size": 6, "embedding_dim": 4 },
  "train": { "epochs": 2, "batch_size": 4, "learning_rate": 0.01 },
  "analysis": { "min_count": 2 }
}"#;

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_owned();
        let config = root.join("config.json");
        std::fs::write(&config, SMALL).unwrap();
        let data = root.join("data");
        ok(run(&[&"gendata", &"--config", &config, &"--out", &data]));
        Self {
            _tmp: tmp,
            root,
            config,
            data,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> =
            vec![&"train", &"--config", &self.config, &"--data", &self.data, &"--out", &dir];
        for e in extra {
            args.push(e);
        }
        ok(run(&args));
        dir
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn files_in(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

#[test]
fn gendata_writes_pairs_and_is_reproducible() {
    let f = Fixture::new();
    assert_eq!(files_in(&f.data, ".img.pgm"), 12);
    assert!(files_in(&f.data, ".mask.pgm") == 12);
    let stats = String::from_utf8(read(&f.data.join("stats.csv"))).unwrap();
    assert_eq!(stats.lines().count(), 13);

    let again = f.path("again");
    ok(run(&[&"gendata", &"--config", &f.config, &"--out", &again]));
    for entry in std::fs::read_dir(&f.data).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(read(&f.data.join(&name)), read(&again.join(&name)), "{name:?}");
    }
}

#[test]
fn unknown_config_key_exits_2() {
    let f = Fixture::new();
    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "train": {"epoch": 3}}"#).unwrap();
    let out = run(&[&"gendata", &"--config", &bad, &"--out", &f.path("x")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ERROR code=2"), "{err}");
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn train_infer_analyze_pipeline() {
    let f = Fixture::new();
    let model = f.train("model", &[]);
    assert!(model.join("model.ckpt").is_file());
    assert!(model.join("config.json").is_file());
    let epochs = String::from_utf8(read(&model.join("epochs.csv"))).unwrap();
    let lines: Vec<&str> = epochs.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_dsc,tau");
    assert_eq!(lines.len(), 3);

    // Same seed, same epochs.csv.
    let twin = f.train("twin", &[]);
    assert_eq!(read(&model.join("epochs.csv")), read(&twin.join("epochs.csv")));

    let inf = f.path("inf");
    ok(run(&[&"infer", &"--model", &model, &"--data", &f.data, &"--out", &inf]));
    assert_eq!(files_in(&inf, ".pred.pgm"), 12);
    let sentences = String::from_utf8(read(&inf.join("sentences.jsonl"))).unwrap();
    assert_eq!(sentences.lines().count(), 12);
    assert!(sentences.lines().all(|l| l.contains("\"mode\":\"infer\"")));
    let dsc = String::from_utf8(read(&inf.join("dsc.csv"))).unwrap();
    assert_eq!(dsc.lines().count(), 13);

    let inf2 = f.path("inf2");
    ok(run(&[&"infer", &"--model", &model, &"--data", &f.data, &"--out", &inf2]));
    for entry in std::fs::read_dir(&inf).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(read(&inf.join(&name)), read(&inf2.join(&name)), "{name:?}");
    }

    let an = f.path("an");
    let stats = f.data.join("stats.csv");
    let sent = inf.join("sentences.jsonl");
    let out = ok(run(&[
        &"analyze",
        &"--sentences",
        &sent,
        &"--stats",
        &stats,
        &"--out",
        &an,
        &"--config",
        &f.config,
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Tumor"));
    let table = String::from_utf8(read(&an.join("table2.csv"))).unwrap();
    assert!(table.starts_with("outcome,model_kind,position,statistic,is_best\n"));
    assert!(table.lines().any(|l| l.starts_with("Tumor,binary_logistic,")));
    assert!(an.join("patterns.txt").is_file());

    let an2 = f.path("an2");
    ok(run(&[
        &"analyze",
        &"--sentences",
        &sent,
        &"--stats",
        &stats,
        &"--out",
        &an2,
        &"--config",
        &f.config,
    ]));
    assert_eq!(read(&an.join("table2.csv")), read(&an2.join("table2.csv")));
    assert_eq!(read(&an.join("patterns.txt")), read(&an2.join("patterns.txt")));
}

#[test]
fn ablated_model_has_no_channel() {
    let f = Fixture::new();
    let model = f.train("ablated", &["--ablate-channel", "--epochs", "1"]);
    let cfg: serde_json::Value = serde_json::from_slice(&read(&model.join("config.json"))).unwrap();
    assert!(cfg["channel"].is_null());
    let epochs = String::from_utf8(read(&model.join("epochs.csv"))).unwrap();
    assert_eq!(epochs.lines().count(), 2);

    let inf = f.path("inf");
    ok(run(&[&"infer", &"--model", &model, &"--data", &f.data, &"--out", &inf]));
    assert_eq!(files_in(&inf, ".pred.pgm"), 12);
    assert!(!inf.join("sentences.jsonl").exists());
}

#[test]
fn infer_rejects_sentence_length_mismatch() {
    let f = Fixture::new();
    let model = f.train("model", &["--epochs", "1"]);
    let other = f.path("other.json");
    std::fs::write(&other, SMALL.replace("\"sentence_length\": 4", "\"sentence_length\": 5")).unwrap();
    let out = run(&[
        &"infer",
        &"--model",
        &model,
        &"--data",
        &f.data,
        &"--out",
        &f.path("inf"),
        &"--config",
        &other,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sentence_length"));
}

#[test]
fn analyze_join_failure_exits_3() {
    let f = Fixture::new();
    let sent = f.path("s.jsonl");
    std::fs::write(&sent, "{\"sample_id\":\"ghost\",\"slice_index\":9,\"ids\":[1,2],\"mode\":\"infer\"}\n").unwrap();
    let stats = f.data.join("stats.csv");
    let out = run(&[&"analyze", &"--sentences", &sent, &"--stats", &stats, &"--out", &f.path("an")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost_9"));
}

#[test]
fn missing_data_dir_exits_3() {
    let f = Fixture::new();
    let out = run(&[
        &"train",
        &"--config",
        &f.config,
        &"--data",
        &f.path("nope"),
        &"--out",
        &f.path("m"),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
