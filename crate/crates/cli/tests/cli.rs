use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
data.items_per_class = 24
data.background_classes = 4
data.background_items_per_class = 16
model.filters = 2,4,4
model.hidden = 8
model.layers = 1
model.embedding_dim = 16
train.epochs = 1
train.min_class_count = 2
eval.episodes = 10
eval.seeds = 1
";

fn fsm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsm"))
        .args(args)
        .args(["--config", "exp.cfg", "--out", "out"])
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn prepared() -> tempfile::TempDir {
    prepared_with("")
}

fn prepared_with(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), format!("{SMALL}{extra}")).unwrap();
    let out = fsm(dir.path(), &["prepare"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn prepare_writes_the_dataset_layout_and_echoes_the_config() {
    let dir = prepared();
    for rel in [
        "out/data/indomain/manifest.tsv",
        "out/data/background/images-train.idx",
        "out/prepare.config",
    ] {
        assert!(dir.path().join(rel).exists(), "{rel}");
    }
    assert!(read(dir.path(), "out/prepare.config").contains("data.items_per_class = 24"));
}

#[test]
fn overlapping_splits_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = "path\tspeaker\tlabel\tsplit\na.wav\ts1\tone\ttrain\na.wav\ts1\tone\ttest\n";
    std::fs::write(dir.path().join("m.tsv"), manifest).unwrap();
    std::fs::write(
        dir.path().join("exp.cfg"),
        "data.source = files\ndata.prepare = indomain\ndata.speech_manifest = m.tsv\n",
    )
    .unwrap();
    let out = fsm(dir.path(), &["prepare"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("appears in splits train and test"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn unknown_keys_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "eval.shotz = 5\n").unwrap();
    let out = fsm(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("eval.shotz"));
}

#[test]
fn cae_without_pairs_names_the_missing_input() {
    let dir = prepared();
    let out = fsm(dir.path(), &["train", "--set", "model.objective=cae"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.pairs"), "{}", stderr(&out));
}

#[test]
fn five_seeds_give_five_checkpoints_with_distinct_seeds() {
    let dir = prepared();
    let out = fsm(dir.path(), &["train", "--seed", "40", "--set", "train.seeds=5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let seeds: std::collections::BTreeSet<String> = (0..5)
        .map(|k| {
            let meta = read(dir.path(), &format!("out/models/vision-ae-seed{k}.meta"));
            meta.lines()
                .find(|l| l.starts_with("provenance.0.seed"))
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(seeds.len(), 5, "{seeds:?}");
    assert!(seeds.contains("provenance.0.seed = 44"));

    // The trained checkpoints evaluate; a seed count mismatch is fatal.
    let eval = [
        "eval",
        "--task",
        "unimodal-vision",
        "--set",
        "eval.vision_model=out/models/vision-ae",
    ];
    let ok = fsm(dir.path(), &[&eval[..], &["--set", "eval.seeds=5"]].concat());
    assert!(ok.status.success(), "{}", stderr(&ok));
    let bad = fsm(dir.path(), &[&eval[..], &["--set", "eval.seeds=3"]].concat());
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("5 checkpoint(s)"), "{}", stderr(&bad));
}

#[test]
fn baseline_row_is_labelled_dtw_plus_pixels() {
    // Five-shot episodes need enough test items per spoken class.
    let dir = prepared_with("data.items_per_class = 50\n");
    let out = fsm(
        dir.path(),
        &["eval", "--baseline", "dtw+pixels", "--set", "eval.shots=1,5"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let jsonl = read(dir.path(), "out/reports/dtw-pixels-multimodal.jsonl");
    let labels: Vec<String> = jsonl
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["label"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(labels, ["DTW + Pixels", "DTW + Pixels"]);
    let table = read(dir.path(), "out/reports/dtw-pixels-multimodal.txt");
    assert!(table.contains("Five-shot") && table.contains("One-shot"), "{table}");
}

#[test]
fn unimodal_speech_reports_are_eleven_way() {
    let dir = prepared();
    let out = fsm(
        dir.path(),
        &["eval", "--baseline", "dtw+pixels", "--task", "unimodal-speech"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = read(dir.path(), "out/reports/dtw-pixels-unimodal-speech.txt");
    assert!(table.starts_with("Task: unimodal-speech (11-way)"), "{table}");
}

#[test]
fn rerunning_prepare_reproduces_identical_files() {
    let a = prepared();
    let b = prepared();
    for rel in [
        "out/data/indomain/images-test.idx",
        "out/data/indomain/speech/train/00003.wav",
        "out/data/background/manifest.tsv",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}
