//! Every command run twice with the same config and seed, at different
//! worker-thread counts, must write byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use crate::Outcome;

const CONFIG: &str = "\
data.items_per_class = 24
data.background_classes = 4
data.background_items_per_class = 16
model.filters = 2,4,4
model.hidden = 8
model.layers = 1
model.embedding_dim = 16
train.epochs = 2
train.seeds = 2
train.min_class_count = 2
eval.episodes = 30
eval.seeds = 2
eval.shots = 1,2
eval.audit = true
";

/// (subcommand, extra arguments)
const STEPS: &[(&str, &[&str])] = &[
    ("prepare", &[]),
    ("mine-pairs", &["--set", "mine.modality=vision"]),
    ("mine-pairs", &["--set", "mine.modality=speech"]),
    (
        "train",
        &[
            "--set",
            "model.modality=vision",
            "--set",
            "model.objective=cae",
            "--set",
            "train.pairs=${out}/pairs/vision-unsupervised.pairs",
        ],
    ),
    (
        "train",
        &["--set", "model.modality=speech", "--set", "model.objective=ae"],
    ),
    (
        "mine-pairs",
        &[
            "--set",
            "mine.modality=vision",
            "--set",
            "mine.method=encoder",
            "--set",
            "mine.encoder=${out}/models/vision-cae-seed0",
        ],
    ),
    ("eval", &["--baseline", "dtw+pixels"]),
    ("eval", &["--baseline", "random", "--task", "unimodal-speech"]),
    (
        "eval",
        &[
            "--set",
            "eval.vision_model=${out}/models/vision-cae",
            "--set",
            "eval.speech_model=${out}/models/speech-ae",
        ],
    ),
];

fn snapshot(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel.ends_with(".config") {
                // The echoed thread count is the one setting allowed to vary.
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.starts_with("experiment.threads"))
                    .flat_map(|l| [l, "\n"])
                    .collect::<String>()
                    .into_bytes();
            }
            out.insert(rel, bytes);
        }
    }
}

fn run_all(work: &Path, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out = work.join("out");
    if out.exists() {
        std::fs::remove_dir_all(&out).unwrap();
    }
    for (cmd, extra) in STEPS {
        let status = Command::new(env!("CARGO_BIN_EXE_fsm"))
            .arg(cmd)
            .args([
                "--config",
                "exp.cfg",
                "--seed",
                "5",
                "--threads",
                threads,
                "--out",
                "out",
            ])
            .args(*extra)
            .current_dir(work)
            .env("RUST_LOG", "error")
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("`{cmd} {}` exited with {status}", extra.join(" ")));
        }
    }
    let mut files = BTreeMap::new();
    snapshot(&out, &out, &mut files);
    Ok(files)
}

pub fn run() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    std::fs::write(work.path().join("exp.cfg"), CONFIG).unwrap();
    let result = run_all(work.path(), "1").and_then(|a| run_all(work.path(), "3").map(|b| (a, b)));
    match result {
        Err(e) => Outcome { pass: false, detail: e },
        Ok((a, b)) => {
            let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
            let reports = a.keys().filter(|k| k.starts_with("reports/")).count();
            Outcome {
                pass: differing.is_empty() && reports > 0,
                detail: format!(
                    "{} commands run twice (1 and 3 threads): {} files compared, echoed configs modulo experiment.threads ({reports} report files), {} differ{}",
                    STEPS.len(),
                    a.len(),
                    differing.len(),
                    if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
                ),
            }
        }
    }
}
