//! Experiment configuration: line-oriented `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. `include = path` splices in
//! another file (resolved against the including file's directory) at that
//! point; later assignments override earlier ones. Every key has a
//! default, unknown keys are rejected, and `${out}` inside a value expands
//! to the resolved `experiment.out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Every recognised key with its default value and a one-line description.
/// An empty default means "derived at use site" (see the description).
pub const KEYS: &[(&str, &str, &str)] = &[
    ("experiment.seed", "1", "master seed; training seed k is master + k"),
    ("experiment.threads", "0", "worker threads (0: all cores)"),
    ("experiment.out", "out", "experiment root directory"),
    ("data.source", "synthetic", "synthetic | files"),
    (
        "data.prepare",
        "both",
        "datasets written by `prepare`: indomain | background | both",
    ),
    (
        "data.indomain",
        "${out}/data/indomain",
        "prepared in-domain dataset directory",
    ),
    (
        "data.background",
        "${out}/data/background",
        "prepared background dataset directory",
    ),
    ("data.classes", "10", "synthetic in-domain digit classes"),
    ("data.speakers", "4", "synthetic in-domain speakers"),
    (
        "data.items_per_class",
        "200",
        "synthetic in-domain items per class and modality",
    ),
    ("data.background_classes", "20", "synthetic background classes"),
    ("data.background_speakers", "4", "synthetic background speakers"),
    (
        "data.background_items_per_class",
        "100",
        "synthetic background items per class and modality",
    ),
    ("data.image_noise", "0.1", "synthetic image noise amplitude"),
    ("data.speech_noise", "0.02", "synthetic additive speech noise amplitude"),
    ("data.sample_rate", "16000", "synthetic sample rate in Hz"),
    ("data.train_fraction", "0.6", "synthetic train split fraction"),
    ("data.validation_fraction", "0.1", "synthetic validation split fraction"),
    ("data.speech_manifest", "", "files source: speech manifest TSV"),
    ("data.images_train", "", "files source: IDX images, train split"),
    ("data.labels_train", "", "files source: IDX labels, train split"),
    (
        "data.images_validation",
        "",
        "files source: IDX images, validation split (optional)",
    ),
    (
        "data.labels_validation",
        "",
        "files source: IDX labels, validation split (optional)",
    ),
    ("data.images_test", "", "files source: IDX images, test split"),
    ("data.labels_test", "", "files source: IDX labels, test split"),
    ("data.invert", "false", "files source: invert image intensities"),
    ("mfcc.frame_ms", "25", "analysis window length"),
    ("mfcc.hop_ms", "10", "frame shift"),
    ("mfcc.n_filters", "24", "mel filterbank channels"),
    ("mfcc.n_ceps", "13", "cepstral coefficients kept"),
    ("mfcc.preemphasis", "0.97", "pre-emphasis coefficient"),
    ("mfcc.log_floor", "1e-10", "floor applied before the log"),
    ("mfcc.low_hz", "0", "lowest filterbank edge"),
    ("mfcc.high_hz", "", "highest filterbank edge (empty: Nyquist)"),
    ("mfcc.normalize", "true", "per-utterance mean/variance normalisation"),
    ("model.modality", "vision", "speech | vision"),
    ("model.objective", "ae", "ae | cae | ae-cae | classifier | siamese"),
    ("model.filters", "32,64,128", "vision conv filters per layer"),
    ("model.hidden", "400", "speech GRU hidden units"),
    ("model.layers", "3", "speech GRU layers"),
    ("model.embedding_dim", "130", "embedding dimension"),
    ("model.name", "", "checkpoint stem (empty: <modality>-<objective>)"),
    (
        "train.dataset",
        "",
        "prepared dataset (empty: background for supervised objectives, else in-domain)",
    ),
    ("train.pairs", "", "pair file for cae / ae-cae / fine-tuning"),
    ("train.validation_pairs", "", "pair file over the validation split"),
    (
        "train.init",
        "",
        "checkpoint stem to fine-tune with the correspondence loss",
    ),
    ("train.epochs", "100", "maximum epochs of the main phase"),
    (
        "train.pretrain_epochs",
        "20",
        "autoencoder epochs before switching (ae-cae)",
    ),
    ("train.batch_size", "", "minibatch size (empty: 64 vision, 32 speech)"),
    ("train.learning_rate", "0.001", "Adam learning rate"),
    ("train.patience", "10", "early-stopping patience in epochs (0: off)"),
    ("train.margin", "0.2", "triplet margin"),
    (
        "train.min_class_count",
        "10",
        "supervised: minimum items for a class to be used",
    ),
    ("train.classes_per_batch", "8", "siamese: classes per batch"),
    (
        "train.validation_episodes",
        "200",
        "supervised: one-shot validation episodes",
    ),
    (
        "train.max_batches_per_epoch",
        "0",
        "cap on batches per epoch (0: no cap)",
    ),
    ("train.seeds", "1", "models trained, one per seed"),
    ("mine.modality", "vision", "speech | vision"),
    ("mine.dataset", "", "prepared dataset (empty: data.indomain)"),
    ("mine.split", "train", "split to mine"),
    (
        "mine.method",
        "unsupervised",
        "unsupervised | encoder | oracle | ground_truth",
    ),
    ("mine.k", "1", "partners per item"),
    ("mine.encoder", "", "checkpoint stem for the encoder method"),
    ("mine.name", "", "pair file stem (empty: <modality>-<method>)"),
    (
        "eval.task",
        "multimodal",
        "multimodal | unimodal-speech | unimodal-vision",
    ),
    ("eval.dataset", "", "prepared dataset (empty: data.indomain)"),
    ("eval.classes", "11", "spoken classes per episode"),
    (
        "eval.shots",
        "1",
        "support examples per class; a list gives one column each",
    ),
    ("eval.episodes", "400", "episodes per seed"),
    ("eval.queries", "10", "queries per episode"),
    (
        "eval.seeds",
        "5",
        "evaluation seeds (one checkpoint each for learned models)",
    ),
    (
        "eval.class_mean",
        "false",
        "K-shot rule: nearest mean class distance instead of nearest item",
    ),
    ("eval.baseline", "none", "none | dtw+pixels | random"),
    (
        "eval.speech_model",
        "",
        "speech checkpoint stem, without the -seed<k> suffix",
    ),
    (
        "eval.vision_model",
        "",
        "vision checkpoint stem, without the -seed<k> suffix",
    ),
    ("eval.label", "", "report row label (empty: derived)"),
    ("eval.name", "", "report file stem (empty: derived from label and task)"),
    ("eval.audit", "false", "also write per-episode records"),
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Resolved configuration: every key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        Config { values }
    }
}

impl Config {
    /// Defaults overridden by the file at `path` (and its includes).
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = Config::default();
        let mut stack = Vec::new();
        cfg.apply_file(path, &mut stack)?;
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> CliResult<()> {
        let canon = path
            .canonicalize()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if stack.contains(&canon) {
            return Err(CliError::Config(format!("{}: include cycle", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        stack.push(canon);
        let dir = path.parent().unwrap_or(Path::new("."));
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = || format!("{}:{}", path.display(), n + 1);
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{}: expected `key = value`, got {line:?}", at())))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                self.apply_file(&dir.join(v), stack)?;
            } else {
                self.set(k, v).map_err(|e| CliError::Config(format!("{}: {e}", at())))?;
            }
        }
        stack.pop();
        Ok(())
    }

    /// Assign one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if default_of(key).is_none() {
            return Err(CliError::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply a `key=value` override given on the command line.
    pub fn set_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// The value with `${out}` expanded.
    pub fn raw(&self, key: &str) -> String {
        let v = self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}"));
        if key == "experiment.out" {
            return v.clone();
        }
        v.replace("${out}", &self.values["experiment.out"])
    }

    /// `None` when the value is empty.
    pub fn opt(&self, key: &str) -> Option<String> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.opt(key).map(PathBuf::from)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse().map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}")))
    }

    /// Parse an optional value; empty means `None`.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.opt(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> CliResult<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("{key} = {v:?}: {e}")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("experiment.out"))
    }

    /// Every key with its expanded value and description, sorted.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{k} = {}\n", self.raw(k)));
        }
        out
    }
}
