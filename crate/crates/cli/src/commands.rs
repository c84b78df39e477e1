//! The four pipeline commands. Each reads a resolved [`Config`], writes its
//! artifacts under `experiment.out` and echoes the config next to them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use log::info;

use fsm_core::data::idx::{load_idx, IdxOptions};
use fsm_core::data::manifest::read_manifest;
use fsm_core::data::prepared::{load_prepared, write_external, write_synthetic};
use fsm_core::data::synthetic::{generate_waveforms, SyntheticConfig, SyntheticCorpus, SyntheticKind};
use fsm_core::data::{ImageItem, Items, Modality, PairedDataset, Partitioned, Split};
use fsm_core::dsp::MfccConfig;
use fsm_core::episodes::{render_table, run_benchmark, EpisodeConfig, EvalReport, Features, Scorer, Task};
use fsm_core::models::{
    class_inventory, fine_tune, model_paths, train, Architecture, EncoderModel, Objective, SpeechArch, TrainConfig,
    TrainData, VisionArch,
};
use fsm_core::pairs::{
    ground_truth_pairs, labels_of, make_oracle_pairs, mine_unsupervised, mine_with_encoder, pair_precision, PairSet,
};
use fsm_core::rng::{derive_seed, tag};

use crate::config::Config;
use crate::error::{CliError, CliResult};

/// Row label of the raw-feature baseline.
pub const BASELINE_LABEL: &str = "DTW + Pixels";
/// Row label of the uniform-random reference.
pub const RANDOM_LABEL: &str = "Random";

fn mkdir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| fsm_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    std::fs::write(path, text).map_err(|source| fsm_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn echo_config(cfg: &Config, command: &str) -> CliResult<()> {
    write(&cfg.out_dir().join(format!("{command}.config")), &cfg.echo())
}

pub fn mfcc_config(cfg: &Config) -> CliResult<MfccConfig> {
    Ok(MfccConfig {
        frame_ms: cfg.parse("mfcc.frame_ms")?,
        hop_ms: cfg.parse("mfcc.hop_ms")?,
        n_filters: cfg.parse("mfcc.n_filters")?,
        n_ceps: cfg.parse("mfcc.n_ceps")?,
        preemphasis: cfg.parse("mfcc.preemphasis")?,
        log_floor: cfg.parse("mfcc.log_floor")?,
        low_hz: cfg.parse("mfcc.low_hz")?,
        high_hz: cfg.parse_opt("mfcc.high_hz")?,
        normalize: cfg.parse("mfcc.normalize")?,
    })
}

fn load_dataset(cfg: &Config, key: &str) -> CliResult<PairedDataset> {
    let dir = cfg.path(key).unwrap_or_else(|| PathBuf::from(cfg.raw("data.indomain")));
    info!("loading dataset {}", dir.display());
    Ok(load_prepared(&dir, &mfcc_config(cfg)?)?)
}

// ---------------------------------------------------------------- prepare

fn synthetic_config(cfg: &Config, kind: SyntheticKind) -> CliResult<SyntheticConfig> {
    let (classes, speakers, items) = match kind {
        SyntheticKind::InDomain => ("data.classes", "data.speakers", "data.items_per_class"),
        SyntheticKind::Background => (
            "data.background_classes",
            "data.background_speakers",
            "data.background_items_per_class",
        ),
    };
    let seed: u64 = cfg.parse("experiment.seed")?;
    let kind_tag = match kind {
        SyntheticKind::InDomain => tag("indomain"),
        SyntheticKind::Background => tag("background"),
    };
    Ok(SyntheticConfig {
        kind,
        classes: cfg.parse(classes)?,
        speakers: cfg.parse(speakers)?,
        items_per_class: cfg.parse(items)?,
        image_noise: cfg.parse("data.image_noise")?,
        speech_noise: cfg.parse("data.speech_noise")?,
        seed: derive_seed(seed, &[tag("prepare"), kind_tag]),
        sample_rate: cfg.parse("data.sample_rate")?,
        train_fraction: cfg.parse("data.train_fraction")?,
        validation_fraction: cfg.parse("data.validation_fraction")?,
        ..SyntheticConfig::default()
    })
}

fn corpus_labels(c: &SyntheticCorpus) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for split in Split::ALL {
        out.extend(c.waves.get(split).iter().filter_map(|w| w.label.clone()));
        out.extend(c.images.get(split).iter().filter_map(|i| i.label.clone()));
    }
    out
}

fn files_images(cfg: &Config) -> CliResult<Partitioned<ImageItem>> {
    let opts = IdxOptions {
        invert: cfg.parse("data.invert")?,
    };
    let mut images = Partitioned::default();
    for split in Split::ALL {
        let (ik, lk) = (format!("data.images_{split}"), format!("data.labels_{split}"));
        match (cfg.path(&ik), split) {
            (Some(path), _) => {
                let labels = cfg
                    .path(&lk)
                    .ok_or_else(|| CliError::Config(format!("{lk} is required alongside {ik}")))?;
                *images.get_mut(split) = load_idx(&path, Some(&labels), opts)?;
            }
            (None, Split::Validation) => {}
            (None, _) => return Err(CliError::Config(format!("data.source = files requires {ik}"))),
        }
    }
    Ok(images)
}

/// Materialise the configured datasets.
pub fn prepare(cfg: &Config) -> CliResult<()> {
    let which = cfg.raw("data.prepare");
    let targets: Vec<(SyntheticKind, &str)> = match which.as_str() {
        "indomain" => vec![(SyntheticKind::InDomain, "data.indomain")],
        "background" => vec![(SyntheticKind::Background, "data.background")],
        "both" => vec![
            (SyntheticKind::InDomain, "data.indomain"),
            (SyntheticKind::Background, "data.background"),
        ],
        other => {
            return Err(CliError::Config(format!(
                "data.prepare = {other:?}: expected indomain, background or both"
            )))
        }
    };
    match cfg.raw("data.source").as_str() {
        "synthetic" => {
            let corpora = targets
                .iter()
                .map(|&(kind, key)| Ok((generate_waveforms(&synthetic_config(cfg, kind)?)?, key)))
                .collect::<CliResult<Vec<_>>>()?;
            if let [(a, _), (b, _)] = corpora.as_slice() {
                let (la, lb) = (corpus_labels(a), corpus_labels(b));
                let shared: Vec<&String> = la.intersection(&lb).collect();
                if !shared.is_empty() {
                    return Err(fsm_core::Error::Validation(format!(
                        "background shares classes {shared:?} with in-domain data"
                    ))
                    .into());
                }
            }
            for (corpus, key) in &corpora {
                let dir = PathBuf::from(cfg.raw(key));
                write_synthetic(&dir, corpus)?;
                info!("wrote {} to {}", corpus.id, dir.display());
            }
        }
        "files" => {
            let [(_, key)] = targets.as_slice() else {
                return Err(CliError::Config(
                    "data.source = files prepares one dataset: set data.prepare to indomain or background".into(),
                ));
            };
            let manifest_path = cfg
                .path("data.speech_manifest")
                .ok_or_else(|| CliError::Config("data.source = files requires data.speech_manifest".into()))?;
            let manifest = read_manifest(&manifest_path)?;
            let dir = PathBuf::from(cfg.raw(key));
            write_external(&dir, &manifest, &files_images(cfg)?)?;
            info!("wrote {} to {}", manifest.id, dir.display());
        }
        other => {
            return Err(CliError::Config(format!(
                "data.source = {other:?}: expected synthetic or files"
            )))
        }
    }
    echo_config(cfg, "prepare")
}

// ------------------------------------------------------------------ train

pub fn architecture(cfg: &Config, modality: Modality) -> CliResult<Architecture> {
    let embedding_dim = cfg.parse("model.embedding_dim")?;
    Ok(match modality {
        Modality::Vision => {
            let f: Vec<usize> = cfg.list("model.filters")?;
            let filters = f
                .try_into()
                .map_err(|_| CliError::Config("model.filters needs exactly 3 entries".into()))?;
            Architecture::Vision(VisionArch { filters, embedding_dim })
        }
        Modality::Speech => Architecture::Speech(SpeechArch {
            input_dim: cfg.parse("mfcc.n_ceps")?,
            hidden: cfg.parse("model.hidden")?,
            layers: cfg.parse("model.layers")?,
            embedding_dim,
        }),
    })
}

pub fn train_config(cfg: &Config, modality: Modality, seed: u64) -> CliResult<TrainConfig> {
    let base = TrainConfig::for_modality(modality);
    Ok(TrainConfig {
        epochs: cfg.parse("train.epochs")?,
        pretrain_epochs: cfg.parse("train.pretrain_epochs")?,
        batch_size: cfg.parse_opt("train.batch_size")?.unwrap_or(base.batch_size),
        learning_rate: cfg.parse("train.learning_rate")?,
        patience: cfg.parse("train.patience")?,
        margin: cfg.parse("train.margin")?,
        min_class_count: cfg.parse("train.min_class_count")?,
        classes_per_batch: cfg.parse("train.classes_per_batch")?,
        validation_episodes: cfg.parse("train.validation_episodes")?,
        max_batches_per_epoch: cfg.parse("train.max_batches_per_epoch")?,
        seed,
    })
}

fn model_name(cfg: &Config) -> String {
    cfg.opt("model.name")
        .unwrap_or_else(|| format!("{}-{}", cfg.raw("model.modality"), cfg.raw("model.objective")))
}

/// Checkpoint stem of training seed `k`.
pub fn seed_stem(stem: &Path, k: usize) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(format!("-seed{k}"));
    PathBuf::from(s)
}

fn load_pairs(path: &Path, data: &PairedDataset, items: Items<'_>) -> CliResult<PairSet> {
    let pairs = PairSet::load(path)?;
    if pairs.dataset_id != data.id {
        return Err(fsm_core::Error::Validation(format!(
            "{}: pairs were mined on {:?}, training dataset is {:?}",
            path.display(),
            pairs.dataset_id,
            data.id
        ))
        .into());
    }
    pairs.validate(items)?;
    Ok(pairs)
}

/// Train `train.seeds` models; model `k` uses seed `experiment.seed + k`.
pub fn train_cmd(cfg: &Config) -> CliResult<()> {
    let modality: Modality = cfg.parse("model.modality")?;
    let objective: Objective = cfg.parse("model.objective")?;
    let arch = architecture(cfg, modality)?;
    let dataset_key = if cfg.opt("train.dataset").is_some() {
        "train.dataset"
    } else if objective.is_supervised() {
        "data.background"
    } else {
        "data.indomain"
    };
    let data = load_dataset(cfg, dataset_key)?;
    let train_items = data.items(modality, Split::Train);
    let validation_items = data.items(modality, Split::Validation);
    let init = cfg.path("train.init");
    let pairs = match cfg.path("train.pairs") {
        Some(p) => Some(load_pairs(&p, &data, train_items)?),
        None if objective.needs_pairs() || init.is_some() => {
            return Err(CliError::Config(format!(
                "objective {objective}{} requires train.pairs (a pair file from `mine-pairs`)",
                if init.is_some() { " with train.init" } else { "" }
            )))
        }
        None => None,
    };
    let validation_pairs = cfg
        .path("train.validation_pairs")
        .map(|p| load_pairs(&p, &data, validation_items))
        .transpose()?;
    let td = TrainData {
        pairs: pairs.as_ref(),
        validation: (!validation_items.is_empty()).then_some(validation_items),
        validation_pairs: validation_pairs.as_ref(),
        ..TrainData::new(&data.id, train_items)
    };
    let seeds: usize = cfg.parse("train.seeds")?;
    if seeds == 0 {
        return Err(CliError::Config("train.seeds must be at least 1".into()));
    }
    let master: u64 = cfg.parse("experiment.seed")?;
    let stem = cfg.out_dir().join("models").join(model_name(cfg));
    mkdir(stem.parent().expect("stem has a parent"))?;
    for k in 0..seeds {
        let seed = master + k as u64;
        let tc = train_config(cfg, modality, seed)?;
        let (model, log) = match &init {
            Some(init) => {
                let model = EncoderModel::<f32>::load(init)?;
                if model.modality() != modality {
                    return Err(CliError::Config(format!("train.init is a {} model", model.modality())));
                }
                fine_tune(model, &td, &tc)?
            }
            None => {
                let classes = match objective {
                    Objective::Classifier => class_inventory(train_items, tc.min_class_count),
                    _ => Vec::new(),
                };
                train(EncoderModel::<f32>::new(arch, objective, classes, seed)?, &td, &tc)?
            }
        };
        let out = seed_stem(&stem, k);
        model.save(&out)?;
        let mut log_path = out.clone().into_os_string();
        log_path.push(".log.tsv");
        write(Path::new(&log_path), &log.to_tsv())?;
        info!("saved {} (best epochs {:?})", out.display(), log.best_epochs);
    }
    echo_config(cfg, "train")
}

// ------------------------------------------------------------- mine-pairs

pub fn mine_cmd(cfg: &Config) -> CliResult<()> {
    let modality: Modality = cfg.parse("mine.modality")?;
    let split: Split = cfg.parse("mine.split")?;
    let k: usize = cfg.parse("mine.k")?;
    let method = cfg.raw("mine.method");
    let data = load_dataset(cfg, "mine.dataset")?;
    let items = data.items(modality, split);
    let seed = derive_seed(cfg.parse("experiment.seed")?, &[tag("mine")]);
    let pairs = match method.as_str() {
        "unsupervised" => mine_unsupervised(items, &data.id, k)?,
        "encoder" => {
            let stem = cfg
                .path("mine.encoder")
                .ok_or_else(|| CliError::Config("mine.method = encoder requires mine.encoder".into()))?;
            let model = EncoderModel::<f32>::load(&stem)?;
            if model.modality() != modality {
                return Err(CliError::Config(format!(
                    "mine.encoder is a {} model",
                    model.modality()
                )));
            }
            mine_with_encoder(items, &data.id, &model, k)?
        }
        "oracle" => make_oracle_pairs(items, &data.id, k, seed)?,
        "ground_truth" => ground_truth_pairs(items, &data.id, k, seed)?,
        other => {
            return Err(CliError::Config(format!(
                "mine.method = {other:?}: expected unsupervised, encoder, oracle or ground_truth"
            )))
        }
    };
    pairs.validate(items)?;
    let name = cfg.opt("mine.name").unwrap_or_else(|| format!("{modality}-{method}"));
    let path = cfg.out_dir().join("pairs").join(format!("{name}.pairs"));
    mkdir(path.parent().expect("path has a parent"))?;
    pairs.save(&path)?;
    let precision = pair_precision(&pairs, &labels_of(items));
    let summary = format!(
        "pairs = {}\nskipped = {}\nsource = {}\nprecision = {precision:.6}\n",
        pairs.len(),
        pairs.skipped,
        pairs.source
    );
    write(&path.with_extension("summary"), &summary)?;
    info!(
        "wrote {} ({} pairs, precision {precision:.4})",
        path.display(),
        pairs.len()
    );
    echo_config(cfg, "mine-pairs")
}

// ------------------------------------------------------------------- eval

/// The checkpoints `<stem>-seed0 .. <stem>-seed{n-1}`; fails unless exactly
/// `n` exist.
fn seed_checkpoints(stem: &Path, n: usize) -> CliResult<Vec<PathBuf>> {
    let dir = stem
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let base = stem
        .file_name()
        .ok_or_else(|| CliError::Config(format!("bad model stem {}", stem.display())))?
        .to_string_lossy()
        .into_owned();
    let prefix = format!("{base}-seed");
    let found = std::fs::read_dir(dir)
        .map_err(|source| fsm_core::Error::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix(&prefix)
                .and_then(|rest| rest.strip_suffix(".meta"))
                .is_some_and(|k| k.parse::<usize>().is_ok())
        })
        .count();
    let stems: Vec<PathBuf> = (0..n).map(|k| seed_stem(stem, k)).collect();
    let missing = stems.iter().any(|s| !model_paths(s).1.exists());
    if found != n || missing {
        return Err(CliError::Config(format!(
            "eval.seeds = {n} but {found} checkpoint(s) match {}-seed<k>",
            stem.display()
        )));
    }
    Ok(stems)
}

fn load_models(cfg: &Config, key: &str, modality: Modality, seeds: usize) -> CliResult<Option<Vec<EncoderModel<f32>>>> {
    let Some(stem) = cfg.path(key) else {
        return Ok(None);
    };
    let models = seed_checkpoints(&stem, seeds)?
        .iter()
        .map(|s| EncoderModel::<f32>::load(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(m) = models.iter().find(|m| m.modality() != modality) {
        return Err(CliError::Config(format!("{key} is a {} model", m.modality())));
    }
    Ok(Some(models))
}

fn stem_label(cfg: &Config, key: &str) -> Option<String> {
    cfg.path(key)
        .and_then(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
}

/// Row label and scorers (one per seed) for the configured evaluation.
fn scorers(cfg: &Config, data: &PairedDataset, task: Task, seeds: usize) -> CliResult<(String, Vec<Scorer>)> {
    let needs_speech = task != Task::UnimodalVision;
    let needs_images = task != Task::UnimodalSpeech;
    let raw = |speech: bool, images: bool| -> CliResult<Scorer> {
        Ok(Scorer::Features {
            speech: speech
                .then(|| Features::dtw(data.speech.get(Split::Test)))
                .transpose()?,
            images: images.then(|| Features::pixels(data.images.get(Split::Test))),
        })
    };
    match cfg.raw("eval.baseline").as_str() {
        "dtw+pixels" => {
            let s = raw(needs_speech, needs_images)?;
            return Ok((BASELINE_LABEL.to_string(), vec![s; seeds]));
        }
        "random" => return Ok((RANDOM_LABEL.to_string(), vec![Scorer::UniformRandom; seeds])),
        "none" => {}
        other => {
            return Err(CliError::Config(format!(
                "eval.baseline = {other:?}: expected none, dtw+pixels or random"
            )))
        }
    }
    let speech_models = if needs_speech {
        load_models(cfg, "eval.speech_model", Modality::Speech, seeds)?
    } else {
        None
    };
    let vision_models = if needs_images {
        load_models(cfg, "eval.vision_model", Modality::Vision, seeds)?
    } else {
        None
    };
    if speech_models.is_none() && vision_models.is_none() {
        return Err(CliError::Config(format!(
            "task {task} needs eval.baseline or a checkpoint (eval.speech_model / eval.vision_model)"
        )));
    }
    let raw_speech = (needs_speech && speech_models.is_none())
        .then(|| Features::dtw(data.speech.get(Split::Test)))
        .transpose()?;
    let raw_images = (needs_images && vision_models.is_none()).then(|| Features::pixels(data.images.get(Split::Test)));
    let mut out = Vec::with_capacity(seeds);
    for k in 0..seeds {
        let speech = match &speech_models {
            Some(m) => Some(Features::embeddings(&m[k], data.items(Modality::Speech, Split::Test))?),
            None => raw_speech.clone(),
        };
        let images = match &vision_models {
            Some(m) => Some(Features::embeddings(&m[k], data.items(Modality::Vision, Split::Test))?),
            None => raw_images.clone(),
        };
        out.push(Scorer::Features { speech, images });
    }
    let mut parts = Vec::new();
    if needs_speech {
        parts.push(
            stem_label(cfg, "eval.speech_model")
                .filter(|_| speech_models.is_some())
                .unwrap_or_else(|| "DTW".into()),
        );
    }
    if needs_images {
        parts.push(
            stem_label(cfg, "eval.vision_model")
                .filter(|_| vision_models.is_some())
                .unwrap_or_else(|| "Pixels".into()),
        );
    }
    Ok((parts.join(" + "), out))
}

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Run the benchmark once per configured shot count.
pub fn eval_reports(cfg: &Config) -> CliResult<Vec<EvalReport>> {
    let task: Task = cfg.parse("eval.task")?;
    let seeds: usize = cfg.parse("eval.seeds")?;
    let data = load_dataset(cfg, "eval.dataset")?;
    let (derived, scorers) = scorers(cfg, &data, task, seeds)?;
    let label = cfg.opt("eval.label").unwrap_or(derived);
    let shots: Vec<usize> = cfg.list("eval.shots")?;
    shots
        .into_iter()
        .map(|k| {
            let ep = EpisodeConfig {
                classes: cfg.parse("eval.classes")?,
                shots: k,
                episodes: cfg.parse("eval.episodes")?,
                queries: cfg.parse("eval.queries")?,
                seeds,
                seed: cfg.parse("experiment.seed")?,
                class_mean: cfg.parse("eval.class_mean")?,
            };
            Ok(run_benchmark(&label, &scorers, &data, task, &ep)?)
        })
        .collect()
}

/// Write `<name>.txt` (table), `<name>.jsonl` (one report per line) and,
/// when enabled, `<name>.audit.jsonl`.
pub fn eval_cmd(cfg: &Config) -> CliResult<()> {
    let reports = eval_reports(cfg)?;
    let first = reports
        .first()
        .ok_or_else(|| CliError::Config("eval.shots is empty".into()))?;
    let name = cfg
        .opt("eval.name")
        .unwrap_or_else(|| format!("{}-{}", slug(&first.label), first.task));
    let dir = cfg.out_dir().join("reports");
    let table = render_table(&reports);
    write(&dir.join(format!("{name}.txt")), &table)?;
    let jsonl: String = reports.iter().map(|r| r.to_json_line() + "\n").collect();
    write(&dir.join(format!("{name}.jsonl")), &jsonl)?;
    if cfg.parse("eval.audit")? {
        let audit: String = reports.iter().map(EvalReport::audit_lines).collect();
        write(&dir.join(format!("{name}.audit.jsonl")), &audit)?;
    }
    print!("{table}");
    echo_config(cfg, "eval")
}
