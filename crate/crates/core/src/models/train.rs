//! Mini-batch training with Adam and early stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step, AdamState, Graph, Var};
use crate::data::{Items, Modality};
use crate::error::{Error, Result};
use crate::metrics::squared_euclidean;
use crate::models::arch::{self, SpeechBatch};
use crate::models::{loss::mine_semi_hard, Architecture, EncoderModel, Objective, ProvenanceStep};
use crate::pairs::PairSet;
use crate::rng::{rng, tag};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Maximum epochs of the main phase.
    pub epochs: usize,
    /// Autoencoder epochs before switching to the correspondence loss
    /// (AE-CAE only).
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub margin: f64,
    /// Classes with fewer training items are dropped from supervised
    /// objectives.
    pub min_class_count: usize,
    /// Classes per Siamese batch; items per class fill the rest.
    pub classes_per_batch: usize,
    /// One-shot episodes used as the supervised validation metric.
    pub validation_episodes: usize,
    /// Cap on batches per epoch; 0 means one pass over the examples.
    pub max_batches_per_epoch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_modality(modality: Modality) -> Self {
        TrainConfig {
            epochs: 100,
            pretrain_epochs: 20,
            batch_size: match modality {
                Modality::Vision => 64,
                Modality::Speech => 32,
            },
            learning_rate: 1e-3,
            patience: 10,
            margin: 0.2,
            min_class_count: 10,
            classes_per_batch: 8,
            validation_episodes: 200,
            max_batches_per_epoch: 0,
            seed: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate < 0.0 || self.margin <= 0.0 || self.classes_per_batch < 2 {
            return Err(Error::invalid(format!("degenerate training config {self:?}")));
        }
        Ok(())
    }

    /// Hex SHA-256 over the architecture and every training setting.
    pub fn digest(&self, arch: &Architecture) -> String {
        let text = format!("{arch:?}\n{self:?}");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// What a training run sees: the training items, optional validation
/// items, and pairs when the objective needs them.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset_id: &'a str,
    pub train: Items<'a>,
    pub validation: Option<Items<'a>>,
    pub pairs: Option<&'a PairSet>,
    pub validation_pairs: Option<&'a PairSet>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset_id: &'a str, train: Items<'a>) -> Self {
        TrainData {
            dataset_id,
            train,
            validation: None,
            pairs: None,
            validation_pairs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    /// `loss` (lower is better) or `one_shot_accuracy` (higher is better).
    pub metric: String,
    pub validation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Best epoch of each phase, in phase order.
    pub best_epochs: Vec<(String, usize)>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("phase\tepoch\ttrain_loss\tmetric\tvalidation\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{:.6e}\t{}\t{:.6e}\n",
                e.phase, e.epoch, e.train_loss, e.metric, e.validation
            ));
        }
        out
    }
}

/// What each phase optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Reconstruct the input itself.
    SelfTarget,
    /// Reconstruct the paired item.
    PairTarget,
    Classify,
    Triplet,
}

/// Class inventory for supervised training: labels with at least
/// `min_count` items, sorted.
pub fn class_inventory(items: Items<'_>, min_count: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..items.len() {
        if let Some(l) = items.label(i) {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .map(|(l, _)| l.to_string())
        .collect()
}

fn class_indices(items: Items<'_>, classes: &[String]) -> Vec<Option<usize>> {
    (0..items.len())
        .map(|i| items.label(i).and_then(|l| classes.iter().position(|c| c == l)))
        .collect()
}

/// Embedding of the items at `idx`; for speech also returns the batch.
fn encode<T: Scalar>(
    g: &mut Graph<T>,
    model: &EncoderModel<T>,
    items: Items<'_>,
    idx: &[usize],
) -> Result<(Var, Option<SpeechBatch<T>>)> {
    match (model.arch, items) {
        (Architecture::Vision(a), Items::Images(imgs)) => {
            let refs: Vec<_> = idx.iter().map(|&i| &imgs[i]).collect();
            let x = arch::image_batch(g, &refs)?;
            Ok((arch::encode_vision(g, &model.params, &a, x)?, None))
        }
        (Architecture::Speech(a), Items::Speech(utts)) => {
            let refs: Vec<_> = idx.iter().map(|&i| &utts[i]).collect();
            let batch = SpeechBatch::new(&refs, a.input_dim)?;
            let z = arch::encode_speech(g, &model.params, &a, &batch)?;
            Ok((z, Some(batch)))
        }
        _ => Err(Error::invalid(format!(
            "{} model given {} data",
            model.modality(),
            items.modality()
        ))),
    }
}

/// Mean-over-batch reconstruction loss of `(input, target)` examples.
/// Speech losses are summed over each input's frames and divided by its
/// length; targets are resampled to the input length and padded frames
/// are masked out.
fn reconstruction_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &EncoderModel<T>,
    items: Items<'_>,
    examples: &[(usize, usize)],
) -> Result<Var> {
    let inputs: Vec<usize> = examples.iter().map(|e| e.0).collect();
    let (z, batch) = encode(g, model, items, &inputs)?;
    let b = examples.len();
    let inv_b = T::one() / T::from_usize(b).expect("count fits");
    match (model.arch, items) {
        (Architecture::Vision(a), Items::Images(imgs)) => {
            let y = arch::decode_vision(g, &model.params, &a, z)?;
            let refs: Vec<_> = examples.iter().map(|e| &imgs[e.1]).collect();
            let target = arch::image_batch(g, &refs)?;
            let n = g.value(y).len();
            g.squared_error(y, target, Some(vec![inv_b; n]))
        }
        (Architecture::Speech(a), Items::Speech(utts)) => {
            let batch = batch.expect("speech batch");
            let steps = batch.max_len();
            let y = arch::decode_speech(g, &model.params, &a, z, steps)?;
            let d = a.input_dim;
            let targets: Vec<Vec<f32>> = examples
                .iter()
                .zip(&batch.lengths)
                .map(|(e, &len)| arch::resample_frames(&utts[e.1], len))
                .collect();
            let mut target = vec![T::zero(); steps * b * d];
            let mut weights = vec![T::zero(); steps * b * d];
            for (bi, (tgt, &len)) in targets.iter().zip(&batch.lengths).enumerate() {
                let w = inv_b / T::from_usize(len).expect("count fits");
                for t in 0..len {
                    let off = (t * b + bi) * d;
                    for k in 0..d {
                        target[off + k] = T::from_f32(tgt[t * d + k]).expect("f32 converts");
                        weights[off + k] = w;
                    }
                }
            }
            let target = g.constant_from([steps * b, d], target)?;
            g.squared_error(y, target, Some(weights))
        }
        _ => unreachable!("encode checked the modality"),
    }
}

fn phase_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &EncoderModel<T>,
    phase: Phase,
    items: Items<'_>,
    examples: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<Var> {
    match phase {
        Phase::SelfTarget | Phase::PairTarget => reconstruction_loss(g, model, items, examples),
        Phase::Classify => {
            let idx: Vec<usize> = examples.iter().map(|e| e.0).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.1).collect();
            let (z, _) = encode(g, model, items, &idx)?;
            let logits = arch::head(g, &model.params, z)?;
            g.cross_entropy(logits, &labels)
        }
        Phase::Triplet => {
            let idx: Vec<usize> = examples.iter().map(|e| e.0).collect();
            let labels: Vec<usize> = examples.iter().map(|e| e.1).collect();
            let (z, _) = encode(g, model, items, &idx)?;
            let triplets = mine_semi_hard(g.value(z), model.embedding_dim(), &labels)?;
            g.triplet_hinge(z, &triplets, T::from_f64_lossy(cfg.margin))
        }
    }
}

/// Training examples of a phase as `(item, target-or-class)` pairs.
fn examples_for(
    phase: Phase,
    items: Items<'_>,
    pairs: Option<&PairSet>,
    classes: &[String],
) -> Result<Vec<(usize, usize)>> {
    match phase {
        Phase::SelfTarget => Ok((0..items.len()).map(|i| (i, i)).collect()),
        Phase::PairTarget => {
            let pairs = pairs.ok_or_else(|| Error::invalid("correspondence training requires a pair set"))?;
            pairs.validate(items)?;
            Ok(pairs.training_examples())
        }
        Phase::Classify | Phase::Triplet => Ok(class_indices(items, classes)
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| Some((i, c?)))
            .collect()),
    }
}

fn batches(
    phase: Phase,
    examples: &[(usize, usize)],
    cfg: &TrainConfig,
    r: &mut crate::rng::Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut out: Vec<Vec<(usize, usize)>> = if phase == Phase::Triplet {
        // P classes × K items per batch so every batch has positives.
        let mut by_class: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for &e in examples {
            by_class.entry(e.1).or_default().push(e);
        }
        let classes: Vec<usize> = by_class.iter().filter(|(_, v)| v.len() >= 2).map(|(&c, _)| c).collect();
        let p = cfg.classes_per_batch.min(classes.len());
        let k = (cfg.batch_size / p.max(1)).max(2);
        let n_batches = examples.len().div_ceil(cfg.batch_size).max(1);
        (0..n_batches)
            .map(|_| {
                let chosen: Vec<usize> = classes.choose_multiple(r, p).copied().collect();
                chosen
                    .iter()
                    .flat_map(|c| by_class[c].choose_multiple(r, k).copied().collect::<Vec<_>>())
                    .collect()
            })
            .collect()
    } else {
        let mut order = examples.to_vec();
        order.shuffle(r);
        order.chunks(cfg.batch_size).map(<[_]>::to_vec).collect()
    };
    if cfg.max_batches_per_epoch > 0 {
        out.truncate(cfg.max_batches_per_epoch);
    }
    out
}

/// Unimodal one-shot accuracy over fixed episodes on embeddings: one
/// support item per class, nearest support by squared Euclidean distance.
fn one_shot_accuracy<T: Scalar>(emb: &[Vec<T>], labels: &[Option<usize>], episodes: usize, seed: u64) -> Result<f64> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            by_class.entry(*c).or_default().push(i);
        }
    }
    let classes: Vec<&Vec<usize>> = by_class.values().filter(|v| v.len() >= 2).collect();
    if classes.len() < 2 || episodes == 0 {
        return Err(Error::invalid("validation needs at least two classes with two items"));
    }
    let mut r = rng(seed, &[tag("validation-episodes")]);
    let mut correct = 0;
    for _ in 0..episodes {
        let support: Vec<usize> = classes.iter().map(|c| *c.choose(&mut r).expect("non-empty")).collect();
        let qc = r.gen_range(0..classes.len());
        let query = loop {
            let q = *classes[qc].choose(&mut r).expect("non-empty");
            if q != support[qc] {
                break q;
            }
        };
        let mut best = (T::infinity(), 0);
        for (c, &s) in support.iter().enumerate() {
            let d = squared_euclidean(&emb[query], &emb[s])?;
            if d < best.0 {
                best = (d, c);
            }
        }
        correct += usize::from(best.1 == qc);
    }
    Ok(correct as f64 / episodes as f64)
}

struct Validation {
    metric: &'static str,
    value: f64,
}

impl Validation {
    fn better_than(&self, other: &Validation) -> bool {
        match self.metric {
            "one_shot_accuracy" => self.value > other.value,
            _ => self.value < other.value,
        }
    }
}

fn mean_loss<T: Scalar>(
    model: &EncoderModel<T>,
    phase: Phase,
    items: Items<'_>,
    examples: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for chunk in examples.chunks(cfg.batch_size) {
        let mut g = Graph::new();
        let loss = phase_loss(&mut g, model, phase, items, chunk, cfg)?;
        total += g.scalar(loss).expect("scalar loss").as_f64();
        n += 1;
    }
    Ok(total / n.max(1) as f64)
}

fn validate<T: Scalar>(
    model: &EncoderModel<T>,
    phase: Phase,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    classes: &[String],
    train_loss: f64,
) -> Result<Validation> {
    let Some(items) = data.validation.filter(|v| !v.is_empty()) else {
        return Ok(Validation {
            metric: "train_loss",
            value: train_loss,
        });
    };
    match phase {
        Phase::Classify | Phase::Triplet => {
            let emb = model.embed_items(items)?;
            // Validation classes need not occur in training.
            let labels = class_indices(items, &class_inventory(items, 2));
            Ok(Validation {
                metric: "one_shot_accuracy",
                value: one_shot_accuracy(&emb, &labels, cfg.validation_episodes, cfg.seed)?,
            })
        }
        Phase::SelfTarget | Phase::PairTarget => {
            let (vphase, vpairs) = match (phase, data.validation_pairs) {
                (Phase::PairTarget, Some(p)) => (Phase::PairTarget, Some(p)),
                _ => (Phase::SelfTarget, None),
            };
            let examples = examples_for(vphase, items, vpairs, classes)?;
            Ok(Validation {
                metric: "loss",
                value: mean_loss(model, vphase, items, &examples, cfg)?,
            })
        }
    }
}

/// Run one phase with early stopping and restore its best parameters.
/// Returns the number of epochs run.
#[allow(clippy::too_many_arguments)]
fn fit<T: Scalar>(
    model: &mut EncoderModel<T>,
    phase: Phase,
    phase_name: &str,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    epochs: usize,
    classes: &[String],
    log: &mut TrainLog,
) -> Result<usize> {
    let examples = examples_for(phase, data.train, data.pairs, classes)?;
    if examples.is_empty() {
        return Err(Error::invalid(format!("no training examples for phase {phase_name}")));
    }
    if epochs == 0 {
        return Ok(0);
    }
    let mut adam = AdamState::new(model.params.tensors(), T::from_f64_lossy(cfg.learning_rate));
    let mut best: Option<(Validation, crate::autodiff::ParamSet<T>, usize)> = None;
    let mut since_best = 0;
    let mut run = 0;
    for epoch in 1..=epochs {
        run = epoch;
        let mut r = rng(cfg.seed, &[tag("batches"), tag(phase_name), epoch as u64]);
        let mut total = 0.0;
        let plan = batches(phase, &examples, cfg, &mut r);
        for batch in &plan {
            let mut g = Graph::new();
            let loss = phase_loss(&mut g, model, phase, data.train, batch, cfg)?;
            total += g.scalar(loss).expect("scalar loss").as_f64();
            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            adam_step(model.params.tensors_mut(), &mut adam)?;
        }
        let train_loss = total / plan.len().max(1) as f64;
        let v = validate(model, phase, data, cfg, classes, train_loss)?;
        log::info!(
            "{phase_name} epoch {epoch}: train loss {train_loss:.5}, validation {} {:.5}",
            v.metric,
            v.value
        );
        log.epochs.push(EpochLog {
            phase: phase_name.to_string(),
            epoch,
            train_loss,
            metric: v.metric.to_string(),
            validation: v.value,
        });
        let improved = best.as_ref().is_none_or(|(b, _, _)| v.better_than(b));
        if improved {
            best = Some((v, model.params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, params, best_epoch) = best.expect("at least one epoch ran");
    model.params = params;
    model.params.zero_grad();
    log.best_epochs.push((phase_name.to_string(), best_epoch));
    Ok(run)
}

fn check_data<T: Scalar>(model: &EncoderModel<T>, data: &TrainData<'_>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for items in std::iter::once(data.train).chain(data.validation) {
        if items.modality() != model.modality() {
            return Err(Error::invalid(format!(
                "{} model given {} data",
                model.modality(),
                items.modality()
            )));
        }
    }
    Ok(())
}

fn provenance(phase: &str, data: &TrainData<'_>, cfg: &TrainConfig, epochs: usize, uses_pairs: bool) -> ProvenanceStep {
    ProvenanceStep {
        phase: phase.to_string(),
        dataset_id: data.dataset_id.to_string(),
        pair_source: if uses_pairs {
            data.pairs.map(|p| p.source.to_string())
        } else {
            None
        },
        seed: cfg.seed,
        epochs,
    }
}

/// Train `model` for its objective. Autoencoders reconstruct their input;
/// correspondence objectives need `data.pairs`; supervised objectives need
/// labels (and the classifier's inventory fixed at construction).
pub fn train<T: Scalar>(
    mut model: EncoderModel<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(EncoderModel<T>, TrainLog)> {
    cfg.validate()?;
    check_data(&model, data)?;
    if model.objective.needs_pairs() && data.pairs.is_none() {
        return Err(Error::invalid(format!(
            "objective {} requires a pair set",
            model.objective
        )));
    }
    if model.objective == Objective::AeCae {
        return pretrain_then_switch(model, data, cfg);
    }
    let mut log = TrainLog::default();
    let (phase, classes) = match model.objective {
        Objective::Ae => (Phase::SelfTarget, Vec::new()),
        Objective::Cae => (Phase::PairTarget, Vec::new()),
        Objective::Classifier => (Phase::Classify, model.classes.clone()),
        Objective::Siamese => (Phase::Triplet, class_inventory(data.train, cfg.min_class_count)),
        Objective::AeCae => unreachable!("handled above"),
    };
    if model.objective.is_supervised() && classes.len() < 2 {
        return Err(Error::invalid(format!(
            "objective {} requires labelled training items in at least 2 classes",
            model.objective
        )));
    }
    let name = model.objective.as_str();
    let run = fit(&mut model, phase, name, data, cfg, cfg.epochs, &classes, &mut log)?;
    model
        .provenance
        .push(provenance(name, data, cfg, run, phase == Phase::PairTarget));
    model.config_hash = Some(cfg.digest(&model.arch));
    Ok((model, log))
}

/// Autoencoder pretraining for `cfg.pretrain_epochs`, then correspondence
/// training of the same parameters for `cfg.epochs`.
pub fn pretrain_then_switch<T: Scalar>(
    mut model: EncoderModel<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(EncoderModel<T>, TrainLog)> {
    cfg.validate()?;
    check_data(&model, data)?;
    if !model.objective.has_decoder() {
        return Err(Error::invalid(format!("objective {} has no decoder", model.objective)));
    }
    if data.pairs.is_none() {
        return Err(Error::invalid("AE-CAE requires a pair set"));
    }
    let mut log = TrainLog::default();
    let run = fit(
        &mut model,
        Phase::SelfTarget,
        "ae",
        data,
        cfg,
        cfg.pretrain_epochs,
        &[],
        &mut log,
    )?;
    model.provenance.push(provenance("ae", data, cfg, run, false));
    let run = fit(
        &mut model,
        Phase::PairTarget,
        "cae",
        data,
        cfg,
        cfg.epochs,
        &[],
        &mut log,
    )?;
    model.provenance.push(provenance("cae", data, cfg, run, true));
    model.config_hash = Some(cfg.digest(&model.arch));
    Ok((model, log))
}

/// Continue correspondence training of a background-trained autoencoding
/// model on in-domain pairs.
pub fn fine_tune<T: Scalar>(
    mut model: EncoderModel<T>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(EncoderModel<T>, TrainLog)> {
    cfg.validate()?;
    check_data(&model, data)?;
    if !model.objective.has_decoder() {
        return Err(Error::invalid(format!(
            "cannot fine-tune objective {} with the correspondence loss",
            model.objective
        )));
    }
    if data.pairs.is_none() {
        return Err(Error::invalid("fine-tuning requires a pair set"));
    }
    let mut log = TrainLog::default();
    let run = fit(
        &mut model,
        Phase::PairTarget,
        "fine-tune",
        data,
        cfg,
        cfg.epochs,
        &[],
        &mut log,
    )?;
    model.provenance.push(provenance("fine-tune", data, cfg, run, true));
    model.config_hash = Some(cfg.digest(&model.arch));
    Ok((model, log))
}
