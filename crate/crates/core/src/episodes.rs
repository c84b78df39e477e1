//! Episodic few-shot evaluation: unimodal K-shot classification and
//! multimodal speech-to-image matching through two unimodal comparisons.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{spoken_to_digit, ImageItem, Items, PairedDataset, Split, SPOKEN_DIGITS};
use crate::dsp::{add_deltas, Utterance};
use crate::error::{Error, Result};
use crate::metrics::{cosine_distance, dtw_distance, squared_euclidean, DistanceKind};
use crate::models::EncoderModel;
use crate::rng::{derive_seed, rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    UnimodalSpeech,
    UnimodalVision,
    Multimodal,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::UnimodalSpeech => "unimodal-speech",
            Task::UnimodalVision => "unimodal-vision",
            Task::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "unimodal-speech" => Ok(Task::UnimodalSpeech),
            "unimodal-vision" => Ok(Task::UnimodalVision),
            "multimodal" => Ok(Task::Multimodal),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

/// Image class denoted by a spoken label: digit words (including "oh")
/// map to their digit, any other label to itself.
pub fn image_class(spoken: &str) -> String {
    spoken_to_digit(spoken).map_or_else(|| spoken.to_string(), |d| d.to_string())
}

/// One support pair: indices into the test speech and image collections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPair {
    pub speech: usize,
    pub image: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// `L × K` pairs, grouped by class.
    pub support: Vec<SupportPair>,
    /// One image per image class, ordered by class.
    pub matching: Vec<usize>,
    /// Speech query indices.
    pub queries: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Spoken classes per episode (`L`).
    pub classes: usize,
    /// Support pairs per class (`K`).
    pub shots: usize,
    pub episodes: usize,
    pub queries: usize,
    pub seeds: usize,
    pub seed: u64,
    /// Classify by mean distance to each class instead of nearest item.
    pub class_mean: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            classes: 11,
            shots: 1,
            episodes: 400,
            queries: 10,
            seeds: 5,
            seed: 1,
            class_mean: false,
        }
    }
}

/// The `L` spoken classes of a test collection: digit words in canonical
/// order first, then other labels sorted.
fn spoken_classes(speech: &[Utterance], l: usize) -> Result<Vec<String>> {
    let present: BTreeSet<&str> = speech.iter().filter_map(|u| u.label.as_deref()).collect();
    let mut classes: Vec<String> = SPOKEN_DIGITS
        .iter()
        .filter(|d| present.contains(*d))
        .map(|d| d.to_string())
        .collect();
    classes.extend(
        present
            .iter()
            .filter(|p| !SPOKEN_DIGITS.contains(p))
            .map(|p| p.to_string()),
    );
    if classes.len() < l {
        return Err(Error::invalid(format!(
            "episodes need {l} spoken classes, data has {}",
            classes.len()
        )));
    }
    classes.truncate(l);
    Ok(classes)
}

/// Sample an episode from test collections.
pub fn sample_episode(
    speech: &[Utterance],
    images: &[ImageItem],
    classes: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if shots == 0 || queries == 0 {
        return Err(Error::invalid("episodes need K ≥ 1 and at least one query"));
    }
    let spoken = spoken_classes(speech, classes)?;
    let mut r = rng(seed, &[tag("episode")]);
    let mut speech_by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in speech.iter().enumerate() {
        if let Some(l) = u.label.as_deref() {
            speech_by.entry(l).or_default().push(i);
        }
    }
    let mut images_by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, m) in images.iter().enumerate() {
        if let Some(l) = &m.label {
            images_by.entry(l.clone()).or_default().push(i);
        }
    }
    let image_classes: BTreeSet<String> = spoken.iter().map(|s| image_class(s)).collect();
    // Check availability before sampling so errors name the class.
    for s in &spoken {
        let n = speech_by.get(s.as_str()).map_or(0, Vec::len);
        if n < shots + 1 {
            return Err(Error::invalid(format!(
                "spoken class {s:?} has {n} items, needs {}",
                shots + 1
            )));
        }
    }
    for c in &image_classes {
        let need = shots * spoken.iter().filter(|s| image_class(s) == *c).count() + 1;
        let n = images_by.get(c).map_or(0, Vec::len);
        if n < need {
            return Err(Error::invalid(format!("image class {c:?} has {n} items, needs {need}")));
        }
    }

    let mut image_pool: BTreeMap<String, Vec<usize>> = images_by;
    for v in image_pool.values_mut() {
        v.shuffle(&mut r);
    }
    let mut speech_rest: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut support = Vec::with_capacity(spoken.len() * shots);
    for s in &spoken {
        let mut pool = speech_by[s.as_str()].clone();
        pool.shuffle(&mut r);
        let rest = pool.split_off(shots);
        let imgs = image_pool.get_mut(&image_class(s)).expect("checked above");
        for sp in pool {
            support.push(SupportPair {
                speech: sp,
                image: imgs.pop().expect("checked above"),
                label: s.clone(),
            });
        }
        speech_rest.insert(s.as_str(), rest);
    }
    let matching = image_classes
        .iter()
        .map(|c| image_pool.get_mut(c).and_then(Vec::pop).expect("checked above"))
        .collect();
    let mut chosen = BTreeSet::new();
    let mut query_list = Vec::with_capacity(queries);
    while query_list.len() < queries {
        let s = &spoken[r.gen_range(0..spoken.len())];
        let rest = &speech_rest[s.as_str()];
        let q = rest[r.gen_range(0..rest.len())];
        let remaining: usize = speech_rest.values().map(Vec::len).sum();
        if chosen.insert(q) || chosen.len() >= remaining {
            query_list.push(q);
        }
    }
    Ok(Episode {
        support,
        matching,
        queries: query_list,
        seed,
    })
}

/// Check every episode invariant against the collections it indexes.
pub fn check_episode(
    ep: &Episode,
    speech: &[Utterance],
    images: &[ImageItem],
    classes: usize,
    shots: usize,
) -> Result<()> {
    let fail = |msg: String| Err(Error::Validation(format!("episode {}: {msg}", ep.seed)));
    if ep.support.len() != classes * shots {
        return fail(format!(
            "support has {} pairs, expected {}",
            ep.support.len(),
            classes * shots
        ));
    }
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &ep.support {
        *per_class.entry(&p.label).or_default() += 1;
        if speech[p.speech].label.as_deref() != Some(p.label.as_str()) {
            return fail(format!("support speech {} is not {:?}", p.speech, p.label));
        }
        if images[p.image].label.as_deref() != Some(image_class(&p.label).as_str()) {
            return fail(format!("support image {} does not depict {:?}", p.image, p.label));
        }
    }
    if per_class.len() != classes || per_class.values().any(|&n| n != shots) {
        return fail(format!("support classes {per_class:?}"));
    }
    let support_images: BTreeSet<usize> = ep.support.iter().map(|p| p.image).collect();
    let support_speech: BTreeSet<usize> = ep.support.iter().map(|p| p.speech).collect();
    if support_images.len() != ep.support.len() {
        return fail("support reuses an image".into());
    }
    if ep.matching.iter().any(|m| support_images.contains(m)) {
        return fail("matching image occurs in the support set".into());
    }
    if ep.queries.iter().any(|q| support_speech.contains(q)) {
        return fail("query occurs in the support set".into());
    }
    let matching_classes: Vec<&str> = ep.matching.iter().filter_map(|&m| images[m].label.as_deref()).collect();
    let distinct: BTreeSet<&str> = matching_classes.iter().copied().collect();
    let expected: BTreeSet<String> = ep.support.iter().map(|p| image_class(&p.label)).collect();
    if distinct.len() != ep.matching.len()
        || distinct.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>() != expected
    {
        return fail(format!("matching set classes {matching_classes:?}"));
    }
    Ok(())
}

/// Precomputed representations of one test collection with their distance.
#[derive(Debug, Clone)]
pub enum Features {
    /// Frame sequences compared by DTW.
    Sequences(Vec<Utterance>),
    /// Fixed-length vectors compared by cosine or squared Euclidean distance.
    Vectors { kind: DistanceKind, rows: Vec<Vec<f32>> },
}

impl Features {
    /// MFCCs with deltas under DTW.
    pub fn dtw(speech: &[Utterance]) -> Result<Self> {
        Ok(Features::Sequences(
            speech.par_iter().map(add_deltas).collect::<Result<_>>()?,
        ))
    }

    /// Raw pixels under cosine distance.
    pub fn pixels(images: &[ImageItem]) -> Self {
        Features::Vectors {
            kind: DistanceKind::Cosine,
            rows: images.iter().map(|i| i.pixels().to_vec()).collect(),
        }
    }

    /// Encoder embeddings under squared Euclidean distance.
    pub fn embeddings(model: &EncoderModel<f32>, items: Items<'_>) -> Result<Self> {
        Ok(Features::Vectors {
            kind: DistanceKind::SquaredEuclidean,
            rows: model.embed_items(items)?,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Sequences(s) => s.len(),
            Features::Vectors { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn distance(&self, a: usize, b: usize) -> Result<f64> {
        match self {
            Features::Sequences(s) => dtw_distance(&s[a], &s[b]),
            Features::Vectors {
                kind: DistanceKind::Cosine,
                rows,
            } => Ok(cosine_distance(&rows[a], &rows[b])? as f64),
            Features::Vectors {
                kind: DistanceKind::SquaredEuclidean,
                rows,
            } => Ok(squared_euclidean(&rows[a], &rows[b])? as f64),
            Features::Vectors {
                kind: DistanceKind::Dtw,
                ..
            } => Err(Error::invalid("DTW applies only to frame sequences")),
        }
    }
}

/// Index (into `candidates`) of the nearest candidate; ties go to the
/// lowest index.
pub fn nearest(candidates: &[usize], mut dist: impl FnMut(usize) -> Result<f64>) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty support set"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, &c) in candidates.iter().enumerate() {
        let d = dist(c)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Label of the support item closest to `query`: nearest single item, or
/// with `class_mean` the class whose members have the smallest mean
/// distance. Ties go to the lowest support index.
pub fn classify_unimodal<'l>(
    query: usize,
    support: &[usize],
    labels: &[&'l str],
    feats: &Features,
    class_mean: bool,
) -> Result<&'l str> {
    if support.is_empty() || support.len() != labels.len() {
        return Err(Error::invalid("empty support set or label count mismatch"));
    }
    if !class_mean {
        return Ok(labels[nearest(support, |s| feats.distance(query, s))?]);
    }
    // Classes in first-appearance order so ties resolve to the lowest index.
    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (&s, &l) in support.iter().zip(labels) {
        if !sums.contains_key(l) {
            order.push(l);
        }
        let e = sums.entry(l).or_default();
        e.0 += feats.distance(query, s)?;
        e.1 += 1;
    }
    let mut best = (f64::INFINITY, order[0]);
    for l in order {
        let (sum, n) = sums[l];
        let mean = sum / n as f64;
        if mean < best.0 {
            best = (mean, l);
        }
    }
    Ok(best.1)
}

/// Multimodal matching: nearest support utterance to the query, then the
/// matching-set image nearest to that utterance's paired image. Returns an
/// index into `episode.matching`.
pub fn match_multimodal(query: usize, episode: &Episode, speech: &Features, images: &Features) -> Result<usize> {
    let support_speech: Vec<usize> = episode.support.iter().map(|p| p.speech).collect();
    let s = nearest(&support_speech, |c| speech.distance(query, c))?;
    let paired = episode.support[s].image;
    nearest(&episode.matching, |m| images.distance(paired, m))
}

/// How predictions are made in a benchmark run.
#[derive(Debug, Clone)]
pub enum Scorer {
    Features {
        speech: Option<Features>,
        images: Option<Features>,
    },
    /// Uniform guess among the task's options (chance-level reference).
    UniformRandom,
}

impl Scorer {
    fn speech(&self) -> Result<&Features> {
        match self {
            Scorer::Features { speech: Some(f), .. } => Ok(f),
            _ => Err(Error::invalid("task needs speech features")),
        }
    }

    fn images(&self) -> Result<&Features> {
        match self {
            Scorer::Features { images: Some(f), .. } => Ok(f),
            _ => Err(Error::invalid("task needs image features")),
        }
    }
}

/// Outcome of one episode, for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed_index: usize,
    pub episode: usize,
    pub episode_seed: u64,
    pub correct: usize,
    pub trials: usize,
    /// Predicted label (unimodal) or matching-set index (multimodal) per query.
    pub predictions: Vec<String>,
}

/// Correct predictions of one scorer on one episode.
fn score_episode(
    task: Task,
    ep: &Episode,
    scorer: &Scorer,
    speech: &[Utterance],
    images: &[ImageItem],
    class_mean: bool,
) -> Result<(usize, Vec<String>)> {
    let mut r = rng(ep.seed, &[tag("uniform-random")]);
    let mut preds = Vec::new();
    let mut correct = 0;
    match task {
        Task::UnimodalSpeech => {
            let support: Vec<usize> = ep.support.iter().map(|p| p.speech).collect();
            let labels: Vec<&str> = ep.support.iter().map(|p| p.label.as_str()).collect();
            let classes: Vec<&str> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            for &q in &ep.queries {
                let pred = match scorer {
                    Scorer::UniformRandom => classes[r.gen_range(0..classes.len())],
                    _ => classify_unimodal(q, &support, &labels, scorer.speech()?, class_mean)?,
                };
                correct += usize::from(speech[q].label.as_deref() == Some(pred));
                preds.push(pred.to_string());
            }
        }
        Task::UnimodalVision => {
            let support: Vec<usize> = ep.support.iter().map(|p| p.image).collect();
            let classes: Vec<String> = ep.support.iter().map(|p| image_class(&p.label)).collect();
            let labels: Vec<&str> = classes.iter().map(String::as_str).collect();
            let distinct: Vec<&str> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            for &q in &ep.matching {
                let pred = match scorer {
                    Scorer::UniformRandom => distinct[r.gen_range(0..distinct.len())],
                    _ => classify_unimodal(q, &support, &labels, scorer.images()?, class_mean)?,
                };
                correct += usize::from(images[q].label.as_deref() == Some(pred));
                preds.push(pred.to_string());
            }
        }
        Task::Multimodal => {
            for &q in &ep.queries {
                let m = match scorer {
                    Scorer::UniformRandom => r.gen_range(0..ep.matching.len()),
                    _ => match_multimodal(q, ep, scorer.speech()?, scorer.images()?)?,
                };
                let truth = speech[q].label.as_deref().map(image_class);
                correct += usize::from(images[ep.matching[m]].label == truth);
                preds.push(m.to_string());
            }
        }
    }
    Ok((correct, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub task: Task,
    pub shots: usize,
    /// Options a query chooses among: spoken classes for unimodal speech,
    /// matching-set size otherwise.
    pub ways: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// `1.96 ×` sample standard deviation `/ √seeds`.
    pub ci95: f64,
    pub episodes: usize,
    pub queries_per_episode: usize,
    #[serde(skip)]
    pub outcomes: Vec<EpisodeOutcome>,
}

/// Mean and 95% half-width over per-seed accuracies (sample standard
/// deviation; 0 for a single seed).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.iter().all(|&v| v == values[0]) {
        // Exact, rather than the rounding residue of the mean.
        return (values[0], 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Evaluate one scorer per seed on the test split of `data`.
pub fn run_benchmark(
    label: &str,
    scorers: &[Scorer],
    data: &PairedDataset,
    task: Task,
    cfg: &EpisodeConfig,
) -> Result<EvalReport> {
    if scorers.len() < cfg.seeds {
        return Err(Error::invalid(format!(
            "{} scorers for {} seeds",
            scorers.len(),
            cfg.seeds
        )));
    }
    if cfg.seeds == 0 || cfg.episodes == 0 {
        return Err(Error::invalid("benchmark needs at least one seed and one episode"));
    }
    let speech = data.speech.get(Split::Test);
    let images = data.images.get(Split::Test);
    let mut per_seed = Vec::with_capacity(cfg.seeds);
    let mut outcomes = Vec::with_capacity(cfg.seeds * cfg.episodes);
    for (s, scorer) in scorers.iter().take(cfg.seeds).enumerate() {
        let results: Vec<EpisodeOutcome> = (0..cfg.episodes)
            .into_par_iter()
            .map(|e| {
                let ep_seed = derive_seed(cfg.seed, &[tag("benchmark"), s as u64, e as u64]);
                let ep = sample_episode(speech, images, cfg.classes, cfg.shots, cfg.queries, ep_seed)?;
                let (correct, predictions) = score_episode(task, &ep, scorer, speech, images, cfg.class_mean)?;
                Ok(EpisodeOutcome {
                    seed_index: s,
                    episode: e,
                    episode_seed: ep_seed,
                    correct,
                    trials: predictions.len(),
                    predictions,
                })
            })
            .collect::<Result<_>>()?;
        let correct: usize = results.iter().map(|o| o.correct).sum();
        let trials: usize = results.iter().map(|o| o.trials).sum();
        per_seed.push(correct as f64 / trials as f64);
        outcomes.extend(results);
    }
    let (mean, ci95) = mean_ci(&per_seed);
    let queries_per_episode = match task {
        Task::UnimodalVision => outcomes.first().map_or(0, |o| o.trials),
        _ => cfg.queries,
    };
    let ways = match task {
        Task::UnimodalSpeech => cfg.classes,
        _ => {
            let first = outcomes.first().expect("at least one episode");
            sample_episode(speech, images, cfg.classes, cfg.shots, cfg.queries, first.episode_seed)?
                .matching
                .len()
        }
    };
    Ok(EvalReport {
        label: label.to_string(),
        task,
        shots: cfg.shots,
        ways,
        per_seed,
        mean,
        ci95,
        episodes: cfg.episodes,
        queries_per_episode,
        outcomes,
    })
}

impl EvalReport {
    /// One JSON object on a single line (outcomes excluded).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    /// Per-episode audit records, one JSON object per line.
    pub fn audit_lines(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| serde_json::to_string(o).expect("outcome serialises") + "\n")
            .collect()
    }
}

fn shot_name(k: usize) -> String {
    match k {
        1 => "One-shot".into(),
        5 => "Five-shot".into(),
        k => format!("{k}-shot"),
    }
}

/// Human-readable table: one row per model label, one column per K,
/// cells `mean% ± ci%`.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut shots: Vec<usize> = reports
        .iter()
        .map(|r| r.shots)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    shots.sort_unstable();
    let mut rows: Vec<&str> = Vec::new();
    for r in reports {
        if !rows.contains(&r.label.as_str()) {
            rows.push(&r.label);
        }
    }
    let tasks: BTreeSet<String> = reports.iter().map(|r| format!("{} ({}-way)", r.task, r.ways)).collect();
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(5).max(5);
    let mut out = format!("Task: {}\n", tasks.into_iter().collect::<Vec<_>>().join(", "));
    out.push_str(&format!("{:<width$}", "Model"));
    for &k in &shots {
        out.push_str(&format!(" | {:>15}", shot_name(k)));
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + shots.len() * 18));
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{row:<width$}"));
        for &k in &shots {
            let cell = reports
                .iter()
                .find(|r| r.label == row && r.shots == k)
                .map_or("-".to_string(), |r| {
                    format!("{:.2}% ± {:.2}", 100.0 * r.mean, 100.0 * r.ci95)
                });
            out.push_str(&format!(" | {cell:>15}"));
        }
        out.push('\n');
    }
    out
}
