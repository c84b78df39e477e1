//! Input–target pairs for correspondence-autoencoder training.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Items, Modality};
use crate::dsp::add_deltas;
use crate::error::{Error, Result};
use crate::metrics::{cosine_distance, dtw_distance};
use crate::models::EncoderModel;
use crate::rng::{rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    CosineNn,
    DtwNn,
    ClassifierNn,
    GroundTruth,
    Oracle,
}

impl PairSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairSource::CosineNn => "cosine_nn",
            PairSource::DtwNn => "dtw_nn",
            PairSource::ClassifierNn => "classifier_nn",
            PairSource::GroundTruth => "ground_truth",
            PairSource::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PairSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            PairSource::CosineNn,
            PairSource::DtwNn,
            PairSource::ClassifierNn,
            PairSource::GroundTruth,
            PairSource::Oracle,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown pair source {s:?}")))
    }
}

/// Ordered `(a, b)` index pairs into one item collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub dataset_id: String,
    pub source: PairSource,
    pub pairs: Vec<(usize, usize)>,
    /// Items for which no admissible partner existed.
    pub skipped: usize,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Check the pair invariants against the collection the indices refer to.
    pub fn validate(&self, items: Items<'_>) -> Result<()> {
        for (row, &(a, b)) in self.pairs.iter().enumerate() {
            if a >= items.len() || b >= items.len() {
                return Err(Error::Validation(format!(
                    "pair {row} ({a}, {b}) out of range for {} items",
                    items.len()
                )));
            }
            if !items.may_pair(a, b) {
                return Err(Error::Validation(format!(
                    "pair {row} ({a}, {b}) is a self or same-speaker pair"
                )));
            }
        }
        Ok(())
    }

    /// `(input, target)` training examples, each pair used in both directions.
    pub fn training_examples(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\t{}\n", self.dataset_id, self.source);
        for (a, b) in &self.pairs {
            out.push_str(&format!("{a}\t{b}\n"));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let fail = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: line as u64,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail(1, "empty pair file".into()))?;
        let (dataset_id, source) = header
            .split_once('\t')
            .ok_or_else(|| fail(1, format!("header {header:?} is not `dataset<TAB>source`")))?;
        let source = source.parse().map_err(|e: Error| fail(1, e.to_string()))?;
        let mut pairs = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once('\t')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
            pairs.push(parsed.ok_or_else(|| fail(i + 1, format!("bad pair line {line:?}")))?);
        }
        Ok(PairSet {
            dataset_id: dataset_id.to_string(),
            source,
            pairs,
            skipped: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// The `k` admissible nearest neighbours of every item under a symmetric
/// distance, ties broken by lowest index. Returns the pairs and the number
/// of items with no admissible candidate.
pub fn k_nearest<F>(items: Items<'_>, k: usize, dist: F) -> Result<(Vec<(usize, usize)>, usize)>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let n = items.len();
    if n < 2 || k == 0 {
        return Err(Error::invalid(format!(
            "mining needs at least 2 items and k ≥ 1 (got {n} items, k = {k})"
        )));
    }
    // Upper triangle: upper[i][j - i - 1] = d(i, j) for j > i.
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| {
                    if items.may_pair(i, j) {
                        dist(i, j)
                    } else {
                        Ok(f64::INFINITY)
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let d = |i: usize, j: usize| match i.cmp(&j) {
        Ordering::Less => upper[i][j - i - 1],
        Ordering::Greater => upper[j][i - j - 1],
        Ordering::Equal => f64::INFINITY,
    };
    let mut pairs = Vec::with_capacity(n * k);
    let mut skipped = 0;
    for i in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n).filter(|&j| items.may_pair(i, j)).map(|j| (d(i, j), j)).collect();
        if cands.is_empty() {
            skipped += 1;
            continue;
        }
        cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        pairs.extend(cands.iter().take(k).map(|&(_, j)| (i, j)));
    }
    if skipped > 0 {
        log::warn!("{skipped} of {n} items have no admissible pairing candidate");
    }
    Ok((pairs, skipped))
}

/// Nearest neighbours by cosine over pixels (images) or DTW over MFCCs with
/// deltas (speech, different speakers only).
pub fn mine_unsupervised(items: Items<'_>, dataset_id: &str, k: usize) -> Result<PairSet> {
    let (pairs, skipped, source) = match items {
        Items::Images(imgs) => {
            let (p, s) = k_nearest(items, k, |i, j| {
                Ok(cosine_distance(imgs[i].pixels(), imgs[j].pixels())? as f64)
            })?;
            (p, s, PairSource::CosineNn)
        }
        Items::Speech(utts) => {
            let feats: Vec<_> = utts.par_iter().map(add_deltas).collect::<Result<_>>()?;
            let (p, s) = k_nearest(items, k, |i, j| dtw_distance(&feats[i], &feats[j]))?;
            (p, s, PairSource::DtwNn)
        }
    };
    Ok(PairSet {
        dataset_id: dataset_id.to_string(),
        source,
        pairs,
        skipped,
    })
}

/// Nearest neighbours by cosine distance over encoder embeddings.
pub fn mine_with_encoder(items: Items<'_>, dataset_id: &str, encoder: &EncoderModel<f32>, k: usize) -> Result<PairSet> {
    let emb = encoder.embed_items(items)?;
    mine_with_embeddings(items, dataset_id, &emb, k)
}

/// Nearest neighbours by cosine distance over precomputed embeddings.
pub fn mine_with_embeddings(items: Items<'_>, dataset_id: &str, emb: &[Vec<f32>], k: usize) -> Result<PairSet> {
    if emb.len() != items.len() {
        return Err(Error::invalid(format!(
            "{} embeddings for {} items",
            emb.len(),
            items.len()
        )));
    }
    let (pairs, skipped) = k_nearest(items, k, |i, j| Ok(cosine_distance(&emb[i], &emb[j])? as f64))?;
    Ok(PairSet {
        dataset_id: dataset_id.to_string(),
        source: PairSource::ClassifierNn,
        pairs,
        skipped,
    })
}

fn labelled_pairs(items: Items<'_>, dataset_id: &str, k: usize, seed: u64, source: PairSource) -> Result<PairSet> {
    if (0..items.len()).any(|i| items.label(i).is_none()) {
        return Err(Error::invalid(format!("{source} pairs need every item labelled")));
    }
    let mut r = rng(seed, &[tag("pairs"), tag(source.as_str())]);
    let mut pairs = Vec::with_capacity(items.len() * k);
    let mut skipped = 0;
    for i in 0..items.len() {
        let cands: Vec<usize> = (0..items.len())
            .filter(|&j| items.may_pair(i, j) && items.label(j) == items.label(i))
            .collect();
        if cands.is_empty() {
            skipped += 1;
            continue;
        }
        for _ in 0..k {
            pairs.push((i, *cands.choose(&mut r).expect("non-empty")));
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} items have no same-class partner; skipped");
    }
    Ok(PairSet {
        dataset_id: dataset_id.to_string(),
        source,
        pairs,
        skipped,
    })
}

/// `k` partners per item drawn uniformly among same-label items.
pub fn make_oracle_pairs(items: Items<'_>, dataset_id: &str, k: usize, seed: u64) -> Result<PairSet> {
    labelled_pairs(items, dataset_id, k, seed, PairSource::Oracle)
}

/// Same-label pairs from a labelled background set.
pub fn ground_truth_pairs(items: Items<'_>, dataset_id: &str, k: usize, seed: u64) -> Result<PairSet> {
    labelled_pairs(items, dataset_id, k, seed, PairSource::GroundTruth)
}

/// Fraction of pairs whose members share a label; 0 for an empty set.
pub fn pair_precision(pairs: &PairSet, labels: &[Option<&str>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .pairs
        .iter()
        .filter(|&&(a, b)| labels[a].is_some() && labels[a] == labels[b])
        .count();
    hits as f64 / pairs.len() as f64
}

/// The labels of a collection, in order.
pub fn labels_of<'a>(items: Items<'a>) -> Vec<Option<&'a str>> {
    (0..items.len()).map(|i| items.label(i)).collect()
}

/// The default pair source for unsupervised mining in `modality`.
pub fn unsupervised_source(modality: Modality) -> PairSource {
    match modality {
        Modality::Speech => PairSource::DtwNn,
        Modality::Vision => PairSource::CosineNn,
    }
}
