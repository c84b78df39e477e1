//! Episode invariants and the chance-level reference predictor.

use std::collections::{BTreeMap, BTreeSet};

use fsm_core::data::synthetic::{generate_synthetic, SyntheticConfig};
use fsm_core::data::{spoken_to_digit, ImageItem, PairedDataset, Split};
use fsm_core::dsp::{MfccConfig, Utterance};
use fsm_core::episodes::{check_episode, run_benchmark, sample_episode, Episode, EpisodeConfig, Scorer, Task};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::Outcome;

pub const EPISODES: usize = 1000;
pub const TRIALS: usize = 4000;
pub const LEVEL: f64 = 0.99;

/// Independent restatement of the episode invariants.
fn violations(
    ep: &Episode,
    speech: &[Utterance],
    images: &[ImageItem],
    classes: usize,
    shots: usize,
    queries: usize,
) -> Vec<String> {
    let mut v = Vec::new();
    let image_class = |spoken: &str| spoken_to_digit(spoken).map_or(spoken.to_string(), |d| d.to_string());
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &ep.support {
        *per_class.entry(p.label.as_str()).or_default() += 1;
        if speech[p.speech].label.as_deref() != Some(p.label.as_str()) {
            v.push("support speech label".to_string());
        }
        if images[p.image].label.as_deref() != Some(image_class(&p.label).as_str()) {
            v.push("support image class".to_string());
        }
    }
    if per_class.len() != classes || per_class.values().any(|&n| n != shots) {
        v.push(format!("support composition {per_class:?}"));
    }
    let s_speech: BTreeSet<usize> = ep.support.iter().map(|p| p.speech).collect();
    let s_images: BTreeSet<usize> = ep.support.iter().map(|p| p.image).collect();
    if s_speech.len() != ep.support.len() || s_images.len() != ep.support.len() {
        v.push("support item reused".into());
    }
    let wanted: BTreeSet<String> = per_class.keys().map(|l| image_class(l)).collect();
    let m_classes: Vec<String> = ep.matching.iter().map(|&m| images[m].label.clone().unwrap()).collect();
    let m_set: BTreeSet<String> = m_classes.iter().cloned().collect();
    if m_set != wanted || m_set.len() != m_classes.len() {
        v.push("matching set is not one image per class".into());
    }
    if ep.matching.iter().any(|m| s_images.contains(m)) {
        v.push("matching overlaps support".into());
    }
    let q: BTreeSet<usize> = ep.queries.iter().copied().collect();
    if ep.queries.len() != queries || q.len() != queries {
        v.push("queries not distinct or wrong count".into());
    }
    if ep.queries.iter().any(|x| s_speech.contains(x)) {
        v.push("query in support".into());
    }
    if ep
        .queries
        .iter()
        .any(|&x| !per_class.contains_key(speech[x].label.as_deref().unwrap()))
    {
        v.push("query class outside the episode".into());
    }
    v
}

/// Central acceptance region of `Binomial(n, p)` with coverage `level`.
pub fn binomial_region(n: usize, p: f64, level: f64) -> (u64, u64) {
    let b = Binomial::new(p, n as u64).unwrap();
    let tail = (1.0 - level) / 2.0;
    let lo = (0..=n as u64).find(|&x| b.cdf(x) > tail).unwrap();
    let hi = (0..=n as u64).find(|&x| b.cdf(x) >= 1.0 - tail).unwrap();
    (lo, hi)
}

pub fn dataset() -> PairedDataset {
    let cfg = SyntheticConfig {
        items_per_class: 60,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&cfg, &MfccConfig::default()).unwrap()
}

pub fn run() -> Outcome {
    let data = dataset();
    let speech = data.speech.get(Split::Test);
    let images = data.images.get(Split::Test);
    let mut bad = Vec::new();
    for e in 0..EPISODES {
        let shots = if e % 2 == 0 { 1 } else { 5 };
        let ep = sample_episode(speech, images, 11, shots, 10, 7_000 + e as u64).unwrap();
        let again = sample_episode(speech, images, 11, shots, 10, 7_000 + e as u64).unwrap();
        let mut v = violations(&ep, speech, images, 11, shots, 10);
        if let Err(err) = check_episode(&ep, speech, images, 11, shots) {
            v.push(err.to_string());
        }
        if ep != again {
            v.push("resampling with the same seed differs".into());
        }
        if !v.is_empty() {
            bad.push(format!("episode {e}: {}", v.join(", ")));
        }
    }
    let mut lines = vec![format!(
        "{EPISODES} episodes (K = 1 and 5), {} with violations",
        bad.len()
    )];
    let mut pass = bad.is_empty();
    for (task, p) in [(Task::Multimodal, 0.1), (Task::UnimodalSpeech, 1.0 / 11.0)] {
        let cfg = EpisodeConfig {
            episodes: TRIALS / 10,
            queries: 10,
            seeds: 1,
            seed: 11,
            ..EpisodeConfig::default()
        };
        let report = run_benchmark("Random", &[Scorer::UniformRandom], &data, task, &cfg).unwrap();
        let trials: usize = report.outcomes.iter().map(|o| o.trials).sum();
        let correct: usize = report.outcomes.iter().map(|o| o.correct).sum();
        let (lo, hi) = binomial_region(trials, p, LEVEL);
        let ok = trials == TRIALS && (lo..=hi).contains(&(correct as u64));
        pass &= ok;
        lines.push(format!(
            "random {task}: {correct}/{trials} correct, 99% region [{lo}, {hi}] at p = {p:.4}"
        ));
    }
    if !bad.is_empty() {
        lines.push(bad.into_iter().take(5).collect::<Vec<_>>().join("; "));
    }
    Outcome {
        pass,
        detail: lines.join("; "),
    }
}
