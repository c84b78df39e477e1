//! Pair mining and semi-hard triplet selection against exhaustive scans.

use fsm_core::data::{ImageItem, Items};
use fsm_core::dsp::{add_deltas, Utterance};
use fsm_core::metrics::{cosine_distance, dtw_distance};
use fsm_core::models::{mine_semi_hard, Architecture, EncoderModel, ItemRef, Objective, SpeechArch, VisionArch};
use fsm_core::pairs::{mine_unsupervised, mine_with_encoder, PairSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{rng, Outcome};

pub const DATASETS: usize = 100;

/// For each item, `k` partners chosen by repeated minimum search over the
/// admissible candidates in index order (strict improvement only, so the
/// lowest index wins ties). Items with no candidate are counted.
fn exhaustive(
    n: usize,
    k: usize,
    admissible: impl Fn(usize, usize) -> bool,
    d: impl Fn(usize, usize) -> f64,
) -> (Vec<(usize, usize)>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for i in 0..n {
        let mut taken: Vec<usize> = Vec::new();
        for _ in 0..k {
            let mut best: Option<(f64, usize)> = None;
            for j in 0..n {
                if !admissible(i, j) || taken.contains(&j) {
                    continue;
                }
                let dij = d(i, j);
                if best.is_none_or(|(b, _)| dij < b) {
                    best = Some((dij, j));
                }
            }
            match best {
                Some((_, j)) => taken.push(j),
                None => break,
            }
        }
        if taken.is_empty() {
            skipped += 1;
        }
        pairs.extend(taken.into_iter().map(|j| (i, j)));
    }
    (pairs, skipped)
}

fn toy_images(r: &mut ChaCha8Rng) -> Vec<ImageItem> {
    let n = r.gen_range(6..=16);
    let mut out: Vec<ImageItem> = Vec::with_capacity(n);
    for i in 0..n {
        let px: Vec<f32> = match r.gen_range(0..5) {
            // Exact copies and half-intensity copies tie under cosine.
            0 if i > 0 => out[r.gen_range(0..i)].pixels().to_vec(),
            1 if i > 0 => out[r.gen_range(0..i)].pixels().iter().map(|p| p * 0.5).collect(),
            _ => (0..ImageItem::PIXELS).map(|_| r.gen::<f32>()).collect(),
        };
        out.push(ImageItem::new(px, Some(r.gen_range(0..3).to_string())).unwrap());
    }
    out
}

fn toy_speech(r: &mut ChaCha8Rng) -> Vec<Utterance> {
    let n = r.gen_range(5..=12);
    let speakers = r.gen_range(1..=3);
    (0..n)
        .map(|_| {
            let t = r.gen_range(2..=7);
            let frames = (0..t * 13).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            let spk = format!("spk{}", r.gen_range(0..speakers));
            Utterance::new(frames, 13, spk, Some(r.gen_range(0..3).to_string())).unwrap()
        })
        .collect()
}

struct Tally {
    checks: usize,
    mismatches: Vec<String>,
    speech_sets: usize,
    same_speaker: usize,
}

impl Tally {
    fn compare(
        &mut self,
        what: &str,
        case: usize,
        got: &PairSet,
        want: (Vec<(usize, usize)>, usize),
        items: Items<'_>,
    ) {
        self.checks += 1;
        if got.pairs != want.0 || got.skipped != want.1 {
            self.mismatches.push(format!("{what}#{case}"));
        }
        if let Items::Speech(_) = items {
            self.speech_sets += 1;
            self.same_speaker += got
                .pairs
                .iter()
                .filter(|&&(a, b)| items.speaker(a) == items.speaker(b))
                .count();
        }
    }
}

fn semi_hard_oracle(emb: &[f64], dim: usize, labels: &[usize]) -> Vec<[usize; 3]> {
    let n = labels.len();
    let d = |i: usize, j: usize| -> f64 { (0..dim).map(|c| (emb[i * dim + c] - emb[j * dim + c]).powi(2)).sum() };
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let dap = d(a, p);
            let negs: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
            if negs.is_empty() {
                continue;
            }
            let farther: Vec<usize> = negs.iter().copied().filter(|&j| d(a, j) > dap).collect();
            let pick = if farther.is_empty() {
                let far = negs.iter().map(|&j| d(a, j)).fold(f64::NEG_INFINITY, f64::max);
                *negs.iter().find(|&&j| d(a, j) == far).unwrap()
            } else {
                let near = farther.iter().map(|&j| d(a, j)).fold(f64::INFINITY, f64::min);
                *farther.iter().find(|&&j| d(a, j) == near).unwrap()
            };
            out.push([a, p, pick]);
        }
    }
    out
}

pub fn run() -> Outcome {
    let mut t = Tally {
        checks: 0,
        mismatches: Vec::new(),
        speech_sets: 0,
        same_speaker: 0,
    };
    for case in 0..DATASETS {
        let mut r = rng(40_000 + case as u64);
        let k = r.gen_range(1..=3);
        if case % 2 == 0 {
            let imgs = toy_images(&mut r);
            let items = Items::Images(&imgs);
            let cos = |i: usize, j: usize| cosine_distance(imgs[i].pixels(), imgs[j].pixels()).unwrap() as f64;
            let got = mine_unsupervised(items, "toy", k).unwrap();
            t.compare(
                "unsupervised-vision",
                case,
                &got,
                exhaustive(imgs.len(), k, |i, j| items.may_pair(i, j), cos),
                items,
            );
            let arch = Architecture::Vision(VisionArch {
                filters: [2, 2, 2],
                embedding_dim: 6,
            });
            let model = EncoderModel::<f32>::new(arch, Objective::Ae, vec![], case as u64).unwrap();
            let emb: Vec<Vec<f32>> = imgs.iter().map(|i| model.embed(ItemRef::Image(i)).unwrap()).collect();
            let got = mine_with_encoder(items, "toy", &model, k).unwrap();
            let d = |i: usize, j: usize| cosine_distance(&emb[i], &emb[j]).unwrap() as f64;
            t.compare(
                "encoder-vision",
                case,
                &got,
                exhaustive(imgs.len(), k, |i, j| items.may_pair(i, j), d),
                items,
            );
        } else {
            let utts = toy_speech(&mut r);
            let items = Items::Speech(&utts);
            let feats: Vec<Utterance> = utts.iter().map(|u| add_deltas(u).unwrap()).collect();
            let admissible = |i: usize, j: usize| i != j && utts[i].speaker_id != utts[j].speaker_id;
            let got = mine_unsupervised(items, "toy", k).unwrap();
            let d = |i: usize, j: usize| dtw_distance(&feats[i], &feats[j]).unwrap();
            t.compare(
                "unsupervised-speech",
                case,
                &got,
                exhaustive(utts.len(), k, admissible, d),
                items,
            );
            let arch = Architecture::Speech(SpeechArch {
                input_dim: 13,
                hidden: 4,
                layers: 1,
                embedding_dim: 6,
            });
            let model = EncoderModel::<f32>::new(arch, Objective::Ae, vec![], case as u64).unwrap();
            let emb: Vec<Vec<f32>> = utts.iter().map(|u| model.embed(ItemRef::Speech(u)).unwrap()).collect();
            let got = mine_with_encoder(items, "toy", &model, k).unwrap();
            let d = |i: usize, j: usize| cosine_distance(&emb[i], &emb[j]).unwrap() as f64;
            t.compare(
                "encoder-speech",
                case,
                &got,
                exhaustive(utts.len(), k, admissible, d),
                items,
            );
        }
        // Semi-hard triplets on a batch with coarse coordinates (many ties).
        let n = r.gen_range(4..=12);
        let dim = r.gen_range(1..=3);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let emb: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-2i32..=2) as f64).collect();
        t.checks += 1;
        if mine_semi_hard(&emb, dim, &labels).unwrap() != semi_hard_oracle(&emb, dim, &labels) {
            t.mismatches.push(format!("semi-hard#{case}"));
        }
    }
    Outcome {
        pass: t.mismatches.is_empty() && t.same_speaker == 0,
        detail: format!(
            "{DATASETS} datasets, {} comparisons, {} mismatches{}; {} speech pair sets with {} same-speaker pairs",
            t.checks,
            t.mismatches.len(),
            if t.mismatches.is_empty() {
                String::new()
            } else {
                format!(" ({})", t.mismatches.join(", "))
            },
            t.speech_sets,
            t.same_speaker
        ),
    }
}
