//! Deterministic synthetic stand-in for paired spoken and handwritten digits.
//!
//! Images are stroke glyphs (seven-segment-like digits in-domain, random
//! strokes for background classes) under per-item affine jitter and pixel
//! noise. Spoken "words" are gliding two-component tones whose frequency
//! contour is class specific; speakers differ in pitch, speaking rate and
//! component balance. Class prototypes come from `world_seed`, so the same
//! classes are produced for every item `seed`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageItem, PairedDataset, Partitioned, Split, SPOKEN_DIGITS};
use crate::dsp::{mfcc, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::rng::{rng, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Digit classes 0–9; class 0 is spoken as either "zero" or "oh".
    InDomain,
    /// Classes `bg000…` sharing no label with the digits.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub classes: usize,
    pub speakers: usize,
    pub items_per_class: usize,
    /// Within-class image variation: pixel noise std is half of this and
    /// the affine jitter scales linearly with it (0 gives identical images).
    pub image_noise: f32,
    pub speech_noise: f32,
    pub seed: u64,
    pub world_seed: u64,
    pub sample_rate: u32,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            kind: SyntheticKind::InDomain,
            classes: 10,
            speakers: 4,
            items_per_class: 200,
            image_noise: 0.1,
            speech_noise: 0.02,
            seed: 1,
            world_seed: 0x5E_ED0F_D161,
            sample_rate: 16_000,
            train_fraction: 0.6,
            validation_fraction: 0.1,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let max_classes = match self.kind {
            SyntheticKind::InDomain => 10,
            SyntheticKind::Background => 999,
        };
        let fractions_ok = self.train_fraction > 0.0
            && self.validation_fraction >= 0.0
            && self.train_fraction + self.validation_fraction < 1.0;
        if self.classes < 2
            || self.classes > max_classes
            || self.speakers < 2
            || self.items_per_class < 3
            || !(0.0..=1.0).contains(&self.image_noise)
            || !(0.0..=1.0).contains(&self.speech_noise)
            || self.sample_rate < 8000
            || !fractions_ok
        {
            return Err(Error::invalid(format!("degenerate synthetic config {self:?}")));
        }
        Ok(())
    }

    pub fn dataset_id(&self) -> String {
        let kind = match self.kind {
            SyntheticKind::InDomain => "indomain",
            SyntheticKind::Background => "background",
        };
        format!("synthetic-{kind}-c{}-s{}", self.classes, self.seed)
    }

    fn kind_tag(&self) -> u64 {
        match self.kind {
            SyntheticKind::InDomain => tag("in-domain"),
            SyntheticKind::Background => tag("background"),
        }
    }

    pub fn image_label(&self, class: usize) -> String {
        match self.kind {
            SyntheticKind::InDomain => class.to_string(),
            SyntheticKind::Background => format!("bg{class:03}"),
        }
    }

    /// Spoken label of the `item`-th utterance of `class`.
    pub fn spoken_label(&self, class: usize, item: usize) -> String {
        match (self.kind, class) {
            (SyntheticKind::InDomain, 0) => SPOKEN_DIGITS[item % 2].to_string(),
            (SyntheticKind::InDomain, d) => SPOKEN_DIGITS[d + 1].to_string(),
            (SyntheticKind::Background, c) => format!("bg{c:03}"),
        }
    }
}

type Segment = [f32; 4];

/// Seven-segment layout in a unit box (x right, y down).
const SEGMENTS: [Segment; 7] = [
    [0.0, 0.0, 1.0, 0.0], // a top
    [1.0, 0.0, 1.0, 0.5], // b upper right
    [1.0, 0.5, 1.0, 1.0], // c lower right
    [0.0, 1.0, 1.0, 1.0], // d bottom
    [0.0, 0.5, 0.0, 1.0], // e lower left
    [0.0, 0.0, 0.0, 0.5], // f upper left
    [0.0, 0.5, 1.0, 0.5], // g middle
];

const DIGIT_SEGMENTS: [&str; 10] = [
    "abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abfgcd",
];

fn digit_glyph(d: usize) -> Vec<Segment> {
    let mut segs: Vec<Segment> = DIGIT_SEGMENTS[d]
        .bytes()
        .map(|c| SEGMENTS[(c - b'a') as usize])
        .collect();
    // Distinguishing diagonals so 1/7 and 0/8 differ by more than one bar.
    match d {
        1 => segs.push([0.5, 0.15, 1.0, 0.0]),
        7 => segs.push([1.0, 0.5, 0.55, 1.0]),
        4 => segs.push([0.0, 0.5, 0.55, 0.0]),
        _ => {}
    }
    segs
}

fn random_glyph(r: &mut Rng) -> Vec<Segment> {
    let n = r.gen_range(3..=4);
    (0..n)
        .map(|_| {
            let mut p = || r.gen_range(0.0f32..=1.0);
            [p(), p(), p(), p()]
        })
        .collect()
}

fn glyph(cfg: &SyntheticConfig, class: usize) -> Vec<Segment> {
    match cfg.kind {
        SyntheticKind::InDomain => digit_glyph(class),
        SyntheticKind::Background => random_glyph(&mut rng(cfg.world_seed, &[tag("glyph"), class as u64])),
    }
}

fn segment_distance(px: f32, py: f32, s: &Segment) -> f32 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (s[0] + t * dx - px, s[1] + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn render_image(cfg: &SyntheticConfig, proto: &[Segment], r: &mut Rng) -> Vec<f32> {
    // Jitter amplitudes are defined at image_noise = 0.2 and scale linearly.
    let v = cfg.image_noise / 0.2;
    let mut u = |amp: f32| if amp > 0.0 { r.gen_range(-amp..=amp) } else { 0.0 };
    let scale = 1.0 + u(0.15 * v);
    let shear = u(0.25 * v);
    let (sx, sy) = (u(2.5 * v), u(2.5 * v));
    let thickness = 1.8 + u(0.6 * v);
    let rot = u(0.15 * v);
    let (cr, sr) = (rot.cos(), rot.sin());
    let box_size = 15.0 * scale;
    let to_px = |x: f32, y: f32| {
        let (x, y) = ((x - 0.5) * box_size * 0.65, (y - 0.5) * box_size);
        let x = x + shear * y;
        (cr * x - sr * y + 14.0 + sx, sr * x + cr * y + 14.0 + sy)
    };
    let segs: Vec<Segment> = proto
        .iter()
        .map(|s| {
            let (a, b) = to_px(s[0], s[1]);
            let (c, d) = to_px(s[2], s[3]);
            [a, b, c, d]
        })
        .collect();
    let noise = Normal::new(0.0f32, (cfg.image_noise * 0.5).max(f32::MIN_POSITIVE)).expect("valid std");
    let side = ImageItem::SIDE;
    let mut px = Vec::with_capacity(ImageItem::PIXELS);
    for i in 0..side {
        for j in 0..side {
            let (x, y) = (j as f32 + 0.5, i as f32 + 0.5);
            let d = segs
                .iter()
                .map(|s| segment_distance(x, y, s))
                .fold(f32::INFINITY, f32::min);
            let ink = (1.0 - (d - thickness / 2.0)).clamp(0.0, 1.0);
            let n = if cfg.image_noise > 0.0 { noise.sample(r) } else { 0.0 };
            px.push((ink + n).clamp(0.0, 1.0));
        }
    }
    px
}

/// Frequency contour of a spoken class: anchor frequencies (Hz) visited in
/// order, the fraction of the word spent gliding towards each, and the
/// ratio of the second component.
#[derive(Debug, Clone)]
struct Contour {
    anchors: Vec<f32>,
    durations: Vec<f32>,
    ratio: f32,
}

fn contour(cfg: &SyntheticConfig, spoken: &str) -> Contour {
    let mut r = rng(cfg.world_seed, &[tag("contour"), cfg.kind_tag(), tag(spoken)]);
    let n = 3;
    let anchors = (0..n).map(|_| (r.gen_range(300f32.ln()..2400f32.ln())).exp()).collect();
    let raw: Vec<f32> = (0..n).map(|_| r.gen_range(0.5f32..1.5)).collect();
    let total: f32 = raw.iter().sum();
    Contour {
        anchors,
        durations: raw.iter().map(|d| d / total).collect(),
        ratio: r.gen_range(1.4f32..2.6),
    }
}

#[derive(Debug, Clone, Copy)]
struct Speaker {
    pitch: f32,
    rate: f32,
    balance: f32,
}

fn speaker(cfg: &SyntheticConfig, s: usize) -> Speaker {
    let mut r = rng(cfg.world_seed, &[tag("speaker"), cfg.kind_tag(), s as u64]);
    // Evenly spread pitch factors over [0.8, 1.25] in log space, with jitter.
    let frac = if cfg.speakers > 1 {
        s as f32 / (cfg.speakers - 1) as f32
    } else {
        0.5
    };
    let pitch = (0.8f32.ln() + frac * (1.25f32.ln() - 0.8f32.ln())).exp() * r.gen_range(0.97..1.03);
    Speaker {
        pitch,
        rate: r.gen_range(0.85..1.2),
        balance: r.gen_range(0.15..0.8),
    }
}

pub fn speaker_id(cfg: &SyntheticConfig, s: usize) -> String {
    match cfg.kind {
        SyntheticKind::InDomain => format!("spk{s:02}"),
        SyntheticKind::Background => format!("bgspk{s:02}"),
    }
}

fn render_word(cfg: &SyntheticConfig, c: &Contour, spk: Speaker, r: &mut Rng) -> Vec<f32> {
    let sr = cfg.sample_rate as f32;
    let dur = 0.3 * spk.rate * r.gen_range(0.9f32..1.1);
    let pitch = spk.pitch * r.gen_range(0.97f32..1.03);
    let amp = r.gen_range(0.4f32..0.8);
    let lead = (0.02 * sr) as usize;
    let n_word = (dur * sr) as usize;
    let n = n_word + 2 * lead;
    let noise = Normal::new(0.0f32, cfg.speech_noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let ramp = (0.015 * sr) as usize;
    // Cumulative segment boundaries in [0, 1].
    let bounds: Vec<f32> = c
        .durations
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();
    let freq_at = |u: f32| {
        let k = bounds.iter().position(|&b| u <= b).unwrap_or(bounds.len() - 1);
        let start = if k == 0 { 0.0 } else { bounds[k - 1] };
        let local = ((u - start) / c.durations[k]).clamp(0.0, 1.0);
        let from = if k == 0 { c.anchors[0] } else { c.anchors[k - 1] };
        // Glide in log-frequency over the first half of each segment.
        let w = (local * 2.0).min(1.0);
        (from.ln() * (1.0 - w) + c.anchors[k].ln() * w).exp() * pitch
    };
    let mut phase1 = 0.0f32;
    let mut phase2 = 0.0f32;
    let two_pi = 2.0 * std::f32::consts::PI;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            if i >= lead && i < lead + n_word {
                let k = i - lead;
                let f = freq_at(k as f32 / n_word as f32);
                phase1 = (phase1 + two_pi * f / sr) % two_pi;
                phase2 = (phase2 + two_pi * f * c.ratio / sr) % two_pi;
                let env = (k.min(n_word - 1 - k) as f32 / ramp as f32).min(1.0);
                s = amp * env * ((1.0 - spk.balance) * phase1.sin() + spk.balance * phase2.sin());
            }
            if cfg.speech_noise > 0.0 {
                s += noise.sample(r);
            }
            s.clamp(-1.0, 1.0)
        })
        .collect()
}

/// Raw synthetic corpus before feature extraction.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub id: String,
    pub waves: Partitioned<Waveform>,
    pub images: Partitioned<ImageItem>,
}

/// Split assignment for the items of one class, by seeded shuffle.
fn split_plan(cfg: &SyntheticConfig, modality: u64, class: usize) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let n = cfg.items_per_class;
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let n_valid = ((n as f64) * cfg.validation_fraction).round() as usize;
    let mut plan: Vec<Split> = (0..n)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + n_valid => Split::Validation,
            _ => Split::Test,
        })
        .collect();
    plan.shuffle(&mut rng(
        cfg.seed,
        &[tag("split"), cfg.kind_tag(), modality, class as u64],
    ));
    plan
}

fn collect<T>(items: Vec<(Split, T)>) -> Partitioned<T> {
    let mut out = Partitioned::default();
    for (s, item) in items {
        out.get_mut(s).push(item);
    }
    out
}

pub fn generate_waveforms(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.classes)
        .flat_map(|c| (0..cfg.items_per_class).map(move |i| (c, i)))
        .collect();

    let speech_plan: Vec<Vec<Split>> = (0..cfg.classes).map(|c| split_plan(cfg, tag("speech"), c)).collect();
    let image_plan: Vec<Vec<Split>> = (0..cfg.classes).map(|c| split_plan(cfg, tag("image"), c)).collect();
    let speakers: Vec<Speaker> = (0..cfg.speakers).map(|s| speaker(cfg, s)).collect();

    let waves: Vec<(Split, Waveform)> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let label = cfg.spoken_label(c, i);
            let s = (i + c) % cfg.speakers;
            let mut r = rng(cfg.seed, &[tag("speech"), cfg.kind_tag(), c as u64, i as u64]);
            let samples = render_word(cfg, &contour(cfg, &label), speakers[s], &mut r);
            let wave = Waveform {
                samples,
                sample_rate: cfg.sample_rate,
                speaker_id: speaker_id(cfg, s),
                label: Some(label),
            };
            (speech_plan[c][i], wave)
        })
        .collect();

    let images: Vec<(Split, ImageItem)> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let mut r = rng(cfg.seed, &[tag("image"), cfg.kind_tag(), c as u64, i as u64]);
            let px = render_image(cfg, &glyph(cfg, c), &mut r);
            ImageItem::new(px, Some(cfg.image_label(c))).map(|img| (image_plan[c][i], img))
        })
        .collect::<Result<_>>()?;

    Ok(SyntheticCorpus {
        id: cfg.dataset_id(),
        waves: collect(waves),
        images: collect(images),
    })
}

pub fn featurize(corpus: SyntheticCorpus, mfcc_cfg: &MfccConfig) -> Result<PairedDataset> {
    let mut speech = Partitioned::default();
    for split in Split::ALL {
        *speech.get_mut(split) = corpus
            .waves
            .get(split)
            .par_iter()
            .map(|w| mfcc(w, mfcc_cfg))
            .collect::<Result<_>>()?;
    }
    Ok(PairedDataset {
        id: corpus.id,
        speech,
        images: corpus.images,
    })
}

/// Generate and featurise a synthetic paired dataset.
pub fn generate_synthetic(cfg: &SyntheticConfig, mfcc_cfg: &MfccConfig) -> Result<PairedDataset> {
    featurize(generate_waveforms(cfg)?, mfcc_cfg)
}
