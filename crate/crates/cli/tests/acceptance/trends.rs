//! End-to-end ordering of models on the synthetic benchmark.

use fsm_core::data::synthetic::{generate_synthetic, SyntheticConfig};
use fsm_core::data::{Items, Modality, PairedDataset, Split};
use fsm_core::dsp::MfccConfig;
use fsm_core::episodes::{run_benchmark, EpisodeConfig, EvalReport, Features, Scorer, Task};
use fsm_core::models::{train, Architecture, EncoderModel, Objective, SpeechArch, TrainConfig, TrainData, VisionArch};
use fsm_core::pairs::{labels_of, make_oracle_pairs, mine_unsupervised, pair_precision, PairSet};

use crate::Outcome;

pub const SEEDS: usize = 5;
pub const EPISODES: usize = 400;
pub const EPOCHS: usize = 30;
pub const CHANCE: f64 = 0.1;

/// Reduced architectures so the five-seed run fits the time budget on a
/// single core.
fn arch(modality: Modality) -> Architecture {
    match modality {
        Modality::Vision => Architecture::Vision(VisionArch {
            filters: [8, 16, 32],
            embedding_dim: 130,
        }),
        Modality::Speech => Architecture::Speech(SpeechArch {
            hidden: 64,
            layers: 1,
            ..SpeechArch::default()
        }),
    }
}

fn fit(
    data: &PairedDataset,
    modality: Modality,
    objective: Objective,
    pairs: Option<&PairSet>,
    seed: u64,
) -> EncoderModel<f32> {
    let tc = TrainConfig {
        epochs: EPOCHS,
        seed,
        ..TrainConfig::for_modality(modality)
    };
    let td = TrainData {
        pairs,
        validation: Some(data.items(modality, Split::Validation)),
        ..TrainData::new(&data.id, data.items(modality, Split::Train))
    };
    let model = EncoderModel::<f32>::new(arch(modality), objective, vec![], seed).unwrap();
    train(model, &td, &tc).unwrap().0
}

fn scorer(data: &PairedDataset, speech: &EncoderModel<f32>, vision: &EncoderModel<f32>) -> Scorer {
    Scorer::Features {
        speech: Some(Features::embeddings(speech, data.items(Modality::Speech, Split::Test)).unwrap()),
        images: Some(Features::embeddings(vision, data.items(Modality::Vision, Split::Test)).unwrap()),
    }
}

fn show(r: &EvalReport) -> String {
    format!("{} {:.2}% ± {:.2}", r.label, 100.0 * r.mean, 100.0 * r.ci95)
}

pub fn run() -> Outcome {
    let start = std::time::Instant::now();
    let data = generate_synthetic(&SyntheticConfig::default(), &MfccConfig::default()).unwrap();
    let speech_train = data.items(Modality::Speech, Split::Train);
    let vision_train = data.items(Modality::Vision, Split::Train);
    let mined_speech = mine_unsupervised(speech_train, &data.id, 1).unwrap();
    let mined_vision = mine_unsupervised(vision_train, &data.id, 1).unwrap();
    let same_speaker = |p: &PairSet, items: Items<'_>| {
        p.pairs
            .iter()
            .filter(|&&(a, b)| items.speaker(a) == items.speaker(b))
            .count()
    };
    let mut violations = same_speaker(&mined_speech, speech_train);

    let (mut ae, mut cae, mut oracle) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..SEEDS {
        let seed = 1 + s as u64;
        let oracle_speech = make_oracle_pairs(speech_train, &data.id, 1, seed).unwrap();
        let oracle_vision = make_oracle_pairs(vision_train, &data.id, 1, seed).unwrap();
        violations += same_speaker(&oracle_speech, speech_train);
        let pair = |obj, sp: Option<&PairSet>, vp: Option<&PairSet>| {
            let speech = fit(&data, Modality::Speech, obj, sp, seed);
            let vision = fit(&data, Modality::Vision, obj, vp, seed);
            scorer(&data, &speech, &vision)
        };
        ae.push(pair(Objective::Ae, None, None));
        cae.push(pair(Objective::Cae, Some(&mined_speech), Some(&mined_vision)));
        oracle.push(pair(Objective::Cae, Some(&oracle_speech), Some(&oracle_vision)));
    }
    let baseline = Scorer::Features {
        speech: Some(Features::dtw(data.speech.get(Split::Test)).unwrap()),
        images: Some(Features::pixels(data.images.get(Split::Test))),
    };
    let cfg = EpisodeConfig {
        classes: 11,
        shots: 1,
        episodes: EPISODES,
        queries: 10,
        seeds: SEEDS,
        seed: 1,
        class_mean: false,
    };
    let bench = |label: &str, scorers: &[Scorer]| run_benchmark(label, scorers, &data, Task::Multimodal, &cfg).unwrap();
    let r_base = bench("DTW + Pixels", &vec![baseline; SEEDS]);
    let r_ae = bench("AE", &ae);
    let r_cae = bench("CAE (mined pairs)", &cae);
    let r_oracle = bench("CAE (oracle pairs)", &oracle);

    let a = r_cae.mean > r_ae.mean;
    let b = r_oracle.mean > r_cae.mean && r_oracle.mean - r_oracle.ci95 > r_cae.mean + r_cae.ci95;
    let c = [&r_base, &r_ae, &r_cae, &r_oracle]
        .iter()
        .all(|r| r.mean > 3.0 * CHANCE);
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let within_budget = mins <= 120.0;
    Outcome {
        pass: a && b && c && violations == 0 && within_budget,
        detail: format!(
            "multimodal one-shot, {SEEDS} seeds x {EPISODES} episodes: {}; {}; {}; {}; pair precision speech {:.3} vision {:.3}; (a) {} (b) {} (c) {}; same-speaker pairs {violations}; {mins:.1} min",
            show(&r_base),
            show(&r_ae),
            show(&r_cae),
            show(&r_oracle),
            pair_precision(&mined_speech, &labels_of(speech_train)),
            pair_precision(&mined_vision, &labels_of(vision_train)),
            verdict(a),
            verdict(b),
            verdict(c),
        ),
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "FAILS"
    }
}
