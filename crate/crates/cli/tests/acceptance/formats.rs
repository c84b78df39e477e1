//! IDX reference fixture and bit-exact checkpoint round trips.

use std::path::{Path, PathBuf};

use fsm_core::autodiff::{checkpoint, ParamSet, Tensor};
use fsm_core::data::idx::{encode_images, encode_labels, load_idx, IdxOptions};
use fsm_core::data::ImageItem;
use fsm_core::models::{Architecture, EncoderModel, ItemRef, Objective, SpeechArch, VisionArch};
use fsm_core::Scalar;
use rand::Rng;

use crate::{rng, Outcome};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Values and byte layout of the files written by `fixtures/make_idx.py`.
fn idx_fixture() -> Result<(), String> {
    let (img_path, lbl_path) = (fixture("ref-images.idx"), fixture("ref-labels.idx"));
    let items = load_idx(&img_path, Some(&lbl_path), IdxOptions::default()).map_err(|e| e.to_string())?;
    let labels = [3u8, 1, 4, 1, 5];
    if items.len() != labels.len() {
        return Err(format!("{} images", items.len()));
    }
    for (i, item) in items.iter().enumerate() {
        if item.label.as_deref() != Some(labels[i].to_string().as_str()) {
            return Err(format!("image {i} label {:?}", item.label));
        }
        for r in 0..28 {
            for c in 0..28 {
                let want = ((7 * i + 3 * r + c) % 256) as f32 / 255.0;
                if item.pixels()[r * 28 + c] != want {
                    return Err(format!("image {i} pixel ({r},{c})"));
                }
            }
        }
    }
    let bytes = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
    if encode_images(&items) != bytes(&img_path)? || encode_labels(&labels) != bytes(&lbl_path)? {
        return Err("re-encoded bytes differ from the reference files".into());
    }
    Ok(())
}

fn random_params<T: Scalar>(seed: u64, specials: &[T]) -> ParamSet<T> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    for (i, shape) in [vec![3usize, 4], vec![7], vec![2, 2, 2, 3]].into_iter().enumerate() {
        let n: usize = shape.iter().product();
        // The format stores float32, so values are drawn on the f32 grid.
        let mut data: Vec<T> = (0..n)
            .map(|_| T::from_f32(r.gen_range(-1e3f32..1e3)).unwrap())
            .collect();
        for (slot, &v) in data.iter_mut().zip(specials) {
            *slot = v;
        }
        ps.add(format!("layer{i}.w"), Tensor::new(shape, data).unwrap());
    }
    ps
}

fn params_round_trip<T: Scalar>(dir: &Path, seed: u64, specials: &[T], bits: impl Fn(T) -> u64) -> Result<(), String> {
    let ps = random_params::<T>(seed, specials);
    let path = dir.join(format!("p{seed}.fsm"));
    checkpoint::save(&ps, &path).map_err(|e| e.to_string())?;
    let back = checkpoint::load::<T>(&path).map_err(|e| e.to_string())?;
    let same =
        back.names() == ps.names()
            && back.tensors().iter().zip(ps.tensors()).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(&x, &y)| bits(x) == bits(y))
            });
    if same {
        Ok(())
    } else {
        Err(format!("parameter set {seed} differs after reload"))
    }
}

fn model_round_trip(dir: &Path) -> Result<(), String> {
    let img = ImageItem::new((0..784).map(|i| (i % 13) as f32 / 13.0).collect(), None).unwrap();
    let utt = fsm_core::dsp::Utterance::new(
        (0..5 * 13).map(|i| ((i % 7) as f32 - 3.0) / 3.0).collect(),
        13,
        "s",
        None,
    )
    .unwrap();
    let archs = [
        (
            Architecture::Vision(VisionArch {
                filters: [3, 4, 5],
                embedding_dim: 9,
            }),
            ItemRef::Image(&img),
        ),
        (
            Architecture::Speech(SpeechArch {
                hidden: 6,
                layers: 2,
                ..SpeechArch::default()
            }),
            ItemRef::Speech(&utt),
        ),
    ];
    for (k, (arch, item)) in archs.into_iter().enumerate() {
        let model = EncoderModel::<f32>::new(arch, Objective::Ae, vec![], 90 + k as u64).map_err(|e| e.to_string())?;
        let stem = dir.join(format!("model{k}"));
        model.save(&stem).map_err(|e| e.to_string())?;
        let back = EncoderModel::<f32>::load(&stem).map_err(|e| e.to_string())?;
        let (a, b) = (model.embed(item).unwrap(), back.embed(item).unwrap());
        if back != model || a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("model {k} differs after reload"));
        }
    }
    Ok(())
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let f32_specials = [
        0.0f32,
        -0.0,
        f32::MIN_POSITIVE / 2.0,
        f32::MAX,
        f32::MIN,
        f32::EPSILON,
        1.0 / 3.0,
    ];
    let f64_specials: Vec<f64> = f32_specials.iter().map(|&v| v as f64).collect();
    let checks: Vec<(&str, Result<(), String>)> = vec![
        ("idx reference", idx_fixture()),
        (
            "f32 checkpoints",
            (0..10).try_for_each(|s| params_round_trip::<f32>(dir.path(), s, &f32_specials, |x| x.to_bits() as u64)),
        ),
        (
            "f64 checkpoints",
            (10..20).try_for_each(|s| params_round_trip::<f64>(dir.path(), s, &f64_specials, f64::to_bits)),
        ),
        ("model checkpoints", model_round_trip(dir.path())),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            "IDX reference decoded and re-encoded byte-identically; 20 parameter sets (f32, and f64 on the f32 grid) and 2 models reload bit-exactly".into()
        } else {
            failed.join("; ")
        },
    }
}
