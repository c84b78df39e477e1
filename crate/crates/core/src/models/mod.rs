//! Trainable encoders for both modalities.
//!
//! Every model maps an input to a fixed-length embedding `z`. Autoencoding
//! objectives add a decoder, the classifier adds a softmax head on top of
//! `z`, and the Siamese objective trains `z` directly with a triplet hinge.

mod arch;
pub mod loss;
mod meta;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Tensor};
use crate::data::{ImageItem, Items, Modality};
use crate::dsp::Utterance;
use crate::error::{Error, Result};
use crate::rng::{rng, tag, Rng};
use crate::scalar::Scalar;

pub use arch::{resample_frames, SpeechBatch};
pub use loss::{ae_loss, cae_loss, classifier_loss, mine_semi_hard, triplet_loss};
pub use meta::model_paths;
pub use train::{class_inventory, fine_tune, pretrain_then_switch, train, EpochLog, TrainConfig, TrainData, TrainLog};

pub const EMBEDDING_DIM: usize = 130;
pub const MFCC_DIM: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    Ae,
    Cae,
    AeCae,
    Classifier,
    Siamese,
}

impl Objective {
    pub fn as_str(&self) -> &'static str {
        match self {
            Objective::Ae => "ae",
            Objective::Cae => "cae",
            Objective::AeCae => "ae-cae",
            Objective::Classifier => "classifier",
            Objective::Siamese => "siamese",
        }
    }

    pub fn has_decoder(&self) -> bool {
        matches!(self, Objective::Ae | Objective::Cae | Objective::AeCae)
    }

    pub fn needs_pairs(&self) -> bool {
        matches!(self, Objective::Cae | Objective::AeCae)
    }

    pub fn is_supervised(&self) -> bool {
        matches!(self, Objective::Classifier | Objective::Siamese)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Objective::Ae),
            "cae" => Ok(Objective::Cae),
            "ae-cae" | "ae_cae" | "aecae" => Ok(Objective::AeCae),
            "classifier" => Ok(Objective::Classifier),
            "siamese" => Ok(Objective::Siamese),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

/// Convolutional image encoder: three 3×3 conv + ReLU + 2×2 max-pool stages
/// (28 → 14 → 7 → 3), flatten, dense to the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionArch {
    pub filters: [usize; 3],
    pub embedding_dim: usize,
}

impl Default for VisionArch {
    fn default() -> Self {
        VisionArch {
            filters: [32, 64, 128],
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

/// Stacked gated recurrent encoder over MFCC frames; the top layer's final
/// state passes through a dense layer to the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embedding_dim: usize,
}

impl Default for SpeechArch {
    fn default() -> Self {
        SpeechArch {
            input_dim: MFCC_DIM,
            hidden: 400,
            layers: 3,
            embedding_dim: EMBEDDING_DIM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Vision(VisionArch),
    Speech(SpeechArch),
}

impl Architecture {
    pub fn default_for(modality: Modality) -> Self {
        match modality {
            Modality::Speech => Architecture::Speech(SpeechArch::default()),
            Modality::Vision => Architecture::Vision(VisionArch::default()),
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            Architecture::Vision(_) => Modality::Vision,
            Architecture::Speech(_) => Modality::Speech,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            Architecture::Vision(a) => a.embedding_dim,
            Architecture::Speech(a) => a.embedding_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Architecture::Vision(a) => a.filters.iter().all(|&f| f > 0) && a.embedding_dim > 0,
            Architecture::Speech(a) => a.input_dim > 0 && a.hidden > 0 && a.layers > 0 && a.embedding_dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate architecture {self:?}")))
        }
    }
}

/// One training phase in a model's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceStep {
    pub phase: String,
    pub dataset_id: String,
    pub pair_source: Option<String>,
    pub seed: u64,
    pub epochs: usize,
}

/// A single input of either modality.
#[derive(Debug, Clone, Copy)]
pub enum ItemRef<'a> {
    Speech(&'a Utterance),
    Image(&'a ImageItem),
}

impl ItemRef<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            ItemRef::Speech(_) => Modality::Speech,
            ItemRef::Image(_) => Modality::Vision,
        }
    }
}

/// A trained (or freshly initialised) encoder with its optional decoder or
/// classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T: Scalar> {
    pub objective: Objective,
    pub arch: Architecture,
    pub params: ParamSet<T>,
    /// Class inventory of the softmax head (classifier objective only).
    pub classes: Vec<String>,
    pub provenance: Vec<ProvenanceStep>,
    /// Digest of the architecture and training configuration.
    pub config_hash: Option<String>,
}

/// Uniform initialisation in `[-limit, limit]`.
fn uniform<T: Scalar>(r: &mut Rng, shape: &[usize], limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(r.gen_range(-limit..=limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}

fn glorot<T: Scalar>(r: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(r, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn add_dense<T: Scalar>(p: &mut ParamSet<T>, r: &mut Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.add(format!("{name}.w"), glorot(r, &[fan_in, fan_out], fan_in, fan_out));
    p.add(format!("{name}.b"), Tensor::zeros([fan_out]));
}

fn add_gru<T: Scalar>(p: &mut ParamSet<T>, r: &mut Rng, name: &str, input: usize, hidden: usize) {
    let limit = 1.0 / (hidden as f64).sqrt();
    p.add(format!("{name}.wx"), uniform(r, &[input, 3 * hidden], limit));
    p.add(format!("{name}.wh"), uniform(r, &[hidden, 3 * hidden], limit));
    p.add(format!("{name}.bx"), uniform(r, &[3 * hidden], limit));
    p.add(format!("{name}.bh"), uniform(r, &[3 * hidden], limit));
}

fn init_params<T: Scalar>(arch: &Architecture, objective: Objective, classes: usize, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed, &[tag("init")]);
    let mut p = ParamSet::new();
    let emb = arch.embedding_dim();
    match arch {
        Architecture::Vision(a) => {
            let [c1, c2, c3] = a.filters;
            let mut cin = 1;
            for (l, &f) in a.filters.iter().enumerate() {
                p.add(
                    format!("enc.conv{l}.w"),
                    glorot(&mut r, &[3, 3, cin, f], 9 * cin, 9 * f),
                );
                p.add(format!("enc.conv{l}.b"), Tensor::zeros([f]));
                cin = f;
            }
            add_dense(&mut p, &mut r, "enc.out", 9 * c3, emb);
            if objective.has_decoder() {
                add_dense(&mut p, &mut r, "dec.in", emb, 9 * c3);
                for (l, (cin, k, cout)) in [(c3, 3, c2), (c2, 4, c1), (c1, 4, 1)].into_iter().enumerate() {
                    p.add(
                        format!("dec.tconv{l}.w"),
                        glorot(&mut r, &[cin, k, k, cout], k * k * cin, k * k * cout),
                    );
                    p.add(format!("dec.tconv{l}.b"), Tensor::zeros([cout]));
                }
            }
        }
        Architecture::Speech(a) => {
            for l in 0..a.layers {
                add_gru(
                    &mut p,
                    &mut r,
                    &format!("enc.gru{l}"),
                    if l == 0 { a.input_dim } else { a.hidden },
                    a.hidden,
                );
            }
            add_dense(&mut p, &mut r, "enc.out", a.hidden, emb);
            if objective.has_decoder() {
                for l in 0..a.layers {
                    add_gru(
                        &mut p,
                        &mut r,
                        &format!("dec.gru{l}"),
                        if l == 0 { emb } else { a.hidden },
                        a.hidden,
                    );
                }
                add_dense(&mut p, &mut r, "dec.out", a.hidden, a.input_dim);
            }
        }
    }
    if objective == Objective::Classifier {
        add_dense(&mut p, &mut r, "head", emb, classes);
    }
    p
}

/// Rows of embeddings computed per fixed-size chunk, so results do not
/// depend on the thread count.
const EMBED_CHUNK: usize = 64;

impl<T: Scalar> EncoderModel<T> {
    /// A freshly initialised model. `classes` names the softmax outputs and
    /// must hold at least two entries for the classifier objective.
    pub fn new(arch: Architecture, objective: Objective, classes: Vec<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if objective == Objective::Classifier && classes.len() < 2 {
            return Err(Error::invalid(format!(
                "classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if objective != Objective::Classifier && !classes.is_empty() {
            return Err(Error::invalid(format!(
                "objective {objective} takes no class inventory"
            )));
        }
        Ok(EncoderModel {
            objective,
            arch,
            params: init_params(&arch, objective, classes.len(), seed),
            classes,
            provenance: Vec::new(),
            config_hash: None,
        })
    }

    pub fn modality(&self) -> Modality {
        self.arch.modality()
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    fn check_modality(&self, got: Modality) -> Result<()> {
        if got != self.modality() {
            return Err(Error::invalid(format!("{} model given {got} input", self.modality())));
        }
        Ok(())
    }

    /// Embedding of a single input.
    pub fn embed(&self, x: ItemRef<'_>) -> Result<Vec<T>> {
        self.check_modality(x.modality())?;
        let rows = match x {
            ItemRef::Speech(u) => self.embed_speech(&[u])?,
            ItemRef::Image(i) => self.embed_images(&[i])?,
        };
        Ok(rows.into_iter().next().expect("one row"))
    }

    /// Embeddings of a whole collection, in order.
    pub fn embed_items(&self, items: Items<'_>) -> Result<Vec<Vec<T>>> {
        self.check_modality(items.modality())?;
        let n = items.len();
        let chunks: Vec<Vec<Vec<T>>> = (0..n.div_ceil(EMBED_CHUNK))
            .into_par_iter()
            .map(|c| {
                let range = c * EMBED_CHUNK..((c + 1) * EMBED_CHUNK).min(n);
                match items {
                    Items::Speech(u) => self.embed_speech(&u[range].iter().collect::<Vec<_>>()),
                    Items::Images(m) => self.embed_images(&m[range].iter().collect::<Vec<_>>()),
                }
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Embeddings of a batch of utterances, zero-padded and masked to the
    /// longest one.
    pub fn embed_speech(&self, utts: &[&Utterance]) -> Result<Vec<Vec<T>>> {
        let Architecture::Speech(a) = self.arch else {
            return Err(Error::invalid("vision model given speech input"));
        };
        let batch = SpeechBatch::new(utts, a.input_dim)?;
        let mut g = Graph::new();
        let z = arch::encode_speech(&mut g, &self.params, &a, &batch)?;
        Ok(g.value(z).chunks_exact(a.embedding_dim).map(<[T]>::to_vec).collect())
    }

    pub fn embed_images(&self, images: &[&ImageItem]) -> Result<Vec<Vec<T>>> {
        let Architecture::Vision(a) = self.arch else {
            return Err(Error::invalid("speech model given image input"));
        };
        let mut g = Graph::new();
        let x = arch::image_batch(&mut g, images)?;
        let z = arch::encode_vision(&mut g, &self.params, &a, x)?;
        Ok(g.value(z).chunks_exact(a.embedding_dim).map(<[T]>::to_vec).collect())
    }

    /// Predicted class index of the softmax head (argmax of the logits).
    pub fn classify(&self, x: ItemRef<'_>) -> Result<usize> {
        if self.objective != Objective::Classifier {
            return Err(Error::invalid(format!(
                "objective {} has no classification head",
                self.objective
            )));
        }
        let z = self.embed(x)?;
        let mut g = Graph::new();
        let zv = g.constant_from([1, z.len()], z)?;
        let logits = arch::head(&mut g, &self.params, zv)?;
        let row = g.value(logits);
        Ok(row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
    }
}
