//! Forward passes of the encoders, decoders and classification head.

use crate::autodiff::{Conv2dConfig, Graph, GruWeights, ParamSet, Var};
use crate::data::ImageItem;
use crate::dsp::Utterance;
use crate::error::{Error, Result};
use crate::models::{SpeechArch, VisionArch};
use crate::scalar::Scalar;

pub(crate) fn param<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str) -> Result<Var> {
    let id = params
        .id_of(name)
        .ok_or_else(|| Error::invalid(format!("model has no parameter {name:?}")))?;
    g.param(params, id)
}

fn dense_layer<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str, x: Var) -> Result<Var> {
    let w = param(g, params, &format!("{name}.w"))?;
    let b = param(g, params, &format!("{name}.b"))?;
    g.dense(x, w, b)
}

fn gru_weights<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, name: &str) -> Result<GruWeights> {
    Ok(GruWeights {
        w_input: param(g, params, &format!("{name}.wx"))?,
        w_hidden: param(g, params, &format!("{name}.wh"))?,
        b_input: param(g, params, &format!("{name}.bx"))?,
        b_hidden: param(g, params, &format!("{name}.bh"))?,
    })
}

/// `[B,28,28,1]` constant holding the images' pixels.
pub(crate) fn image_batch<T: Scalar>(g: &mut Graph<T>, images: &[&ImageItem]) -> Result<Var> {
    let data = images
        .iter()
        .flat_map(|i| i.pixels())
        .map(|&p| T::from_f32(p).expect("f32 converts"))
        .collect();
    g.constant_from([images.len(), ImageItem::SIDE, ImageItem::SIDE, 1], data)
}

pub(crate) fn encode_vision<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, a: &VisionArch, x: Var) -> Result<Var> {
    let batch = g.shape(x)[0];
    let mut h = x;
    for l in 0..3 {
        let w = param(g, params, &format!("enc.conv{l}.w"))?;
        let b = param(g, params, &format!("enc.conv{l}.b"))?;
        h = g.conv2d(h, w, b, Conv2dConfig::same(3))?;
        h = g.relu(h)?;
        h = g.max_pool2x2(h)?;
    }
    let flat = g.reshape(h, [batch, 9 * a.filters[2]])?;
    dense_layer(g, params, "enc.out", flat)
}

/// Mirror of the encoder: dense to 3×3×c3, then transposed convolutions
/// 3 → 7 → 14 → 28 and a sigmoid; output `[B,28,28,1]`.
pub(crate) fn decode_vision<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, a: &VisionArch, z: Var) -> Result<Var> {
    let batch = g.shape(z)[0];
    let h = dense_layer(g, params, "dec.in", z)?;
    let h = g.relu(h)?;
    let mut h = g.reshape(h, [batch, 3, 3, a.filters[2]])?;
    let stages = [
        Conv2dConfig { stride: 2, pad: 0 },
        Conv2dConfig { stride: 2, pad: 1 },
        Conv2dConfig { stride: 2, pad: 1 },
    ];
    for (l, cfg) in stages.into_iter().enumerate() {
        let w = param(g, params, &format!("dec.tconv{l}.w"))?;
        let b = param(g, params, &format!("dec.tconv{l}.b"))?;
        h = g.conv_transpose2d(h, w, b, cfg)?;
        h = if l < 2 { g.relu(h)? } else { g.sigmoid(h)? };
    }
    Ok(h)
}

/// Utterances laid out time-major, zero-padded to the longest, with a
/// per-step validity mask.
#[derive(Debug, Clone)]
pub struct SpeechBatch<T> {
    pub batch: usize,
    pub dim: usize,
    pub lengths: Vec<usize>,
    /// `steps[t]` is `[B, dim]`.
    pub steps: Vec<Vec<T>>,
    /// `masks[t][b]` is 1 while `t < lengths[b]`; `None` when all are valid.
    pub masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> SpeechBatch<T> {
    pub fn new(utts: &[&Utterance], dim: usize) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::invalid("empty speech batch"));
        }
        if let Some(u) = utts.iter().find(|u| u.dim() != dim) {
            return Err(Error::shape(
                "speech_encoder",
                format!("frames of dimension {}, expected {dim}", u.dim()),
            ));
        }
        let lengths: Vec<usize> = utts.iter().map(|u| u.num_frames()).collect();
        let t_max = *lengths.iter().max().expect("non-empty");
        let batch = utts.len();
        let mut steps = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut step = vec![T::zero(); batch * dim];
            for (b, u) in utts.iter().enumerate() {
                if t < lengths[b] {
                    for (dst, &v) in step[b * dim..(b + 1) * dim].iter_mut().zip(u.frame(t)) {
                        *dst = T::from_f32(v).expect("f32 converts");
                    }
                }
            }
            steps.push(step);
            let all_valid = lengths.iter().all(|&l| t < l);
            masks.push((!all_valid).then(|| {
                lengths
                    .iter()
                    .map(|&l| if t < l { T::one() } else { T::zero() })
                    .collect()
            }));
        }
        Ok(SpeechBatch {
            batch,
            dim,
            lengths,
            steps,
            masks,
        })
    }

    pub fn max_len(&self) -> usize {
        self.steps.len()
    }
}

pub(crate) fn encode_speech<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    a: &SpeechArch,
    batch: &SpeechBatch<T>,
) -> Result<Var> {
    let weights: Vec<GruWeights> = (0..a.layers)
        .map(|l| gru_weights(g, params, &format!("enc.gru{l}")))
        .collect::<Result<_>>()?;
    let mut h: Vec<Var> = (0..a.layers)
        .map(|_| g.constant_from([batch.batch, a.hidden], vec![T::zero(); batch.batch * a.hidden]))
        .collect::<Result<_>>()?;
    for (step, mask) in batch.steps.iter().zip(&batch.masks) {
        let mut x = g.constant_from([batch.batch, batch.dim], step.clone())?;
        for (l, w) in weights.iter().enumerate() {
            h[l] = g.gru_cell_step(x, h[l], *w, mask.as_deref())?;
            x = h[l];
        }
    }
    dense_layer(g, params, "enc.out", h[a.layers - 1])
}

/// Unroll the speech decoder for `steps` frames, feeding `z [B,E]` at every
/// step. Output is `[steps·B, input_dim]`, time-major.
pub(crate) fn decode_speech<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    a: &SpeechArch,
    z: Var,
    steps: usize,
) -> Result<Var> {
    let batch = g.shape(z)[0];
    let weights: Vec<GruWeights> = (0..a.layers)
        .map(|l| gru_weights(g, params, &format!("dec.gru{l}")))
        .collect::<Result<_>>()?;
    let w_out = param(g, params, "dec.out.w")?;
    let b_out = param(g, params, "dec.out.b")?;
    let mut h: Vec<Var> = (0..a.layers)
        .map(|_| g.constant_from([batch, a.hidden], vec![T::zero(); batch * a.hidden]))
        .collect::<Result<_>>()?;
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut x = z;
        for (l, w) in weights.iter().enumerate() {
            h[l] = g.gru_cell_step(x, h[l], *w, None)?;
            x = h[l];
        }
        outputs.push(g.dense(x, w_out, b_out)?);
    }
    g.concat(&outputs, 0)
}

pub(crate) fn head<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, z: Var) -> Result<Var> {
    dense_layer(g, params, "head", z)
}

/// Linearly resample a frame sequence in time to `len` frames; endpoints
/// map to endpoints.
pub fn resample_frames(u: &Utterance, len: usize) -> Vec<f32> {
    let (t, d) = (u.num_frames(), u.dim());
    if t == len {
        return u.frames().to_vec();
    }
    let mut out = Vec::with_capacity(len * d);
    for i in 0..len {
        let pos = if len == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let w = (pos - lo as f64) as f32;
        out.extend(u.frame(lo).iter().zip(u.frame(hi)).map(|(&a, &b)| a + w * (b - a)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_keeps_endpoints_and_interpolates() {
        let u = Utterance::new(vec![0.0, 10.0, 2.0, 20.0, 4.0, 40.0], 2, "s", None).unwrap();
        assert_eq!(resample_frames(&u, 3), u.frames());
        assert_eq!(
            resample_frames(&u, 5),
            vec![0.0, 10.0, 1.0, 15.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]
        );
        assert_eq!(resample_frames(&u, 1), vec![0.0, 10.0]);
    }

    #[test]
    fn batch_masks_only_where_padding_exists() {
        let a = Utterance::new(vec![1.0; 26], 13, "s", None).unwrap();
        let b = Utterance::new(vec![2.0; 39], 13, "s", None).unwrap();
        let batch = SpeechBatch::<f64>::new(&[&a, &b], 13).unwrap();
        assert_eq!(batch.max_len(), 3);
        assert!(batch.masks[1].is_none());
        assert_eq!(batch.masks[2], Some(vec![0.0, 1.0]));
        assert!(batch.steps[2][..13].iter().all(|&v| v == 0.0));
    }
}
