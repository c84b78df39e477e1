//! Reference (non-graph) forms of the training losses and the semi-hard
//! triplet miner. The graph ops in `autodiff` compute the same quantities
//! with gradients.

use crate::autodiff::graph::log_softmax_at;
use crate::error::{Error, Result};
use crate::metrics::squared_euclidean;
use crate::scalar::Scalar;

/// `‖x − x̂‖²`.
pub fn ae_loss<T: Scalar>(x: &[T], x_hat: &[T]) -> Result<T> {
    if x.len() != x_hat.len() {
        return Err(Error::shape(
            "ae_loss",
            format!("target {} vs reconstruction {}", x.len(), x_hat.len()),
        ));
    }
    squared_euclidean(x, x_hat)
}

/// `‖x_pair − x̂‖²`: the autoencoder loss against a paired target.
pub fn cae_loss<T: Scalar>(x_pair: &[T], x_hat: &[T]) -> Result<T> {
    if x_pair.len() != x_hat.len() {
        return Err(Error::shape(
            "cae_loss",
            format!("target {} vs reconstruction {}", x_pair.len(), x_hat.len()),
        ));
    }
    squared_euclidean(x_pair, x_hat)
}

/// Sequence reconstruction loss: squared error summed over `frames` frames
/// and divided by `frames`.
pub fn sequence_loss<T: Scalar>(target: &[T], recon: &[T], frames: usize) -> Result<T> {
    if frames == 0 || !target.len().is_multiple_of(frames) {
        return Err(Error::shape(
            "sequence_loss",
            format!("{} values over {frames} frames", target.len()),
        ));
    }
    Ok(ae_loss(target, recon)? / T::from_usize(frames).expect("count fits"))
}

/// `−log softmax(logits)[label]`.
pub fn classifier_loss<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::shape("classifier_loss", format!("{} logits", logits.len())));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax_at(logits, label))
}

/// `max(0, m + d(z, z_pair) − d(z, z_neg))` with squared Euclidean `d`.
pub fn triplet_loss<T: Scalar>(z: &[T], z_pair: &[T], z_neg: &[T], margin: T) -> Result<T> {
    if margin <= T::zero() {
        return Err(Error::invalid(format!("margin must be positive, got {margin}")));
    }
    let pos = squared_euclidean(z, z_pair)?;
    let neg = squared_euclidean(z, z_neg)?;
    Ok((margin + pos - neg).max(T::zero()))
}

/// Triplets `[anchor, positive, negative]` for every ordered positive pair
/// in a batch of row-major embeddings of width `dim`.
///
/// The negative is the closest one strictly farther from the anchor than
/// the positive; if every negative is at least as close as the positive,
/// the farthest negative is used instead. Ties go to the lowest index.
pub fn mine_semi_hard<T: Scalar>(emb: &[T], dim: usize, labels: &[usize]) -> Result<Vec<[usize; 3]>> {
    if dim == 0 || emb.len() != labels.len() * dim {
        return Err(Error::shape(
            "mine_semi_hard",
            format!("{} values for {} labels of width {dim}", emb.len(), labels.len()),
        ));
    }
    let n = labels.len();
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let mut dist = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_euclidean(row(i), row(j))?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            let d_ap = dist[a * n + p];
            let mut semi: Option<(T, usize)> = None;
            let mut far: Option<(T, usize)> = None;
            for neg in (0..n).filter(|&j| labels[j] != labels[a]) {
                let d = dist[a * n + neg];
                if d > d_ap && semi.is_none_or(|(best, _)| d < best) {
                    semi = Some((d, neg));
                }
                if far.is_none_or(|(best, _)| d > best) {
                    far = Some((d, neg));
                }
            }
            if let Some((_, neg)) = semi.or(far) {
                out.push([a, p, neg]);
            }
        }
    }
    Ok(out)
}
