//! Distances over raw features and embeddings.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dsp::Utterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Cosine,
    SquaredEuclidean,
    Dtw,
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("lengths {a} and {b}")));
    }
    Ok(())
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Float>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine distance from a precomputed dot product and norms. A zero norm
/// yields distance 1.
pub(crate) fn cosine_from_parts<T: Float>(dot: T, na: T, nb: T) -> T {
    if na == T::zero() || nb == T::zero() {
        return T::one();
    }
    let sim = (dot / (na * nb)).max(-T::one()).min(T::one());
    T::one() - sim
}

/// `1 − a·b / (‖a‖‖b‖)`, in `[0, 2]`; 1 when either vector is all zeros.
pub fn cosine_distance<T: Float>(a: &[T], b: &[T]) -> Result<T> {
    check_len("cosine_distance", a.len(), b.len())?;
    Ok(cosine_from_parts(dot(a, b), norm(a), norm(b)))
}

/// `‖a − b‖²`.
pub fn squared_euclidean<T: Float>(a: &[T], b: &[T]) -> Result<T> {
    check_len("squared_euclidean", a.len(), b.len())?;
    Ok(a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y)))
}

/// Result of an alignment: accumulated cost along the chosen path and the
/// number of cells on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment<T> {
    pub cost: T,
    pub length: usize,
}

impl<T: Float> Alignment<T> {
    pub fn normalized(&self) -> T {
        self.cost / T::from(self.length).expect("length fits")
    }

    fn better_than(&self, other: &Self) -> bool {
        self.cost < other.cost || (self.cost == other.cost && self.length < other.length)
    }
}

/// Exact DTW between two row-major frame matrices of width `dim`.
///
/// Steps (1,0), (0,1), (1,1); endpoints anchored at the first and last
/// frames; frame cost is cosine distance. Returns the minimum-cost path,
/// preferring the shorter path on equal cost.
pub fn dtw_align<T: Float>(a: &[T], b: &[T], dim: usize) -> Result<Alignment<T>> {
    if dim == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(dim) || !b.len().is_multiple_of(dim) {
        return Err(Error::shape(
            "dtw_distance",
            format!("frames of {} and {} values with dimension {dim}", a.len(), b.len()),
        ));
    }
    let (ta, tb) = (a.len() / dim, b.len() / dim);
    let na: Vec<T> = a.chunks_exact(dim).map(norm).collect();
    let nb: Vec<T> = b.chunks_exact(dim).map(norm).collect();
    let cost = |i: usize, j: usize| {
        cosine_from_parts(
            dot(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]),
            na[i],
            nb[j],
        )
    };
    let inf = Alignment {
        cost: T::infinity(),
        length: usize::MAX,
    };
    let mut prev = vec![inf; tb];
    let mut cur = vec![inf; tb];
    for i in 0..ta {
        for j in 0..tb {
            let best = if i == 0 && j == 0 {
                Alignment {
                    cost: T::zero(),
                    length: 0,
                }
            } else {
                let mut best = inf;
                for cand in [
                    (i > 0 && j > 0).then(|| prev[j - 1]),
                    (i > 0).then(|| prev[j]),
                    (j > 0).then(|| cur[j - 1]),
                ]
                .into_iter()
                .flatten()
                {
                    if cand.better_than(&best) {
                        best = cand;
                    }
                }
                best
            };
            cur[j] = if i == 0 && j == 0 {
                Alignment {
                    cost: cost(0, 0),
                    length: 1,
                }
            } else {
                Alignment {
                    cost: cost(i, j) + best.cost,
                    length: best.length + 1,
                }
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[tb - 1])
}

/// DTW cost normalised by alignment path length.
pub fn dtw_distance(a: &Utterance, b: &Utterance) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "dtw_distance",
            format!("frame dimensions {} and {}", a.dim(), b.dim()),
        ));
    }
    Ok(dtw_align(a.frames(), b.frames(), a.dim())?.normalized() as f64)
}
