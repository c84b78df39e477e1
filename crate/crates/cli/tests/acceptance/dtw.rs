//! DTW against exhaustive enumeration of monotone alignment paths.

use fsm_core::dsp::Utterance;
use fsm_core::metrics::{cosine_distance, dtw_distance};
use rand::Rng;

use crate::{rng, Outcome};

pub const PAIRS: usize = 200;
pub const MAX_FRAMES: usize = 6;

/// Minimum over every path from (0,0) to (n-1,m-1) with steps (1,0), (0,1),
/// (1,1) of (summed cost, length), compared lexicographically; the result
/// is cost / length.
fn brute_force(a: &Utterance, b: &Utterance) -> f64 {
    let (n, m) = (a.num_frames(), b.num_frames());
    let cost = |i: usize, j: usize| cosine_distance(a.frame(i), b.frame(j)).unwrap();
    let mut best: Option<(f32, usize)> = None;
    // Depth-first enumeration carrying the running sum in path order.
    let mut stack = vec![(0usize, 0usize, cost(0, 0), 1usize)];
    while let Some((i, j, acc, len)) = stack.pop() {
        if i == n - 1 && j == m - 1 {
            let better = match best {
                None => true,
                Some((c, l)) => acc < c || (acc == c && len < l),
            };
            if better {
                best = Some((acc, len));
            }
            continue;
        }
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < n && nj < m {
                stack.push((ni, nj, acc + cost(ni, nj), len + 1));
            }
        }
    }
    let (c, l) = best.expect("at least one path");
    (c / l as f32) as f64
}

fn random_utterance(r: &mut impl Rng, dim: usize) -> Utterance {
    let t = r.gen_range(1..=MAX_FRAMES);
    // Coarse values make equal-cost paths common, exercising the tie rule.
    let frames = (0..t * dim).map(|_| r.gen_range(-2i32..=2) as f32 * 0.5).collect();
    Utterance::new(frames, dim, "s", None).unwrap()
}

pub fn run() -> Outcome {
    let start = std::time::Instant::now();
    let mut r = rng(3);
    let mut mismatches = Vec::new();
    for case in 0..PAIRS {
        let dim = r.gen_range(1..=4);
        let (a, b) = (random_utterance(&mut r, dim), random_utterance(&mut r, dim));
        let (got, want) = (dtw_distance(&a, &b).unwrap(), brute_force(&a, &b));
        if got.to_bits() != want.to_bits() {
            mismatches.push(format!("#{case}: {got} vs {want}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let fast = secs < 10.0;
    Outcome {
        pass: mismatches.is_empty() && fast,
        detail: format!(
            "{PAIRS} pairs, T <= {MAX_FRAMES}, {} exact mismatches, {secs:.2}s (limit 10s){}",
            mismatches.len(),
            if mismatches.is_empty() {
                String::new()
            } else {
                format!(": {}", mismatches.join("; "))
            }
        ),
    }
}
