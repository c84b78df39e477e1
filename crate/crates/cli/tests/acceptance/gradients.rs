//! Finite-difference checks of every graph op and training loss in f64.

use fsm_core::autodiff::{Conv2dConfig, Graph, GruWeights, ParamId, ParamSet, Tensor, Var};
use fsm_core::models::{ae_loss, cae_loss, classifier_loss, mine_semi_hard, triplet_loss};
use fsm_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{rng, Outcome};

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>, &[ParamId]) -> Result<Var>>;

/// A scalar function of a few parameter tensors.
struct Case {
    params: ParamSet<f64>,
    ids: Vec<ParamId>,
    f: Build,
}

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

impl Case {
    fn new(r: &mut ChaCha8Rng, shapes: &[&[usize]], f: Build) -> Self {
        let mut params = ParamSet::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                params.add(
                    format!("p{i}"),
                    Tensor::new(s.to_vec(), uniform(r, n, 1.0)).unwrap().with_grad(),
                )
            })
            .collect();
        Case { params, ids, f }
    }

    fn eval(&self, params: &ParamSet<f64>) -> f64 {
        let mut g = Graph::new();
        let out = (self.f)(&mut g, params, &self.ids).unwrap();
        g.scalar(out).unwrap()
    }

    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all
    /// parameters (0 when both vanish).
    fn relative_error(&mut self) -> f64 {
        let mut g = Graph::new();
        let out = (self.f)(&mut g, &self.params, &self.ids).unwrap();
        self.params.zero_grad();
        g.backward(out, &mut self.params).unwrap();
        let analytic: Vec<f64> = self
            .params
            .tensors()
            .iter()
            .flat_map(|t| t.grad().unwrap().to_vec())
            .collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = self.params.clone();
        for t in 0..probe.len() {
            for i in 0..probe.tensors()[t].numel() {
                let orig = probe.tensors()[t].data()[i];
                probe.tensors_mut()[t].data_mut()[i] = orig + STEP;
                let up = self.eval(&probe);
                probe.tensors_mut()[t].data_mut()[i] = orig - STEP;
                let down = self.eval(&probe);
                probe.tensors_mut()[t].data_mut()[i] = orig;
                numeric.push((up - down) / (2.0 * STEP));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        }
    }
}

/// Reduce any tensor to a scalar with fixed random weights.
fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let n = g.value(x).len();
    let mut r = rng(seed);
    g.weighted_sum(x, uniform(&mut r, n, 1.0))
}

fn p(g: &mut Graph<f64>, ps: &ParamSet<f64>, id: ParamId) -> Result<Var> {
    g.param(ps, id)
}

/// Cases for one op, one per instance seed.
fn cases(name: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let s = seed;
    match name {
        "matmul" => Case::new(
            &mut r,
            &[&[3, 4], &[4, 2]],
            Box::new(move |g, ps, id| {
                let (a, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?);
                let y = g.matmul(a, b)?;
                reduce(g, y, s)
            }),
        ),
        "dense" => Case::new(
            &mut r,
            &[&[3, 4], &[4, 5], &[5]],
            Box::new(move |g, ps, id| {
                let (x, w, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?, p(g, ps, id[2])?);
                let y = g.dense(x, w, b)?;
                reduce(g, y, s)
            }),
        ),
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            Case::new(
                &mut r,
                &[&[2, 5, 5, 2], &[3, 3, 2, 3], &[3]],
                Box::new(move |g, ps, id| {
                    let (x, w, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?, p(g, ps, id[2])?);
                    let y = g.conv2d(x, w, b, Conv2dConfig { stride, pad: 1 })?;
                    reduce(g, y, s)
                }),
            )
        }
        "conv_transpose2d" => {
            let pad = (seed % 2) as usize;
            Case::new(
                &mut r,
                &[&[2, 3, 3, 2], &[2, 3, 3, 3], &[3]],
                Box::new(move |g, ps, id| {
                    let (x, w, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?, p(g, ps, id[2])?);
                    let y = g.conv_transpose2d(x, w, b, Conv2dConfig { stride: 2, pad })?;
                    reduce(g, y, s)
                }),
            )
        }
        "max_pool2x2" => Case::new(
            &mut r,
            &[&[2, 4, 5, 2]],
            Box::new(move |g, ps, id| {
                let x = p(g, ps, id[0])?;
                let y = g.max_pool2x2(x)?;
                reduce(g, y, s)
            }),
        ),
        "gru_cell_step" => {
            let mask: Vec<f64> = vec![1.0, if seed.is_multiple_of(2) { 0.0 } else { 1.0 }, 1.0];
            Case::new(
                &mut r,
                &[&[3, 2], &[3, 4], &[2, 12], &[4, 12], &[12], &[12]],
                Box::new(move |g, ps, id| {
                    let v: Vec<Var> = id.iter().map(|&i| p(g, ps, i)).collect::<Result<_>>()?;
                    let w = GruWeights {
                        w_input: v[2],
                        w_hidden: v[3],
                        b_input: v[4],
                        b_hidden: v[5],
                    };
                    let h1 = g.gru_cell_step(v[0], v[1], w, Some(&mask))?;
                    let h2 = g.gru_cell_step(v[0], h1, w, None)?;
                    reduce(g, h2, s)
                }),
            )
        }
        "relu" | "tanh" | "sigmoid" | "softmax" => {
            let op = name.to_string();
            Case::new(
                &mut r,
                &[&[3, 4]],
                Box::new(move |g, ps, id| {
                    let x = p(g, ps, id[0])?;
                    let y = match op.as_str() {
                        "relu" => g.relu(x)?,
                        "tanh" => g.tanh(x)?,
                        "sigmoid" => g.sigmoid(x)?,
                        _ => g.softmax(x)?,
                    };
                    reduce(g, y, s)
                }),
            )
        }
        "squared_error" => {
            let weights = uniform(&mut rng(seed ^ 7), 6, 1.0)
                .iter()
                .map(|w| w.abs())
                .collect::<Vec<_>>();
            Case::new(
                &mut r,
                &[&[2, 3], &[2, 3]],
                Box::new(move |g, ps, id| {
                    let (a, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?);
                    g.squared_error(a, b, Some(weights.clone()))
                }),
            )
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|i| ((seed as usize) + 3 * i) % 5).collect();
            Case::new(
                &mut r,
                &[&[4, 5]],
                Box::new(move |g, ps, id| {
                    let x = p(g, ps, id[0])?;
                    g.cross_entropy(x, &labels)
                }),
            )
        }
        "concat" => {
            let axis = (seed % 2) as usize;
            Case::new(
                &mut r,
                &[&[2, 3], &[2, 3]],
                Box::new(move |g, ps, id| {
                    let (a, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?);
                    let y = g.concat(&[a, b, a], axis)?;
                    reduce(g, y, s)
                }),
            )
        }
        "slice" => Case::new(
            &mut r,
            &[&[4, 3]],
            Box::new(move |g, ps, id| {
                let x = p(g, ps, id[0])?;
                let y = g.slice(x, (s % 2) as usize, 1, 2)?;
                reduce(g, y, s)
            }),
        ),
        "add" => Case::new(
            &mut r,
            &[&[2, 3], &[2, 3]],
            Box::new(move |g, ps, id| {
                let (a, b) = (p(g, ps, id[0])?, p(g, ps, id[1])?);
                let y = g.add(a, b)?;
                let y = g.add(y, a)?;
                reduce(g, y, s)
            }),
        ),
        "weighted_sum" => Case::new(
            &mut r,
            &[&[5]],
            Box::new(move |g, ps, id| {
                let x = p(g, ps, id[0])?;
                reduce(g, x, s)
            }),
        ),
        "reshape" => Case::new(
            &mut r,
            &[&[2, 6], &[3, 2]],
            Box::new(move |g, ps, id| {
                let (x, w) = (p(g, ps, id[0])?, p(g, ps, id[1])?);
                let y = g.reshape(x, [4, 3])?;
                let y = g.matmul(y, w)?;
                reduce(g, y, s)
            }),
        ),
        "triplet_hinge" => {
            let labels = [0usize, 0, 1, 1, 2, 2];
            Case::new(
                &mut r,
                &[&[6, 3]],
                Box::new(move |g, ps, id| {
                    let x = p(g, ps, id[0])?;
                    let triplets = mine_semi_hard(g.value(x), 3, &labels)?;
                    g.triplet_hinge(x, &triplets, 1.0)
                }),
            )
        }
        "loss:ae" | "loss:cae" => {
            // Dense autoencoder on a batch of 3 inputs of width 4. The AE
            // target is the input itself; the CAE target is a paired item.
            let cae = name == "loss:cae";
            Case::new(
                &mut r,
                &[&[4, 2], &[2], &[2, 4], &[4]],
                Box::new(move |g, ps, id| {
                    let mut r = rng(s ^ 0xA5);
                    let x = uniform(&mut r, 12, 1.0).iter().map(|v| v.abs()).collect::<Vec<_>>();
                    let target = if cae {
                        uniform(&mut r, 12, 1.0).iter().map(|v| v.abs()).collect()
                    } else {
                        x.clone()
                    };
                    let xv = g.constant_from([3, 4], x)?;
                    let tv = g.constant_from([3, 4], target)?;
                    let v: Vec<Var> = id.iter().map(|&i| p(g, ps, i)).collect::<Result<_>>()?;
                    let z = g.dense(xv, v[0], v[1])?;
                    let z = g.tanh(z)?;
                    let y = g.dense(z, v[2], v[3])?;
                    let y = g.sigmoid(y)?;
                    g.squared_error(y, tv, Some(vec![1.0 / 3.0; 12]))
                }),
            )
        }
        "loss:classifier" => {
            let labels: Vec<usize> = (0..3).map(|i| (s as usize + i) % 4).collect();
            Case::new(
                &mut r,
                &[&[3, 5], &[5, 4], &[4]],
                Box::new(move |g, ps, id| {
                    let v: Vec<Var> = id.iter().map(|&i| p(g, ps, i)).collect::<Result<_>>()?;
                    let logits = g.dense(v[0], v[1], v[2])?;
                    g.cross_entropy(logits, &labels)
                }),
            )
        }
        "loss:triplet" => {
            let labels = [0usize, 1, 0, 2, 1, 2];
            Case::new(
                &mut r,
                &[&[6, 4], &[4, 3], &[3]],
                Box::new(move |g, ps, id| {
                    let v: Vec<Var> = id.iter().map(|&i| p(g, ps, i)).collect::<Result<_>>()?;
                    let z = g.dense(v[0], v[1], v[2])?;
                    let triplets = mine_semi_hard(g.value(z), 3, &labels)?;
                    g.triplet_hinge(z, &triplets, 0.5)
                }),
            )
        }
        other => panic!("unknown case {other}"),
    }
}

pub const CASES: &[&str] = &[
    "matmul",
    "dense",
    "conv2d",
    "conv_transpose2d",
    "max_pool2x2",
    "gru_cell_step",
    "relu",
    "tanh",
    "sigmoid",
    "softmax",
    "squared_error",
    "cross_entropy",
    "concat",
    "slice",
    "add",
    "weighted_sum",
    "reshape",
    "triplet_hinge",
    "loss:ae",
    "loss:cae",
    "loss:classifier",
    "loss:triplet",
];

/// The graph losses agree with the scalar loss functions used for reporting.
fn losses_agree(seed: u64) -> bool {
    let mut r = rng(seed);
    let x = uniform(&mut r, 6, 1.0);
    let y = uniform(&mut r, 6, 1.0);
    let mut g = Graph::<f64>::new();
    let (xv, yv) = (
        g.constant_from([1, 6], x.clone()).unwrap(),
        g.constant_from([1, 6], y.clone()).unwrap(),
    );
    let se = g.squared_error(yv, xv, None).unwrap();
    let se = g.scalar(se).unwrap();
    let logits = g.constant_from([1, 6], x.clone()).unwrap();
    let ce = g.cross_entropy(logits, &[2]).unwrap();
    let ce = g.scalar(ce).unwrap();
    let emb = g.constant_from([3, 2], x.clone()).unwrap();
    let th = g.triplet_hinge(emb, &[[0, 1, 2]], 0.3).unwrap();
    let th = g.scalar(th).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
    close(se, ae_loss(&x, &y).unwrap())
        && close(se, cae_loss(&x, &y).unwrap())
        && close(ce, classifier_loss(&x, 2).unwrap())
        && close(th, triplet_loss(&x[0..2], &x[2..4], &x[4..6], 0.3).unwrap())
}

pub fn run() -> Outcome {
    let start = std::time::Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for &name in CASES {
        for i in 0..INSTANCES {
            let err = cases(name, 1000 + i as u64).relative_error();
            if err.is_nan() || err >= TOLERANCE {
                failures.push(format!("{name}#{i} rel {err:.2e}"));
            }
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    let agree = (0..INSTANCES as u64).all(losses_agree);
    if !agree {
        failures.push("graph losses disagree with scalar loss functions".into());
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        failures.push(format!("runtime {secs:.1}s exceeds 60s"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "{} cases x {INSTANCES} instances, worst rel err {:.2e} ({}), tol {TOLERANCE:.0e}, {secs:.1}s{}",
            CASES.len(),
            worst.0,
            worst.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    }
}
