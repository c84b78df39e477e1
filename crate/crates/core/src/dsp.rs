//! MFCC front end: pre-emphasis, Hamming window, power spectrum, mel
//! filterbank, log, DCT-II, per-utterance mean/variance normalisation.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM audio in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: String,
    pub label: Option<String>,
}

/// A variable-length sequence of feature frames (`T × D`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    frames: Vec<f32>,
    dim: usize,
    pub speaker_id: String,
    pub label: Option<String>,
}

impl Utterance {
    pub fn new(frames: Vec<f32>, dim: usize, speaker_id: impl Into<String>, label: Option<String>) -> Result<Self> {
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "utterance needs at least one frame of dimension {dim}, got {} values",
                frames.len()
            )));
        }
        if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature at index {bad}")));
        }
        Ok(Utterance {
            frames,
            dim,
            speaker_id: speaker_id.into(),
            label,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_filters: usize,
    pub n_ceps: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    pub low_hz: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub high_hz: Option<f64>,
    /// Per-utterance cepstral mean/variance normalisation.
    pub normalize: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_filters: 24,
            n_ceps: 13,
            preemphasis: 0.97,
            log_floor: 1e-10,
            low_hz: 0.0,
            high_hz: None,
            normalize: true,
        }
    }
}

/// Sample-domain framing derived from a config and a sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl MfccConfig {
    pub fn framing(&self, sample_rate: u32) -> Result<Framing> {
        let frame_len = (sample_rate as f64 * self.frame_ms / 1000.0).round() as usize;
        let hop = (sample_rate as f64 * self.hop_ms / 1000.0).round() as usize;
        if frame_len == 0 || hop == 0 {
            return Err(Error::invalid(format!(
                "frame {} ms / hop {} ms too short at {sample_rate} Hz",
                self.frame_ms, self.hop_ms
            )));
        }
        Ok(Framing {
            frame_len,
            hop,
            n_fft: frame_len.next_power_of_two(),
        })
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        let high = self.high_hz.unwrap_or(nyquist);
        if sample_rate == 0 || self.n_filters == 0 || self.n_ceps == 0 || self.n_ceps > self.n_filters {
            return Err(Error::invalid(format!("bad MFCC config {self:?} at {sample_rate} Hz")));
        }
        if !(0.0..high).contains(&self.low_hz) || high > nyquist {
            return Err(Error::invalid(format!(
                "filterbank range {}..{high} Hz outside 0..{nyquist} Hz",
                self.low_hz
            )));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies (Hz) of the triangular filters: `n_filters + 2` points
/// equally spaced on the mel scale. Filter `i` spans `edges[i]..edges[i+2]`
/// and peaks at `edges[i+1]`.
pub fn mel_filter_edges(cfg: &MfccConfig, sample_rate: u32) -> Vec<f64> {
    let high = cfg.high_hz.unwrap_or(sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(high));
    let n = cfg.n_filters + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

pub fn mel_filter_centers(cfg: &MfccConfig, sample_rate: u32) -> Vec<f64> {
    let edges = mel_filter_edges(cfg, sample_rate);
    edges[1..edges.len() - 1].to_vec()
}

struct Analyzer {
    framing: Framing,
    window: Vec<f64>,
    /// Dense `[n_filters, n_fft/2+1]` weights.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Analyzer {
    fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let framing = cfg.framing(sample_rate)?;
        let n = framing.frame_len;
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        let bins = framing.n_fft / 2 + 1;
        let edges = mel_filter_edges(cfg, sample_rate);
        let bin_hz = sample_rate as f64 / framing.n_fft as f64;
        let filters = (0..cfg.n_filters)
            .map(|f| {
                let (l, c, r) = (edges[f], edges[f + 1], edges[f + 2]);
                (0..bins)
                    .map(|k| {
                        let hz = k as f64 * bin_hz;
                        if hz <= l || hz >= r {
                            0.0
                        } else if hz <= c {
                            (hz - l) / (c - l)
                        } else {
                            (r - hz) / (r - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(framing.n_fft);
        Ok(Analyzer {
            framing,
            window,
            filters,
            fft,
        })
    }

    fn num_frames(&self, n_samples: usize) -> usize {
        (n_samples - self.framing.frame_len) / self.framing.hop + 1
    }

    /// Log mel energies, `[T, n_filters]`.
    fn log_mel(&self, emphasized: &[f64], floor: f64) -> Vec<Vec<f64>> {
        let Framing { frame_len, hop, n_fft } = self.framing;
        let bins = n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; bins];
        (0..self.num_frames(emphasized.len()))
            .map(|t| {
                let frame = &emphasized[t * hop..t * hop + frame_len];
                for (i, slot) in buf.iter_mut().enumerate() {
                    *slot = Complex::new(frame.get(i).map_or(0.0, |&s| s * self.window[i]), 0.0);
                }
                self.fft.process(&mut buf);
                for (p, c) in power.iter_mut().zip(&buf) {
                    *p = c.norm_sqr() / n_fft as f64;
                }
                self.filters
                    .iter()
                    .map(|w| {
                        let e: f64 = w.iter().zip(&power).map(|(a, b)| a * b).sum();
                        e.max(floor).ln()
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_length(wave: &Waveform, framing: &Framing) -> Result<()> {
    if wave.samples.len() < framing.frame_len {
        return Err(Error::invalid(format!(
            "waveform has {} samples; at least {} ({} ms at {} Hz) are required",
            wave.samples.len(),
            framing.frame_len,
            framing.frame_len as f64 * 1000.0 / wave.sample_rate as f64,
            wave.sample_rate
        )));
    }
    Ok(())
}

fn pre_emphasize(samples: &[f32], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for (i, &s) in samples.iter().enumerate() {
        let s = s as f64;
        out.push(if i == 0 { s } else { s - coeff * prev });
        prev = s;
    }
    out
}

/// Pre-DCT log mel filterbank energies, `[T][n_filters]`.
pub fn log_mel_energies(wave: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let an = Analyzer::new(cfg, wave.sample_rate)?;
    check_length(wave, &an.framing)?;
    Ok(an.log_mel(&pre_emphasize(&wave.samples, cfg.preemphasis), cfg.log_floor))
}

/// Orthonormal DCT-II, keeping the first `keep` coefficients.
fn dct2(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, &v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Variance below which a coefficient track is treated as constant.
const FLAT_VARIANCE: f64 = 1e-12;

fn normalize_columns(rows: &mut [Vec<f64>]) {
    let t = rows.len() as f64;
    let dim = rows.first().map_or(0, Vec::len);
    for d in 0..dim {
        let mean = rows.iter().map(|r| r[d]).sum::<f64>() / t;
        let var = rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / t;
        // A flat track carries no information; zero it exactly rather than
        // leaving rounding residue from the mean.
        let scale = if var > FLAT_VARIANCE { var.sqrt().recip() } else { 0.0 };
        for r in rows.iter_mut() {
            r[d] = (r[d] - mean) * scale;
        }
    }
}

/// Static MFCCs; `T = ⌊(N − frame_len)/hop⌋ + 1`.
pub fn mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<Utterance> {
    let an = Analyzer::new(cfg, wave.sample_rate)?;
    check_length(wave, &an.framing)?;
    let logmel = an.log_mel(&pre_emphasize(&wave.samples, cfg.preemphasis), cfg.log_floor);
    let mut ceps: Vec<Vec<f64>> = logmel.iter().map(|row| dct2(row, cfg.n_ceps)).collect();
    if cfg.normalize {
        normalize_columns(&mut ceps);
    }
    let frames = ceps.into_iter().flatten().map(|v| v as f32).collect();
    Utterance::new(frames, cfg.n_ceps, wave.speaker_id.clone(), wave.label.clone())
}

const DELTA_WINDOW: usize = 2;

fn deltas(frames: &[f32], t_len: usize, dim: usize) -> Vec<f32> {
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let at = |t: isize, d: usize| frames[(t.clamp(0, t_len as isize - 1) as usize) * dim + d] as f64;
    let mut out = Vec::with_capacity(frames.len());
    for t in 0..t_len as isize {
        for d in 0..dim {
            let num: f64 = (1..=DELTA_WINDOW as isize)
                .map(|n| n as f64 * (at(t + n, d) - at(t - n, d)))
                .sum();
            out.push((num / denom) as f32);
        }
    }
    out
}

/// Append first- and second-order regression deltas (±2 frames, edges
/// replicated) to 13-dimensional static features, giving 39 dimensions.
pub fn add_deltas(utt: &Utterance) -> Result<Utterance> {
    const STATIC_DIM: usize = 13;
    if utt.dim() != STATIC_DIM {
        return Err(Error::invalid(format!(
            "add_deltas expects {STATIC_DIM} static coefficients, got {} (already augmented?)",
            utt.dim()
        )));
    }
    let t = utt.num_frames();
    let d1 = deltas(utt.frames(), t, STATIC_DIM);
    let d2 = deltas(&d1, t, STATIC_DIM);
    let mut frames = Vec::with_capacity(t * STATIC_DIM * 3);
    for i in 0..t {
        frames.extend_from_slice(utt.frame(i));
        frames.extend_from_slice(&d1[i * STATIC_DIM..(i + 1) * STATIC_DIM]);
        frames.extend_from_slice(&d2[i * STATIC_DIM..(i + 1) * STATIC_DIM]);
    }
    Utterance::new(frames, STATIC_DIM * 3, utt.speaker_id.clone(), utt.label.clone())
}
