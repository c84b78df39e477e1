//! 16-bit PCM mono WAV I/O.

use std::path::Path;

use crate::dsp::Waveform;
use crate::error::{Error, Result};

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_wav(path: &Path, speaker_id: &str, label: Option<String>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!(
                "expected 16-bit PCM, found {:?} {}-bit",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e.to_string()))?;
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        speaker_id: speaker_id.to_string(),
        label,
    })
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| wav_err(path, e.to_string()))
}
