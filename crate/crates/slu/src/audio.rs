//! 16-bit PCM mono WAV input and output.

use std::path::Path;

use slu_core::features::Waveform;

use crate::error::{Error, Result};

/// Reads a 16-bit mono WAV; samples are scaled by `1/32767` and clamped to
/// `[-1, 1]` (so `-32768` reads as `-1`).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "need 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| (v as f64 / 32767.0).max(-1.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Writes `w` as 16-bit PCM mono, rounding each sample to the nearest level.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let fail = |e: hound::Error| Error::format(path, e.to_string());
    let mut out = hound::WavWriter::create(path, spec).map_err(fail)?;
    for &s in w.samples() {
        out.write_sample((s * 32767.0).round() as i16).map_err(fail)?;
    }
    out.finalize().map_err(fail)
}
