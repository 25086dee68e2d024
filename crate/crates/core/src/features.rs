//! Waveform to stacked log-mel features.
//!
//! The pipeline is: 25 ms Hamming-windowed frames every 10 ms, power
//! spectrum from a zero-padded FFT, 80 triangular mel bands (HTK mel scale,
//! 20 Hz to Nyquist), natural log floored at `ln(1e-10)`, then four
//! consecutive frames stacked with an output hop of three frames into
//! 320-dimensional vectors. Global mean/variance normalization is fitted
//! on training data and applied separately.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::numerics::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_MS: f64 = 25.0;
pub const HOP_MS: f64 = 10.0;
pub const NUM_MEL_BANDS: usize = 80;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const STACK: usize = 4;
pub const SKIP: usize = 3;
/// Dimension of a stacked feature vector.
pub const FEATURE_DIM: usize = NUM_MEL_BANDS * STACK;
/// Power floor applied before the logarithm.
pub const POWER_FLOOR: f64 = 1e-10;
/// Lower bound on CMVN variances before they are used.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Utterance features, one row per (stacked) frame: `T × p`.
pub type FeatureMatrix = Tensor;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {i} outside [-1, 1]")));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Number of samples spanned by `ms` milliseconds.
pub fn ms_to_samples(ms: f64, sample_rate_hz: u32) -> usize {
    math::round(ms * sample_rate_hz as f64 / 1000.0) as usize
}

/// Symmetric Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * math::cos(2.0 * PI * i as f64 / (n - 1) as f64))
        .collect()
}

/// Splits `w` into overlapping frames of `win_ms` every `hop_ms` and applies
/// a Hamming window to each. Trailing samples that do not fill a frame are
/// dropped, so there are `floor((N − win) / hop) + 1` frames.
pub fn frame_and_window(w: &Waveform, win_ms: f64, hop_ms: f64) -> Result<Vec<Vec<f64>>> {
    let win = ms_to_samples(win_ms, w.sample_rate_hz);
    let hop = ms_to_samples(hop_ms, w.sample_rate_hz);
    if win == 0 || hop == 0 {
        return Err(Error::invalid("window and hop must span at least one sample"));
    }
    let n = w.samples.len();
    if n < win {
        return Err(Error::invalid(format!(
            "waveform of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let window = hamming(win);
    let count = (n - win) / hop + 1;
    Ok((0..count)
        .map(|f| {
            let start = f * hop;
            w.samples[start..start + win]
                .iter()
                .zip(&window)
                .map(|(s, h)| s * h)
                .collect()
        })
        .collect())
}

/// Radix-2 complex FFT with precomputed twiddles.
struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Fft {
    fn new(n: usize) -> Self {
        assert!(n.is_power_of_two());
        let half = n / 2;
        let cos = (0..half).map(|k| math::cos(-2.0 * PI * k as f64 / n as f64)).collect();
        let sin = (0..half).map(|k| math::sin(-2.0 * PI * k as f64 / n as f64)).collect();
        Self { n, cos, sin }
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..len / 2 {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let (a, b) = (start + k, start + k + len / 2);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    /// `|X_k|²` for `k = 0..=n/2` of a real, zero-padded frame.
    fn power(&self, frame: &[f64]) -> Vec<f64> {
        let mut re = vec![0.0; self.n];
        let mut im = vec![0.0; self.n];
        re[..frame.len()].copy_from_slice(frame);
        self.transform(&mut re, &mut im);
        (0..=self.n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    }
}

/// Power spectrum `|DFT|²` of a frame zero-padded to `fft_size`, bins `0..=fft_size/2`.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if !fft_size.is_power_of_two() || fft_size < frame.len() {
        return Err(Error::invalid("fft size must be a power of two covering the frame"));
    }
    Ok(Fft::new(fft_size).power(frame))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * math::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    fft_size: usize,
    sample_rate_hz: u32,
    center_mel: Vec<f64>,
    /// Per band: first FFT bin and the weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    pub fn new(
        num_bands: usize,
        fft_size: usize,
        sample_rate_hz: u32,
        low_hz: f64,
        high_hz: f64,
    ) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if num_bands == 0 || !(0.0..high_hz).contains(&low_hz) || high_hz > nyquist {
            return Err(Error::invalid("mel filterbank needs 0 <= low < high <= nyquist"));
        }
        let (lo, hi) = (hz_to_mel(low_hz), hz_to_mel(high_hz));
        let spacing = (hi - lo) / (num_bands + 1) as f64;
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;
        let mut center_mel = Vec::with_capacity(num_bands);
        let mut filters = Vec::with_capacity(num_bands);
        for b in 0..num_bands {
            let left = lo + b as f64 * spacing;
            let center = left + spacing;
            let right = center + spacing;
            center_mel.push(center);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..=fft_size / 2 {
                let mel = hz_to_mel(k as f64 * bin_hz);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                }
                if first.is_some() {
                    weights.push(w);
                }
            }
            while weights.last() == Some(&0.0) {
                weights.pop();
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Ok(Self {
            fft_size,
            sample_rate_hz,
            center_mel,
            filters,
        })
    }

    /// The filterbank used for 16 kHz-style audio: 80 bands from 20 Hz to Nyquist.
    pub fn standard(sample_rate_hz: u32, fft_size: usize) -> Result<Self> {
        Self::new(
            NUM_MEL_BANDS,
            fft_size,
            sample_rate_hz,
            MEL_LOW_HZ,
            sample_rate_hz as f64 / 2.0,
        )
    }

    pub fn num_bands(&self) -> usize {
        self.filters.len()
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        mel_to_hz(self.center_mel[band])
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    /// Band energies of a power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|(first, w)| {
                w.iter()
                    .zip(&power[*first..])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Smallest power of two holding `n` samples.
pub fn fft_size_for(n: usize) -> usize {
    n.next_power_of_two()
}

/// Log mel energies (`T × 80`) of windowed frames.
pub fn log_spectral(frames: &[Vec<f64>], sample_rate_hz: u32) -> Result<Tensor> {
    let win = frames
        .first()
        .map(|f| f.len())
        .ok_or_else(|| Error::invalid("no frames"))?;
    let fft_size = fft_size_for(win);
    let fft = Fft::new(fft_size);
    let bank = MelFilterbank::standard(sample_rate_hz, fft_size)?;
    let mut out = Vec::with_capacity(frames.len() * bank.num_bands());
    for f in frames {
        if f.len() != win {
            return Err(Error::invalid("frames differ in length"));
        }
        let energies = bank.apply(&fft.power(f));
        out.extend(energies.into_iter().map(|e| math::ln(e.max(POWER_FLOOR))));
    }
    Tensor::new(&[frames.len(), bank.num_bands()], out)
}

/// Output row count of [`stack_frames`].
pub fn stacked_len(frames: usize, stack: usize, skip: usize) -> usize {
    if frames < stack {
        0
    } else {
        (frames - stack) / skip + 1
    }
}

/// Concatenates `stack` consecutive rows starting every `skip` rows; frames
/// that do not fill a complete stack at the end are dropped.
pub fn stack_frames(f: &Tensor, stack: usize, skip: usize) -> Result<Tensor> {
    if stack == 0 || skip == 0 {
        return Err(Error::invalid("stack and skip must be positive"));
    }
    let (t, d) = (f.rows(), f.cols());
    if f.rank() != 2 || t < stack {
        return Err(Error::invalid(format!(
            "need at least {stack} frames to stack, got {t}"
        )));
    }
    let rows = stacked_len(t, stack, skip);
    let mut out = Vec::with_capacity(rows * d * stack);
    for i in 0..rows {
        let start = i * skip;
        out.extend_from_slice(&f.data()[start * d..(start + stack) * d]);
    }
    Tensor::new(&[rows, d * stack], out)
}

/// Full front end: `T' × 320` stacked log-mel features of `w`.
pub fn featurize(w: &Waveform) -> Result<FeatureMatrix> {
    let frames = frame_and_window(w, WINDOW_MS, HOP_MS)?;
    let spec = log_spectral(&frames, w.sample_rate_hz)?;
    stack_frames(&spec, STACK, SKIP)
}

/// Pooled per-dimension statistics for global mean/variance normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub frame_count: u64,
}

impl CmvnStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics that leave features unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
            frame_count: 0,
        }
    }
}

/// Pools every frame of every matrix; mean first, then squared deviations.
pub fn cmvn_fit<'a, I>(features: I) -> Result<CmvnStats>
where
    I: IntoIterator<Item = &'a FeatureMatrix>,
    I::IntoIter: Clone,
{
    let iter = features.into_iter();
    let mut dim = None;
    let mut count = 0u64;
    let mut sum: Vec<f64> = Vec::new();
    for m in iter.clone() {
        let d = *dim.get_or_insert(m.cols());
        if m.cols() != d {
            return Err(Error::invalid("feature matrices differ in dimension"));
        }
        if sum.is_empty() {
            sum = vec![0.0; d];
        }
        for r in 0..m.rows() {
            for (s, v) in sum.iter_mut().zip(m.row(r)) {
                *s += v;
            }
        }
        count += m.rows() as u64;
    }
    if count < 2 {
        return Err(Error::invalid("cmvn needs at least two frames"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; mean.len()];
    for m in iter {
        for r in 0..m.rows() {
            for ((s, v), mu) in sq.iter_mut().zip(m.row(r)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
    }
    let variance = sq.iter().map(|s| s / count as f64).collect();
    Ok(CmvnStats {
        mean,
        variance,
        frame_count: count,
    })
}

fn check_dim(x: &Tensor, stats: &CmvnStats) -> Result<()> {
    if x.cols() != stats.dim() || stats.variance.len() != stats.dim() {
        return Err(Error::Shape {
            op: "cmvn",
            lhs: x.shape().to_vec(),
            rhs: vec![stats.dim()],
        });
    }
    Ok(())
}

/// `(x − mean) / sqrt(variance)` per dimension.
pub fn cmvn_apply(x: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    check_dim(x, stats)?;
    let d = stats.dim();
    let inv: Vec<f64> = stats
        .variance
        .iter()
        .map(|v| 1.0 / math::sqrt(v.max(VARIANCE_FLOOR)))
        .collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - stats.mean[i % d]) * inv[i % d])
        .collect();
    Tensor::new(x.shape(), data)
}

/// Inverse of [`cmvn_apply`].
pub fn cmvn_invert(x: &FeatureMatrix, stats: &CmvnStats) -> Result<FeatureMatrix> {
    check_dim(x, stats)?;
    let d = stats.dim();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * math::sqrt(stats.variance[i % d].max(VARIANCE_FLOOR)) + stats.mean[i % d])
        .collect();
    Tensor::new(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn frame_counts() {
        let w = Waveform::new(vec![0.1; 400], 16000).unwrap();
        assert_eq!(frame_and_window(&w, 25.0, 10.0).unwrap().len(), 1);
        let w = Waveform::new(vec![0.1; 16000], 16000).unwrap();
        assert_eq!(frame_and_window(&w, 25.0, 10.0).unwrap().len(), 98);
        let w = Waveform::new(vec![0.1; 399], 16000).unwrap();
        assert!(frame_and_window(&w, 25.0, 10.0).is_err());
    }

    #[test]
    fn constant_frame_is_the_window() {
        let w = Waveform::new(vec![1.0; 400], 16000).unwrap();
        let frames = frame_and_window(&w, 25.0, 10.0).unwrap();
        assert_eq!(frames[0], hamming(400));
        assert!((frames[0][0] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn waveform_range_checked() {
        assert!(Waveform::new(vec![0.5, 1.5], 16000).is_err());
        assert!(Waveform::new(vec![0.5], 0).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let frame: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let power = power_spectrum(&frame, 32).unwrap();
        for (k, p) in power.iter().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / 32.0;
                re += x * a.cos();
                im += x * a.sin();
            }
            assert!((p - (re * re + im * im)).abs() < 1e-12, "bin {k}");
        }
    }

    #[test]
    fn zero_frame_hits_the_floor() {
        let spec = log_spectral(&[vec![0.0; 400]], 16000).unwrap();
        assert_eq!(spec.shape(), &[1, 80]);
        assert!(spec.data().iter().all(|&v| v == POWER_FLOOR.ln()));
    }

    #[test]
    fn tone_peaks_in_its_band() {
        let bank = MelFilterbank::standard(16000, 512).unwrap();
        for band in [10, 25, 40, 60] {
            let f = bank.center_hz(band);
            let w = Waveform::new(tone(f, 0.5, 400), 16000).unwrap();
            let frames = frame_and_window(&w, 25.0, 10.0).unwrap();
            let spec = log_spectral(&frames, 16000).unwrap();
            let row = spec.row(0);
            for (other, &v) in row.iter().enumerate() {
                if other.abs_diff(band) >= 2 {
                    assert!(row[band] > v, "band {band} vs {other}");
                }
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_log_four() {
        let x = tone(700.0, 0.2, 400);
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let win = hamming(400);
        let f1: Vec<f64> = x.iter().zip(&win).map(|(a, b)| a * b).collect();
        let f2: Vec<f64> = x2.iter().zip(&win).map(|(a, b)| a * b).collect();
        let s1 = log_spectral(&[f1], 16000).unwrap();
        let s2 = log_spectral(&[f2], 16000).unwrap();
        let floor = POWER_FLOOR.ln();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            if *a > floor + 2.0 {
                assert!((b - a - 4f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stacking_examples() {
        let f = Tensor::new(&[4, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let s = stack_frames(&f, 4, 3).unwrap();
        assert_eq!(s.shape(), &[1, 8]);
        assert_eq!(s.data(), f.data());

        let f = Tensor::new(&[10, 1], (0..10).map(|i| i as f64).collect()).unwrap();
        let s = stack_frames(&f, 4, 3).unwrap();
        assert_eq!(s.shape(), &[3, 4]);
        assert_eq!(s.row(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.row(1), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s.row(2), &[6.0, 7.0, 8.0, 9.0]);

        assert!(stack_frames(&Tensor::zeros(&[3, 80]), 4, 3).is_err());
    }

    #[test]
    fn stacking_places_every_marker() {
        // frame t, band b holds 1000 t + b
        let (t, d) = (12, 5);
        let f = Tensor::new(&[t, d], (0..t * d).map(|i| (1000 * (i / d) + i % d) as f64).collect()).unwrap();
        let s = stack_frames(&f, 4, 3).unwrap();
        assert_eq!(s.rows(), 3);
        for i in 0..s.rows() {
            for slot in 0..4 {
                for b in 0..d {
                    let v = s.at(i, slot * d + b);
                    assert_eq!(v, (1000 * (i * 3 + slot) + b) as f64);
                }
            }
        }
    }

    #[test]
    fn cmvn_examples() {
        let a = Tensor::full(&[2, 3], 1.0);
        let b = Tensor::full(&[3, 3], 4.0);
        let stats = cmvn_fit([&a, &b]).unwrap();
        // pooled: mean = (2·1 + 3·4)/5 = 2.8, var = (2·1.8² + 3·1.2²)/5 = 2.16
        for (m, v) in stats.mean.iter().zip(&stats.variance) {
            assert!((m - 2.8).abs() < 1e-12);
            assert!((v - 2.16).abs() < 1e-12);
        }
        assert_eq!(stats.frame_count, 5);

        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 3.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(cmvn_apply(&x, &CmvnStats::identity(3)).unwrap(), x);

        let one = Tensor::zeros(&[1, 3]);
        assert!(cmvn_fit([&one]).is_err());
        let empty: [&Tensor; 0] = [];
        assert!(cmvn_fit(empty).is_err());
    }

    #[test]
    fn cmvn_fit_then_apply_normalizes() {
        let a = Tensor::new(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 4.0, 15.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![-3.0, 12.0, 0.5, 11.0]).unwrap();
        let stats = cmvn_fit([&a, &b]).unwrap();
        let na = cmvn_apply(&a, &stats).unwrap();
        let nb = cmvn_apply(&b, &stats).unwrap();
        for d in 0..2 {
            let vals: Vec<f64> = (0..3).map(|r| na.at(r, d)).chain((0..2).map(|r| nb.at(r, d))).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        let back = cmvn_invert(&na, &stats).unwrap();
        for (x, y) in back.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn featurize_shape() {
        let w = Waveform::new(tone(440.0, 0.3, 16000), 16000).unwrap();
        let f = featurize(&w).unwrap();
        assert_eq!(f.cols(), FEATURE_DIM);
        assert_eq!(f.rows(), stacked_len(98, 4, 3));
        assert_eq!(featurize(&w).unwrap(), f);
    }
}
