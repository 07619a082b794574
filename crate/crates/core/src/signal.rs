//! Waveforms, mixture construction, and the STFT/iSTFT pair.
//!
//! The inverse transform uses weighted overlap-add with pointwise
//! window-energy normalization, so `istft(stft(x), x.len())` reconstructs `x`
//! to floating-point precision. Both transforms are linear, and the adjoint
//! of the inverse transform is available for gradient propagation.

use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Fixed-sample-rate mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("empty sample buffer".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidWaveform("zero sample rate".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!(
                "non-finite sample at index {pos}"
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Peak absolute amplitude.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// A target/interference pair and their exact sum.
#[derive(Debug, Clone)]
pub struct MixturePair {
    pub target: Waveform,
    pub interference: Waveform,
    pub mixture: Waveform,
}

/// Element-wise sum of target and interference. No scaling, no clipping.
pub fn mix(target: &Waveform, interference: &Waveform) -> Result<MixturePair> {
    if target.sample_rate != interference.sample_rate {
        return Err(Error::SampleRateMismatch(
            target.sample_rate,
            interference.sample_rate,
        ));
    }
    if target.len() != interference.len() {
        return Err(Error::DimensionMismatch {
            context: "mix: waveform lengths",
            expected: target.len(),
            got: interference.len(),
        });
    }
    let samples: Vec<f64> = target
        .samples
        .iter()
        .zip(&interference.samples)
        .map(|(t, v)| t + v)
        .collect();
    Ok(MixturePair {
        target: target.clone(),
        interference: interference.clone(),
        mixture: Waveform {
            samples,
            sample_rate: target.sample_rate,
        },
    })
}

/// Uniform random derangement of `0..n` by rejection sampling.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2, "derangement needs n >= 2");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Pair every clip in the batch with another clip as interference.
///
/// Pair `i` has `target = batch[i]` and `interference = batch[pi(i)]` where
/// `pi` is a derangement, so a clip is never mixed with itself.
pub fn shuffle_mix(batch: &[Waveform], rng: &mut impl Rng) -> Result<Vec<MixturePair>> {
    if batch.len() < 2 {
        return Err(Error::InvalidBatch(format!(
            "shuffle_mix needs at least 2 clips, got {}",
            batch.len()
        )));
    }
    let len = batch[0].len();
    let rate = batch[0].sample_rate;
    for (i, w) in batch.iter().enumerate() {
        if w.len() != len {
            return Err(Error::InvalidBatch(format!(
                "clip {i} has length {} but clip 0 has {len}",
                w.len()
            )));
        }
        if w.sample_rate != rate {
            return Err(Error::SampleRateMismatch(rate, w.sample_rate));
        }
    }
    let pi = derangement(batch.len(), rng);
    batch
        .iter()
        .enumerate()
        .map(|(i, target)| mix(target, &batch[pi[i]]))
        .collect()
}

/// One-sided complex spectrogram, `(win_len/2 + 1) x n_frames`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub win_len: usize,
    pub hop: usize,
}

impl ComplexSpectrogram {
    pub fn n_bins(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.bins.ncols()
    }
}

/// STFT analysis/synthesis engine with fixed window and hop.
pub struct Stft {
    win_len: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

pub const DEFAULT_WIN_LEN: usize = 512;
pub const DEFAULT_HOP: usize = 128;

impl Default for Stft {
    fn default() -> Self {
        Stft::new(DEFAULT_WIN_LEN, DEFAULT_HOP)
    }
}

impl Stft {
    pub fn new(win_len: usize, hop: usize) -> Self {
        assert!(win_len >= 2 && hop >= 1 && hop <= win_len);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(win_len);
        let ifft = planner.plan_fft_inverse(win_len);
        Stft {
            win_len,
            hop,
            window: hann_periodic(win_len),
            fft,
            ifft,
        }
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.win_len / 2 + 1
    }

    fn pad(&self) -> usize {
        self.win_len / 2
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Forward transform. The signal is zero-padded by half a window on both
    /// sides so every sample gets full analysis coverage.
    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram> {
        if w.len() < self.win_len {
            return Err(Error::TooShort {
                got: w.len(),
                min: self.win_len,
            });
        }
        let n = w.len();
        let pad = self.pad();
        let n_frames = self.n_frames(n);
        let n_bins = self.n_bins();

        let mut padded = vec![0.0; n + 2 * pad];
        padded[pad..pad + n].copy_from_slice(&w.samples);

        let mut bins = Array2::zeros((n_bins, n_frames));
        let mut buf = vec![Complex64::default(); self.win_len];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = t * self.hop;
            for j in 0..self.win_len {
                buf[j] = Complex64::new(padded[start + j] * self.window[j], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (dst, src) in bins.column_mut(t).iter_mut().zip(&buf[..n_bins]) {
                *dst = *src;
            }
        }
        Ok(ComplexSpectrogram {
            bins,
            win_len: self.win_len,
            hop: self.hop,
        })
    }

    /// Window-energy envelope accumulated over all frames, in padded
    /// coordinates.
    fn ola_envelope(&self, n_frames: usize, padded_len: usize) -> Vec<f64> {
        let mut env = vec![0.0; padded_len];
        for t in 0..n_frames {
            let start = t * self.hop;
            for j in 0..self.win_len {
                if start + j < padded_len {
                    env[start + j] += self.window[j] * self.window[j];
                }
            }
        }
        env
    }

    /// Inverse transform by weighted overlap-add, trimmed to `length`.
    pub fn istft(&self, spec: &ComplexSpectrogram, length: usize) -> Result<Vec<f64>> {
        self.check_spec(spec, length)?;
        let n_bins = self.n_bins();
        let n_frames = spec.n_frames();
        let pad = self.pad();
        let padded_len = length + 2 * pad;

        let mut acc = vec![0.0; padded_len];
        let mut buf = vec![Complex64::default(); self.win_len];
        let mut scratch = vec![Complex64::default(); self.ifft.get_inplace_scratch_len()];
        let inv_n = 1.0 / self.win_len as f64;
        for t in 0..n_frames {
            // Rebuild the full Hermitian spectrum from the one-sided bins.
            let col = spec.bins.column(t);
            buf[0] = Complex64::new(col[0].re, 0.0);
            buf[self.win_len / 2] = Complex64::new(col[n_bins - 1].re, 0.0);
            for k in 1..self.win_len / 2 {
                let v = col[k];
                buf[k] = v;
                buf[self.win_len - k] = v.conj();
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for j in 0..self.win_len {
                if start + j < padded_len {
                    acc[start + j] += buf[j].re * inv_n * self.window[j];
                }
            }
        }

        let env = self.ola_envelope(n_frames, padded_len);
        let mut out = vec![0.0; length];
        for i in 0..length {
            let e = env[pad + i];
            out[i] = if e > 1e-12 { acc[pad + i] / e } else { 0.0 };
        }
        Ok(out)
    }

    /// Adjoint of [`Stft::istft`] as a linear map from time-domain gradients
    /// to spectrogram-domain gradients.
    ///
    /// Entry `[k, t]` holds the partial derivatives with respect to the real
    /// and imaginary parts of bin `[k, t]`, packed as a complex number. The
    /// imaginary parts of the DC and Nyquist bins do not influence the
    /// output, so their partials are zero.
    pub fn istft_adjoint(&self, upstream: &[f64], n_frames: usize) -> Array2<Complex64> {
        let n_bins = self.n_bins();
        let pad = self.pad();
        let length = upstream.len();
        let padded_len = length + 2 * pad;
        let env = self.ola_envelope(n_frames, padded_len);

        // Embed the upstream gradient at the original sample positions and
        // apply the (diagonal, self-adjoint) envelope normalization.
        let mut g = vec![0.0; padded_len];
        for i in 0..length {
            let e = env[pad + i];
            if e > 1e-12 {
                g[pad + i] = upstream[i] / e;
            }
        }

        let mut grads = Array2::zeros((n_bins, n_frames));
        let mut buf = vec![Complex64::default(); self.win_len];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        let inv_n = 1.0 / self.win_len as f64;
        for t in 0..n_frames {
            let start = t * self.hop;
            for j in 0..self.win_len {
                let v = if start + j < padded_len {
                    g[start + j] * self.window[j] * inv_n
                } else {
                    0.0
                };
                buf[j] = Complex64::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let mut col = grads.column_mut(t);
            col[0] = Complex64::new(buf[0].re, 0.0);
            col[n_bins - 1] = Complex64::new(buf[self.win_len / 2].re, 0.0);
            for k in 1..self.win_len / 2 {
                col[k] = 2.0 * buf[k];
            }
        }
        grads
    }

    fn check_spec(&self, spec: &ComplexSpectrogram, length: usize) -> Result<()> {
        if spec.win_len != self.win_len || spec.hop != self.hop {
            return Err(Error::InvalidConfig(format!(
                "spectrogram built with win/hop {}/{}, engine uses {}/{}",
                spec.win_len, spec.hop, self.win_len, self.hop
            )));
        }
        if spec.n_bins() != self.n_bins() {
            return Err(Error::DimensionMismatch {
                context: "istft: bin count",
                expected: self.n_bins(),
                got: spec.n_bins(),
            });
        }
        let expect_frames = self.n_frames(length);
        if spec.n_frames() != expect_frames {
            return Err(Error::DimensionMismatch {
                context: "istft: frame count for requested length",
                expected: expect_frames,
                got: spec.n_frames(),
            });
        }
        Ok(())
    }

    /// Ideal band-pass filter: zero every bin whose center frequency lies
    /// outside `[lo_hz, hi_hz]`, then resynthesize.
    pub fn band_mask_filter(&self, w: &Waveform, lo_hz: f64, hi_hz: f64) -> Result<Waveform> {
        let mut spec = self.stft(w)?;
        let bin_hz = w.sample_rate as f64 / self.win_len as f64;
        for k in 0..spec.n_bins() {
            let f = k as f64 * bin_hz;
            if f < lo_hz || f > hi_hz {
                for t in 0..spec.n_frames() {
                    spec.bins[[k, t]] = Complex64::default();
                }
            }
        }
        let samples = self.istft(&spec, w.len())?;
        Waveform::new(samples, w.sample_rate)
    }
}

/// Periodic Hann window.
pub fn hann_periodic(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos()))
        .collect()
}

/// Fraction of total spectral energy inside `[lo_hz, hi_hz]`, from a single
/// full-length periodogram.
pub fn band_energy_fraction(w: &Waveform, lo_hz: f64, hi_hz: f64) -> f64 {
    let n = w.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex64> = w.samples.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    fft.process(&mut buf);
    let bin_hz = w.sample_rate as f64 / n as f64;
    let mut total = 0.0;
    let mut in_band = 0.0;
    for (k, v) in buf.iter().enumerate().take(n / 2 + 1) {
        let f = k as f64 * bin_hz;
        let p = v.norm_sqr();
        total += p;
        if f >= lo_hz && f <= hi_hz {
            in_band += p;
        }
    }
    if total > 0.0 {
        in_band / total
    } else {
        0.0
    }
}
