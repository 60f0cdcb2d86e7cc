//! Waveform-to-feature conversion: cubic-spline resampling, 80-bin log-Mel
//! spectrograms at a 10 ms hop, and the training-time Mel mixing
//! augmentation.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[cfg(not(test))]
use num_traits::Float;

use crate::fft::rfft;
use crate::rng::Rng;

/// Network input sample rate, Hz.
pub const FEATURE_SAMPLE_RATE: f64 = 16_000.0;
/// Mel bins per frame.
pub const MEL_BINS: usize = 80;
/// Analysis window: 25 ms at 16 kHz.
pub const WINDOW: usize = 400;
/// Hop: 10 ms at 16 kHz.
pub const HOP: usize = 160;
/// FFT size (window zero-padded).
pub const N_FFT: usize = 512;
/// Energy floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum FeaturesError {
    /// Spline resampling needs at least 4 samples.
    TooShort { got: usize },
    /// Mel extraction expects 16 kHz input.
    WrongSampleRate { got: f64 },
    /// Spectrogram shapes differ.
    ShapeMismatch,
    /// Resampling target rate must be positive.
    BadTargetRate { got: f64 },
}

impl fmt::Display for FeaturesError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeaturesError::TooShort { got } => {
                write!(f, "resampling needs at least 4 samples, got {got}")
            }
            FeaturesError::WrongSampleRate { got } => {
                write!(f, "expected {FEATURE_SAMPLE_RATE} Hz input, got {got}")
            }
            FeaturesError::ShapeMismatch => write!(f, "spectrogram shapes differ"),
            FeaturesError::BadTargetRate { got } => write!(f, "bad target rate {got}"),
        }
    }
}

impl core::error::Error for FeaturesError {}

/// A real waveform at a known sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: f64,
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

/// Log-Mel energies, `frames x MEL_BINS`, 10 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub data: Vec<f64>,
    pub source_sample_rate: f64,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * MEL_BINS..(t + 1) * MEL_BINS]
    }

    pub fn hop_ms(&self) -> f64 {
        HOP as f64 / FEATURE_SAMPLE_RATE * 1000.0
    }
}

/// Cubic-spline interpolation onto a uniform grid at `target_rate`.
///
/// Not-a-knot boundary conditions; the interpolant reproduces polynomials of
/// degree <= 3 exactly. Output length is `floor(duration * target_rate)`;
/// target instants past the last knot use the last polynomial piece.
pub fn resample_cubic(w: &Waveform, target_rate: f64) -> Result<Waveform, FeaturesError> {
    let n = w.samples.len();
    if n < 4 {
        return Err(FeaturesError::TooShort { got: n });
    }
    if !(target_rate > 0.0) {
        return Err(FeaturesError::BadTargetRate { got: target_rate });
    }
    let moments = spline_moments(&w.samples);
    let out_len = (n as f64 * target_rate / w.sample_rate) as usize;
    let mut samples = Vec::with_capacity(out_len);
    for k in 0..out_len {
        // knot units: u in [i, i+1) selects segment i
        let u = k as f64 * w.sample_rate / target_rate;
        let i = (u as usize).min(n - 2);
        let b = u - i as f64;
        let a = 1.0 - b;
        let y = moments[i] * a * a * a / 6.0
            + moments[i + 1] * b * b * b / 6.0
            + (w.samples[i] - moments[i] / 6.0) * a
            + (w.samples[i + 1] - moments[i + 1] / 6.0) * b;
        samples.push(y);
    }
    Ok(Waveform { sample_rate: target_rate, samples })
}

/// Second derivatives of the not-a-knot cubic spline in knot units (h = 1).
///
/// On a uniform grid the not-a-knot conditions pin the second and
/// second-to-last moments directly (M_1 = d_1/6, M_{n-2} = d_{n-2}/6 with
/// d_i = 6(y_{i-1} - 2 y_i + y_{i+1})), leaving a standard tridiagonal
/// system for the rest; the end moments follow by the third-derivative
/// continuity M_0 = 2M_1 - M_2, M_{n-1} = 2M_{n-2} - M_{n-3}.
fn spline_moments(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    debug_assert!(n >= 4);
    // work in knot units (h = 1); the evaluation reintroduces h
    let d = |i: usize| 6.0 * (y[i - 1] - 2.0 * y[i] + y[i + 1]);
    let mut m = vec![0.0f64; n];
    m[1] = d(1) / 6.0;
    m[n - 2] = d(n - 2) / 6.0;
    if n > 4 {
        // tridiagonal solve for m[2..=n-3]:  m[i-1] + 4 m[i] + m[i+1] = d(i)
        let len = n - 4;
        let mut diag = vec![4.0f64; len];
        let mut rhs = vec![0.0f64; len];
        for (j, r) in rhs.iter_mut().enumerate() {
            let i = j + 2;
            *r = d(i);
        }
        rhs[0] -= m[1];
        rhs[len - 1] -= m[n - 2];
        for j in 1..len {
            let f = 1.0 / diag[j - 1];
            diag[j] -= f;
            rhs[j] -= f * rhs[j - 1];
        }
        for j in (0..len).rev() {
            let upper = if j + 1 < len { rhs[j + 1] } else { 0.0 };
            rhs[j] = (rhs[j] - upper) / diag[j];
        }
        for (j, v) in rhs.into_iter().enumerate() {
            m[j + 2] = v;
        }
    }
    m[0] = 2.0 * m[1] - m[2];
    m[n - 1] = 2.0 * m[n - 2] - m[n - 3];
    m
}

/// mel(f) = 2595 log10(1 + f/700)
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the 80 triangular filters spanning 0-8000 Hz.
pub fn mel_filter_centers() -> Vec<f64> {
    let top = hz_to_mel(FEATURE_SAMPLE_RATE / 2.0);
    (1..=MEL_BINS).map(|m| mel_to_hz(top * m as f64 / (MEL_BINS + 1) as f64)).collect()
}

/// Triangular filterbank, `MEL_BINS x (N_FFT/2 + 1)`, unit peak per filter.
fn mel_filterbank() -> Vec<f64> {
    let n_bins = N_FFT / 2 + 1;
    let top = hz_to_mel(FEATURE_SAMPLE_RATE / 2.0);
    let edges: Vec<f64> =
        (0..MEL_BINS + 2).map(|m| mel_to_hz(top * m as f64 / (MEL_BINS + 1) as f64)).collect();
    let mut fb = vec![0.0f64; MEL_BINS * n_bins];
    for m in 0..MEL_BINS {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * FEATURE_SAMPLE_RATE / N_FFT as f64;
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            fb[m * n_bins + k] = w;
        }
    }
    fb
}

/// Linear Mel energies (pre-log, pre-floor), `frames x MEL_BINS`.
///
/// STFT with a periodic 25 ms Hann window, 10 ms hop, 512-point FFT, power
/// spectrum, then the triangular filterbank. No centering: frame `t` covers
/// samples `[t*HOP, t*HOP + WINDOW)`.
pub fn mel_filter_energies(w: &Waveform) -> Result<Vec<f64>, FeaturesError> {
    if (w.sample_rate - FEATURE_SAMPLE_RATE).abs() > 1e-9 {
        return Err(FeaturesError::WrongSampleRate { got: w.sample_rate });
    }
    let n = w.samples.len();
    let frames = if n < WINDOW { 0 } else { (n - WINDOW) / HOP + 1 };
    let n_bins = N_FFT / 2 + 1;
    let fb = mel_filterbank();
    let window: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 - 0.5 * (2.0 * core::f64::consts::PI * i as f64 / WINDOW as f64).cos())
        .collect();
    let mut energies = vec![0.0f64; frames * MEL_BINS];
    let mut frame_buf = vec![0.0f64; WINDOW];
    for t in 0..frames {
        for (i, dst) in frame_buf.iter_mut().enumerate() {
            *dst = w.samples[t * HOP + i] * window[i];
        }
        let spec = rfft(&frame_buf, N_FFT);
        let power: Vec<f64> = spec.iter().take(n_bins).map(|c| c.norm_sqr()).collect();
        for m in 0..MEL_BINS {
            let mut acc = 0.0;
            for (k, &p) in power.iter().enumerate() {
                acc += fb[m * n_bins + k] * p;
            }
            energies[t * MEL_BINS + m] = acc;
        }
    }
    Ok(energies)
}

/// 80-bin log-Mel spectrogram (natural log, floor 1e-10).
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram, FeaturesError> {
    let mut data = mel_filter_energies(w)?;
    for v in &mut data {
        *v = v.max(LOG_FLOOR).ln();
    }
    Ok(MelSpectrogram {
        frames: data.len() / MEL_BINS,
        data,
        source_sample_rate: w.sample_rate,
    })
}

/// Elementwise convex combination of two log-Mel spectrograms:
/// `beta_radio * m_radio + (1 - beta_radio) * m_bg`.
pub fn augment_mix(
    m_radio: &MelSpectrogram,
    m_bg: &MelSpectrogram,
    beta_radio: f64,
) -> Result<MelSpectrogram, FeaturesError> {
    if m_radio.frames != m_bg.frames || m_radio.data.len() != m_bg.data.len() {
        return Err(FeaturesError::ShapeMismatch);
    }
    debug_assert!((0.0..=1.0).contains(&beta_radio));
    let beta_bg = 1.0 - beta_radio;
    let data = m_radio
        .data
        .iter()
        .zip(m_bg.data.iter())
        .map(|(&r, &b)| beta_radio * r + beta_bg * b)
        .collect();
    Ok(MelSpectrogram { frames: m_radio.frames, data, source_sample_rate: m_radio.source_sample_rate })
}

/// Training-path mixing coefficient, uniform in [0.2, 0.6].
pub fn draw_beta_radio(rng: &mut Rng) -> f64 {
    rng.uniform_in(0.2, 0.6)
}
