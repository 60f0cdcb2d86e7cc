//! FMCW radar vibrometry simulator: synthesize intermediate-frequency (IF)
//! chirp signals from a displacement waveform and demodulate them back to
//! displacement via range FFT, I/Q clutter removal and phase unwrapping.
//!
//! Single point reflector, one range bin, stationary target; the fast-time
//! axis is centered mid-chirp so the beat term contributes a symmetric
//! (zero-phase) kernel at the selected bin and the slow-time phase tracks
//! `4*pi*f_c*R(t)/c` exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;
#[cfg(not(test))]
use num_traits::Float;

use crate::fft::{next_pow2, rfft};
use crate::rng::Rng;

/// Selected-bin mean power over mean off-bin power below this ratio marks a
/// demodulation as low-confidence.
pub const SNR_CONFIDENCE_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum RadarError {
    /// Vibration content too close to the slow-time Nyquist rate.
    NyquistViolation { detail: String },
    /// Vibration sample rate must equal the chirp rate.
    RateMismatch { vib: f64, chirps_per_second: f64 },
    /// A slow-time sample has zero magnitude, so its phase is undefined.
    ZeroMagnitudeSample { index: usize },
    /// Input has no energy after mean removal.
    ZeroEnergyInput,
    /// Fewer samples than the operation can work with.
    TooFewSamples { needed: usize, got: usize },
}

impl fmt::Display for RadarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RadarError::NyquistViolation { detail } => write!(f, "Nyquist violation: {detail}"),
            RadarError::RateMismatch { vib, chirps_per_second } => {
                write!(f, "vibration rate {vib} != chirp rate {chirps_per_second}")
            }
            RadarError::ZeroMagnitudeSample { index } => {
                write!(f, "slow-time sample {index} has zero magnitude")
            }
            RadarError::ZeroEnergyInput => write!(f, "zero-energy input"),
            RadarError::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} samples, got {got}")
            }
        }
    }
}

impl core::error::Error for RadarError {}

/// FMCW radar parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarConfig {
    /// Carrier frequency f_c, Hz.
    pub carrier_frequency: f64,
    /// Chirp slope K, Hz/s.
    pub chirp_slope: f64,
    /// Chirp duration, s.
    pub chirp_duration: f64,
    /// Fast-time samples per chirp.
    pub samples_per_chirp: usize,
    /// Chirp (slow-time sample) rate, Hz.
    pub chirps_per_second: f64,
    /// Fixed target range R0, m.
    pub fixed_range: f64,
    /// Propagation speed, m/s.
    pub speed_of_light: f64,
    /// Additive complex Gaussian receiver noise, per-component std.
    pub rx_noise_std: f64,
}

impl Default for RadarConfig {
    /// 77 GHz carrier, 180 us chirps of 256 samples at a 5.1 kHz chirp rate,
    /// 4 GHz sweep (3.75 cm range resolution), target at 0.5 m.
    fn default() -> Self {
        RadarConfig {
            carrier_frequency: 77e9,
            chirp_slope: 4e9 / 180e-6,
            chirp_duration: 180e-6,
            samples_per_chirp: 256,
            chirps_per_second: 5100.0,
            fixed_range: 0.5,
            speed_of_light: 3e8,
            rx_noise_std: 0.0,
        }
    }
}

impl RadarConfig {
    pub fn bandwidth(&self) -> f64 {
        self.chirp_slope * self.chirp_duration
    }

    /// c / (2B), m per range bin (before zero padding).
    pub fn range_resolution(&self) -> f64 {
        self.speed_of_light / (2.0 * self.bandwidth())
    }

    pub fn fast_sample_rate(&self) -> f64 {
        self.samples_per_chirp as f64 / self.chirp_duration
    }
}

/// A displacement waveform in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct VibrationSignal {
    pub sample_rate: f64,
    pub displacement: Vec<f64>,
}

/// Complex IF samples, `chirps x samples_per_chirp`, row-major.
#[derive(Debug, Clone)]
pub struct IqChirpSet {
    pub chirps: usize,
    pub samples_per_chirp: usize,
    pub data: Vec<Complex64>,
}

impl IqChirpSet {
    pub fn chirp(&self, n: usize) -> &[Complex64] {
        &self.data[n * self.samples_per_chirp..(n + 1) * self.samples_per_chirp]
    }
}

/// Complex slow-time sequence at one range bin.
#[derive(Debug, Clone)]
pub struct SlowTimeSignal {
    pub samples: Vec<Complex64>,
    pub bin_index: usize,
    /// Selected-bin mean power over mean power elsewhere.
    pub snr_estimate: f64,
    /// Set when `snr_estimate` falls below [`SNR_CONFIDENCE_THRESHOLD`].
    pub low_confidence: bool,
}

/// Clutter removal output: centered signal plus the fitted circle center.
#[derive(Debug, Clone)]
pub struct ClutterRemoval {
    pub signal: SlowTimeSignal,
    pub center: Complex64,
    /// The circle fit was degenerate (colinear points); the output is the
    /// mean-subtracted signal instead.
    pub degenerate: bool,
}

/// Synthesize IF chirps for a vibration waveform.
///
/// Per chirp `n` with round-trip delay `t_d = 2(R0 + x[n])/c`, the IF sample
/// at centered fast time `t` is `A*exp(j*2*pi*K*t_d*t + j*2*pi*f_c*t_d)`,
/// plus complex Gaussian noise of `cfg.rx_noise_std` per component.
/// Deterministic for a given `noise_seed`.
pub fn synthesize_if(
    cfg: &RadarConfig,
    vib: &VibrationSignal,
    amplitude: f64,
    noise_seed: u64,
) -> Result<IqChirpSet, RadarError> {
    if (vib.sample_rate - cfg.chirps_per_second).abs()
        > 1e-9 * cfg.chirps_per_second.max(vib.sample_rate)
    {
        return Err(RadarError::RateMismatch {
            vib: vib.sample_rate,
            chirps_per_second: cfg.chirps_per_second,
        });
    }
    check_nyquist(&vib.displacement, vib.sample_rate)?;

    let m = cfg.samples_per_chirp;
    let ts = cfg.chirp_duration / m as f64;
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut rng = Rng::new(noise_seed);
    let mut data = Vec::with_capacity(vib.displacement.len() * m);
    for &x in &vib.displacement {
        let t_d = 2.0 * (cfg.fixed_range + x) / cfg.speed_of_light;
        let carrier_phase = two_pi * cfg.carrier_frequency * t_d;
        let beat = two_pi * cfg.chirp_slope * t_d;
        for s in 0..m {
            let t = (s as f64 - (m as f64 - 1.0) / 2.0) * ts;
            let phase = beat * t + carrier_phase;
            let mut v = Complex64::new(phase.cos(), phase.sin()) * amplitude;
            if cfg.rx_noise_std > 0.0 {
                v += Complex64::new(
                    rng.normal() * cfg.rx_noise_std,
                    rng.normal() * cfg.rx_noise_std,
                );
            }
            data.push(v);
        }
    }
    Ok(IqChirpSet { chirps: vib.displacement.len(), samples_per_chirp: m, data })
}

/// Reject vibration content within the top 10% of the slow-time band.
///
/// The fraction of Hann-windowed spectral energy above `0.45 * sample_rate`
/// must stay below 1e-6; the window keeps leakage from band-limited content
/// far under that threshold.
fn check_nyquist(displacement: &[f64], sample_rate: f64) -> Result<(), RadarError> {
    let n = displacement.len();
    if n < 4 {
        return Ok(());
    }
    let windowed: Vec<f64> = displacement
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5
                - 0.5 * (2.0 * core::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos();
            v * w
        })
        .collect();
    let n_fft = next_pow2(n);
    let spec = rfft(&windowed, n_fft);
    let mut total = 0.0;
    let mut high = 0.0;
    let cutoff_bin = ((0.45 * n_fft as f64) as usize).min(n_fft / 2);
    for (k, v) in spec.iter().enumerate().take(n_fft / 2 + 1) {
        let p = v.norm_sqr();
        total += p;
        if k >= cutoff_bin {
            high += p;
        }
    }
    if total > 0.0 && high / total > 1e-6 {
        return Err(RadarError::NyquistViolation {
            detail: format!(
                "{:.3e} of vibration energy above {:.0} Hz",
                high / total,
                0.45 * sample_rate
            ),
        });
    }
    Ok(())
}

/// Range FFT per chirp (zero-padded to the next power of two, rectangular
/// window) and slow-time extraction at the bin with the largest mean
/// magnitude across chirps.
pub fn range_select(iq: &IqChirpSet, _cfg: &RadarConfig) -> SlowTimeSignal {
    let m = iq.samples_per_chirp;
    debug_assert!(m >= 2);
    let n_fft = next_pow2(m);
    let mut spectra: Vec<Vec<Complex64>> = Vec::with_capacity(iq.chirps);
    for n in 0..iq.chirps {
        let mut buf: Vec<Complex64> = iq.chirp(n).to_vec();
        buf.resize(n_fft, Complex64::new(0.0, 0.0));
        crate::fft::fft(&mut buf);
        spectra.push(buf);
    }
    // positive-frequency bins only; the beat frequency of a real target is
    // positive by construction
    let half = n_fft / 2;
    let mut mean_mag = vec![0.0f64; half.max(1)];
    for spec in &spectra {
        for (k, acc) in mean_mag.iter_mut().enumerate() {
            *acc += spec[k].norm();
        }
    }
    let mut bin_index = 0;
    for k in 1..mean_mag.len() {
        if mean_mag[k] > mean_mag[bin_index] {
            bin_index = k;
        }
    }

    let samples: Vec<Complex64> = spectra.iter().map(|s| s[bin_index]).collect();
    let bin_power: f64 =
        samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / samples.len().max(1) as f64;
    let mut rest_power = 0.0;
    let mut rest_count = 0usize;
    for spec in &spectra {
        for (k, v) in spec.iter().enumerate().take(half) {
            if k != bin_index {
                rest_power += v.norm_sqr();
                rest_count += 1;
            }
        }
    }
    let snr_estimate = if rest_count == 0 || rest_power == 0.0 {
        f64::INFINITY
    } else {
        bin_power / (rest_power / rest_count as f64)
    };
    SlowTimeSignal {
        samples,
        bin_index,
        snr_estimate,
        low_confidence: snr_estimate < SNR_CONFIDENCE_THRESHOLD,
    }
}

/// Remove static clutter by fitting a circle to the I/Q points (algebraic
/// Kasa least squares) and translating its center to the origin.
///
/// Colinear points (pivot below 1e-12 of the system scale) degrade to mean
/// subtraction with `degenerate` set.
pub fn remove_clutter(s: &SlowTimeSignal) -> Result<ClutterRemoval, RadarError> {
    let n = s.samples.len();
    if n < 8 {
        return Err(RadarError::TooFewSamples { needed: 8, got: n });
    }
    let center = match (!colinear(&s.samples)).then(|| kasa_center(&s.samples)).flatten() {
        Some(c) => c,
        None => {
            let mean = s.samples.iter().sum::<Complex64>() / n as f64;
            let signal = SlowTimeSignal {
                samples: s.samples.iter().map(|v| v - mean).collect(),
                ..s.clone()
            };
            return Ok(ClutterRemoval { signal, center: mean, degenerate: true });
        }
    };
    let signal = SlowTimeSignal {
        samples: s.samples.iter().map(|v| v - center).collect(),
        ..s.clone()
    };
    Ok(ClutterRemoval { signal, center, degenerate: false })
}

/// Points are colinear when the smaller eigenvalue of their 2x2 covariance
/// falls below 1e-12 of the larger (or the spread is zero outright).
fn colinear(points: &[Complex64]) -> bool {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.re).sum::<f64>() / n;
    let my = points.iter().map(|p| p.im).sum::<f64>() / n;
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.re - mx, p.im - my);
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    let tr = cxx + cyy;
    let disc = ((cxx - cyy) * (cxx - cyy) + 4.0 * cxy * cxy).sqrt();
    let lmax = (tr + disc) / 2.0;
    let lmin = (tr - disc) / 2.0;
    lmax <= 0.0 || lmin <= 1e-12 * lmax
}

/// Kasa fit: minimize sum of (x^2 + y^2 + D x + E y + F)^2 over (D, E, F);
/// the center is (-D/2, -E/2). Returns None when the normal equations are
/// singular.
fn kasa_center(points: &[Complex64]) -> Option<Complex64> {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
    for p in points {
        let (x, y) = (p.re, p.im);
        let z = x * x + y * y;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
        sxz += x * z;
        syz += y * z;
        sz += z;
    }
    // normal equations for [D, E, F]
    let a = [[sxx, sxy, sx], [sxy, syy, sy], [sx, sy, n]];
    let b = [-sxz, -syz, -sz];
    let sol = solve3(a, b)?;
    Some(Complex64::new(-sol[0] / 2.0, -sol[1] / 2.0))
}

/// Gaussian elimination with partial pivoting; None only on an outright
/// zero pivot (colinearity is screened geometrically before solving).
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-300);
    for col in 0..3 {
        let mut pivot = col;
        for r in col + 1..3 {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        if a[pivot][col].abs() < 1e-30 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..3).rev() {
        let mut acc = b[col];
        for c in col + 1..3 {
            acc -= a[col][c] * x[c];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Per-chirp phase, unwrapped and scaled by `c / (4*pi*f_c)`, mean removed
/// (the R0 offset and any global phase rotation land in the mean).
pub fn extract_displacement(
    s: &SlowTimeSignal,
    cfg: &RadarConfig,
) -> Result<VibrationSignal, RadarError> {
    let mut phase = Vec::with_capacity(s.samples.len());
    for (i, v) in s.samples.iter().enumerate() {
        if v.norm_sqr() == 0.0 {
            return Err(RadarError::ZeroMagnitudeSample { index: i });
        }
        phase.push(v.im.atan2(v.re));
    }
    let unwrapped = unwrap_phase(&phase);
    let scale = cfg.speed_of_light / (4.0 * core::f64::consts::PI * cfg.carrier_frequency);
    let mut displacement: Vec<f64> = unwrapped.iter().map(|&p| p * scale).collect();
    let mean = displacement.iter().sum::<f64>() / displacement.len().max(1) as f64;
    for d in &mut displacement {
        *d -= mean;
    }
    Ok(VibrationSignal { sample_rate: cfg.chirps_per_second, displacement })
}

/// Add +-2*pi whenever a successive difference exceeds pi in magnitude.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut out: Vec<f64> = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i == 0 {
            out.push(p);
            continue;
        }
        let mut d = p + offset - out[i - 1];
        while d > core::f64::consts::PI {
            offset -= two_pi;
            d -= two_pi;
        }
        while d < -core::f64::consts::PI {
            offset += two_pi;
            d += two_pi;
        }
        out.push(p + offset);
    }
    out
}

/// Full demodulation chain: range select, clutter removal, phase extraction.
pub fn demodulate(
    iq: &IqChirpSet,
    cfg: &RadarConfig,
) -> Result<(VibrationSignal, ClutterRemoval), RadarError> {
    let slow = range_select(iq, cfg);
    let removed = remove_clutter(&slow)?;
    let vib = extract_displacement(&removed.signal, cfg)?;
    Ok((vib, removed))
}

/// Lag of the maximum normalized cross-correlation plus the coefficient at
/// that lag. Both inputs are mean-removed and energy-normalized internally;
/// ties break toward smaller |lag| (positive sign first).
pub fn cross_correlation(a: &[f64], b: &[f64]) -> Result<(i64, f64), RadarError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(RadarError::TooFewSamples { needed: 1, got: a.len().min(b.len()) });
    }
    let n = a.len();
    let center = |xs: &[f64]| -> Vec<f64> {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|&v| v - mean).collect()
    };
    let ac = center(a);
    let bc = center(b);
    let ea: f64 = ac.iter().map(|v| v * v).sum();
    let eb: f64 = bc.iter().map(|v| v * v).sum();
    if ea == 0.0 || eb == 0.0 {
        return Err(RadarError::ZeroEnergyInput);
    }
    let norm = (ea * eb).sqrt();

    let corr_at = |lag: i64| -> f64 {
        let mut s = 0.0;
        for i in 0..n as i64 {
            let j = i + lag;
            if j >= 0 && (j as usize) < n {
                s += ac[i as usize] * bc[j as usize];
            }
        }
        s / norm
    };

    let mut best_lag = 0i64;
    let mut best = corr_at(0);
    for mag in 1..n as i64 {
        for lag in [mag, -mag] {
            let c = corr_at(lag);
            if c > best {
                best = c;
                best_lag = lag;
            }
        }
    }
    Ok((best_lag, best))
}

/// Lag of the cross-correlation peak (see [`cross_correlation`]).
pub fn cross_correlation_peak(a: &[f64], b: &[f64]) -> Result<i64, RadarError> {
    cross_correlation(a, b).map(|(lag, _)| lag)
}
