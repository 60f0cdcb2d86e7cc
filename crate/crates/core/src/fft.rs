//! In-place radix-2 complex FFT for power-of-two lengths.
//!
//! All spectral work in this crate (range FFT, STFT) zero-pads to the next
//! power of two, so a radix-2 kernel is all that is needed.

use alloc::vec::Vec;

use num_complex::Complex64;
#[cfg(not(test))]
use num_traits::Float;

/// Smallest power of two >= `n` (and >= 1).
pub fn next_pow2(n: usize) -> usize {
    let mut p = 1usize;
    while p < n {
        p <<= 1;
    }
    p
}

/// Forward DFT, in place. `data.len()` must be a power of two.
pub fn fft(data: &mut [Complex64]) {
    let n = data.len();
    assert!(n.is_power_of_two(), "fft length must be a power of two");
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            data.swap(i, j);
        }
    }
    let mut len = 2usize;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let wlen = Complex64::new(ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut w = Complex64::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = data[i + k];
                let v = data[i + k + len / 2] * w;
                data[i + k] = u + v;
                data[i + k + len / 2] = u - v;
                w *= wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Forward DFT of a real signal, zero-padded to `n_fft` (power of two).
pub fn rfft(signal: &[f64], n_fft: usize) -> Vec<Complex64> {
    let mut buf = Vec::with_capacity(n_fft);
    for &s in signal.iter().take(n_fft) {
        buf.push(Complex64::new(s, 0.0));
    }
    buf.resize(n_fft, Complex64::new(0.0, 0.0));
    fft(&mut buf);
    buf
}
