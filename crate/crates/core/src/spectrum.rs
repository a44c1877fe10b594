//! Discrete Fourier power spectra.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// `|Σ_t x_t e^{-2πi f t/T}|²` for every bin `f` in `0..T`.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    complex_spectrum(&mut planner, x)
        .iter()
        .map(Complex64::norm_sqr)
        .collect()
}

/// Unnormalized forward DFT of a real sequence.
pub(crate) fn complex_spectrum(planner: &mut FftPlanner<f64>, x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        planner.plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Spectral flatness of one real sequence: geometric over arithmetic mean
/// of the power spectrum, each bin offset by `eps`.
pub fn flatness(power: &[f64], eps: f64) -> f64 {
    let n = power.len() as f64;
    let log_mean = power.iter().map(|p| (p + eps).ln()).sum::<f64>() / n;
    let mean = power.iter().sum::<f64>() / n;
    log_mean.exp() / (mean + eps)
}
