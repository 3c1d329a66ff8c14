//! Source calibration by spectral ratio, plus the conditioning chain applied
//! to measured traces before the ratio is formed.
//!
//! The hardware chain is treated as LTI, so for a Tx-Rx path with transfer
//! function `H(f)` both recordings share `H` and it cancels:
//! `S_hw(f) = S_diff(f) · R_hw(f) / R_sim(f)`, where `S_diff = j2πf · S_sim`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::forward::SourcePulse;

/// Default calibration passband, Hz.
pub const DEFAULT_BAND: (f64, f64) = (100e3, 700e3);

/// Floor for the spectral division, relative to `max |R_sim|`.
pub const REGULARISATION_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f64>,
    /// Sampling rate, Hz.
    pub fs: f64,
}

impl Trace {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::InvalidArgument(format!("sampling rate must be positive, got {fs}")));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("trace contains non-finite samples".into()));
        }
        Ok(Self { samples, fs })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * alpha).collect(), fs: self.fs }
    }

    /// Zero-pads or truncates to `n` samples.
    pub fn fit_length(&self, n: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(n, 0.0);
        Self { samples, fs: self.fs }
    }
}

/// Complex bins of a length-`N` transform, spaced `fs / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: Vec<Complex64>,
    pub fs: f64,
}

impl Spectrum {
    pub fn of(trace: &Trace) -> Self {
        Self { bins: dft(&trace.samples), fs: trace.fs }
    }

    /// Signed frequency of bin `k` (negative above Nyquist).
    pub fn frequency(&self, k: usize) -> f64 {
        bin_frequency(k, self.bins.len(), self.fs)
    }

    pub fn to_trace(&self) -> Trace {
        Trace { samples: idft(&self.bins).into_iter().map(|z| z.re).collect(), fs: self.fs }
    }
}

fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    let k = k as f64;
    let n_f = n as f64;
    if k <= n_f / 2.0 {
        k * fs / n_f
    } else {
        (k - n_f) * fs / n_f
    }
}

/// Forward transform `X[k] = Σ x[n] e^{-2πikn/N}`.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Inverse transform including the `1/N` factor.
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
        let inv = 1.0 / buf.len() as f64;
        buf.iter_mut().for_each(|z| *z *= inv);
    }
    buf
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub zero_prefix: usize,
    pub window: usize,
    pub shift: usize,
}

impl Default for GateParams {
    fn default() -> Self {
        Self { zero_prefix: 400, window: 10, shift: 5 }
    }
}

/// Zeroes the leading samples, applies a centred moving average (window
/// truncated at the ends) and advances the trace by `shift` samples.
pub fn gate_and_smooth(trace: &Trace, params: GateParams) -> Result<Trace> {
    let n = trace.len();
    if params.window == 0 {
        return Err(Error::InvalidArgument("moving-average window must be >= 1".into()));
    }
    if n <= params.zero_prefix + params.window {
        return Err(Error::InvalidArgument(format!(
            "trace of {n} samples is too short for a {}-sample gate and {}-sample window",
            params.zero_prefix, params.window
        )));
    }
    let mut gated = trace.samples.clone();
    gated[..params.zero_prefix].iter_mut().for_each(|v| *v = 0.0);

    // Window covers [i - w/2, i + (w - 1) - w/2].
    let back = params.window / 2;
    let fwd = params.window - 1 - back;
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(n - 1);
            gated[lo..=hi].iter().sum::<f64>() / (hi + 1 - lo) as f64
        })
        .collect();

    let mut out = vec![0.0; n];
    for i in 0..n.saturating_sub(params.shift) {
        out[i] = smoothed[i + params.shift];
    }
    Trace::new(out, trace.fs)
}

/// Linear interpolation onto a uniform grid at `fs_out` covering the same span.
pub fn resample(trace: &Trace, fs_out: f64) -> Result<Trace> {
    if !(fs_out > 0.0 && fs_out.is_finite()) {
        return Err(Error::InvalidArgument(format!("output rate must be positive, got {fs_out}")));
    }
    let n = trace.len();
    if n < 2 || fs_out == trace.fs {
        return Trace::new(trace.samples.clone(), fs_out);
    }
    let duration = (n - 1) as f64 / trace.fs;
    let n_out = (duration * fs_out + 1e-9).floor() as usize + 1;
    let samples = (0..n_out)
        .map(|j| {
            let pos = j as f64 / fs_out * trace.fs;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            trace.samples[i] * (1.0 - frac) + trace.samples[i + 1] * frac
        })
        .collect();
    Trace::new(samples, fs_out)
}

fn check_band(f_lo: f64, f_hi: f64, fs: f64) -> Result<()> {
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= fs / 2.0 * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "band ({f_lo}, {f_hi}) Hz invalid for fs = {fs} Hz"
        )));
    }
    Ok(())
}

fn in_band(f: f64, f_lo: f64, f_hi: f64) -> bool {
    let a = f.abs();
    a >= f_lo * (1.0 - 1e-12) && a <= f_hi * (1.0 + 1e-12)
}

/// Ideal frequency-domain bandpass keeping `f_lo <= |f| <= f_hi`.
pub fn bandpass(trace: &Trace, f_lo: f64, f_hi: f64) -> Result<Trace> {
    check_band(f_lo, f_hi, trace.fs)?;
    let mut spec = Spectrum::of(trace);
    for k in 0..spec.bins.len() {
        if !in_band(spec.frequency(k), f_lo, f_hi) {
            spec.bins[k] = Complex64::new(0.0, 0.0);
        }
    }
    Ok(spec.to_trace())
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub pulse: SourcePulse,
    /// Passband bins where `|R_sim|` fell below the regularisation floor.
    pub ill_conditioned_bins: usize,
}

/// Estimates the equivalent hardware source from one simulated/measured pair
/// sampled on the simulation time grid.
pub fn calibrate_source(s_sim: &SourcePulse, r_sim: &Trace, r_hw: &Trace, band: (f64, f64)) -> Result<Calibration> {
    let n = r_sim.len();
    if r_hw.len() != n || s_sim.samples.len() != n {
        return Err(Error::Shape(format!(
            "calibration needs equal lengths (s_sim {}, r_sim {n}, r_hw {})",
            s_sim.samples.len(),
            r_hw.len()
        )));
    }
    let fs = 1.0 / s_sim.dt;
    if (r_sim.fs - fs).abs() > 1e-6 * fs || (r_hw.fs - fs).abs() > 1e-6 * fs {
        return Err(Error::InvalidArgument(format!(
            "calibration needs a common rate (pulse {fs}, r_sim {}, r_hw {})",
            r_sim.fs, r_hw.fs
        )));
    }
    check_band(band.0, band.1, fs)?;
    let r_sim_f = dft(&r_sim.samples);
    let r_hw_f = dft(&r_hw.samples);
    let s_f = dft(&s_sim.samples);
    let r_max = r_sim_f.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if r_max == 0.0 {
        return Err(Error::InvalidArgument("simulated receive trace is identically zero".into()));
    }
    let floor = REGULARISATION_FLOOR * r_max;

    let mut ill_conditioned_bins = 0;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        let f = bin_frequency(k, n, fs);
        // The Nyquist bin of an even-length transform has no signed partner.
        if !in_band(f, band.0, band.1) || (n % 2 == 0 && k == n / 2) {
            continue;
        }
        let s_diff = Complex64::new(0.0, 2.0 * PI * f) * s_f[k];
        let r = r_sim_f[k];
        let ratio = if r.norm() >= floor {
            r_hw_f[k] / r
        } else {
            ill_conditioned_bins += 1;
            r_hw_f[k] * r.conj() / (r.norm_sqr() + floor * floor)
        };
        out[k] = s_diff * ratio;
    }
    let mut samples: Vec<f64> = idft(&out).into_iter().map(|z| z.re).collect();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Calibration { pulse: SourcePulse::from_samples(samples, s_sim.dt)?, ill_conditioned_bins })
}

/// Conditioning chain for a raw hardware trace: gate/smooth/shift, resample to
/// the simulation rate, fit to `n_sim` samples and bandpass.
pub fn condition_trace(raw: &Trace, gate: GateParams, fs_sim: f64, n_sim: usize, band: (f64, f64)) -> Result<Trace> {
    let gated = gate_and_smooth(raw, gate)?;
    let resampled = resample(&gated, fs_sim)?.fit_length(n_sim);
    bandpass(&resampled, band.0, band.1)
}

/// Normalised cross-correlation at zero lag.
pub fn normalized_correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn direct_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * j) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    #[test]
    fn dft_matches_direct_sum() {
        let x = random(64, 1);
        let fast = dft(&x);
        let slow = direct_dft(&x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn dft_identities() {
        let mut delta = vec![0.0; 16];
        delta[0] = 1.0;
        assert!(dft(&delta).iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));

        let x = random(200, 2);
        let spec = dft(&x);
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!((time - freq).abs() / time < 1e-10);

        let back = idft(&spec);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b.re).abs() < 1e-10 * 0.5 && b.im.abs() < 1e-12);
        }
    }

    #[test]
    fn gate_of_constant_trace() {
        let t = Trace::new(vec![1.0; 1000], 62.5e6).unwrap();
        let out = gate_and_smooth(&t, GateParams::default()).unwrap();
        assert!(out.samples[..390].iter().all(|v| *v == 0.0));
        assert!(out.samples[410..990].iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gate_identity_settings() {
        let x = random(50, 3);
        let t = Trace::new(x.clone(), 1.0).unwrap();
        let out = gate_and_smooth(&t, GateParams { zero_prefix: 0, window: 1, shift: 0 }).unwrap();
        assert_eq!(out.samples, x);
    }

    #[test]
    fn gate_of_impulse() {
        let mut x = vec![0.0; 1000];
        x[500] = 1.0;
        let out = gate_and_smooth(&Trace::new(x, 62.5e6).unwrap(), GateParams::default()).unwrap();
        // Window [i-5, i+4] spreads index 500 to 496..=505, then the shift moves it to 491..=500.
        for (i, v) in out.samples.iter().enumerate() {
            let want = if (491..=500).contains(&i) { 0.1 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "{i}: {v}");
        }
    }

    #[test]
    fn gate_rejects_short_trace() {
        let t = Trace::new(vec![0.0; 405], 1.0).unwrap();
        assert!(gate_and_smooth(&t, GateParams::default()).is_err());
    }

    #[test]
    fn resample_identity_and_hardware_rate() {
        let x = random(300, 4);
        let t = Trace::new(x.clone(), 62.5e6).unwrap();
        let same = resample(&t, 62.5e6).unwrap();
        for (a, b) in x.iter().zip(&same.samples) {
            assert!((a - b).abs() < 1e-12);
        }
        let hw = Trace::new(vec![0.0; 7000], 62.5e6).unwrap();
        let sim = resample(&hw, 1.0 / 90.243e-9).unwrap();
        assert!((sim.fs - 11.081e6).abs() < 1e3);
        // 112 µs at 11.08 MHz.
        assert_eq!(sim.len(), ((6999.0 / 62.5e6) / 90.243e-9) as usize + 1);
    }

    #[test]
    fn resampled_sinusoid_matches_analytic() {
        let f = 350e3;
        let fs_in = 62.5e6;
        let x: Vec<f64> = (0..7000).map(|i| (2.0 * PI * f * i as f64 / fs_in).sin()).collect();
        let out = resample(&Trace::new(x, fs_in).unwrap(), 1.0 / 90.243e-9).unwrap();
        let exact: Vec<f64> = (0..out.len()).map(|j| (2.0 * PI * f * j as f64 / out.fs).sin()).collect();
        let err: f64 = out.samples.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(err / norm < 1e-2, "{}", err / norm);
    }

    #[test]
    fn bandpass_full_band_is_identity() {
        let x = random(256, 5);
        let t = Trace::new(x.clone(), 1e6).unwrap();
        let out = bandpass(&t, 0.0, 0.5e6).unwrap();
        for (a, b) in x.iter().zip(&out.samples) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn bandpass_tones() {
        // 4000 samples at 10 MHz: 2.5 kHz bins, so both tones sit on bins.
        let fs = 10e6;
        let n = 4000;
        let tone = |f: f64| -> Trace {
            Trace::new((0..n).map(|i| (2.0 * PI * f * i as f64 / fs).cos()).collect(), fs).unwrap()
        };
        let pass = tone(350e3);
        let out = bandpass(&pass, 200e3, 500e3).unwrap();
        for (a, b) in pass.samples.iter().zip(&out.samples) {
            assert!((a - b).abs() < 1e-6);
        }
        let stop = tone(1e6);
        let out = bandpass(&stop, 200e3, 500e3).unwrap();
        let e_in: f64 = stop.samples.iter().map(|v| v * v).sum();
        let e_out: f64 = out.samples.iter().map(|v| v * v).sum();
        assert!(10.0 * (e_out / e_in).log10() < -60.0);
    }

    #[test]
    fn bandpass_output_is_real() {
        // The returned trace is the real part; check the discarded imaginary residue.
        let x = random(301, 6);
        let t = Trace::new(x, 1e6).unwrap();
        let mut spec = Spectrum::of(&t);
        for k in 0..spec.bins.len() {
            if !in_band(spec.frequency(k), 1e5, 3e5) {
                spec.bins[k] = Complex64::new(0.0, 0.0);
            }
        }
        let z = idft(&spec.bins);
        let peak = z.iter().fold(0.0f64, |m, v| m.max(v.re.abs()));
        assert!(z.iter().all(|v| v.im.abs() < 1e-12 * peak));
    }

    #[test]
    fn bandpass_rejects_invalid_band() {
        let t = Trace::new(vec![0.0; 10], 1e6).unwrap();
        assert!(bandpass(&t, 3e5, 2e5).is_err());
        assert!(bandpass(&t, 0.0, 6e5).is_err());
    }

    fn synthetic_receive(pulse: &[f64], delay: usize, gain: f64) -> Vec<f64> {
        // Arbitrary LTI path: delay plus a short echo.
        let mut out = vec![0.0; pulse.len()];
        for i in 0..pulse.len() {
            if i >= delay {
                out[i] += gain * pulse[i - delay];
            }
            if i >= delay + 9 {
                out[i] -= 0.3 * gain * pulse[i - delay - 9];
            }
        }
        out
    }

    #[test]
    fn identical_receives_give_differentiated_pulse() {
        let dt = 90.243e-9;
        let s = crate::forward::make_source_pulse(350e3, dt, 1034, crate::forward::PulseKind::GaussianDerivative)
            .unwrap();
        let r = Trace::new(synthetic_receive(&s.samples, 200, 0.01), 1.0 / dt).unwrap();
        let cal = calibrate_source(&s, &r, &r, DEFAULT_BAND).unwrap();
        // In-band differentiated pulse, peak-normalised.
        let mut spec = dft(&s.samples);
        let n = spec.len();
        for (k, z) in spec.iter_mut().enumerate() {
            let f = bin_frequency(k, n, 1.0 / dt);
            *z = if in_band(f, DEFAULT_BAND.0, DEFAULT_BAND.1) && k != n / 2 {
                Complex64::new(0.0, 2.0 * PI * f) * *z
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        let mut want: Vec<f64> = idft(&spec).into_iter().map(|z| z.re).collect();
        let peak = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        want.iter_mut().for_each(|v| *v /= peak);
        for (a, b) in cal.pulse.samples.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn calibration_is_amplitude_invariant() {
        let dt = 90.243e-9;
        let s = crate::forward::make_source_pulse(350e3, dt, 1034, crate::forward::PulseKind::GaussianDerivative)
            .unwrap();
        let r_sim = Trace::new(synthetic_receive(&s.samples, 200, 0.01), 1.0 / dt).unwrap();
        let r_hw = Trace::new(synthetic_receive(&s.samples, 230, 0.02), 1.0 / dt).unwrap();
        let base = calibrate_source(&s, &r_sim, &r_hw, DEFAULT_BAND).unwrap();
        let scaled_hw = calibrate_source(&s, &r_sim, &r_hw.scaled(37.5), DEFAULT_BAND).unwrap();
        let scaled_src = calibrate_source(&s.scaled(1e-3), &r_sim, &r_hw, DEFAULT_BAND).unwrap();
        for ((a, b), c) in base.pulse.samples.iter().zip(&scaled_hw.pulse.samples).zip(&scaled_src.pulse.samples) {
            assert!((a - b).abs() < 1e-9 && (a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn calibration_requires_matching_lengths() {
        let s = SourcePulse::from_samples(vec![0.0; 10], 1e-7).unwrap();
        let r = Trace::new(vec![1.0; 11], 1e7).unwrap();
        assert!(matches!(calibrate_source(&s, &r, &r, (1e5, 7e5)), Err(Error::Shape(_))));
    }

    #[test]
    fn conditioning_stages_are_linear() {
        let x = random(2000, 7);
        let t = Trace::new(x, 62.5e6).unwrap();
        let alpha = -3.25;
        let g = GateParams::default();
        let a = condition_trace(&t, g, 1.0 / 90.243e-9, 300, DEFAULT_BAND).unwrap();
        let b = condition_trace(&t.scaled(alpha), g, 1.0 / 90.243e-9, 300, DEFAULT_BAND).unwrap();
        for (u, v) in a.samples.iter().zip(&b.samples) {
            assert!((alpha * u - v).abs() < 1e-12);
        }
    }
}
