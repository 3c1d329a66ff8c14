//! Additive white Gaussian noise at a prescribed SNR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::ChannelData;

/// Mean power over every channel sample.
pub fn signal_power(cd: &ChannelData) -> f64 {
    let n = cd.traces.len().max(1) as f64;
    cd.traces.iter().map(|v| v * v).sum::<f64>() / n
}

/// Adds noise with power `P_signal / 10^(snr_db/10)`; an infinite SNR
/// returns the input unchanged.
pub fn add_noise(cd: &ChannelData, snr_db: f64, seed: u64) -> ChannelData {
    if snr_db == f64::INFINITY {
        return cd.clone();
    }
    let sigma = (signal_power(cd) / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cd.clone();
    if sigma > 0.0 && sigma.is_finite() {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        out.traces.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    out
}

/// `10 log10(P_clean / P_(noisy - clean))`.
pub fn empirical_snr_db(clean: &ChannelData, noisy: &ChannelData) -> f64 {
    let noise: f64 = clean.traces.iter().zip(noisy.traces.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
    let signal: f64 = clean.traces.iter().map(|v| v * v).sum();
    10.0 * (signal / noise).log10()
}
