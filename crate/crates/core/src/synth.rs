//! Synthetic two-class EEG surrogate.
//!
//! Interictal channels are independent AR(1) noise. Ictal channels are a
//! fresh draw of the same noise, scaled by `gain`, plus a spike-and-wave
//! discharge at `spike_hz`. The discharge runs in bursts; each burst picks
//! a new common phase, and channel `c` lags it by `c * channel_lag_s` plus a
//! small per-burst jitter, so the phase is correlated across channels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{default_channel_order, ChannelMatrix, RawClassData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub fs: f64,
    /// Length of each class stack in seconds.
    pub duration_s: f64,
    pub spike_hz: f64,
    /// Multiplier on the ictal background noise.
    pub gain: f64,
    /// RMS of the spike-and-wave discharge, in units of `noise_std`.
    pub burst_amplitude: f64,
    pub burst_len_s: f64,
    pub channel_lag_s: f64,
    pub ar_coeff: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_channels: 18,
            fs: 256.0,
            // 1000 half-second segments per class at 25% overlap
            duration_s: 375.0,
            spike_hz: 3.0,
            gain: 2.0,
            burst_amplitude: 1.5,
            burst_len_s: 4.0,
            channel_lag_s: 0.004,
            ar_coeff: 0.9,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Both classes drawn from the same distribution.
    pub fn null(mut self) -> Self {
        self.gain = 1.0;
        self.burst_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        check(self.n_channels >= 1, "n_channels", "must be at least 1")?;
        check(
            self.fs > 0.0 && self.fs.is_finite(),
            "fs",
            "must be positive",
        )?;
        check(
            self.duration_s > 0.0 && (self.duration_s * self.fs).round() >= 1.0,
            "duration_s",
            "must cover at least one sample",
        )?;
        check(
            self.spike_hz > 0.0 && self.spike_hz < self.fs / 2.0,
            "spike_hz",
            "must lie in (0, fs/2)",
        )?;
        check(
            self.gain >= 1.0 && self.gain.is_finite(),
            "gain",
            "must be at least 1",
        )?;
        check(
            self.burst_amplitude >= 0.0 && self.burst_amplitude.is_finite(),
            "burst_amplitude",
            "must be non-negative",
        )?;
        check(self.burst_len_s > 0.0, "burst_len_s", "must be positive")?;
        check(
            self.channel_lag_s >= 0.0,
            "channel_lag_s",
            "must be non-negative",
        )?;
        check(
            (0.0..1.0).contains(&self.ar_coeff),
            "ar_coeff",
            "must lie in [0, 1)",
        )?;
        check(
            self.noise_std > 0.0 && self.noise_std.is_finite(),
            "noise_std",
            "must be positive",
        )
    }

    fn samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }
}

/// One spike-and-wave cycle at phase `p` in `[0, 1)`: a narrow positive spike
/// followed by a broad negative wave. Unit RMS over a cycle.
pub fn spike_wave(p: f64) -> f64 {
    const SCALE: f64 = 1.0 / 0.923_884_17;
    let spike = 3.0 * (-0.5 * ((p - 0.1) / 0.03).powi(2)).exp();
    let wave = if p >= 0.25 {
        -(std::f64::consts::PI * (p - 0.25) / 0.75).sin()
    } else {
        0.0
    };
    SCALE * (spike + wave)
}

fn ar1_noise(rng: &mut ChaCha8Rng, cfg: &SynthConfig, n: usize, t: usize) -> Vec<f64> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let a = cfg.ar_coeff;
    let innov = (1.0 - a * a).sqrt() * cfg.noise_std;
    let mut out = Vec::with_capacity(n * t);
    for _ in 0..n {
        let mut x = cfg.noise_std * unit.sample(rng);
        for _ in 0..t {
            out.push(x);
            x = a * x + innov * unit.sample(rng);
        }
    }
    out
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<RawClassData> {
    cfg.validate()?;
    let (n, t) = (cfg.n_channels, cfg.samples());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let interictal = ar1_noise(&mut rng, cfg, n, t);
    let mut ictal = ar1_noise(&mut rng, cfg, n, t);
    ictal.iter_mut().for_each(|v| *v *= cfg.gain);

    let channel_gain: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let burst = ((cfg.burst_len_s * cfg.fs).round() as usize).max(1);
    let jitter = Normal::new(0.0, 0.02).expect("finite std");
    let amp = cfg.burst_amplitude * cfg.noise_std;
    let mut start = 0;
    while start < t {
        let end = (start + burst).min(t);
        let phase0: f64 = rng.random();
        let freq = cfg.spike_hz * rng.random_range(0.95..1.05);
        for c in 0..n {
            let phase_c = phase0 - c as f64 * cfg.channel_lag_s * freq + jitter.sample(&mut rng);
            if amp == 0.0 {
                continue;
            }
            let row = &mut ictal[c * t..(c + 1) * t];
            for (i, v) in row[start..end].iter_mut().enumerate() {
                let p = (phase_c + freq * i as f64 / cfg.fs).rem_euclid(1.0);
                *v += amp * channel_gain[c] * spike_wave(p);
            }
        }
        start = end;
    }

    RawClassData::new(
        ChannelMatrix::new(n, t, interictal)?,
        ChannelMatrix::new(n, t, ictal)?,
        default_channel_order(n),
    )
}
