//! Sensor noise and SOC-dependent low-frequency fluctuation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::BridgeConfig;
use crate::error::{Error, Result};
use crate::signature::{Signature, C, T};

/// The two additive terms of one noise draw.
#[derive(Debug, Clone)]
pub struct NoiseComponents {
    pub sensor: Array2<f64>,
    pub fluctuation: Array2<f64>,
}

/// `|soc - 50| / 50`; NaN counts as 50.
pub fn soc_factor(soc: f64) -> f64 {
    if soc.is_nan() {
        0.0
    } else {
        (soc - 50.0).abs() / 50.0
    }
}

/// Returns `sig` plus sensor noise and SOC fluctuation.
pub fn apply_noise<R: Rng + ?Sized>(
    sig: &Signature,
    soc: f64,
    anchor_sigma: &Array2<f64>,
    config: &BridgeConfig,
    rng: &mut R,
) -> Result<Signature> {
    let parts = draw_noise(sig, soc, anchor_sigma, config, rng)?;
    Signature::new(&sig.values() + &parts.sensor + &parts.fluctuation)
}

/// Draws both noise terms without adding them. Consumes the stream in a fixed
/// order: the 600 sensor draws (row-major), then one smoothed sequence per
/// channel.
pub fn draw_noise<R: Rng + ?Sized>(
    sig: &Signature,
    soc: f64,
    anchor_sigma: &Array2<f64>,
    config: &BridgeConfig,
    rng: &mut R,
) -> Result<NoiseComponents> {
    if anchor_sigma.dim() != (T, C) {
        return Err(Error::InvalidInput(format!(
            "anchor sigma has shape {:?}, expected ({T}, {C})",
            anchor_sigma.dim()
        )));
    }
    if soc.is_infinite() {
        return Err(Error::InvalidInput("soc must be finite or NaN".to_string()));
    }
    let mut sensor = Array2::<f64>::zeros((T, C));
    let scale: Vec<f64> = (0..C)
        .map(|c| config.sensor_noise_frac * anchor_sigma.column(c).mean().unwrap_or(0.0))
        .collect();
    for t in 0..T {
        for c in 0..C {
            let e: f64 = rng.sample(StandardNormal);
            sensor[[t, c]] = scale[c] * e;
        }
    }

    let factor = soc_factor(soc);
    let ranges = sig.channel_ranges();
    let mut fluctuation = Array2::<f64>::zeros((T, C));
    for c in 0..C {
        let smooth = smoothed_sequence(config.boxcar_window, rng);
        let amp = config.soc_fluct_frac * ranges[c] * factor;
        fluctuation.column_mut(c).assign(&(smooth * amp));
    }
    Ok(NoiseComponents {
        sensor,
        fluctuation,
    })
}

/// `T` values of a moving average (width `window`) over white Gaussian noise,
/// scaled to unit peak magnitude. The average only uses complete windows, so
/// `T + window - 1` draws are taken.
pub fn smoothed_sequence<R: Rng + ?Sized>(window: usize, rng: &mut R) -> Array1<f64> {
    let window = window.max(1);
    let raw: Vec<f64> = (0..T + window - 1)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut out: Array1<f64> = raw
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out /= peak;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ramp() -> Signature {
        Signature::new(Array2::from_shape_fn((T, C), |(t, c)| {
            (t as f64 * 0.37 + c as f64).sin() * 10.0 - c as f64
        }))
        .unwrap()
    }

    #[test]
    fn mid_charge_has_no_fluctuation() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sigma = Array2::from_elem((T, C), 2.0);
        let parts = draw_noise(&ramp(), 50.0, &sigma, &BridgeConfig::default(), &mut rng).unwrap();
        assert!(parts.fluctuation.iter().all(|&v| v == 0.0));
        let parts = draw_noise(
            &ramp(),
            f64::NAN,
            &sigma,
            &BridgeConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(parts.fluctuation.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fluctuation_scale_at_low_charge() {
        assert!((soc_factor(5.0) - 0.9).abs() < 1e-15);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sig = ramp();
        let sigma = Array2::from_elem((T, C), 1.0);
        let parts = draw_noise(&sig, 5.0, &sigma, &BridgeConfig::default(), &mut rng).unwrap();
        let ranges = sig.channel_ranges();
        for c in 0..C {
            let peak = parts
                .fluctuation
                .column(c)
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.9 * 0.04 * ranges[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_passes_through() {
        let config = BridgeConfig {
            sensor_noise_frac: 0.0,
            ..BridgeConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sigma = Array2::from_elem((T, C), 5.0);
        let out = apply_noise(&ramp(), 50.0, &sigma, &config, &mut rng).unwrap();
        assert_eq!(out, ramp());
    }

    #[test]
    fn deterministic_given_stream() {
        let sigma = Array2::from_elem((T, C), 5.0);
        let run = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            apply_noise(&ramp(), 20.0, &sigma, &BridgeConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn sensor_noise_std_matches_anchor_sigma() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let sigma = Array2::from_shape_fn((T, C), |(t, c)| 1.0 + c as f64 + 0.01 * t as f64);
        let sig = ramp();
        let config = BridgeConfig::default();
        let mut sum = [0.0; C];
        let mut sq = [0.0; C];
        let n = 10_000;
        for _ in 0..n {
            let mut replay = rng.clone();
            let out = apply_noise(&sig, 12.0, &sigma, &config, &mut rng).unwrap();
            let parts = draw_noise(&sig, 12.0, &sigma, &config, &mut replay).unwrap();
            let residual = &out.values() - &sig.values() - &parts.fluctuation;
            for c in 0..C {
                for v in residual.column(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let m = (n * T) as f64;
        for c in 0..C {
            let mean = sum[c] / m;
            let std = (sq[c] / m - mean * mean).sqrt();
            let expected = 0.05 * sigma.column(c).mean().unwrap();
            assert!(
                (std / expected - 1.0).abs() < 0.05,
                "channel {c}: {std} vs {expected}"
            );
        }
    }

    #[test]
    fn smoothed_sequence_is_low_pass() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut high = 0.0;
        let mut total = 0.0;
        for _ in 0..200 {
            let x = smoothed_sequence(9, &mut rng);
            for k in 1..=T / 2 {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let ang = 2.0 * std::f64::consts::PI * (k * t) as f64 / T as f64;
                    re += v * ang.cos();
                    im -= v * ang.sin();
                }
                let p = re * re + im * im;
                total += p;
                if k > 20 {
                    high += p;
                }
            }
        }
        assert!(
            high / total < 0.2,
            "high-frequency fraction {}",
            high / total
        );
    }
}
