//! Morphology bank: per-anchor raw scans, their statistics, and voltage
//! interpolation between anchors.
//!
//! # Bank file layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | type | content |
//! |---|---|---|
//! | 0 | 8 bytes | magic `MSBANK01` |
//! | 8 | u32 | number of anchors `A` |
//! | 12 | u32 | flags; bit 0 set when stored statistics follow the samples |
//! | 16 | `A` x (f64, u32) | anchor voltage and sample count, in order |
//! | ... | f64 x 600 per sample | samples, timestep-major, anchors in header order |
//! | ... | f64 x 1200 per anchor | optional stored mean then std (ignored on read) |
//!
//! The file must end exactly after the last block.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::config::derive_sample_seed;
use crate::error::{Error, Result};
use crate::signature::{Signature, C, T};

pub const BANK_MAGIC: &[u8; 8] = b"MSBANK01";
pub const DEFAULT_ANCHORS: [f64; 5] = [2.54, 2.81, 3.00, 3.10, 3.34];
pub const DEFAULT_SCANS_PER_ANCHOR: usize = 41;

const FLAG_STORED_STATS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMode {
    /// Interpolated mean, no sampling.
    Replica,
    /// Interpolated mean plus interpolated std times standard normal draws.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphologyBank {
    anchors: Vec<f64>,
    samples: Vec<Vec<Signature>>,
    mu: Vec<Array2<f64>>,
    sigma: Vec<Array2<f64>>,
}

impl MorphologyBank {
    /// Builds a bank from raw per-anchor samples. Statistics are always
    /// recomputed here.
    pub fn from_samples(anchors: Vec<f64>, samples: Vec<Vec<Signature>>) -> Result<Self> {
        if anchors.is_empty() || anchors.len() != samples.len() {
            return Err(Error::InvalidInput(
                "bank needs one sample list per anchor".to_string(),
            ));
        }
        for pair in anchors.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::InvalidInput(format!(
                    "duplicate anchor voltage {}",
                    pair[0]
                )));
            }
            if pair[0] > pair[1] {
                return Err(Error::InvalidInput(
                    "anchor voltages must be strictly increasing".to_string(),
                ));
            }
        }
        if anchors.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("non-finite anchor voltage".to_string()));
        }
        let mut mu = Vec::with_capacity(anchors.len());
        let mut sigma = Vec::with_capacity(anchors.len());
        for (a, scans) in anchors.iter().zip(&samples) {
            if scans.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "anchor {a} V has {} sample(s); at least 2 are required",
                    scans.len()
                )));
            }
            let (m, s) = mean_and_population_std(scans);
            mu.push(m);
            sigma.push(s);
        }
        Ok(Self {
            anchors,
            samples,
            mu,
            sigma,
        })
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn samples(&self, anchor_idx: usize) -> &[Signature] {
        &self.samples[anchor_idx]
    }

    /// All samples with their anchor index, anchors in order.
    pub fn labelled_samples(&self) -> impl Iterator<Item = (usize, &Signature)> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(a, scans)| scans.iter().map(move |s| (a, s)))
    }

    pub fn len(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self, anchor_idx: usize) -> &Array2<f64> {
        &self.mu[anchor_idx]
    }

    pub fn std(&self, anchor_idx: usize) -> &Array2<f64> {
        &self.sigma[anchor_idx]
    }

    pub fn anchor_index(&self, v: f64) -> Option<usize> {
        self.anchors.iter().position(|&a| a == v)
    }

    /// Anchor minimizing `|v - a|`; exact ties go to the lower anchor.
    pub fn nearest_anchor_index(&self, v: f64) -> usize {
        let mut best = 0;
        for (i, &a) in self.anchors.iter().enumerate().skip(1) {
            if (v - a).abs() < (v - self.anchors[best]).abs() {
                best = i;
            }
        }
        best
    }

    /// Bank-wide per-channel `(min, max)` over every raw sample.
    pub fn channel_bounds(&self) -> [(f64, f64); C] {
        let mut out = [(f64::INFINITY, f64::NEG_INFINITY); C];
        for (_, sig) in self.labelled_samples() {
            for (c, bound) in out.iter_mut().enumerate() {
                for &x in sig.channel(c) {
                    bound.0 = bound.0.min(x);
                    bound.1 = bound.1.max(x);
                }
            }
        }
        out
    }

    /// Bracketing anchors and interpolation weight for `v`. An exact anchor
    /// returns `(i, i, 0.0)`.
    pub fn bracket(&self, v: f64) -> Result<(usize, usize, f64)> {
        let lo = self.anchors[0];
        let hi = *self.anchors.last().expect("non-empty");
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::VoltageRejected {
                voltage: v,
                min: lo,
                max: hi,
            });
        }
        if let Some(i) = self.anchor_index(v) {
            return Ok((i, i, 0.0));
        }
        let h = self
            .anchors
            .iter()
            .position(|&a| a > v)
            .expect("v inside hull");
        let l = h - 1;
        let alpha = (v - self.anchors[l]) / (self.anchors[h] - self.anchors[l]);
        Ok((l, h, alpha))
    }

    /// Interpolated mean and std at `v`.
    pub fn interpolated_stats(&self, v: f64) -> Result<(Array2<f64>, Array2<f64>)> {
        let (l, h, alpha) = self.bracket(v)?;
        if l == h {
            return Ok((self.mu[l].clone(), self.sigma[l].clone()));
        }
        let mu = &self.mu[l] * (1.0 - alpha) + &self.mu[h] * alpha;
        let var =
            self.sigma[l].mapv(|s| s * s) * (1.0 - alpha) + self.sigma[h].mapv(|s| s * s) * alpha;
        Ok((mu, var.mapv(f64::sqrt)))
    }

    /// Base sample at `v`: the interpolated mean, plus (stochastic mode)
    /// the interpolated std times one standard normal draw per entry.
    pub fn base_morphology<R: Rng + ?Sized>(
        &self,
        v: f64,
        mode: BaseMode,
        rng: &mut R,
    ) -> Result<Signature> {
        let (mut mu, sigma) = self.interpolated_stats(v)?;
        if mode == BaseMode::Stochastic {
            // Row-major draw order so the stream layout matches the byte layout.
            for (m, s) in mu.iter_mut().zip(sigma.iter()) {
                let eps: f64 = rng.sample(StandardNormal);
                *m += s * eps;
            }
        }
        Signature::new(mu)
    }

    pub fn to_bytes(&self, include_stats: bool) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.anchors.len() as u32).to_le_bytes());
        let flags = if include_stats { FLAG_STORED_STATS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for (a, scans) in self.anchors.iter().zip(&self.samples) {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&(scans.len() as u32).to_le_bytes());
        }
        for scans in &self.samples {
            for s in scans {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        if include_stats {
            for (m, s) in self.mu.iter().zip(&self.sigma) {
                for v in m.iter().chain(s.iter()) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, include_stats: bool) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes(include_stats))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = crate::io::ByteCursor::new(bytes, path);
        if cur.take(8)? != BANK_MAGIC {
            return Err(Error::malformed(path, "bad magic"));
        }
        let n_anchors = cur.u32()? as usize;
        let flags = cur.u32()?;
        if n_anchors == 0 {
            return Err(Error::malformed(path, "bank has no anchors"));
        }
        let mut anchors = Vec::with_capacity(n_anchors);
        let mut counts = Vec::with_capacity(n_anchors);
        for _ in 0..n_anchors {
            anchors.push(cur.f64()?);
            counts.push(cur.u32()? as usize);
        }
        let mut samples = Vec::with_capacity(n_anchors);
        for &count in &counts {
            let mut scans = Vec::with_capacity(count);
            for _ in 0..count {
                let sig = Signature::from_le_bytes(cur.take(T * C * 8)?)
                    .map_err(|e| Error::malformed(path, e.to_string()))?;
                scans.push(sig);
            }
            samples.push(scans);
        }
        if flags & FLAG_STORED_STATS != 0 {
            // Stored statistics are only checked for presence; the bank's
            // statistics always come from the raw samples.
            cur.take(n_anchors * 2 * T * C * 8)?;
        }
        if !cur.is_at_end() {
            return Err(Error::malformed(path, "trailing bytes after bank data"));
        }
        Self::from_samples(anchors, samples).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

/// Reads a bank file. Statistics are recomputed from the raw samples.
pub fn ingest_bank(path: impl AsRef<Path>) -> Result<MorphologyBank> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MorphologyBank::from_bytes(&bytes, path)
}

fn mean_and_population_std(scans: &[Signature]) -> (Array2<f64>, Array2<f64>) {
    let n = scans.len() as f64;
    let mut mean = Array2::<f64>::zeros((T, C));
    for s in scans {
        mean += &s.values();
    }
    mean /= n;
    let mut var = Array2::<f64>::zeros((T, C));
    for s in scans {
        let d = &s.values() - &mean;
        var += &(&d * &d);
    }
    var /= n;
    (mean, var.mapv(f64::sqrt))
}

// Demo bank coefficients, one entry per channel.
const DEMO_AMPLITUDE: [f64; C] = [120.0, 95.0, 105.0, 80.0, 60.0, 70.0];
const DEMO_OFFSET: [f64; C] = [15.0, -10.0, 8.0, -5.0, 0.0, -25.0];
const DEMO_HARMONIC: [f64; C] = [0.25, -0.2, 0.3, -0.15, 0.1, 0.2];
const DEMO_HARMONIC_PHASE: [f64; C] = [0.0, 0.7, 1.3, 2.1, 0.4, 2.8];
const DEMO_DIP_DEPTH: [f64; C] = [0.0, 0.0, 0.0, 0.0, 55.0, 65.0];
const DEMO_DIP_CENTER: f64 = 45.0;
const DEMO_DIP_WIDTH: f64 = 3.0;

/// Difference-of-Gaussians dip-spike: negative lobe before `center`,
/// positive lobe after.
pub fn dip_spike(t: f64, center: f64, width: f64) -> f64 {
    let lobe = |c: f64| (-(t - c) * (t - c) / (2.0 * width * width)).exp();
    lobe(center + width) - lobe(center - width)
}

/// Noise-free demo curve for channel `c` at anchor voltage `a`.
pub fn demo_base_curve(a: f64, c: usize, t: usize) -> f64 {
    let tn = t as f64 / T as f64;
    let scale = 1.0 + 0.8 * (a - DEFAULT_ANCHORS[0]);
    let harmonic = DEMO_HARMONIC[c] * (1.0 + 1.5 * (a - DEFAULT_ANCHORS[0]));
    let depth = DEMO_DIP_DEPTH[c] * (1.0 + 1.2 * (3.34 - a));
    DEMO_AMPLITUDE[c] * scale * (std::f64::consts::PI * tn).sin()
        + DEMO_AMPLITUDE[c]
            * harmonic
            * (2.0 * std::f64::consts::PI * tn + DEMO_HARMONIC_PHASE[c]).sin()
        + DEMO_OFFSET[c]
        + depth * dip_spike(t as f64, DEMO_DIP_CENTER, DEMO_DIP_WIDTH)
}

/// Procedural stand-in for a real scan archive: five anchors, 41 scans each,
/// sinusoidal base curves scaled by anchor voltage, a dip-spike near
/// timestep 45 on the two signed channels, and smooth per-scan jitter.
pub fn generate_demo_bank(seed: u64) -> MorphologyBank {
    let mut samples = Vec::with_capacity(DEFAULT_ANCHORS.len());
    for (ai, &a) in DEFAULT_ANCHORS.iter().enumerate() {
        let mut scans = Vec::with_capacity(DEFAULT_SCANS_PER_ANCHOR);
        for si in 0..DEFAULT_SCANS_PER_ANCHOR {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(
                seed,
                &format!("demo-bank/{ai}/{si}"),
            ));
            let mut values = Array2::<f64>::zeros((T, C));
            for c in 0..C {
                let gain: f64 = 1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal);
                let mut waves = [(0.0, 0.0); 3];
                for (j, w) in waves.iter_mut().enumerate() {
                    let amp: f64 = rng.sample(StandardNormal);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    *w = (0.006 * DEMO_AMPLITUDE[c] * amp / (j + 1) as f64, phase);
                }
                for t in 0..T {
                    let tn = t as f64 / T as f64;
                    let smooth: f64 = waves
                        .iter()
                        .enumerate()
                        .map(|(j, (amp, ph))| {
                            amp * (std::f64::consts::TAU * (j + 1) as f64 * tn + ph).sin()
                        })
                        .sum();
                    let white: f64 = rng.sample(StandardNormal);
                    values[[t, c]] = gain * demo_base_curve(a, c, t)
                        + smooth
                        + 0.002 * DEMO_AMPLITUDE[c] * white;
                }
            }
            scans.push(Signature::new(values).expect("demo values are finite"));
        }
        samples.push(scans);
    }
    MorphologyBank::from_samples(DEFAULT_ANCHORS.to_vec(), samples)
        .expect("demo bank is well-formed")
}
