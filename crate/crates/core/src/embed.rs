//! Fixed quantum-reservoir embedding of a signature, simulated classically on
//! a state vector.
//!
//! Qubit `q` is bit `q` of the basis index. Processor qubits occupy the low
//! bits and are re-encoded from the signal at every timestep; memory qubits
//! occupy the high bits and carry history between timesteps. The reservoir is
//! a transverse-field Ising Hamiltonian `H = sum J_ij Z_i Z_j + sum h_i X_i`
//! with couplings and fields drawn once from a structural seed.
//!
//! Each timestep:
//! 1. reset the processor register to the product state
//!    `prod_q R_y(pi * s * x_q)|0>` built from the normalized channel values,
//!    tensored with the current memory state;
//! 2. apply `exp(-i H dt)` `n_layers` times (precomputed as one dense unitary);
//! 3. read `<Z_i>`, `<Z_i Z_j>` for all pairs, mean `<X>` and mean `<Y>`;
//! 4. keep the dominant eigenvector of the memory register's reduced density
//!    matrix as the memory state for the next step.
//!
//! The per-step readouts are pooled over time by last value, mean, and
//! population std.

use ndarray::{Array1, Array2, ShapeBuilder};
use ndarray_linalg::{c64, Eigh, UPLO};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bank::MorphologyBank;
use crate::error::{Error, Result};
use crate::signature::{Signature, C, T};

/// Structural parameters of the reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirParams {
    pub n_memory: usize,
    pub n_processor: usize,
    pub n_layers: usize,
    /// Evolution time per layer.
    pub dt: f64,
    pub coupling_scale: f64,
    pub field_scale: f64,
    /// Multiplier on the `pi * x` encoding angle.
    pub injection_scale: f64,
    pub structural_seed: u64,
}

impl Default for ReservoirParams {
    fn default() -> Self {
        Self {
            n_memory: 4,
            n_processor: 6,
            n_layers: 2,
            dt: 1.0,
            coupling_scale: 1.0,
            field_scale: 1.0,
            injection_scale: 1.0,
            structural_seed: 0x5EED_0001,
        }
    }
}

impl ReservoirParams {
    pub fn n_qubits(&self) -> usize {
        self.n_memory + self.n_processor
    }

    /// Per-step readouts: `n` single-qubit Z, `n(n-1)/2` ZZ pairs, mean X, mean Y.
    pub fn n_observables(&self) -> usize {
        let n = self.n_qubits();
        n + n * (n - 1) / 2 + 2
    }

    pub fn embedding_dim(&self) -> usize {
        3 * self.n_observables()
    }
}

/// A frozen reservoir with its unitary precomputed. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct ReservoirSpec {
    params: ReservoirParams,
    coupling: Array2<f64>,
    field: Vec<f64>,
    channel_bounds: Vec<(f64, f64)>,
    hamiltonian_eigvals: Array1<f64>,
    hamiltonian_eigvecs: Array2<f64>,
    /// Column blocks of the step unitary. Logical row
    /// `i = (r * n_mem_states + k) * 2 + part` holds the real (`part` 0) or
    /// imaginary (`part` 1) part of `U[r, k * n_proc_states + p]` over `p`.
    /// Stored in groups of `LANES` logical rows, transposed so that one group
    /// is `[p][lane]`.
    blocks: Vec<f64>,
}

impl ReservoirSpec {
    /// Builds the reservoir. `channel_bounds` gives the `(min, max)` used to
    /// normalize each encoded channel to `[-1, 1]`; one entry per processor
    /// qubit.
    pub fn new(params: ReservoirParams, channel_bounds: Vec<(f64, f64)>) -> Result<Self> {
        let n = params.n_qubits();
        if params.n_processor == 0 || params.n_processor > C {
            return Err(Error::InvalidInput(format!(
                "processor register must have 1..={C} qubits"
            )));
        }
        if n > 12 {
            return Err(Error::InvalidInput(
                "at most 12 qubits are supported".to_string(),
            ));
        }
        if params.n_layers == 0 || !(params.dt.is_finite() && params.dt > 0.0) {
            return Err(Error::InvalidInput(
                "need n_layers >= 1 and dt > 0".to_string(),
            ));
        }
        if channel_bounds.len() != params.n_processor {
            return Err(Error::InvalidInput(
                "one channel bound per processor qubit is required".to_string(),
            ));
        }

        let mut rng = ChaCha20Rng::seed_from_u64(params.structural_seed);
        let mut coupling = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = params.coupling_scale * rng.random_range(-1.0..=1.0);
                coupling[[i, j]] = v;
                coupling[[j, i]] = v;
            }
        }
        let field: Vec<f64> = (0..n)
            .map(|_| params.field_scale * rng.random_range(-1.0..=1.0))
            .collect();

        let h = ising_hamiltonian(&coupling, &field);
        let (eigvals, eigvecs) = h
            .eigh(UPLO::Lower)
            .map_err(|e| Error::Linalg(format!("Hamiltonian eigendecomposition: {e}")))?;

        let tau = params.dt * params.n_layers as f64;
        let (re, im) = unitary_parts(&eigvals, &eigvecs, tau);
        let dim = 1usize << n;
        let n_proc_states = 1usize << params.n_processor;
        let n_mem_states = 1usize << params.n_memory;
        let rows = dim * n_mem_states * 2;
        debug_assert_eq!(rows % LANES, 0);
        let mut blocks = vec![0.0; rows * n_proc_states];
        for r in 0..dim {
            for k in 0..n_mem_states {
                for part in 0..2 {
                    let src = if part == 0 { &re } else { &im };
                    let row = (r * n_mem_states + k) * 2 + part;
                    let (group, lane) = (row / LANES, row % LANES);
                    for p in 0..n_proc_states {
                        blocks[(group * n_proc_states + p) * LANES + lane] =
                            src[[r, k * n_proc_states + p]];
                    }
                }
            }
        }

        Ok(Self {
            params,
            coupling,
            field,
            channel_bounds,
            hamiltonian_eigvals: eigvals,
            hamiltonian_eigvecs: eigvecs,
            blocks,
        })
    }

    /// Default 4 memory + 6 processor reservoir normalized to the bank's
    /// channel ranges.
    pub fn for_bank(bank: &MorphologyBank, structural_seed: u64) -> Result<Self> {
        let params = ReservoirParams {
            structural_seed,
            ..ReservoirParams::default()
        };
        Self::new(params, bank.channel_bounds().to_vec())
    }

    pub fn params(&self) -> &ReservoirParams {
        &self.params
    }

    pub fn coupling(&self) -> &Array2<f64> {
        &self.coupling
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }

    pub fn channel_bounds(&self) -> &[(f64, f64)] {
        &self.channel_bounds
    }

    pub fn embedding_dim(&self) -> usize {
        self.params.embedding_dim()
    }

    /// The dense Hamiltonian.
    pub fn hamiltonian(&self) -> Array2<f64> {
        ising_hamiltonian(&self.coupling, &self.field)
    }

    /// The dense single-layer unitary `exp(-i H dt)`.
    pub fn layer_unitary(&self) -> Array2<c64> {
        let (re, im) = unitary_parts(
            &self.hamiltonian_eigvals,
            &self.hamiltonian_eigvecs,
            self.params.dt,
        );
        let mut u = Array2::<c64>::zeros(re.dim());
        for ((dst, r), i) in u.iter_mut().zip(re.iter()).zip(im.iter()) {
            *dst = c64::new(*r, *i);
        }
        u
    }

    /// Embeds one signature.
    pub fn embed(&self, sig: &Signature) -> Result<Array1<f64>> {
        Ok(self.embed_batch(std::slice::from_ref(sig))?.remove(0))
    }

    /// Embeds several signatures. Each output is bit-identical to what
    /// [`embed`](Self::embed) returns for the same signature alone.
    pub fn embed_batch(&self, sigs: &[Signature]) -> Result<Vec<Array1<f64>>> {
        let mut out = Vec::with_capacity(sigs.len());
        for chunk in sigs.chunks(BATCH) {
            out.extend(self.trajectories(chunk)?.iter().map(pool));
        }
        Ok(out)
    }

    /// Per-step readouts, `T x n_observables` per signature.
    pub fn trajectories(&self, sigs: &[Signature]) -> Result<Vec<Array2<f64>>> {
        Ok(self.simulate(sigs, false)?.0)
    }

    /// Per-step readouts plus the state norm after every unitary application.
    pub fn trajectories_with_norms(
        &self,
        sigs: &[Signature],
    ) -> Result<(Vec<Array2<f64>>, Vec<Vec<f64>>)> {
        self.simulate(sigs, true)
    }

    fn encode_row(&self, sig: &Signature, t: usize) -> Vec<f64> {
        let row = sig.values().row(t).to_owned();
        let n_p = self.params.n_processor;
        // Per-qubit (cos, sin) of half the rotation angle.
        let halves: Vec<(f64, f64)> = (0..n_p)
            .map(|q| {
                let (lo, hi) = self.channel_bounds[q];
                let x = if hi > lo {
                    (2.0 * (row[q] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                let half = 0.5 * self.params.injection_scale * std::f64::consts::PI * x;
                (half.cos(), half.sin())
            })
            .collect();
        (0..1usize << n_p)
            .map(|p| {
                halves.iter().enumerate().fold(1.0, |acc, (q, (c, s))| {
                    acc * if p >> q & 1 == 1 { *s } else { *c }
                })
            })
            .collect()
    }

    fn simulate(
        &self,
        sigs: &[Signature],
        record_norms: bool,
    ) -> Result<(Vec<Array2<f64>>, Vec<Vec<f64>>)> {
        let n = self.params.n_qubits();
        let dim = 1usize << n;
        let n_proc_states = 1usize << self.params.n_processor;
        let n_mem_states = 1usize << self.params.n_memory;
        let n_obs = self.params.n_observables();
        let rows = dim * n_mem_states * 2;

        let mut memory: Vec<Vec<c64>> = sigs
            .iter()
            .map(|_| {
                let mut m = vec![c64::new(0.0, 0.0); n_mem_states];
                m[0] = c64::new(1.0, 0.0);
                m
            })
            .collect();
        let mut traces: Vec<Array2<f64>> = sigs.iter().map(|_| Array2::zeros((T, n_obs))).collect();
        let mut norms: Vec<Vec<f64>> = sigs.iter().map(|_| Vec::new()).collect();
        let mut block_out: Vec<Vec<f64>> = sigs.iter().map(|_| vec![0.0; rows]).collect();
        let mut psi = vec![c64::new(0.0, 0.0); dim];

        for t in 0..T {
            let phis: Vec<Vec<f64>> = sigs.iter().map(|s| self.encode_row(s, t)).collect();
            apply_blocks(&self.blocks, n_proc_states, &phis, &mut block_out);
            for s in 0..sigs.len() {
                let y = &block_out[s];
                let m = &memory[s];
                for (r, amp) in psi.iter_mut().enumerate() {
                    let mut acc = c64::new(0.0, 0.0);
                    for (k, mk) in m.iter().enumerate() {
                        let base = (r * n_mem_states + k) * 2;
                        acc += mk * c64::new(y[base], y[base + 1]);
                    }
                    *amp = acc;
                }
                if record_norms {
                    norms[s].push(psi.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt());
                }
                read_observables(&psi, n, traces[s].row_mut(t).as_slice_mut().expect("row"));
                memory[s] = dominant_memory_state(&psi, n_mem_states, n_proc_states)?;
            }
        }
        Ok((traces, norms))
    }
}

/// Dense `sum J_ij Z_i Z_j + sum h_i X_i` over `n = field.len()` qubits.
pub fn ising_hamiltonian(coupling: &Array2<f64>, field: &[f64]) -> Array2<f64> {
    let n = field.len();
    let dim = 1usize << n;
    let mut h = Array2::<f64>::zeros((dim, dim));
    for b in 0..dim {
        let z = |q: usize| if b >> q & 1 == 1 { -1.0 } else { 1.0 };
        let mut diag = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                diag += coupling[[i, j]] * z(i) * z(j);
            }
        }
        h[[b, b]] = diag;
        for (q, hq) in field.iter().enumerate() {
            h[[b, b ^ (1 << q)]] += hq;
        }
    }
    h
}

/// Real and imaginary parts of `V diag(exp(-i lambda tau)) V^T`.
fn unitary_parts(
    eigvals: &Array1<f64>,
    eigvecs: &Array2<f64>,
    tau: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut v_cos = eigvecs.clone();
    let mut v_sin = eigvecs.clone();
    for (j, lambda) in eigvals.iter().enumerate() {
        let (s, c) = (lambda * tau).sin_cos();
        v_cos.column_mut(j).mapv_inplace(|x| x * c);
        v_sin.column_mut(j).mapv_inplace(|x| -x * s);
    }
    (v_cos.dot(&eigvecs.t()), v_sin.dot(&eigvecs.t()))
}

const LANES: usize = 8;
/// Signatures simulated together; bounds the per-call scratch memory.
const BATCH: usize = 64;

/// `out[s][i] = sum_p block_row_i[p] * phis[s][p]` for every logical row `i`.
///
/// Every output element is accumulated in the same order (`p` ascending,
/// starting from zero) whichever tile computes it, so a signature's result
/// does not depend on the rest of the batch.
fn apply_blocks(blocks: &[f64], width: usize, phis: &[Vec<f64>], out: &mut [Vec<f64>]) {
    for (group, blk) in blocks.chunks_exact(width * LANES).enumerate() {
        let rows = group * LANES..(group + 1) * LANES;
        let mut s = 0;
        while s + 8 <= phis.len() {
            tile::<8>(blk, &phis[s..s + 8], &mut out[s..s + 8], rows.clone());
            s += 8;
        }
        while s + 4 <= phis.len() {
            tile::<4>(blk, &phis[s..s + 4], &mut out[s..s + 4], rows.clone());
            s += 4;
        }
        while s < phis.len() {
            tile::<1>(blk, &phis[s..s + 1], &mut out[s..s + 1], rows.clone());
            s += 1;
        }
    }
}

#[inline(always)]
fn tile<const B: usize>(
    blk: &[f64],
    phis: &[Vec<f64>],
    out: &mut [Vec<f64>],
    rows: std::ops::Range<usize>,
) {
    let mut acc = [[0.0f64; LANES]; B];
    for (p, g) in blk.chunks_exact(LANES).enumerate() {
        for b in 0..B {
            let x = phis[b][p];
            for l in 0..LANES {
                acc[b][l] += g[l] * x;
            }
        }
    }
    for b in 0..B {
        out[b][rows.clone()].copy_from_slice(&acc[b]);
    }
}

fn read_observables(psi: &[c64], n: usize, out: &mut [f64]) {
    // Walsh-Hadamard transform of the basis probabilities: entry `mask` is
    // the expectation of the Z-string over the qubits set in `mask`.
    let mut w: Vec<f64> = psi.iter().map(|a| a.norm_sqr()).collect();
    let mut h = 1;
    while h < w.len() {
        for block in w.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    let mut idx = 0;
    for q in 0..n {
        out[idx] = w[1 << q];
        idx += 1;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            out[idx] = w[(1 << i) | (1 << j)];
            idx += 1;
        }
    }
    let (mut x_sum, mut y_sum) = (0.0, 0.0);
    for q in 0..n {
        let bit = 1usize << q;
        for b in (0..psi.len()).filter(|b| b & bit == 0) {
            let z = psi[b].conj() * psi[b | bit];
            x_sum += 2.0 * z.re;
            y_sum += 2.0 * z.im;
        }
    }
    out[idx] = x_sum / n as f64;
    out[idx + 1] = y_sum / n as f64;
}

/// Dominant eigenvector of the memory register's reduced density matrix,
/// phase-fixed so its largest-magnitude entry is real and positive.
fn dominant_memory_state(psi: &[c64], n_mem: usize, n_proc: usize) -> Result<Vec<c64>> {
    // Column-major so LAPACK sees this matrix rather than its transpose
    // (which for a Hermitian matrix is the conjugate).
    let mut rho = Array2::<c64>::zeros((n_mem, n_mem).f());
    for a in 0..n_mem {
        for b in a..n_mem {
            let mut acc = c64::new(0.0, 0.0);
            for p in 0..n_proc {
                acc += psi[a * n_proc + p] * psi[b * n_proc + p].conj();
            }
            rho[[a, b]] = acc;
            rho[[b, a]] = acc.conj();
        }
    }
    let (_, vecs) = rho
        .eigh(UPLO::Upper)
        .map_err(|e| Error::Linalg(format!("memory reduced state: {e}")))?;
    let mut top: Vec<c64> = vecs.column(n_mem - 1).to_vec();
    let mut pivot = 0;
    for (k, v) in top.iter().enumerate() {
        if v.norm() > top[pivot].norm() {
            pivot = k;
        }
    }
    let phase = top[pivot].conj() / top[pivot].norm();
    let norm = top.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    for v in &mut top {
        *v = *v * phase / norm;
    }
    Ok(top)
}

/// `[last | mean | population std]` over timesteps.
fn pool(trace: &Array2<f64>) -> Array1<f64> {
    let (steps, n_obs) = trace.dim();
    let mut out = Array1::<f64>::zeros(3 * n_obs);
    for j in 0..n_obs {
        let col = trace.column(j);
        let mean = col.sum() / steps as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / steps as f64;
        out[j] = col[steps - 1];
        out[n_obs + j] = mean;
        out[2 * n_obs + j] = var.sqrt();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_product_is_batch_invariant() {
        let width = 4;
        let blocks: Vec<f64> = (0..width * LANES * 3)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let phis: Vec<Vec<f64>> = (0..7)
            .map(|s| {
                (0..width)
                    .map(|p| ((s * 5 + p) as f64 * 0.11).cos())
                    .collect()
            })
            .collect();
        let mut batch = vec![vec![0.0; 3 * LANES]; phis.len()];
        apply_blocks(&blocks, width, &phis, &mut batch);
        for (phi, expect) in phis.iter().zip(&batch) {
            let mut single = vec![vec![0.0; 3 * LANES]];
            apply_blocks(&blocks, width, std::slice::from_ref(phi), &mut single);
            assert_eq!(&single[0], expect);
            for i in 0..3 * LANES {
                let (group, lane) = (i / LANES, i % LANES);
                let naive: f64 = (0..width)
                    .map(|p| blocks[(group * width + p) * LANES + lane] * phi[p])
                    .sum();
                assert!((naive - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn default_dimensions() {
        let p = ReservoirParams::default();
        assert_eq!(p.n_qubits(), 10);
        assert_eq!(p.n_observables(), 57);
        assert_eq!(p.embedding_dim(), 171);
    }

    #[test]
    fn hamiltonian_is_symmetric() {
        let spec = ReservoirSpec::new(
            ReservoirParams {
                n_memory: 1,
                n_processor: 2,
                ..ReservoirParams::default()
            },
            vec![(-1.0, 1.0); 2],
        )
        .unwrap();
        let h = spec.hamiltonian();
        assert_eq!(h, h.t());
        assert!(spec.coupling().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_bad_params() {
        let bad = ReservoirParams {
            n_processor: 7,
            ..ReservoirParams::default()
        };
        assert!(ReservoirSpec::new(bad, vec![(0.0, 1.0); 7]).is_err());
        assert!(ReservoirSpec::new(ReservoirParams::default(), vec![(0.0, 1.0); 5]).is_err());
    }
}
