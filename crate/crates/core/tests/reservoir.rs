//! Reservoir embedding checked against an independent dense simulator.

use std::sync::OnceLock;

use magsig_core::embed::ising_hamiltonian;
use magsig_core::{generate_demo_bank, ReservoirParams, ReservoirSpec, Signature, C, T};
use ndarray::{Array1, Array2};
use ndarray_linalg::c64;

mod oracles;
use oracles::{dense_hamiltonian, expm, operator};

fn default_spec() -> &'static ReservoirSpec {
    static SPEC: OnceLock<ReservoirSpec> = OnceLock::new();
    SPEC.get_or_init(|| ReservoirSpec::for_bank(&generate_demo_bank(7), 0x5EED_0001).unwrap())
}

fn small_spec(n_memory: usize, n_processor: usize, seed: u64) -> ReservoirSpec {
    ReservoirSpec::new(
        ReservoirParams {
            n_memory,
            n_processor,
            structural_seed: seed,
            ..ReservoirParams::default()
        },
        vec![(-2.0, 2.0); n_processor],
    )
    .unwrap()
}

fn expectation(psi: &Array1<c64>, op: &Array2<c64>) -> f64 {
    let v = op.dot(psi);
    psi.iter()
        .zip(v.iter())
        .map(|(a, b)| a.conj() * b)
        .sum::<c64>()
        .re
}

/// Brute-force per-step readout trace for a small reservoir.
fn oracle_trace(spec: &ReservoirSpec, sig: &Signature) -> Array2<f64> {
    let p = spec.params();
    let (n_m, n_p) = (p.n_memory, p.n_processor);
    let n = n_m + n_p;
    let h = dense_hamiltonian(spec.coupling(), spec.field());
    let u = expm(&h.mapv(|v| v * c64::new(0.0, -p.dt * p.n_layers as f64)));
    let mut memory = Array1::<c64>::zeros(1 << n_m);
    memory[0] = c64::new(1.0, 0.0);
    let n_obs = p.n_observables();
    let mut trace = Array2::<f64>::zeros((T, n_obs));
    for t in 0..T {
        // Processor product state, qubit 0 least significant.
        let mut phi = Array1::from_elem(1, c64::new(1.0, 0.0));
        for q in (0..n_p).rev() {
            let (lo, hi) = spec.channel_bounds()[q];
            let x = (2.0 * (sig.values()[[t, q]] - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
            let theta = p.injection_scale * std::f64::consts::PI * x;
            let single = Array1::from(vec![
                c64::new((theta / 2.0).cos(), 0.0),
                c64::new((theta / 2.0).sin(), 0.0),
            ]);
            let mut next = Array1::zeros(phi.len() * 2);
            for (i, a) in phi.iter().enumerate() {
                for (j, b) in single.iter().enumerate() {
                    next[i * 2 + j] = a * b;
                }
            }
            phi = next;
        }
        let mut state = Array1::<c64>::zeros(1 << n);
        for (k, mk) in memory.iter().enumerate() {
            for (q, pq) in phi.iter().enumerate() {
                state[k * (1 << n_p) + q] = mk * pq;
            }
        }
        let psi = u.dot(&state);

        let mut idx = 0;
        for q in 0..n {
            let mut ops = vec!['I'; n];
            ops[q] = 'Z';
            trace[[t, idx]] = expectation(&psi, &operator(&ops));
            idx += 1;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let mut ops = vec!['I'; n];
                ops[i] = 'Z';
                ops[j] = 'Z';
                trace[[t, idx]] = expectation(&psi, &operator(&ops));
                idx += 1;
            }
        }
        for (offset, name) in [(0, 'X'), (1, 'Y')] {
            let mut total = 0.0;
            for q in 0..n {
                let mut ops = vec!['I'; n];
                ops[q] = name;
                total += expectation(&psi, &operator(&ops));
            }
            trace[[t, idx + offset]] = total / n as f64;
        }

        // Partial trace over the processor register, then power iteration.
        let dm = 1 << n_m;
        let mut rho = Array2::<c64>::zeros((dm, dm));
        for a in 0..dm {
            for b in 0..dm {
                for q in 0..(1 << n_p) {
                    rho[[a, b]] += psi[a * (1 << n_p) + q] * psi[b * (1 << n_p) + q].conj();
                }
            }
        }
        let mut v = Array1::from_elem(dm, c64::new(1.0, 0.3));
        for _ in 0..5000 {
            v = rho.dot(&v);
            let norm = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            v.mapv_inplace(|x| x / norm);
        }
        memory = v;
    }
    trace
}

fn demo_signatures(n: usize) -> Vec<Signature> {
    generate_demo_bank(7)
        .labelled_samples()
        .step_by(37)
        .take(n)
        .map(|(_, s)| s.clone())
        .collect()
}

// ---- tests -----------------------------------------------------------------

#[test]
fn two_qubit_unitary_matches_dense_exponential() {
    let spec = small_spec(1, 1, 42);
    let h = dense_hamiltonian(spec.coupling(), spec.field());
    let h_impl = ising_hamiltonian(spec.coupling(), spec.field());
    for (a, b) in h.iter().zip(h_impl.iter()) {
        assert!((a.re - b).abs() < 1e-15 && a.im == 0.0);
    }
    let reference = expm(&h.mapv(|v| v * c64::new(0.0, -spec.params().dt)));
    let u = spec.layer_unitary();
    let err = u
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "max entry error {err}");
}

#[test]
fn three_qubit_trace_matches_brute_force() {
    let spec = small_spec(1, 2, 9);
    let sigs = demo_signatures(2);
    let traces = spec.trajectories(&sigs).unwrap();
    for (sig, trace) in sigs.iter().zip(&traces) {
        let oracle = oracle_trace(&spec, sig);
        let err = trace
            .iter()
            .zip(oracle.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "max readout error {err}");
    }
}

#[test]
fn four_qubit_two_memory_trace_matches_brute_force() {
    let spec = small_spec(2, 2, 13);
    let sig = &demo_signatures(1)[0];
    let trace = &spec.trajectories(std::slice::from_ref(sig)).unwrap()[0];
    let oracle = oracle_trace(&spec, sig);
    let err = trace
        .iter()
        .zip(oracle.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-9, "max readout error {err}");
}

#[test]
fn embedding_has_171_dimensions_and_is_deterministic() {
    let spec = default_spec();
    let sig = &demo_signatures(1)[0];
    let a = spec.embed(sig).unwrap();
    let b = spec.embed(sig).unwrap();
    assert_eq!(a.len(), 171);
    assert_eq!(a, b);
}

#[test]
fn norm_is_preserved_and_readouts_are_bounded() {
    let spec = default_spec();
    let sigs = demo_signatures(3);
    let (traces, norms) = spec.trajectories_with_norms(&sigs).unwrap();
    for n in norms.iter().flatten() {
        assert!((n - 1.0).abs() < 1e-9, "norm {n}");
    }
    for v in traces.iter().flat_map(|t| t.iter()) {
        assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(v), "readout {v}");
    }
}

#[test]
fn batch_embedding_is_bit_identical_to_single() {
    let spec = default_spec();
    let sigs = demo_signatures(6);
    let batch = spec.embed_batch(&sigs).unwrap();
    for (sig, b) in sigs.iter().zip(&batch) {
        assert_eq!(&spec.embed(sig).unwrap(), b);
    }
}

#[test]
fn constant_signature_pools_consistently() {
    let spec = small_spec(1, 2, 9);
    let sig = Signature::new(Array2::from_elem((T, C), 0.7)).unwrap();
    let trace = oracle_trace(&spec, &sig);
    let emb = spec.embed(&sig).unwrap();
    let n_obs = spec.params().n_observables();
    for j in 0..n_obs {
        let col = trace.column(j);
        let mean = col.sum() / T as f64;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / T as f64).sqrt();
        assert!(emb[2 * n_obs + j] >= 0.0);
        assert!((emb[2 * n_obs + j] - std).abs() < 1e-9);
        assert!((emb[n_obs + j] - mean).abs() < 1e-9);
        let settled = (20..T).all(|t| (col[t] - col[T - 1]).abs() < 1e-9);
        if settled {
            assert!((emb[j] - col[20]).abs() < 1e-9);
        }
    }
}

#[test]
fn one_entry_perturbation_moves_embedding() {
    let spec = default_spec();
    let sig = &demo_signatures(1)[0];
    let (lo, hi) = spec.channel_bounds()[2];
    let mut values = sig.values().to_owned();
    values[[50, 2]] += 0.1 * (hi - lo);
    let moved = Signature::new(values).unwrap();
    let a = spec.embed(sig).unwrap();
    let b = spec.embed(&moved).unwrap();
    let dist = (&a - &b).mapv(|v| v * v).sum().sqrt();
    assert!(dist > 0.0);
}
