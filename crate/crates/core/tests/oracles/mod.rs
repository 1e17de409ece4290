//! Independent brute-force references shared by several test targets.
#![allow(dead_code)]

use magsig_core::{Signature, C, T};
use ndarray::{Array1, Array2};
use ndarray_linalg::c64;

/// Largest ECDF gap, checked at every pooled point.
pub fn brute_force_ks(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |xs: &[f64], t: f64| xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64;
    a.iter()
        .chain(b)
        .map(|&t| (ecdf(a, t) - ecdf(b, t)).abs())
        .fold(0.0, f64::max)
}

/// Straightforward per-feature recomputation over plain vectors.
pub fn oracle_features(sig: &Signature) -> Vec<f64> {
    let rows = sig.to_row_major();
    let col = |c: usize| -> Vec<f64> { (0..T).map(|t| rows[t * C + c]).collect() };
    let mut out = Vec::new();
    for c in 0..C {
        let x = col(c);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let min = x.iter().cloned().fold(f64::MAX, f64::min);
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        let mut tv = 0.0;
        for t in 1..x.len() {
            tv += (x[t] - x[t - 1]).abs();
        }
        let energy = x.iter().map(|v| v * v).sum::<f64>() / n;
        let dev: Vec<f64> = x.iter().map(|v| (v - mean).abs()).collect();
        let top = dev.iter().cloned().fold(0.0, f64::max);
        let idx = dev.iter().position(|d| *d == top).unwrap();
        out.extend([
            mean,
            std,
            min,
            max,
            x[x.len() - 1] - x[0],
            tv,
            tv / (n - 1.0),
            energy,
            idx as f64 / n,
        ]);
    }
    for (a, b) in [(0, 2), (1, 3), (4, 5)] {
        let (x, y) = (col(a), col(b));
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let sxx: f64 = x.iter().map(|p| (p - mx) * (p - mx)).sum();
        let syy: f64 = y.iter().map(|q| (q - my) * (q - my)).sum();
        out.push(if sxx == 0.0 || syy == 0.0 {
            0.0
        } else {
            sxy / (sxx * syy).sqrt()
        });
    }
    out
}

/// Solves `[1 X]^T [1 X] + diag(0, lambda..)` by Gauss-Jordan elimination.
pub fn normal_equation_oracle(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Vec<f64> {
    let (n, d) = x.dim();
    let p = d + 1;
    let aug = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
    let mut m = vec![vec![0.0; p + 1]; p];
    for a in 0..p {
        for b in 0..p {
            m[a][b] = (0..n).map(|i| aug(i, a) * aug(i, b)).sum();
        }
        if a > 0 {
            m[a][a] += lambda;
        }
        m[a][p] = (0..n).map(|i| aug(i, a) * y[i]).sum();
    }
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let div = m[col][col];
        for v in m[col].iter_mut() {
            *v /= div;
        }
        for r in 0..p {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    m.iter().map(|row| row[p]).collect()
}

pub fn kron(a: &Array2<c64>, b: &Array2<c64>) -> Array2<c64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = a[[i, j]] * b[[k, l]];
                }
            }
        }
    }
    out
}

pub fn pauli(name: char) -> Array2<c64> {
    let (o, z, i) = (c64::new(1.0, 0.0), c64::new(0.0, 0.0), c64::new(0.0, 1.0));
    let v = match name {
        'I' => [o, z, z, o],
        'X' => [z, o, o, z],
        'Y' => [z, -i, i, z],
        'Z' => [o, z, z, -o],
        _ => unreachable!(),
    };
    Array2::from_shape_vec((2, 2), v.to_vec()).unwrap()
}

/// Operator acting as `ops[q]` on qubit `q`, where qubit `q` is bit `q` of the
/// basis index (so the highest qubit is the leftmost Kronecker factor).
pub fn operator(ops: &[char]) -> Array2<c64> {
    let mut out = Array2::from_elem((1, 1), c64::new(1.0, 0.0));
    for &name in ops.iter().rev() {
        out = kron(&out, &pauli(name));
    }
    out
}

pub fn dense_hamiltonian(coupling: &Array2<f64>, field: &[f64]) -> Array2<c64> {
    let n = field.len();
    let dim = 1 << n;
    let mut h = Array2::<c64>::zeros((dim, dim));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut ops = vec!['I'; n];
            ops[i] = 'Z';
            ops[j] = 'Z';
            h = h + operator(&ops).mapv(|v| v * coupling[[i, j]]);
        }
        let mut ops = vec!['I'; n];
        ops[i] = 'X';
        h = h + operator(&ops).mapv(|v| v * field[i]);
    }
    h
}

/// `exp(a)` by scaling and squaring with a 40-term Taylor series.
pub fn expm(a: &Array2<c64>) -> Array2<c64> {
    let norm: f64 = a.iter().map(|v| v.norm()).sum();
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale /= 2.0;
        squarings += 1;
    }
    let a = a.mapv(|v| v * scale);
    let dim = a.nrows();
    let mut term = Array2::<c64>::eye(dim);
    let mut sum = term.clone();
    for k in 1..40 {
        term = term.dot(&a).mapv(|v| v / k as f64);
        sum = sum + &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}
