//! Discriminant-subspace degradation modulator.
//!
//! [`fit_lda_model`] embeds every bank scan, whitens the embeddings with a
//! shrinkage covariance, and finds the anchor-discriminant directions.
//! [`modulate`] then moves a base sample's projection along the state
//! direction by `-gamma * (1 - soh)`, retrieves nearby bank scans inside an
//! alignment cone, blends their softmin-weighted average into the base, and
//! finishes with amplitude scaling and Gaussian broadening.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{Eigh, UPLO};

use crate::bank::MorphologyBank;
use crate::config::BridgeConfig;
use crate::embed::{ReservoirParams, ReservoirSpec};
use crate::error::{Error, Result};
use crate::io::ByteCursor;
use crate::record::U_DIM;
use crate::signature::{Signature, C, T};

const MODEL_MAGIC: &[u8; 8] = b"MSLDA001";

#[derive(Debug, Clone)]
pub struct LdaModel {
    reservoir: Arc<ReservoirSpec>,
    shrinkage: f64,
    mu_e: Array1<f64>,
    whitener: Array2<f64>,
    x_bar: Array1<f64>,
    basis: Array2<f64>,
    anchors: Vec<f64>,
    centroids: Array2<f64>,
    state_direction: Array1<f64>,
    bank_projection: Array2<f64>,
    bank_labels: Vec<usize>,
    bank_signatures: Vec<Signature>,
}

/// Cluster geometry of the projected bank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubspaceGeometry {
    /// Mean distance from each bank point to its own anchor centroid.
    pub within_scatter: f64,
    /// Mean pairwise distance between anchor centroids.
    pub mean_separation: f64,
    /// Smallest pairwise distance between anchor centroids.
    pub min_separation: f64,
}

impl SubspaceGeometry {
    pub fn ratio(&self) -> f64 {
        self.mean_separation / self.within_scatter
    }
}

/// Fits the projection on the bank, anchors as classes.
pub fn fit_lda_model(
    bank: &MorphologyBank,
    reservoir: Arc<ReservoirSpec>,
    shrinkage: f64,
) -> Result<LdaModel> {
    let n_classes = bank.anchors().len();
    if n_classes < 2 {
        return Err(Error::InvalidInput(
            "discriminant fit needs at least 2 anchors".to_string(),
        ));
    }
    if !(shrinkage > 0.0 && shrinkage < 1.0) {
        return Err(Error::InvalidInput(
            "shrinkage must lie in (0, 1)".to_string(),
        ));
    }
    let (labels, signatures): (Vec<usize>, Vec<Signature>) =
        bank.labelled_samples().map(|(a, s)| (a, s.clone())).unzip();
    let embeddings = reservoir.embed_batch(&signatures)?;
    let d = reservoir.embedding_dim();
    let n = embeddings.len();
    let mut e = Array2::<f64>::zeros((n, d));
    for (mut row, emb) in e.axis_iter_mut(Axis(0)).zip(&embeddings) {
        row.assign(emb);
    }

    let mu_e = e.mean_axis(Axis(0)).expect("non-empty bank");
    let centered = &e - &mu_e;
    let cov = centered.t().dot(&centered) / n as f64;
    let avg_var = cov.diag().sum() / d as f64;
    let shrunk = cov * (1.0 - shrinkage) + Array2::<f64>::eye(d) * (shrinkage * avg_var);
    let (evals, evecs) = shrunk
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Linalg(format!("covariance eigendecomposition: {e}")))?;
    let max_eval = evals.iter().copied().fold(0.0, f64::max);
    if !(max_eval > 0.0) || evals.iter().any(|&v| v <= 1e-12 * max_eval) {
        return Err(Error::Linalg(
            "embedding covariance is singular even after shrinkage".to_string(),
        ));
    }
    let mut scaled = evecs.clone();
    for (j, v) in evals.iter().enumerate() {
        scaled.column_mut(j).mapv_inplace(|x| x / v.sqrt());
    }
    let whitener = scaled.dot(&evecs.t());

    let white = centered.dot(&whitener);
    let x_bar = white.mean_axis(Axis(0)).expect("non-empty");
    let y = &white - &x_bar;

    // Between-class scatter of the whitened data. Whitening by the (shrunk)
    // total covariance turns the discriminant eigenproblem into an ordinary
    // symmetric one.
    let mut class_means = Array2::<f64>::zeros((n_classes, d));
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in y.axis_iter(Axis(0)).zip(&labels) {
        let mut m = class_means.row_mut(l);
        m += &row;
        counts[l] += 1;
    }
    let mut between = Array2::<f64>::zeros((d, d));
    for (c, &count) in counts.iter().enumerate() {
        let mean = class_means.row(c).mapv(|v| v / count as f64);
        let weight = count as f64 / n as f64;
        let col = mean.view().insert_axis(Axis(1));
        between = between + col.dot(&col.t()) * weight;
    }
    let (b_evals, b_evecs) = between
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Linalg(format!("between-class eigendecomposition: {e}")))?;
    let q = n_classes - 1;
    let mut basis = Array2::<f64>::zeros((d, q));
    for j in 0..q {
        let src = b_evecs.column(d - 1 - j);
        if b_evals[d - 1 - j] <= 0.0 {
            return Err(Error::Linalg(
                "degenerate between-class scatter".to_string(),
            ));
        }
        let pivot =
            src.iter().enumerate().fold(
                0,
                |best, (i, v)| if v.abs() > src[best].abs() { i } else { best },
            );
        let sign = if src[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.column_mut(j).assign(&src.mapv(|v| v * sign));
    }

    // Unit pooled within-class std along every discriminant.
    let z = y.dot(&basis);
    let mut z_means = Array2::<f64>::zeros((n_classes, q));
    for (row, &l) in z.axis_iter(Axis(0)).zip(&labels) {
        let mut m = z_means.row_mut(l);
        m += &row;
    }
    for (c, &count) in counts.iter().enumerate() {
        z_means.row_mut(c).mapv_inplace(|v| v / count as f64);
    }
    for j in 0..q {
        let ss: f64 = z
            .axis_iter(Axis(0))
            .zip(&labels)
            .map(|(row, &l)| (row[j] - z_means[[l, j]]).powi(2))
            .sum();
        let sd = (ss / n as f64).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Linalg("zero within-class spread".to_string()));
        }
        basis.column_mut(j).mapv_inplace(|v| v / sd);
    }

    let bank_projection = y.dot(&basis);
    let mut centroids = Array2::<f64>::zeros((n_classes, q));
    for (row, &l) in bank_projection.axis_iter(Axis(0)).zip(&labels) {
        let mut c = centroids.row_mut(l);
        c += &row;
    }
    for (c, &count) in counts.iter().enumerate() {
        centroids.row_mut(c).mapv_inplace(|v| v / count as f64);
    }
    let state_direction = voltage_direction(bank.anchors(), &centroids)?;

    Ok(LdaModel {
        reservoir,
        shrinkage,
        mu_e,
        whitener,
        x_bar,
        basis,
        anchors: bank.anchors().to_vec(),
        centroids,
        state_direction,
        bank_projection,
        bank_labels: labels,
        bank_signatures: signatures,
    })
}

/// Unit vector along the least-squares slope of anchor centroids against
/// anchor voltage.
fn voltage_direction(anchors: &[f64], centroids: &Array2<f64>) -> Result<Array1<f64>> {
    let v_mean = anchors.iter().sum::<f64>() / anchors.len() as f64;
    let c_mean = centroids.mean_axis(Axis(0)).expect("non-empty");
    let mut slope = Array1::<f64>::zeros(centroids.ncols());
    let mut sxx = 0.0;
    for (v, c) in anchors.iter().zip(centroids.axis_iter(Axis(0))) {
        slope += &((&c - &c_mean) * (v - v_mean));
        sxx += (v - v_mean).powi(2);
    }
    slope /= sxx;
    let norm = slope.dot(&slope).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Linalg(
            "centroids do not vary with voltage".to_string(),
        ));
    }
    Ok(slope / norm)
}

impl LdaModel {
    pub fn reservoir(&self) -> &Arc<ReservoirSpec> {
        &self.reservoir
    }

    pub fn subspace_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mu_e(&self) -> &Array1<f64> {
        &self.mu_e
    }

    pub fn whitener(&self) -> &Array2<f64> {
        &self.whitener
    }

    pub fn x_bar(&self) -> &Array1<f64> {
        &self.x_bar
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    /// One row per anchor.
    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn state_direction(&self) -> &Array1<f64> {
        &self.state_direction
    }

    pub fn bank_projection(&self) -> &Array2<f64> {
        &self.bank_projection
    }

    pub fn bank_labels(&self) -> &[usize] {
        &self.bank_labels
    }

    pub fn bank_signatures(&self) -> &[Signature] {
        &self.bank_signatures
    }

    /// A copy with a different (normalized) state direction.
    pub fn with_state_direction(&self, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.subspace_dim() || direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("bad state direction".to_string()));
        }
        let d = Array1::from(direction.to_vec());
        let norm = d.dot(&d).sqrt();
        if !(norm > 0.0) {
            return Err(Error::InvalidInput("zero state direction".to_string()));
        }
        Ok(Self {
            state_direction: d / norm,
            ..self.clone()
        })
    }

    /// `((whitener (e - mu_e)) - x_bar) W`.
    pub fn project_embedding(&self, e: &Array1<f64>) -> Result<Array1<f64>> {
        if e.len() != self.mu_e.len() {
            return Err(Error::InvalidInput(format!(
                "embedding has {} entries, expected {}",
                e.len(),
                self.mu_e.len()
            )));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite embedding".to_string()));
        }
        let white = self.whitener.dot(&(e - &self.mu_e)) - &self.x_bar;
        Ok(white.dot(&self.basis))
    }

    pub fn project_signature(&self, sig: &Signature) -> Result<Array1<f64>> {
        self.project_embedding(&self.reservoir.embed(sig)?)
    }

    pub fn geometry(&self) -> SubspaceGeometry {
        let n = self.bank_projection.nrows() as f64;
        let within_scatter = self
            .bank_projection
            .axis_iter(Axis(0))
            .zip(&self.bank_labels)
            .map(|(z, &l)| l2(&(&z - &self.centroids.row(l))))
            .sum::<f64>()
            / n;
        let k = self.centroids.nrows();
        let mut dists = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                dists.push(l2(&(&self.centroids.row(a) - &self.centroids.row(b))));
            }
        }
        SubspaceGeometry {
            within_scatter,
            mean_separation: dists.iter().sum::<f64>() / dists.len() as f64,
            min_separation: dists.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    /// Binary export. Layout: magic `MSLDA001`, reservoir parameters and
    /// channel bounds, then every fitted array as little-endian f64 with its
    /// dimensions.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let p = self.reservoir.params();
        for v in [p.n_memory, p.n_processor, p.n_layers] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in [p.dt, p.coupling_scale, p.field_scale, p.injection_scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.structural_seed.to_le_bytes());
        for (lo, hi) in self.reservoir.channel_bounds() {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&self.shrinkage.to_le_bytes());
        let d = self.mu_e.len();
        let q = self.basis.ncols();
        let k = self.anchors.len();
        let n = self.bank_labels.len();
        for v in [d, q, k, n] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let mut put = |xs: &mut dyn Iterator<Item = f64>| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(&mut self.mu_e.iter().copied());
        put(&mut self.whitener.iter().copied());
        put(&mut self.x_bar.iter().copied());
        put(&mut self.basis.iter().copied());
        put(&mut self.anchors.iter().copied());
        put(&mut self.centroids.iter().copied());
        put(&mut self.state_direction.iter().copied());
        put(&mut self.bank_projection.iter().copied());
        put(&mut self.bank_labels.iter().map(|&l| l as f64));
        for s in &self.bank_signatures {
            put(&mut s.values().iter().copied());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Inverse of [`to_bytes`](Self::to_bytes); rebuilds the reservoir from
    /// its stored parameters.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes, path);
        if cur.take(8)? != MODEL_MAGIC {
            return Err(Error::malformed(path, "bad magic"));
        }
        let n_memory = cur.u64()? as usize;
        let n_processor = cur.u64()? as usize;
        let n_layers = cur.u64()? as usize;
        let params = ReservoirParams {
            n_memory,
            n_processor,
            n_layers,
            dt: cur.f64()?,
            coupling_scale: cur.f64()?,
            field_scale: cur.f64()?,
            injection_scale: cur.f64()?,
            structural_seed: cur.u64()?,
        };
        if n_processor > C {
            return Err(Error::malformed(path, "bad reservoir parameters"));
        }
        let mut bounds = Vec::with_capacity(n_processor);
        for _ in 0..n_processor {
            bounds.push((cur.f64()?, cur.f64()?));
        }
        let reservoir = Arc::new(
            ReservoirSpec::new(params, bounds)
                .map_err(|e| Error::malformed(path, e.to_string()))?,
        );
        let shrinkage = cur.f64()?;
        let d = cur.u64()? as usize;
        let q = cur.u64()? as usize;
        let k = cur.u64()? as usize;
        let n = cur.u64()? as usize;
        if d != reservoir.embedding_dim() || q == 0 || k < 2 || n == 0 || d > 4096 || n > 1 << 24 {
            return Err(Error::malformed(path, "inconsistent model dimensions"));
        }
        let arr2 = |cur: &mut ByteCursor, r: usize, c: usize| -> Result<Array2<f64>> {
            Ok(Array2::from_shape_vec((r, c), cur.f64_vec(r * c)?).expect("sized"))
        };
        let mu_e = Array1::from(cur.f64_vec(d)?);
        let whitener = arr2(&mut cur, d, d)?;
        let x_bar = Array1::from(cur.f64_vec(d)?);
        let basis = arr2(&mut cur, d, q)?;
        let anchors = cur.f64_vec(k)?;
        let centroids = arr2(&mut cur, k, q)?;
        let state_direction = Array1::from(cur.f64_vec(q)?);
        let bank_projection = arr2(&mut cur, n, q)?;
        let bank_labels: Vec<usize> = cur.f64_vec(n)?.into_iter().map(|v| v as usize).collect();
        if bank_labels.iter().any(|&l| l >= k) {
            return Err(Error::malformed(path, "bank label out of range"));
        }
        let mut bank_signatures = Vec::with_capacity(n);
        for _ in 0..n {
            bank_signatures.push(
                Signature::from_row_major(&cur.f64_vec(T * C)?)
                    .map_err(|e| Error::malformed(path, e.to_string()))?,
            );
        }
        if !cur.is_at_end() {
            return Err(Error::malformed(path, "trailing bytes after model data"));
        }
        Ok(Self {
            reservoir,
            shrinkage,
            mu_e,
            whitener,
            x_bar,
            basis,
            anchors,
            centroids,
            state_direction,
            bank_projection,
            bank_labels,
            bank_signatures,
        })
    }
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Every intermediate of one modulation, for inspection and tests.
#[derive(Debug, Clone)]
pub struct ModulationTrace {
    pub delta: f64,
    pub beta: f64,
    pub z_base: Option<Array1<f64>>,
    pub z_pert: Option<Array1<f64>>,
    /// Bank indices of the retrieved neighbors, nearest first.
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub used_fallback: bool,
    pub decoded: Option<Signature>,
    /// Blend of base and decode, before amplitude scaling and broadening.
    pub blended: Signature,
    pub broadening_width: f64,
    pub output: Signature,
}

/// Dispersion of the pulse features: `std(u) / max(mean|u|, 1e-9)`, clipped
/// to `[0, 2]`.
pub fn u_dispersion(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    let std = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mean_abs = u.iter().map(|v| v.abs()).sum::<f64>() / n;
    (std / mean_abs.max(1e-9)).clamp(0.0, 2.0)
}

/// Applies the modulation chain to `base`. `soh = 1` returns `base` unchanged.
pub fn modulate(
    base: &Signature,
    soh: f64,
    u: &[f64],
    model: &LdaModel,
    config: &BridgeConfig,
) -> Result<Signature> {
    Ok(modulate_traced(base, soh, u, model, config, None)?.output)
}

/// Like [`modulate`], returning every intermediate. Pass `embedding` when the
/// base's reservoir embedding is already known.
pub fn modulate_traced(
    base: &Signature,
    soh: f64,
    u: &[f64],
    model: &LdaModel,
    config: &BridgeConfig,
    embedding: Option<&Array1<f64>>,
) -> Result<ModulationTrace> {
    if !(soh.is_finite() && soh > 0.0) {
        return Err(Error::InvalidInput(format!("soh {soh} must be > 0")));
    }
    if u.len() != U_DIM || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "u must hold {U_DIM} finite values"
        )));
    }
    let delta = (1.0 - soh).max(0.0);
    let magnitude = -config.gamma * delta;
    if magnitude == 0.0 {
        // No displacement: nothing to retrieve, blend, or shape.
        return Ok(ModulationTrace {
            delta,
            beta: 0.0,
            z_base: None,
            z_pert: None,
            neighbors: Vec::new(),
            weights: Vec::new(),
            used_fallback: false,
            decoded: None,
            blended: base.clone(),
            broadening_width: 0.0,
            output: base.clone(),
        });
    }

    let z_base = match embedding {
        Some(e) => model.project_embedding(e)?,
        None => model.project_signature(base)?,
    };
    let shift = model.state_direction() * magnitude;
    let z_pert = &z_base + &shift;

    let (neighbors, distances, used_fallback) =
        cone_neighbors(model, &z_base, &z_pert, &shift, config);
    let weights = softmin(&distances, config.tau);

    let mut decoded = Array2::<f64>::zeros((T, C));
    for (&i, &w) in neighbors.iter().zip(&weights) {
        decoded.scaled_add(w, &model.bank_signatures[i].values());
    }
    let beta = (config.blend_slope * delta).min(1.0);
    let blended = &base.values() * (1.0 - beta) + &decoded * beta;

    let amplitude = 1.0 - config.amp_scale_coeff * delta;
    let scaled = &blended * amplitude;
    let width =
        config.broaden_base_width * delta * (1.0 + config.broaden_u_coeff * u_dispersion(u));
    let output = gaussian_smooth(&scaled, width);

    Ok(ModulationTrace {
        delta,
        beta,
        z_base: Some(z_base),
        z_pert: Some(z_pert),
        neighbors,
        weights,
        used_fallback,
        decoded: Some(Signature::new(decoded)?),
        blended: Signature::new(blended)?,
        broadening_width: width,
        output: Signature::new(output)?,
    })
}

/// Up to `k_nn` bank points nearest `z_pert` among those whose displacement
/// from `z_base` lies within the cone around `shift`. An empty cone falls back
/// to the unrestricted nearest neighbors of `z_pert`.
fn cone_neighbors(
    model: &LdaModel,
    z_base: &Array1<f64>,
    z_pert: &Array1<f64>,
    shift: &Array1<f64>,
    config: &BridgeConfig,
) -> (Vec<usize>, Vec<f64>, bool) {
    let cos_limit = config.cone_half_angle_deg.to_radians().cos();
    let shift_norm = l2(shift);
    let dist_to_pert = |i: usize| l2(&(&model.bank_projection.row(i) - z_pert));

    let mut in_cone: Vec<(f64, usize)> = (0..model.bank_projection.nrows())
        .filter(|&i| {
            let disp = &model.bank_projection.row(i) - z_base;
            let norm = l2(&disp);
            norm > 0.0 && disp.dot(shift) / (norm * shift_norm) >= cos_limit
        })
        .map(|i| (dist_to_pert(i), i))
        .collect();
    let fallback = in_cone.is_empty();
    if fallback {
        in_cone = (0..model.bank_projection.nrows())
            .map(|i| (dist_to_pert(i), i))
            .collect();
    }
    in_cone.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    in_cone.truncate(config.k_nn);
    let (distances, neighbors) = in_cone.into_iter().unzip();
    (neighbors, distances, fallback)
}

/// `exp(-d_i / tau) / sum_j exp(-d_j / tau)`, evaluated relative to the
/// smallest distance. Terms that would underflow are floored at the smallest
/// normal float, so every weight stays positive.
pub fn softmin(distances: &[f64], tau: f64) -> Vec<f64> {
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = distances
        .iter()
        .map(|d| (-(d - d_min) / tau).exp().max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Convolves each column with a normalized Gaussian of std `width`
/// timesteps, replicating edge values. `width <= 0` is the identity.
pub fn gaussian_smooth(x: &Array2<f64>, width: f64) -> Array2<f64> {
    if !(width > 0.0) {
        return x.clone();
    }
    let radius = (4.0 * width).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * width * width)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let (rows, cols) = x.dim();
    let last = rows as isize - 1;
    let mut out = Array2::<f64>::zeros((rows, cols));
    for c in 0..cols {
        for t in 0..rows as isize {
            out[[t as usize, c]] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let src = (t + k as isize - radius).clamp(0, last) as usize;
                    w * x[[src, c]]
                })
                .sum();
        }
    }
    out
}
