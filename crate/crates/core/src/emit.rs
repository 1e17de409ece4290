//! Sample generation and dataset emission.
//!
//! A dataset directory holds:
//!
//! ```text
//! shards/part-0000.signals.bin   600 little-endian f64 per row, row-major
//! shards/part-0000.meta.csv      metadata rows with their byte offsets
//! ...
//! metadata.csv                   every row's metadata, no signals
//! model.bin                      the fitted discriminant model
//! manifest.json                  versions, config, seed, counts, time grid
//! SHA256SUMS                     "<hex>  <relative path>" for every file above
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anomaly::{inject_anomaly, SEVERITY_LEVELS};
use crate::bank::{BaseMode, MorphologyBank};
use crate::conditioning::{
    load_conditioning, second_life_label, ConditioningRecord, ConditioningSource,
};
use crate::config::{config_hash, derive_sample_seed, sha256_hex, BridgeConfig};
use crate::embed::ReservoirSpec;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::modulator::{fit_lda_model, modulate_traced, LdaModel};
use crate::noise::apply_noise;
use crate::record::{
    AnomalyOrigin, AnomalySubtype, Chemistry, GenerationRequest, Regime, SampleRecord, U_DIM,
};
use crate::regime::classify;
use crate::signature::{Signature, C, CHANNEL_NAMES, T};

/// SOC used by the noise stage for rows without conditioning.
pub const NEUTRAL_SOC: f64 = 50.0;
/// Bytes per stored signal.
pub const SIGNAL_BYTES: usize = T * C * 8;

const EMBED_CHUNK: usize = 64;

/// A bank, its fitted model, and the configuration they were built with.
#[derive(Debug, Clone)]
pub struct Bridge {
    bank: MorphologyBank,
    model: LdaModel,
    config: BridgeConfig,
    config_hash: String,
}

impl Bridge {
    /// Builds the reservoir from the bank and fits the discriminant model.
    pub fn fit(bank: MorphologyBank, config: BridgeConfig) -> Result<Self> {
        config.validate()?;
        let spec = Arc::new(ReservoirSpec::for_bank(&bank, config.reservoir_seed)?);
        let model = fit_lda_model(&bank, spec, config.lda_shrinkage)?;
        Self::with_model(bank, model, config)
    }

    pub fn with_model(bank: MorphologyBank, model: LdaModel, config: BridgeConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config_hash(&config);
        Ok(Self {
            bank,
            model,
            config,
            config_hash,
        })
    }

    /// Skips config validation. Only for probing degenerate settings such as
    /// a zero gain; datasets should come from validated bridges.
    pub fn with_model_unchecked(
        bank: MorphologyBank,
        model: LdaModel,
        config: BridgeConfig,
    ) -> Self {
        let config_hash = config_hash(&config);
        Self {
            bank,
            model,
            config,
            config_hash,
        }
    }

    pub fn bank(&self) -> &MorphologyBank {
        &self.bank
    }

    pub fn model(&self) -> &LdaModel {
        &self.model
    }

    pub fn config(&self) -> &BridgeConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// A copy with a replaced model, e.g. a different state direction.
    pub fn replace_model(&self, model: LdaModel) -> Self {
        Self {
            model,
            ..self.clone()
        }
    }

    /// Generates one record. Every random draw comes from
    /// `derive_sample_seed(master_seed, req.sample_id)`.
    pub fn generate_sample(
        &self,
        req: &GenerationRequest,
        master_seed: u64,
    ) -> Result<SampleRecord> {
        let mut staged = self.stage(req, master_seed)?;
        let embedding = match staged.needs_embedding {
            true => Some(self.model.reservoir().embed(&staged.base)?),
            false => None,
        };
        self.finish(req, &mut staged, embedding.as_ref())
    }

    /// Same records as calling [`generate_sample`](Self::generate_sample) on
    /// each request, with the reservoir run in batches.
    pub fn generate_batch(
        &self,
        reqs: &[GenerationRequest],
        master_seed: u64,
    ) -> Result<Vec<SampleRecord>> {
        let mut out = Vec::with_capacity(reqs.len());
        for chunk in reqs.chunks(EMBED_CHUNK) {
            let mut staged = chunk
                .iter()
                .map(|r| self.stage(r, master_seed))
                .collect::<Result<Vec<_>>>()?;
            let to_embed: Vec<Signature> = staged
                .iter()
                .filter(|s| s.needs_embedding)
                .map(|s| s.base.clone())
                .collect();
            let mut embeddings = self.model.reservoir().embed_batch(&to_embed)?.into_iter();
            for (req, s) in chunk.iter().zip(staged.iter_mut()) {
                let e = if s.needs_embedding {
                    embeddings.next()
                } else {
                    None
                };
                out.push(self.finish(req, s, e.as_ref())?);
            }
        }
        Ok(out)
    }

    /// Derives an anomalous child. Severity is the first draw of the child's
    /// own stream.
    pub fn derive_anomaly(
        &self,
        parent: &SampleRecord,
        child_id: &str,
        subtype: AnomalySubtype,
        master_seed: u64,
    ) -> Result<SampleRecord> {
        let seed = derive_sample_seed(master_seed, child_id);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let severity = SEVERITY_LEVELS[rng.random_range(0..SEVERITY_LEVELS.len())];
        inject_anomaly(
            parent,
            child_id,
            seed,
            subtype,
            severity,
            &self.config,
            &mut rng,
        )
    }

    /// The grounded chain (base draw, modulation, noise) at any voltage in the
    /// bank hull, without regime classification, from a stream seeded with
    /// `seed`. Grounded records equal this with their own generation seed.
    pub fn synthesize(
        &self,
        v: f64,
        soh: f64,
        soc: f64,
        u: &[f64],
        seed: u64,
    ) -> Result<Signature> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let base = self
            .bank
            .base_morphology(v, BaseMode::Stochastic, &mut rng)?;
        let shaped = modulate_traced(&base, soh, u, &self.model, &self.config, None)?.output;
        let sigma = self.bank.std(self.bank.nearest_anchor_index(v));
        apply_noise(&shaped, soc, sigma, &self.config, &mut rng)
    }

    fn stage(&self, req: &GenerationRequest, master_seed: u64) -> Result<Staged> {
        if req.sample_id.is_empty() {
            return Err(Error::InvalidInput("empty sample_id".to_string()));
        }
        let class = classify(req.voltage, &self.bank, &self.config)?;
        let grounded = match class.regime {
            Regime::Grounded => {
                let soh = req.soh.ok_or_else(|| missing(req, "soh"))?;
                let soc = req.soc.ok_or_else(|| missing(req, "soc"))?;
                let u = req.u.as_ref().ok_or_else(|| missing(req, "u"))?;
                let cell = req
                    .cell_id
                    .as_ref()
                    .ok_or_else(|| missing(req, "cell_id"))?;
                if !(soh > 0.0 && soh <= 1.0) || !soc.is_finite() || cell.is_empty() {
                    return Err(Error::InvalidInput(format!(
                        "request {}: soh must lie in (0, 1], soc must be finite, cell_id non-empty",
                        req.sample_id
                    )));
                }
                if u.len() != U_DIM || u.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "request {}: u must hold {U_DIM} finite values",
                        req.sample_id
                    )));
                }
                Some(soh)
            }
            Regime::RegimeB => {
                if req.soh.is_some() || req.u.is_some() {
                    return Err(Error::InvalidInput(format!(
                        "request {} at {} V is regime_b and must not carry soh or u",
                        req.sample_id, req.voltage
                    )));
                }
                None
            }
        };
        let seed = derive_sample_seed(master_seed, &req.sample_id);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let base = self
            .bank
            .base_morphology(req.voltage, BaseMode::Stochastic, &mut rng)?;
        let needs_embedding =
            grounded.is_some_and(|soh| self.config.gamma * (1.0 - soh).max(0.0) != 0.0);
        Ok(Staged {
            seed,
            rng,
            regime: class.regime,
            nearest_anchor: class.nearest_anchor,
            base,
            needs_embedding,
        })
    }

    fn finish(
        &self,
        req: &GenerationRequest,
        s: &mut Staged,
        embedding: Option<&Array1<f64>>,
    ) -> Result<SampleRecord> {
        let sigma = self.bank.std(self.bank.nearest_anchor_index(req.voltage));
        let record = match s.regime {
            Regime::Grounded => {
                let soh = req.soh.expect("checked");
                let soc = req.soc.expect("checked");
                let u = req.u.as_ref().expect("checked");
                let shaped =
                    modulate_traced(&s.base, soh, u, &self.model, &self.config, embedding)?.output;
                let signature = apply_noise(&shaped, soc, sigma, &self.config, &mut s.rng)?;
                let mut u_features = [0.0; U_DIM];
                u_features.copy_from_slice(u);
                SampleRecord {
                    signature,
                    sample_id: req.sample_id.clone(),
                    parent_sample_id: None,
                    cell_id: req.cell_id.clone(),
                    generation_seed: s.seed,
                    bridge_version: self.config.bridge_version.clone(),
                    bridge_config_hash: self.config_hash.clone(),
                    schema_version: self.config.schema_version.clone(),
                    voltage: req.voltage,
                    soc,
                    soh,
                    chemistry: Chemistry::Lfp,
                    regime: Regime::Grounded,
                    nearest_anchor: s.nearest_anchor,
                    u_features,
                    second_life_class: Some(second_life_label(soh)?),
                    anomaly_flag: false,
                    anomaly_subtype: AnomalySubtype::None,
                    anomaly_origin: AnomalyOrigin::None,
                    anomaly_severity: f64::NAN,
                }
            }
            Regime::RegimeB => {
                let signature = apply_noise(&s.base, NEUTRAL_SOC, sigma, &self.config, &mut s.rng)?;
                SampleRecord {
                    signature,
                    sample_id: req.sample_id.clone(),
                    parent_sample_id: None,
                    cell_id: None,
                    generation_seed: s.seed,
                    bridge_version: self.config.bridge_version.clone(),
                    bridge_config_hash: self.config_hash.clone(),
                    schema_version: self.config.schema_version.clone(),
                    voltage: req.voltage,
                    soc: f64::NAN,
                    soh: f64::NAN,
                    chemistry: Chemistry::Lfp,
                    regime: Regime::RegimeB,
                    nearest_anchor: s.nearest_anchor,
                    u_features: [f64::NAN; U_DIM],
                    second_life_class: None,
                    anomaly_flag: true,
                    anomaly_subtype: AnomalySubtype::None,
                    anomaly_origin: AnomalyOrigin::RegimeB,
                    anomaly_severity: f64::NAN,
                }
            }
        };
        Ok(record)
    }
}

fn missing(req: &GenerationRequest, field: &str) -> Error {
    Error::InvalidInput(format!(
        "grounded request {} at {} V lacks {field}",
        req.sample_id, req.voltage
    ))
}

/// A request after base drawing, holding the stream for the noise stage.
struct Staged {
    seed: u64,
    rng: ChaCha20Rng,
    regime: Regime,
    nearest_anchor: f64,
    base: Signature,
    needs_embedding: bool,
}

/// Convenience wrapper around [`Bridge::generate_sample`].
pub fn generate_sample(
    req: &GenerationRequest,
    bridge: &Bridge,
    master_seed: u64,
) -> Result<SampleRecord> {
    bridge.generate_sample(req, master_seed)
}

// ---- plans -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    Release,
    DemoSmall,
}

impl PlanKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Release => "release",
            Self::DemoSmall => "demo-small",
        }
    }
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "release" => Ok(Self::Release),
            "demo-small" => Ok(Self::DemoSmall),
            _ => Err(Error::InvalidInput(format!(
                "unknown plan {s:?} (expected release or demo-small)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub name: String,
    pub n_grounded: usize,
    pub n_anomaly: usize,
    pub n_regime_b: usize,
    /// Regime-B voltages, cycled in order; each request sits exactly on one.
    pub regime_b_voltages: Vec<f64>,
    pub n_shards: usize,
    pub conditioning: ConditioningSource,
    pub master_seed: u64,
}

impl DatasetPlan {
    pub fn new(kind: PlanKind, conditioning: ConditioningSource, master_seed: u64) -> Self {
        let (n_grounded, n_anomaly, n_regime_b) = match kind {
            PlanKind::Release => (5600, 600, 560),
            PlanKind::DemoSmall => (560, 60, 60),
        };
        Self {
            name: kind.as_str().to_string(),
            n_grounded,
            n_anomaly,
            n_regime_b,
            regime_b_voltages: vec![2.54, 2.81, 3.00],
            n_shards: 5,
            conditioning,
            master_seed,
        }
    }

    pub fn total(&self) -> usize {
        self.n_grounded + self.n_anomaly + self.n_regime_b
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(format!("plan {}: {m}", self.name)));
        if self.n_grounded == 0 {
            return fail("needs at least one grounded row".into());
        }
        if self.n_anomaly % AnomalySubtype::INJECTABLE.len() != 0 {
            return fail(format!(
                "anomaly count {} is not divisible by 4",
                self.n_anomaly
            ));
        }
        if self.n_anomaly > self.n_grounded {
            return fail("more anomalies than clean parents".into());
        }
        if self.n_regime_b > 0 && self.regime_b_voltages.is_empty() {
            return fail("no regime_b voltages".into());
        }
        if self.n_shards == 0 || self.total() % self.n_shards != 0 {
            return fail(format!(
                "{} rows do not divide into {} equal shards",
                self.total(),
                self.n_shards
            ));
        }
        Ok(())
    }
}

/// One anomaly row of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyRequest {
    pub child_id: String,
    /// Index into the grounded requests.
    pub parent: usize,
    pub subtype: AnomalySubtype,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRequests {
    pub grounded: Vec<GenerationRequest>,
    pub anomalies: Vec<AnomalyRequest>,
    pub regime_b: Vec<GenerationRequest>,
}

/// Grounded requests: voltages uniform over the grounded range from `rng`,
/// cells assigned round-robin. Ids are `{prefix}-000000`, ...
pub fn grounded_requests<R: Rng + ?Sized>(
    n: usize,
    prefix: &str,
    cells: &[ConditioningRecord],
    config: &BridgeConfig,
    rng: &mut R,
) -> Result<Vec<GenerationRequest>> {
    if cells.is_empty() {
        return Err(Error::InvalidInput("no conditioning records".to_string()));
    }
    let [lo, hi] = config.grounded_range;
    Ok((0..n)
        .map(|i| {
            let cell = &cells[i % cells.len()];
            let v = rng.random_range(lo..=hi);
            GenerationRequest::grounded(
                format!("{prefix}-{i:06}"),
                v,
                cell.soc,
                cell.soh,
                cell.u.to_vec(),
                cell.cell_id.clone(),
            )
        })
        .collect())
}

/// Expands a plan into concrete requests. All plan-level draws come from
/// `derive_sample_seed(master_seed, "plan")`.
pub fn plan_requests(
    plan: &DatasetPlan,
    cells: &[ConditioningRecord],
    config: &BridgeConfig,
) -> Result<PlannedRequests> {
    plan.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(plan.master_seed, "plan"));
    let grounded = grounded_requests(plan.n_grounded, "g", cells, config, &mut rng)?;
    let anomalies = anomaly_blocks(&grounded, &mut rng)
        .into_iter()
        .flat_map(|block| block.into_iter().zip(AnomalySubtype::INJECTABLE))
        .take(plan.n_anomaly)
        .enumerate()
        .map(|(j, (parent, subtype))| AnomalyRequest {
            child_id: format!("a-{j:06}"),
            parent,
            subtype,
        })
        .collect();
    let regime_b = (0..plan.n_regime_b)
        .map(|i| {
            let v = plan.regime_b_voltages[i % plan.regime_b_voltages.len()];
            GenerationRequest::regime_b(format!("b-{i:06}"), v)
        })
        .collect();
    Ok(PlannedRequests {
        grounded,
        anomalies,
        regime_b,
    })
}

/// Random parent blocks: each cell's rows are shuffled and cut into runs of
/// one row per subtype, then the runs are shuffled with complete runs ahead
/// of short ones. A block carries every subtype, so any subset that holds a
/// block's cell sees all four.
fn anomaly_blocks<R: Rng>(grounded: &[GenerationRequest], rng: &mut R) -> Vec<Vec<usize>> {
    let width = AnomalySubtype::INJECTABLE.len();
    let mut by_cell: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in grounded.iter().enumerate() {
        by_cell
            .entry(r.cell_id.as_deref().unwrap_or(""))
            .or_default()
            .push(i);
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for (_, mut rows) in by_cell {
        rows.shuffle(rng);
        blocks.extend(rows.chunks(width).map(<[usize]>::to_vec));
    }
    blocks.shuffle(rng);
    blocks.sort_by_key(|b| b.len() < width);
    blocks
}

/// Generates every row of a plan, in emission order: grounded, anomalies,
/// Regime B.
pub fn generate_plan(plan: &DatasetPlan, bridge: &Bridge) -> Result<Vec<SampleRecord>> {
    let cells = load_conditioning(&plan.conditioning)?;
    let reqs = plan_requests(plan, &cells, bridge.config())?;
    let mut rows = bridge.generate_batch(&reqs.grounded, plan.master_seed)?;
    for a in &reqs.anomalies {
        let child =
            bridge.derive_anomaly(&rows[a.parent], &a.child_id, a.subtype, plan.master_seed)?;
        rows.push(child);
    }
    rows.extend(bridge.generate_batch(&reqs.regime_b, plan.master_seed)?);
    Ok(rows)
}

// ---- manifest and files ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub grounded_clean: usize,
    pub anomaly: usize,
    pub regime_b: usize,
    pub anomaly_subtypes: BTreeMap<String, usize>,
}

impl Counts {
    pub fn of(rows: &[SampleRecord]) -> Self {
        let mut anomaly_subtypes: BTreeMap<String, usize> = AnomalySubtype::INJECTABLE
            .iter()
            .map(|s| (s.as_str().to_string(), 0))
            .collect();
        for r in rows {
            if r.anomaly_subtype != AnomalySubtype::None {
                *anomaly_subtypes
                    .entry(r.anomaly_subtype.as_str().to_string())
                    .or_default() += 1;
            }
        }
        Self {
            total: rows.len(),
            grounded_clean: rows.iter().filter(|r| r.is_clean_grounded()).count(),
            anomaly: rows
                .iter()
                .filter(|r| r.anomaly_subtype != AnomalySubtype::None)
                .count(),
            regime_b: rows.iter().filter(|r| r.regime == Regime::RegimeB).count(),
            anomaly_subtypes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub bridge_version: String,
    pub schema_version: String,
    pub config_hash: String,
    pub config: BridgeConfig,
    pub master_seed: u64,
    pub plan: String,
    pub conditioning: String,
    pub counts: Counts,
    pub channels: Vec<String>,
    pub time_norm: Vec<f64>,
    pub shards: Vec<String>,
    pub rows_per_shard: usize,
    pub model_file: String,
    pub model_sha256: String,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const CHECKSUM_FILE: &str = "SHA256SUMS";

/// 100 evenly spaced points on `[0, 1]`.
pub fn time_norm() -> Vec<f64> {
    (0..T).map(|t| t as f64 / (T - 1) as f64).collect()
}

fn shard_stem(i: usize) -> String {
    format!("shards/part-{i:04}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitSummary {
    pub out_dir: PathBuf,
    pub counts: Counts,
    pub config_hash: String,
    pub files: Vec<String>,
}

/// Generates a plan and writes the dataset directory.
pub fn emit_dataset(plan: &DatasetPlan, bridge: &Bridge, out_dir: &Path) -> Result<EmitSummary> {
    plan.validate()?;
    let rows = generate_plan(plan, bridge)?;
    write_dataset(plan, bridge, &rows, out_dir)
}

/// Writes already-generated rows as a dataset directory.
pub fn write_dataset(
    plan: &DatasetPlan,
    bridge: &Bridge,
    rows: &[SampleRecord],
    out_dir: &Path,
) -> Result<EmitSummary> {
    if plan.n_shards == 0 || rows.len() % plan.n_shards != 0 {
        return Err(Error::InvalidInput(format!(
            "{} rows do not divide into {} equal shards",
            rows.len(),
            plan.n_shards
        )));
    }
    let per_shard = rows.len() / plan.n_shards;
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut shard_names = Vec::new();
    let mut all_meta = MetadataWriter::new();
    for (i, chunk) in rows.chunks(per_shard).enumerate() {
        let stem = shard_stem(i);
        let mut signals = Vec::with_capacity(chunk.len() * SIGNAL_BYTES);
        let mut meta = MetadataWriter::new();
        for r in chunk {
            let offset = signals.len() as u64;
            signals.extend_from_slice(&r.signature.to_le_bytes());
            meta.push(r, i, offset)?;
            all_meta.push(r, i, offset)?;
        }
        files.push((format!("{stem}.signals.bin"), signals));
        files.push((format!("{stem}.meta.csv"), meta.finish()?));
        shard_names.push(stem);
    }
    files.push((METADATA_FILE.to_string(), all_meta.finish()?));
    let model_bytes = bridge.model().to_bytes();
    let model_sha256 = sha256_hex(&model_bytes);
    files.push((MODEL_FILE.to_string(), model_bytes));

    let manifest = Manifest {
        bridge_version: bridge.config().bridge_version.clone(),
        schema_version: bridge.config().schema_version.clone(),
        config_hash: bridge.config_hash().to_string(),
        config: bridge.config().clone(),
        master_seed: plan.master_seed,
        plan: plan.name.clone(),
        conditioning: plan.conditioning.to_string(),
        counts: Counts::of(rows),
        channels: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        time_norm: time_norm(),
        shards: shard_names,
        rows_per_shard: per_shard,
        model_file: MODEL_FILE.to_string(),
        model_sha256,
    };
    let mut manifest_text = serde_json::to_string_pretty(&manifest)?;
    manifest_text.push('\n');
    files.push((MANIFEST_FILE.to_string(), manifest_text.into_bytes()));

    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut sums = String::new();
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
        sums.push_str(&format!("{}  {name}\n", sha256_hex(bytes)));
    }
    write_atomic(&out_dir.join(CHECKSUM_FILE), sums.as_bytes())?;
    let mut names: Vec<String> = files.into_iter().map(|(n, _)| n).collect();
    names.push(CHECKSUM_FILE.to_string());
    Ok(EmitSummary {
        out_dir: out_dir.to_path_buf(),
        counts: manifest.counts,
        config_hash: manifest.config_hash,
        files: names,
    })
}

// ---- metadata tables -------------------------------------------------------

/// Column order of `metadata.csv` and every shard's `.meta.csv`.
pub fn metadata_columns() -> Vec<String> {
    let mut cols: Vec<String> = [
        "sample_id",
        "parent_sample_id",
        "cell_id",
        "generation_seed",
        "bridge_version",
        "bridge_config_hash",
        "schema_version",
        "voltage",
        "soc",
        "soh",
        "chemistry",
        "regime",
        "nearest_anchor",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=U_DIM).map(|j| format!("u_{j}")));
    cols.extend(
        [
            "second_life_class",
            "anomaly_flag",
            "anomaly_subtype",
            "anomaly_origin",
            "anomaly_severity",
            "shard",
            "byte_offset",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols
}

struct MetadataWriter {
    inner: csv::Writer<Vec<u8>>,
}

impl MetadataWriter {
    fn new() -> Self {
        let mut inner = csv::Writer::from_writer(Vec::new());
        inner
            .write_record(metadata_columns())
            .expect("writing to memory");
        Self { inner }
    }

    fn push(&mut self, r: &SampleRecord, shard: usize, offset: u64) -> Result<()> {
        let mut row: Vec<String> = vec![
            r.sample_id.clone(),
            r.parent_sample_id.clone().unwrap_or_default(),
            r.cell_id.clone().unwrap_or_default(),
            r.generation_seed.to_string(),
            r.bridge_version.clone(),
            r.bridge_config_hash.clone(),
            r.schema_version.clone(),
            r.voltage.to_string(),
            r.soc.to_string(),
            r.soh.to_string(),
            r.chemistry.to_string(),
            r.regime.to_string(),
            r.nearest_anchor.to_string(),
        ];
        row.extend(r.u_features.iter().map(|u| u.to_string()));
        row.extend([
            r.second_life_class
                .map_or_else(|| "NaN".to_string(), |c| c.to_string()),
            r.anomaly_flag.to_string(),
            r.anomaly_subtype.to_string(),
            r.anomaly_origin.to_string(),
            r.anomaly_severity.to_string(),
            shard.to_string(),
            offset.to_string(),
        ]);
        self.inner.write_record(&row)?;
        Ok(())
    }

    fn finish(self) -> Result<Vec<u8>> {
        self.inner
            .into_inner()
            .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
    }
}

/// A metadata row: everything but the signal, plus its storage location.
#[derive(Debug, Clone, PartialEq)]
pub struct MetadataRow {
    pub record: SampleRecord,
    pub shard: usize,
    pub byte_offset: u64,
}

/// Reads a metadata table. Signatures are left as zeros.
pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers != metadata_columns() {
        return Err(Error::malformed(path, "unexpected metadata columns"));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = parse_row(&rec)
            .map_err(|m| Error::malformed(path, format!("row {}: {m}", line + 1)))?;
        out.push(row);
    }
    Ok(out)
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<MetadataRow, String> {
    let mut fields = rec.iter();
    let mut next = |name: &str| fields.next().ok_or_else(|| format!("missing {name}"));
    fn num<V: FromStr>(s: &str, name: &str) -> std::result::Result<V, String> {
        s.parse().map_err(|_| format!("bad {name} {s:?}"))
    }
    fn opt(s: &str) -> Option<String> {
        (!s.is_empty()).then(|| s.to_string())
    }
    let sample_id = next("sample_id")?.to_string();
    let parent_sample_id = opt(next("parent_sample_id")?);
    let cell_id = opt(next("cell_id")?);
    let generation_seed = num(next("generation_seed")?, "generation_seed")?;
    let bridge_version = next("bridge_version")?.to_string();
    let bridge_config_hash = next("bridge_config_hash")?.to_string();
    let schema_version = next("schema_version")?.to_string();
    let voltage = num(next("voltage")?, "voltage")?;
    let soc = num(next("soc")?, "soc")?;
    let soh = num(next("soh")?, "soh")?;
    let chemistry: Chemistry = num(next("chemistry")?, "chemistry")?;
    let regime: Regime = num(next("regime")?, "regime")?;
    let nearest_anchor = num(next("nearest_anchor")?, "nearest_anchor")?;
    let mut u_features = [0.0; U_DIM];
    for u in u_features.iter_mut() {
        *u = num(next("u")?, "u")?;
    }
    let slc = next("second_life_class")?;
    let second_life_class = if slc == "NaN" {
        None
    } else {
        Some(num(slc, "second_life_class")?)
    };
    let anomaly_flag = num(next("anomaly_flag")?, "anomaly_flag")?;
    let anomaly_subtype = num(next("anomaly_subtype")?, "anomaly_subtype")?;
    let anomaly_origin = num(next("anomaly_origin")?, "anomaly_origin")?;
    let anomaly_severity = num(next("anomaly_severity")?, "anomaly_severity")?;
    let shard = num(next("shard")?, "shard")?;
    let byte_offset = num(next("byte_offset")?, "byte_offset")?;
    Ok(MetadataRow {
        record: SampleRecord {
            signature: Signature::zeros(),
            sample_id,
            parent_sample_id,
            cell_id,
            generation_seed,
            bridge_version,
            bridge_config_hash,
            schema_version,
            voltage,
            soc,
            soh,
            chemistry,
            regime,
            nearest_anchor,
            u_features,
            second_life_class,
            anomaly_flag,
            anomaly_subtype,
            anomaly_origin,
            anomaly_severity,
        },
        shard,
        byte_offset,
    })
}

/// Loads every row of a dataset directory, in `metadata.csv` order, with
/// signals read from the shards.
pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = Manifest::read(dir)?;
    let mut shard_bytes = Vec::with_capacity(manifest.shards.len());
    for stem in &manifest.shards {
        let path = dir.join(format!("{stem}.signals.bin"));
        shard_bytes.push(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let meta_path = dir.join(METADATA_FILE);
    read_metadata(&meta_path)?
        .into_iter()
        .map(|row| {
            let bytes = shard_bytes.get(row.shard).ok_or_else(|| {
                Error::malformed(&meta_path, format!("unknown shard {}", row.shard))
            })?;
            let start = row.byte_offset as usize;
            let block = bytes.get(start..start + SIGNAL_BYTES).ok_or_else(|| {
                Error::malformed(
                    &meta_path,
                    format!("{} points past its shard", row.record.sample_id),
                )
            })?;
            let signature = Signature::from_le_bytes(block).map_err(|e| {
                Error::malformed(&meta_path, format!("{}: {e}", row.record.sample_id))
            })?;
            Ok(SampleRecord {
                signature,
                ..row.record
            })
        })
        .collect()
}

// ---- audits ----------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub rows: usize,
    pub duplicate_sample_ids: usize,
    pub duplicate_signal_hashes: usize,
    pub non_finite_entries: usize,
    pub wrong_length_signals: usize,
    pub id_mismatches: usize,
    pub invalid_parents: usize,
    pub regime_flag_inconsistencies: usize,
}

impl IntegrityReport {
    pub fn checks(&self) -> [(&'static str, usize); 7] {
        [
            ("duplicate_sample_ids", self.duplicate_sample_ids),
            ("duplicate_signal_hashes", self.duplicate_signal_hashes),
            ("non_finite_entries", self.non_finite_entries),
            ("wrong_length_signals", self.wrong_length_signals),
            ("id_mismatches", self.id_mismatches),
            ("invalid_parents", self.invalid_parents),
            (
                "regime_flag_inconsistencies",
                self.regime_flag_inconsistencies,
            ),
        ]
    }

    pub fn violations(&self) -> usize {
        self.checks().iter().map(|(_, n)| n).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.violations() == 0
    }
}

/// Scans the shards and metadata of a dataset directory. Content problems are
/// counted; unreadable or unparsable files are errors.
pub fn audit_integrity(dir: &Path) -> Result<IntegrityReport> {
    let manifest = Manifest::read(dir)?;
    let mut report = IntegrityReport::default();
    let mut seen_ids = HashSet::new();
    let mut seen_hashes = HashSet::new();
    let mut rows: Vec<SampleRecord> = Vec::new();
    for stem in &manifest.shards {
        let signal_path = dir.join(format!("{stem}.signals.bin"));
        let bytes = std::fs::read(&signal_path).map_err(|e| Error::io(&signal_path, e))?;
        if bytes.len() % SIGNAL_BYTES != 0 {
            report.wrong_length_signals += 1;
        }
        for row in read_metadata(&dir.join(format!("{stem}.meta.csv")))? {
            report.rows += 1;
            if !seen_ids.insert(row.record.sample_id.clone()) {
                report.duplicate_sample_ids += 1;
            }
            let start = row.byte_offset as usize;
            match bytes.get(start..start + SIGNAL_BYTES) {
                Some(block) if start % SIGNAL_BYTES == 0 => {
                    let hash: [u8; 32] = Sha256::digest(block).into();
                    if !seen_hashes.insert(hash) {
                        report.duplicate_signal_hashes += 1;
                    }
                    report.non_finite_entries += block
                        .chunks_exact(8)
                        .filter(|b| {
                            !f64::from_le_bytes((*b).try_into().expect("8 bytes")).is_finite()
                        })
                        .count();
                }
                _ => report.wrong_length_signals += 1,
            }
            rows.push(row.record);
        }
    }

    let listed: HashSet<String> = read_metadata(&dir.join(METADATA_FILE))?
        .into_iter()
        .map(|r| r.record.sample_id)
        .collect();
    report.id_mismatches = listed.symmetric_difference(&seen_ids).count();

    let by_id: HashMap<&str, &SampleRecord> =
        rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    for r in &rows {
        if r.anomaly_subtype != AnomalySubtype::None {
            let parent_ok = r
                .parent_sample_id
                .as_deref()
                .and_then(|p| by_id.get(p))
                .is_some_and(|p| {
                    p.is_clean_grounded() && p.anomaly_subtype == AnomalySubtype::None
                });
            if !parent_ok {
                report.invalid_parents += 1;
            }
        }
        if !r.invariant_violations().is_empty() {
            report.regime_flag_inconsistencies += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecksumReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl ChecksumReport {
    pub fn is_ok(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Recomputes every digest listed in `SHA256SUMS`.
pub fn verify_checksums(dir: &Path) -> Result<ChecksumReport> {
    let path = dir.join(CHECKSUM_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut report = ChecksumReport::default();
    for (i, line) in text.lines().enumerate() {
        let (digest, name) = line
            .split_once("  ")
            .filter(|(d, n)| d.len() == 64 && !n.is_empty())
            .ok_or_else(|| Error::malformed(&path, format!("line {}", i + 1)))?;
        report.checked += 1;
        match std::fs::read(dir.join(name)) {
            Ok(bytes) if sha256_hex(&bytes) == digest => {}
            Ok(_) => report.mismatched.push(name.to_string()),
            Err(_) => report.missing.push(name.to_string()),
        }
    }
    Ok(report)
}
