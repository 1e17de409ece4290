//! Static feature descriptor, linear and nearest-neighbor readouts, the four
//! downstream tasks, and the ablation runner.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use ndarray_linalg::{EigValsh, Solve, UPLO};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{second_life_label, shuffle_soh, ConditioningRecord};
use crate::config::{derive_sample_seed, sha256_hex};
use crate::emit::{grounded_requests, Bridge};
use crate::error::{Error, Result};
use crate::record::{AnomalySubtype, GenerationRequest, Regime, SampleRecord, SecondLifeClass};
use crate::signature::{Signature, C, T};
use crate::splits::{build_split, SplitAssignment, SplitStrategy, DEFAULT_RATIOS};
use crate::validate::pearson;

// ---- features --------------------------------------------------------------

pub const FEATURES_PER_CHANNEL: usize = 9;
pub const N_FEATURES: usize = C * FEATURES_PER_CHANNEL + CORRELATION_PAIRS.len();
/// (B_s1Y, B_s2Y), (B_s1Z, B_s2Z), (B_s1C5, B_s2C6).
pub const CORRELATION_PAIRS: [(usize, usize); 3] = [(0, 2), (1, 3), (4, 5)];

pub fn feature_names() -> Vec<String> {
    let per = [
        "mean",
        "std",
        "min",
        "max",
        "delta",
        "variation",
        "slope",
        "energy",
        "extremum_pos",
    ];
    let mut out = Vec::with_capacity(N_FEATURES);
    for name in crate::signature::CHANNEL_NAMES {
        out.extend(per.iter().map(|f| format!("{name}_{f}")));
    }
    for (a, b) in CORRELATION_PAIRS {
        out.push(format!(
            "corr_{}_{}",
            crate::signature::CHANNEL_NAMES[a],
            crate::signature::CHANNEL_NAMES[b]
        ));
    }
    out
}

/// Per channel: mean, population std, min, max, last minus first, total
/// absolute variation, mean absolute slope, mean square, and the position of
/// the largest deviation from the mean divided by `T`. Then the three
/// cross-sensor correlations.
pub fn extract_features(sig: &Signature) -> [f64; N_FEATURES] {
    let mut out = [0.0; N_FEATURES];
    for c in 0..C {
        let x = sig.channel(c);
        let n = T as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let variation: f64 = x.windows(2).into_iter().map(|w| (w[1] - w[0]).abs()).sum();
        let energy = x.iter().map(|v| v * v).sum::<f64>() / n;
        let mut arg = 0;
        for t in 1..T {
            if (x[t] - mean).abs() > (x[arg] - mean).abs() {
                arg = t;
            }
        }
        let f = &mut out[c * FEATURES_PER_CHANNEL..(c + 1) * FEATURES_PER_CHANNEL];
        f.copy_from_slice(&[
            mean,
            var.sqrt(),
            min,
            max,
            x[T - 1] - x[0],
            variation,
            variation / (T - 1) as f64,
            energy,
            arg as f64 / n,
        ]);
    }
    for (i, (a, b)) in CORRELATION_PAIRS.iter().enumerate() {
        let xa = sig.channel(*a).to_vec();
        let xb = sig.channel(*b).to_vec();
        out[C * FEATURES_PER_CHANNEL + i] = pearson(&xa, &xb);
    }
    out
}

pub fn feature_matrix(rows: &[&SampleRecord]) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), N_FEATURES));
    for (mut out, r) in m.axis_iter_mut(Axis(0)).zip(rows) {
        out.assign(&Array1::from(extract_features(&r.signature).to_vec()));
    }
    m
}

// ---- readouts --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    RidgeRegressor,
    RidgeClassifier,
    Logistic,
    KnnClassifier,
}

impl Readout {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RidgeRegressor => "ridge_regressor",
            Self::RidgeClassifier => "ridge_classifier",
            Self::Logistic => "logistic",
            Self::KnnClassifier => "knn_classifier",
        }
    }

    fn grid(self) -> &'static [f64] {
        match self {
            Self::KnnClassifier => &[KNN_K as f64],
            _ => &LAMBDA_GRID,
        }
    }
}

pub const LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const KNN_K: usize = 5;
const LOGISTIC_TOL: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 5000;

/// Predictions of one fitted readout on a test matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Regression outputs, or class indices as floats.
    pub values: Vec<f64>,
    /// Per-class scores for classifiers (higher means more likely).
    pub scores: Option<Array2<f64>>,
}

/// Column means and scales of the training matrix; constant columns scale
/// by 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 { s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }
}

/// Ridge with an unpenalized intercept: minimizes
/// `|y - b - X w|^2 + lambda |w|^2`.
pub fn ridge_fit(x: &Array2<f64>, y: &Array1<f64>, lambda: f64) -> Result<(Array1<f64>, f64)> {
    let xm = x.mean_axis(Axis(0)).expect("non-empty");
    let ym = y.mean().expect("non-empty");
    let xc = x - &xm;
    let yc = y - ym;
    let mut gram = xc.t().dot(&xc);
    for i in 0..gram.nrows() {
        gram[[i, i]] += lambda;
    }
    let w = gram
        .solve(&xc.t().dot(&yc))
        .map_err(|e| Error::Linalg(format!("ridge solve: {e}")))?;
    let b = ym - xm.dot(&w);
    Ok((w, b))
}

fn check_training(x: &Array2<f64>, y: &[f64], test: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::InvalidInput(
            "empty or mismatched training data".to_string(),
        ));
    }
    if x.iter().chain(test.iter()).chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "non-finite features or labels".to_string(),
        ));
    }
    Ok(())
}

/// Fits `kind` on standardized training features and predicts `test`.
/// Classification labels are class indices in `0..n_classes`; `hyper` is the
/// ridge/logistic penalty or the neighbor count.
pub fn fit_predict_readout(
    kind: Readout,
    train_x: &Array2<f64>,
    train_y: &[f64],
    n_classes: usize,
    test_x: &Array2<f64>,
    hyper: f64,
) -> Result<Prediction> {
    check_training(train_x, train_y, test_x)?;
    let st = Standardizer::fit(train_x);
    let x = st.apply(train_x);
    let tx = st.apply(test_x);
    let classes: Vec<usize> = train_y.iter().map(|&v| v as usize).collect();
    if kind != Readout::RidgeRegressor {
        for k in 0..n_classes {
            if !classes.contains(&k) {
                return Err(Error::InvalidInput(format!(
                    "class {k} has no training rows"
                )));
            }
        }
    }
    match kind {
        Readout::RidgeRegressor => {
            let (w, b) = ridge_fit(&x, &Array1::from(train_y.to_vec()), hyper)?;
            Ok(Prediction {
                values: (tx.dot(&w) + b).to_vec(),
                scores: None,
            })
        }
        Readout::RidgeClassifier => {
            let mut scores = Array2::zeros((tx.nrows(), n_classes));
            for k in 0..n_classes {
                let target: Array1<f64> = classes
                    .iter()
                    .map(|&c| if c == k { 1.0 } else { -1.0 })
                    .collect();
                let (w, b) = ridge_fit(&x, &target, hyper)?;
                scores.column_mut(k).assign(&(tx.dot(&w) + b));
            }
            Ok(from_scores(scores))
        }
        Readout::Logistic => {
            let probs = logistic_fit_predict(&x, &classes, n_classes, &tx, hyper)?;
            Ok(from_scores(probs))
        }
        Readout::KnnClassifier => Ok(from_scores(knn_votes(
            &x,
            &classes,
            n_classes,
            &tx,
            hyper as usize,
        ))),
    }
}

fn from_scores(scores: Array2<f64>) -> Prediction {
    let values = scores
        .axis_iter(Axis(0))
        .map(|row| argmax(row.as_slice().expect("contiguous")) as f64)
        .collect();
    Prediction {
        values,
        scores: Some(scores),
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression with an L2 penalty on the weights, by
/// gradient descent with step `1/L`.
fn logistic_fit_predict(
    x: &Array2<f64>,
    y: &[usize],
    k: usize,
    test: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let n = x.nrows();
    let d = x.ncols();
    let mut xa = Array2::<f64>::ones((n, d + 1));
    xa.slice_mut(s![.., 1..]).assign(x);
    let mut onehot = Array2::<f64>::zeros((n, k));
    for (i, &c) in y.iter().enumerate() {
        onehot[[i, c]] = 1.0;
    }
    let gram_max = xa
        .t()
        .dot(&xa)
        .eigvalsh(UPLO::Lower)
        .map_err(|e| Error::Linalg(format!("logistic step size: {e}")))?
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * gram_max / n as f64 + lambda);
    let mut w = Array2::<f64>::zeros((d + 1, k));
    for _ in 0..LOGISTIC_MAX_ITER {
        let p = softmax_rows(xa.dot(&w));
        let mut grad = xa.t().dot(&(p - &onehot)) / n as f64;
        let mut penalty = w.clone() * lambda;
        penalty.row_mut(0).fill(0.0);
        grad += &penalty;
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < LOGISTIC_TOL {
            break;
        }
        w.scaled_add(-step, &grad);
    }
    let mut ta = Array2::<f64>::ones((test.nrows(), d + 1));
    ta.slice_mut(s![.., 1..]).assign(test);
    Ok(softmax_rows(ta.dot(&w)))
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

/// Vote fractions among the `k` nearest training rows (ties in distance go
/// to the lower row index). Ties in votes resolve to the lowest class via
/// the argmax.
fn knn_votes(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    test: &Array2<f64>,
    k: usize,
) -> Array2<f64> {
    let k = k.clamp(1, x.nrows());
    let mut votes = Array2::zeros((test.nrows(), n_classes));
    for (i, q) in test.axis_iter(Axis(0)).enumerate() {
        let mut d: Vec<(f64, usize)> = x
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(j, r)| ((&r - &q).mapv(|v| v * v).sum(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in &d[..k] {
            votes[[i, y[j]]] += 1.0 / k as f64;
        }
    }
    votes
}

// ---- metrics ---------------------------------------------------------------

pub fn r2_score(y: &[f64], pred: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn mae(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

/// Mean recall over the classes present in `y`.
pub fn balanced_accuracy(y: &[usize], pred: &[usize]) -> f64 {
    let mut hit: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y.iter().zip(pred) {
        let e = hit.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    hit.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hit.len() as f64
}

/// F1 of class 1.
pub fn f1_positive(y: &[usize], pred: &[usize]) -> f64 {
    let tp = y
        .iter()
        .zip(pred)
        .filter(|(t, p)| **t == 1 && **p == 1)
        .count() as f64;
    let fp = y
        .iter()
        .zip(pred)
        .filter(|(t, p)| **t != 1 && **p == 1)
        .count() as f64;
    let fn_ = y
        .iter()
        .zip(pred)
        .filter(|(t, p)| **t == 1 && **p != 1)
        .count() as f64;
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Area under the ROC curve of `score` for class 1, counting ties as half.
pub fn auroc(y: &[usize], score: &[f64]) -> f64 {
    let pos: Vec<f64> = y
        .iter()
        .zip(score)
        .filter(|(t, _)| **t == 1)
        .map(|(_, s)| *s)
        .collect();
    let neg: Vec<f64> = y
        .iter()
        .zip(score)
        .filter(|(t, _)| **t != 1)
        .map(|(_, s)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (pos.len() * neg.len()) as f64
}

// ---- tasks -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    T1SohRegression,
    T2SecondLife,
    T3Anomaly3Way,
    T4Subtype4Way,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::T1SohRegression,
        Task::T2SecondLife,
        Task::T3Anomaly3Way,
        Task::T4Subtype4Way,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T1SohRegression => "T1_soh_regression",
            Self::T2SecondLife => "T2_second_life",
            Self::T3Anomaly3Way => "T3_anomaly_3way",
            Self::T4Subtype4Way => "T4_subtype_4way",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Self::T1SohRegression | Self::T2SecondLife => 2,
            Self::T3Anomaly3Way => 3,
            Self::T4Subtype4Way => 4,
        }
    }

    pub fn is_regression(self) -> bool {
        self == Self::T1SohRegression
    }

    fn readouts(self) -> &'static [Readout] {
        match self {
            Self::T1SohRegression => &[Readout::RidgeRegressor],
            _ => &[
                Readout::RidgeClassifier,
                Readout::Logistic,
                Readout::KnnClassifier,
            ],
        }
    }

    /// `(target, class)` of a row, or `None` when the task ignores it. For T1
    /// the class is the second-life bin used for stratification.
    fn label(self, r: &SampleRecord) -> Option<(f64, usize)> {
        let life = |soh: f64| match second_life_label(soh) {
            Ok(SecondLifeClass::Reuse) => Some(1),
            Ok(SecondLifeClass::Recondition) => Some(0),
            Err(_) => None,
        };
        match self {
            Self::T1SohRegression if r.is_clean_grounded() => Some((r.soh, life(r.soh)?)),
            Self::T2SecondLife if r.is_clean_grounded() => {
                let c = life(r.soh)?;
                Some((c as f64, c))
            }
            Self::T3Anomaly3Way => {
                let c = match (r.regime, r.anomaly_subtype) {
                    (Regime::RegimeB, _) => 2,
                    (Regime::Grounded, AnomalySubtype::None) => 0,
                    (Regime::Grounded, _) => 1,
                };
                Some((c as f64, c))
            }
            Self::T4Subtype4Way => {
                let c = AnomalySubtype::INJECTABLE
                    .iter()
                    .position(|s| *s == r.anomaly_subtype)?;
                Some((c as f64, c))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|t| t.as_str() == s || t.as_str()[..2].eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    /// `k` training rows per class.
    FewShot(usize),
    /// A fraction of the training cells per seed.
    CellSubsample(f64),
}

impl Protocol {
    pub const FEW_SHOTS: [usize; 4] = [2, 5, 10, 20];

    pub fn name(&self) -> &'static str {
        match self {
            Self::FewShot(_) => "few_shot",
            Self::CellSubsample(_) => "cell_subsample",
        }
    }

    pub fn shot(&self) -> String {
        match self {
            Self::FewShot(k) => k.to_string(),
            Self::CellSubsample(f) => f.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub protocol: Protocol,
    pub n_seeds: usize,
    pub seed: u64,
    /// When non-zero, test labels are shuffled this many times per seed and
    /// classification metrics are averaged over the shuffles.
    pub label_permutations: usize,
}

impl TaskSpec {
    pub fn new(task: Task, protocol: Protocol, seed: u64) -> Self {
        Self {
            task,
            protocol,
            n_seeds: 5,
            seed,
            label_permutations: 0,
        }
    }
}

/// One line of the long-format metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub model: String,
    pub protocol: String,
    pub shot: String,
    pub seed: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub rows: Vec<MetricRow>,
    pub skipped: Vec<String>,
}

impl TaskOutcome {
    pub fn extend(&mut self, other: TaskOutcome) {
        self.rows.extend(other.rows);
        self.skipped.extend(other.skipped);
    }

    /// Mean over seeds of one `(model, metric)` at one shot.
    pub fn mean(&self, task: Task, model: &str, shot: &str, metric: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.task == task.as_str() && r.model == model && r.shot == shot && r.metric == metric
            })
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

struct TaskData<'a> {
    rows: Vec<&'a SampleRecord>,
    targets: Vec<f64>,
    classes: Vec<usize>,
    features: Array2<f64>,
}

impl TaskData<'_> {
    fn subset(&self, idx: &[usize]) -> (Array2<f64>, Vec<f64>, Vec<usize>) {
        (
            self.features.select(Axis(0), idx),
            idx.iter().map(|&i| self.targets[i]).collect(),
            idx.iter().map(|&i| self.classes[i]).collect(),
        )
    }
}

fn group_of(r: &SampleRecord) -> String {
    match &r.cell_id {
        Some(c) => c.clone(),
        None => format!("anchor:{}", r.nearest_anchor),
    }
}

/// Runs one task under one protocol for every seed. Training sees only the
/// split's train rows; hyperparameters and the best model are chosen on the
/// validation rows; test rows are scored once.
pub fn run_task(
    rows: &[SampleRecord],
    split: &SplitAssignment,
    spec: &TaskSpec,
) -> Result<TaskOutcome> {
    let task = spec.task;
    let lookup = split.lookup();
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut data = TaskData {
        rows: Vec::new(),
        targets: Vec::new(),
        classes: Vec::new(),
        features: Array2::zeros((0, N_FEATURES)),
    };
    for r in rows {
        let (Some((target, class)), Some(subset)) =
            (task.label(r), lookup.get(r.sample_id.as_str()))
        else {
            continue;
        };
        parts[*subset as usize].push(data.rows.len());
        data.rows.push(r);
        data.targets.push(target);
        data.classes.push(class);
    }
    data.features = feature_matrix(&data.rows);
    let [train_pool, val, test] = parts;
    let mut outcome = TaskOutcome::default();
    let tag = format!("{task} {} {}", spec.protocol.name(), spec.protocol.shot());

    let test_classes: BTreeSet<usize> = test.iter().map(|&i| data.classes[i]).collect();
    let required = if task.is_regression() {
        1
    } else {
        task.n_classes()
    };
    if test.len() < 2 || test_classes.len() < required {
        outcome.skipped.push(format!(
            "{tag}: test subset lacks required classes ({} rows)",
            test.len()
        ));
        return Ok(outcome);
    }

    for seed in 0..spec.n_seeds {
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_sample_seed(spec.seed, &format!("{tag}/{seed}")));
        let train = sample_training(&data, &train_pool, &spec.protocol, task, &mut rng);
        let train_classes: BTreeSet<usize> = train.iter().map(|&i| data.classes[i]).collect();
        if train.len() < 2 || (!task.is_regression() && train_classes.len() < task.n_classes()) {
            outcome
                .skipped
                .push(format!("{tag} seed {seed}: training sample lacks a class"));
            continue;
        }
        let perms: Vec<Vec<usize>> = (0..spec.label_permutations)
            .map(|_| {
                let mut p: Vec<usize> = (0..test.len()).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let evaluated = evaluate_models(&data, &train, &val, &test, task)?;
        let mut push = |model: &str, metric: &str, value: f64| {
            outcome.rows.push(MetricRow {
                task: task.as_str().to_string(),
                model: model.to_string(),
                protocol: spec.protocol.name().to_string(),
                shot: spec.protocol.shot(),
                seed,
                metric: metric.to_string(),
                value,
            });
        };
        for (model, test_pred) in &evaluated {
            for (metric, value) in score_test(&data, &test, test_pred, task, &perms) {
                push(model, metric, value);
            }
        }
    }
    Ok(outcome)
}

fn sample_training<R: Rng>(
    data: &TaskData,
    pool: &[usize],
    protocol: &Protocol,
    task: Task,
    rng: &mut R,
) -> Vec<usize> {
    match *protocol {
        Protocol::FewShot(k) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in pool {
                by_class.entry(data.classes[i]).or_default().push(i);
            }
            let mut out = Vec::new();
            for (_, mut members) in by_class {
                members.shuffle(rng);
                out.extend(members.into_iter().take(k));
            }
            let _ = task;
            out.sort_unstable();
            out
        }
        Protocol::CellSubsample(frac) => {
            let groups: BTreeSet<String> = pool.iter().map(|&i| group_of(data.rows[i])).collect();
            let mut groups: Vec<String> = groups.into_iter().collect();
            groups.shuffle(rng);
            let keep = ((groups.len() as f64 * frac).round() as usize).clamp(1, groups.len());
            let kept: BTreeSet<&String> = groups[..keep].iter().collect();
            pool.iter()
                .copied()
                .filter(|&i| kept.contains(&group_of(data.rows[i])))
                .collect()
        }
    }
}

/// Validation score: R² for regression, balanced accuracy otherwise. NaN
/// ranks last.
fn val_score(data: &TaskData, val: &[usize], pred: &Prediction, task: Task) -> f64 {
    if val.is_empty() {
        return f64::NEG_INFINITY;
    }
    let s = if task.is_regression() {
        let y: Vec<f64> = val.iter().map(|&i| data.targets[i]).collect();
        r2_score(&y, &pred.values)
    } else {
        let y: Vec<usize> = val.iter().map(|&i| data.classes[i]).collect();
        let p: Vec<usize> = pred.values.iter().map(|&v| v as usize).collect();
        balanced_accuracy(&y, &p)
    };
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Test predictions for each readout at its validation-chosen setting, plus
/// the overall best readout under the name `best`.
fn evaluate_models(
    data: &TaskData,
    train: &[usize],
    val: &[usize],
    test: &[usize],
    task: Task,
) -> Result<Vec<(String, Prediction)>> {
    let (tx, ty, _) = data.subset(train);
    let (vx, _, _) = data.subset(val);
    let (sx, _, _) = data.subset(test);
    let n_classes = task.n_classes();
    let mut out = Vec::new();
    let mut best: Option<(f64, Prediction)> = None;
    for &kind in task.readouts() {
        let mut chosen: Option<(f64, f64)> = None;
        for &h in kind.grid() {
            let score = if val.is_empty() {
                f64::NEG_INFINITY
            } else {
                let p = fit_predict_readout(kind, &tx, &ty, n_classes, &vx, h)?;
                val_score(data, val, &p, task)
            };
            if chosen.is_none_or(|(s, _)| score > s) {
                chosen = Some((score, h));
            }
        }
        let (score, h) = chosen.expect("non-empty grid");
        let pred = fit_predict_readout(kind, &tx, &ty, n_classes, &sx, h)?;
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, pred.clone()));
        }
        out.push((kind.as_str().to_string(), pred));
    }
    out.push(("best".to_string(), best.expect("at least one readout").1));
    Ok(out)
}

fn score_test(
    data: &TaskData,
    test: &[usize],
    pred: &Prediction,
    task: Task,
    perms: &[Vec<usize>],
) -> Vec<(&'static str, f64)> {
    if task.is_regression() {
        let y: Vec<f64> = test.iter().map(|&i| data.targets[i]).collect();
        return vec![
            ("r2", r2_score(&y, &pred.values)),
            ("mae", mae(&y, &pred.values)),
        ];
    }
    let y: Vec<usize> = test.iter().map(|&i| data.classes[i]).collect();
    let p: Vec<usize> = pred.values.iter().map(|&v| v as usize).collect();
    let labelings: Vec<Vec<usize>> = if perms.is_empty() {
        vec![y]
    } else {
        perms
            .iter()
            .map(|perm| perm.iter().map(|&j| y[j]).collect())
            .collect()
    };
    let avg = |f: &dyn Fn(&[usize]) -> f64| {
        labelings.iter().map(|l| f(l)).sum::<f64>() / labelings.len() as f64
    };
    let mut out = vec![("balanced_accuracy", avg(&|l| balanced_accuracy(l, &p)))];
    if task == Task::T2SecondLife {
        let scores = pred.scores.as_ref().expect("classifier scores");
        let margin: Vec<f64> = scores.axis_iter(Axis(0)).map(|r| r[1] - r[0]).collect();
        out.push(("f1", avg(&|l| f1_positive(l, &p))));
        out.push(("auroc", avg(&|l| auroc(l, &margin))));
    }
    out
}

/// Mean and population std over seeds, per `(task, model, protocol, shot,
/// metric)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub model: String,
    pub protocol: String,
    pub shot: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(rows: &[MetricRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.task.clone(),
                r.model.clone(),
                r.protocol.clone(),
                r.shot.clone(),
                r.metric.clone(),
            ))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((task, model, protocol, shot, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            AggregateRow {
                task,
                model,
                protocol,
                shot,
                metric,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))
}

/// Every task under the cell-subsample protocol and every few-shot size.
pub fn run_benchmark(
    rows: &[SampleRecord],
    split: &SplitAssignment,
    seed: u64,
) -> Result<TaskOutcome> {
    let mut out = TaskOutcome::default();
    for task in Task::ALL {
        let mut protocols = vec![Protocol::CellSubsample(0.8)];
        protocols.extend(Protocol::FEW_SHOTS.iter().map(|&k| Protocol::FewShot(k)));
        for protocol in protocols {
            out.extend(run_task(rows, split, &TaskSpec::new(task, protocol, seed))?);
        }
    }
    Ok(out)
}

/// Mean permuted-label balanced accuracy of each classification readout,
/// with `1 / n_classes` alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceCheck {
    pub task: String,
    pub model: String,
    pub balanced_accuracy: f64,
    pub chance: f64,
    pub passed: bool,
}

pub const CHANCE_TOL: f64 = 0.1;

pub fn chance_level_check(
    rows: &[SampleRecord],
    split: &SplitAssignment,
    task: Task,
    seed: u64,
) -> Result<Vec<ChanceCheck>> {
    let spec = TaskSpec {
        label_permutations: 20,
        ..TaskSpec::new(task, Protocol::CellSubsample(0.8), seed)
    };
    let outcome = run_task(rows, split, &spec)?;
    let chance = 1.0 / task.n_classes() as f64;
    let mut models: Vec<&str> = task.readouts().iter().map(|r| r.as_str()).collect();
    models.push("best");
    let shot = spec.protocol.shot();
    Ok(models
        .into_iter()
        .map(|m| {
            let ba = outcome
                .mean(task, m, &shot, "balanced_accuracy")
                .unwrap_or(f64::NAN);
            ChanceCheck {
                task: task.as_str().to_string(),
                model: m.to_string(),
                balanced_accuracy: ba,
                chance,
                passed: (ba - chance).abs() <= CHANCE_TOL,
            }
        })
        .collect())
}

// ---- ablations -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    A0Baseline,
    A1RandomDirection,
    A2ShuffledSoh,
    A3InvertedDirection,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::A0Baseline,
        Scenario::A1RandomDirection,
        Scenario::A2ShuffledSoh,
        Scenario::A3InvertedDirection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A0Baseline => "A0",
            Self::A1RandomDirection => "A1_random_direction",
            Self::A2ShuffledSoh => "A2_shuffled_soh",
            Self::A3InvertedDirection => "A3_inverted_direction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub state_direction: Vec<f64>,
    pub request_hash: String,
    /// `(shot, mean best-model test R²)` for T1.
    pub t1_r2: Vec<(usize, f64)>,
    /// `(shot, mean best-model test balanced accuracy)` for T2.
    pub t2_ba: Vec<(usize, f64)>,
}

impl ScenarioResult {
    pub fn r2_at(&self, k: usize) -> f64 {
        self.t1_r2
            .iter()
            .find(|(s, _)| *s == k)
            .map_or(f64::NAN, |x| x.1)
    }

    pub fn ba_at(&self, k: usize) -> f64 {
        self.t2_ba
            .iter()
            .find(|(s, _)| *s == k)
            .map_or(f64::NAN, |x| x.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub n_requests: usize,
    pub scenarios: Vec<ScenarioResult>,
    pub metrics: Vec<MetricRow>,
    pub skipped: Vec<String>,
}

impl AblationReport {
    pub fn scenario(&self, s: Scenario) -> Option<&ScenarioResult> {
        self.scenarios.iter().find(|r| r.scenario == s.as_str())
    }
}

/// One pass/fail comparison of the ablation contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

pub const ABLATION_SHOT: usize = 20;

impl AblationReport {
    /// The contrast expected of a working pipeline: the baseline learns SOH,
    /// shuffled labels do not, and the direction choice barely matters.
    pub fn threshold_checks(&self) -> Vec<ThresholdCheck> {
        let get = |s: Scenario| self.scenario(s);
        let r2 = |s: Scenario| get(s).map_or(f64::NAN, |r| r.r2_at(ABLATION_SHOT));
        let a0 = r2(Scenario::A0Baseline);
        let mut out = vec![
            ThresholdCheck {
                name: "A0 T1 r2 >= 0.4".to_string(),
                value: a0,
                passed: a0 >= 0.4,
            },
            ThresholdCheck {
                name: "A2 T1 r2 <= 0.1".to_string(),
                value: r2(Scenario::A2ShuffledSoh),
                passed: r2(Scenario::A2ShuffledSoh) <= 0.1,
            },
        ];
        for s in [Scenario::A1RandomDirection, Scenario::A3InvertedDirection] {
            let gap = (r2(s) - a0).abs();
            out.push(ThresholdCheck {
                name: format!("|{} - A0| T1 r2 <= 0.15", s.as_str()),
                value: gap,
                passed: gap <= 0.15,
            });
        }
        let ba0 = get(Scenario::A0Baseline).map_or(f64::NAN, |r| r.ba_at(ABLATION_SHOT));
        out.push(ThresholdCheck {
            name: "A0 T2 balanced accuracy >= 0.75".to_string(),
            value: ba0,
            passed: ba0 >= 0.75,
        });
        let worst = get(Scenario::A2ShuffledSoh).map_or(f64::NAN, |r| {
            r.t2_ba
                .iter()
                .map(|x| x.1)
                .fold(f64::NEG_INFINITY, f64::max)
        });
        out.push(ThresholdCheck {
            name: "A2 T2 balanced accuracy <= 0.65 at every shot".to_string(),
            value: worst,
            passed: worst <= 0.65,
        });
        out
    }
}

/// Uniform random unit vector of length `d`.
pub fn random_unit_vector<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn request_hash(reqs: &[GenerationRequest]) -> String {
    let text: String = reqs
        .iter()
        .map(|r| {
            format!(
                "{}|{:?}|{:?}|{:?}|{:?}|{:?}\n",
                r.sample_id,
                r.voltage.to_bits(),
                r.soc.map(f64::to_bits),
                r.soh.map(f64::to_bits),
                r.u.as_ref()
                    .map(|u| u.iter().map(|x| x.to_bits()).collect::<Vec<_>>()),
                r.cell_id
            )
        })
        .collect();
    sha256_hex(text.as_bytes())
}

/// Runs A0–A3 on one shared grounded request list, grading T1/T2 against each
/// cell's original SOH on a by-cell split of the pilot.
pub fn run_ablation_suite(
    bridge: &Bridge,
    cells: &[ConditioningRecord],
    n_requests: usize,
    master_seed: u64,
) -> Result<AblationReport> {
    if cells.len() < 2 {
        return Err(Error::InvalidInput(
            "ablation needs at least 2 cells".to_string(),
        ));
    }
    let mut plan_rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(master_seed, "ablation/plan"));
    let requests = grounded_requests(n_requests, "abl", cells, bridge.config(), &mut plan_rng)?;
    let shared_hash = request_hash(&requests);
    let original: HashMap<&str, f64> = cells
        .iter()
        .map(|c| (c.cell_id.as_str(), c.original_soh))
        .collect();
    let shuffled: HashMap<String, f64> = shuffle_soh(cells, master_seed)
        .into_iter()
        .map(|c| (c.cell_id, c.soh))
        .collect();
    let mut dir_rng =
        ChaCha20Rng::seed_from_u64(derive_sample_seed(master_seed, "ablation/direction"));
    let base_dir = bridge.model().state_direction().to_vec();
    let random_dir = random_unit_vector(base_dir.len(), &mut dir_rng);

    let mut report = AblationReport {
        n_requests,
        scenarios: Vec::new(),
        metrics: Vec::new(),
        skipped: Vec::new(),
    };
    let mut split: Option<SplitAssignment> = None;
    for scenario in Scenario::ALL {
        if request_hash(&requests) != shared_hash {
            return Err(Error::InvalidInput(
                "ablation request list changed".to_string(),
            ));
        }
        let direction = match scenario {
            Scenario::A1RandomDirection => random_dir.clone(),
            Scenario::A3InvertedDirection => base_dir.iter().map(|v| -v).collect(),
            _ => base_dir.clone(),
        };
        let scenario_bridge =
            bridge.replace_model(bridge.model().with_state_direction(&direction)?);
        let effective: Vec<GenerationRequest> = match scenario {
            Scenario::A2ShuffledSoh => requests
                .iter()
                .map(|r| {
                    let cell = r.cell_id.as_deref().expect("grounded");
                    GenerationRequest {
                        soh: Some(shuffled[cell]),
                        ..r.clone()
                    }
                })
                .collect(),
            _ => requests.clone(),
        };
        let mut rows = scenario_bridge.generate_batch(&effective, master_seed)?;
        for r in rows.iter_mut() {
            let truth = original[r.cell_id.as_deref().expect("grounded")];
            r.soh = truth;
            r.second_life_class = Some(second_life_label(truth)?);
        }
        let split = split.get_or_insert_with(|| {
            build_split(
                &rows,
                SplitStrategy::ByCellPrimary,
                DEFAULT_RATIOS,
                master_seed,
            )
            .expect("grounded pilot has cells")
        });
        let mut t1_r2 = Vec::new();
        let mut t2_ba = Vec::new();
        for &k in &Protocol::FEW_SHOTS {
            for task in [Task::T1SohRegression, Task::T2SecondLife] {
                let outcome = run_task(
                    &rows,
                    split,
                    &TaskSpec::new(task, Protocol::FewShot(k), master_seed),
                )?;
                let shot = k.to_string();
                match task {
                    Task::T1SohRegression => t1_r2.push((
                        k,
                        outcome.mean(task, "best", &shot, "r2").unwrap_or(f64::NAN),
                    )),
                    _ => t2_ba.push((
                        k,
                        outcome
                            .mean(task, "best", &shot, "balanced_accuracy")
                            .unwrap_or(f64::NAN),
                    )),
                }
                for mut m in outcome.rows {
                    m.task = format!("{}/{}", scenario.as_str(), m.task);
                    report.metrics.push(m);
                }
                report.skipped.extend(
                    outcome
                        .skipped
                        .into_iter()
                        .map(|s| format!("{}: {s}", scenario.as_str())),
                );
            }
        }
        report.scenarios.push(ScenarioResult {
            scenario: scenario.as_str().to_string(),
            state_direction: direction,
            request_hash: shared_hash.clone(),
            t1_r2,
            t2_ba,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_count_and_names() {
        assert_eq!(N_FEATURES, 57);
        assert_eq!(feature_names().len(), 57);
        let f = extract_features(&Signature::zeros());
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn metrics_on_small_cases() {
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]), 0.75);
        assert_eq!(f1_positive(&[0, 1, 1], &[1, 1, 0]), 0.5);
        assert_eq!(auroc(&[0, 1, 0, 1], &[0.1, 0.9, 0.5, 0.5]), 0.875);
        assert!((r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]), 1.5);
    }

    #[test]
    fn task_names_parse() {
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert_eq!("t3".parse::<Task>().unwrap(), Task::T3Anomaly3Way);
    }

    #[test]
    fn knn_ties_go_to_lowest_class() {
        let x = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [1.0, 0.0, 1.0, 0.0];
        let p = fit_predict_readout(Readout::KnnClassifier, &x, &y, 2, &x, 4.0).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }
}
