//! Binary RBF-kernel SVMs trained by SMO, cross-validated model selection, and the three
//! social classifiers built on them (teacher recognition, mutual gaze, hand selection).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perception::{GazeFeature, Hand};

pub const SMO_TOLERANCE: f64 = 1e-3;
pub const SMO_MAX_ITER: usize = 100_000;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
}

#[inline]
fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, |v| v.len())
    }

    /// `sum_i coef_i exp(-gamma |x - sv_i|^2) + bias`.
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        let s: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coefs)
            .map(|(sv, c)| c * (-self.gamma * sqdist(sv, x)).exp())
            .sum();
        Ok(s + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(if self.decision(x)? > 0.0 { 1.0 } else { -1.0 })
    }

    /// Box and equality constraints of the dual.
    pub fn check_dual_feasibility(&self, tol: f64) -> Result<()> {
        let bound = self.c * (1.0 + 1e-12);
        if let Some(c) = self.dual_coefs.iter().find(|c| c.abs() > bound) {
            return Err(Error::Numerical(format!("dual coefficient {c} exceeds C = {}", self.c)));
        }
        let sum: f64 = self.dual_coefs.iter().sum();
        if sum.abs() > tol {
            return Err(Error::Numerical(format!("dual coefficients sum to {sum}")));
        }
        Ok(())
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
        let mut correct = 0usize;
        for (xi, yi) in x.iter().zip(y) {
            if self.predict(xi)? == *yi {
                correct += 1;
            }
        }
        Ok(correct as f64 / x.len().max(1) as f64)
    }
}

fn validate_training_set(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("SVM training needs at least two samples".into()));
    }
    let d = x[0].len();
    for xi in x {
        if xi.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: xi.len() });
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
    }
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::InvalidInput("labels must be -1 or +1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::SingleClass);
    }
    Ok(d)
}

/// Pairwise squared distances, row-major `n x n`.
pub fn sqdist_matrix(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sqdist(&x[i], &x[j]);
        }
    });
    d
}

/// SMO on the subset `idx` of a precomputed squared-distance matrix.
fn smo_on_subset(
    x: &[Vec<f64>],
    y: &[f64],
    dist: &[f64],
    n_total: usize,
    idx: &[usize],
    c: f64,
    gamma: f64,
) -> Result<SvmModel> {
    let n = idx.len();
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n).enumerate().for_each(|(a, row)| {
        let ia = idx[a];
        for (b, v) in row.iter_mut().enumerate() {
            *v = (-gamma * dist[ia * n_total + idx[b]]).exp();
        }
    });
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |t: usize, a: &[f64]| (ys[t] > 0.0 && a[t] < c) || (ys[t] < 0.0 && a[t] > 0.0);
    let low = |t: usize, a: &[f64]| (ys[t] > 0.0 && a[t] > 0.0) || (ys[t] < 0.0 && a[t] < c);

    let mut iter = 0;
    loop {
        // first index: maximal violation, lowest index on ties
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(t, &alpha) && -ys[t] * grad[t] > gmax {
                gmax = -ys[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(t, &alpha) {
                continue;
            }
            let v = -ys[t] * grad[t];
            gmin = gmin.min(v);
            if i != usize::MAX && v < gmax {
                let b = gmax - v;
                let mut a = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < SMO_TOLERANCE {
            break;
        }
        iter += 1;
        if iter > SMO_MAX_ITER {
            log::warn!("SMO stopped at the iteration cap with violation {:.2e}", gmax - gmin);
            break;
        }

        let (ai, aj) = (alpha[i], alpha[j]);
        let kij = k[i * n + j];
        let quad = {
            let q = k[i * n + i] + k[j * n + j] - 2.0 * kij;
            if q <= 0.0 { TAU } else { q }
        };
        if ys[i] != ys[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
        let (yi, yj) = (ys[i], ys[j]);
        for t in 0..n {
            grad[t] += ys[t] * (yi * k[i * n + t] * di + yj * k[j * n + t] * dj);
        }
    }

    // bias from free vectors, or the midpoint of the feasible interval
    let (mut sum, mut n_free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = ys[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            n_free += 1;
        } else if (alpha[t] >= c && ys[t] < 0.0) || (alpha[t] <= 0.0 && ys[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if n_free > 0 { sum / n_free as f64 } else { (ub + lb) / 2.0 };

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(x[idx[t]].clone());
            dual_coefs.push(alpha[t] * ys[t]);
        }
    }
    let model = SvmModel { support_vectors, dual_coefs, bias: -rho, gamma, c };
    if !model.bias.is_finite() {
        return Err(Error::Numerical("non-finite SVM bias".into()));
    }
    Ok(model)
}

/// Trains a C-SVM with RBF kernel. SMO with second-order working-set selection is
/// deterministic, so no seed is needed.
pub fn svm_train(x: &[Vec<f64>], y: &[f64], c: f64, gamma: f64) -> Result<SvmModel> {
    validate_training_set(x, y)?;
    if !(c > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidInput("C and gamma must be positive".into()));
    }
    let dist = sqdist_matrix(x);
    let idx: Vec<usize> = (0..x.len()).collect();
    smo_on_subset(x, y, &dist, x.len(), &idx, c, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
}

/// Default grid: `C in {0.1, 1, 10, 100}`, `gamma in {0.01, 0.1, 1} / d`.
pub fn default_grid(dim: usize) -> Vec<SvmParams> {
    let d = dim.max(1) as f64;
    let mut g = Vec::new();
    for c in [0.1, 1.0, 10.0, 100.0] {
        for gm in [0.01, 0.1, 1.0] {
            g.push(SvmParams { c, gamma: gm / d });
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchScheme {
    FiveFoldGrid,
    RandomizedSearch { k: usize, seed: u64 },
}

fn canonical(grid: &[SvmParams]) -> Vec<SvmParams> {
    let mut g = grid.to_vec();
    g.sort_by(|a, b| a.c.total_cmp(&b.c).then(a.gamma.total_cmp(&b.gamma)));
    g.dedup();
    g
}

/// Seeded stratified fold assignment.
pub fn stratified_folds(y: &[f64], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; y.len()];
    for class in [-1.0, 1.0] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, i) in members.into_iter().enumerate() {
            fold[i] = pos % k;
        }
    }
    fold
}

/// Seeded stratified split; returns (train, holdout) indices with `frac` of each class held out.
pub fn stratified_split(y: &[f64], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for class in [-1.0, 1.0] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        let n_hold = (members.len() as f64 * frac).round() as usize;
        hold.extend_from_slice(&members[..n_hold]);
        train.extend_from_slice(&members[n_hold..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    (train, hold)
}

pub const CV_FOLDS: usize = 5;
const CV_SEED: u64 = 0xc0ffee;

/// Mean 5-fold accuracy of every candidate; folds whose training part is single-class are skipped.
fn cv_scores(x: &[Vec<f64>], y: &[f64], cands: &[SvmParams], seed: u64) -> Result<Vec<f64>> {
    let n = x.len();
    let dist = sqdist_matrix(x);
    let folds = stratified_folds(y, CV_FOLDS, seed);
    cands
        .par_iter()
        .map(|p| {
            let mut accs = Vec::new();
            for f in 0..CV_FOLDS {
                let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
                let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                if test.is_empty() || !(ty.contains(&1.0) && ty.contains(&-1.0)) {
                    continue;
                }
                let m = smo_on_subset(x, y, &dist, n, &train, p.c, p.gamma)?;
                let mut correct = 0;
                for &i in &test {
                    if m.predict(&x[i])? == y[i] {
                        correct += 1;
                    }
                }
                accs.push(correct as f64 / test.len() as f64);
            }
            Ok(if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 })
        })
        .collect()
}

/// Picks the parameters with the best mean stratified 5-fold accuracy.
/// Ties go to the smaller C, then the smaller gamma, independent of grid order.
pub fn model_select(x: &[Vec<f64>], y: &[f64], grid: &[SvmParams], scheme: SearchScheme) -> Result<SvmParams> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let grid = canonical(grid);
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    validate_training_set(x, y)?;
    if x.len() < 10 {
        return Err(Error::InvalidInput("model selection needs at least 10 samples".into()));
    }
    let (cands, seed) = match scheme {
        SearchScheme::FiveFoldGrid => (grid, CV_SEED),
        SearchScheme::RandomizedSearch { k, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<SvmParams> = grid.choose_multiple(&mut rng, k.min(grid.len())).copied().collect();
            picked = canonical(&picked);
            (picked, seed ^ CV_SEED)
        }
    };
    let scores = cv_scores(x, y, &cands, seed)?;
    let mut best = 0;
    for i in 1..cands.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(cands[best])
}

/// SVM plus a decision-margin scale used to turn |decision| into a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedSvm {
    pub model: SvmModel,
    pub margin_scale: f64,
}

impl CalibratedSvm {
    /// Selects parameters and trains on 80% of the data; the margin scale is the mean
    /// |decision| on the held-out 20%.
    pub fn fit(x: &[Vec<f64>], y: &[f64], grid: &[SvmParams], scheme: SearchScheme, seed: u64) -> Result<Self> {
        validate_training_set(x, y)?;
        let (train, hold) = stratified_split(y, 0.2, seed);
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let params = model_select(&tx, &ty, grid, scheme)?;
        let model = svm_train(&tx, &ty, params.c, params.gamma)?;
        let calib: &[usize] = if hold.is_empty() { &train } else { &hold };
        let mut s = 0.0;
        for &i in calib {
            s += model.decision(&x[i])?.abs();
        }
        let margin_scale = (s / calib.len() as f64).max(1e-12);
        Ok(Self { model, margin_scale })
    }

    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        self.model.decision(x)
    }

    /// `min(1, |decision| / margin_scale)`.
    pub fn confidence(&self, decision: f64) -> f64 {
        (decision.abs() / self.margin_scale).min(1.0)
    }
}

/// Predicted hand `p` with confidence `c` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandSelection {
    pub p: Hand,
    pub c: f64,
}

/// Label convention for the hand classifier: +1 is the left hand.
pub fn hand_label(h: Hand) -> f64 {
    match h {
        Hand::Left => 1.0,
        Hand::Right => -1.0,
    }
}

pub fn mutual_gaze(f: &GazeFeature, m: &SvmModel) -> Result<bool> {
    Ok(m.decision(&f.values)? > 0.0)
}

pub fn hand_selection(f: &GazeFeature, m: &CalibratedSvm) -> Result<HandSelection> {
    let d = m.decision(&f.values)?;
    let p = if d > 0.0 { Hand::Left } else { Hand::Right };
    Ok(HandSelection { p, c: m.confidence(d) })
}

// ---------------------------------------------------------------------------
// Online teacher recognition

pub const TEACHER_BATCH: usize = 300;
pub const TEACHER_TARGET_ACCURACY: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrainerState {
    pub batches_collected: usize,
    /// Positives of completed batches.
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// Teacher samples not yet forming a full batch.
    pub pending: Vec<Vec<f64>>,
    pub current_model: Option<SvmModel>,
    pub val_accuracy: f64,
    pub terminated: bool,
    pub seed: u64,
    /// Next unread position in the shuffled negatives pool.
    pub pool_cursor: usize,
}

impl OnlineTrainerState {
    pub fn new(seed: u64) -> Self {
        Self {
            batches_collected: 0,
            positives: Vec::new(),
            negatives: Vec::new(),
            pending: Vec::new(),
            current_model: None,
            val_accuracy: 0.0,
            terminated: false,
            seed,
            pool_cursor: 0,
        }
    }

    /// Decision value of the current teacher model, if one exists.
    pub fn score(&self, embedding: &[f64]) -> Option<f64> {
        self.current_model.as_ref().and_then(|m| m.decision(embedding).ok())
    }
}

fn pool_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9001));
    order
}

/// Adds teacher embeddings; every completed batch of 300 is paired with 300 pool negatives,
/// the data re-split 70/30 and the SVM re-selected and retrained.
pub fn online_teacher_update(
    mut state: OnlineTrainerState,
    new_samples: &[Vec<f64>],
    negatives_pool: &[Vec<f64>],
) -> Result<OnlineTrainerState> {
    if new_samples.is_empty() || state.terminated {
        return Ok(state);
    }
    state.pending.extend(new_samples.iter().cloned());
    let order = pool_order(negatives_pool.len(), state.seed);
    while state.pending.len() >= TEACHER_BATCH && !state.terminated {
        let available = negatives_pool.len().saturating_sub(state.pool_cursor);
        if available < TEACHER_BATCH {
            return Err(Error::PoolExhausted { needed: TEACHER_BATCH, available });
        }
        state.positives.extend(state.pending.drain(..TEACHER_BATCH));
        for &i in &order[state.pool_cursor..state.pool_cursor + TEACHER_BATCH] {
            state.negatives.push(negatives_pool[i].clone());
        }
        state.pool_cursor += TEACHER_BATCH;
        state.batches_collected += 1;

        let x: Vec<Vec<f64>> = state.positives.iter().chain(&state.negatives).cloned().collect();
        let y: Vec<f64> = std::iter::repeat_n(1.0, state.positives.len())
            .chain(std::iter::repeat_n(-1.0, state.negatives.len()))
            .collect();
        let split_seed = state.seed.wrapping_add(state.batches_collected as u64);
        let (train, val) = stratified_split(&y, 0.3, split_seed);
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let grid = default_grid(x[0].len());
        let params = model_select(&tx, &ty, &grid, SearchScheme::RandomizedSearch { k: 8, seed: split_seed })?;
        let model = svm_train(&tx, &ty, params.c, params.gamma)?;
        let vx: Vec<Vec<f64>> = val.iter().map(|&i| x[i].clone()).collect();
        let vy: Vec<f64> = val.iter().map(|&i| y[i]).collect();
        state.val_accuracy = model.accuracy(&vx, &vy)?;
        state.current_model = Some(model);
        state.terminated = state.val_accuracy >= TEACHER_TARGET_ACCURACY;
        log::info!(
            "teacher batch {}: validation accuracy {:.4}",
            state.batches_collected,
            state.val_accuracy
        );
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Serialization

const SVM_MAGIC: &[u8; 4] = b"CSVM";
const SVM_VERSION: u16 = 1;

/// Hyperparameter sidecar written next to a binary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmSidecar {
    pub format: String,
    pub version: u16,
    pub c: f64,
    pub gamma: f64,
    pub dim: usize,
    pub n_support: usize,
    pub margin_scale: Option<f64>,
}

impl SvmModel {
    pub fn sidecar(&self, margin_scale: Option<f64>) -> SvmSidecar {
        SvmSidecar {
            format: "cuelearn-svm".into(),
            version: SVM_VERSION,
            c: self.c,
            gamma: self.gamma,
            dim: self.dim(),
            n_support: self.dual_coefs.len(),
            margin_scale,
        }
    }

    /// Magic, version, dims, SV count, then little-endian doubles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SVM_MAGIC);
        out.extend_from_slice(&SVM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dual_coefs.len() as u32).to_le_bytes());
        for v in [self.c, self.gamma, self.bias] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.dual_coefs {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for sv in &self.support_vectors {
            for v in sv {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SvmModel> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != SVM_MAGIC {
            return Err(Error::Format("not an SVM model".into()));
        }
        let version = r.u16()?;
        if version != SVM_VERSION {
            return Err(Error::Format(format!("unsupported SVM model version {version}")));
        }
        let dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let (c, gamma, bias) = (r.f64()?, r.f64()?, r.f64()?);
        let dual_coefs = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let support_vectors =
            (0..n).map(|_| (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(SvmModel { support_vectors, dual_coefs, bias, gamma, c })
    }
}

/// Little-endian cursor over a byte slice.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.remaining())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = if i % 2 == 0 { 1.0 } else { -1.0 };
            let cx = 2.0 * label;
            x.push(vec![cx + 0.5 * rng.sample::<f64, _>(StandardNormal), 0.5 * rng.sample::<f64, _>(StandardNormal)]);
            y.push(label);
        }
        (x, y)
    }

    /// Independent kernel-sum oracle.
    fn oracle_decision(m: &SvmModel, x: &[f64]) -> f64 {
        let mut s = m.bias;
        for (sv, c) in m.support_vectors.iter().zip(&m.dual_coefs) {
            let mut d2 = 0.0;
            for k in 0..x.len() {
                d2 += (x[k] - sv[k]).powi(2);
            }
            s += c * f64::exp(-m.gamma * d2);
        }
        s
    }

    #[test]
    fn separable_blobs_fit_exactly() {
        let (x, y) = blobs(100, 1);
        let m = svm_train(&x, &y, 1.0, 0.5).unwrap();
        assert_eq!(m.accuracy(&x, &y).unwrap(), 1.0);
        m.check_dual_feasibility(1e-6).unwrap();
    }

    #[test]
    fn two_point_problem() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let y = vec![1.0, -1.0];
        let m = svm_train(&x, &y, 1.0, 0.5).unwrap();
        assert_eq!(m.support_vectors.len(), 2);
        assert!(m.decision(&x[0]).unwrap() > 0.0);
        assert!(m.decision(&x[1]).unwrap() < 0.0);
        assert!(m.decision(&[0.5, 0.5]).unwrap().abs() < 1e-9);
        m.check_dual_feasibility(1e-6).unwrap();
    }

    #[test]
    fn xor_is_rbf_separable() {
        let x = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let y = vec![1.0, 1.0, -1.0, -1.0];
        let m = svm_train(&x, &y, 10.0, 1.0).unwrap();
        assert_eq!(m.accuracy(&x, &y).unwrap(), 1.0);
        m.check_dual_feasibility(1e-6).unwrap();
    }

    #[test]
    fn decision_matches_kernel_sum_oracle() {
        let m = SvmModel {
            support_vectors: vec![vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 0.5], vec![-2.0, 0.0, 1.0]],
            dual_coefs: vec![0.7, -0.4, -0.3],
            bias: 0.125,
            gamma: 0.3,
            c: 1.0,
        };
        for x in [[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]] {
            assert!((m.decision(&x).unwrap() - oracle_decision(&m, &x)).abs() < 1e-12);
        }
        assert!(matches!(m.decision(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn bad_training_sets() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(matches!(svm_train(&x, &[1.0, 1.0], 1.0, 1.0), Err(Error::SingleClass)));
        let nan = vec![vec![f64::NAN], vec![1.0]];
        assert!(matches!(svm_train(&nan, &[1.0, -1.0], 1.0, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn singleton_grid_and_empty_grid() {
        let (x, y) = blobs(20, 2);
        let p = SvmParams { c: 3.0, gamma: 0.2 };
        assert_eq!(model_select(&x, &y, &[p], SearchScheme::FiveFoldGrid).unwrap(), p);
        assert!(matches!(model_select(&x, &y, &[], SearchScheme::FiveFoldGrid), Err(Error::EmptyGrid)));
    }

    /// Two columns of points one unit apart plus a far block of negatives that drags the
    /// class mean sideways: a bounded-alpha (small C) solution cannot separate the columns.
    fn skewed_columns() -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for t in 0..20 {
            x.push(vec![0.0, t as f64]);
            y.push(1.0);
            x.push(vec![1.0, t as f64]);
            y.push(-1.0);
        }
        for t in 0..10 {
            x.push(vec![1.0, 40.0 + t as f64]);
            y.push(-1.0);
        }
        (x, y)
    }

    #[test]
    fn underfitting_c_is_rejected() {
        let (x, y) = skewed_columns();
        let gamma = 0.05;
        let small = svm_train(&x, &y, 0.1, gamma).unwrap();
        let large = svm_train(&x, &y, 10.0, gamma).unwrap();
        assert_eq!(large.accuracy(&x, &y).unwrap(), 1.0);
        assert!(small.accuracy(&x, &y).unwrap() < 1.0);
        let grid = [SvmParams { c: 0.1, gamma }, SvmParams { c: 10.0, gamma }];
        assert_eq!(model_select(&x, &y, &grid, SearchScheme::FiveFoldGrid).unwrap().c, 10.0);
    }

    #[test]
    fn randomized_search_deterministic_and_order_free() {
        let (x, y) = blobs(40, 4);
        let mut grid = Vec::new();
        for c in [0.1, 1.0, 10.0, 100.0, 1000.0] {
            for g in [0.01, 0.1, 1.0, 10.0] {
                grid.push(SvmParams { c, gamma: g });
            }
        }
        let s = SearchScheme::RandomizedSearch { k: 5, seed: 9 };
        let a = model_select(&x, &y, &grid, s).unwrap();
        let b = model_select(&x, &y, &grid, s).unwrap();
        grid.reverse();
        let c = model_select(&x, &y, &grid, s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn zero_new_samples_is_a_no_op() {
        let s = OnlineTrainerState::new(5);
        let after = online_teacher_update(s.clone(), &[], &[]).unwrap();
        assert_eq!(s, after);
    }

    #[test]
    fn pool_exhaustion_reported() {
        let pos: Vec<Vec<f64>> = (0..300).map(|i| vec![1.0, i as f64 * 1e-3]).collect();
        let pool: Vec<Vec<f64>> = (0..100).map(|i| vec![-1.0, i as f64 * 1e-3]).collect();
        let r = online_teacher_update(OnlineTrainerState::new(1), &pos, &pool);
        assert!(matches!(r, Err(Error::PoolExhausted { needed: 300, available: 100 })));
    }

    #[test]
    fn model_bytes_round_trip() {
        let (x, y) = blobs(30, 5);
        let m = svm_train(&x, &y, 1.0, 0.5).unwrap();
        let back = SvmModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
        let mut bad = m.to_bytes();
        bad[0] = b'X';
        assert!(SvmModel::from_bytes(&bad).is_err());
        assert!(SvmModel::from_bytes(&m.to_bytes()[..20]).is_err());
    }

    #[test]
    fn confidence_is_clamped() {
        let (x, y) = blobs(50, 6);
        let m = CalibratedSvm::fit(&x, &y, &default_grid(2), SearchScheme::FiveFoldGrid, 1).unwrap();
        for xi in &x {
            let c = m.confidence(m.decision(xi).unwrap());
            assert!((0.0..=1.0).contains(&c));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn trained_models_are_dual_feasible(seed in 0u64..1000, c in 0.05..50.0f64, gamma in 0.05..5.0f64) {
            let (x, y) = blobs(24, seed);
            let m = svm_train(&x, &y, c, gamma).unwrap();
            proptest::prop_assert!(m.check_dual_feasibility(1e-6).is_ok());
            for xi in &x {
                proptest::prop_assert!((m.decision(xi).unwrap() - oracle_decision(&m, xi)).abs() < 1e-12);
            }
        }
    }
}
