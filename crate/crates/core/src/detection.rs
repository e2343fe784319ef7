//! Online detection head: depth and grid proposals, colour-histogram RoI features, per-class
//! FALKON classifiers trained with Minibootstrap hard-negative mining, RLS box refinement
//! and greedy NMS.

use std::cmp::Ordering;
use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::ByteReader;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, is_valid_depth, Annotation, BoundingBox, Detection, RgbdFrame};

// ---------------------------------------------------------------------------
// Proposals

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Neighbouring depths differing by more than this are a discontinuity (meters).
    pub edge_threshold: f64,
    /// Depth bands (meters, relative to the seed) of the layered region proposals.
    pub layer_bands: Vec<f64>,
    pub min_region_px: usize,
    /// Regions larger than this fraction of the frame are background.
    pub max_region_frac: f64,
    /// Square sliding-window sides as fractions of the frame height.
    pub grid_scales: Vec<f64>,
    pub max_proposals: usize,
    pub dedupe_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            edge_threshold: 0.05,
            layer_bands: vec![0.03, 0.08],
            min_region_px: 12,
            max_region_frac: 0.25,
            grid_scales: vec![0.2, 0.4, 0.8],
            max_proposals: 300,
            dedupe_iou: 0.95,
        }
    }
}

const NEIGHBORS8: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Connected components of valid depth under 8-connectivity where `joins(seed_depth, from, to)`
/// decides adjacency. Returns pixel bounding boxes with their pixel counts.
fn components(frame: &RgbdFrame, joins: impl Fn(f32, f32, f32) -> bool) -> Vec<(BoundingBox, usize)> {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut visited = vec![false; frame.pixel_count()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..frame.pixel_count() {
        if visited[start] || !is_valid_depth(frame.depth[start]) {
            continue;
        }
        visited[start] = true;
        let seed_d = frame.depth[start];
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, 0, 0);
        let mut n = 0usize;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            n += 1;
            let d = frame.depth[i];
            for (dx, dy) in NEIGHBORS8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = (ny * w + nx) as usize;
                if !visited[j] && is_valid_depth(frame.depth[j]) && joins(seed_d, d, frame.depth[j]) {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let b = BoundingBox { x_min: x0 as f64, y_min: y0 as f64, x_max: x1 as f64, y_max: y1 as f64 };
        out.push((b, n));
    }
    out
}

fn grid_boxes(width: u32, height: u32, scales: &[f64]) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    for &s in scales {
        let side = (s * height as f64).round().max(4.0);
        if side > width as f64 || side > height as f64 {
            continue;
        }
        let stride = (side * 0.5).max(1.0);
        let nx = ((width as f64 - side) / stride).floor() as usize + 1;
        let ny = ((height as f64 - side) / stride).floor() as usize + 1;
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (i as f64 * stride, j as f64 * stride);
                out.push(BoundingBox { x_min: x, y_min: y, x_max: x + side, y_max: y + side });
            }
        }
    }
    out
}

/// Region proposals: boxes of depth-continuous regions, of seed-relative depth layers, then a
/// multi-scale sliding grid; near-duplicates (IoU above `dedupe_iou`) are dropped in that order.
pub fn propose_regions_with(frame: &RgbdFrame, cfg: &ProposalConfig) -> Vec<BoundingBox> {
    let max_px = cfg.max_region_frac * frame.pixel_count() as f64;
    let keep = |(b, n): &(BoundingBox, usize)| *n >= cfg.min_region_px && (*n as f64) <= max_px && b.area() >= 16.0;
    let edge = cfg.edge_threshold as f32;
    let mut regions: Vec<(BoundingBox, usize)> =
        components(frame, |_, a, b| (a - b).abs() <= edge).into_iter().filter(keep).collect();
    for &band in &cfg.layer_bands {
        let band = band as f32;
        regions.extend(components(frame, |s, _, b| (b - s).abs() <= band).into_iter().filter(keep));
    }
    // larger regions first so the cap drops specks before objects
    regions.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.sort_key().partial_cmp(&b.0.sort_key()).unwrap()));
    let mut out: Vec<BoundingBox> = Vec::new();
    let push = |out: &mut Vec<BoundingBox>, b: BoundingBox| {
        if out.len() < cfg.max_proposals && out.iter().all(|o| iou(o, &b) <= cfg.dedupe_iou) {
            out.push(b);
        }
    };
    let grid = grid_boxes(frame.width, frame.height, &cfg.grid_scales);
    // reserve room for the grid so it is never crowded out
    let region_cap = cfg.max_proposals.saturating_sub(grid.len());
    for (b, _) in regions {
        if out.len() >= region_cap {
            break;
        }
        push(&mut out, b);
    }
    for b in grid {
        push(&mut out, b);
    }
    out
}

pub fn propose_regions(frame: &RgbdFrame) -> Vec<BoundingBox> {
    propose_regions_with(frame, &ProposalConfig::default())
}

// ---------------------------------------------------------------------------
// Features

pub const HIST_BINS: usize = 8;
pub const FEATURE_DIM: usize = 3 * HIST_BINS + 2 + 5;
const CHANNELS: usize = 3 * HIST_BINS + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFeature {
    pub values: Vec<f64>,
}

/// Pixel rectangle covered by a box: pixels whose centers fall inside, clipped to the frame.
fn pixel_rect(b: &BoundingBox, width: u32, height: u32) -> Result<(usize, usize, usize, usize)> {
    if !b.is_valid() {
        return Err(Error::DegenerateRoi(format!("{b:?}")));
    }
    let x0 = (b.x_min - 0.5).ceil().max(0.0) as usize;
    let y0 = (b.y_min - 0.5).ceil().max(0.0) as usize;
    let x1 = ((b.x_max - 0.5).ceil().max(0.0) as usize).min(width as usize);
    let y1 = ((b.y_max - 0.5).ceil().max(0.0) as usize).min(height as usize);
    if x1 <= x0 || y1 <= y0 || b.area() < 16.0 {
        return Err(Error::DegenerateRoi(format!("{b:?} covers too few pixels")));
    }
    Ok((x0, y0, x1, y1))
}

/// Assembles the feature from channel sums: 24 bin counts, intensity sum and squared sum.
fn assemble(sums: &[u64; CHANNELS], npx: usize, b: &BoundingBox, width: u32, height: u32) -> RoiFeature {
    let n = npx as f64;
    let mut v = Vec::with_capacity(FEATURE_DIM);
    v.extend(sums[..3 * HIST_BINS].iter().map(|&c| c as f64 / (3.0 * n)));
    // intensity = (r+g+b) / 765 in [0, 1]
    let s = sums[3 * HIST_BINS] as f64;
    let ss = sums[3 * HIST_BINS + 1] as f64;
    let mean = s / n;
    let var = (ss / n - mean * mean).max(0.0);
    v.push(mean / 765.0);
    v.push(var.sqrt() / 765.0);
    let (cx, cy) = b.center();
    v.push(cx / width as f64);
    v.push(cy / height as f64);
    v.push(b.width() / width as f64);
    v.push(b.height() / height as f64);
    v.push(b.width() / b.height());
    RoiFeature { values: v }
}

fn pixel_channels(rgb: &[u8]) -> [usize; 3] {
    [rgb[0] as usize >> 5, HIST_BINS + (rgb[1] as usize >> 5), 2 * HIST_BINS + (rgb[2] as usize >> 5)]
}

/// Feature of one RoI by direct summation over its pixels.
pub fn extract_feature(frame: &RgbdFrame, b: &BoundingBox) -> Result<RoiFeature> {
    let (x0, y0, x1, y1) = pixel_rect(b, frame.width, frame.height)?;
    let mut sums = [0u64; CHANNELS];
    for y in y0..y1 {
        for x in x0..x1 {
            let i = 3 * (y * frame.width as usize + x);
            let px = &frame.rgb[i..i + 3];
            for c in pixel_channels(px) {
                sums[c] += 1;
            }
            let t = px.iter().map(|&c| c as u64).sum::<u64>();
            sums[3 * HIST_BINS] += t;
            sums[3 * HIST_BINS + 1] += t * t;
        }
    }
    Ok(assemble(&sums, (x1 - x0) * (y1 - y0), b, frame.width, frame.height))
}

/// Integral images of the feature channels; gives the same features as [`extract_feature`]
/// in constant time per box.
pub struct FeatureIntegral {
    width: u32,
    height: u32,
    stride: usize,
    table: Vec<[u64; CHANNELS]>,
}

impl FeatureIntegral {
    pub fn new(frame: &RgbdFrame) -> Self {
        let (w, h) = (frame.width as usize, frame.height as usize);
        let stride = w + 1;
        let mut table = vec![[0u64; CHANNELS]; stride * (h + 1)];
        for y in 0..h {
            let mut row = [0u64; CHANNELS];
            for x in 0..w {
                let i = 3 * (y * w + x);
                let px = &frame.rgb[i..i + 3];
                for c in pixel_channels(px) {
                    row[c] += 1;
                }
                let t = px.iter().map(|&c| c as u64).sum::<u64>();
                row[3 * HIST_BINS] += t;
                row[3 * HIST_BINS + 1] += t * t;
                let above = table[y * stride + x + 1];
                let cell = &mut table[(y + 1) * stride + x + 1];
                for c in 0..CHANNELS {
                    cell[c] = above[c] + row[c];
                }
            }
        }
        Self { width: frame.width, height: frame.height, stride, table }
    }

    pub fn feature(&self, b: &BoundingBox) -> Result<RoiFeature> {
        let (x0, y0, x1, y1) = pixel_rect(b, self.width, self.height)?;
        let at = |x: usize, y: usize| &self.table[y * self.stride + x];
        let (a, bb, c, d) = (at(x1, y1), at(x0, y1), at(x1, y0), at(x0, y0));
        let mut sums = [0u64; CHANNELS];
        for k in 0..CHANNELS {
            sums[k] = a[k] + d[k] - bb[k] - c[k];
        }
        Ok(assemble(&sums, (x1 - x0) * (y1 - y0), b, self.width, self.height))
    }
}

// ---------------------------------------------------------------------------
// FALKON

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FalkonParams {
    /// Nystrom centers; `None` means min(500, n).
    pub m: Option<usize>,
    /// Gaussian width; `None` means the median pairwise distance of a 200-sample subsample.
    pub sigma: Option<f64>,
    pub lambda: f64,
    pub t_iters: usize,
    pub seed: u64,
}

impl Default for FalkonParams {
    fn default() -> Self {
        Self { m: None, sigma: None, lambda: 1e-6, t_iters: 20, seed: 0 }
    }
}

pub const FALKON_MAX_CENTERS: usize = 500;
const MEDIAN_SUBSAMPLE: usize = 200;
const CG_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalkonModel {
    pub centers: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    /// Residual norms of the preconditioned system, starting with the initial one.
    #[serde(default)]
    pub residuals: Vec<f64>,
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    (-sqdist(a, b) / (2.0 * sigma * sigma)).exp()
}

/// Kernel matrix, rows in parallel; every entry is computed independently so the result does
/// not depend on the thread count.
pub fn kernel_matrix(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = a.par_iter().map(|x| b.iter().map(|c| gaussian_kernel(x, c, sigma)).collect()).collect();
    DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j])
}

/// Median pairwise distance over a seeded subsample of at most 200 rows; 1.0 if degenerate.
pub fn median_heuristic(x: &[Vec<f64>], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample: Vec<&Vec<f64>> = if x.len() > MEDIAN_SUBSAMPLE {
        x.choose_multiple(&mut rng, MEDIAN_SUBSAMPLE).collect()
    } else {
        x.iter().collect()
    };
    let mut d = Vec::new();
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            d.push(sqdist(sample[i], sample[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 && m.is_finite() {
        *m
    } else {
        1.0
    }
}

fn check_finite(x: &[Vec<f64>], what: &'static str) -> Result<()> {
    if x.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Upper-triangular `T` with `TᵀT = K + eps·I`; `eps` grows tenfold until `K` factors.
fn jittered_cholesky(k: &DMatrix<f64>, base: f64) -> Result<(DMatrix<f64>, f64)> {
    let m = k.nrows();
    let mut eps = base;
    for _ in 0..12 {
        let shifted = k + DMatrix::identity(m, m) * eps;
        if let Some(c) = shifted.cholesky() {
            return Ok((c.l().transpose(), eps));
        }
        eps *= 10.0;
    }
    Err(Error::Numerical("kernel matrix could not be factored".into()))
}

/// Nystrom kernel ridge regression solved by preconditioned conjugate residuals.
pub fn falkon_train(x: &[Vec<f64>], y: &[f64], params: &FalkonParams) -> Result<FalkonModel> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    check_finite(x, "features")?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    if !(params.lambda > 0.0) {
        return Err(Error::InvalidInput("lambda must be positive".into()));
    }
    let m = params.m.unwrap_or(n.min(FALKON_MAX_CENTERS));
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("need 1 <= M <= n, got M={m} n={n}")));
    }
    let sigma = match params.sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(_) => return Err(Error::InvalidInput("sigma must be positive".into())),
        None => median_heuristic(x, params.seed),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut idx: Vec<usize> = if m == n { (0..n).collect() } else { rand::seq::index::sample(&mut rng, n, m).into_vec() };
    idx.sort_unstable();
    let centers: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();

    let knm = kernel_matrix(x, &centers, sigma);
    let kmm = kernel_matrix(&centers, &centers, sigma);
    let lambda = params.lambda;
    let nf = n as f64;
    let mf = m as f64;
    // T: chol(Kmm + eps·M·I); A: chol(T·Tᵀ/M + λI)
    let (t, _) = jittered_cholesky(&kmm, 1e-10 * kmm.trace().max(mf))?;
    let (a, _) = jittered_cholesky(&(&t * t.transpose() / mf), lambda)?;
    let t_inv = |v: &DVector<f64>| t.solve_upper_triangular(v).expect("triangular factor is nonsingular");
    let t_inv_t = |v: &DVector<f64>| t.tr_solve_upper_triangular(v).expect("triangular factor is nonsingular");
    let a_inv = |v: &DVector<f64>| a.solve_upper_triangular(v).expect("triangular factor is nonsingular");
    let a_inv_t = |v: &DVector<f64>| a.tr_solve_upper_triangular(v).expect("triangular factor is nonsingular");
    let op = |u: &DVector<f64>| -> DVector<f64> {
        let au = a_inv(u);
        let v = t_inv(&au);
        let kv = &knm * v;
        let w = knm.tr_mul(&kv) / nf;
        a_inv_t(&(t_inv_t(&w) + au * lambda))
    };
    let yv = DVector::from_column_slice(y);
    let b = a_inv_t(&t_inv_t(&(knm.tr_mul(&yv) / nf)));
    let (beta, residuals) = conjugate_residual(op, &b, params.t_iters, CG_TOLERANCE);
    let alpha = t_inv(&a_inv(&beta));
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("FALKON coefficients are not finite".into()));
    }
    Ok(FalkonModel { centers, alpha: alpha.as_slice().to_vec(), sigma, lambda, residuals })
}

/// Conjugate residual iterations for a symmetric operator; unlike plain CG the residual norm
/// never increases. Returns the iterate and the residual history.
pub fn conjugate_residual(
    op: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> (DVector<f64>, Vec<f64>) {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut history = vec![r.norm()];
    if history[0] < tol {
        return (x, history);
    }
    let mut ar = op(&r);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rar = r.dot(&ar);
    for _ in 0..max_iters {
        let apap = ap.dot(&ap);
        if apap <= 0.0 || !apap.is_finite() {
            break;
        }
        let step = rar / apap;
        let x_next = &x + &p * step;
        let r_next = &r - &ap * step;
        let norm = r_next.norm();
        // rounding can break monotonicity once converged; stop instead of degrading
        if !(norm <= *history.last().unwrap()) {
            break;
        }
        x = x_next;
        r = r_next;
        history.push(norm);
        if norm < tol {
            break;
        }
        ar = op(&r);
        let rar_next = r.dot(&ar);
        let beta = rar_next / rar;
        rar = rar_next;
        p = &r + &p * beta;
        ap = &ar + &ap * beta;
    }
    (x, history)
}

impl FalkonModel {
    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.centers.iter().zip(&self.alpha).map(|(c, a)| a * gaussian_kernel(x, c, self.sigma)).sum()
    }

    pub fn decision_batch(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.par_iter().map(|x| self.decision(x)).collect()
    }
}

// ---------------------------------------------------------------------------
// Minibootstrap

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinibootstrapConfig {
    pub n_batches: usize,
    pub batch_size: usize,
    pub hard_threshold: f64,
    pub max_negatives: usize,
}

impl Default for MinibootstrapConfig {
    fn default() -> Self {
        Self { n_batches: 10, batch_size: 2000, hard_threshold: -0.7, max_negatives: 6000 }
    }
}

impl MinibootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batches == 0 || self.batch_size == 0 || self.max_negatives == 0 {
            return Err(Error::InvalidInput("minibootstrap counts must be positive".into()));
        }
        if !(self.hard_threshold < 1.0) {
            return Err(Error::InvalidInput("hard_threshold must be below +1".into()));
        }
        Ok(())
    }
}

/// Per-round record of the hard-negative set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRound {
    pub batch: usize,
    pub scored: usize,
    /// Scores of the negatives added this round; all exceed the threshold.
    pub added_scores: Vec<f64>,
    pub dropped: usize,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOutcome {
    pub model: FalkonModel,
    pub rounds: Vec<BootstrapRound>,
    /// Pool indices of the terminal negative set.
    pub negatives: Vec<usize>,
}

fn train_on(pos: &[Vec<f64>], pool: &[Vec<f64>], negs: &[(usize, f64)], params: &FalkonParams) -> Result<FalkonModel> {
    let mut x: Vec<Vec<f64>> = pos.to_vec();
    x.extend(negs.iter().map(|&(i, _)| pool[i].clone()));
    let mut y = vec![1.0; pos.len()];
    y.resize(x.len(), -1.0);
    falkon_train(&x, &y, params)
}

/// Hard-negative mining: the first batch seeds the negative set, each later batch contributes
/// the negatives the current model scores above `hard_threshold`. When the set exceeds
/// `max_negatives` the lowest-scoring members go first; seed-batch members rank below any mined
/// negative. Batches are consecutive chunks of a seeded shuffle of `pool`.
pub fn minibootstrap_train(
    positives: &[Vec<f64>],
    pool: &[Vec<f64>],
    cfg: &MinibootstrapConfig,
    params: &FalkonParams,
) -> Result<BootstrapOutcome> {
    cfg.validate()?;
    if positives.is_empty() {
        return Err(Error::InvalidInput("minibootstrap needs at least one positive".into()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed ^ 0xb007_57ab));
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).take(cfg.n_batches).collect();
    let mut negs: Vec<(usize, f64)> = batches[0].iter().map(|&i| (i, f64::NEG_INFINITY)).collect();
    let mut rounds = Vec::new();
    let shrink = |negs: &mut Vec<(usize, f64)>| -> usize {
        if negs.len() <= cfg.max_negatives {
            return 0;
        }
        // stable: among equal scores the earliest added survive
        negs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        let dropped = negs.len() - cfg.max_negatives;
        negs.truncate(cfg.max_negatives);
        dropped
    };
    let dropped = shrink(&mut negs);
    rounds.push(BootstrapRound { batch: 0, scored: 0, added_scores: vec![], dropped, retained: negs.len() });
    for (k, batch) in batches.iter().enumerate().skip(1) {
        let model = train_on(positives, pool, &negs, params)?;
        let feats: Vec<Vec<f64>> = batch.iter().map(|&i| pool[i].clone()).collect();
        let scores = model.decision_batch(&feats);
        let mut added = Vec::new();
        for (&i, &s) in batch.iter().zip(&scores) {
            if s > cfg.hard_threshold {
                negs.push((i, s));
                added.push(s);
            }
        }
        let dropped = shrink(&mut negs);
        log::debug!("minibootstrap batch {k}: {} hard of {}, {} retained", added.len(), batch.len(), negs.len());
        rounds.push(BootstrapRound { batch: k, scored: batch.len(), added_scores: added, dropped, retained: negs.len() });
    }
    let model = train_on(positives, pool, &negs, params)?;
    let mut negatives: Vec<usize> = negs.iter().map(|&(i, _)| i).collect();
    negatives.sort_unstable();
    Ok(BootstrapOutcome { model, rounds, negatives })
}

// ---------------------------------------------------------------------------
// Box refinement

/// `(Δcx/w, Δcy/h, ln(w*/w), ln(h*/h))` taking `proposal` to `target`.
pub fn box_deltas(proposal: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (px, py) = proposal.center();
    let (tx, ty) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    [(tx - px) / pw, (ty - py) / ph, (target.width() / pw).ln(), (target.height() / ph).ln()]
}

pub fn apply_deltas(proposal: &BoundingBox, d: &[f64; 4]) -> BoundingBox {
    let (px, py) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let (cx, cy) = (px + d[0] * pw, py + d[1] * ph);
    // keep refined boxes within an order of magnitude of the proposal
    let w = pw * d[2].clamp(-2.3, 2.3).exp();
    let h = ph * d[3].clamp(-2.3, 2.3).exp();
    BoundingBox { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 }
}

/// Ridge regression from features to box deltas with an unregularized bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlsRefiner {
    /// 4 rows of `d` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; 4],
    pub lambda: f64,
}

pub fn rls_train(x: &[Vec<f64>], targets: &[[f64; 4]], lambda: f64) -> Result<RlsRefiner> {
    let n = x.len();
    if n == 0 || targets.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: targets.len() });
    }
    check_finite(x, "features")?;
    if targets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box targets"));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput("lambda_rls must be positive".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("ragged feature matrix".into()));
    }
    let nf = n as f64;
    let mx: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let mt: [f64; 4] = std::array::from_fn(|k| targets.iter().map(|t| t[k]).sum::<f64>() / nf);
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - mx[j]);
    let tc = DMatrix::from_fn(n, 4, |i, k| targets[i][k] - mt[k]);
    let gram = xc.tr_mul(&xc) + DMatrix::identity(d, d) * lambda;
    let rhs = xc.tr_mul(&tc);
    let w = gram.cholesky().ok_or_else(|| Error::Numerical("RLS system is not positive definite".into()))?.solve(&rhs);
    let weights: Vec<Vec<f64>> = (0..4).map(|k| (0..d).map(|j| w[(j, k)]).collect()).collect();
    let bias = std::array::from_fn(|k| mt[k] - (0..d).map(|j| weights[k][j] * mx[j]).sum::<f64>());
    let r = RlsRefiner { weights, bias, lambda };
    if r.weights.iter().flatten().chain(r.bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("RLS weights are not finite".into()));
    }
    Ok(r)
}

impl RlsRefiner {
    pub fn predict(&self, x: &[f64]) -> [f64; 4] {
        std::array::from_fn(|k| self.bias[k] + self.weights[k].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }
}

// ---------------------------------------------------------------------------
// NMS

fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.sort_key().partial_cmp(&b.bbox.sort_key()).unwrap_or(Ordering::Equal))
        .then_with(|| a.label.cmp(&b.label))
}

/// Greedy per-class suppression: visits detections by descending score (ties: lower box
/// coordinates first) and drops any overlapping a kept one of the same label by more than
/// `iou_thresh`. Output is sorted the same way.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(score_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.label != d.label || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Detector

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    pub label: String,
    pub classifier: FalkonModel,
    pub refiner: Option<RlsRefiner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub classes: Vec<ClassModel>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub proposals: ProposalConfig,
}

impl DetectionModel {
    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }
}

/// Proposals of a frame with their features; boxes too small for a feature are skipped.
pub fn frame_proposals(frame: &RgbdFrame, cfg: &ProposalConfig) -> Vec<(BoundingBox, Vec<f64>)> {
    let integral = FeatureIntegral::new(frame);
    propose_regions_with(frame, cfg)
        .into_iter()
        .filter_map(|b| integral.feature(&b).ok().map(|f| (b, f.values)))
        .collect()
}

pub fn detect(model: &DetectionModel, frame: &RgbdFrame) -> Vec<Detection> {
    let feats = frame_proposals(frame, &model.proposals);
    detect_proposals(model, &feats, frame.width, frame.height)
}

/// Scoring, refinement, clipping and NMS over precomputed proposal features.
pub fn detect_proposals(
    model: &DetectionModel,
    feats: &[(BoundingBox, Vec<f64>)],
    width: u32,
    height: u32,
) -> Vec<Detection> {
    let (w, h) = (width as f64, height as f64);
    let mut raw = Vec::new();
    for class in &model.classes {
        let scores: Vec<f64> = feats.par_iter().map(|(_, f)| class.classifier.decision(f)).collect();
        for ((b, f), s) in feats.iter().zip(scores) {
            if !(s > model.score_threshold) {
                continue;
            }
            let refined = class.refiner.as_ref().map_or(*b, |r| apply_deltas(b, &r.predict(f)));
            if let Some(c) = clip_box(&refined, w, h) {
                raw.push(Detection { bbox: c, label: class.label.clone(), score: s });
            }
        }
    }
    nms(&raw, model.nms_iou)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub falkon: FalkonParams,
    pub minibootstrap: MinibootstrapConfig,
    pub proposals: ProposalConfig,
    pub lambda_rls: f64,
    pub positive_iou: f64,
    pub background_iou: f64,
    /// Proposals are mined on every `frame_stride`-th annotated frame.
    pub frame_stride: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            falkon: FalkonParams::default(),
            minibootstrap: MinibootstrapConfig::default(),
            proposals: ProposalConfig::default(),
            lambda_rls: 0.1,
            positive_iou: 0.6,
            background_iou: 0.3,
            frame_stride: 3,
            score_threshold: 0.0,
            nms_iou: 0.3,
        }
    }
}

/// Features gathered from one annotated frame.
#[derive(Debug, Clone, Default)]
pub struct FrameSamples {
    pub label: String,
    /// Annotation box plus proposals overlapping it by at least `positive_iou`, with the deltas
    /// from each to the annotation.
    pub positives: Vec<(Vec<f64>, [f64; 4])>,
    /// Proposals overlapping the annotation below `background_iou`.
    pub background: Vec<Vec<f64>>,
    /// Proposals in between; background only for other classes.
    pub ambiguous: Vec<Vec<f64>>,
}

pub fn frame_samples(frame: &RgbdFrame, ann: &Annotation, mine: bool, cfg: &TrainConfig) -> Result<FrameSamples> {
    let mut s = FrameSamples { label: ann.label.clone(), ..Default::default() };
    if let Ok(f) = extract_feature(frame, &ann.bbox) {
        s.positives.push((f.values, [0.0; 4]));
    }
    if !mine {
        return Ok(s);
    }
    let integral = FeatureIntegral::new(frame);
    for b in propose_regions_with(frame, &cfg.proposals) {
        let Ok(f) = integral.feature(&b) else { continue };
        let o = iou(&b, &ann.bbox);
        if o >= cfg.positive_iou {
            s.positives.push((f.values, box_deltas(&b, &ann.bbox)));
        } else if o < cfg.background_iou {
            s.background.push(f.values);
        } else {
            s.ambiguous.push(f.values);
        }
    }
    Ok(s)
}

/// Trains one FALKON classifier and box refiner per class. For class `c` the background pool is
/// every low-overlap proposal plus every proposal from frames annotated with another class.
pub fn train_detector(samples: &[FrameSamples], labels: &[String], cfg: &TrainConfig) -> Result<DetectionModel> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no classes to train".into()));
    }
    let classes: Vec<Result<ClassModel>> = labels
        .par_iter()
        .enumerate()
        .map(|(ci, label)| {
            let mut pos = Vec::new();
            let mut targets = Vec::new();
            let mut reg_x = Vec::new();
            let mut pool = Vec::new();
            for s in samples {
                if &s.label == label {
                    for (f, t) in &s.positives {
                        pos.push(f.clone());
                        if t != &[0.0; 4] || reg_x.is_empty() {
                            reg_x.push(f.clone());
                            targets.push(*t);
                        }
                    }
                    pool.extend(s.background.iter().cloned());
                } else {
                    pool.extend(s.positives.iter().map(|(f, _)| f.clone()));
                    pool.extend(s.background.iter().cloned());
                    pool.extend(s.ambiguous.iter().cloned());
                }
            }
            if pos.is_empty() {
                return Err(Error::InvalidInput(format!("class {label} has no positives")));
            }
            let params = FalkonParams { seed: cfg.falkon.seed.wrapping_add(ci as u64), ..cfg.falkon };
            let boot = minibootstrap_train(&pos, &pool, &cfg.minibootstrap, &params)?;
            let refiner = if reg_x.len() >= 2 { Some(rls_train(&reg_x, &targets, cfg.lambda_rls)?) } else { None };
            Ok(ClassModel { label: label.clone(), classifier: boot.model, refiner })
        })
        .collect();
    Ok(DetectionModel {
        classes: classes.into_iter().collect::<Result<_>>()?,
        score_threshold: cfg.score_threshold,
        nms_iou: cfg.nms_iou,
        proposals: cfg.proposals.clone(),
    })
}

// ---------------------------------------------------------------------------
// Serialization

const MODEL_MAGIC: &[u8; 4] = b"CDET";
pub const MODEL_VERSION: u16 = 1;

/// JSON class registry stored next to the binary model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRegistry {
    pub format: String,
    pub version: u16,
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub proposals: ProposalConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl DetectionModel {
    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry {
            format: "cuelearn-detector".into(),
            version: MODEL_VERSION,
            feature_dim: FEATURE_DIM,
            classes: self.labels().into_iter().map(String::from).collect(),
            proposals: self.proposals.clone(),
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
        }
    }

    /// Little-endian binary: magic, version, class count, then per class the label, kernel
    /// width, lambda, center count, dimension, centers, coefficients and optional RLS weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.label.len() as u32).to_le_bytes());
            out.extend_from_slice(c.label.as_bytes());
            let f = &c.classifier;
            out.extend_from_slice(&f.sigma.to_le_bytes());
            out.extend_from_slice(&f.lambda.to_le_bytes());
            out.extend_from_slice(&(f.centers.len() as u32).to_le_bytes());
            out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
            for v in f.centers.iter().flatten().chain(&f.alpha) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            match &c.refiner {
                None => out.push(0),
                Some(r) => {
                    out.push(1);
                    out.extend_from_slice(&r.lambda.to_le_bytes());
                    out.extend_from_slice(&(r.weights[0].len() as u32).to_le_bytes());
                    for v in r.weights.iter().flatten().chain(&r.bias) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], registry: &ClassRegistry) -> Result<DetectionModel> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("not a detector model file".into()));
        }
        let version = r.u16()?;
        if version != MODEL_VERSION || registry.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported detector version {version}")));
        }
        let n = r.u32()? as usize;
        let mut classes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let label = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let sigma = r.f64()?;
            let lambda = r.f64()?;
            let m = r.u32()? as usize;
            let d = r.u32()? as usize;
            let mut centers = Vec::with_capacity(m);
            for _ in 0..m {
                centers.push((0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
            }
            let alpha = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let refiner = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let lambda = r.f64()?;
                    let d = r.u32()? as usize;
                    let mut weights = Vec::with_capacity(4);
                    for _ in 0..4 {
                        weights.push((0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
                    }
                    let bias = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
                    Some(RlsRefiner { weights, bias, lambda })
                }
                t => return Err(Error::Format(format!("bad refiner tag {t}"))),
            };
            let classifier = FalkonModel { centers, alpha, sigma, lambda, residuals: vec![] };
            classes.push(ClassModel { label, classifier, refiner });
        }
        r.finish()?;
        let labels: Vec<&str> = classes.iter().map(|c| c.label.as_str()).collect();
        if labels != registry.classes.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::IndexMismatch("class registry does not match the model".into()));
        }
        Ok(DetectionModel {
            classes,
            score_threshold: registry.score_threshold,
            nms_iou: registry.nms_iou,
            proposals: registry.proposals.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn solid_frame(w: u32, h: u32, rgb: [u8; 3], depth: f32) -> RgbdFrame {
        let px: Vec<u8> = (0..w * h).flat_map(|_| rgb).collect();
        RgbdFrame::new(w, h, px, vec![depth; (w * h) as usize], 0.0, 0).unwrap()
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn paint(f: &mut RgbdFrame, b: &BoundingBox, rgb: [u8; 3], depth: f32) {
        for y in b.y_min as u32..b.y_max as u32 {
            for x in b.x_min as u32..b.x_max as u32 {
                let i = (y * f.width + x) as usize;
                f.rgb[3 * i..3 * i + 3].copy_from_slice(&rgb);
                f.depth[i] = depth;
            }
        }
    }

    #[test]
    fn uniform_red_roi() {
        let f = solid_frame(64, 48, [250, 0, 0], 1.0);
        let v = extract_feature(&f, &bx(10.0, 10.0, 30.0, 30.0)).unwrap().values;
        assert_eq!(v.len(), FEATURE_DIM);
        // each channel holds a third of the mass
        assert_abs_diff_eq!(v[7], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[8], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[16], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[..24].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[24], 250.0 / 765.0, epsilon = 1e-12);
        assert_eq!(v[25], 0.0);
    }

    #[test]
    fn histogram_is_translation_invariant() {
        let mut f = solid_frame(64, 48, [20, 20, 20], 1.0);
        paint(&mut f, &bx(4.0, 4.0, 12.0, 12.0), [200, 100, 50], 1.0);
        paint(&mut f, &bx(40.0, 30.0, 48.0, 38.0), [200, 100, 50], 1.0);
        let a = extract_feature(&f, &bx(2.0, 2.0, 14.0, 14.0)).unwrap().values;
        let b = extract_feature(&f, &bx(38.0, 28.0, 50.0, 40.0)).unwrap().values;
        assert_eq!(a[..26], b[..26]);
        assert_ne!(a[26], b[26]);
        assert_ne!(a[27], b[27]);
    }

    #[test]
    fn roi_too_small() {
        let f = solid_frame(64, 48, [0, 0, 0], 1.0);
        assert!(matches!(extract_feature(&f, &bx(0.0, 0.0, 3.0, 3.0)), Err(Error::DegenerateRoi(_))));
    }

    /// Second histogram implementation: per-pixel bin lookup by division.
    fn oracle_feature(f: &RgbdFrame, b: &BoundingBox) -> Vec<f64> {
        let mut hist = [0.0; 24];
        let mut vals = Vec::new();
        for y in 0..f.height {
            for x in 0..f.width {
                if !b.contains_point(x as f64 + 0.5, y as f64 + 0.5) || x as f64 + 0.5 == b.x_max || y as f64 + 0.5 == b.y_max {
                    continue;
                }
                let p = f.rgb_at(x, y);
                for c in 0..3 {
                    hist[c * 8 + (p[c] as usize * 8 / 256)] += 1.0;
                }
                vals.push((p[0] as f64 + p[1] as f64 + p[2] as f64) / 765.0);
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut out: Vec<f64> = hist.iter().map(|c| c / (3.0 * n)).collect();
        out.extend([mean, sd]);
        let (cx, cy) = b.center();
        out.extend([cx / f.width as f64, cy / f.height as f64, b.width() / f.width as f64, b.height() / f.height as f64, b.width() / b.height()]);
        out
    }

    #[test]
    fn features_match_oracle_and_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (40u32, 30u32);
        let rgb: Vec<u8> = (0..3 * w * h).map(|_| rng.random()).collect();
        let f = RgbdFrame::new(w, h, rgb, vec![1.0; (w * h) as usize], 0.0, 0).unwrap();
        let integral = FeatureIntegral::new(&f);
        for _ in 0..50 {
            let x0 = rng.random_range(0.0..30.0f64).floor();
            let y0 = rng.random_range(0.0..20.0f64).floor();
            let b = bx(x0, y0, x0 + rng.random_range(4..10) as f64, y0 + rng.random_range(4..10) as f64);
            let direct = extract_feature(&f, &b).unwrap().values;
            assert_eq!(direct, integral.feature(&b).unwrap().values);
            for (a, o) in direct.iter().zip(oracle_feature(&f, &b)) {
                assert_abs_diff_eq!(*a, o, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn empty_scene_only_grid() {
        let f = solid_frame(320, 240, [100, 100, 100], 3.0);
        let props = propose_regions(&f);
        assert_eq!(props, grid_boxes(320, 240, &ProposalConfig::default().grid_scales));
        assert!(props.len() <= 300);
    }

    #[test]
    fn separated_objects_are_proposed() {
        let mut f = solid_frame(320, 240, [120, 120, 128], 3.0);
        let a = bx(40.0, 50.0, 80.0, 90.0);
        let b = bx(200.0, 120.0, 230.0, 200.0);
        paint(&mut f, &a, [200, 40, 40], 0.7);
        paint(&mut f, &b, [40, 200, 40], 1.2);
        let props = propose_regions(&f);
        for t in [a, b] {
            let best = props.iter().map(|p| iou(p, &t)).fold(0.0, f64::max);
            assert!(best >= 0.7, "{best}");
        }
    }

    /// Exact kernel ridge regression: α = (K + λnI)⁻¹ y.
    fn krr_oracle(x: &[Vec<f64>], y: &[f64], sigma: f64, lambda: f64) -> Vec<f64> {
        let n = x.len();
        let k = kernel_matrix(x, x, sigma);
        let a = (&k + DMatrix::identity(n, n) * (lambda * n as f64)).lu().solve(&DVector::from_column_slice(y)).unwrap();
        (&k * a).as_slice().to_vec()
    }

    fn regression_fixture(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = x.iter().map(|r| (3.0 * r[0]).sin() + r[1] * r[2] + 0.1 * rng.random_range(-1.0..1.0)).collect();
        (x, y)
    }

    #[test]
    fn falkon_matches_exact_krr_with_all_centers() {
        let (x, y) = regression_fixture(200, 1);
        for lambda in [1e-3, 1e-6] {
            let p = FalkonParams { m: Some(200), sigma: Some(0.8), lambda, t_iters: 20, seed: 0 };
            let model = falkon_train(&x, &y, &p).unwrap();
            let oracle = krr_oracle(&x, &y, 0.8, lambda);
            let err = x.iter().zip(&oracle).map(|(r, o)| (model.decision(r) - o).abs()).fold(0.0, f64::max);
            assert!(err < 1e-3, "lambda {lambda}: {err}");
            assert!(model.residuals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn falkon_single_point() {
        let m = falkon_train(&[vec![0.3, 0.1]], &[2.0], &FalkonParams { lambda: 0.5, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(m.alpha[0], 2.0 / 1.5, epsilon = 1e-9);
        assert_eq!(m.sigma, 1.0);
    }

    #[test]
    fn falkon_shrinks_with_lambda() {
        let (x, _) = regression_fixture(60, 2);
        let y = vec![1.0; 60];
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0] {
            let m = falkon_train(&x, &y, &FalkonParams { m: Some(30), sigma: Some(1.0), lambda, ..Default::default() }).unwrap();
            let mean = x.iter().map(|r| m.decision(r)).sum::<f64>() / 60.0;
            assert!(mean < prev && mean > 0.0, "lambda {lambda}: {mean}");
            prev = mean;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn falkon_rejects_bad_input() {
        let p = FalkonParams::default();
        assert!(matches!(falkon_train(&[vec![f64::NAN]], &[1.0], &p), Err(Error::NonFinite(_))));
        assert!(falkon_train(&[vec![1.0]], &[1.0], &FalkonParams { m: Some(2), ..p }).is_err());
    }

    #[test]
    fn falkon_is_seed_deterministic() {
        let (x, y) = regression_fixture(300, 4);
        let p = FalkonParams { m: Some(50), seed: 9, ..Default::default() };
        assert_eq!(falkon_train(&x, &y, &p).unwrap(), falkon_train(&x, &y, &p).unwrap());
    }

    fn blob(rng: &mut ChaCha8Rng, center: [f64; 2], spread: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| center.iter().map(|c| c + spread * rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn easy_pool_keeps_initial_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = blob(&mut rng, [0.0, 0.0], 0.3, 50);
        let pool = blob(&mut rng, [6.0, 6.0], 0.3, 1000);
        let cfg = MinibootstrapConfig { n_batches: 5, batch_size: 100, ..Default::default() };
        let params = FalkonParams { sigma: Some(1.0), lambda: 1e-4, ..Default::default() };
        let out = minibootstrap_train(&pos, &pool, &cfg, &params).unwrap();
        assert!(out.negatives.len() <= 110, "{}", out.negatives.len());
    }

    #[test]
    fn overlapping_cluster_is_mined() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos = blob(&mut rng, [0.0, 0.0], 0.5, 80);
        let mut pool = blob(&mut rng, [5.0, 5.0], 0.5, 900);
        pool.extend(blob(&mut rng, [0.9, 0.0], 0.4, 100));
        let cfg = MinibootstrapConfig { n_batches: 5, batch_size: 200, ..Default::default() };
        let params = FalkonParams { sigma: Some(1.0), lambda: 1e-4, ..Default::default() };
        let out = minibootstrap_train(&pos, &pool, &cfg, &params).unwrap();
        let hard = out.negatives.iter().filter(|&&i| i >= 900).count() as f64 / out.negatives.len() as f64;
        assert!(hard > 0.1 * 2.0, "cluster share {hard}");
        for r in &out.rounds {
            assert!(r.added_scores.iter().all(|s| *s > cfg.hard_threshold));
            assert!(r.retained <= cfg.max_negatives);
        }
    }

    #[test]
    fn single_batch_is_plain_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pos = blob(&mut rng, [0.0, 0.0], 0.5, 20);
        let pool = blob(&mut rng, [2.0, 0.0], 0.5, 50);
        let cfg = MinibootstrapConfig { n_batches: 1, batch_size: 50, ..Default::default() };
        let params = FalkonParams { sigma: Some(1.0), ..Default::default() };
        let out = minibootstrap_train(&pos, &pool, &cfg, &params).unwrap();
        let mut order: Vec<usize> = (0..50).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed ^ 0xb007_57ab));
        let negs: Vec<(usize, f64)> = order.iter().map(|&i| (i, 0.0)).collect();
        assert_eq!(out.model, train_on(&pos, &pool, &negs, &params).unwrap());
        assert!(matches!(minibootstrap_train(&pos, &[], &cfg, &params), Err(Error::EmptyPool)));
    }

    #[test]
    fn cap_drops_lowest_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pos = blob(&mut rng, [0.0, 0.0], 0.5, 40);
        let pool = blob(&mut rng, [0.5, 0.0], 0.6, 600);
        let cfg = MinibootstrapConfig { n_batches: 4, batch_size: 150, max_negatives: 200, hard_threshold: -0.9 };
        let params = FalkonParams { sigma: Some(1.0), lambda: 1e-3, ..Default::default() };
        let out = minibootstrap_train(&pos, &pool, &cfg, &params).unwrap();
        assert!(out.negatives.len() <= 200);
        assert!(out.rounds.iter().any(|r| r.dropped > 0));
    }

    #[test]
    fn rls_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<[f64; 5]> = (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let x: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let t: Vec<[f64; 4]> =
            x.iter().map(|r| std::array::from_fn(|k| 0.5 * k as f64 + w[k].iter().zip(r).map(|(a, b)| a * b).sum::<f64>())).collect();
        let r = rls_train(&x, &t, 1e-9).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(r.bias[k], 0.5 * k as f64, epsilon = 1e-6);
            for j in 0..5 {
                assert_abs_diff_eq!(r.weights[k][j], w[k][j], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn rls_degenerate_cases() {
        let r = rls_train(&[vec![0.2, 0.4]], &[[0.1, -0.2, 0.3, 0.0]], 0.1).unwrap();
        assert_eq!(r.predict(&[0.2, 0.4]), [0.1, -0.2, 0.3, 0.0]);
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0 / (1.0 + i as f64)]).collect();
        let z = rls_train(&x, &[[0.0; 4]; 10], 0.1).unwrap();
        assert!(z.weights.iter().flatten().chain(&z.bias).all(|v| v.abs() < 1e-12));
        assert!(rls_train(&x[..1], &[[f64::NAN, 0.0, 0.0, 0.0]], 0.1).is_err());
    }

    #[test]
    fn deltas_round_trip() {
        let p = bx(10.0, 20.0, 50.0, 60.0);
        let t = bx(14.0, 18.0, 44.0, 70.0);
        let b = apply_deltas(&p, &box_deltas(&p, &t));
        for (a, e) in b.sort_key().iter().zip(t.sort_key()) {
            assert_abs_diff_eq!(*a, e, epsilon = 1e-9);
        }
    }

    #[test]
    fn nms_keeps_one_of_identical() {
        let d = Detection { bbox: bx(0.0, 0.0, 10.0, 10.0), label: "a".into(), score: 0.9 };
        assert_eq!(nms(&[d.clone(), d.clone()], 0.3), vec![d.clone()]);
        let other = Detection { label: "b".into(), ..d.clone() };
        assert_eq!(nms(&[d.clone(), other.clone()], 0.3).len(), 2);
    }

    proptest! {
        #[test]
        fn nms_is_order_independent(boxes in prop::collection::vec((0u8..20, 0u8..20, 4u8..12, 4u8..12, 0u8..4), 1..12), seed in any::<u64>()) {
            let dets: Vec<Detection> = boxes.iter().map(|&(x, y, w, h, s)| Detection {
                bbox: bx(x as f64, y as f64, (x + w) as f64, (y + h) as f64),
                label: "c".into(),
                score: s as f64 * 0.25,
            }).collect();
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = nms(&dets, 0.3);
            prop_assert_eq!(&a, &nms(&shuffled, 0.3));
            for (i, x) in a.iter().enumerate() {
                for y in &a[i + 1..] {
                    prop_assert!(iou(&x.bbox, &y.bbox) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn model_bytes_round_trip() {
        let (x, y) = regression_fixture(30, 10);
        let classifier = falkon_train(&x, &y, &FalkonParams { m: Some(10), ..Default::default() }).unwrap();
        let refiner = rls_train(&x, &vec![[0.1, 0.2, 0.0, -0.1]; 30], 0.1).unwrap();
        let model = DetectionModel {
            classes: vec![
                ClassModel { label: "a".into(), classifier: classifier.clone(), refiner: Some(refiner) },
                ClassModel { label: "b".into(), classifier, refiner: None },
            ],
            score_threshold: 0.0,
            nms_iou: 0.3,
            proposals: ProposalConfig::default(),
        };
        let reg = model.registry();
        let back = DetectionModel::from_bytes(&model.to_bytes(), &reg).unwrap();
        for (a, b) in back.classes.iter().zip(&model.classes) {
            assert_eq!(a.classifier.alpha, b.classifier.alpha);
            assert_eq!(a.classifier.centers, b.classifier.centers);
            assert_eq!(a.refiner, b.refiner);
        }
        let mut wrong = reg.clone();
        wrong.classes.reverse();
        assert!(DetectionModel::from_bytes(&model.to_bytes(), &wrong).is_err());
        assert!(DetectionModel::from_bytes(&model.to_bytes()[..20], &reg).is_err());
    }
}
