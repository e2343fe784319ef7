//! Automatic ground-truth extraction from depth: the hand-proximal strategy, the
//! closest-blob baseline, blob tracking and sequence annotation.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    box_from_pixel_set, distance3, is_valid_depth, Annotation, AnnotationSource, BoundingBox, CameraIntrinsics,
    RgbdFrame,
};
use crate::perception::{Hand, KeypointSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    HandProximal,
    DistanceBased,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::HandProximal, Strategy::DistanceBased];

    pub fn source(self) -> AnnotationSource {
        match self {
            Strategy::HandProximal => AnnotationSource::HandProximal,
            Strategy::DistanceBased => AnnotationSource::DistanceBased,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::HandProximal => "hand-proximal",
            Strategy::DistanceBased => "distance-based",
        }
    }

    pub fn parse(s: &str) -> Option<Strategy> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorConfig {
    pub strategy: Strategy,
    /// Depth tolerance (meters) of the flood fill.
    pub depth_band: f64,
    /// 3D search radius around the hand (meters).
    pub hand_radius: f64,
    pub min_blob_px: usize,
    pub connectivity: Connectivity,
    /// Half-width (pixels) of the wrist-to-elbow corridor removed from hand-proximal candidates.
    pub arm_corridor_half_width: f64,
    /// Largest 3D centroid displacement accepted between consecutive frames (meters).
    pub max_track_jump: f64,
    /// Frames allowed for the first successful segmentation.
    pub init_frames: usize,
    /// Consecutive frames without a blob tolerated before aborting.
    pub max_losses: u32,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::HandProximal,
            depth_band: 0.05,
            hand_radius: 0.25,
            min_blob_px: 20,
            connectivity: Connectivity::Four,
            arm_corridor_half_width: 5.0,
            max_track_jump: 0.15,
            init_frames: 10,
            max_losses: 3,
        }
    }
}

impl AnnotatorConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self { strategy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_band > 0.0 && self.hand_radius > 0.0 && self.max_track_jump > 0.0) {
            return Err(Error::InvalidInput("depth_band, hand_radius and max_track_jump must be positive".into()));
        }
        if self.min_blob_px == 0 || self.init_frames == 0 {
            return Err(Error::InvalidInput("min_blob_px and init_frames must be positive".into()));
        }
        Ok(())
    }
}

/// Connected set of depth pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBlob {
    /// Row-major sorted pixel coordinates.
    pub pixels: Vec<(u32, u32)>,
    pub centroid_3d: [f64; 3],
    pub mean_depth: f64,
}

impl DepthBlob {
    fn from_pixels(mut pixels: Vec<(u32, u32)>, frame: &RgbdFrame, cam: &CameraIntrinsics) -> DepthBlob {
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let mut c = [0.0; 3];
        let mut zsum = 0.0;
        for &(x, y) in &pixels {
            let z = frame.depth_at(x, y) as f64;
            let p = cam.back_project(x, y, z);
            for k in 0..3 {
                c[k] += p[k];
            }
            zsum += z;
        }
        let n = pixels.len() as f64;
        DepthBlob { pixels, centroid_3d: c.map(|v| v / n), mean_depth: zsum / n }
    }

    pub fn bbox(&self) -> Result<BoundingBox> {
        box_from_pixel_set(self.pixels.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn neighbors(x: u32, y: u32, w: u32, h: u32, conn: Connectivity) -> impl Iterator<Item = (u32, u32)> {
    const FOUR: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const EIGHT: [(i32, i32); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let offs: &'static [(i32, i32)] = match conn {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    };
    offs.iter().filter_map(move |(dx, dy)| {
        let nx = x as i64 + *dx as i64;
        let ny = y as i64 + *dy as i64;
        (nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64).then_some((nx as u32, ny as u32))
    })
}

/// Closest-blob baseline: grows from the globally nearest valid pixel, keeping pixels within
/// `depth_band` of the blob minimum.
pub fn segment_distance_based(frame: &RgbdFrame, cfg: &AnnotatorConfig) -> Option<DepthBlob> {
    let cam = CameraIntrinsics::for_resolution(frame.width, frame.height);
    let (w, h) = (frame.width, frame.height);
    let mut seed = None;
    let mut dmin = f32::INFINITY;
    for (i, d) in frame.depth.iter().enumerate() {
        if is_valid_depth(*d) && *d < dmin {
            dmin = *d;
            seed = Some(i);
        }
    }
    let seed = seed?;
    let mut visited = vec![false; frame.pixel_count()];
    let mut queue = VecDeque::from([((seed as u32 % w), (seed as u32 / w))]);
    visited[seed] = true;
    // the seed is the global minimum, so the running minimum never moves below it
    let limit = dmin as f64 + cfg.depth_band;
    let mut pixels = Vec::new();
    while let Some((x, y)) = queue.pop_front() {
        pixels.push((x, y));
        for (nx, ny) in neighbors(x, y, w, h, cfg.connectivity) {
            let i = (ny * w + nx) as usize;
            let d = frame.depth[i];
            if !visited[i] && is_valid_depth(d) && d as f64 <= limit {
                visited[i] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    (pixels.len() >= cfg.min_blob_px).then(|| DepthBlob::from_pixels(pixels, frame, &cam))
}

/// Median valid depth in the 5x5 window around `(x, y)`.
fn window_depth(frame: &RgbdFrame, x: f64, y: f64) -> Option<f64> {
    let (cx, cy) = (x.floor() as i64, y.floor() as i64);
    let mut vals = Vec::with_capacity(25);
    for dy in -2..=2 {
        for dx in -2..=2 {
            let (px, py) = (cx + dx, cy + dy);
            if px >= 0 && py >= 0 && px < frame.width as i64 && py < frame.height as i64 {
                let d = frame.depth_at(px as u32, py as u32);
                if is_valid_depth(d) {
                    vals.push(d as f64);
                }
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    Some(vals[vals.len() / 2])
}

/// Distance from `p` to the segment `a`-`b` in pixel space.
fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Flood fill over `candidate` pixels from `seed`, joining neighbors whose depths differ by at
/// most `band`.
fn grow_continuous(
    frame: &RgbdFrame,
    candidate: &[bool],
    seed: usize,
    band: f64,
    conn: Connectivity,
) -> Vec<(u32, u32)> {
    let (w, h) = (frame.width, frame.height);
    let mut visited = vec![false; frame.pixel_count()];
    visited[seed] = true;
    let mut queue = VecDeque::from([(seed as u32 % w, seed as u32 / w)]);
    let mut pixels = Vec::new();
    while let Some((x, y)) = queue.pop_front() {
        pixels.push((x, y));
        let d0 = frame.depth_at(x, y) as f64;
        for (nx, ny) in neighbors(x, y, w, h, conn) {
            let i = (ny * w + nx) as usize;
            if !visited[i] && candidate[i] && (frame.depth[i] as f64 - d0).abs() <= band {
                visited[i] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    pixels
}

/// Segments the blob nearest to a 3D anchor among pixels within `hand_radius` of it.
fn segment_near_point(
    frame: &RgbdFrame,
    anchor: [f64; 3],
    corridor: Option<((f64, f64), (f64, f64), f64)>,
    cfg: &AnnotatorConfig,
) -> Option<DepthBlob> {
    let cam = CameraIntrinsics::for_resolution(frame.width, frame.height);
    let (w, h) = (frame.width, frame.height);
    let mut candidate = vec![false; frame.pixel_count()];
    let mut best: Option<(usize, f64)> = None;
    // only pixels whose depth could be within the radius need a 3D test
    let (zlo, zhi) = (anchor[2] - cfg.hand_radius, anchor[2] + cfg.hand_radius);
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            let d = frame.depth[i];
            if !is_valid_depth(d) || (d as f64) < zlo || (d as f64) > zhi {
                continue;
            }
            let p = cam.back_project(x, y, d as f64);
            let dist = distance3(p, anchor);
            if dist > cfg.hand_radius {
                continue;
            }
            if let Some((a, b, half)) = corridor {
                if point_segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b) <= half {
                    continue;
                }
            }
            candidate[i] = true;
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
    }
    let (seed, _) = best?;
    let pixels = grow_continuous(frame, &candidate, seed, cfg.depth_band, cfg.connectivity);
    (pixels.len() >= cfg.min_blob_px).then(|| DepthBlob::from_pixels(pixels, frame, &cam))
}

/// 3D hand point: the wrist pixel back-projected at the median depth of its 5x5 window.
pub fn hand_point(frame: &RgbdFrame, teacher_kp: &KeypointSet, hand: Hand) -> Option<[f64; 3]> {
    let cam = CameraIntrinsics::for_resolution(frame.width, frame.height);
    let wrist = teacher_kp.get(hand.wrist())?;
    let z = window_depth(frame, wrist.x, wrist.y)?;
    Some(cam.back_project_continuous(wrist.x, wrist.y, z))
}

/// Hand-proximal segmentation around the selected wrist, excluding the forearm corridor.
pub fn segment_hand_proximal(
    frame: &RgbdFrame,
    teacher_kp: &KeypointSet,
    hand: Hand,
    cfg: &AnnotatorConfig,
) -> Option<DepthBlob> {
    let anchor = hand_point(frame, teacher_kp, hand)?;
    let wrist = teacher_kp.get(hand.wrist())?;
    let corridor = teacher_kp
        .get(hand.elbow())
        .map(|e| ((wrist.x, wrist.y), (e.x, e.y), cfg.arm_corridor_half_width));
    segment_near_point(frame, anchor, corridor, cfg)
}

/// Re-segments around the previous blob's centroid and accepts the result only if the
/// centroid moved less than `max_track_jump`.
pub fn track_blob(prev: &DepthBlob, frame: &RgbdFrame, cfg: &AnnotatorConfig) -> Option<DepthBlob> {
    if prev.is_empty() {
        return None;
    }
    let next = segment_near_point(frame, prev.centroid_3d, None, cfg)?;
    (distance3(next.centroid_3d, prev.centroid_3d) < cfg.max_track_jump).then_some(next)
}

/// Inputs the annotator needs for one frame.
pub struct AnnotatorInput<'a> {
    pub frame: &'a RgbdFrame,
    /// Teacher keypoints and selected hand; only used by the hand-proximal strategy.
    pub teacher: Option<(&'a KeypointSet, Hand)>,
}

/// Per-frame outcome of the streaming annotator.
#[derive(Debug, Clone, PartialEq)]
pub enum AnnotatorStep {
    Annotated(Annotation),
    /// No blob this frame; the count of consecutive losses so far.
    Lost(u32),
    /// Still looking for the first blob.
    Searching,
}

/// Streaming sequence annotator with tracking, re-seeding and loss accounting.
#[derive(Debug, Clone)]
pub struct SequenceAnnotator {
    pub label: String,
    pub cfg: AnnotatorConfig,
    prev: Option<DepthBlob>,
    frames_seen: usize,
    losses: u32,
}

impl SequenceAnnotator {
    pub fn new(label: impl Into<String>, cfg: AnnotatorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { label: label.into(), cfg, prev: None, frames_seen: 0, losses: 0 })
    }

    fn segment(&self, input: &AnnotatorInput<'_>) -> Option<DepthBlob> {
        match self.cfg.strategy {
            Strategy::DistanceBased => segment_distance_based(input.frame, &self.cfg),
            Strategy::HandProximal => {
                input.teacher.and_then(|(kp, hand)| segment_hand_proximal(input.frame, kp, hand, &self.cfg))
            }
        }
    }

    /// The baseline's tracker is its own closest-blob thresholding, gated by the same
    /// centroid jump; it has no notion of the hand or the previous blob's neighbourhood.
    fn track(&self, prev: &DepthBlob, frame: &RgbdFrame) -> Option<DepthBlob> {
        match self.cfg.strategy {
            Strategy::HandProximal => track_blob(prev, frame, &self.cfg),
            Strategy::DistanceBased => segment_distance_based(frame, &self.cfg)
                .filter(|b| distance3(b.centroid_3d, prev.centroid_3d) < self.cfg.max_track_jump),
        }
    }

    pub fn last_blob(&self) -> Option<&DepthBlob> {
        self.prev.as_ref()
    }

    pub fn step(&mut self, input: &AnnotatorInput<'_>) -> Result<AnnotatorStep> {
        self.frames_seen += 1;
        let blob = match &self.prev {
            None => {
                let b = self.segment(input);
                if b.is_none() {
                    if self.frames_seen >= self.cfg.init_frames {
                        return Err(Error::InitialSegmentationFailed(self.cfg.init_frames));
                    }
                    return Ok(AnnotatorStep::Searching);
                }
                b
            }
            Some(prev) => self.track(prev, input.frame).or_else(|| self.segment(input)),
        };
        match blob {
            Some(b) => {
                self.losses = 0;
                let annotation = Annotation {
                    frame_index: input.frame.index,
                    bbox: b.bbox()?,
                    label: self.label.clone(),
                    source: self.cfg.strategy.source(),
                    pixel_count: b.len(),
                };
                self.prev = Some(b);
                Ok(AnnotatorStep::Annotated(annotation))
            }
            None => {
                self.losses += 1;
                if self.losses > self.cfg.max_losses {
                    return Err(Error::AnnotationAborted { frame: input.frame.index, losses: self.losses });
                }
                Ok(AnnotatorStep::Lost(self.losses))
            }
        }
    }
}

/// Annotates a whole sequence; fails when the first blob is not found within the initial
/// window or the track is lost for more than `max_losses` consecutive frames.
pub fn annotate_sequence<'a>(
    inputs: impl IntoIterator<Item = AnnotatorInput<'a>>,
    label: &str,
    cfg: &AnnotatorConfig,
) -> Result<Vec<Annotation>> {
    let mut ann = SequenceAnnotator::new(label, *cfg)?;
    let mut out = Vec::new();
    for input in inputs {
        if let AnnotatorStep::Annotated(a) = ann.step(&input)? {
            out.push(a);
        }
    }
    Ok(out)
}

/// One JSON object per line.
pub fn annotations_to_jsonl(anns: &[Annotation]) -> Result<String> {
    let mut s = String::new();
    for a in anns {
        s.push_str(&serde_json::to_string(a)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn annotations_from_jsonl(text: &str) -> Result<Vec<Annotation>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
