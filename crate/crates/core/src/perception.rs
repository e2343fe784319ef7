//! Keypoint-level perception: gaze feature vectors, face crops and teacher tracking.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, BoundingBox};

/// Named body/face keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Joint {
    /// Eye contour point `0..8` of the person's right eye.
    RightEye(u8),
    LeftEye(u8),
    RightEar,
    LeftEar,
    Nose,
    RightWrist,
    LeftWrist,
    RightElbow,
    LeftElbow,
    RightHip,
    LeftHip,
    HeadCentroid,
}

/// Points per eye contour.
pub const EYE_POINTS: u8 = 8;

/// The 19 face keypoints in feature order: right eye, left eye, ears, nose.
pub const FACE_JOINTS: [Joint; 19] = [
    Joint::RightEye(0),
    Joint::RightEye(1),
    Joint::RightEye(2),
    Joint::RightEye(3),
    Joint::RightEye(4),
    Joint::RightEye(5),
    Joint::RightEye(6),
    Joint::RightEye(7),
    Joint::LeftEye(0),
    Joint::LeftEye(1),
    Joint::LeftEye(2),
    Joint::LeftEye(3),
    Joint::LeftEye(4),
    Joint::LeftEye(5),
    Joint::LeftEye(6),
    Joint::LeftEye(7),
    Joint::RightEar,
    Joint::LeftEar,
    Joint::Nose,
];

impl Joint {
    pub fn is_face(&self) -> bool {
        matches!(
            self,
            Joint::RightEye(_) | Joint::LeftEye(_) | Joint::RightEar | Joint::LeftEar | Joint::Nose
        )
    }

    /// The joint on the other side of the body. Eye contours run counterclockwise from the
    /// outer-right point, so a horizontal flip maps contour angle `a` to `pi - a`.
    pub fn mirrored(&self) -> Joint {
        let flip = |i: u8| (EYE_POINTS + EYE_POINTS / 2 - i % EYE_POINTS) % EYE_POINTS;
        match *self {
            Joint::RightEye(i) => Joint::LeftEye(flip(i)),
            Joint::LeftEye(i) => Joint::RightEye(flip(i)),
            Joint::RightEar => Joint::LeftEar,
            Joint::LeftEar => Joint::RightEar,
            Joint::RightWrist => Joint::LeftWrist,
            Joint::LeftWrist => Joint::RightWrist,
            Joint::RightElbow => Joint::LeftElbow,
            Joint::LeftElbow => Joint::RightElbow,
            Joint::RightHip => Joint::LeftHip,
            Joint::LeftHip => Joint::RightHip,
            j => j,
        }
    }
}

impl fmt::Display for Joint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Joint::RightEye(i) => write!(f, "right_eye_{i}"),
            Joint::LeftEye(i) => write!(f, "left_eye_{i}"),
            Joint::RightEar => f.write_str("right_ear"),
            Joint::LeftEar => f.write_str("left_ear"),
            Joint::Nose => f.write_str("nose"),
            Joint::RightWrist => f.write_str("right_wrist"),
            Joint::LeftWrist => f.write_str("left_wrist"),
            Joint::RightElbow => f.write_str("right_elbow"),
            Joint::LeftElbow => f.write_str("left_elbow"),
            Joint::RightHip => f.write_str("right_hip"),
            Joint::LeftHip => f.write_str("left_hip"),
            Joint::HeadCentroid => f.write_str("head_centroid"),
        }
    }
}

impl FromStr for Joint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let eye = |rest: &str| -> Result<u8> {
            rest.parse::<u8>()
                .ok()
                .filter(|i| *i < EYE_POINTS)
                .ok_or_else(|| Error::Format(format!("bad eye index in `{s}`")))
        };
        Ok(match s {
            "right_ear" => Joint::RightEar,
            "left_ear" => Joint::LeftEar,
            "nose" => Joint::Nose,
            "right_wrist" => Joint::RightWrist,
            "left_wrist" => Joint::LeftWrist,
            "right_elbow" => Joint::RightElbow,
            "left_elbow" => Joint::LeftElbow,
            "right_hip" => Joint::RightHip,
            "left_hip" => Joint::LeftHip,
            "head_centroid" => Joint::HeadCentroid,
            _ => {
                if let Some(rest) = s.strip_prefix("right_eye_") {
                    Joint::RightEye(eye(rest)?)
                } else if let Some(rest) = s.strip_prefix("left_eye_") {
                    Joint::LeftEye(eye(rest)?)
                } else {
                    return Err(Error::Format(format!("unknown joint `{s}`")));
                }
            }
        })
    }
}

impl TryFrom<String> for Joint {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Joint> for String {
    fn from(j: Joint) -> String {
        j.to_string()
    }
}

/// Which of the teacher's hands (the person's own left/right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn wrist(self) -> Joint {
        match self {
            Hand::Left => Joint::LeftWrist,
            Hand::Right => Joint::RightWrist,
        }
    }

    pub fn elbow(self) -> Joint {
        match self {
            Hand::Left => Joint::LeftElbow,
            Hand::Right => Joint::RightElbow,
        }
    }

    pub fn other(self) -> Hand {
        match self {
            Hand::Left => Hand::Right,
            Hand::Right => Hand::Left,
        }
    }
}

/// 2D keypoint with detector confidence `k` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub k: f64,
}

/// Keypoints of one person in one frame. Missing keypoints are absent from the map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeypointSet {
    pub person_ref: u32,
    pub points: BTreeMap<Joint, Keypoint>,
}

impl KeypointSet {
    pub fn new(person_ref: u32) -> Self {
        Self { person_ref, points: BTreeMap::new() }
    }

    pub fn insert(&mut self, joint: Joint, kp: Keypoint) {
        self.points.insert(joint, Keypoint { k: kp.k.clamp(0.0, 1.0), ..kp });
    }

    pub fn get(&self, joint: Joint) -> Option<&Keypoint> {
        self.points.get(&joint)
    }

    pub fn face_points(&self) -> impl Iterator<Item = (Joint, &Keypoint)> {
        FACE_JOINTS.iter().filter_map(move |j| self.points.get(j).map(|kp| (*j, kp)))
    }

    pub fn face_count(&self) -> usize {
        self.face_points().count()
    }

    /// Explicit head centroid keypoint, or the mean of the present face points.
    pub fn head_centroid(&self) -> Option<(f64, f64)> {
        if let Some(c) = self.get(Joint::HeadCentroid) {
            return Some((c.x, c.y));
        }
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (_, kp) in self.face_points() {
            sx += kp.x;
            sy += kp.y;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Mean of the visible hip keypoints.
    pub fn hip_position(&self) -> Option<(f64, f64)> {
        let hips: Vec<_> =
            [Joint::LeftHip, Joint::RightHip].iter().filter_map(|j| self.get(*j)).collect();
        if hips.is_empty() {
            return None;
        }
        let n = hips.len() as f64;
        Some((hips.iter().map(|h| h.x).sum::<f64>() / n, hips.iter().map(|h| h.y).sum::<f64>() / n))
    }

    /// Horizontal mirror about `x = axis_x`, swapping left/right joint names.
    pub fn mirrored(&self, axis_x: f64) -> KeypointSet {
        let points = self
            .points
            .iter()
            .map(|(j, kp)| (j.mirrored(), Keypoint { x: 2.0 * axis_x - kp.x, ..*kp }))
            .collect();
        KeypointSet { person_ref: self.person_ref, points }
    }

    /// Applies `f` to every keypoint location, keeping confidences.
    pub fn map_xy(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> KeypointSet {
        let points = self
            .points
            .iter()
            .map(|(j, kp)| {
                let (x, y) = f(kp.x, kp.y);
                (*j, Keypoint { x, y, k: kp.k })
            })
            .collect();
        KeypointSet { person_ref: self.person_ref, points }
    }
}

/// Minimum number of the 19 face keypoints needed to build a gaze feature.
pub const GAZE_MIN_FACE_POINTS: usize = 12;
pub const GAZE_FEATURE_DIM: usize = 57;

/// Normalized 57-element face feature (19 `(x, y, k)` triplets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeFeature {
    pub values: Vec<f64>,
}

/// Centers the face keypoints on the head centroid and scales by the farthest point.
///
/// Absent keypoints become `(0, 0, 0)`; confidences are passed through unchanged.
pub fn gaze_feature(kp: &KeypointSet) -> Result<GazeFeature> {
    let present = kp.face_count();
    if present < GAZE_MIN_FACE_POINTS {
        return Err(Error::InsufficientKeypoints { present, required: GAZE_MIN_FACE_POINTS });
    }
    let (cx, cy) = kp.head_centroid().ok_or(Error::DegenerateFeature)?;
    let max_dist = kp
        .face_points()
        .map(|(_, p)| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .fold(0.0f64, f64::max);
    if !(max_dist > 0.0) || !max_dist.is_finite() {
        return Err(Error::DegenerateFeature);
    }
    let mut values = Vec::with_capacity(GAZE_FEATURE_DIM);
    for j in FACE_JOINTS {
        match kp.get(j) {
            Some(p) => {
                values.push((p.x - cx) / max_dist);
                values.push((p.y - cy) / max_dist);
                values.push(p.k);
            }
            None => values.extend_from_slice(&[0.0, 0.0, 0.0]),
        }
    }
    Ok(GazeFeature { values })
}

pub const DEFAULT_FACE_MARGIN: f64 = 0.25;

/// Box around the face keypoints, expanded by `margin` of its size on every side and clipped.
pub fn face_crop_box(kp: &KeypointSet, margin: f64, width: u32, height: u32) -> Result<BoundingBox> {
    let pts: Vec<&Keypoint> = kp.face_points().map(|(_, p)| p).collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientKeypoints { present: pts.len(), required: 3 });
    }
    let x_min = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let x_max = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y_min = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    // collinear points still get a one-pixel extent
    let (w, h) = ((x_max - x_min).max(1.0), (y_max - y_min).max(1.0));
    let (xc, yc) = ((x_min + x_max) / 2.0, (y_min + y_max) / 2.0);
    let expanded = BoundingBox {
        x_min: xc - w / 2.0 - margin * w,
        y_min: yc - h / 2.0 - margin * h,
        x_max: xc + w / 2.0 + margin * w,
        y_max: yc + h / 2.0 + margin * h,
    };
    clip_box(&expanded, width as f64, height as f64)
        .ok_or_else(|| Error::InvalidInput("face keypoints lie outside the frame".into()))
}

/// Parameters of the teacher tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    /// Face-classifier decision value above which a person is accepted as the teacher.
    pub accept_threshold: f64,
    /// Largest hip displacement (pixels) between consecutive frames.
    pub max_jump_px: f64,
    /// Frames the hip track may continue without a face confirmation.
    pub max_unconfirmed_frames: u32,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self::for_resolution(320)
    }
}

impl TrackConfig {
    pub fn for_resolution(width: u32) -> Self {
        Self {
            accept_threshold: 0.0,
            max_jump_px: 50.0 * width as f64 / 320.0,
            max_unconfirmed_frames: 35,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TeacherTrack {
    /// Person identified as the teacher in the latest frame.
    pub teacher_ref: Option<u32>,
    pub last_hip_position: Option<(f64, f64)>,
    pub frames_since_face_seen: u32,
    pub lost: bool,
}

impl TeacherTrack {
    pub fn is_tracking(&self) -> bool {
        self.teacher_ref.is_some() && !self.lost
    }
}

/// Updates the teacher track for one frame.
///
/// `teacher_scores[i]` is the face-classifier decision for `people[i]`, or `None` when the face
/// is not visible. A positive face match wins; otherwise the nearest hip continues the track.
pub fn associate_teacher(
    prev: &TeacherTrack,
    people: &[KeypointSet],
    teacher_scores: &[Option<f64>],
    cfg: &TrackConfig,
) -> TeacherTrack {
    let best_face = people
        .iter()
        .zip(teacher_scores)
        .filter_map(|(p, s)| s.filter(|v| *v > cfg.accept_threshold).map(|v| (p, v)))
        .fold(None::<(&KeypointSet, f64)>, |acc, (p, v)| match acc {
            Some((_, best)) if best >= v => acc,
            _ => Some((p, v)),
        });
    if let Some((person, _)) = best_face {
        return TeacherTrack {
            teacher_ref: Some(person.person_ref),
            last_hip_position: person.hip_position().or(prev.last_hip_position),
            frames_since_face_seen: 0,
            lost: false,
        };
    }

    let lost = TeacherTrack {
        teacher_ref: None,
        last_hip_position: prev.last_hip_position,
        frames_since_face_seen: prev.frames_since_face_seen.saturating_add(1),
        lost: true,
    };
    let Some((hx, hy)) = prev.last_hip_position else {
        return lost;
    };
    if prev.lost || prev.frames_since_face_seen >= cfg.max_unconfirmed_frames {
        return lost;
    }
    let nearest = people
        .iter()
        .filter_map(|p| p.hip_position().map(|(x, y)| (p, ((x - hx).powi(2) + (y - hy).powi(2)).sqrt(), (x, y))))
        .fold(None::<(&KeypointSet, f64, (f64, f64))>, |acc, cand| match acc {
            Some((_, d, _)) if d <= cand.1 => acc,
            _ => Some(cand),
        });
    match nearest {
        Some((person, dist, hip)) if dist <= cfg.max_jump_px => TeacherTrack {
            teacher_ref: Some(person.person_ref),
            last_hip_position: Some(hip),
            frames_since_face_seen: prev.frames_since_face_seen + 1,
            lost: false,
        },
        _ => lost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn face_at(person: u32, cx: f64, cy: f64, scale: f64) -> KeypointSet {
        let mut kp = KeypointSet::new(person);
        for (i, j) in FACE_JOINTS.iter().enumerate() {
            let a = i as f64 * 0.7;
            let r = scale * (0.3 + 0.035 * i as f64);
            kp.insert(*j, Keypoint { x: cx + r * a.cos(), y: cy + r * a.sin(), k: 0.5 + 0.02 * i as f64 });
        }
        kp.insert(Joint::HeadCentroid, Keypoint { x: cx, y: cy, k: 1.0 });
        kp
    }

    fn with_hips(mut kp: KeypointSet, x: f64, y: f64) -> KeypointSet {
        kp.insert(Joint::LeftHip, Keypoint { x: x + 5.0, y, k: 1.0 });
        kp.insert(Joint::RightHip, Keypoint { x: x - 5.0, y, k: 1.0 });
        kp
    }

    #[test]
    fn joint_names_round_trip() {
        for j in FACE_JOINTS.iter().chain([Joint::HeadCentroid, Joint::LeftWrist].iter()) {
            assert_eq!(j.to_string().parse::<Joint>().unwrap(), *j);
        }
        assert!("left_eye_9".parse::<Joint>().is_err());
    }

    #[test]
    fn farthest_point_has_unit_norm() {
        let kp = face_at(0, 100.0, 80.0, 40.0 / (0.3 + 0.035 * 18.0));
        let f = gaze_feature(&kp).unwrap();
        assert_eq!(f.values.len(), GAZE_FEATURE_DIM);
        let norms: Vec<f64> = f.values.chunks(3).map(|t| (t[0] * t[0] + t[1] * t[1]).sqrt()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        // the farthest input point sits exactly 40 px out
        assert!((norms[18] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_and_scale_leave_feature_unchanged() {
        let kp = face_at(0, 100.0, 80.0, 20.0);
        let base = gaze_feature(&kp).unwrap();
        let shifted = gaze_feature(&kp.map_xy(|x, y| (x + 30.0, y + 30.0))).unwrap();
        let scaled = gaze_feature(&kp.map_xy(|x, y| (100.0 + 2.0 * (x - 100.0), 80.0 + 2.0 * (y - 80.0)))).unwrap();
        for ((a, b), c) in base.values.iter().zip(&shifted.values).zip(&scaled.values) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_points_impute_zero_and_quorum_enforced() {
        let mut kp = face_at(0, 50.0, 50.0, 10.0);
        kp.points.remove(&Joint::Nose);
        let f = gaze_feature(&kp).unwrap();
        assert_eq!(&f.values[54..57], &[0.0, 0.0, 0.0]);
        for j in FACE_JOINTS.iter().take(8) {
            kp.points.remove(j);
        }
        assert!(matches!(gaze_feature(&kp), Err(Error::InsufficientKeypoints { present: 10, .. })));
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let mut kp = KeypointSet::new(0);
        for j in FACE_JOINTS {
            kp.insert(j, Keypoint { x: 5.0, y: 5.0, k: 1.0 });
        }
        assert!(matches!(gaze_feature(&kp), Err(Error::DegenerateFeature)));
    }

    fn square_face(x0: f64, y0: f64, x1: f64, y1: f64) -> KeypointSet {
        let mut kp = KeypointSet::new(0);
        kp.insert(Joint::RightEar, Keypoint { x: x0, y: y0, k: 1.0 });
        kp.insert(Joint::LeftEar, Keypoint { x: x1, y: y1, k: 1.0 });
        kp.insert(Joint::Nose, Keypoint { x: (x0 + x1) / 2.0, y: (y0 + y1) / 2.0, k: 1.0 });
        kp
    }

    #[test]
    fn face_crop_examples() {
        let kp = square_face(10.0, 10.0, 30.0, 30.0);
        let b = face_crop_box(&kp, 0.25, 320, 240).unwrap();
        assert_eq!(b, BoundingBox::new(5.0, 5.0, 35.0, 35.0).unwrap());
        let tight = face_crop_box(&kp, 0.0, 320, 240).unwrap();
        assert_eq!(tight, BoundingBox::new(10.0, 10.0, 30.0, 30.0).unwrap());
        let edge = face_crop_box(&square_face(300.0, 220.0, 319.0, 239.0), 0.25, 320, 240).unwrap();
        assert!(edge.x_max <= 320.0 && edge.y_max <= 240.0);
        let mut few = KeypointSet::new(0);
        few.insert(Joint::Nose, Keypoint { x: 1.0, y: 1.0, k: 1.0 });
        assert!(face_crop_box(&few, 0.25, 320, 240).is_err());
    }

    #[test]
    fn unique_positive_face_is_teacher() {
        let p = with_hips(face_at(4, 100.0, 50.0, 10.0), 100.0, 150.0);
        let t = associate_teacher(&TeacherTrack::default(), &[p], &[Some(0.8)], &TrackConfig::default());
        assert_eq!(t.teacher_ref, Some(4));
        assert_eq!(t.frames_since_face_seen, 0);
        assert!(!t.lost);
    }

    #[test]
    fn hidden_face_follows_nearest_hip() {
        let prev = TeacherTrack { teacher_ref: Some(1), last_hip_position: Some((100.0, 150.0)), frames_since_face_seen: 2, lost: false };
        let near = with_hips(KeypointSet::new(1), 110.0, 150.0);
        let far = with_hips(KeypointSet::new(2), 300.0, 150.0);
        let t = associate_teacher(&prev, &[far, near], &[None, None], &TrackConfig::default());
        assert_eq!(t.teacher_ref, Some(1));
        assert_eq!(t.frames_since_face_seen, 3);
    }

    #[test]
    fn hip_jump_beyond_threshold_loses_track() {
        let prev = TeacherTrack { teacher_ref: Some(1), last_hip_position: Some((100.0, 150.0)), frames_since_face_seen: 0, lost: false };
        let p = with_hips(KeypointSet::new(1), 180.0, 150.0);
        let t = associate_teacher(&prev, &[p], &[None], &TrackConfig::default());
        assert!(t.lost);
        assert_eq!(t.teacher_ref, None);
    }

    #[test]
    fn unconfirmed_track_expires() {
        let cfg = TrackConfig::default();
        let mut t = TeacherTrack { teacher_ref: Some(1), last_hip_position: Some((100.0, 150.0)), frames_since_face_seen: 0, lost: false };
        let p = with_hips(KeypointSet::new(1), 100.0, 150.0);
        for _ in 0..cfg.max_unconfirmed_frames {
            t = associate_teacher(&t, std::slice::from_ref(&p), &[None], &cfg);
            assert!(!t.lost);
        }
        t = associate_teacher(&t, &[p], &[None], &cfg);
        assert!(t.lost);
    }

    #[test]
    fn empty_scene_is_lost() {
        let t = associate_teacher(&TeacherTrack::default(), &[], &[], &TrackConfig::default());
        assert!(t.lost);
    }

    proptest! {
        #[test]
        fn gaze_feature_similarity_invariant(dx in -200.0..200.0f64, dy in -200.0..200.0f64, s in 0.2..5.0f64) {
            let kp = face_at(0, 120.0, 90.0, 15.0);
            let base = gaze_feature(&kp).unwrap();
            let moved = kp.map_xy(|x, y| (120.0 + dx + s * (x - 120.0), 90.0 + dy + s * (y - 90.0)));
            let f = gaze_feature(&moved).unwrap();
            for (a, b) in base.values.iter().zip(&f.values) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn face_crop_contains_keypoints(pts in proptest::collection::vec((0.0..320.0f64, 0.0..240.0f64), 3..19), m in 0.0..0.5f64) {
            let mut kp = KeypointSet::new(0);
            for (j, (x, y)) in FACE_JOINTS.iter().zip(&pts) {
                kp.insert(*j, Keypoint { x: *x, y: *y, k: 1.0 });
            }
            let b = face_crop_box(&kp, m, 320, 240).unwrap();
            for (_, p) in kp.face_points() {
                prop_assert!(b.contains_point(p.x, p.y));
            }
        }

        #[test]
        fn at_most_one_teacher(scores in proptest::collection::vec(proptest::option::of(-2.0..2.0f64), 0..6),
                               hips in proptest::collection::vec((0.0..320.0f64, 0.0..240.0f64), 6)) {
            let people: Vec<KeypointSet> = scores.iter().enumerate()
                .map(|(i, _)| with_hips(KeypointSet::new(i as u32), hips[i].0, hips[i].1)).collect();
            let prev = TeacherTrack { teacher_ref: Some(0), last_hip_position: Some((160.0, 120.0)), frames_since_face_seen: 0, lost: false };
            let t = associate_teacher(&prev, &people, &scores, &TrackConfig::default());
            // a single optional reference by construction; it must name a present person
            if let Some(r) = t.teacher_ref {
                prop_assert!(people.iter().filter(|p| p.person_ref == r).count() == 1);
            }
        }
    }
}
