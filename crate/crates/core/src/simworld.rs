//! Deterministic synthetic RGB-D scenes: a teacher holding an object, optional distractors,
//! analytic stick-figure keypoints and simulated face embeddings.
//!
//! Camera frame: x right, y down, z forward (meters). The person faces the camera, so the
//! person's own left side appears at larger image x.

use std::sync::OnceLock;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    box_from_pixel_set, BoundingBox, CameraIntrinsics, RgbdFrame, MAX_VALID_DEPTH, MIN_VALID_DEPTH,
};
use crate::perception::{Hand, Joint, Keypoint, KeypointSet, EYE_POINTS};

type V3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Big,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Big];

    /// Class implied by the largest physical dimension.
    pub fn from_extent(w: f64, h: f64) -> SizeClass {
        let m = w.max(h);
        if m < 0.10 {
            SizeClass::Small
        } else if m < 0.20 {
            SizeClass::Medium
        } else {
            SizeClass::Big
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Big => "big",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub label: String,
    pub size_class: SizeClass,
    pub color_signature: [u8; 3],
    /// (width, height) in meters.
    pub extent: (f64, f64),
    pub shape: Shape,
    /// Front-to-back depth spread from tilting the object top away from the camera.
    #[serde(default)]
    pub tilt_spread: f64,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.extent;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::InvalidScript(format!("object `{}` has non-positive extent", self.label)));
        }
        if SizeClass::from_extent(w, h) != self.size_class {
            return Err(Error::InvalidScript(format!(
                "object `{}` extent {:?} inconsistent with size class {:?}",
                self.label, self.extent, self.size_class
            )));
        }
        if !(0.0..h).contains(&self.tilt_spread) {
            return Err(Error::InvalidScript(format!("object `{}` tilt spread out of range", self.label)));
        }
        Ok(())
    }
}

fn spec(label: &str, w: f64, h: f64, shape: Shape, color: [u8; 3], tilt: f64) -> ObjectSpec {
    ObjectSpec {
        label: label.to_string(),
        size_class: SizeClass::from_extent(w, h),
        color_signature: color,
        extent: (w, h),
        shape,
        tilt_spread: tilt,
    }
}

/// The nine catalog objects, three per size class, in a fixed order.
pub fn catalog() -> Vec<ObjectSpec> {
    use Shape::*;
    vec![
        spec("025_mug", 0.09, 0.095, Rect, [200, 40, 40], 0.0),
        spec("011_banana", 0.095, 0.06, Ellipse, [232, 208, 40], 0.0),
        spec("010_potted_meat_can", 0.095, 0.085, Rect, [40, 70, 170], 0.0),
        spec("004_sugar_box", 0.09, 0.175, Rect, [240, 240, 250], 0.0),
        spec("006_mustard_bottle", 0.095, 0.19, Ellipse, [220, 160, 30], 0.0),
        spec("037_scissors", 0.07, 0.19, Rect, [30, 160, 60], 0.0),
        spec("003_cracker_box", 0.16, 0.24, Rect, [170, 30, 120], 0.20),
        spec("021_bleach_cleanser", 0.10, 0.26, Ellipse, [60, 200, 210], 0.22),
        spec("035_power_drill", 0.20, 0.21, Rect, [255, 110, 0], 0.18),
    ]
}

pub fn object_by_label(label: &str) -> Result<ObjectSpec> {
    catalog()
        .into_iter()
        .find(|o| o.label == label)
        .ok_or_else(|| Error::UnknownObject(label.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeTarget {
    AtRobot,
    AtLeftHand,
    AtRightHand,
    Away,
}

impl GazeTarget {
    pub fn at_hand(hand: Hand) -> GazeTarget {
        match hand {
            Hand::Left => GazeTarget::AtLeftHand,
            Hand::Right => GazeTarget::AtRightHand,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Constrained,
    FromAfar,
    WithDistractors,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] =
        [ScenarioKind::Constrained, ScenarioKind::FromAfar, ScenarioKind::WithDistractors];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Constrained => "constrained",
            ScenarioKind::FromAfar => "from-afar",
            ScenarioKind::WithDistractors => "with-distractors",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioKind> {
        Self::ALL.into_iter().find(|k| k.name() == s || format!("{k:?}").eq_ignore_ascii_case(s))
    }
}

/// Teacher pose keyframe. `hand` is the held wrist; the object hangs just in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub frame: u32,
    pub torso: [f64; 3],
    pub hand: [f64; 3],
    /// How far the held object is turned away from facing the camera, as a fraction in
    /// [0, 1] of the object's `tilt_spread`.
    #[serde(default = "full_tilt")]
    pub tilt: f64,
}

fn full_tilt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeEvent {
    pub frame: u32,
    pub target: GazeTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechEvent {
    pub frame: u32,
    pub utterance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherScript {
    #[serde(default)]
    pub identity: u64,
    pub trajectory: Vec<Waypoint>,
    /// Gaze target changes; each target holds until the next event.
    pub gaze_timeline: Vec<GazeEvent>,
    #[serde(default)]
    pub speech_events: Vec<SpeechEvent>,
    pub held_hand: Hand,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorsoWaypoint {
    pub frame: u32,
    pub torso: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonScript {
    pub identity: u64,
    pub trajectory: Vec<TorsoWaypoint>,
    /// Present in frames `enter_frame..exit_frame`.
    pub enter_frame: u32,
    pub exit_frame: u32,
    pub gaze: GazeTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticObject {
    pub center: [f64; 3],
    pub extent: (f64, f64),
    pub color: [u8; 3],
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distractor {
    Person(PersonScript),
    StaticObject(StaticObject),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub depth_sigma: f64,
    pub keypoint_jitter_sigma: f64,
    pub keypoint_dropout_prob: f64,
    pub invalid_depth_prob: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            depth_sigma: 0.01,
            keypoint_jitter_sigma: 0.5,
            keypoint_dropout_prob: 0.01,
            invalid_depth_prob: 0.02,
        }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self { depth_sigma: 0.0, keypoint_jitter_sigma: 0.0, keypoint_dropout_prob: 0.0, invalid_depth_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.keypoint_dropout_prob, self.invalid_depth_prob];
        let ok = [self.depth_sigma, self.keypoint_jitter_sigma].iter().all(|v| *v >= 0.0 && v.is_finite())
            && probs.iter().all(|p| (0.0..=1.0).contains(p));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScript(format!("invalid noise parameters {self:?}")))
        }
    }
}

fn default_fps() -> f64 {
    7.0
}
fn default_n_frames() -> u32 {
    300
}
fn default_width() -> u32 {
    320
}
fn default_height() -> u32 {
    240
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub kind: ScenarioKind,
    pub seed: u64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default = "default_n_frames")]
    pub n_frames: u32,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    pub object: ObjectSpec,
    pub teacher: TeacherScript,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default)]
    pub noise: NoiseParams,
}

/// Held object front-face center relative to the held wrist.
const OBJECT_OFFSET: [f64; 3] = [0.0, -0.02, -0.10];
/// Accepted teacher distance (held-hand z) for the far scenarios.
const FAR_RANGE: (f64, f64) = (1.5, 2.5);
const CONSTRAINED_RANGE: (f64, f64) = (0.5, 0.8);

fn v3(a: [f64; 3]) -> V3 {
    V3::new(a[0], a[1], a[2])
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

/// Piecewise-linear interpolation over frame-keyed samples, clamped at both ends.
fn interpolate<T: Copy>(keys: &[(u32, T)], frame: u32, mix: impl Fn(T, T, f64) -> T) -> T {
    let i = keys.partition_point(|(f, _)| *f <= frame);
    if i == 0 {
        return keys[0].1;
    }
    if i == keys.len() {
        return keys[keys.len() - 1].1;
    }
    let (f0, a) = keys[i - 1];
    let (f1, b) = keys[i];
    mix(a, b, (frame - f0) as f64 / (f1 - f0) as f64)
}

impl TeacherScript {
    pub fn pose_at(&self, frame: u32) -> (V3, V3) {
        let keys: Vec<(u32, ([f64; 3], [f64; 3]))> =
            self.trajectory.iter().map(|w| (w.frame, (w.torso, w.hand))).collect();
        let (t, h) = interpolate(&keys, frame, |a, b, s| (lerp3(a.0, b.0, s), lerp3(a.1, b.1, s)));
        (v3(t), v3(h))
    }

    pub fn tilt_at(&self, frame: u32) -> f64 {
        let keys: Vec<(u32, f64)> = self.trajectory.iter().map(|w| (w.frame, w.tilt)).collect();
        interpolate(&keys, frame, |a, b, s| a + (b - a) * s)
    }

    pub fn gaze_at(&self, frame: u32) -> GazeTarget {
        self.gaze_timeline
            .iter()
            .take_while(|g| g.frame <= frame)
            .last()
            .map(|g| g.target)
            .unwrap_or(GazeTarget::Away)
    }

    pub fn speech_at(&self, frame: u32) -> Vec<String> {
        self.speech_events.iter().filter(|s| s.frame == frame).map(|s| s.utterance.clone()).collect()
    }
}

impl PersonScript {
    pub fn present_at(&self, frame: u32) -> bool {
        (self.enter_frame..self.exit_frame).contains(&frame)
    }

    pub fn torso_at(&self, frame: u32) -> V3 {
        let keys: Vec<(u32, [f64; 3])> = self.trajectory.iter().map(|w| (w.frame, w.torso)).collect();
        v3(interpolate(&keys, frame, lerp3))
    }
}

fn strictly_increasing(frames: impl Iterator<Item = u32>) -> bool {
    let v: Vec<u32> = frames.collect();
    v.windows(2).all(|w| w[0] < w[1])
}

impl ScenarioScript {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::for_resolution(self.width, self.height)
    }

    /// Front-face center of the held object at `frame`.
    pub fn object_center_at(&self, frame: u32) -> V3 {
        self.teacher.pose_at(frame).1 + v3(OBJECT_OFFSET)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScript(m));
        self.object.validate()?;
        self.noise.validate()?;
        if self.n_frames == 0 || !(self.fps > 0.0) || self.width < 16 || self.height < 16 {
            return bad("n_frames, fps and resolution must be positive".into());
        }
        let t = &self.teacher;
        if t.trajectory.is_empty() || t.trajectory[0].frame != 0 {
            return bad("teacher trajectory must start at frame 0".into());
        }
        if t.trajectory.last().unwrap().frame < self.n_frames - 1 {
            return bad("teacher trajectory does not cover the session".into());
        }
        if t.trajectory.iter().any(|w| !(0.0..=1.0).contains(&w.tilt)) {
            return bad("waypoint tilt must lie in [0, 1]".into());
        }
        if !strictly_increasing(t.trajectory.iter().map(|w| w.frame))
            || !strictly_increasing(t.gaze_timeline.iter().map(|g| g.frame))
        {
            return bad("trajectory and gaze frames must strictly increase".into());
        }
        for d in &self.distractors {
            if let Distractor::Person(p) = d {
                if p.trajectory.is_empty() || !strictly_increasing(p.trajectory.iter().map(|w| w.frame)) {
                    return bad(format!("distractor {} has an invalid trajectory", p.identity));
                }
            }
        }
        // teacher distance is the held-hand depth, sampled over the frames it is in view
        let range = match self.kind {
            ScenarioKind::Constrained => CONSTRAINED_RANGE,
            _ => FAR_RANGE,
        };
        let cam = self.intrinsics();
        for f in 0..self.n_frames {
            let (_, hand) = t.pose_at(f);
            let in_view = cam.project([hand.x, hand.y, hand.z]).is_some_and(|(x, y)| cam.contains(x, y));
            if in_view && !(range.0..=range.1).contains(&hand.z) {
                return bad(format!("{:?} teacher distance {:.2} m at frame {f} out of range", self.kind, hand.z));
            }
        }
        match self.kind {
            ScenarioKind::Constrained | ScenarioKind::FromAfar if !self.distractors.is_empty() => {
                bad(format!("{:?} scenarios take no distractors", self.kind))
            }
            ScenarioKind::WithDistractors => {
                let closer = (0..self.n_frames).any(|f| {
                    let obj_z = self.object_center_at(f).z;
                    self.distractors.iter().any(|d| match d {
                        Distractor::Person(p) => p.present_at(f) && p.torso_at(f).z < obj_z,
                        Distractor::StaticObject(o) => o.center[2] < obj_z,
                    })
                });
                if closer {
                    Ok(())
                } else {
                    bad("no distractor ever lies between the camera and the object".into())
                }
            }
            _ => Ok(()),
        }
    }

    /// Seeded standard acquisition sequence for one object.
    pub fn generate(kind: ScenarioKind, object: ObjectSpec, seed: u64, n_frames: u32) -> ScenarioScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c1e_a7e5_0000_0001);
        let held_hand = if rng.random_bool(0.5) { Hand::Left } else { Hand::Right };
        let (base, amp) = match kind {
            ScenarioKind::Constrained => (
                [rng.random_range(-0.05..0.05), rng.random_range(0.08..0.12), rng.random_range(0.62..0.72)],
                [0.05, 0.03, 0.04],
            ),
            ScenarioKind::FromAfar => (
                [rng.random_range(-0.2..0.2), rng.random_range(0.05..0.15), rng.random_range(1.85..2.15)],
                [0.10, 0.04, 0.10],
            ),
            ScenarioKind::WithDistractors => (
                [rng.random_range(0.25..0.35), rng.random_range(0.05..0.15), rng.random_range(1.85..2.15)],
                [0.08, 0.04, 0.10],
            ),
        };
        let teacher = smooth_teacher(&mut rng, base, amp, held_hand, n_frames, GazeTarget::at_hand(held_hand), 0);
        let mut distractors = Vec::new();
        if kind == ScenarioKind::WithDistractors {
            let exit = ((0.8 * n_frames as f64).round() as u32).max(1);
            let z = rng.random_range(0.95..1.25);
            let identity = rng.random_range(1..=9u64);
            distractors.push(Distractor::Person(PersonScript {
                identity,
                trajectory: vec![
                    TorsoWaypoint { frame: 0, torso: [-0.65, 0.1, z] },
                    TorsoWaypoint { frame: exit.max(1), torso: [-0.35, 0.1, z] },
                ],
                enter_frame: 0,
                exit_frame: exit,
                gaze: if rng.random_bool(0.5) { GazeTarget::AtRobot } else { GazeTarget::Away },
            }));
            if rng.random_bool(0.5) {
                let other = 1 + (identity % 9);
                let x = rng.random_range(-0.9..-0.5);
                distractors.push(Distractor::Person(PersonScript {
                    identity: other,
                    trajectory: vec![TorsoWaypoint { frame: 0, torso: [x, 0.1, 3.2] }],
                    enter_frame: 0,
                    exit_frame: n_frames,
                    gaze: GazeTarget::Away,
                }));
            } else {
                distractors.push(Distractor::StaticObject(StaticObject {
                    center: [rng.random_range(-0.9..-0.4), rng.random_range(0.0..0.3), 2.8],
                    extent: (0.25, 0.3),
                    color: [90, 60, 30],
                    shape: Shape::Rect,
                }));
            }
        }
        ScenarioScript {
            kind,
            seed,
            fps: 7.0,
            n_frames,
            width: 320,
            height: 240,
            object,
            teacher,
            distractors,
            noise: NoiseParams::default(),
        }
    }

    /// Scripted teaching session: look away, sustained eye contact, spoken command,
    /// then gaze at the held object for `acquire_frames` frames plus a detection tail.
    pub fn session(object: ObjectSpec, seed: u64, acquire_frames: u32) -> ScenarioScript {
        let lead = 22u32;
        let n_frames = lead + acquire_frames + 23;
        let mut script = Self::generate(ScenarioKind::Constrained, object, seed, n_frames);
        let hand = script.teacher.held_hand;
        script.teacher.gaze_timeline = vec![
            GazeEvent { frame: 0, target: GazeTarget::Away },
            GazeEvent { frame: 5, target: GazeTarget::AtRobot },
            GazeEvent { frame: lead, target: GazeTarget::at_hand(hand) },
        ];
        script.teacher.speech_events =
            vec![SpeechEvent { frame: lead - 1, utterance: format!("learn {}", script.object.label) }];
        script
    }
}

/// Teacher trajectory with smooth sinusoidal hand motion around `base`.
fn smooth_teacher(
    rng: &mut ChaCha8Rng,
    base: [f64; 3],
    amp: [f64; 3],
    held_hand: Hand,
    n_frames: u32,
    gaze: GazeTarget,
    identity: u64,
) -> TeacherScript {
    let side = if held_hand == Hand::Left { 1.0 } else { -1.0 };
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let period: [f64; 3] = [rng.random_range(50.0..80.0), rng.random_range(40.0..70.0), rng.random_range(60.0..90.0)];
    // the object turns with its own rhythm; drawn from a fork so the main stream is unchanged
    let mut turn = ChaCha8Rng::seed_from_u64(rng.clone().random::<u64>() ^ 0x7117_0000);
    let (turn_phase, turn_period) = (turn.random_range(0.0..std::f64::consts::TAU), turn.random_range(45.0..75.0));
    let step = 5u32;
    let mut trajectory = Vec::new();
    let mut f = 0u32;
    loop {
        let hand: [f64; 3] = std::array::from_fn(|k| {
            base[k] + amp[k] * (std::f64::consts::TAU * f as f64 / period[k] + phase[k]).sin()
        });
        let torso = [hand[0] - side * 0.15, hand[1], hand[2] + 0.35];
        let tilt = 0.5 + 0.5 * (std::f64::consts::TAU * f as f64 / turn_period + turn_phase).sin();
        trajectory.push(Waypoint { frame: f, torso, hand, tilt });
        if f >= n_frames.saturating_sub(1) {
            break;
        }
        f = (f + step).min(n_frames - 1);
    }
    TeacherScript {
        identity,
        trajectory,
        gaze_timeline: vec![GazeEvent { frame: 0, target: gaze }],
        speech_events: Vec::new(),
        held_hand,
    }
}

// ---------------------------------------------------------------------------
// Faces

/// Per-identity facial geometry in meters, relative to the head center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceTemplate {
    pub iod: f64,
    pub eye_y: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub ear_x: f64,
    pub ear_y: f64,
    pub nose_y: f64,
}

impl FaceTemplate {
    pub fn for_identity(identity: u64) -> FaceTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(identity.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xface);
        FaceTemplate {
            iod: rng.random_range(0.056..0.070),
            eye_y: rng.random_range(-0.017..-0.013),
            eye_rx: rng.random_range(0.011..0.015),
            eye_ry: rng.random_range(0.005..0.007),
            ear_x: rng.random_range(0.070..0.080),
            ear_y: rng.random_range(-0.005..0.008),
            nose_y: rng.random_range(0.020..0.032),
        }
    }

    /// Lateral/vertical eye shift for a gaze target (20% of the inter-ocular distance).
    pub fn gaze_offset(&self, target: GazeTarget) -> (f64, f64) {
        let s = 0.2 * self.iod;
        match target {
            GazeTarget::AtRobot => (0.0, 0.0),
            GazeTarget::AtLeftHand => (s, 0.0),
            GazeTarget::AtRightHand => (-s, 0.0),
            GazeTarget::Away => (0.0, -s),
        }
    }
}

pub const EMBEDDING_DIM: usize = 128;
pub const DEFAULT_EMBEDDING_SIGMA: f64 = 0.02;
/// Identities `NEGATIVE_IDENTITY_START..` form the unlabeled negatives pool.
pub const NEGATIVE_IDENTITY_START: u64 = 10;
pub const NEGATIVE_IDENTITIES: u64 = 1000;
pub const NEGATIVES_PER_IDENTITY: usize = 6;
const REGISTRY_SEED: u64 = 0x00fa_ce5e_ed00_0128;

/// Fixed per-identity base embeddings with pairwise cosine below 0.3.
#[derive(Debug, Clone)]
pub struct FaceRegistry {
    bases: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl FaceRegistry {
    /// Rejection-samples `n` unit vectors so that every pair has cosine < 0.3.
    pub fn new(n: usize, seed: u64) -> FaceRegistry {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bases: Vec<Vec<f64>> = Vec::with_capacity(n);
        while bases.len() < n {
            let mut v: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.sample(StandardNormal)).collect();
            normalize(&mut v);
            if bases.iter().all(|b| cosine(b, &v) < 0.3) {
                bases.push(v);
            }
        }
        FaceRegistry { bases }
    }

    /// Registry shared by the simulator: teacher, distractors and the negatives pool.
    pub fn global() -> &'static FaceRegistry {
        static REG: OnceLock<FaceRegistry> = OnceLock::new();
        REG.get_or_init(|| {
            FaceRegistry::new((NEGATIVE_IDENTITY_START + NEGATIVE_IDENTITIES) as usize, REGISTRY_SEED)
        })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn base(&self, identity: u64) -> Result<&[f64]> {
        self.bases.get(identity as usize).map(|v| v.as_slice()).ok_or(Error::UnknownIdentity(identity))
    }

    /// Base vector plus per-dimension Gaussian noise of `sigma`, renormalized.
    pub fn embedding(&self, identity: u64, noise_seed: u64, sigma: f64) -> Result<Vec<f64>> {
        let mut v = self.base(identity)?.to_vec();
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
            v.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            normalize(&mut v);
        }
        Ok(v)
    }

    /// Deterministic pool of unlabeled non-teacher embeddings.
    pub fn negatives_pool(&self, sigma: f64) -> Vec<Vec<f64>> {
        let end = (NEGATIVE_IDENTITY_START + NEGATIVE_IDENTITIES).min(self.len() as u64);
        (NEGATIVE_IDENTITY_START..end)
            .flat_map(|id| (0..NEGATIVES_PER_IDENTITY).map(move |k| (id, k)))
            .map(|(id, k)| self.embedding(id, REGISTRY_SEED ^ (id << 8) ^ k as u64, sigma).unwrap())
            .collect()
    }
}

/// Embedding from the global registry.
pub fn simulated_face_embedding(identity: u64, noise_seed: u64, sigma: f64) -> Result<Vec<f64>> {
    FaceRegistry::global().embedding(identity, noise_seed, sigma)
}

// ---------------------------------------------------------------------------
// Stick-figure body model

const SKIN: [u8; 3] = [224, 172, 140];
const PANTS: [u8; 3] = [40, 40, 50];
const TEACHER_SHIRT: [u8; 3] = [60, 60, 70];
const DISTRACTOR_SHIRTS: [[u8; 3]; 2] = [[150, 90, 200], [100, 140, 100]];
pub const WALL_Z: f64 = 4.0;

/// 3D skeleton of one person.
#[derive(Debug, Clone, Copy)]
pub struct Body {
    pub torso: V3,
    pub head: V3,
    pub left_wrist: V3,
    pub right_wrist: V3,
    pub left_elbow: V3,
    pub right_elbow: V3,
    pub left_shoulder: V3,
    pub right_shoulder: V3,
    pub left_hip: V3,
    pub right_hip: V3,
}

impl Body {
    /// Both arms hanging at the sides.
    pub fn standing(torso: V3) -> Body {
        let side = |s: f64| {
            let shoulder = torso + V3::new(s * 0.21, -0.24, 0.0);
            let elbow = torso + V3::new(s * 0.24, 0.0, 0.0);
            let wrist = torso + V3::new(s * 0.25, 0.22, 0.0);
            (shoulder, elbow, wrist)
        };
        let (ls, le, lw) = side(1.0);
        let (rs, re, rw) = side(-1.0);
        Body {
            torso,
            head: torso + V3::new(0.0, -0.40, -0.02),
            left_wrist: lw,
            right_wrist: rw,
            left_elbow: le,
            right_elbow: re,
            left_shoulder: ls,
            right_shoulder: rs,
            left_hip: torso + V3::new(0.1, 0.275, 0.0),
            right_hip: torso + V3::new(-0.1, 0.275, 0.0),
        }
    }

    /// `hand` holds something forward at `wrist`.
    pub fn holding(torso: V3, hand: Hand, wrist: V3) -> Body {
        let mut b = Body::standing(torso);
        let elbow = wrist + V3::new(0.0, 0.06, 0.24);
        match hand {
            Hand::Left => {
                b.left_wrist = wrist;
                b.left_elbow = elbow;
            }
            Hand::Right => {
                b.right_wrist = wrist;
                b.right_elbow = elbow;
            }
        }
        b
    }

    pub fn wrist(&self, hand: Hand) -> V3 {
        match hand {
            Hand::Left => self.left_wrist,
            Hand::Right => self.right_wrist,
        }
    }

    pub fn elbow(&self, hand: Hand) -> V3 {
        match hand {
            Hand::Left => self.left_elbow,
            Hand::Right => self.right_elbow,
        }
    }

    /// Noise-free 3D keypoint positions.
    pub fn keypoints_3d(&self, face: &FaceTemplate, gaze: GazeTarget) -> Vec<(Joint, V3)> {
        let (gx, gy) = face.gaze_offset(gaze);
        let mut out = Vec::with_capacity(27);
        for (right, sx) in [(true, -1.0), (false, 1.0)] {
            let ex = sx * face.iod / 2.0 + gx;
            let ey = face.eye_y + gy;
            for i in 0..EYE_POINTS {
                let a = std::f64::consts::TAU * i as f64 / EYE_POINTS as f64;
                let p = self.head + V3::new(ex + face.eye_rx * a.cos(), ey + face.eye_ry * a.sin(), 0.0);
                out.push((if right { Joint::RightEye(i) } else { Joint::LeftEye(i) }, p));
            }
        }
        out.push((Joint::RightEar, self.head + V3::new(-face.ear_x, face.ear_y, 0.0)));
        out.push((Joint::LeftEar, self.head + V3::new(face.ear_x, face.ear_y, 0.0)));
        out.push((Joint::Nose, self.head + V3::new(0.0, face.nose_y, 0.0)));
        out.push((Joint::HeadCentroid, self.head));
        out.push((Joint::LeftWrist, self.left_wrist));
        out.push((Joint::RightWrist, self.right_wrist));
        out.push((Joint::LeftElbow, self.left_elbow));
        out.push((Joint::RightElbow, self.right_elbow));
        out.push((Joint::LeftHip, self.left_hip));
        out.push((Joint::RightHip, self.right_hip));
        out
    }
}

/// Projects, jitters and drops keypoints; points outside the image are absent.
pub fn observe_keypoints<R: Rng>(
    person_ref: u32,
    points: &[(Joint, V3)],
    cam: &CameraIntrinsics,
    noise: &NoiseParams,
    rng: &mut R,
) -> KeypointSet {
    let mut kp = KeypointSet::new(person_ref);
    for (joint, p) in points {
        // draws are made unconditionally so the stream does not depend on visibility
        let jx: f64 = rng.sample::<f64, _>(StandardNormal) * noise.keypoint_jitter_sigma;
        let jy: f64 = rng.sample::<f64, _>(StandardNormal) * noise.keypoint_jitter_sigma;
        let k: f64 = rng.random_range(0.85..1.0);
        // a noise-free detector is fully confident
        let k = if noise.keypoint_jitter_sigma > 0.0 { k } else { 1.0 };
        let drop = rng.random::<f64>() < noise.keypoint_dropout_prob;
        let Some((x, y)) = cam.project([p.x, p.y, p.z]) else { continue };
        let (x, y) = (x + jx, y + jy);
        if drop || !cam.contains(x, y) {
            continue;
        }
        kp.insert(*joint, Keypoint { x, y, k });
    }
    // the detector reports the head centroid as the mean of the face points it found
    if kp.points.remove(&Joint::HeadCentroid).is_some() || points.iter().any(|(j, _)| *j == Joint::HeadCentroid) {
        let face: Vec<(f64, f64, f64)> = kp.face_points().map(|(_, p)| (p.x, p.y, p.k)).collect();
        if !face.is_empty() {
            let n = face.len() as f64;
            let c = Keypoint {
                x: face.iter().map(|p| p.0).sum::<f64>() / n,
                y: face.iter().map(|p| p.1).sum::<f64>() / n,
                k: face.iter().map(|p| p.2).sum::<f64>() / n,
            };
            kp.insert(Joint::HeadCentroid, c);
        }
    }
    kp
}

// ---------------------------------------------------------------------------
// Renderer

/// Planar patch `center + a*u + b*v` with `u` orthogonal to `v`.
#[derive(Debug, Clone, Copy)]
struct Surface {
    center: V3,
    u: V3,
    v: V3,
    shape: Shape,
    color: [u8; 3],
    id: u8,
}

const ID_NONE: u8 = 0;
const ID_OBJECT: u8 = 1;
const ID_OTHER: u8 = 2;

impl Surface {
    fn facing(center: V3, half_w: f64, half_h: f64, shape: Shape, color: [u8; 3], id: u8) -> Surface {
        Surface { center, u: V3::new(half_w, 0.0, 0.0), v: V3::new(0.0, half_h, 0.0), shape, color, id }
    }

    /// Thick segment between `a` and `b`, facing the camera as far as possible.
    fn limb(a: V3, b: V3, half_thickness: f64, color: [u8; 3]) -> Surface {
        let v = (b - a) / 2.0;
        let perp = V3::new(v.y, -v.x, 0.0);
        let u = if perp.norm() > 1e-9 { perp.normalize() * half_thickness } else { V3::new(half_thickness, 0.0, 0.0) };
        Surface { center: (a + b) / 2.0, u, v, shape: Shape::Rect, color, id: ID_OTHER }
    }

    fn corners(&self) -> [V3; 4] {
        [
            self.center + self.u + self.v,
            self.center + self.u - self.v,
            self.center - self.u + self.v,
            self.center - self.u - self.v,
        ]
    }
}

fn person_surfaces(body: &Body, shirt: [u8; 3], out: &mut Vec<Surface>) {
    let t = body.torso;
    out.push(Surface::facing(t, 0.19, 0.275, Shape::Rect, shirt, ID_OTHER));
    out.push(Surface::facing(body.head, 0.085, 0.11, Shape::Ellipse, SKIN, ID_OTHER));
    for s in [-1.0, 1.0] {
        out.push(Surface::facing(t + V3::new(s * 0.1, 0.675, 0.0), 0.07, 0.4, Shape::Rect, PANTS, ID_OTHER));
    }
    for (shoulder, elbow, wrist) in [
        (body.left_shoulder, body.left_elbow, body.left_wrist),
        (body.right_shoulder, body.right_elbow, body.right_wrist),
    ] {
        out.push(Surface::limb(shoulder, elbow, 0.04, shirt));
        out.push(Surface::limb(elbow, wrist, 0.035, SKIN));
        out.push(Surface::facing(wrist, 0.04, 0.05, Shape::Rect, SKIN, ID_OTHER));
    }
}

fn object_surface(obj: &ObjectSpec, center: V3, tilt: f64) -> Surface {
    let (w, h) = obj.extent;
    let sin_t = (tilt * obj.tilt_spread / h).clamp(0.0, 0.99);
    let cos_t = (1.0 - sin_t * sin_t).sqrt();
    // top edge (-y) recedes from the camera
    let v = V3::new(0.0, h / 2.0 * cos_t, -h / 2.0 * sin_t);
    // keep the nearest point at the scripted front-face depth
    let c = center + V3::new(0.0, 0.0, h / 2.0 * sin_t);
    Surface { center: c, u: V3::new(w / 2.0, 0.0, 0.0), v, shape: obj.shape, color: obj.color_signature, id: ID_OBJECT }
}

/// Noise-free render buffers.
pub struct RenderBuffers {
    pub rgb: Vec<u8>,
    pub depth: Vec<f32>,
    pub ids: Vec<u8>,
}

fn render_surfaces(cam: &CameraIntrinsics, surfaces: &[Surface]) -> RenderBuffers {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut rgb = vec![0u8; 3 * w * h];
    let mut depth = vec![WALL_Z as f32; w * h];
    let mut ids = vec![ID_NONE; w * h];
    for y in 0..h {
        let g = (110.0 + 40.0 * y as f64 / h as f64).round() as u8;
        for x in 0..w {
            let i = 3 * (y * w + x);
            rgb[i..i + 3].copy_from_slice(&[g, g, g.saturating_add(8)]);
        }
    }
    for s in surfaces {
        let corners = s.corners();
        if corners.iter().any(|c| c.z <= 0.05) {
            continue;
        }
        let proj: Vec<(f64, f64)> = corners.iter().filter_map(|c| cam.project([c.x, c.y, c.z])).collect();
        let x0 = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64) as usize;
        let y0 = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64) as usize;
        let n = s.u.cross(&s.v);
        let n = n / n.norm();
        let nc = n.dot(&s.center);
        let (uu, vv) = (s.u.norm_squared(), s.v.norm_squared());
        let shade = 0.6 + 0.4 * n.z.abs();
        let color = s.color.map(|c| (c as f64 * shade).round().min(255.0) as u8);
        for py in y0..y1 {
            for px in x0..x1 {
                let d = cam.ray(px as u32, py as u32);
                let d = V3::new(d[0], d[1], d[2]);
                let nd = n.dot(&d);
                if nd.abs() < 1e-12 {
                    continue;
                }
                let t = nc / nd;
                if t <= 0.0 {
                    continue;
                }
                let r = d * t - s.center;
                let a = r.dot(&s.u) / uu;
                let b = r.dot(&s.v) / vv;
                let inside = match s.shape {
                    Shape::Rect => a.abs() <= 1.0 && b.abs() <= 1.0,
                    Shape::Ellipse => a * a + b * b <= 1.0,
                };
                let idx = py * w + px;
                if inside && (t as f32) < depth[idx] {
                    depth[idx] = t as f32;
                    ids[idx] = s.id;
                    rgb[3 * idx..3 * idx + 3].copy_from_slice(&color);
                }
            }
        }
    }
    RenderBuffers { rgb, depth, ids }
}

/// One person as seen in a frame. `identity` is simulator truth, not a percept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonObservation {
    pub person_ref: u32,
    pub identity: u64,
    pub keypoints: KeypointSet,
    pub face_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub frame_index: u32,
    pub object_label: String,
    pub true_object_box: Option<BoundingBox>,
    pub people: Vec<PersonObservation>,
    pub teacher_ref: Option<u32>,
    pub teacher_gaze: GazeTarget,
    pub held_hand: Hand,
    pub object_visible: bool,
    pub speech: Vec<String>,
    /// Front-face center of the held object (camera frame, meters).
    pub object_center: [f64; 3],
}

impl GroundTruthRecord {
    pub fn teacher(&self) -> Option<&PersonObservation> {
        self.teacher_ref.and_then(|r| self.people.iter().find(|p| p.person_ref == r))
    }
}

/// Face crops need at least three face points; the embedding is only available then.
const MIN_FACE_POINTS_FOR_EMBEDDING: usize = 3;

/// Streaming renderer over a validated script.
pub struct SequenceRenderer<'a> {
    script: &'a ScenarioScript,
    cam: CameraIntrinsics,
    next: u32,
}

pub fn render_sequence(script: &ScenarioScript) -> Result<SequenceRenderer<'_>> {
    script.validate()?;
    Ok(SequenceRenderer { script, cam: script.intrinsics(), next: 0 })
}

impl Iterator for SequenceRenderer<'_> {
    type Item = (RgbdFrame, GroundTruthRecord);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.script.n_frames {
            return None;
        }
        let f = self.next;
        self.next += 1;
        Some(render_frame(self.script, &self.cam, f))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.script.n_frames - self.next) as usize;
        (n, Some(n))
    }
}

impl ExactSizeIterator for SequenceRenderer<'_> {}

/// Scene layout at one frame: bodies (teacher first) and static surfaces.
struct Scene {
    bodies: Vec<(u64, Body, GazeTarget, [u8; 3])>,
    object_center: V3,
    object_tilt: f64,
}

fn scene_at(script: &ScenarioScript, f: u32) -> Scene {
    let t = &script.teacher;
    let (torso, hand) = t.pose_at(f);
    let mut bodies = vec![(t.identity, Body::holding(torso, t.held_hand, hand), t.gaze_at(f), TEACHER_SHIRT)];
    let mut k = 0;
    for d in &script.distractors {
        if let Distractor::Person(p) = d {
            if p.present_at(f) {
                bodies.push((p.identity, Body::standing(p.torso_at(f)), p.gaze, DISTRACTOR_SHIRTS[k % 2]));
            }
            k += 1;
        }
    }
    Scene { bodies, object_center: hand + v3(OBJECT_OFFSET), object_tilt: t.tilt_at(f) }
}

/// Renders frame `f` of `script` (the script must already be validated).
pub fn render_frame(script: &ScenarioScript, cam: &CameraIntrinsics, f: u32) -> (RgbdFrame, GroundTruthRecord) {
    let scene = scene_at(script, f);
    let mut surfaces = Vec::new();
    for (_, body, _, shirt) in &scene.bodies {
        person_surfaces(body, *shirt, &mut surfaces);
    }
    for d in &script.distractors {
        if let Distractor::StaticObject(o) = d {
            surfaces.push(Surface::facing(v3(o.center), o.extent.0 / 2.0, o.extent.1 / 2.0, o.shape, o.color, ID_OTHER));
        }
    }
    surfaces.push(object_surface(&script.object, scene.object_center, scene.object_tilt));
    let RenderBuffers { rgb, mut depth, ids } = render_surfaces(cam, &surfaces);

    let w = cam.width;
    let object_pixels = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| **id == ID_OBJECT)
        .map(|(i, _)| (i as u32 % w, i as u32 / w));
    let true_object_box = box_from_pixel_set(object_pixels).ok();

    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    rng.set_stream(f as u64);
    let noise = &script.noise;
    if noise.depth_sigma > 0.0 || noise.invalid_depth_prob > 0.0 {
        for d in depth.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            let invalid = rng.random::<f64>() < noise.invalid_depth_prob;
            let z = *d as f64 + n * noise.depth_sigma;
            *d = if invalid { 0.0 } else { z as f32 };
        }
    }
    for d in depth.iter_mut() {
        if !(*d > MIN_VALID_DEPTH && *d <= MAX_VALID_DEPTH) {
            *d = 0.0;
        }
    }

    let registry = FaceRegistry::global();
    let people: Vec<PersonObservation> = scene
        .bodies
        .iter()
        .enumerate()
        .map(|(i, (identity, body, gaze, _))| {
            let face = FaceTemplate::for_identity(*identity);
            let kp = observe_keypoints(i as u32, &body.keypoints_3d(&face, *gaze), cam, noise, &mut rng);
            let noise_seed: u64 = rng.random();
            let face_embedding = (kp.face_count() >= MIN_FACE_POINTS_FOR_EMBEDDING)
                .then(|| registry.embedding(*identity, noise_seed, DEFAULT_EMBEDDING_SIGMA).ok())
                .flatten();
            PersonObservation { person_ref: i as u32, identity: *identity, keypoints: kp, face_embedding }
        })
        .collect();

    let frame = RgbdFrame {
        width: cam.width,
        height: cam.height,
        rgb,
        depth,
        timestamp: f as f64 / script.fps,
        index: f,
    };
    let c = scene.object_center;
    let gt = GroundTruthRecord {
        frame_index: f,
        object_label: script.object.label.clone(),
        true_object_box,
        people,
        teacher_ref: Some(0),
        teacher_gaze: script.teacher.gaze_at(f),
        held_hand: script.teacher.held_hand,
        object_visible: true_object_box.is_some(),
        speech: script.teacher.speech_at(f),
        object_center: [c.x, c.y, c.z],
    };
    (frame, gt)
}

/// Noise-free id buffer for frame `f`: 1 = held object, 2 = other surface, 0 = wall.
pub fn render_ids(script: &ScenarioScript, f: u32) -> Vec<u8> {
    let cam = script.intrinsics();
    let scene = scene_at(script, f);
    let mut surfaces = Vec::new();
    for (_, body, _, shirt) in &scene.bodies {
        person_surfaces(body, *shirt, &mut surfaces);
    }
    for d in &script.distractors {
        if let Distractor::StaticObject(o) = d {
            surfaces.push(Surface::facing(v3(o.center), o.extent.0 / 2.0, o.extent.1 / 2.0, o.shape, o.color, ID_OTHER));
        }
    }
    surfaces.push(object_surface(&script.object, scene.object_center, scene.object_tilt));
    render_surfaces(&cam, &surfaces).ids
}

pub const PIXEL_ID_OBJECT: u8 = ID_OBJECT;

// ---------------------------------------------------------------------------
// Keypoint-only datasets for the social classifiers

/// One labeled face observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub person: u64,
    pub target: GazeTarget,
    pub keypoints: KeypointSet,
}

/// Faces of `n_persons` identities at desk distance, `per_target` samples for every gaze target.
pub fn gaze_dataset(n_persons: u64, per_target: usize, noise: &NoiseParams, seed: u64) -> Vec<GazeSample> {
    let cam = CameraIntrinsics::default();
    let targets = [GazeTarget::AtRobot, GazeTarget::AtLeftHand, GazeTarget::AtRightHand, GazeTarget::Away];
    let mut out = Vec::new();
    for person in 0..n_persons {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(person);
        let face = FaceTemplate::for_identity(person);
        for target in targets {
            for _ in 0..per_target {
                let torso = V3::new(rng.random_range(-0.3..0.3), rng.random_range(0.0..0.2), rng.random_range(0.9..1.2));
                let body = Body::standing(torso);
                let kp = observe_keypoints(0, &body.keypoints_3d(&face, target), &cam, noise, &mut rng);
                out.push(GazeSample { person, target, keypoints: kp });
            }
        }
    }
    out
}
