//! Interaction state machine: eye-contact engagement, spoken command, hand selection,
//! acquisition, training and detection, with teacher-loss handling.
//!
//! [`machine_step`] is a pure transition function over abstract percepts so it can be model
//! checked; [`Pipeline`] feeds it from keypoints, face embeddings and depth frames.

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatorConfig, AnnotatorInput, AnnotatorStep, SequenceAnnotator, Strategy};
use crate::classifiers::{
    hand_label, hand_selection, model_select, mutual_gaze, online_teacher_update, svm_train,
    CalibratedSvm, HandSelection, OnlineTrainerState, SearchScheme, SvmModel, SvmParams,
};
use crate::detection::{detect, frame_samples, train_detector, DetectionModel, FrameSamples, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{Annotation, Detection, RgbdFrame};
use crate::perception::{associate_teacher, gaze_feature, Hand, KeypointSet, TeacherTrack, TrackConfig};
use crate::simworld::{
    gaze_dataset, render_sequence, FaceRegistry, GazeSample, GazeTarget, NoiseParams, ScenarioScript,
    DEFAULT_EMBEDDING_SIGMA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Idle,
    Engaging,
    AwaitCommand,
    LocateHand,
    Acquire,
    Train,
    Ready,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MachineConfig {
    pub fps: f64,
    /// Sustained eye contact needed to engage (seconds).
    pub engage_seconds: f64,
    pub command_timeout_s: f64,
    pub locate_timeout_s: f64,
    pub hand_confidence: f64,
    pub hand_confirm_frames: u32,
    pub acquire_frames: usize,
    /// Frames without the teacher tolerated during acquisition.
    pub teacher_loss_frames: u32,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            fps: 7.0,
            engage_seconds: 1.5,
            command_timeout_s: 10.0,
            locate_timeout_s: 5.0,
            hand_confidence: 0.6,
            hand_confirm_frames: 3,
            acquire_frames: 300,
            teacher_loss_frames: 7,
        }
    }
}

impl MachineConfig {
    /// Consecutive mutual-gaze frames needed to engage: 11 at the defaults.
    pub fn engage_frames(&self) -> u32 {
        ((self.engage_seconds * self.fps).ceil() as u32).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.fps, self.engage_seconds, self.command_timeout_s, self.locate_timeout_s];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("fps, engagement time and timeouts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hand_confidence) || self.hand_confirm_frames == 0 || self.acquire_frames == 0 {
            return Err(Error::InvalidInput("invalid hand-selection or acquisition settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub state: StateKind,
    pub gaze_streak: u32,
    pub pending_label: Option<String>,
    pub selected_hand: Option<Hand>,
    pub acquired: usize,
    /// Consecutive confident frames agreeing on `hand_candidate`.
    pub hand_streak: u32,
    pub hand_candidate: Option<Hand>,
    /// Time the current state was entered (seconds).
    pub state_since: f64,
    pub teacher_lost_frames: u32,
}

impl Default for PipelineState {
    fn default() -> Self {
        Self {
            state: StateKind::Idle,
            gaze_streak: 0,
            pending_label: None,
            selected_hand: None,
            acquired: 0,
            hand_streak: 0,
            hand_candidate: None,
            state_since: 0.0,
            teacher_lost_frames: 0,
        }
    }
}

impl PipelineState {
    /// Structural invariants that hold in every reachable state.
    pub fn check_invariants(&self, cfg: &MachineConfig) -> std::result::Result<(), String> {
        use StateKind::*;
        if self.gaze_streak > 0 && !matches!(self.state, Idle | Engaging) {
            return Err(format!("gaze streak {} in {:?}", self.gaze_streak, self.state));
        }
        let needs_label = matches!(self.state, LocateHand | Acquire | Train);
        let no_label = matches!(self.state, Idle | Engaging | AwaitCommand);
        if (needs_label && self.pending_label.is_none()) || (no_label && self.pending_label.is_some()) {
            return Err(format!("pending label {:?} in {:?}", self.pending_label, self.state));
        }
        if matches!(self.state, Acquire | Train) && self.selected_hand.is_none() {
            return Err(format!("no selected hand in {:?}", self.state));
        }
        if self.acquired > cfg.acquire_frames {
            return Err(format!("acquired {} beyond target", self.acquired));
        }
        Ok(())
    }

    fn enter(&mut self, state: StateKind, time: f64) {
        self.state = state;
        self.state_since = time;
    }
}

/// Per-frame annotation result fed to the machine during acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnnotationOutcome {
    Annotated { annotation: Annotation },
    Lost,
    Aborted { reason: String },
}

/// Abstract machine input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Percept {
    Frame {
        time: f64,
        teacher_visible: bool,
        mutual_gaze: bool,
        hand: Option<HandSelection>,
        annotation: Option<AnnotationOutcome>,
    },
    Speech {
        time: f64,
        utterance: String,
    },
    Tick {
        time: f64,
    },
    TrainingFinished {
        ok: bool,
    },
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Engage,
    AskRepeat { utterance: String },
    AcceptCommand { label: String },
    SelectHand { hand: Hand, confidence: f64 },
    RecordAnnotation { annotation: Annotation },
    StartTraining { label: String, annotations: usize },
    ModelReady,
    Detect,
    Detections { frame_index: u32, detections: Vec<Detection> },
    Timeout { from: StateKind },
    Abort { reason: String },
    Reset,
}

/// Result of reading an utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Learn(String),
    /// "learn" followed by a label outside `[a-z0-9_]+`.
    BadLabel,
    Unrelated,
}

pub fn classify_utterance(utterance: &str) -> Command {
    let mut words = utterance.split_whitespace();
    let (Some(verb), Some(label), None) = (words.next(), words.next(), words.next()) else {
        return Command::Unrelated;
    };
    if !verb.eq_ignore_ascii_case("learn") {
        return Command::Unrelated;
    }
    let label = label.to_lowercase();
    if !label.is_empty() && label.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
        Command::Learn(label)
    } else {
        Command::BadLabel
    }
}

/// `learn <label>`, case-insensitive, label `[a-z0-9_]+` after lowercasing.
pub fn parse_command(utterance: &str) -> Option<String> {
    match classify_utterance(utterance) {
        Command::Learn(l) => Some(l),
        _ => None,
    }
}

fn percept_time(p: &Percept) -> Option<f64> {
    match p {
        Percept::Frame { time, .. } | Percept::Speech { time, .. } | Percept::Tick { time } => Some(*time),
        _ => None,
    }
}

/// Pure transition function.
pub fn machine_step(s: &PipelineState, p: &Percept, cfg: &MachineConfig) -> (PipelineState, Vec<Action>) {
    use StateKind::*;
    let mut n = s.clone();
    let mut actions = Vec::new();
    if let Percept::Reset = p {
        let since = s.state_since;
        n = PipelineState { state_since: since, ..PipelineState::default() };
        actions.push(Action::Reset);
        return (n, actions);
    }
    if s.state == Aborted {
        return (n, actions);
    }
    // timeouts first, on any timed percept
    if let Some(t) = percept_time(p) {
        let limit = match s.state {
            AwaitCommand => Some((cfg.command_timeout_s, Idle)),
            LocateHand => Some((cfg.locate_timeout_s, AwaitCommand)),
            _ => None,
        };
        if let Some((limit, to)) = limit {
            if t - s.state_since >= limit {
                n.pending_label = None;
                n.hand_streak = 0;
                n.hand_candidate = None;
                n.enter(to, t);
                actions.push(Action::Timeout { from: s.state });
                return (n, actions);
            }
        }
    }
    match (s.state, p) {
        (Idle | Engaging, Percept::Frame { time, teacher_visible, mutual_gaze, .. }) => {
            if *teacher_visible && *mutual_gaze {
                n.gaze_streak += 1;
                if n.gaze_streak >= cfg.engage_frames() {
                    n.gaze_streak = 0;
                    n.enter(AwaitCommand, *time);
                    actions.push(Action::Engage);
                } else {
                    n.state = Engaging;
                }
            } else {
                n.gaze_streak = 0;
                n.state = Idle;
            }
        }
        (AwaitCommand, Percept::Speech { time, utterance }) => match classify_utterance(utterance) {
            Command::Learn(label) => {
                n.pending_label = Some(label.clone());
                n.hand_streak = 0;
                n.hand_candidate = None;
                n.enter(LocateHand, *time);
                actions.push(Action::AcceptCommand { label });
            }
            Command::BadLabel => actions.push(Action::AskRepeat { utterance: utterance.clone() }),
            Command::Unrelated => {}
        },
        (LocateHand, Percept::Frame { time, hand, .. }) => match hand {
            Some(h) if h.c >= cfg.hand_confidence => {
                if n.hand_candidate == Some(h.p) {
                    n.hand_streak += 1;
                } else {
                    n.hand_candidate = Some(h.p);
                    n.hand_streak = 1;
                }
                if n.hand_streak >= cfg.hand_confirm_frames {
                    n.selected_hand = Some(h.p);
                    n.acquired = 0;
                    n.teacher_lost_frames = 0;
                    n.hand_streak = 0;
                    n.hand_candidate = None;
                    n.enter(Acquire, *time);
                    actions.push(Action::SelectHand { hand: h.p, confidence: h.c });
                }
            }
            _ => {
                n.hand_streak = 0;
                n.hand_candidate = None;
            }
        },
        (Acquire, Percept::Frame { time, teacher_visible, annotation, .. }) => {
            if *teacher_visible {
                n.teacher_lost_frames = 0;
            } else {
                n.teacher_lost_frames += 1;
            }
            match annotation {
                Some(AnnotationOutcome::Aborted { reason }) => {
                    n.enter(Aborted, *time);
                    actions.push(Action::Abort { reason: reason.clone() });
                    return (n, actions);
                }
                Some(AnnotationOutcome::Annotated { annotation }) if *teacher_visible => {
                    n.acquired += 1;
                    actions.push(Action::RecordAnnotation { annotation: annotation.clone() });
                }
                _ => {}
            }
            if n.teacher_lost_frames > cfg.teacher_loss_frames {
                n.enter(Aborted, *time);
                actions.push(Action::Abort { reason: format!("teacher lost for {} frames", n.teacher_lost_frames) });
            } else if n.acquired >= cfg.acquire_frames {
                n.enter(Train, *time);
                let label = n.pending_label.clone().unwrap_or_default();
                actions.push(Action::StartTraining { label, annotations: n.acquired });
            }
        }
        (Train, Percept::TrainingFinished { ok }) => {
            if *ok {
                n.state = Ready;
                n.pending_label = None;
                actions.push(Action::ModelReady);
            } else {
                n.state = Aborted;
                actions.push(Action::Abort { reason: "training failed".into() });
            }
        }
        (Ready, Percept::Frame { .. }) => actions.push(Action::Detect),
        _ => {}
    }
    (n, actions)
}

// ---------------------------------------------------------------------------
// Perception-driven pipeline

/// Social classifiers used by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialModels {
    /// Face-embedding classifier for the teacher's identity.
    pub teacher: SvmModel,
    pub mutual_gaze: SvmModel,
    pub hand: CalibratedSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SocialTrainingConfig {
    pub persons: u64,
    pub samples_per_target: usize,
    pub teacher_identity: u64,
    pub seed: u64,
}

impl Default for SocialTrainingConfig {
    fn default() -> Self {
        Self { persons: 24, samples_per_target: 20, teacher_identity: 0, seed: 3 }
    }
}

/// Gaze features and labels for the samples `keep` assigns a label to.
pub fn gaze_training_set(samples: &[GazeSample], keep: impl Fn(&GazeSample) -> Option<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in samples {
        if let (Some(label), Ok(f)) = (keep(s), gaze_feature(&s.keypoints)) {
            x.push(f.values);
            y.push(label);
        }
    }
    (x, y)
}

/// Adds the horizontal mirror of every sample, so left and right gaze are seen symmetrically.
pub fn with_mirrored(samples: &[GazeSample]) -> Vec<GazeSample> {
    let mut out = samples.to_vec();
    for s in samples {
        let Some((cx, _)) = s.keypoints.head_centroid() else { continue };
        let target = match s.target {
            GazeTarget::AtLeftHand => GazeTarget::AtRightHand,
            GazeTarget::AtRightHand => GazeTarget::AtLeftHand,
            t => t,
        };
        out.push(GazeSample { person: s.person, target, keypoints: s.keypoints.mirrored(cx) });
    }
    out
}

pub fn mutual_gaze_label(s: &GazeSample) -> Option<f64> {
    Some(if s.target == GazeTarget::AtRobot { 1.0 } else { -1.0 })
}

pub fn hand_target_label(s: &GazeSample) -> Option<f64> {
    match s.target {
        GazeTarget::AtLeftHand => Some(hand_label(Hand::Left)),
        GazeTarget::AtRightHand => Some(hand_label(Hand::Right)),
        _ => None,
    }
}

/// Grid for the gaze classifiers. Gaze shifts move a few normalized coordinates by about
/// 0.1, so useful RBF widths sit well above the generic `gamma <= 1/d` range.
pub fn gaze_grid(dim: usize) -> Vec<SvmParams> {
    let d = dim.max(1) as f64;
    let mut g = Vec::new();
    for c in [1.0, 10.0, 100.0] {
        for gm in [1.0, 5.0, 20.0] {
            g.push(SvmParams { c, gamma: gm / d });
        }
    }
    g
}

impl SocialModels {
    /// Trains the gaze classifiers on simulated people and the teacher model online from
    /// batches of the teacher's face embeddings.
    pub fn train(cfg: &SocialTrainingConfig) -> Result<SocialModels> {
        let data = gaze_dataset(cfg.persons, cfg.samples_per_target, &NoiseParams::default(), cfg.seed);
        let (x, y) = gaze_training_set(&data, mutual_gaze_label);
        let grid = gaze_grid(x[0].len());
        let p = model_select(&x, &y, &grid, SearchScheme::FiveFoldGrid)?;
        let mutual_gaze = svm_train(&x, &y, p.c, p.gamma)?;
        let (x, y) = gaze_training_set(&with_mirrored(&data), hand_target_label);
        let hand = CalibratedSvm::fit(&x, &y, &grid, SearchScheme::FiveFoldGrid, cfg.seed)?;

        let registry = FaceRegistry::global();
        let pool = registry.negatives_pool(DEFAULT_EMBEDDING_SIGMA);
        let mut state = OnlineTrainerState::new(cfg.seed);
        let mut batch = 0u64;
        while !state.terminated {
            if batch >= 10 {
                return Err(Error::Numerical("teacher model did not reach its target accuracy".into()));
            }
            let samples: Vec<Vec<f64>> = (0..crate::classifiers::TEACHER_BATCH as u64)
                .map(|i| registry.embedding(cfg.teacher_identity, cfg.seed ^ (batch << 20 | i), DEFAULT_EMBEDDING_SIGMA))
                .collect::<Result<_>>()?;
            state = online_teacher_update(state, &samples, &pool)?;
            batch += 1;
        }
        let teacher = state.current_model.ok_or(Error::SingleClass)?;
        Ok(SocialModels { teacher, mutual_gaze, hand })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub machine: MachineConfig,
    pub track: TrackConfig,
    pub annotator: AnnotatorConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            machine: MachineConfig::default(),
            track: TrackConfig::default(),
            annotator: AnnotatorConfig::with_strategy(Strategy::HandProximal),
            train: TrainConfig::default(),
        }
    }
}

/// One person as delivered by the keypoint and face pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonPercept {
    pub keypoints: KeypointSet,
    pub face_embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineEvent {
    FrameArrived { frame: RgbdFrame, people: Vec<PersonPercept> },
    SpeechHeard { time: f64, utterance: String },
    Tick { time: f64 },
    Reset,
}

/// Event description stored in the log (frames by index only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LoggedEvent {
    Frame { index: u32, people: usize },
    Speech { utterance: String },
    Tick,
    TrainingFinished { ok: bool },
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: f64,
    pub state_before: StateKind,
    pub event: LoggedEvent,
    pub state_after: StateKind,
    pub actions: Vec<Action>,
}

pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub struct Pipeline<'m> {
    pub cfg: PipelineConfig,
    models: &'m SocialModels,
    pub state: PipelineState,
    track: TeacherTrack,
    annotator: Option<SequenceAnnotator>,
    pub annotations: Vec<Annotation>,
    samples: Vec<FrameSamples>,
    pub detector: Option<DetectionModel>,
    pub log: Vec<LogRecord>,
    last_time: f64,
}

impl<'m> Pipeline<'m> {
    pub fn new(cfg: PipelineConfig, models: &'m SocialModels) -> Result<Self> {
        cfg.machine.validate()?;
        cfg.annotator.validate()?;
        Ok(Self {
            cfg,
            models,
            state: PipelineState::default(),
            track: TeacherTrack::default(),
            annotator: None,
            annotations: Vec::new(),
            samples: Vec::new(),
            detector: None,
            log: Vec::new(),
            last_time: 0.0,
        })
    }

    fn apply(&mut self, time: f64, event: LoggedEvent, percept: Percept) -> Vec<Action> {
        let before = self.state.state;
        let (next, actions) = machine_step(&self.state, &percept, &self.cfg.machine);
        self.state = next;
        self.log.push(LogRecord { time, state_before: before, event, state_after: self.state.state, actions: actions.clone() });
        actions
    }

    /// Processes one event; the returned actions include detections once a model is ready.
    pub fn handle(&mut self, event: PipelineEvent) -> Result<Vec<Action>> {
        match event {
            PipelineEvent::FrameArrived { frame, people } => self.on_frame(frame, people),
            PipelineEvent::SpeechHeard { time, utterance } => {
                self.last_time = time;
                let logged = LoggedEvent::Speech { utterance: utterance.clone() };
                Ok(self.apply(time, logged, Percept::Speech { time, utterance }))
            }
            PipelineEvent::Tick { time } => {
                self.last_time = time;
                Ok(self.apply(time, LoggedEvent::Tick, Percept::Tick { time }))
            }
            PipelineEvent::Reset => {
                self.annotator = None;
                self.annotations.clear();
                self.samples.clear();
                self.detector = None;
                self.track = TeacherTrack::default();
                let t = self.last_time;
                Ok(self.apply(t, LoggedEvent::Reset, Percept::Reset))
            }
        }
    }

    fn on_frame(&mut self, frame: RgbdFrame, people: Vec<PersonPercept>) -> Result<Vec<Action>> {
        let time = frame.timestamp;
        if time < self.last_time {
            return Err(Error::InvalidInput(format!("event at {time} s arrived after {} s", self.last_time)));
        }
        self.last_time = time;
        let kps: Vec<KeypointSet> = people.iter().map(|p| p.keypoints.clone()).collect();
        let scores: Vec<Option<f64>> =
            people.iter().map(|p| p.face_embedding.as_ref().and_then(|e| self.models.teacher.decision(e).ok())).collect();
        self.track = associate_teacher(&self.track, &kps, &scores, &self.cfg.track);
        let teacher = self.track.teacher_ref.and_then(|r| kps.iter().find(|k| k.person_ref == r));
        let state = self.state.state;
        let feature = teacher.and_then(|k| gaze_feature(k).ok());
        let gaze = match (&feature, state) {
            (Some(f), StateKind::Idle | StateKind::Engaging) => mutual_gaze(f, &self.models.mutual_gaze)?,
            _ => false,
        };
        let hand = match (&feature, state) {
            (Some(f), StateKind::LocateHand) => Some(hand_selection(f, &self.models.hand)?),
            _ => None,
        };
        let annotation = if state == StateKind::Acquire { Some(self.annotate(&frame, teacher)?) } else { None };
        let logged = LoggedEvent::Frame { index: frame.index, people: people.len() };
        let percept = Percept::Frame { time, teacher_visible: teacher.is_some(), mutual_gaze: gaze, hand, annotation };
        let mut actions = self.apply(time, logged, percept);

        if self.state.state == StateKind::Acquire && self.annotator.is_none() {
            let label = self.state.pending_label.clone().unwrap_or_default();
            self.annotator = Some(SequenceAnnotator::new(label, self.cfg.annotator)?);
        }
        for a in &actions {
            if let Action::RecordAnnotation { annotation } = a {
                let mine = frame.index as usize % self.cfg.train.frame_stride.max(1) == 0;
                self.samples.push(frame_samples(&frame, annotation, mine, &self.cfg.train)?);
                self.annotations.push(annotation.clone());
            }
        }
        if self.state.state == StateKind::Train {
            let ok = self.train();
            if let Err(e) = &ok {
                log::warn!("detector training failed: {e}");
            }
            actions.extend(self.apply(time, LoggedEvent::TrainingFinished { ok: ok.is_ok() }, Percept::TrainingFinished { ok: ok.is_ok() }));
        }
        if actions.iter().any(|a| matches!(a, Action::Detect)) {
            let detections = self.detector.as_ref().map(|m| detect(m, &frame)).unwrap_or_default();
            let out = Action::Detections { frame_index: frame.index, detections };
            if let Some(last) = self.log.last_mut() {
                last.actions.push(out.clone());
            }
            actions.push(out);
        }
        Ok(actions)
    }

    fn annotate(&mut self, frame: &RgbdFrame, teacher: Option<&KeypointSet>) -> Result<AnnotationOutcome> {
        let Some(ann) = self.annotator.as_mut() else { return Ok(AnnotationOutcome::Lost) };
        let hand = self.state.selected_hand.unwrap_or(Hand::Left);
        let input = AnnotatorInput { frame, teacher: teacher.map(|k| (k, hand)) };
        Ok(match ann.step(&input) {
            Ok(AnnotatorStep::Annotated(a)) => AnnotationOutcome::Annotated { annotation: a },
            Ok(_) => AnnotationOutcome::Lost,
            Err(e @ (Error::AnnotationAborted { .. } | Error::InitialSegmentationFailed(_))) => {
                AnnotationOutcome::Aborted { reason: e.to_string() }
            }
            Err(e) => return Err(e),
        })
    }

    fn train(&mut self) -> Result<()> {
        let label = self.annotations.first().map(|a| a.label.clone()).ok_or(Error::EmptyPool)?;
        self.detector = Some(train_detector(&self.samples, &[label], &self.cfg.train)?);
        self.samples.clear();
        Ok(())
    }
}

/// Outcome of replaying a scripted session.
pub struct SessionOutcome {
    pub final_state: PipelineState,
    pub annotations: Vec<Annotation>,
    pub detector: Option<DetectionModel>,
    pub log: Vec<LogRecord>,
}

/// Replays a scripted session: every frame, then the utterances heard during it.
pub fn run_session(script: &ScenarioScript, models: &SocialModels, cfg: &PipelineConfig) -> Result<SessionOutcome> {
    let mut p = Pipeline::new(cfg.clone(), models)?;
    for (frame, gt) in render_sequence(script)? {
        let time = frame.timestamp;
        let people = gt
            .people
            .iter()
            .map(|o| PersonPercept { keypoints: o.keypoints.clone(), face_embedding: o.face_embedding.clone() })
            .collect();
        p.handle(PipelineEvent::FrameArrived { frame, people })?;
        for utterance in gt.speech {
            p.handle(PipelineEvent::SpeechHeard { time, utterance })?;
        }
    }
    Ok(SessionOutcome { final_state: p.state, annotations: p.annotations, detector: p.detector, log: p.log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AnnotationSource, BoundingBox};
    use proptest::prelude::*;

    fn frame(t: f64, gaze: bool) -> Percept {
        Percept::Frame { time: t, teacher_visible: true, mutual_gaze: gaze, hand: None, annotation: None }
    }

    fn run(cfg: &MachineConfig, percepts: &[Percept]) -> (PipelineState, Vec<Action>) {
        let mut s = PipelineState::default();
        let mut all = Vec::new();
        for p in percepts {
            let (n, a) = machine_step(&s, p, cfg);
            s = n;
            all.extend(a);
        }
        (s, all)
    }

    #[test]
    fn commands() {
        assert_eq!(parse_command("learn 011_banana").as_deref(), Some("011_banana"));
        assert_eq!(parse_command("LEARN Mug").as_deref(), Some("mug"));
        assert_eq!(parse_command("hello robot"), None);
        assert_eq!(parse_command("learn"), None);
        assert_eq!(classify_utterance("learn m&g"), Command::BadLabel);
        assert_eq!(classify_utterance("learn the mug"), Command::Unrelated);
    }

    #[test]
    fn engagement_threshold() {
        let cfg = MachineConfig::default();
        assert_eq!(cfg.engage_frames(), 11);
        let dt = 1.0 / 7.0;
        let eleven: Vec<Percept> = (0..11).map(|i| frame(i as f64 * dt, true)).collect();
        assert_eq!(run(&cfg, &eleven).0.state, StateKind::AwaitCommand);
        assert_eq!(run(&cfg, &eleven[..10]).0.state, StateKind::Engaging);
        let mut broken: Vec<Percept> = (0..10).map(|i| frame(i as f64 * dt, true)).collect();
        broken.push(frame(10.0 * dt, false));
        broken.extend((11..21).map(|i| frame(i as f64 * dt, true)));
        assert_eq!(run(&cfg, &broken).0.state, StateKind::Engaging);
    }

    fn engaged_then(cfg: &MachineConfig, rest: &[Percept]) -> (PipelineState, Vec<Action>) {
        let mut ps: Vec<Percept> = (0..cfg.engage_frames()).map(|i| frame(i as f64 / cfg.fps, true)).collect();
        ps.extend_from_slice(rest);
        run(cfg, &ps)
    }

    #[test]
    fn command_and_timeouts() {
        let cfg = MachineConfig::default();
        let t0 = 10.0 / 7.0;
        let speech = |t: f64, u: &str| Percept::Speech { time: t, utterance: u.into() };
        let (s, a) = engaged_then(&cfg, &[speech(t0 + 1.0, "learn M!ug")]);
        assert_eq!(s.state, StateKind::AwaitCommand);
        assert!(a.contains(&Action::AskRepeat { utterance: "learn M!ug".into() }));
        let (s, _) = engaged_then(&cfg, &[speech(t0 + 1.0, "hello")]);
        assert_eq!(s.state, StateKind::AwaitCommand);
        let (s, _) = engaged_then(&cfg, &[speech(t0 + 1.0, "learn mug")]);
        assert_eq!((s.state, s.pending_label.as_deref()), (StateKind::LocateHand, Some("mug")));
        let (s, _) = engaged_then(&cfg, &[Percept::Tick { time: t0 + 10.0 }]);
        assert_eq!(s.state, StateKind::Idle);
        let (s, _) = engaged_then(&cfg, &[speech(t0 + 1.0, "learn mug"), Percept::Tick { time: t0 + 6.0 }]);
        assert_eq!((s.state, s.pending_label), (StateKind::AwaitCommand, None));
    }

    fn hand_frame(t: f64, p: Hand, c: f64) -> Percept {
        Percept::Frame { time: t, teacher_visible: true, mutual_gaze: false, hand: Some(HandSelection { p, c }), annotation: None }
    }

    fn ann(f: u32) -> AnnotationOutcome {
        AnnotationOutcome::Annotated {
            annotation: Annotation {
                frame_index: f,
                bbox: BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                label: "mug".into(),
                source: AnnotationSource::HandProximal,
                pixel_count: 25,
            },
        }
    }

    #[test]
    fn hand_debounce_and_acquisition() {
        let cfg = MachineConfig { acquire_frames: 4, ..Default::default() };
        let t = 2.0;
        let speech = Percept::Speech { time: t, utterance: "learn mug".into() };
        let flicker = [hand_frame(t, Hand::Left, 0.9), hand_frame(t, Hand::Right, 0.9), hand_frame(t, Hand::Left, 0.5)];
        let mut ps = vec![speech.clone()];
        ps.extend_from_slice(&flicker);
        assert_eq!(engaged_then(&cfg, &ps).0.state, StateKind::LocateHand);
        let mut ps = vec![speech];
        ps.extend((0..3).map(|_| hand_frame(t, Hand::Right, 0.7)));
        let (s, _) = engaged_then(&cfg, &ps);
        assert_eq!((s.state, s.selected_hand), (StateKind::Acquire, Some(Hand::Right)));
        let acq = |a: Option<AnnotationOutcome>, vis: bool| Percept::Frame {
            time: t,
            teacher_visible: vis,
            mutual_gaze: false,
            hand: None,
            annotation: a,
        };
        for k in 0..4 {
            ps.push(acq(Some(ann(k)), true));
        }
        let (s, a) = engaged_then(&cfg, &ps);
        assert_eq!((s.state, s.acquired), (StateKind::Train, 4));
        assert!(a.contains(&Action::StartTraining { label: "mug".into(), annotations: 4 }));
        let mut lost = ps[..ps.len() - 4].to_vec();
        lost.extend((0..7).map(|_| acq(None, false)));
        assert_eq!(engaged_then(&cfg, &lost).0.state, StateKind::Acquire);
        lost.push(acq(None, false));
        let (s, _) = engaged_then(&cfg, &lost);
        assert_eq!(s.state, StateKind::Aborted);
        lost.push(frame(t, true));
        assert_eq!(engaged_then(&cfg, &lost).0.state, StateKind::Aborted);
        lost.push(Percept::Reset);
        assert_eq!(engaged_then(&cfg, &lost).0.state, StateKind::Idle);
    }

    /// Reference: engaged iff some run of `need` consecutive trues.
    fn has_run(seq: &[bool], need: usize) -> bool {
        seq.split(|g| !g).any(|r| r.len() >= need)
    }

    #[test]
    fn exhaustive_gaze_sequences() {
        let cfg = MachineConfig::default();
        for len in 0..=14usize {
            for bits in 0u32..(1 << len) {
                let seq: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let ps: Vec<Percept> = seq.iter().enumerate().map(|(i, g)| frame(i as f64 / 7.0, *g)).collect();
                let (_, actions) = run(&cfg, &ps);
                assert_eq!(actions.contains(&Action::Engage), has_run(&seq, 11), "{seq:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn streak_matches_reference_counter(seq in prop::collection::vec(any::<bool>(), 0..60)) {
            let cfg = MachineConfig { command_timeout_s: 1e9, ..Default::default() };
            let mut s = PipelineState::default();
            let mut reference = 0u32;
            let mut engaged = false;
            for (i, g) in seq.iter().enumerate() {
                s = machine_step(&s, &frame(i as f64 / 7.0, *g), &cfg).0;
                if !engaged {
                    reference = if *g { reference + 1 } else { 0 };
                    if reference >= 11 { engaged = true; reference = 0; }
                    prop_assert_eq!(s.gaze_streak, reference);
                }
                prop_assert_eq!(s.state == StateKind::AwaitCommand, engaged);
            }
        }
    }

    /// Every transition edge allowed by the design, with the percept that may cause it.
    fn edge_allowed(from: &PipelineState, p: &Percept, to: &PipelineState, cfg: &MachineConfig) -> bool {
        use StateKind::*;
        if from.state == to.state {
            return true;
        }
        match (from.state, to.state) {
            (_, Idle) if matches!(p, Percept::Reset) => true,
            (Idle | Engaging, Idle | Engaging) => matches!(p, Percept::Frame { .. }),
            (Idle | Engaging, AwaitCommand) => matches!(p, Percept::Frame { teacher_visible: true, mutual_gaze: true, .. }),
            (AwaitCommand, Idle) => percept_time(p).is_some_and(|t| t - from.state_since >= cfg.command_timeout_s),
            (AwaitCommand, LocateHand) => match p {
                Percept::Speech { utterance, .. } => parse_command(utterance).is_some() && to.pending_label == parse_command(utterance),
                _ => false,
            },
            (LocateHand, AwaitCommand) => {
                percept_time(p).is_some_and(|t| t - from.state_since >= cfg.locate_timeout_s) && to.pending_label.is_none()
            }
            (LocateHand, Acquire) => match p {
                Percept::Frame { hand: Some(h), .. } => {
                    h.c >= cfg.hand_confidence && to.selected_hand == Some(h.p) && from.pending_label.is_some()
                }
                _ => false,
            },
            (Acquire, Train) => to.acquired >= cfg.acquire_frames,
            (Acquire, Aborted) => matches!(p, Percept::Frame { .. }),
            (Train, Ready | Aborted) => matches!(p, Percept::TrainingFinished { .. }),
            _ => false,
        }
    }

    #[test]
    fn model_check_short_traces() {
        // shrunk thresholds so every state is reachable within the horizon
        let cfg = MachineConfig {
            engage_seconds: 2.0 / 7.0,
            hand_confirm_frames: 2,
            acquire_frames: 2,
            teacher_loss_frames: 1,
            ..Default::default()
        };
        let alphabet: Vec<Percept> = vec![
            frame(0.0, true),
            frame(0.0, false),
            Percept::Frame { time: 0.0, teacher_visible: false, mutual_gaze: false, hand: None, annotation: None },
            Percept::Speech { time: 0.0, utterance: "learn mug".into() },
            Percept::Speech { time: 0.0, utterance: "learn m#g".into() },
            hand_frame(0.0, Hand::Left, 0.9),
            hand_frame(0.0, Hand::Left, 0.3),
            Percept::Frame { time: 0.0, teacher_visible: true, mutual_gaze: true, hand: None, annotation: Some(ann(0)) },
            Percept::Tick { time: 1e3 },
            Percept::TrainingFinished { ok: true },
            Percept::Reset,
        ];
        // breadth-first over distinct machine states (the state carries all history)
        let key = |s: &PipelineState| serde_json::to_string(s).unwrap();
        let mut seen = std::collections::HashSet::from([key(&PipelineState::default())]);
        let mut reached = std::collections::HashSet::new();
        let mut frontier = vec![PipelineState::default()];
        for _ in 0..16 {
            let mut next = Vec::new();
            for s in &frontier {
                reached.insert(s.state);
                s.check_invariants(&cfg).unwrap();
                for p in &alphabet {
                    let (n, _) = machine_step(s, p, &cfg);
                    assert!(edge_allowed(s, p, &n, &cfg), "{:?} --{p:?}--> {:?}", s.state, n.state);
                    if n.state == StateKind::Acquire && s.state != StateKind::Acquire {
                        assert!(n.pending_label.is_some() && n.selected_hand.is_some());
                    }
                    if seen.insert(key(&n)) {
                        next.push(n);
                    }
                }
            }
            frontier = next;
        }
        assert!(frontier.is_empty(), "state space not closed within the horizon");
        for k in [StateKind::Engaging, StateKind::AwaitCommand, StateKind::LocateHand, StateKind::Acquire, StateKind::Train, StateKind::Ready, StateKind::Aborted] {
            assert!(reached.contains(&k), "{k:?} unreachable");
        }
    }

    #[test]
    fn log_is_jsonl() {
        let rec = LogRecord {
            time: 0.5,
            state_before: StateKind::Idle,
            event: LoggedEvent::Speech { utterance: "hi".into() },
            state_after: StateKind::Idle,
            actions: vec![Action::Engage],
        };
        let s = log_to_jsonl(&[rec.clone(), rec]).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with(r#"{"time":0.5,"state_before":"idle","event":{"type":"speech","utterance":"hi"}"#));
    }
}
