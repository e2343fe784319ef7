//! Annotation quality against simulator truth, COCO-style average precision, and the
//! strategy comparison harness.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{AnnotatorConfig, AnnotatorInput, AnnotatorStep, SequenceAnnotator, Strategy};
use crate::detection::{
    detect_proposals, frame_proposals, frame_samples, train_detector, DetectionModel, FrameSamples, ProposalConfig, TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, Annotation, BoundingBox, Detection, RgbdFrame};
use crate::simworld::{catalog, render_sequence, GroundTruthRecord, ObjectSpec, ScenarioKind, ScenarioScript, SizeClass};

pub const AP_RECALL_POINTS: usize = 101;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// A detection tagged with the frame it was made on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub frame_index: u32,
    #[serde(flatten)]
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(precision, recall)` after each detection in descending score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

impl PrCurve {
    /// Classes without ground truth are left out of the mean.
    pub fn is_evaluable(&self) -> bool {
        self.n_gt > 0
    }
}

fn det_order(a: &FrameDetection, b: &FrameDetection) -> std::cmp::Ordering {
    b.detection
        .score
        .total_cmp(&a.detection.score)
        .then(a.frame_index.cmp(&b.frame_index))
        .then_with(|| a.detection.bbox.sort_key().partial_cmp(&b.detection.bbox.sort_key()).unwrap())
}

/// Single-class AP. Detections are visited by descending score (ties: frame, then box) and each
/// claims the unmatched ground truth of its frame with the highest IoU at or above the
/// threshold. AP is the mean over 101 recall levels of the best precision reached at that
/// recall or beyond.
pub fn average_precision(dets: &[FrameDetection], gts: &[Annotation], iou_thresh: f64) -> PrCurve {
    let mut order: Vec<&FrameDetection> = dets.iter().collect();
    order.sort_by(|a, b| det_order(a, b));
    let mut by_frame: BTreeMap<u32, Vec<(usize, &BoundingBox)>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame_index).or_default().push((i, &g.bbox));
    }
    let mut matched = vec![false; gts.len()];
    let n_gt = gts.len();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, d) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &(i, g) in by_frame.get(&d.frame_index).map(Vec::as_slice).unwrap_or(&[]) {
            if matched[i] {
                continue;
            }
            let o = iou(&d.detection.bbox, g);
            if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((i, o));
            }
        }
        if let Some((i, _)) = best {
            matched[i] = true;
            tp += 1;
        }
        let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
        points.push((tp as f64 / (k + 1) as f64, recall));
    }
    let ap = if n_gt == 0 {
        0.0
    } else {
        // precision envelope from the right
        let mut env: Vec<f64> = points.iter().map(|p| p.0).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let mut sum = 0.0;
        let mut j = 0;
        for r in 0..AP_RECALL_POINTS {
            let level = r as f64 / (AP_RECALL_POINTS - 1) as f64;
            while j < points.len() && points[j].1 < level {
                j += 1;
            }
            if j < points.len() {
                sum += env[j];
            }
        }
        sum / AP_RECALL_POINTS as f64
    };
    PrCurve { points, ap, n_gt, n_det: dets.len() }
}

/// Per-label curves over every label that appears in either list.
pub fn per_class_ap(dets: &[FrameDetection], gts: &[Annotation], iou_thresh: f64) -> BTreeMap<String, PrCurve> {
    let mut labels: Vec<&str> = gts.iter().map(|g| g.label.as_str()).collect();
    labels.extend(dets.iter().map(|d| d.detection.label.as_str()));
    labels.sort_unstable();
    labels.dedup();
    labels
        .into_iter()
        .map(|l| {
            let d: Vec<FrameDetection> = dets.iter().filter(|d| d.detection.label == l).cloned().collect();
            let g: Vec<Annotation> = gts.iter().filter(|g| g.label == l).cloned().collect();
            (l.to_string(), average_precision(&d, &g, iou_thresh))
        })
        .collect()
}

/// Unweighted mean AP over classes with ground truth.
pub fn mean_ap(per_class: &BTreeMap<String, PrCurve>) -> Result<f64> {
    let aps: Vec<f64> = per_class.values().filter(|c| c.is_evaluable()).map(|c| c.ap).collect();
    if aps.is_empty() {
        return Err(Error::NoEvaluableClass);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationQuality {
    /// Mean IoU over frames with a visible object; frames without an annotation count as 0.
    pub mean_iou: f64,
    /// AP@0.5 treating each annotation as a detection with score 1.
    pub ap: f64,
    pub n_truth: usize,
    pub n_auto: usize,
}

/// Quality of one sequence's annotations given `(frame_index, true box)` pairs.
pub fn annotation_quality_boxes(auto: &[Annotation], truth: &[(u32, Option<BoundingBox>)]) -> Result<AnnotationQuality> {
    let index: BTreeMap<u32, Option<BoundingBox>> = truth.iter().copied().collect();
    for a in auto {
        if !index.contains_key(&a.frame_index) {
            return Err(Error::IndexMismatch(format!("annotation for frame {} has no truth record", a.frame_index)));
        }
    }
    let by_frame: BTreeMap<u32, &Annotation> = auto.iter().map(|a| (a.frame_index, a)).collect();
    let label = auto.first().map_or("object", |a| a.label.as_str());
    let mut gts = Vec::new();
    let mut iou_sum = 0.0;
    for (&f, t) in &index {
        let Some(t) = t else { continue };
        iou_sum += by_frame.get(&f).map_or(0.0, |a| iou(&a.bbox, t));
        gts.push(Annotation {
            frame_index: f,
            bbox: *t,
            label: label.to_string(),
            source: crate::geometry::AnnotationSource::Manual,
            pixel_count: 0,
        });
    }
    let dets: Vec<FrameDetection> = auto
        .iter()
        .map(|a| FrameDetection {
            frame_index: a.frame_index,
            detection: Detection { bbox: a.bbox, label: label.to_string(), score: 1.0 },
        })
        .collect();
    let n_truth = gts.len();
    Ok(AnnotationQuality {
        mean_iou: if n_truth > 0 { iou_sum / n_truth as f64 } else { 0.0 },
        ap: average_precision(&dets, &gts, DEFAULT_IOU_THRESHOLD).ap,
        n_truth,
        n_auto: auto.len(),
    })
}

pub fn annotation_quality(auto: &[Annotation], truth: &[GroundTruthRecord]) -> Result<AnnotationQuality> {
    let boxes: Vec<(u32, Option<BoundingBox>)> = truth.iter().map(|r| (r.frame_index, r.true_object_box)).collect();
    annotation_quality_boxes(auto, &boxes)
}

// ---------------------------------------------------------------------------
// Comparison harness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub scenarios: Vec<ScenarioKind>,
    pub strategies: Vec<Strategy>,
    pub size_splits: Vec<SizeClass>,
    /// Catalog labels; empty means the whole catalog.
    pub objects: Vec<String>,
    pub train_seed: u64,
    pub test_seed: u64,
    pub train_frames: u32,
    pub test_frames: u32,
    /// Base annotator settings; the strategy field is overridden per cell.
    pub annotator: AnnotatorConfig,
    pub train: TrainConfig,
    /// Whether to train and evaluate detectors or only score annotations.
    pub detection: bool,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioKind::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            size_splits: SizeClass::ALL.to_vec(),
            objects: Vec::new(),
            train_seed: 1,
            test_seed: 1001,
            train_frames: 300,
            test_frames: 100,
            annotator: AnnotatorConfig::default(),
            train: TrainConfig::default(),
            detection: true,
        }
    }
}

impl ComparisonConfig {
    pub fn object_specs(&self) -> Result<Vec<ObjectSpec>> {
        if self.objects.is_empty() {
            return Ok(catalog());
        }
        self.objects.iter().map(|l| crate::simworld::object_by_label(l)).collect()
    }

    /// Short content hash of the configuration.
    pub fn run_id(&self) -> Result<String> {
        Ok(hex::encode(&Sha256::digest(serde_json::to_vec(self)?)[..8]))
    }
}

/// Seed of one sequence, distinct per base seed, scenario and object.
pub fn sequence_seed(base: u64, scenario: ScenarioKind, object_index: usize) -> u64 {
    let s = ScenarioKind::ALL.iter().position(|k| *k == scenario).unwrap_or(0) as u64;
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (s << 32) ^ object_index as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCell {
    pub scenario: ScenarioKind,
    pub strategy: Strategy,
    pub mean_iou: f64,
    pub map: f64,
    pub per_object: BTreeMap<String, AnnotationQuality>,
    /// Objects whose annotation run aborted, with the reason.
    pub aborted: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCell {
    pub scenario: ScenarioKind,
    pub strategy: Strategy,
    pub split: SizeClass,
    pub map: f64,
    pub per_class: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u16,
    pub run_id: String,
    pub config: ComparisonConfig,
    pub annotation: Vec<AnnotationCell>,
    pub detection: Vec<DetectionCell>,
}

pub const REPORT_VERSION: u16 = 1;

impl EvalReport {
    pub fn annotation_cell(&self, scenario: ScenarioKind, strategy: Strategy) -> Option<&AnnotationCell> {
        self.annotation.iter().find(|c| c.scenario == scenario && c.strategy == strategy)
    }

    pub fn detection_cell(&self, scenario: ScenarioKind, strategy: Strategy, split: SizeClass) -> Option<&DetectionCell> {
        self.detection.iter().find(|c| c.scenario == scenario && c.strategy == strategy && c.split == split)
    }

    /// Unions the cells of several reports. Identical duplicate cells collapse; conflicting
    /// ones are an error. The merged run id hashes the sorted input run ids.
    pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports to merge".into()))?;
        let mut annotation: Vec<AnnotationCell> = Vec::new();
        let mut detection: Vec<DetectionCell> = Vec::new();
        for r in reports {
            if r.format != first.format || r.version != first.version {
                return Err(Error::Format(format!("cannot merge {} v{} into {} v{}", r.format, r.version, first.format, first.version)));
            }
            for c in &r.annotation {
                match annotation.iter().find(|x| x.scenario == c.scenario && x.strategy == c.strategy) {
                    Some(x) if x == c => {}
                    Some(_) => return Err(Error::IndexMismatch(format!("conflicting annotation cells for {} {}", c.scenario.name(), c.strategy.name()))),
                    None => annotation.push(c.clone()),
                }
            }
            for c in &r.detection {
                match detection.iter().find(|x| x.scenario == c.scenario && x.strategy == c.strategy && x.split == c.split) {
                    Some(x) if x == c => {}
                    Some(_) => {
                        return Err(Error::IndexMismatch(format!(
                            "conflicting detection cells for {} {} {}",
                            c.scenario.name(),
                            c.strategy.name(),
                            c.split.name()
                        )))
                    }
                    None => detection.push(c.clone()),
                }
            }
        }
        let sc = |k: ScenarioKind| ScenarioKind::ALL.iter().position(|x| *x == k);
        let st = |k: Strategy| Strategy::ALL.iter().position(|x| *x == k);
        let sp = |k: SizeClass| SizeClass::ALL.iter().position(|x| *x == k);
        annotation.sort_by_key(|c| (sc(c.scenario), st(c.strategy)));
        detection.sort_by_key(|c| (sc(c.scenario), st(c.strategy), sp(c.split)));

        let mut config = first.config.clone();
        let all_configs = || reports.iter().map(|r| &r.config);
        config.scenarios = ScenarioKind::ALL.into_iter().filter(|k| all_configs().any(|c| c.scenarios.contains(k))).collect();
        config.strategies = Strategy::ALL.into_iter().filter(|k| all_configs().any(|c| c.strategies.contains(k))).collect();
        config.size_splits = SizeClass::ALL.into_iter().filter(|k| all_configs().any(|c| c.size_splits.contains(k))).collect();
        let mut ids: Vec<&str> = reports.iter().map(|r| r.run_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let run_id = if ids.len() == 1 { ids[0].to_string() } else { hex::encode(&Sha256::digest(ids.join(",").as_bytes())[..8]) };
        Ok(EvalReport { format: first.format.clone(), version: first.version, run_id, config, annotation, detection })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// Flat table: `run_id,kind,scenario,strategy,split,class,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_id,kind,scenario,strategy,split,class,metric,value\n");
        let mut row = |kind: &str, sc: ScenarioKind, st: Strategy, split: &str, class: &str, metric: &str, v: f64| {
            out.push_str(&format!("{},{kind},{},{},{split},{class},{metric},{v}\n", self.run_id, sc.name(), st.name()));
        };
        for c in &self.annotation {
            row("annotation", c.scenario, c.strategy, "", "*", "mean_iou", c.mean_iou);
            row("annotation", c.scenario, c.strategy, "", "*", "map", c.map);
            for (o, q) in &c.per_object {
                row("annotation", c.scenario, c.strategy, "", o, "mean_iou", q.mean_iou);
                row("annotation", c.scenario, c.strategy, "", o, "ap", q.ap);
            }
        }
        for c in &self.detection {
            row("detection", c.scenario, c.strategy, c.split.name(), "*", "map", c.map);
            for (o, ap) in &c.per_class {
                row("detection", c.scenario, c.strategy, c.split.name(), o, "ap", *ap);
            }
        }
        out
    }

    /// Console tables: annotation quality per scenario, then detection mAP per size split.
    pub fn summary_table(&self) -> String {
        let mut s = format!("run {}\n\nannotation quality (mAP@0.5 / mean IoU)\n", self.run_id);
        s.push_str(&format!("{:<18}", "scenario"));
        for st in &self.config.strategies {
            s.push_str(&format!("{:>24}", st.name()));
        }
        s.push('\n');
        for sc in &self.config.scenarios {
            s.push_str(&format!("{:<18}", sc.name()));
            for st in &self.config.strategies {
                let cell = self.annotation_cell(*sc, *st).map_or("-".into(), |c| format!("{:.1} / {:.3}", 100.0 * c.map, c.mean_iou));
                s.push_str(&format!("{cell:>24}"));
            }
            s.push('\n');
        }
        if !self.detection.is_empty() {
            s.push_str("\ndetection mAP@0.5 on the constrained test set\n");
            s.push_str(&format!("{:<18}{:<16}", "training", "strategy"));
            for sp in &self.config.size_splits {
                s.push_str(&format!("{:>10}", sp.name()));
            }
            s.push('\n');
            for sc in &self.config.scenarios {
                for st in &self.config.strategies {
                    s.push_str(&format!("{:<18}{:<16}", sc.name(), st.name()));
                    for sp in &self.config.size_splits {
                        let v = self.detection_cell(*sc, *st, *sp).map_or("-".into(), |c| format!("{:.1}", 100.0 * c.map));
                        s.push_str(&format!("{v:>10}"));
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

/// Annotations and mined training samples for one sequence and strategy.
#[derive(Debug, Clone, Default)]
pub struct AcquiredSequence {
    pub annotations: Vec<Annotation>,
    pub samples: Vec<FrameSamples>,
    pub aborted: Option<String>,
}

/// Renders a sequence once and runs one streaming annotator per strategy over it. The teacher
/// and held hand come from simulator truth, isolating annotation from the social classifiers.
/// Returns the per-strategy results and the `(frame, true box)` list.
pub fn acquire_sequence(
    script: &ScenarioScript,
    strategies: &[Strategy],
    annotator: &AnnotatorConfig,
    train: Option<&TrainConfig>,
) -> Result<(Vec<AcquiredSequence>, Vec<(u32, Option<BoundingBox>)>)> {
    let label = script.object.label.clone();
    let mut runs: Vec<(Option<SequenceAnnotator>, AcquiredSequence)> = strategies
        .iter()
        .map(|&s| Ok((Some(SequenceAnnotator::new(label.clone(), AnnotatorConfig { strategy: s, ..*annotator })?), AcquiredSequence::default())))
        .collect::<Result<_>>()?;
    let mut truth = Vec::with_capacity(script.n_frames as usize);
    for (frame, gt) in render_sequence(script)? {
        truth.push((gt.frame_index, gt.true_object_box));
        let teacher = gt.teacher().map(|p| (&p.keypoints, gt.held_hand));
        for (ann, acq) in runs.iter_mut() {
            let Some(a) = ann.as_mut() else { continue };
            match a.step(&AnnotatorInput { frame: &frame, teacher }) {
                Ok(AnnotatorStep::Annotated(x)) => {
                    if let Some(cfg) = train {
                        let mine = frame.index as usize % cfg.frame_stride.max(1) == 0;
                        acq.samples.push(frame_samples(&frame, &x, mine, cfg)?);
                    }
                    acq.annotations.push(x);
                }
                Ok(_) => {}
                Err(e) => {
                    acq.aborted = Some(e.to_string());
                    *ann = None;
                }
            }
        }
    }
    Ok((runs.into_iter().map(|(_, a)| a).collect(), truth))
}

/// One frame of a detection test set with its proposals precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFrame {
    pub label: String,
    pub truth: Option<BoundingBox>,
    pub proposals: Vec<(BoundingBox, Vec<f64>)>,
    pub width: u32,
    pub height: u32,
}

impl TestFrame {
    pub fn new(frame: &RgbdFrame, label: &str, truth: Option<BoundingBox>, proposals: &ProposalConfig) -> Self {
        Self {
            label: label.to_string(),
            truth,
            proposals: frame_proposals(frame, proposals),
            width: frame.width,
            height: frame.height,
        }
    }
}

fn test_set(objects: &[ObjectSpec], cfg: &ComparisonConfig) -> Result<Vec<TestFrame>> {
    let mut out = Vec::new();
    for (i, obj) in objects.iter().enumerate() {
        let seed = sequence_seed(cfg.test_seed, ScenarioKind::Constrained, i);
        let script = ScenarioScript::generate(ScenarioKind::Constrained, obj.clone(), seed, cfg.test_frames);
        for (frame, gt) in render_sequence(&script)? {
            out.push(TestFrame::new(&frame, &obj.label, gt.true_object_box, &cfg.train.proposals));
        }
    }
    Ok(out)
}

/// Scores `model` on the test frames of `labels`; a missing model scores zero on every class
/// with ground truth. Returns mAP@0.5 and the per-class AP of evaluable classes.
pub fn score_detector(model: Option<&DetectionModel>, labels: &[String], tests: &[TestFrame]) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (t_idx, t) in tests.iter().enumerate().filter(|(_, t)| labels.contains(&t.label)) {
        // test frames are numbered globally so frames of different sequences never match
        let frame_id = t_idx as u32;
        if let Some(b) = t.truth {
            gts.push(Annotation {
                frame_index: frame_id,
                bbox: b,
                label: t.label.clone(),
                source: crate::geometry::AnnotationSource::Manual,
                pixel_count: 0,
            });
        }
        if let Some(m) = model {
            for d in detect_proposals(m, &t.proposals, t.width, t.height) {
                dets.push(FrameDetection { frame_index: frame_id, detection: d });
            }
        }
    }
    let curves = per_class_ap(&dets, &gts, DEFAULT_IOU_THRESHOLD);
    let map = mean_ap(&curves)?;
    let per_class = curves.into_iter().filter(|(_, c)| c.is_evaluable()).map(|(l, c)| (l, c.ap)).collect();
    Ok((map, per_class))
}

/// Annotation results of one sequence.
pub struct SequenceAnnotations<'a> {
    pub label: &'a str,
    pub annotations: &'a [Annotation],
    pub truth: &'a [(u32, Option<BoundingBox>)],
    pub aborted: Option<&'a str>,
}

/// Per-object annotation quality pooled into one cell; mean IoU is weighted by truth frames.
pub fn build_annotation_cell(scenario: ScenarioKind, strategy: Strategy, sequences: &[SequenceAnnotations]) -> Result<AnnotationCell> {
    let mut per_object = BTreeMap::new();
    let mut aborted = BTreeMap::new();
    let (mut iou_sum, mut n) = (0.0, 0usize);
    for s in sequences {
        let q = annotation_quality_boxes(s.annotations, s.truth)?;
        iou_sum += q.mean_iou * q.n_truth as f64;
        n += q.n_truth;
        per_object.insert(s.label.to_string(), q);
        if let Some(e) = s.aborted {
            aborted.insert(s.label.to_string(), e.to_string());
        }
    }
    let map = per_object.values().map(|q| q.ap).sum::<f64>() / per_object.len().max(1) as f64;
    Ok(AnnotationCell { scenario, strategy, mean_iou: if n > 0 { iou_sum / n as f64 } else { 0.0 }, map, per_object, aborted })
}

/// Annotates every scenario with every strategy, then trains one detector per size split and
/// scores it on fresh constrained sequences.
pub fn run_comparison(cfg: &ComparisonConfig) -> Result<EvalReport> {
    let objects = cfg.object_specs()?;
    let run_id = cfg.run_id()?;
    let tests = if cfg.detection { test_set(&objects, cfg)? } else { Vec::new() };
    let mut annotation = Vec::new();
    let mut detection = Vec::new();
    for &scenario in &cfg.scenarios {
        let mut acquired: Vec<Vec<AcquiredSequence>> = vec![Vec::new(); cfg.strategies.len()];
        let mut truths = Vec::new();
        for (i, obj) in objects.iter().enumerate() {
            let seed = sequence_seed(cfg.train_seed, scenario, i);
            let script = ScenarioScript::generate(scenario, obj.clone(), seed, cfg.train_frames);
            let train = cfg.detection.then_some(&cfg.train);
            let (runs, truth) = acquire_sequence(&script, &cfg.strategies, &cfg.annotator, train)?;
            for (k, r) in runs.into_iter().enumerate() {
                acquired[k].push(r);
            }
            truths.push(truth);
        }
        for (k, &strategy) in cfg.strategies.iter().enumerate() {
            let sequences: Vec<SequenceAnnotations> = objects
                .iter()
                .enumerate()
                .map(|(i, obj)| SequenceAnnotations {
                    label: &obj.label,
                    annotations: &acquired[k][i].annotations,
                    truth: &truths[i],
                    aborted: acquired[k][i].aborted.as_deref(),
                })
                .collect();
            let cell = build_annotation_cell(scenario, strategy, &sequences)?;
            log::info!("{} {}: annotation mAP {:.3}", scenario.name(), strategy.name(), cell.map);
            annotation.push(cell);
            if !cfg.detection {
                continue;
            }
            for &split in &cfg.size_splits {
                let members: Vec<usize> = (0..objects.len()).filter(|&i| objects[i].size_class == split).collect();
                if members.is_empty() {
                    continue;
                }
                detection.push(evaluate_split(scenario, strategy, split, &members, &objects, &acquired[k], &tests, cfg)?);
            }
        }
    }
    Ok(EvalReport { format: "cuelearn-eval".into(), version: REPORT_VERSION, run_id, config: cfg.clone(), annotation, detection })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_split(
    scenario: ScenarioKind,
    strategy: Strategy,
    split: SizeClass,
    members: &[usize],
    objects: &[ObjectSpec],
    acquired: &[AcquiredSequence],
    tests: &[TestFrame],
    cfg: &ComparisonConfig,
) -> Result<DetectionCell> {
    let samples: Vec<FrameSamples> = members.iter().flat_map(|&i| acquired[i].samples.iter().cloned()).collect();
    let all: Vec<String> = members.iter().map(|&i| objects[i].label.clone()).collect();
    // classes whose annotation produced nothing cannot be trained and score zero
    let trainable: Vec<String> =
        all.iter().filter(|l| samples.iter().any(|s| &s.label == *l && !s.positives.is_empty())).cloned().collect();
    let model = if trainable.is_empty() { None } else { Some(train_detector(&samples, &trainable, &cfg.train)?) };
    let (map, per_class) = score_detector(model.as_ref(), &all, tests)?;
    log::info!("{} {} {}: detection mAP {:.3}", scenario.name(), strategy.name(), split.name(), map);
    Ok(DetectionCell { scenario, strategy, split, map, per_class })
}
