use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cuelearn::annotation::{annotations_from_jsonl, annotations_to_jsonl, AnnotatorInput, AnnotatorStep, SequenceAnnotator, Strategy};
use cuelearn::detection::{frame_samples, train_detector, ClassRegistry, DetectionModel, TrainConfig};
use cuelearn::eval::{
    build_annotation_cell, run_comparison, score_detector, sequence_seed, ComparisonConfig, DetectionCell, EvalReport,
    SequenceAnnotations, TestFrame, REPORT_VERSION,
};
use cuelearn::io::{sha256_hex, write_dataset, write_file, DatasetManifest, FileEntry, LoadedSequence, MANIFEST_FILE};
use cuelearn::orchestrator::{log_to_jsonl, run_session, Action, PipelineConfig, SocialModels, StateKind};
use cuelearn::simworld::{catalog, object_by_label, render_sequence, ScenarioKind, ScenarioScript, SizeClass};
use cuelearn::{Annotation, AnnotationSource, BoundingBox};
use serde::{Deserialize, Serialize};

use crate::config::{load_script, SessionConfig};
use crate::error::{CliError, CliResult, Classify};

pub const REPORT_FORMAT: &str = "cuelearn-eval";
pub const RUN_FORMAT: &str = "cuelearn-run";
pub const MODEL_FILE: &str = "model.cdet";
pub const MODEL_META_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const EVENTS_FILE: &str = "events.jsonl";

pub fn annotations_file(strategy: Strategy) -> String {
    format!("annotations.{}.jsonl", strategy.name())
}

pub fn annotation_report_file(strategy: Strategy) -> String {
    format!("annotation-report.{}.json", strategy.name())
}

/// Provenance written next to every command's artifacts as `run.<command>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub config: SessionConfig,
    /// Input role to sha256 of the file that identifies it.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<FileEntry>,
}

/// JSON sidecar of `model.cdet`: the class registry plus how the model was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub registry: ClassRegistry,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub scenario: ScenarioKind,
    pub strategy: Strategy,
    pub split: SizeClass,
    /// Every class of the split, including those without usable annotations, which the
    /// model cannot detect and which score zero.
    pub labels: Vec<String>,
    pub dataset_seed: u64,
    pub frame_count: u32,
    pub annotations_sha256: String,
    pub train: TrainConfig,
}

/// Artifact writer bound to one output directory; refuses to overwrite without `force`.
pub struct Output {
    pub dir: PathBuf,
    force: bool,
    written: Vec<FileEntry>,
}

impl Output {
    pub fn new(dir: &Path, force: bool) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), force, written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let entry = write_file(&self.dir.join(name), bytes, self.force)?;
        self.written.push(entry);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `run.<command>.json` listing everything written so far.
    pub fn finish(mut self, command: &str, cfg: &SessionConfig, inputs: BTreeMap<String, String>) -> CliResult<PathBuf> {
        let meta = RunMetadata {
            format: RUN_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: cfg.portable(),
            inputs,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json(&format!("run.{command}.json"), &meta)?;
        Ok(self.dir)
    }
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> CliResult<DatasetManifest> {
    DatasetManifest::load(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn manifest_sha(dir: &Path) -> CliResult<String> {
    Ok(sha256_hex(&read_bytes(&dir.join(MANIFEST_FILE))?))
}

fn report(config: ComparisonConfig, annotation: Vec<cuelearn::eval::AnnotationCell>, detection: Vec<DetectionCell>) -> CliResult<EvalReport> {
    Ok(EvalReport { format: REPORT_FORMAT.into(), version: REPORT_VERSION, run_id: config.run_id()?, config, annotation, detection })
}

/// Catalog objects selected by the configuration.
fn objects(cfg: &SessionConfig) -> CliResult<Vec<cuelearn::simworld::ObjectSpec>> {
    if cfg.objects.is_empty() {
        return Ok(catalog());
    }
    cfg.objects.iter().map(|l| object_by_label(l).config()).collect()
}

/// Training scripts of `scenario`, seeded as the comparison harness seeds them.
pub fn generated_scripts(cfg: &SessionConfig, scenario: ScenarioKind) -> CliResult<Vec<ScenarioScript>> {
    objects(cfg)?
        .into_iter()
        .enumerate()
        .map(|(i, obj)| {
            let mut s = ScenarioScript::generate(scenario, obj, sequence_seed(cfg.seed, scenario, i), cfg.n_frames);
            s.fps = cfg.fps;
            s.validate().config()?;
            Ok(s)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// simulate

pub fn simulate(cfg: &SessionConfig, force: bool) -> CliResult<PathBuf> {
    let scripts = match &cfg.script {
        Some(path) => vec![load_script(path)?],
        None => generated_scripts(cfg, cfg.scenario)?,
    };
    let manifest = write_dataset(&cfg.out, &scripts, cfg.seed, force)?;
    log::info!("rendered {} sequences of {} frames into {}", manifest.sequences.len(), manifest.frame_count, cfg.out.display());
    let inputs = match &cfg.script {
        Some(path) => BTreeMap::from([("script".to_string(), sha256_hex(&read_bytes(path)?))]),
        None => BTreeMap::new(),
    };
    let mut out = Output::new(&cfg.out, force)?;
    out.written.push(FileEntry { path: MANIFEST_FILE.into(), sha256: manifest_sha(&cfg.out)?, bytes: std::fs::metadata(cfg.out.join(MANIFEST_FILE))?.len() });
    out.finish("simulate", cfg, inputs)
}

// ---------------------------------------------------------------------------
// annotate

/// Annotations of one dataset sequence with the teacher and hand taken from the recorded truth.
struct AnnotatedSequence {
    label: String,
    annotations: Vec<Annotation>,
    truth: Vec<(u32, Option<BoundingBox>)>,
    aborted: Option<String>,
}

fn annotate_sequence(seq: &LoadedSequence, cfg: &SessionConfig) -> CliResult<AnnotatedSequence> {
    let label = seq.entry.label.clone();
    let mut annotator = Some(SequenceAnnotator::new(label.clone(), cfg.annotator).config()?);
    let mut out = AnnotatedSequence { label, annotations: Vec::new(), truth: Vec::new(), aborted: None };
    for item in seq.frames().data()? {
        let (frame, gt) = item.data()?;
        out.truth.push((gt.frame_index, gt.true_object_box));
        let Some(a) = annotator.as_mut() else { continue };
        let teacher = gt.teacher().map(|p| (&p.keypoints, gt.held_hand));
        match a.step(&AnnotatorInput { frame: &frame, teacher }) {
            Ok(AnnotatorStep::Annotated(x)) => out.annotations.push(x),
            Ok(_) => {}
            Err(e) => {
                log::warn!("{}: {e}", out.label);
                out.aborted = Some(e.to_string());
                annotator = None;
            }
        }
    }
    Ok(out)
}

pub fn annotate(cfg: &SessionConfig, dataset: &Path, force: bool) -> CliResult<PathBuf> {
    let manifest = load_dataset(dataset)?;
    let mut sequences = Vec::new();
    for entry in &manifest.sequences {
        let seq = LoadedSequence::load(dataset, entry).data()?;
        sequences.push(annotate_sequence(&seq, cfg)?);
    }
    let all: Vec<Annotation> = sequences.iter().flat_map(|s| s.annotations.iter().cloned()).collect();
    let views: Vec<SequenceAnnotations> = sequences
        .iter()
        .map(|s| SequenceAnnotations { label: &s.label, annotations: &s.annotations, truth: &s.truth, aborted: s.aborted.as_deref() })
        .collect();
    let cell = build_annotation_cell(manifest.scenario, cfg.strategy, &views)?;
    let config = ComparisonConfig {
        scenarios: vec![manifest.scenario],
        strategies: vec![cfg.strategy],
        size_splits: Vec::new(),
        objects: manifest.classes.clone(),
        train_seed: manifest.seed,
        test_seed: cfg.test_seed,
        train_frames: manifest.frame_count,
        test_frames: cfg.test_frames,
        annotator: cfg.annotator,
        train: cfg.train.clone(),
        detection: false,
    };
    let rep = report(config, vec![cell], Vec::new())?;

    let mut out = Output::new(&cfg.out, force)?;
    out.write(&annotations_file(cfg.strategy), annotations_to_jsonl(&all)?.as_bytes())?;
    out.write_json(&annotation_report_file(cfg.strategy), &rep)?;
    let inputs = BTreeMap::from([("dataset".to_string(), manifest_sha(dataset)?)]);
    out.finish(&format!("annotate.{}", cfg.strategy.name()), cfg, inputs)
}

// ---------------------------------------------------------------------------
// train

fn strategy_of(anns: &[Annotation], fallback: Strategy) -> Strategy {
    let mut sources = anns.iter().map(|a| a.source);
    match sources.next() {
        Some(first) if sources.all(|s| s == first) => match first {
            AnnotationSource::HandProximal => Strategy::HandProximal,
            AnnotationSource::DistanceBased => Strategy::DistanceBased,
            AnnotationSource::Manual => fallback,
        },
        _ => fallback,
    }
}

pub fn train(cfg: &SessionConfig, dataset: &Path, annotations: &Path, split: SizeClass, force: bool) -> CliResult<PathBuf> {
    let manifest = load_dataset(dataset)?;
    let ann_bytes = read_bytes(annotations)?;
    let anns = annotations_from_jsonl(std::str::from_utf8(&ann_bytes).data()?).data()?;
    let mut by_frame: BTreeMap<(&str, u32), &Annotation> = BTreeMap::new();
    for a in &anns {
        if !manifest.classes.contains(&a.label) {
            return Err(CliError::Data(format!("annotation label `{}` is not in the dataset class registry", a.label)));
        }
        by_frame.insert((a.label.as_str(), a.frame_index), a);
    }
    let members: Vec<_> = manifest.sequences.iter().filter(|s| s.size_class == split).collect();
    if members.is_empty() {
        return Err(CliError::Data(format!("dataset has no {} objects", split.name())));
    }
    let stride = cfg.train.frame_stride.max(1);
    let mut samples = Vec::new();
    for entry in &members {
        let seq = LoadedSequence::load(dataset, entry).data()?;
        for item in seq.frames().data()? {
            let (frame, _) = item.data()?;
            if let Some(a) = by_frame.get(&(entry.label.as_str(), frame.index)) {
                samples.push(frame_samples(&frame, a, (frame.index as usize).is_multiple_of(stride), &cfg.train)?);
            }
        }
    }
    let labels: Vec<String> = members.iter().map(|s| s.label.clone()).collect();
    let trainable: Vec<String> =
        labels.iter().filter(|l| samples.iter().any(|s| &s.label == *l && !s.positives.is_empty())).cloned().collect();
    if trainable.is_empty() {
        return Err(CliError::Data(format!("no usable annotations for the {} split", split.name())));
    }
    let model = train_detector(&samples, &trainable, &cfg.train)?;
    let meta = ModelMeta {
        scenario: manifest.scenario,
        strategy: strategy_of(&anns, cfg.strategy),
        split,
        labels,
        dataset_seed: manifest.seed,
        frame_count: manifest.frame_count,
        annotations_sha256: sha256_hex(&ann_bytes),
        train: cfg.train.clone(),
    };
    let mut out = Output::new(&cfg.out, force)?;
    write_model(&mut out, &model, meta)?;
    let inputs = BTreeMap::from([("dataset".to_string(), manifest_sha(dataset)?), ("annotations".to_string(), sha256_hex(&ann_bytes))]);
    out.finish("train", cfg, inputs)
}

fn write_model(out: &mut Output, model: &DetectionModel, meta: ModelMeta) -> CliResult<()> {
    out.write(MODEL_FILE, &model.to_bytes())?;
    out.write_json(MODEL_META_FILE, &ModelFile { registry: model.registry(), meta })
}

/// Reads `model.cdet` with its sidecar; any inconsistency is a data error.
pub fn load_model(dir: &Path) -> CliResult<(DetectionModel, ModelFile)> {
    let meta_bytes = read_bytes(&dir.join(MODEL_META_FILE))?;
    let file: ModelFile = serde_json::from_slice(&meta_bytes).data()?;
    let model = DetectionModel::from_bytes(&read_bytes(&dir.join(MODEL_FILE))?, &file.registry).data()?;
    Ok((model, file))
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate(cfg: &SessionConfig, model_dir: &Path, testset: &Path, force: bool) -> CliResult<PathBuf> {
    let (model, file) = load_model(model_dir)?;
    let manifest = load_dataset(testset)?;
    let missing: Vec<&String> = file.meta.labels.iter().filter(|l| !manifest.classes.contains(l)).collect();
    if !missing.is_empty() {
        return Err(CliError::Data(format!("class registry mismatch: test set lacks {missing:?}")));
    }
    let mut tests = Vec::new();
    for entry in manifest.sequences.iter().filter(|s| file.meta.labels.contains(&s.label)) {
        let seq = LoadedSequence::load(testset, entry).data()?;
        for item in seq.frames().data()? {
            let (frame, gt) = item.data()?;
            tests.push(TestFrame::new(&frame, &entry.label, gt.true_object_box, &model.proposals));
        }
    }
    let (map, per_class) = score_detector(Some(&model), &file.meta.labels, &tests).data()?;
    let m = &file.meta;
    let cell = DetectionCell { scenario: m.scenario, strategy: m.strategy, split: m.split, map, per_class };
    let config = ComparisonConfig {
        scenarios: vec![m.scenario],
        strategies: vec![m.strategy],
        size_splits: vec![m.split],
        objects: m.labels.clone(),
        train_seed: m.dataset_seed,
        test_seed: manifest.seed,
        train_frames: m.frame_count,
        test_frames: manifest.frame_count,
        annotator: cuelearn::annotation::AnnotatorConfig { strategy: m.strategy, ..cfg.annotator },
        train: m.train.clone(),
        detection: true,
    };
    let rep = report(config, Vec::new(), vec![cell])?;
    log::info!("{} {} {}: mAP {:.3}", m.scenario.name(), m.strategy.name(), m.split.name(), map);

    let mut out = Output::new(&cfg.out, force)?;
    write_report(&mut out, &rep)?;
    let inputs = BTreeMap::from([
        ("model".to_string(), sha256_hex(&read_bytes(&model_dir.join(MODEL_FILE))?)),
        ("testset".to_string(), manifest_sha(testset)?),
    ]);
    out.finish("evaluate", cfg, inputs)
}

fn write_report(out: &mut Output, rep: &EvalReport) -> CliResult<()> {
    out.write_json(REPORT_FILE, rep)?;
    out.write(REPORT_CSV_FILE, rep.to_csv().as_bytes())
}

// ---------------------------------------------------------------------------
// run-pipeline

/// Headline numbers of one interaction session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub final_state: StateKind,
    pub label: String,
    pub frames: u32,
    pub annotations: usize,
    pub engaged_at: Option<f64>,
    pub model_written: bool,
    pub detection_frames: usize,
    pub abort_reason: Option<String>,
}

pub fn run_pipeline(cfg: &SessionConfig, force: bool) -> CliResult<PathBuf> {
    let (script, inputs) = match &cfg.script {
        Some(path) => (load_script(path)?, BTreeMap::from([("script".to_string(), sha256_hex(&read_bytes(path)?))])),
        None => {
            let obj = object_by_label(&cfg.session_object).config()?;
            let mut s = ScenarioScript::session(obj, cfg.seed, cfg.machine.acquire_frames as u32);
            s.fps = cfg.fps;
            s.validate().config()?;
            (s, BTreeMap::new())
        }
    };
    let pipeline = PipelineConfig {
        machine: cuelearn::orchestrator::MachineConfig { fps: script.fps, ..cfg.machine },
        track: cfg.track,
        annotator: cfg.annotator,
        train: cfg.train.clone(),
    };
    log::info!("training social classifiers");
    let models = SocialModels::train(&cfg.social)?;
    log::info!("replaying a {}-frame session", script.n_frames);
    let outcome = run_session(&script, &models, &pipeline)?;

    let actions = || outcome.log.iter().flat_map(|r| r.actions.iter().map(move |a| (r, a)));
    let abort_reason = actions().find_map(|(_, a)| match a {
        Action::Abort { reason } => Some(reason.clone()),
        _ => None,
    });
    let summary = SessionSummary {
        final_state: outcome.final_state.state,
        label: script.object.label.clone(),
        frames: script.n_frames,
        annotations: outcome.annotations.len(),
        engaged_at: actions().find(|(_, a)| **a == Action::Engage).map(|(r, _)| r.time),
        model_written: outcome.detector.is_some(),
        detection_frames: actions().filter(|(_, a)| matches!(a, Action::Detections { .. })).count(),
        abort_reason: abort_reason.clone(),
    };

    // annotation quality over the acquisition window only
    let window = outcome.annotations.first().zip(outcome.annotations.last()).map(|(a, b)| a.frame_index..=b.frame_index);
    let truth: Vec<(u32, Option<BoundingBox>)> = match &window {
        Some(w) => render_sequence(&script)?
            .map(|(_, gt)| (gt.frame_index, gt.true_object_box))
            .filter(|(f, _)| w.contains(f))
            .collect(),
        None => Vec::new(),
    };
    let seq = SequenceAnnotations { label: &script.object.label, annotations: &outcome.annotations, truth: &truth, aborted: abort_reason.as_deref() };
    let cell = build_annotation_cell(script.kind, cfg.strategy, &[seq])?;
    let config = ComparisonConfig {
        scenarios: vec![script.kind],
        strategies: vec![cfg.strategy],
        size_splits: Vec::new(),
        objects: vec![script.object.label.clone()],
        train_seed: script.seed,
        test_seed: cfg.test_seed,
        train_frames: script.n_frames,
        test_frames: cfg.test_frames,
        annotator: cfg.annotator,
        train: cfg.train.clone(),
        detection: false,
    };
    let rep = report(config, vec![cell], Vec::new())?;

    let mut out = Output::new(&cfg.out, force)?;
    out.write(EVENTS_FILE, log_to_jsonl(&outcome.log)?.as_bytes())?;
    let ann_text = annotations_to_jsonl(&outcome.annotations)?;
    out.write(&annotations_file(cfg.strategy), ann_text.as_bytes())?;
    if let Some(model) = &outcome.detector {
        let meta = ModelMeta {
            scenario: script.kind,
            strategy: cfg.strategy,
            split: script.object.size_class,
            labels: vec![script.object.label.clone()],
            dataset_seed: script.seed,
            frame_count: script.n_frames,
            annotations_sha256: sha256_hex(ann_text.as_bytes()),
            train: cfg.train.clone(),
        };
        write_model(&mut out, model, meta)?;
    }
    write_report(&mut out, &rep)?;
    out.write_json("summary.json", &summary)?;
    let dir = out.finish("run-pipeline", cfg, inputs)?;
    if summary.final_state == StateKind::Aborted {
        return Err(CliError::Abort(abort_reason.unwrap_or_else(|| "session aborted".into())));
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// report and compare

/// Reports named on the command line. A directory contributes every JSON file in it that is
/// an evaluation report, in file-name order.
pub fn collect_reports(paths: &[PathBuf]) -> CliResult<Vec<(PathBuf, EvalReport)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .data()?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            for f in files {
                if let Ok(r) = serde_json::from_slice::<EvalReport>(&read_bytes(&f)?) {
                    if r.format == REPORT_FORMAT {
                        out.push((f, r));
                    }
                }
            }
        } else {
            let r: EvalReport = serde_json::from_slice(&read_bytes(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            out.push((p.clone(), r));
        }
    }
    if out.is_empty() {
        return Err(CliError::Data("no evaluation reports found".into()));
    }
    Ok(out)
}

pub fn merge_reports(cfg: &SessionConfig, runs: &[PathBuf], force: bool) -> CliResult<(PathBuf, String)> {
    let found = collect_reports(runs)?;
    let mut inputs = BTreeMap::new();
    for (path, r) in &found {
        inputs.insert(format!("report:{}", r.run_id), sha256_hex(&read_bytes(path)?));
    }
    let reports: Vec<EvalReport> = found.into_iter().map(|(_, r)| r).collect();
    let merged = EvalReport::merge(&reports).data()?;
    let table = merged.summary_table();
    let mut out = Output::new(&cfg.out, force)?;
    write_report(&mut out, &merged)?;
    out.write(SUMMARY_FILE, table.as_bytes())?;
    Ok((out.finish("report", cfg, inputs)?, table))
}

/// The comparison grid for `compare`; explicit flags narrow it.
pub fn comparison_config(cfg: &SessionConfig, scenario: Option<ScenarioKind>, strategy: Option<Strategy>) -> ComparisonConfig {
    ComparisonConfig {
        scenarios: scenario.map_or_else(|| cfg.compare.scenarios.clone(), |s| vec![s]),
        strategies: strategy.map_or_else(|| cfg.compare.strategies.clone(), |s| vec![s]),
        size_splits: cfg.compare.size_splits.clone(),
        objects: cfg.objects.clone(),
        train_seed: cfg.seed,
        test_seed: cfg.test_seed,
        train_frames: cfg.n_frames,
        test_frames: cfg.test_frames,
        annotator: cfg.annotator,
        train: cfg.train.clone(),
        detection: cfg.compare.detection,
    }
}

pub fn compare(cfg: &SessionConfig, grid: &ComparisonConfig, force: bool) -> CliResult<(PathBuf, String)> {
    let rep = run_comparison(grid)?;
    let table = rep.summary_table();
    let mut out = Output::new(&cfg.out, force)?;
    write_report(&mut out, &rep)?;
    out.write(SUMMARY_FILE, table.as_bytes())?;
    Ok((out.finish("compare", cfg, BTreeMap::new())?, table))
}
