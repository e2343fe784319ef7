//! Layered session configuration: defaults, then a TOML or JSON file, then `CUELEARN_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use cuelearn::annotation::{AnnotatorConfig, Strategy};
use cuelearn::detection::TrainConfig;
use cuelearn::orchestrator::{MachineConfig, SocialTrainingConfig};
use cuelearn::perception::TrackConfig;
use cuelearn::simworld::{object_by_label, ScenarioKind, ScenarioScript, SizeClass};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult, Classify};

/// Prefix of environment overrides. `CUELEARN_SEED=4` sets `seed`; a double underscore
/// descends into a section, so `CUELEARN_TRAIN__FRAME_STRIDE=2` sets `train.frame_stride`.
pub const ENV_PREFIX: &str = "CUELEARN_";

/// Keys owned by a top-level field and copied into a section; setting them in the section
/// is rejected instead of silently ignored.
const DERIVED_KEYS: [(&str, &str); 2] = [("annotator", "strategy"), ("machine", "fps")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    /// Scenario rendered by `simulate`.
    pub scenario: ScenarioKind,
    /// Scenario script file (TOML or JSON). When set, `simulate` renders it instead of the
    /// generated catalog scripts and `run-pipeline` replays it instead of the default session.
    pub script: Option<PathBuf>,
    /// Annotation strategy; also copied into `annotator.strategy`.
    pub strategy: Strategy,
    /// Base seed of training sequences and the interaction session.
    pub seed: u64,
    /// Base seed of the constrained test sequences.
    pub test_seed: u64,
    /// Catalog labels to render; empty means the whole catalog.
    pub objects: Vec<String>,
    /// Object the teacher shows in the default `run-pipeline` session.
    pub session_object: String,
    pub out: PathBuf,
    /// Camera rate of generated scripts; also copied into `machine.fps`.
    pub fps: f64,
    /// Frames per generated training sequence.
    pub n_frames: u32,
    /// Frames per test sequence in `compare`.
    pub test_frames: u32,
    pub compare: CompareConfig,
    pub annotator: AnnotatorConfig,
    pub train: TrainConfig,
    pub machine: MachineConfig,
    pub track: TrackConfig,
    pub social: SocialTrainingConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Constrained,
            script: None,
            strategy: Strategy::HandProximal,
            seed: 1,
            test_seed: 1001,
            objects: Vec::new(),
            session_object: "006_mustard_bottle".into(),
            out: PathBuf::from("out"),
            fps: 7.0,
            n_frames: 300,
            test_frames: 100,
            compare: CompareConfig::default(),
            annotator: AnnotatorConfig::default(),
            train: TrainConfig::default(),
            machine: MachineConfig::default(),
            track: TrackConfig::default(),
            social: SocialTrainingConfig::default(),
        }
    }
}

/// Grid swept by `compare`. `--scenario` and `--strategy` narrow it to one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub scenarios: Vec<ScenarioKind>,
    pub strategies: Vec<Strategy>,
    pub size_splits: Vec<SizeClass>,
    /// Train and score detectors; false scores annotations only.
    pub detection: bool,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioKind::ALL.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            size_splits: SizeClass::ALL.to_vec(),
            detection: true,
        }
    }
}

/// Values given on the command line; they win over every other layer.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub scenario: Option<ScenarioKind>,
    pub out: Option<PathBuf>,
}

impl SessionConfig {
    /// Resolves all layers. `env` is passed in so tests need not touch the process environment.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &FlagOverrides,
    ) -> CliResult<SessionConfig> {
        let mut user = Value::Object(Map::new());
        if let Some(path) = file {
            merge(&mut user, read_config_file(path)?);
        }
        let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        vars.sort();
        for (key, raw) in vars {
            set_path(&mut user, &env_path(&key)?, env_value(&raw))?;
        }
        for (section, key) in DERIVED_KEYS {
            if user.get(section).and_then(|s| s.get(key)).is_some() {
                return Err(CliError::Config(format!("`{section}.{key}` is derived; set the top-level `{key}` instead")));
            }
        }
        let mut value = serde_json::to_value(SessionConfig::default())?;
        merge(&mut value, user);
        let mut cfg: SessionConfig = serde_json::from_value(value).config()?;
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = flags.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = flags.scenario {
            cfg.scenario = v;
        }
        if let Some(v) = &flags.out {
            cfg.out = v.clone();
        }
        cfg.annotator.strategy = cfg.strategy;
        cfg.machine.fps = cfg.fps;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(CliError::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.n_frames == 0 || self.test_frames == 0 {
            return Err(CliError::Config("n_frames and test_frames must be positive".into()));
        }
        for label in self.objects.iter().chain([&self.session_object]) {
            object_by_label(label).config()?;
        }
        self.annotator.validate().config()?;
        self.machine.validate().config()?;
        self.train.minibootstrap.validate().config()?;
        Ok(())
    }

    /// Copy suitable for run metadata: machine-local paths reduced to file names so reruns
    /// into another directory record identical metadata.
    pub fn portable(&self) -> SessionConfig {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.script = c.script.as_ref().and_then(|p| p.file_name()).map(PathBuf::from);
        c
    }
}

/// Parses a TOML file, or JSON when the extension is `.json`.
fn read_config_file(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse_structured(path, &text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn parse_structured(path: &Path, text: &str) -> Result<Value, String> {
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        let t: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        serde_json::to_value(t).map_err(|e| e.to_string())
    }
}

/// Loads a scenario script from TOML or JSON and validates it.
pub fn load_script(path: &Path) -> CliResult<ScenarioScript> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value = parse_structured(path, &text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let script: ScenarioScript =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    script.validate().config()?;
    Ok(script)
}

fn env_path(key: &str) -> CliResult<Vec<String>> {
    let rest = &key[ENV_PREFIX.len()..];
    let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Config(format!("malformed override variable {key}")));
    }
    Ok(path)
}

/// Environment values are JSON when they parse as such, plain strings otherwise.
fn env_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], v: Value) -> CliResult<()> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Config(format!("`{}` is not a section", path[..i].join("."))));
        };
        if i + 1 == path.len() {
            map.insert(key.clone(), v);
            return Ok(());
        }
        node = map.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Recursive object merge; non-object values in `top` replace those in `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn write(name: &str, text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = SessionConfig::load(None, env(&[]), &FlagOverrides::default()).unwrap();
        assert_eq!(cfg, SessionConfig::default());
    }

    #[test]
    fn layers_apply_in_order() {
        let (_d, path) = write("c.toml", "seed = 5\nn_frames = 20\n[train]\nframe_stride = 4\n[machine]\nacquire_frames = 50\n");
        let e = env(&[("CUELEARN_N_FRAMES", "30"), ("CUELEARN_TRAIN__FRAME_STRIDE", "2"), ("CUELEARN_STRATEGY", "distance-based")]);
        let flags = FlagOverrides { seed: Some(9), ..Default::default() };
        let cfg = SessionConfig::load(Some(&path), e, &flags).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.n_frames, 30);
        assert_eq!(cfg.train.frame_stride, 2);
        assert_eq!(cfg.machine.acquire_frames, 50);
        assert_eq!(cfg.strategy, Strategy::DistanceBased);
        assert_eq!(cfg.annotator.strategy, Strategy::DistanceBased);
        // untouched siblings keep their defaults
        assert_eq!(cfg.train.nms_iou, TrainConfig::default().nms_iou);
        assert_eq!(cfg.track, TrackConfig::default());
    }

    #[test]
    fn json_files_are_accepted() {
        let (_d, path) = write("c.json", r#"{"scenario": "with-distractors", "objects": ["025_mug"]}"#);
        let cfg = SessionConfig::load(Some(&path), env(&[]), &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.scenario, ScenarioKind::WithDistractors);
        assert_eq!(cfg.objects, vec!["025_mug".to_string()]);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        let cases: Vec<(&str, Vec<(String, String)>)> = vec![
            ("colour = 3\n", env(&[])),
            ("[train]\nstride = 3\n", env(&[])),
            ("", env(&[("CUELEARN_BOGUS", "1")])),
            ("", env(&[("CUELEARN_SEED__X", "1")])),
            ("[annotator]\nstrategy = \"distance-based\"\n", env(&[])),
            ("fps = 0.0\n", env(&[])),
            ("objects = [\"nope\"]\n", env(&[])),
            ("seed = \"one\"\n", env(&[])),
            ("scenario = \"outdoors\"\n", env(&[])),
            ("not toml [", env(&[])),
        ];
        for (text, e) in cases {
            let (_d, path) = write("c.toml", text);
            let err = SessionConfig::load(Some(&path), e.clone(), &FlagOverrides::default()).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text:?} {e:?}: {err}");
        }
        let err = SessionConfig::load(Some(Path::new("/nonexistent/c.toml")), env(&[]), &FlagOverrides::default());
        assert!(matches!(err, Err(CliError::Config(_))));
    }

    #[test]
    fn portable_copy_drops_local_paths() {
        let cfg = SessionConfig { out: "/tmp/x".into(), script: Some("/a/b/s.toml".into()), ..Default::default() };
        let p = cfg.portable();
        assert_eq!(p.out, PathBuf::new());
        assert_eq!(p.script, Some(PathBuf::from("s.toml")));
    }
}
