//! Python extension module `cuelearn`: boxes and metrics, the SVM and FALKON learners,
//! scripted annotation runs and full interaction sessions.

use engine::annotation::{AnnotatorConfig, Strategy};
use engine::classifiers::{svm_train, SvmModel};
use engine::detection::{falkon_train, FalkonModel, FalkonParams};
use engine::eval::{acquire_sequence, annotation_quality_boxes, FrameDetection};
use engine::orchestrator::{run_session, Action, PipelineConfig, SocialModels, SocialTrainingConfig};
use engine::simworld::{catalog, object_by_label, ScenarioKind, ScenarioScript};
use engine::{Annotation, AnnotationSource, Detection};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: engine::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scenario(s: &str) -> PyResult<ScenarioKind> {
    ScenarioKind::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown scenario `{s}`")))
}

fn strategy(s: &str) -> PyResult<Strategy> {
    Strategy::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown strategy `{s}`")))
}

/// Axis-aligned image box, half-open in pixel coordinates.
#[pyclass(frozen, eq, from_py_object, name = "BoundingBox")]
#[derive(Clone, PartialEq)]
struct PyBox(engine::BoundingBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> PyResult<Self> {
        engine::BoundingBox::new(x_min, y_min, x_max, y_max).map(PyBox).map_err(err)
    }

    #[getter]
    fn x_min(&self) -> f64 {
        self.0.x_min
    }

    #[getter]
    fn y_min(&self) -> f64 {
        self.0.y_min
    }

    #[getter]
    fn x_max(&self) -> f64 {
        self.0.x_max
    }

    #[getter]
    fn y_max(&self) -> f64 {
        self.0.y_max
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        engine::iou(&self.0, &other.0)
    }

    fn to_tuple(&self) -> (f64, f64, f64, f64) {
        (self.0.x_min, self.0.y_min, self.0.x_max, self.0.y_max)
    }

    fn __repr__(&self) -> String {
        format!("BoundingBox({}, {}, {}, {})", self.0.x_min, self.0.y_min, self.0.x_max, self.0.y_max)
    }
}

/// Per-label greedy suppression over `(box, label, score)` triples.
#[pyfunction]
#[pyo3(signature = (detections, iou_thresh = 0.3))]
fn nms(detections: Vec<(PyBox, String, f64)>, iou_thresh: f64) -> Vec<(PyBox, String, f64)> {
    let dets: Vec<Detection> = detections.into_iter().map(|(b, label, score)| Detection { bbox: b.0, label, score }).collect();
    engine::detection::nms(&dets, iou_thresh).into_iter().map(|d| (PyBox(d.bbox), d.label, d.score)).collect()
}

/// 101-point interpolated AP of `(frame, box, score)` detections against `(frame, box)` truth.
#[pyfunction]
#[pyo3(signature = (detections, truth, iou_thresh = 0.5))]
fn average_precision(detections: Vec<(u32, PyBox, f64)>, truth: Vec<(u32, PyBox)>, iou_thresh: f64) -> f64 {
    let dets: Vec<FrameDetection> = detections
        .into_iter()
        .map(|(frame_index, b, score)| FrameDetection { frame_index, detection: Detection { bbox: b.0, label: "object".into(), score } })
        .collect();
    let gts: Vec<Annotation> = truth
        .into_iter()
        .map(|(frame_index, b)| Annotation { frame_index, bbox: b.0, label: "object".into(), source: AnnotationSource::Manual, pixel_count: 0 })
        .collect();
    engine::eval::average_precision(&dets, &gts, iou_thresh).ap
}

/// Binary RBF-kernel SVM trained by SMO; labels are +1 and -1.
#[pyclass(frozen, name = "Svm")]
struct PySvm(SvmModel);

#[pymethods]
impl PySvm {
    #[staticmethod]
    fn train(x: Vec<Vec<f64>>, y: Vec<f64>, c: f64, gamma: f64) -> PyResult<Self> {
        svm_train(&x, &y, c, gamma).map(PySvm).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        SvmModel::from_bytes(bytes).map(PySvm).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn decision(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.decision(&x).map_err(err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.predict(&x).map_err(err)
    }

    fn accuracy(&self, x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<f64> {
        self.0.accuracy(&x, &y).map_err(err)
    }

    #[getter]
    fn n_support(&self) -> usize {
        self.0.support_vectors.len()
    }

    /// Dual coefficients, `alpha_i * y_i` per support vector.
    #[getter]
    fn dual_coefs(&self) -> Vec<f64> {
        self.0.dual_coefs.clone()
    }
}

/// Nystrom kernel ridge regressor solved by preconditioned iterations.
#[pyclass(frozen, name = "Falkon")]
struct PyFalkon(FalkonModel);

#[pymethods]
impl PyFalkon {
    #[staticmethod]
    #[pyo3(signature = (x, y, lam, sigma = None, centers = None, iterations = 20, seed = 0))]
    fn train(
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
        lam: f64,
        sigma: Option<f64>,
        centers: Option<usize>,
        iterations: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let params = FalkonParams { m: centers, sigma, lambda: lam, t_iters: iterations, seed };
        falkon_train(&x, &y, &params).map(PyFalkon).map_err(err)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        if let Some(bad) = x.iter().find(|r| r.len() != self.0.dim()) {
            return Err(err(engine::Error::DimensionMismatch { expected: self.0.dim(), got: bad.len() }));
        }
        Ok(self.0.decision_batch(&x))
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.0.sigma
    }

    #[getter]
    fn residuals(&self) -> Vec<f64> {
        self.0.residuals.clone()
    }
}

/// Catalog objects as `(label, size class)`.
#[pyfunction]
fn objects() -> Vec<(String, &'static str)> {
    catalog().into_iter().map(|o| (o.label, o.size_class.name())).collect()
}

/// Renders one scripted sequence and annotates it; returns the annotations as
/// `(frame, box)` pairs plus the mean IoU and AP against the true object boxes.
#[pyfunction]
#[pyo3(signature = (label, scenario_kind = "constrained", strategy_name = "hand-proximal", seed = 1, frames = 100))]
fn annotate<'py>(
    py: Python<'py>,
    label: &str,
    scenario_kind: &str,
    strategy_name: &str,
    seed: u64,
    frames: u32,
) -> PyResult<Bound<'py, PyDict>> {
    let object = object_by_label(label).map_err(err)?;
    let script = ScenarioScript::generate(scenario(scenario_kind)?, object, seed, frames);
    let strategy = strategy(strategy_name)?;
    let (runs, truth) = py.detach(|| acquire_sequence(&script, &[strategy], &AnnotatorConfig::default(), None)).map_err(err)?;
    let run = &runs[0];
    let q = annotation_quality_boxes(&run.annotations, &truth).map_err(err)?;
    let out = PyDict::new(py);
    let boxes: Vec<(u32, PyBox)> = run.annotations.iter().map(|a| (a.frame_index, PyBox(a.bbox))).collect();
    out.set_item("annotations", boxes)?;
    out.set_item("mean_iou", q.mean_iou)?;
    out.set_item("ap", q.ap)?;
    out.set_item("aborted", run.aborted.clone())?;
    Ok(out)
}

/// Trains the social models and replays a scripted teaching session for `label`.
#[pyfunction]
#[pyo3(signature = (label, seed = 1, acquire_frames = 300))]
fn run_pipeline<'py>(py: Python<'py>, label: &str, seed: u64, acquire_frames: u32) -> PyResult<Bound<'py, PyDict>> {
    let object = object_by_label(label).map_err(err)?;
    let script = ScenarioScript::session(object, seed, acquire_frames);
    let outcome = py
        .detach(|| {
            let models = SocialModels::train(&SocialTrainingConfig::default())?;
            let mut cfg = PipelineConfig::default();
            cfg.machine.acquire_frames = acquire_frames as usize;
            run_session(&script, &models, &cfg)
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("final_state", format!("{:?}", outcome.final_state.state).to_lowercase())?;
    out.set_item("annotations", outcome.annotations.len())?;
    let engaged = outcome.log.iter().find(|r| r.actions.contains(&Action::Engage)).map(|r| r.time);
    out.set_item("engaged_at", engaged)?;
    out.set_item("model", outcome.detector.map(|m| PyBytes::new(py, &m.to_bytes())))?;
    Ok(out)
}

#[pymodule]
fn cuelearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PySvm>()?;
    m.add_class::<PyFalkon>()?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(objects, m)?)?;
    m.add_function(wrap_pyfunction!(annotate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
