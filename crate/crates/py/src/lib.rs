//! Python bindings: box geometry, score fusion, AP, synthetic data and the model.

use std::path::{Path, PathBuf};

use kban_core::checkpoint::Checkpoint;
use kban_core::scene::{load_scenes, parse_scenes, write_scenes};
use kban_core::synth::{Split, SyntheticWorld};
use kban_core::{BoundingBox, Error, InferenceConfig, KnowledgeBase, RunConfig, Trainer};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, x: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(x).map_err(|e| err(e.into()))?)
}

/// A JSON string, or any object `json.dumps` accepts.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn bbox(b: [f64; 4]) -> PyResult<BoundingBox> {
    BoundingBox::new(b[0], b[1], b[2], b[3]).map_err(err)
}

fn config(overrides: Option<Vec<String>>, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut all: Vec<String> = seed
        .map(|s| ["synth.seed", "train.seed", "model.init_seed"].map(|k| format!("{k}={s}")).to_vec())
        .unwrap_or_default();
    all.extend(overrides.unwrap_or_default());
    RunConfig::resolve(None, &all).map_err(err)
}

/// Intersection over union of two `[x1, y1, x2, y2]` boxes.
#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(kban_core::iou(&bbox(a)?, &bbox(b)?))
}

#[pyfunction]
fn position_code(b: [f64; 4], width: u32, height: u32) -> PyResult<[f64; 5]> {
    kban_core::position_code(&bbox(b)?, width, height).map_err(err)
}

#[pyfunction]
fn fuse(s_h: f64, s_o: f64, s_r: f64, s_c: f64) -> PyResult<f64> {
    kban_core::fuse(s_h, s_o, s_r, s_c).map_err(err)
}

/// All-points AP of a ranked list of true/false positive flags; `None` without ground truth.
#[pyfunction]
fn average_precision(flags: Vec<bool>, num_gt: usize) -> Option<f64> {
    kban_core::average_precision(&flags, num_gt)
}

/// Write synthetic `train/val/test.jsonl` and `kb.json` to `out_dir`; returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=None, overrides=None))]
fn generate(py: Python<'_>, out_dir: PathBuf, seed: Option<u64>, overrides: Option<Vec<String>>) -> PyResult<Py<PyDict>> {
    let cfg = config(overrides, seed)?;
    let world = SyntheticWorld::new(cfg.synth.clone()).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| err(e.into()))?;
    let paths = PyDict::new(py);
    for (split, n, name) in [
        (Split::Train, cfg.synth.train_scenes, "train"),
        (Split::Val, cfg.synth.val_scenes, "val"),
        (Split::Test, cfg.synth.test_scenes, "test"),
    ] {
        let path = out_dir.join(format!("{name}.jsonl"));
        write_scenes(&path, &world.split(split, n)).map_err(err)?;
        paths.set_item(name, path)?;
    }
    let kb = out_dir.join("kb.json");
    world.kb.save(&kb).map_err(err)?;
    paths.set_item("kb", kb)?;
    Ok(paths.unbind())
}

#[pyclass(name = "Model", module = "kban")]
struct PyModel {
    model: kban_core::Model,
    iteration: u64,
    seed: u64,
    velocity: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl PyModel {
    /// Fresh model over the knowledge base at `kb_path`; `overrides` use `model.*` keys.
    #[new]
    #[pyo3(signature = (kb_path, overrides=None, seed=None))]
    fn new(kb_path: PathBuf, overrides: Option<Vec<String>>, seed: Option<u64>) -> PyResult<Self> {
        let cfg = config(overrides, seed)?;
        let kb = KnowledgeBase::load(&kb_path).map_err(err)?;
        Ok(Self {
            model: kban_core::Model::new(cfg.model, kb).map_err(err)?,
            iteration: 0,
            seed: cfg.train.seed,
            velocity: None,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            model: c.model,
            iteration: c.iteration,
            seed: c.seed,
            velocity: c.velocity,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            model: self.model.clone(),
            iteration: self.iteration,
            seed: self.seed,
            velocity: self.velocity.clone(),
        }
        .save(&path)
        .map_err(err)
    }

    #[getter]
    fn num_verbs(&self) -> usize {
        self.model.num_verbs()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.count_params("")
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Train until `train.iterations` (an absolute count, so repeated calls continue).
    #[pyo3(signature = (train_path, val_path=None, overrides=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_path: PathBuf,
        val_path: Option<PathBuf>,
        overrides: Option<Vec<String>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut cfg = config(overrides, None)?;
        let train = load_scenes(&train_path).map_err(err)?;
        let val = val_path.as_deref().map(load_scenes).transpose().map_err(err)?.unwrap_or_default();
        if self.iteration > 0 {
            cfg.train.seed = self.seed;
        }
        let mut trainer = Trainer::new(cfg.train).map_err(err)?;
        trainer.iteration = self.iteration;
        if let Some(v) = self.velocity.take() {
            trainer.optimizer.set_velocity(v);
        }
        let summary = trainer.run(&mut self.model, &train, &val, |_, _, _| Ok(()));
        self.iteration = trainer.iteration;
        self.seed = trainer.config.seed;
        self.velocity = trainer.optimizer.velocity().map(<[Vec<f64>]>::to_vec);
        let summary = summary.map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("iteration", summary.iteration)?;
        d.set_item("stopped_early", summary.stopped_early)?;
        d.set_item("best_val", summary.best_val)?;
        d.set_item("last_train_loss", summary.last_train_loss)?;
        Ok(d)
    }

    /// Scored triplets for one scene (a dict or JSON string), highest score first.
    #[pyo3(signature = (scene, t_human=None, t_object=None, suppression_threshold=None))]
    fn detect<'py>(
        &self,
        py: Python<'py>,
        scene: &Bound<'py, PyAny>,
        t_human: Option<f64>,
        t_object: Option<f64>,
        suppression_threshold: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let scenes = parse_scenes(&json_text(scene)?).map_err(err)?;
        let [scene] = &scenes[..] else {
            return Err(PyValueError::new_err(format!("expected one scene, got {}", scenes.len())));
        };
        let d = InferenceConfig::default();
        let cfg = InferenceConfig {
            t_human: t_human.unwrap_or(d.t_human),
            t_object: t_object.unwrap_or(d.t_object),
            suppression_threshold: suppression_threshold.unwrap_or(d.suppression_threshold),
        };
        RunConfig {
            inference: cfg,
            ..RunConfig::default()
        }
        .validate()
        .map_err(err)?;
        serialize(py, &self.model.detect(scene, 0, &cfg).map_err(err)?)
    }

    /// Role mAP report on a scene file, at default thresholds.
    fn evaluate<'py>(&self, py: Python<'py>, scenes_path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let scenes = load_scenes(Path::new(&scenes_path)).map_err(err)?;
        let dets = self.model.detect_all(&scenes, &InferenceConfig::default()).map_err(err)?;
        serialize(py, &kban_core::evaluate(&dets, &scenes, self.model.num_verbs()).map_err(err)?)
    }
}

#[pymodule]
fn kban(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(position_code, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
