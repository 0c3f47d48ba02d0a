//! Python bindings: label-scheme codec, synthetic corpora, training,
//! prediction and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use osmsl_core::feature_io::{
    load_features, load_scene_map, load_scenes, save_features, save_predictions, save_scenes, save_scheme,
    write_json_file, VideoSequence,
};
use osmsl_core::label_scheme::{LabelScheme, SceneAnnotation};
use osmsl_core::metrics::{eval_seg, evaluate};
use osmsl_core::synth::{generate_corpus, probe_accuracy, split, SynthConfig};
use osmsl_core::trainer::{self, load_checkpoint, save_checkpoint, HeadKind, ModelConfig, TrainConfig};

type Scene = (usize, usize, Option<String>);

fn err(e: osmsl_core::Error) -> PyErr {
    match e {
        osmsl_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_scenes(scheme: &LabelScheme, scenes: &[Scene]) -> PyResult<Vec<SceneAnnotation>> {
    scenes
        .iter()
        .map(|(s, e, c)| {
            let category = c.as_deref().map(|n| scheme.category_id(n)).transpose().map_err(err)?;
            Ok(SceneAnnotation::new(*s, *e, category))
        })
        .collect()
}

fn from_scenes(scheme: &LabelScheme, scenes: &[SceneAnnotation]) -> Vec<Scene> {
    scenes
        .iter()
        .map(|s| {
            let name = s.category.and_then(|c| scheme.category_name(c)).map(str::to_string);
            (s.start_shot, s.end_shot, name)
        })
        .collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Tag vocabulary and the scene <-> tag codec.
#[pyclass(name = "LabelScheme", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyScheme {
    inner: LabelScheme,
}

#[pymethods]
impl PyScheme {
    /// Segmentation-only scheme with five tags.
    #[staticmethod]
    fn ss() -> Self {
        PyScheme { inner: LabelScheme::ss() }
    }

    /// Segmentation plus classification over `categories`.
    #[staticmethod]
    fn ssc(categories: Vec<String>) -> PyResult<Self> {
        Ok(PyScheme {
            inner: LabelScheme::ssc(&categories).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyScheme {
            inner: osmsl_core::feature_io::load_scheme(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scheme(path, &self.inner).map_err(err)
    }

    #[getter]
    fn categories(&self) -> Vec<String> {
        self.inner.categories().to_vec()
    }

    #[getter]
    fn num_tags(&self) -> usize {
        self.inner.num_tags()
    }

    fn tag_names(&self) -> Vec<String> {
        self.inner.tag_table().into_iter().map(|t| self.inner.tag_to_string(t)).collect()
    }

    fn is_legal_transition(&self, from: &str, to: &str) -> PyResult<bool> {
        let a = self.inner.parse_tag(from).map_err(err)?;
        let b = self.inner.parse_tag(to).map_err(err)?;
        Ok(self.inner.is_legal_transition(a, b))
    }

    /// Scenes as `(start_shot, end_shot, category)` tuples to one tag per shot.
    fn encode(&self, scenes: Vec<Scene>, n_shots: usize) -> PyResult<Vec<String>> {
        let scenes = to_scenes(&self.inner, &scenes)?;
        let tags = self.inner.encode(&scenes, n_shots).map_err(err)?;
        Ok(tags.into_iter().map(|t| self.inner.tag_to_string(t)).collect())
    }

    fn decode(&self, tags: Vec<String>) -> PyResult<Vec<Scene>> {
        let tags = self.parse(&tags)?;
        let scenes = self.inner.decode(&tags).map_err(err)?;
        Ok(from_scenes(&self.inner, &scenes))
    }

    /// Nearest grammatical sequence for an arbitrary tag sequence.
    fn repair(&self, tags: Vec<String>) -> PyResult<Vec<String>> {
        let tags = self.parse(&tags)?;
        Ok(self.inner.repair(&tags).into_iter().map(|t| self.inner.tag_to_string(t)).collect())
    }

    fn __repr__(&self) -> String {
        format!("LabelScheme({})", self.inner.describe())
    }
}

impl PyScheme {
    fn parse(&self, tags: &[String]) -> PyResult<Vec<osmsl_core::label_scheme::LinkTag>> {
        tags.iter().map(|s| self.inner.parse_tag(s).map_err(err)).collect()
    }
}

/// A trained model loaded from or written to a checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: trainer::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn scheme(&self) -> PyScheme {
        PyScheme {
            inner: self.inner.scheme.clone(),
        }
    }

    /// Predicted scenes per video id for every video in a features file.
    #[pyo3(signature = (features, threads = 1))]
    fn predict(&self, py: Python<'_>, features: PathBuf, threads: usize) -> PyResult<BTreeMap<String, Vec<Scene>>> {
        let predicted = py.detach(|| predict_file(&self.inner, &features, threads)).map_err(err)?;
        Ok(predicted
            .iter()
            .map(|v| {
                let scenes = v.scenes.as_deref().unwrap_or_default();
                (v.video_id.clone(), from_scenes(&self.inner.scheme, scenes))
            })
            .collect())
    }

    /// Writes predictions in the scenes-file format.
    #[pyo3(signature = (features, out, threads = 1))]
    fn predict_to_file(&self, py: Python<'_>, features: PathBuf, out: PathBuf, threads: usize) -> PyResult<()> {
        py.detach(|| {
            let predicted = predict_file(&self.inner, &features, threads)?;
            save_predictions(&out, &predicted, &self.inner.scheme)
        })
        .map_err(err)
    }
}

fn predict_file(model: &trainer::Model, features: &Path, threads: usize) -> osmsl_core::Result<Vec<VideoSequence>> {
    model.predict(&load_features(features)?, threads.max(1))
}

/// Generates a synthetic corpus into `out` (train/val/test subdirectories)
/// and returns the nearest-class-mean probe accuracy.
#[pyfunction]
#[pyo3(signature = (out, seed = None, n_videos = None, config = None))]
fn synth(out: PathBuf, seed: Option<u64>, n_videos: Option<usize>, config: Option<&str>) -> PyResult<Option<f64>> {
    let mut cfg: SynthConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = n_videos {
        cfg.n_videos = v;
    }
    let corpus = generate_corpus(&cfg).map_err(err)?;
    let (train, val, test) = split(&corpus.videos, cfg.split, cfg.seed).map_err(err)?;
    let io = |e: std::io::Error| PyIOError::new_err(format!("{}: {e}", out.display()));
    std::fs::create_dir_all(&out).map_err(io)?;
    write_json_file(out.join("synth_config.json"), &cfg).map_err(err)?;
    save_scheme(out.join("scheme.json"), &corpus.scheme).map_err(err)?;
    for (name, videos) in [("train", &train), ("val", &val), ("test", &test)] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(io)?;
        save_features(dir.join("features.jsonl"), videos).map_err(err)?;
        save_scenes(dir.join("scenes.json"), videos, &corpus.scheme).map_err(err)?;
    }
    Ok((!train.is_empty() && !test.is_empty()).then(|| probe_accuracy(&train, &test)))
}

/// Trains a model and returns it with its loss curve as a list of dicts.
/// `train_config` and `model_config` are JSON objects overriding defaults.
#[pyfunction]
#[pyo3(signature = (features, scenes, scheme, head = "osmsl", train_config = None, model_config = None))]
fn train<'py>(
    py: Python<'py>,
    features: PathBuf,
    scenes: PathBuf,
    scheme: &PyScheme,
    head: &str,
    train_config: Option<&str>,
    model_config: Option<&str>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let kind: HeadKind = head.parse().map_err(err)?;
    let tc: TrainConfig = match train_config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    let mc: ModelConfig = match model_config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => ModelConfig::default(),
    };
    tc.validate().map_err(err)?;
    let scheme = scheme.inner.clone();
    let (model, curves) = py
        .detach(|| {
            let videos = load_scenes(&scenes, load_features(&features)?, &scheme)?;
            let dims = videos
                .first()
                .map(VideoSequence::dims)
                .ok_or_else(|| osmsl_core::Error::Config("no videos to train on".into()))?;
            let mut model = trainer::Model::new(kind, &scheme, &mc, dims, tc.seed)?;
            let curves = trainer::train(&mut model, &videos, &tc)?;
            Ok((model, curves))
        })
        .map_err(err)?;
    let records = curves
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("task", &r.task)?;
            d.set_item("raw_loss", r.raw_loss)?;
            d.set_item("normalized_loss", r.normalized_loss)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: model }, records))
}

/// Scores a predictions file against a ground-truth scenes file; returns the
/// report as a dict.
#[pyfunction]
fn evaluate_files<'py>(py: Python<'py>, pred: PathBuf, gt: PathBuf, scheme: &PyScheme) -> PyResult<Bound<'py, PyAny>> {
    let scheme = &scheme.inner;
    let pred = load_scene_map(pred, scheme).map_err(err)?;
    let gt = load_scene_map(gt, scheme).map_err(err)?;
    let mut pairs = Vec::with_capacity(gt.len());
    for (id, g) in &gt {
        let p = pred
            .get(id)
            .ok_or_else(|| PyValueError::new_err(format!("no prediction for video {id:?}")))?;
        pairs.push((p.as_slice(), g.as_slice()));
    }
    if let Some(id) = pred.keys().find(|k| !gt.contains_key(*k)) {
        return Err(PyValueError::new_err(format!("prediction for video {id:?} has no ground truth")));
    }
    let report = evaluate(&pairs, scheme, None).map_err(err)?;
    let text = serde_json::to_string(&report.to_json()).map_err(json_err)?;
    json_to_py(py, &text)
}

/// Boundary precision, recall and F1 for one video.
#[pyfunction]
fn segmentation_prf(pred: Vec<(usize, usize)>, gt: Vec<(usize, usize)>) -> PyResult<(f64, f64, f64)> {
    let conv = |v: Vec<(usize, usize)>| v.into_iter().map(|(s, e)| SceneAnnotation::new(s, e, None)).collect::<Vec<_>>();
    let prf = eval_seg(&conv(pred), &conv(gt)).map_err(err)?;
    Ok((prf.precision, prf.recall, prf.f1))
}

#[pymodule]
fn osmsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScheme>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_prf, m)?)?;
    Ok(())
}
