//! Python bindings: record store, curation steps, metrics and inference.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! Python dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

use iconoforge::curate::{apply_decision, find_near_duplicates, flag_fragments, remove_exact_duplicates};
use iconoforge::dataset::{apply_keyword_labels, stratified_split, AnnotationSet, KeywordConfig, MetadataField, Provenance};
use iconoforge::eval;
use iconoforge::explain::compute_cam;
use iconoforge::fixture::{make_synthetic_fixture, FixtureOptions};
use iconoforge::ingest::{dhash, hamming, ingest, load_manifest, LocalFetcher};
use iconoforge::model::TrainedModel;
use iconoforge::refine::accept_proposal;
use iconoforge::review::{now_timestamp, Decision, ReviewKind, ReviewStatus};
use iconoforge::{Error, IconClass};

fn err(e: Error) -> PyErr {
    match e {
        Error::UnknownItem(_) | Error::UnknownRecord(_) | Error::UnknownClass(_) => PyKeyError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::MalformedPayload { .. } | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn class(code: &str) -> PyResult<IconClass> {
    IconClass::parse(code).ok_or_else(|| PyKeyError::new_err(format!("unknown icon class {code:?}")))
}

fn open_image(path: &str) -> PyResult<image::DynamicImage> {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?
        .decode()
        .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))
}

/// `(code, display name)` for the ten classes, in index order.
#[pyfunction]
fn classes() -> Vec<(&'static str, &'static str)> {
    IconClass::ALL.iter().map(|c| (c.code(), c.display_name())).collect()
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    eval::f1_score(precision, recall)
}

/// Average precision of one class; `None` when there are no positives.
#[pyfunction]
fn average_precision(scores: Vec<f64>, truths: Vec<bool>) -> PyResult<Option<f64>> {
    eval::average_precision(&scores, &truths).map_err(err)
}

/// 64-bit difference hash of an image file.
#[pyfunction]
#[pyo3(name = "dhash")]
fn dhash_file(path: &str) -> PyResult<u64> {
    Ok(dhash(&open_image(path)?))
}

#[pyfunction]
#[pyo3(name = "hamming")]
fn hamming_distance(a: u64, b: u64) -> u32 {
    hamming(a, b)
}

/// Writes the synthetic glyph corpus; returns the number of images.
#[pyfunction]
#[pyo3(signature = (out_dir, n_per_class=20, seed=1))]
fn make_fixture(out_dir: PathBuf, n_per_class: usize, seed: u64) -> PyResult<usize> {
    Ok(make_synthetic_fixture(&out_dir, &FixtureOptions::new(n_per_class, seed)).map_err(err)?.images.len())
}

/// Stratified split of `{record_id: [class codes]}`; returns
/// `{record_id: "train" | "val" | "test"}`.
#[pyfunction]
#[pyo3(signature = (labels, ratios=(0.8, 0.1, 0.1), seed=42))]
fn split(labels: BTreeMap<String, Vec<String>>, ratios: (f64, f64, f64), seed: u64) -> PyResult<BTreeMap<String, String>> {
    let mut sets = Vec::with_capacity(labels.len());
    for (id, codes) in labels {
        let cs = codes.iter().map(|c| class(c)).collect::<PyResult<Vec<_>>>()?;
        sets.push(AnnotationSet::with_classes(id, &cs, Provenance::Keyword));
    }
    let out = stratified_split(&sets, [ratios.0, ratios.1, ratios.2], seed).map_err(err)?;
    Ok(out.assignments.into_iter().map(|a| (a.record_id, a.split.to_string())).collect())
}

/// Event-sourced record store.
#[pyclass(module = "iconoforge")]
struct Store {
    inner: iconoforge::store::Store,
}

#[pymethods]
impl Store {
    /// Opens (creating when missing) a store directory.
    #[new]
    fn new(dir: PathBuf) -> PyResult<Self> {
        Ok(Store {
            inner: iconoforge::store::Store::open(&dir).map_err(err)?,
        })
    }

    /// Imports a manifest; relative uris resolve against `base_dir`.
    fn ingest(&mut self, py: Python<'_>, manifest: PathBuf, source: &str, base_dir: PathBuf) -> PyResult<Py<PyAny>> {
        let m = load_manifest(&manifest, source).map_err(err)?;
        let images = self.inner.images_dir().expect("store on disk");
        let report = ingest(&mut self.inner, &m, &LocalFetcher { base_dir }, &images).map_err(err)?;
        Ok(to_py(py, &report)?.unbind())
    }

    /// Removes exact duplicates; returns how many records were removed.
    fn remove_exact_duplicates(&mut self) -> PyResult<usize> {
        Ok(remove_exact_duplicates(&mut self.inner, &now_timestamp()).map_err(err)?.removed_count())
    }

    /// Queues near-duplicate pairs; returns how many were new.
    #[pyo3(signature = (threshold=iconoforge::curate::DEFAULT_NEAR_DUP_THRESHOLD))]
    fn queue_near_duplicates(&mut self, threshold: u32) -> PyResult<usize> {
        let items = find_near_duplicates(self.inner.state(), threshold).map_err(err)?;
        self.inner.enqueue(items).map_err(err)
    }

    /// Queues fragment candidates; returns how many were new.
    #[pyo3(signature = (keywords=None))]
    fn queue_fragments(&mut self, keywords: Option<Vec<String>>) -> PyResult<usize> {
        let words = keywords
            .unwrap_or_else(|| iconoforge::curate::DEFAULT_FRAGMENT_KEYWORDS.iter().map(|s| s.to_string()).collect());
        let items = flag_fragments(self.inner.state(), &words).map_err(err)?;
        self.inner.enqueue(items).map_err(err)
    }

    /// Applies keyword labels (default keyword table unless a TOML file is
    /// given); returns the number of labeled records.
    #[pyo3(signature = (keywords=None))]
    fn label(&mut self, keywords: Option<PathBuf>) -> PyResult<usize> {
        let cfg = match keywords {
            Some(p) => KeywordConfig::load(&p).map_err(err)?,
            None => KeywordConfig::defaults(),
        };
        let labeling = apply_keyword_labels(self.inner.state().active_records(), &cfg, &MetadataField::ALL).map_err(err)?;
        let n = labeling.annotations.iter().filter(|a| !a.is_empty()).count();
        self.inner.set_base_labels(labeling.annotations).map_err(err)?;
        Ok(n)
    }

    /// Pending review items, optionally of one kind.
    #[pyo3(signature = (kind=None))]
    fn pending(&self, py: Python<'_>, kind: Option<&str>) -> PyResult<Py<PyAny>> {
        let kind = kind
            .map(|k| ReviewKind::parse(k).ok_or_else(|| PyValueError::new_err(format!("unknown kind {k:?}"))))
            .transpose()?;
        let items: Vec<_> = self
            .inner
            .state()
            .pending_items()
            .filter(|i| kind.is_none_or(|k| i.kind == k))
            .collect();
        Ok(to_py(py, &items)?.unbind())
    }

    /// Records a reviewer decision (`"accept"` or `"reject"`). Repeating the
    /// same decision is a no-op and returns `True`; a different one raises.
    #[pyo3(signature = (item_id, decision, payload=None))]
    fn decide(&mut self, item_id: &str, decision: &str, payload: Option<&Bound<'_, PyAny>>) -> PyResult<bool> {
        let d = Decision::parse(decision).ok_or_else(|| PyValueError::new_err("decision must be accept or reject"))?;
        let payload = payload.map(from_py).transpose()?.filter(|p| !p.is_null());
        let item = self.inner.state().items.get(item_id).cloned().ok_or_else(|| err(Error::UnknownItem(item_id.into())))?;
        if item.is_pending() {
            let at = now_timestamp();
            if item.kind == ReviewKind::LabelProposal && d == Decision::Accept && payload.is_none() {
                accept_proposal(&mut self.inner, item_id, &at).map_err(err)?;
            } else {
                apply_decision(&mut self.inner, item_id, d, payload, &at).map_err(err)?;
            }
            return Ok(false);
        }
        let wanted = if d == Decision::Accept { ReviewStatus::Accepted } else { ReviewStatus::Rejected };
        if item.status != wanted || item.decision_payload != payload {
            return Err(PyRuntimeError::new_err(format!(
                "item {item_id} was already {} with a different decision",
                item.status.as_str()
            )));
        }
        Ok(true)
    }

    /// Labels of an active record as class codes.
    fn labels(&self, record_id: &str) -> PyResult<Vec<&'static str>> {
        let st = self.inner.state();
        if !st.records.contains_key(record_id) {
            return Err(PyKeyError::new_err(record_id.to_string()));
        }
        Ok(st.annotation(record_id).map(|a| a.classes().map(|c| c.code()).collect()).unwrap_or_default())
    }

    fn active_ids(&self) -> Vec<String> {
        self.inner.state().active_records().map(|r| r.id.clone()).collect()
    }

    /// Whether replaying the decision log reproduces the current state.
    fn verify_replay(&self) -> PyResult<bool> {
        Ok(self.inner.replay().map_err(err)?.canonical_bytes() == self.inner.state().canonical_bytes())
    }

    fn __len__(&self) -> usize {
        self.inner.state().records.len()
    }
}

/// A trained classifier checkpoint.
#[pyclass(module = "iconoforge")]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: TrainedModel::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config.input_size
    }

    /// `{"scores": {code: p}, "predicted": code | None, "top_class": code}`.
    #[pyo3(signature = (image_path, threshold=0.5))]
    fn predict(&self, py: Python<'_>, image_path: &str, threshold: f64) -> PyResult<Py<PyAny>> {
        let p = self.inner.predict_image(image_path, &open_image(image_path)?, threshold).map_err(err)?;
        let scores: BTreeMap<&str, f64> = IconClass::ALL.iter().map(|c| (c.code(), p.score(*c))).collect();
        let out = serde_json::json!({
            "scores": scores,
            "predicted": p.predicted.map(|c| c.code()),
            "top_class": p.top_class().code(),
        });
        Ok(to_py(py, &out)?.unbind())
    }

    /// Raw class activation map as rows of floats.
    fn cam(&self, image_path: &str, class_code: &str) -> PyResult<Vec<Vec<f64>>> {
        let p = self.inner.predict_image(image_path, &open_image(image_path)?, 0.5).map_err(err)?;
        let cam = compute_cam(&p, class(class_code)?).map_err(err)?;
        Ok(cam.raw_map.chunks(p.map_w).map(<[f64]>::to_vec).collect())
    }
}

#[pymodule]
#[pyo3(name = "iconoforge")]
fn iconoforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(classes, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(dhash_file, m)?)?;
    m.add_function(wrap_pyfunction!(hamming_distance, m)?)?;
    m.add_function(wrap_pyfunction!(make_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_class::<Store>()?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
