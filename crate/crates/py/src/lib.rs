//! Python bindings. Matrices cross the boundary as lists of row lists and
//! heads as `(layer, head)` tuples.

use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use objdino_core::decoding::{greedy_decode, Branch, GuidanceMode, LogitStream};
use objdino_core::discovery;
use objdino_core::heads;
use objdino_core::metrics::{self, BBox, BinaryOutcome, CaptionRecord, Synonyms};
use objdino_core::similarity::{self, EnsembleWeights};
use objdino_core::store::{self, ActivationDump, Component, DumpHeader};
use objdino_core::synthetic::{default_planted, CorpusSpec};
use objdino_core::{AffinityScale, Error, HeadId, Matrix, PipelineConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f32>> {
    m.row_iter().map(<[f32]>::to_vec).collect()
}

fn heads_of(pairs: Vec<(usize, usize)>) -> Vec<HeadId> {
    pairs.into_iter().map(HeadId::from).collect()
}

fn pairs_of(heads: &[HeadId]) -> Vec<(usize, usize)> {
    heads.iter().map(|h| (h.layer, h.head)).collect()
}

fn component(name: &str) -> PyResult<Component> {
    match name {
        "q" | "query" => Ok(Component::Query),
        "k" | "key" => Ok(Component::Key),
        "v" | "value" => Ok(Component::Value),
        _ => Err(PyValueError::new_err(format!("unknown component {name:?}"))),
    }
}

fn bbox(b: [f64; 4]) -> PyResult<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(to_py)
}

/// Pipeline hyperparameters. Every keyword defaults to the library default.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (*, tau=None, weights=None, k=None, theta=None, tau_cut=None, epsilon=None, affinity="cosine", alpha=None, mode="additive", max_new_tokens=None, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        tau: Option<f32>,
        weights: Option<(f64, f64, f64)>,
        k: Option<usize>,
        theta: Option<f64>,
        tau_cut: Option<f64>,
        epsilon: Option<f64>,
        affinity: &str,
        alpha: Option<f64>,
        mode: &str,
        max_new_tokens: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = PipelineConfig::default();
        if let Some(v) = tau {
            c.tau = v;
        }
        if let Some((q, k, v)) = weights {
            c.weights = EnsembleWeights::new(q, k, v).map_err(to_py)?;
        }
        if let Some(v) = k {
            c.k_clusters = v;
        }
        if let Some(v) = theta {
            c.theta = v;
        }
        if let Some(v) = tau_cut {
            c.tau_cut = v;
        }
        if let Some(v) = epsilon {
            c.epsilon = v;
        }
        c.affinity_scale = match affinity {
            "cosine" => AffinityScale::Cosine,
            "raw" => AffinityScale::Raw,
            _ => return Err(PyValueError::new_err(format!("unknown affinity scale {affinity:?}"))),
        };
        if let Some(v) = alpha {
            c.alpha = v;
        }
        c.mode = mode.parse::<GuidanceMode>().map_err(to_py)?;
        if let Some(v) = max_new_tokens {
            c.max_new_tokens = v;
        }
        if let Some(v) = seed {
            c.seed = v;
        }
        c.validate().map_err(to_py)?;
        Ok(Self { inner: c })
    }

    #[getter]
    fn tau(&self) -> f32 {
        self.inner.tau
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k_clusters
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

fn config_or_default(cfg: Option<PyConfig>) -> PipelineConfig {
    cfg.map(|c| c.inner).unwrap_or_default()
}

/// One image's per-head query/key/value patch tokens.
#[pyclass(name = "Dump", frozen)]
struct PyDump {
    inner: ActivationDump,
}

#[pymethods]
impl PyDump {
    /// `tensors` is a flat list of `N × d` row lists in layer, head, q/k/v order.
    #[new]
    fn new(
        layers: usize,
        heads: usize,
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
        tensors: Vec<Vec<Vec<f32>>>,
    ) -> PyResult<Self> {
        let head_dim = tensors.first().and_then(|t| t.first()).map_or(0, Vec::len);
        let header = DumpHeader::for_grid(layers, heads, head_dim, grid_h, grid_w, patch_size);
        let mats = tensors
            .iter()
            .map(|t| Matrix::from_rows(t))
            .collect::<objdino_core::Result<Vec<_>>>()
            .map_err(to_py)?;
        Ok(Self {
            inner: ActivationDump::new(header, mats).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: store::read_dump(path).map_err(to_py)?,
        })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        store::write_dump(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.header().layers
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.header().heads
    }

    #[getter]
    fn patches(&self) -> usize {
        self.inner.header().patches
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.header().head_dim
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        let h = self.inner.header();
        (h.grid_h, h.grid_w)
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.header().patch_size
    }

    fn tensor(&self, layer: usize, head: usize, component: &str) -> PyResult<Vec<Vec<f32>>> {
        let id = self.checked(layer, head)?;
        Ok(rows_of(self.inner.tensor(id, self::component(component)?)))
    }

    /// Row-stochastic similarity of one component, or the weighted ensemble
    /// when `component` is `"ens"`.
    #[pyo3(signature = (layer, head, component="ens", config=None))]
    fn similarity(
        &self,
        layer: usize,
        head: usize,
        component: &str,
        config: Option<PyConfig>,
    ) -> PyResult<Vec<Vec<f32>>> {
        let id = self.checked(layer, head)?;
        let cfg = config_or_default(config);
        let map = if component == "ens" {
            similarity::head_ensemble(&self.inner, id, cfg.tau, &cfg.weights)
        } else {
            similarity::component_similarity(self.inner.tensor(id, self::component(component)?), cfg.tau)
        }
        .map_err(to_py)?;
        Ok(rows_of(map.matrix()))
    }

    fn __repr__(&self) -> String {
        let h = self.inner.header();
        format!(
            "Dump(layers={}, heads={}, grid={}x{}, head_dim={})",
            h.layers, h.heads, h.grid_h, h.grid_w, h.head_dim
        )
    }
}

impl PyDump {
    fn checked(&self, layer: usize, head: usize) -> PyResult<HeadId> {
        let id = HeadId::new(layer, head);
        if !self.inner.header().contains(id) {
            return Err(to_py(Error::HeadOutOfBounds { layer, head }));
        }
        Ok(id)
    }
}

/// Object-centric heads chosen for one image or a dataset.
#[pyclass(name = "Selection", frozen, from_py_object)]
#[derive(Clone)]
struct PySelection {
    inner: heads::HeadSelection,
}

#[pymethods]
impl PySelection {
    #[getter]
    fn heads(&self) -> Vec<(usize, usize)> {
        pairs_of(&self.inner.heads)
    }

    #[getter]
    fn object_cluster(&self) -> usize {
        self.inner.object_cluster
    }

    #[getter]
    fn final_layer_counts(&self) -> Vec<usize> {
        self.inner.final_layer_counts.clone()
    }

    #[getter]
    fn images(&self) -> usize {
        self.inner.images
    }

    fn frequency(&self, layer: usize, head: usize) -> f64 {
        self.inner.frequency(HeadId::new(layer, head))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: heads::HeadSelection::from_json(text).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Selection(heads={:?}, images={})", self.heads(), self.inner.images)
    }
}

/// Synthetic dumps with a planted object. Returns `(dump, box)` pairs where
/// `box` is the inclusive patch box `(row_min, col_min, row_max, col_max)`.
#[pyfunction]
#[pyo3(signature = (seed, images, grid, layers=12, heads=12, planted=None, noise=None))]
fn generate(
    seed: u64,
    images: usize,
    grid: usize,
    layers: usize,
    heads: usize,
    planted: Option<Vec<(usize, usize)>>,
    noise: Option<f64>,
) -> PyResult<Vec<(PyDump, [usize; 4])>> {
    let mut spec = CorpusSpec::new(seed, images, grid);
    spec.layers = layers;
    spec.heads = heads;
    spec.planted_heads = match planted {
        Some(p) => heads_of(p),
        None => default_planted(layers, heads),
    };
    if let Some(n) = noise {
        spec.noise_sigma = n;
    }
    let corpus = spec.generate().map_err(to_py)?;
    Ok(corpus
        .into_iter()
        .map(|(d, gt)| (PyDump { inner: d }, gt.object_box_patches))
        .collect())
}

/// Head selection over one or more dumps.
#[pyfunction]
#[pyo3(signature = (dumps, config=None))]
fn analyze(dumps: Vec<Bound<'_, PyDump>>, config: Option<PyConfig>) -> PyResult<PySelection> {
    let cfg = config_or_default(config);
    cfg.validate().map_err(to_py)?;
    let owned: Vec<ActivationDump> = dumps.iter().map(|d| d.get().inner.clone()).collect();
    let inner = match owned.as_slice() {
        [one] => heads::analyze_image(one, &cfg),
        many => heads::select_over_dataset(many, &cfg),
    }
    .map_err(to_py)?;
    Ok(PySelection { inner })
}

/// Normalized-cut foreground for one dump. Returns a dict with the pixel
/// `bbox`, the boolean `mask` in row-major patch order, the `fiedler` vector
/// and the inverted `saliency` map.
#[pyfunction]
#[pyo3(signature = (dump, selection, config=None))]
fn discover<'py>(
    py: Python<'py>,
    dump: &PyDump,
    selection: &PySelection,
    config: Option<PyConfig>,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let cfg = config_or_default(config);
    let r = discovery::discover(&dump.inner, &selection.inner, &cfg).map_err(to_py)?;
    let out = pyo3::types::PyDict::new(py);
    out.set_item("bbox", r.bbox_pixels)?;
    out.set_item("mask", r.foreground_mask)?;
    out.set_item("fiedler", r.fiedler)?;
    out.set_item("saliency", r.saliency.values)?;
    Ok(out)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(metrics::iou(&bbox(a)?, &bbox(b)?))
}

/// Percent of images whose prediction overlaps some ground-truth box with IoU > 0.5.
#[pyfunction]
fn corloc(preds: HashMap<String, [f64; 4]>, gts: HashMap<String, Vec<[f64; 4]>>) -> PyResult<f64> {
    let p = preds
        .into_iter()
        .map(|(k, b)| Ok((k, bbox(b)?)))
        .collect::<PyResult<HashMap<_, _>>>()?;
    let g = gts
        .into_iter()
        .map(|(k, bs)| Ok((k, bs.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?)))
        .collect::<PyResult<HashMap<_, _>>>()?;
    metrics::corloc(&p, &g).map_err(to_py)
}

/// `(CHAIR_S, CHAIR_I)` in percent from `(mentioned, truth)` word lists.
#[pyfunction]
#[pyo3(signature = (captions, synonyms=None))]
fn chair(
    captions: Vec<(Vec<String>, Vec<String>)>,
    synonyms: Option<HashMap<String, String>>,
) -> PyResult<(f64, f64)> {
    let syn = Synonyms(synonyms.unwrap_or_default());
    let recs: Vec<CaptionRecord> = captions
        .into_iter()
        .map(|(m, t)| {
            syn.canonicalize(&CaptionRecord {
                mentioned_objects: m.into_iter().collect(),
                ground_truth_objects: t.into_iter().collect(),
            })
        })
        .collect();
    let s = metrics::chair(&recs).map_err(to_py)?;
    Ok((s.chair_s, s.chair_i))
}

/// `(accuracy, precision, recall, f1)` in percent from `(predicted, actual)` pairs.
#[pyfunction]
fn pope(outcomes: Vec<(bool, bool)>) -> PyResult<(f64, f64, f64, f64)> {
    let o: Vec<BinaryOutcome> = outcomes
        .into_iter()
        .map(|(predicted, actual)| BinaryOutcome { predicted, actual })
        .collect();
    let s = metrics::pope_scores(&o).map_err(to_py)?;
    Ok((s.accuracy, s.precision, s.recall, s.f1))
}

/// Greedy decoding over two recorded per-step logit streams.
#[pyfunction]
#[pyo3(signature = (standard, guidance, eos, config=None))]
fn decode(
    standard: Vec<Vec<f32>>,
    guidance: Vec<Vec<f32>>,
    eos: usize,
    config: Option<PyConfig>,
) -> PyResult<Vec<usize>> {
    let cfg = config_or_default(config);
    let vocab = standard.first().map_or(0, Vec::len);
    let s = LogitStream::new(standard, vocab, eos, Branch::Standard).map_err(to_py)?;
    let g = LogitStream::new(guidance, vocab, eos, Branch::Guidance).map_err(to_py)?;
    greedy_decode(&s, &g, &cfg.guidance()).map_err(to_py)
}

#[pymodule]
fn objdino(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDump>()?;
    m.add_class::<PySelection>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(discover, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(corloc, m)?)?;
    m.add_function(wrap_pyfunction!(chair, m)?)?;
    m.add_function(wrap_pyfunction!(pope, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    Ok(())
}
