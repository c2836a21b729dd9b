//! Python bindings. Sequences cross the boundary as lists of token ids and
//! masks as lists of floats; heavier results are plain dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tokmask_core::checkpoint::Checkpoint;
use tokmask_core::data::{LabelAssignment, TokenSequence};
use tokmask_core::evaluation::{self, Condition, RenderFormat};
use tokmask_core::losses::{self, AreaBounds};
use tokmask_core::masking::{self, BinaryMask, ClassLayout, SoftMask};
use tokmask_core::tensor::Tensor;

create_exception!(tokmask, TokmaskError, PyException);

fn err(e: tokmask_core::Error) -> PyErr {
    TokmaskError::new_err(e.to_string())
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for tokmask_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn rows_of(t: &Tensor, rows: usize) -> Vec<Vec<f64>> {
    let c = t.cols();
    (0..rows).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(|e| err(e.into()))
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(frozen, module = "tokmask")]
struct Vocabulary(tokmask_core::data::Vocabulary);

#[pymethods]
impl Vocabulary {
    #[new]
    #[pyo3(signature = (k = 4))]
    fn new(k: usize) -> PyResult<Self> {
        tokmask_core::data::Vocabulary::nucleotide(k).py_err().map(Vocabulary)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn tokenize(&self, seq: &str) -> Vec<usize> {
        self.0.tokenize(seq).ids().to_vec()
    }

    fn detokenize(&self, ids: Vec<usize>) -> String {
        self.0.detokenize(&TokenSequence::new(ids))
    }

    fn token_text(&self, id: usize) -> String {
        self.0.token_text(id)
    }

    /// HTML rendering of a soft mask over `ids`.
    fn render_html(&self, ids: Vec<usize>, mask: Vec<f64>) -> PyResult<String> {
        let m = SoftMask::dense(mask).py_err()?;
        evaluation::render_mask(&TokenSequence::new(ids), &m, &self.0, RenderFormat::Html).py_err()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(k={}, size={})", self.0.k(), self.0.size())
    }
}

/// Frozen classifier restored from a checkpoint.
#[pyclass(frozen, module = "tokmask")]
struct Explanandum {
    model: tokmask_core::explanandum::Explanandum,
    vocab_hash: String,
}

#[pymethods]
impl Explanandum {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(&path).py_err()?;
        let vocab_hash = c.vocab_hash.clone();
        Ok(Explanandum {
            model: c.into_explanandum().py_err()?,
            vocab_hash,
        })
    }

    #[getter]
    fn head_classes(&self) -> Vec<usize> {
        self.model.head_classes().to_vec()
    }

    #[getter]
    fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn params_hash(&self) -> String {
        self.model.params().hash()
    }

    /// Per-head class probabilities, optionally with a per-token mask.
    #[pyo3(signature = (ids, mask = None))]
    fn predict_probs(&self, ids: Vec<usize>, mask: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let mask = mask.map(SoftMask::dense).transpose().py_err()?;
        self.model
            .predict_probs(&TokenSequence::new(ids), mask.as_ref())
            .py_err()
    }

    fn embed(&self, ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let x = TokenSequence::new(ids);
        let e = self.model.embed(&x).py_err()?;
        Ok(rows_of(&e, e.rows()))
    }

    /// Drop in true-class probability when each token is removed.
    fn occlusion(&self, ids: Vec<usize>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        evaluation::occlusion_importance(&self.model, &TokenSequence::new(ids), &LabelAssignment(labels)).py_err()
    }
}

#[pyclass(frozen, module = "tokmask")]
struct Explainer(tokmask_core::explainer::Explainer);

#[pymethods]
impl Explainer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path)
            .and_then(Checkpoint::into_explainer)
            .py_err()
            .map(Explainer)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.config().classes()
    }

    /// Per-token, per-class masks: one row of `classes` values per token.
    fn explain(&self, py: Python<'_>, ids: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let x = TokenSequence::new(ids);
        let s = py.detach(|| self.0.explain(&x)).py_err()?;
        Ok(rows_of(&s.values, s.valid_len))
    }

    /// Mask for the true classes of `labels`, as used for evaluation.
    fn target_mask(
        &self,
        py: Python<'_>,
        model: &Explanandum,
        ids: Vec<usize>,
        labels: Vec<usize>,
    ) -> PyResult<Vec<f64>> {
        let x = TokenSequence::new(ids);
        let s = py.detach(|| self.0.explain(&x)).py_err()?;
        let layout = ClassLayout::new(model.model.head_classes());
        let m = masking::target_mask(&s.values, s.valid_len, &layout, &LabelAssignment(labels)).py_err()?;
        Ok(m.values().to_vec())
    }
}

#[pyclass(frozen, module = "tokmask")]
struct EvaluationReport(evaluation::EvaluationReport);

#[pymethods]
impl EvaluationReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| err(e.into()))?;
        evaluation::EvaluationReport::from_json(&text)
            .py_err()
            .map(EvaluationReport)
    }

    #[getter]
    fn head_names(&self) -> Vec<String> {
        self.0.head_names.clone()
    }

    #[getter]
    fn items(&self) -> usize {
        self.0.items
    }

    fn conditions(&self) -> Vec<&'static str> {
        self.0.conditions.iter().map(|c| c.condition.label()).collect()
    }

    /// Balanced accuracy per head. `condition` is a row label or a variant
    /// name such as `"inverted"`.
    fn accuracy(&self, condition: &str) -> PyResult<Vec<f64>> {
        let c = Condition::ALL
            .into_iter()
            .find(|c| c.label() == condition || format!("{c:?}").eq_ignore_ascii_case(condition))
            .ok_or_else(|| TokmaskError::new_err(format!("unknown condition {condition:?}")))?;
        self.0
            .accuracy(c)
            .map(<[f64]>::to_vec)
            .ok_or_else(|| TokmaskError::new_err(format!("condition {condition:?} not evaluated")))
    }

    fn markdown(&self) -> String {
        self.0.markdown()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.0.to_json().py_err()?)
    }
}

#[pyfunction]
#[pyo3(signature = (values, threshold = 0.5))]
fn round_mask(values: Vec<f64>, threshold: f64) -> PyResult<Vec<u32>> {
    let b = masking::round_mask(&SoftMask::dense(values).py_err()?, threshold);
    Ok(b.bits().iter().map(|&x| x as u32).collect())
}

/// `(start, end, important)` runs of a binary mask.
#[pyfunction]
fn segment_chunks(bits: Vec<u8>) -> PyResult<Vec<(usize, usize, bool)>> {
    let n = bits.len();
    let b = BinaryMask::new(bits).py_err()?;
    Ok(masking::segment_chunks(&b, n)
        .0
        .into_iter()
        .map(|c| (c.start, c.end, c.important))
        .collect())
}

#[pyfunction]
fn apply_mask(embeddings: Vec<Vec<f64>>, mask: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let e = matrix(&embeddings)?;
    let out = masking::apply_mask(&e, &SoftMask::dense(mask).py_err()?).py_err()?;
    Ok(rows_of(&out, out.rows()))
}

#[pyfunction]
#[pyo3(signature = (values, min = 0.1, max = 0.5))]
fn bounding_measure(values: Vec<f64>, min: f64, max: f64) -> PyResult<f64> {
    losses::bounding_measure(&values, &AreaBounds::new(min, max).py_err()?).py_err()
}

/// Negative entropy averaged over heads; takes one probability row per head.
#[pyfunction]
fn entropy_loss(probs: Vec<Vec<f64>>) -> PyResult<f64> {
    losses::entropy_loss(&probs).py_err()
}

#[pyfunction]
fn tv_loss(target: Vec<f64>, nontarget: Vec<f64>) -> PyResult<f64> {
    let m = SoftMask::dense(target).py_err()?;
    let n = SoftMask::dense(nontarget).py_err()?;
    losses::tv_loss(&m, &n).py_err()
}

#[pyfunction]
fn balanced_accuracy(predictions: Vec<usize>, labels: Vec<usize>, classes: usize) -> PyResult<f64> {
    evaluation::balanced_accuracy(&predictions, &labels, classes).py_err()
}

#[pyfunction]
fn auroc(scores: Vec<f64>, truth: Vec<bool>) -> PyResult<f64> {
    evaluation::auroc(&scores, &truth).py_err()
}

/// Histogram, positional and chunk statistics of a list of masks.
#[pyfunction]
fn mask_statistics<'py>(py: Python<'py>, masks: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let masks = masks
        .into_iter()
        .map(SoftMask::dense)
        .collect::<tokmask_core::Result<Vec<_>>>()
        .py_err()?;
    let stats = evaluation::mask_statistics(&masks).py_err()?;
    let d = PyDict::new(py);
    d.set_item("masks", stats.masks)?;
    d.set_item("tokens", stats.tokens)?;
    d.set_item("mean", stats.mean)?;
    d.set_item("fraction_above_half", stats.fraction_above_half)?;
    d.set_item(
        "histogram",
        stats
            .histogram
            .iter()
            .map(|b| (b.lo, b.hi, b.count))
            .collect::<Vec<_>>(),
    )?;
    d.set_item("chunk_counts", stats.chunk_counts)?;
    d.set_item("chunk_lengths", stats.chunk_lengths)?;
    d.set_item("mean_chunk_count", stats.mean_chunk_count)?;
    d.set_item("mean_chunk_length", stats.mean_chunk_length)?;
    Ok(d)
}

/// Runs a command-line invocation in-process and returns its exit code.
#[pyfunction]
fn run(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("tokmask".to_string()).chain(args).collect();
    py.detach(|| tokmask_core::cli::dispatch(&argv))
}

#[pymodule]
fn tokmask(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TokmaskError", m.py().get_type::<TokmaskError>())?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<Explanandum>()?;
    m.add_class::<Explainer>()?;
    m.add_class::<EvaluationReport>()?;
    m.add_function(wrap_pyfunction!(round_mask, m)?)?;
    m.add_function(wrap_pyfunction!(segment_chunks, m)?)?;
    m.add_function(wrap_pyfunction!(apply_mask, m)?)?;
    m.add_function(wrap_pyfunction!(bounding_measure, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tv_loss, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(mask_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
