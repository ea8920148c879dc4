//! Python bindings: normalization, parsing, metrics and the pipeline stages.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use irbindiff_core::config::{Ablation, PipelineConfig};
use irbindiff_core::ir_corpus::{self, FunctionMeta, FunctionRecord};
use irbindiff_core::normalize::{self, NormalizeConfig, TokenSequence};
use irbindiff_core::pipeline::Pipeline;
use irbindiff_core::retrieval::{self, QueryResult};
use irbindiff_core::{synth, Error};

fn py_err(e: Error) -> PyErr {
    if e.is_input_error() || matches!(e, Error::UndefinedMetric(_) | Error::UndefinedSimilarity(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn seq(tokens: Vec<String>) -> TokenSequence {
    TokenSequence { tokens }
}

#[pyfunction]
fn tokenize(instruction: &str) -> Vec<String> {
    normalize::tokenize(instruction).tokens
}

#[pyfunction]
fn normalize_tokens(tokens: Vec<String>) -> Vec<String> {
    normalize::normalize(&seq(tokens)).tokens
}

/// Tokenize and, unless `normalized` is false, normalize one instruction.
#[pyfunction]
#[pyo3(signature = (instruction, normalized=true))]
fn process_instruction(instruction: &str, normalized: bool) -> Vec<String> {
    normalize::process_instruction(instruction, &NormalizeConfig::default(), normalized).tokens
}

#[pyclass(module = "irbindiff", frozen)]
struct Function {
    record: FunctionRecord,
}

#[pymethods]
impl Function {
    #[getter]
    fn name(&self) -> &str {
        &self.record.name
    }

    #[getter]
    fn key(&self) -> String {
        self.record.key()
    }

    #[getter]
    fn blocks(&self) -> Vec<(String, Vec<String>)> {
        self.record
            .blocks
            .iter()
            .map(|b| (b.label.clone(), b.instructions.clone()))
            .collect()
    }

    #[getter]
    fn edges(&self) -> Vec<(String, String)> {
        self.record.edges.clone()
    }

    fn instruction_count(&self) -> usize {
        self.record.instruction_count()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.record)
    }

    fn __len__(&self) -> usize {
        self.record.blocks.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Function(name={:?}, blocks={}, edges={})",
            self.record.name,
            self.record.blocks.len(),
            self.record.edges.len()
        )
    }
}

/// Parse LLVM-IR text into functions, simplified unless `simplify` is false.
#[pyfunction]
#[pyo3(signature = (text, simplify=true, project="", binary=""))]
fn parse_module(text: &str, simplify: bool, project: &str, binary: &str) -> PyResult<Vec<Function>> {
    let meta = FunctionMeta {
        project: project.into(),
        binary: binary.into(),
        ..FunctionMeta::default()
    };
    let funcs = ir_corpus::parse_module(text, &meta).map_err(py_err)?;
    Ok(funcs
        .iter()
        .map(|f| {
            let f = if simplify { ir_corpus::simplify_function(f) } else { f.clone() };
            Function {
                record: FunctionRecord::from(&f),
            }
        })
        .collect())
}

#[pyclass(module = "irbindiff", frozen)]
struct Vocabulary {
    inner: normalize::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    #[pyo3(signature = (sequences, min_count=1))]
    fn new(sequences: Vec<Vec<String>>, min_count: usize) -> Self {
        let seqs: Vec<TokenSequence> = sequences.into_iter().map(seq).collect();
        Vocabulary {
            inner: normalize::build_vocabulary(&seqs, min_count),
        }
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(String::from)
    }

    fn encode(&self, tokens: Vec<String>) -> Vec<u32> {
        normalize::encode(&seq(tokens), &self.inner)
    }

    fn decode(&self, ids: Vec<u32>) -> Vec<String> {
        normalize::decode(&ids, &self.inner).tokens
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, token: &str) -> bool {
        self.inner.contains(token)
    }
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    retrieval::cosine_similarity(&a, &b).map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    retrieval::auc(&scores, &labels).map_err(py_err)
}

fn rank_results(ranks: &[usize]) -> Vec<QueryResult> {
    ranks
        .iter()
        .map(|&r| QueryResult {
            ranked: Vec::new(),
            rank_of_gt: r,
        })
        .collect()
}

/// Recall@k from 1-based ground-truth ranks.
#[pyfunction]
fn recall_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    retrieval::recall_at_k(&rank_results(&ranks), k).map_err(py_err)
}

/// Mean reciprocal rank from 1-based ground-truth ranks.
#[pyfunction]
fn mrr(ranks: Vec<usize>) -> PyResult<f64> {
    retrieval::mrr(&rank_results(&ranks)).map_err(py_err)
}

/// Write a synthetic corpus and its manifest under `root`; returns the
/// number of functions written.
#[pyfunction]
#[pyo3(signature = (root, n_groups=50, variants=6, seed=0))]
fn synth_corpus(root: PathBuf, n_groups: usize, variants: usize, seed: u64) -> PyResult<usize> {
    synth::synth_corpus(&root, n_groups, variants, seed)
        .map(|s| s.n_functions)
        .map_err(py_err)
}

/// The staged pipeline driven by a TOML config. Stage methods return their
/// report as JSON text.
#[pyclass(module = "irbindiff", name = "Pipeline", frozen)]
struct PyPipeline {
    inner: Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, ablate=Vec::new(), seed=None))]
    fn new(config: PathBuf, ablate: Vec<String>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = PipelineConfig::load(&config).map_err(py_err)?;
        for a in ablate {
            cfg.ablations.enable(a.parse::<Ablation>().map_err(py_err)?);
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(PyPipeline {
            inner: Pipeline::new(cfg).map_err(py_err)?,
        })
    }

    fn config_toml(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(py_err)
    }

    fn synth(&self, py: Python<'_>) -> PyResult<usize> {
        let c = &self.inner.config;
        py.detach(|| synth::synth_corpus(&c.corpus_dir, c.synth.n_groups, c.synth.variants, c.seed))
            .map(|s| s.n_functions)
            .map_err(py_err)
    }

    fn prepare(&self, py: Python<'_>) -> PyResult<String> {
        to_json(&py.detach(|| self.inner.prepare()).map_err(py_err)?)
    }

    fn pretrain(&self, py: Python<'_>) -> PyResult<String> {
        to_json(&py.detach(|| self.inner.pretrain()).map_err(py_err)?)
    }

    fn embed_blocks(&self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| self.inner.embed_blocks()).map_err(py_err)
    }

    fn train(&self, py: Python<'_>) -> PyResult<String> {
        to_json(&py.detach(|| self.inner.train()).map_err(py_err)?)
    }

    fn embed(&self, py: Python<'_>) -> PyResult<usize> {
        py.detach(|| self.inner.embed()).map_err(py_err)
    }

    fn eval(&self, py: Python<'_>) -> PyResult<String> {
        to_json(&py.detach(|| self.inner.eval()).map_err(py_err)?)
    }

    fn run_all(&self, py: Python<'_>) -> PyResult<String> {
        to_json(&py.detach(|| self.inner.run_all()).map_err(py_err)?)
    }
}

#[pymodule]
fn irbindiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(process_instruction, m)?)?;
    m.add_function(wrap_pyfunction!(parse_module, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_class::<Function>()?;
    m.add_class::<Vocabulary>()?;
    m.add_class::<PyPipeline>()?;
    Ok(())
}
