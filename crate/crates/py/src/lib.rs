use std::path::PathBuf;

use ealm::fusion::Ealm;
use ealm::pipeline::{emit_trace, Artifacts, ExperimentConfig};
use ealm::pretrained_lm::PretrainedLM;
use ealm::textdata::Vocabulary;
use ealm::EalmError;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: EalmError) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.class()))
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Reads `vocab.txt` from a run's output directory.
    #[staticmethod]
    fn load(out_dir: PathBuf) -> PyResult<Self> {
        let inner = Artifacts::new(out_dir, None).and_then(|a| a.load_vocab()).map_err(py_err)?;
        Ok(PyVocabulary { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Token ids with the leading `<s>`.
    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode_utterance(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn token(&self, id: usize) -> PyResult<String> {
        if id >= self.inner.len() {
            return Err(PyValueError::new_err(format!("token id {id} out of range")));
        }
        Ok(self.inner.display(id))
    }

    #[getter]
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }
}

/// A trained run loaded from an output directory.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    vocab: Vocabulary,
    pretrained: PretrainedLM,
    ealm: Ealm,
    max_len: usize,
}

impl PyModel {
    fn ids(&self, text: &str) -> PyResult<Vec<usize>> {
        let unknown = self.vocab.unknown_chars(text);
        if !unknown.is_empty() {
            return Err(PyValueError::new_err(format!("ConfigError: unknown characters {unknown:?}")));
        }
        let mut ids = self.vocab.encode_utterance(text);
        ids.truncate(self.max_len);
        Ok(ids)
    }

    fn nlls(&self, ids: &[usize], which: &str) -> PyResult<Vec<f64>> {
        match which {
            "ealm" => self.ealm.token_nlls(ids),
            "pretrained" => self.pretrained.token_nlls(ids),
            other => return Err(PyValueError::new_err(format!("unknown model {other:?}"))),
        }
        .map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (out_dir, config))]
    fn load(out_dir: PathBuf, config: PathBuf) -> PyResult<Self> {
        let cfg = ExperimentConfig::load(&config).map_err(py_err)?;
        let arts = Artifacts::new(out_dir, None).map_err(py_err)?;
        let vocab = arts.load_vocab().map_err(py_err)?;
        let pretrained = arts.load_pretrained().map_err(py_err)?;
        let ealm = arts.load_ealm(&cfg).map_err(py_err)?;
        Ok(PyModel {
            vocab,
            pretrained,
            ealm,
            max_len: cfg.max_len,
        })
    }

    /// `pretrained` followed by the entity types.
    #[getter]
    fn models(&self) -> Vec<String> {
        self.ealm.fusion.manifest.model_names()
    }

    /// Distribution over the token that follows `text`.
    fn next_token_probs(&self, text: &str) -> PyResult<Vec<f64>> {
        let ids = self.ids(text)?;
        Ok(self.ealm.next_token(&ids).map_err(py_err)?.0)
    }

    #[pyo3(signature = (text, model = "ealm"))]
    fn token_nlls(&self, text: &str, model: &str) -> PyResult<Vec<f64>> {
        let ids = self.ids(text)?;
        self.nlls(&ids, model)
    }

    /// Corpus-level perplexity over `texts`, one `<s>` per utterance.
    #[pyo3(signature = (texts, model = "ealm"))]
    fn perplexity(&self, texts: Vec<String>, model: &str) -> PyResult<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for t in &texts {
            let ids = self.ids(t)?;
            let n = self.nlls(&ids, model)?;
            total += n.iter().sum::<f64>();
            count += n.len();
        }
        if count == 0 {
            return Err(PyValueError::new_err("EmptyBatchError: no tokens to score"));
        }
        Ok((total / count as f64).exp())
    }

    /// One dict per predicted token: `token`, `pfusion`, `pcontext`.
    fn trace<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let trace = emit_trace(&self.ealm, &self.vocab, text, self.max_len).map_err(py_err)?;
        trace
            .rows
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("token", r.token)?;
                d.set_item("pfusion", r.pfusion)?;
                d.set_item("pcontext", r.pcontext)?;
                Ok(d)
            })
            .collect()
    }
}

#[pymodule]
fn ealm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
