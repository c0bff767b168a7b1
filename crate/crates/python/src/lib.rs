use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use typespace::ggnn::Model;
use typespace::pygraph::{extract, ExtractOptions};
use typespace::typeexpr::parse_normalized;
use typespace::typemap::{Neighbour, PredictionConfig, Provenance};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(path: &str, e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(format!("{path}: {e}"))
}

/// Parses and normalizes a type annotation; returns its canonical text.
#[pyfunction]
fn normalize_type(text: &str) -> PyResult<String> {
    parse_normalized(text).map(|t| t.to_string()).map_err(value_err)
}

/// Extracts the code graph of `source` as one JSON line.
#[pyfunction]
#[pyo3(signature = (source, file_id = ""))]
fn extract_graph(source: &str, file_id: &str) -> PyResult<String> {
    let ex = extract(file_id, source, &ExtractOptions::default()).map_err(value_err)?;
    Ok(ex.graph.to_json_line())
}

/// Trained encoder loaded from a checkpoint.
#[pyclass(name = "Model", module = "typespace_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let inner = Model::load(BufReader::new(f)).map_err(|e| io_err(path, e))?;
        Ok(PyModel { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `(name, kind, annotation, vector)` for every symbol of `source`.
    fn embed(&self, source: &str) -> PyResult<Vec<(String, String, Option<String>, Vec<f64>)>> {
        let g = extract("", source, &ExtractOptions::default()).map_err(value_err)?.graph;
        let emb = self.inner.symbol_embeddings(&g).map_err(value_err)?;
        Ok(emb
            .into_iter()
            .map(|e| {
                let s = &g.symbols[e.symbol];
                (s.name.clone(), s.kind.as_str().to_string(), s.annotation.as_ref().map(|t| t.to_string()), e.vector)
            })
            .collect())
    }
}

/// Nearest-neighbour map from embeddings to types.
#[pyclass(name = "TypeMap", module = "typespace_py")]
struct PyTypeMap {
    inner: typespace::typemap::TypeMap,
}

fn provenance(name: &str) -> PyResult<Provenance> {
    match name {
        "corpus" => Ok(Provenance::Corpus),
        "accepted" => Ok(Provenance::Accepted),
        "manual" => Ok(Provenance::Manual),
        _ => Err(value_err(format!("unknown provenance {name:?}"))),
    }
}

#[pymethods]
impl PyTypeMap {
    #[new]
    fn new(dim: usize) -> Self {
        PyTypeMap {
            inner: typespace::typemap::TypeMap::new(dim),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let inner = typespace::typemap::TypeMap::load(BufReader::new(f)).map_err(|e| io_err(path, e))?;
        Ok(PyTypeMap { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(f);
        self.inner.save(&mut w).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Adds one marker; returns its index.
    #[pyo3(signature = (vector, ty, provenance = "manual"))]
    fn add_binding(&mut self, vector: Vec<f64>, ty: &str, provenance: &str) -> PyResult<usize> {
        let t = parse_normalized(ty).map_err(value_err)?;
        let p = self::provenance(provenance)?;
        self.inner.add_binding(&vector, t, p).map_err(value_err)
    }

    /// `(marker, type, distance)` for the k nearest markers.
    fn neighbours(&self, vector: Vec<f64>, k: usize) -> PyResult<Vec<(usize, String, f64)>> {
        let nn: Vec<Neighbour> = self.inner.neighbours(&vector, k).map_err(value_err)?;
        Ok(nn
            .into_iter()
            .map(|n| (n.marker, self.inner.markers()[n.marker].ty.to_string(), n.distance))
            .collect())
    }

    /// Ranked `(type, probability)` pairs.
    #[pyo3(signature = (vector, k = 10, p = 2.0))]
    fn predict(&self, vector: Vec<f64>, k: usize, p: f64) -> PyResult<Vec<(String, f64)>> {
        let preds = self.inner.knn_predict(&vector, &PredictionConfig { k, p }).map_err(value_err)?;
        Ok(preds.into_iter().map(|c| (c.ty.to_string(), c.probability)).collect())
    }
}

#[pymodule]
fn typespace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_type, m)?)?;
    m.add_function(wrap_pyfunction!(extract_graph, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTypeMap>()?;
    Ok(())
}
