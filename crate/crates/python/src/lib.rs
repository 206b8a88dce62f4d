//! Python bindings: quantizer, kernels, planner arithmetic and checkpoints.

use bcq_core::bcq::BitCluster;
use bcq_core::planner::{self, PrecisionPlan};
use bcq_core::toynmt::{self, TrainSchedule};
use bcq_core::{container, kernel, DenseTensor, Error, QuantizedTensor, Tensor};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn dense_from_rows(name: &str, rows: Vec<Vec<f32>>) -> PyResult<DenseTensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    DenseTensor::new(name, n, cols, rows.into_iter().flatten().collect()).map_err(py_err)
}

fn dense_to_rows(t: &DenseTensor) -> Vec<Vec<f32>> {
    (0..t.rows).map(|r| t.row(r).to_vec()).collect()
}

fn clusters_of(pairs: Vec<(usize, u8)>) -> Vec<BitCluster> {
    pairs.into_iter().map(|(rows, bits)| BitCluster { rows, bits }).collect()
}

/// A packed quantized matrix.
#[pyclass(name = "QuantizedTensor", module = "bcq", frozen, from_py_object)]
#[derive(Clone)]
struct PyQuantizedTensor {
    inner: QuantizedTensor,
}

#[pymethods]
impl PyQuantizedTensor {
    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    /// `(rows, bits)` runs in stored order.
    #[getter]
    fn clusters(&self) -> Vec<(usize, u8)> {
        self.inner.clusters.iter().map(|c| (c.rows, c.bits)).collect()
    }

    #[getter]
    fn row_order(&self) -> Option<Vec<u32>> {
        self.inner.row_order.clone()
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        self.inner.scales().to_vec()
    }

    #[getter]
    fn average_bits(&self) -> f64 {
        self.inner.average_bits()
    }

    fn memory_footprint(&self) -> usize {
        kernel::memory_footprint(&self.inner)
    }

    fn dequantize(&self) -> Vec<Vec<f32>> {
        dense_to_rows(&bcq_core::dequantize(&self.inner))
    }

    fn gemv_direct(&self, x: Vec<f32>) -> PyResult<Vec<f32>> {
        kernel::gemv_direct(&self.inner, &x).map_err(py_err)
    }

    #[pyo3(signature = (x, mu = kernel::DEFAULT_MU))]
    fn gemv_lut(&self, x: Vec<f32>, mu: usize) -> PyResult<Vec<f32>> {
        kernel::gemv_lut(&self.inner, &x, mu).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedTensor({:?}, shape=({}, {}), average_bits={:.4})",
            self.inner.name, self.inner.rows, self.inner.cols, self.inner.average_bits()
        )
    }
}

/// Greedy codes of one vector: `(scales, codes, reconstruction)`.
#[pyfunction]
fn greedy_quantize_vector(w: Vec<f32>, bits: usize) -> PyResult<(Vec<f32>, Vec<Vec<i8>>, Vec<f32>)> {
    let q = bcq_core::greedy_quantize_vector(&w, bits).map_err(py_err)?;
    let codes = (0..q.bits()).map(|i| q.code(i)).collect();
    Ok((q.scales.clone(), codes, q.reconstruct()))
}

/// Quantizes every row; `bits` is an int or a list of `(rows, bits)` runs.
#[pyfunction]
#[pyo3(signature = (rows, bits, name = "w"))]
fn quantize_matrix(rows: Vec<Vec<f32>>, bits: &Bound<'_, PyAny>, name: &str) -> PyResult<PyQuantizedTensor> {
    let w = dense_from_rows(name, rows)?;
    let clusters = match bits.extract::<usize>() {
        Ok(b) => BitCluster::uniform(w.rows, b),
        Err(_) => clusters_of(bits.extract()?),
    };
    let inner = bcq_core::quantize_matrix(&w, &clusters).map_err(py_err)?;
    Ok(PyQuantizedTensor { inner })
}

#[pyfunction]
fn quantization_error(rows: Vec<Vec<f32>>, t: &PyQuantizedTensor) -> PyResult<f64> {
    let w = dense_from_rows(&t.inner.name, rows)?;
    bcq_core::quantization_error(&w, &t.inner).map_err(py_err)
}

/// Subset-sum table of one block, for inspection.
#[pyfunction]
fn lut_block(x: Vec<f32>, mu: usize, block: usize) -> PyResult<Vec<f64>> {
    let lut = kernel::build_lut(&x, mu).map_err(py_err)?;
    if block >= lut.blocks() {
        return Err(PyValueError::new_err(format!("block {block} of {}", lut.blocks())));
    }
    Ok(lut.table(block).to_vec())
}

#[pyfunction]
fn pack_row(b: Vec<i8>) -> PyResult<Vec<u32>> {
    kernel::pack_row(&b).map_err(py_err)
}

/// Frequency-cluster sizes as `(rows, bits)` runs.
#[pyfunction]
fn cluster_embedding(v: usize, b: usize, r: f64) -> PyResult<Vec<(usize, u8)>> {
    let spec = planner::cluster_embedding(v, b, r).map_err(py_err)?;
    Ok(spec.clusters.iter().map(|c| (c.rows, c.bits)).collect())
}

#[pyfunction]
fn average_bits_embedding(v: usize, b: usize, r: f64) -> PyResult<f64> {
    Ok(planner::average_bits_embedding(&planner::cluster_embedding(v, b, r).map_err(py_err)?))
}

/// Size accounting of a plan given as JSON text.
#[pyfunction]
fn model_size<'py>(py: Python<'py>, plan_json: &str) -> PyResult<Bound<'py, PyDict>> {
    let plan = PrecisionPlan::from_json(plan_json).map_err(py_err)?;
    let s = planner::model_size(&plan).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("avg_bits", s.avg_bits)?;
    d.set_item("whole_model_avg_bits", s.whole_model_avg_bits)?;
    d.set_item("embedding_bits", s.embedding_bits)?;
    d.set_item("encoder_bits", s.encoder_bits)?;
    d.set_item("decoder_bits", s.decoder_bits)?;
    d.set_item("target_params", s.target_params)?;
    d.set_item("other_params", s.other_params)?;
    d.set_item("quantized_bytes", s.quantized_bytes)?;
    d.set_item("dense_bytes", s.dense_bytes)?;
    d.set_item("ratio", s.ratio)?;
    Ok(d)
}

/// The mixed-precision plan for the given model sizes, as JSON text.
#[pyfunction]
#[pyo3(signature = (d_model, d_ffn, enc_layers, dec_layers, vocab, ratio = 1.0))]
fn mixed_plan(d_model: usize, d_ffn: usize, enc_layers: usize, dec_layers: usize, vocab: usize, ratio: f64) -> String {
    let dims = planner::ModelDims { d_model, d_ffn, enc_layers, dec_layers, vocab };
    PrecisionPlan::mixed(dims, ratio).to_json()
}

#[pyfunction]
#[pyo3(signature = (step, c_lr, steps_peak, d_model, d_model_exponent = 0.5))]
fn lr_at(step: usize, c_lr: f64, steps_peak: usize, d_model: usize, d_model_exponent: f64) -> PyResult<f64> {
    let s = TrainSchedule { c_lr, steps_peak, d_model_exponent, ..Default::default() };
    toynmt::lr_at(step, &s, d_model).map_err(py_err)
}

/// Writes dense tensors (`{name: rows}`) and quantized tensors to `path`.
#[pyfunction]
#[pyo3(signature = (path, dense, quantized = Vec::new()))]
fn write_checkpoint(path: &str, dense: Vec<(String, Vec<Vec<f32>>)>, quantized: Vec<PyQuantizedTensor>) -> PyResult<u64> {
    let mut tensors = Vec::with_capacity(dense.len() + quantized.len());
    for (name, rows) in dense {
        tensors.push(Tensor::Dense(dense_from_rows(&name, rows)?));
    }
    tensors.extend(quantized.into_iter().map(|q| Tensor::Quantized(q.inner)));
    container::write_checkpoint(&tensors, path).map_err(py_err)
}

/// `[(name, rows | QuantizedTensor)]` in file order.
#[pyfunction]
fn read_checkpoint(py: Python<'_>, path: &str) -> PyResult<Vec<(String, Py<PyAny>)>> {
    let tensors = container::read_checkpoint(path).map_err(py_err)?;
    tensors
        .into_iter()
        .map(|t| {
            let name = t.name().to_string();
            let obj = match t {
                Tensor::Dense(d) => dense_to_rows(&d).into_pyobject(py)?.into_any().unbind(),
                Tensor::Quantized(q) => Py::new(py, PyQuantizedTensor { inner: q })?.into_any(),
            };
            Ok((name, obj))
        })
        .collect()
}

#[pymodule]
fn bcq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantizedTensor>()?;
    m.add_function(wrap_pyfunction!(greedy_quantize_vector, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_error, m)?)?;
    m.add_function(wrap_pyfunction!(lut_block, m)?)?;
    m.add_function(wrap_pyfunction!(pack_row, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(average_bits_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(model_size, m)?)?;
    m.add_function(wrap_pyfunction!(mixed_plan, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    Ok(())
}
