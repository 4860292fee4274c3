//! Python bindings. Tensors cross the boundary as flat channels-last lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sbconv::{perf, BinaryMask, ConvParams, Dims4, FilterBank, Layout, Padding, PoolMode, Tensor4D};

fn err(e: sbconv::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn padding(s: &str) -> PyResult<Padding> {
    match s {
        "same" => Ok(Padding::Same),
        "valid" => Ok(Padding::Valid),
        _ => Err(PyValueError::new_err(format!("padding must be 'same' or 'valid', got '{s}'"))),
    }
}

fn params(kernel: (usize, usize), stride: (usize, usize), pad: &str, filters: usize) -> PyResult<ConvParams> {
    ConvParams::new(kernel, stride, padding(pad)?, filters).map_err(err)
}

#[pyclass(name = "Tensor", module = "sbconv_py")]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor4D<f32>,
}

#[pymethods]
impl PyTensor {
    /// `dims` is `(n, h, w, c)`; `data` is channels-last.
    #[new]
    fn new(dims: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let d = Dims4::new(dims.0, dims.1, dims.2, dims.3);
        let inner = Tensor4D::from_vec(d, Layout::ChannelsLast, data).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn random(dims: (usize, usize, usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Dims4::new(dims.0, dims.1, dims.2, dims.3);
        Self {
            inner: Tensor4D::random(d, &mut rng, -1.0, 1.0),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: sbconv::io::read_tensor(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sbconv::io::write_tensor(path, &self.inner).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.inner.dims();
        (d.n, d.h, d.w, d.c)
    }

    #[getter]
    fn layout(&self) -> &'static str {
        match self.inner.layout() {
            Layout::ChannelsLast => "NHWC",
            Layout::ChannelsFirst => "NCHW",
        }
    }

    fn transpose_layout(&self) -> Self {
        Self {
            inner: self.inner.transpose_layout(),
        }
    }

    /// Values in channels-last order whatever the storage layout.
    fn to_list(&self) -> Vec<f32> {
        self.inner.to_layout(Layout::ChannelsLast).data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor({}, {})", self.inner.dims(), self.layout())
    }
}

#[pyclass(name = "Mask", module = "sbconv_py")]
#[derive(Clone)]
pub struct PyMask {
    inner: BinaryMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: (usize, usize, usize), bits: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: BinaryMask::new(dims.0, dims.1, dims.2, bits).map_err(err)?,
        })
    }

    #[staticmethod]
    fn topleft(n: usize, h: usize, w: usize, sparsity: f64) -> PyResult<Self> {
        Ok(Self {
            inner: perf::synth_mask_topleft(n, h, w, sparsity).map_err(err)?,
        })
    }

    #[staticmethod]
    fn blobs(n: usize, h: usize, w: usize, sparsity: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: perf::synth_mask_blobs(n, h, w, sparsity, seed).map_err(err)?.mask,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: sbconv::io::read_mask(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sbconv::io::write_mask(path, &self.inner).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        self.inner.sparsity()
    }

    fn to_list(&self) -> Vec<u8> {
        self.inner.bits().to_vec()
    }
}

#[pyclass(name = "Filter", module = "sbconv_py")]
#[derive(Clone)]
pub struct PyFilter {
    inner: FilterBank<f32>,
}

#[pymethods]
impl PyFilter {
    /// `shape` is `(kh, kw, c_in, c_out)`, weights in that order.
    #[new]
    #[pyo3(signature = (shape, weights, bias=None))]
    fn new(shape: (usize, usize, usize, usize), weights: Vec<f32>, bias: Option<Vec<f32>>) -> PyResult<Self> {
        Ok(Self {
            inner: FilterBank::new(shape, weights, bias).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed, scale=0.5, bias=true))]
    fn random(shape: (usize, usize, usize, usize), seed: u64, scale: f64, bias: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            inner: FilterBank::random(shape, &mut rng, scale, bias),
        }
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let f = &self.inner;
        (f.kh, f.kw, f.c_in, f.c_out)
    }
}

impl PyFilter {
    fn params(&self, stride: (usize, usize), pad: &str) -> PyResult<ConvParams> {
        params((self.inner.kh, self.inner.kw), stride, pad, self.inner.c_out)
    }
}

#[pyfunction]
#[pyo3(signature = (x, f, stride=(1, 1), padding="same"))]
fn conv2d(x: &PyTensor, f: &PyFilter, stride: (usize, usize), padding: &str) -> PyResult<PyTensor> {
    let p = f.params(stride, padding)?;
    Ok(PyTensor {
        inner: sbconv::conv2d_direct(&x.inner, &f.inner, &p).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (x, f, padding="same"))]
fn conv2d_winograd(x: &PyTensor, f: &PyFilter, padding: &str) -> PyResult<PyTensor> {
    let p = f.params((1, 1), padding)?;
    Ok(PyTensor {
        inner: sbconv::conv2d_winograd(&x.inner, &f.inner, &p).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (x, mask, f, block, stride=(1, 1), padding="same"))]
fn sparse_conv2d(
    x: &PyTensor,
    mask: &PyMask,
    f: &PyFilter,
    block: (usize, usize),
    stride: (usize, usize),
    padding: &str,
) -> PyResult<PyTensor> {
    let p = f.params(stride, padding)?;
    Ok(PyTensor {
        inner: sbconv::sparse_conv2d(&x.inner, &mask.inner, &f.inner, &p, block).map_err(err)?,
    })
}

/// Block geometry as a dict of `(h, w)` pairs.
#[pyfunction]
#[pyo3(signature = (input_hw, kernel, block, stride=(1, 1), padding="same"))]
fn block_spec<'py>(
    py: Python<'py>,
    input_hw: (usize, usize),
    kernel: (usize, usize),
    block: (usize, usize),
    stride: (usize, usize),
    padding: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let s = sbconv::compute_block_spec(input_hw, &params(kernel, stride, padding, 1)?, block).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("input_hw", s.input_hw)?;
    d.set_item("output_hw", s.output_hw)?;
    d.set_item("block", s.block)?;
    d.set_item("overlap", s.overlap)?;
    d.set_item("in_stride", s.in_stride)?;
    d.set_item("out_block", s.out_block)?;
    d.set_item("grid_origin", s.grid_origin)?;
    d.set_item("grid", s.grid)?;
    Ok(d)
}

/// Active blocks as sorted `(n, by, bx)` triples.
#[pyfunction]
#[pyo3(signature = (mask, kernel, block, stride=(1, 1), padding="same"))]
fn reduce_mask(
    mask: &PyMask,
    kernel: (usize, usize),
    block: (usize, usize),
    stride: (usize, usize),
    padding: &str,
) -> PyResult<Vec<(usize, usize, usize)>> {
    let (_, h, w) = mask.inner.dims();
    let s = sbconv::compute_block_spec((h, w), &params(kernel, stride, padding, 1)?, block).map_err(err)?;
    let idx = sbconv::reduce_mask(&mask.inner, &s, PoolMode::Max, 1.0).map_err(err)?;
    Ok(idx.iter().map(|b| (b.n, b.by, b.bx)).collect())
}

#[pyfunction]
fn max_rel_error(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    if a.inner.dims() != b.inner.dims() {
        return Err(PyValueError::new_err("tensor dims differ"));
    }
    Ok(sbconv::max_rel_error(a.to_list().as_slice(), b.to_list().as_slice()))
}

#[pyfunction]
fn theoretical_speedup(sparsity: f64) -> PyResult<f64> {
    perf::theoretical_speedup(sparsity).map_err(err)
}

/// Runs the invariant suite; returns `(passed, table)`.
#[pyfunction]
#[pyo3(signature = (seed=0, halo=1))]
fn verify(py: Python<'_>, seed: u64, halo: usize) -> (bool, String) {
    let opts = sbconv::verify::VerifyOptions {
        seed,
        halo,
        scale: 1,
    };
    let r = py.allow_threads(|| sbconv::verify::run_verify(&opts));
    (r.passed(), r.table())
}

#[pymodule]
fn sbconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyFilter>()?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d_winograd, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(block_spec, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_mask, m)?)?;
    m.add_function(wrap_pyfunction!(max_rel_error, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
