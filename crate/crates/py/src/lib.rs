//! Python bindings. Tensors cross the boundary as flat lists with a shape,
//! or as `.npy` bytes that `numpy.load` reads directly.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use region_cam_core as core;
use region_cam_core::sim::Resolution;
use region_cam_core::sip::LayerSelection;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } | core::Error::ManifestMissing(_) => {
            PyOSError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Float32 tensor of rank 1 to 4.
#[pyclass(name = "Tensor", module = "region_cam", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: core::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: core::Tensor::new(shape, data).map_err(err)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn to_npy<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &core::npy::encode(&self.inner))
    }

    #[staticmethod]
    fn from_npy(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: core::npy::decode(data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::load_array(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::save_array(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn wrap(t: core::Tensor<f32>) -> PyTensor {
    PyTensor { inner: t }
}

/// A feature bundle read from or written to disk.
#[pyclass(name = "Bundle", module = "region_cam", frozen)]
pub struct PyBundle {
    inner: core::FeatureBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: core::read_bundle(path).map_err(err)?,
        })
    }

    /// The planted-object bundle used by the test suites.
    #[staticmethod]
    #[pyo3(signature = (seed = 7))]
    fn planted(seed: u64) -> PyResult<Self> {
        let p = core::synth::PlantedObject {
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: p.build().map_err(err)?,
        })
    }

    #[pyo3(signature = (path, force = false))]
    fn write(&self, path: PathBuf, force: bool) -> PyResult<()> {
        core::write_bundle(&self.inner, path, force).map_err(err)
    }

    #[getter]
    fn image_id(&self) -> String {
        self.inner.image_id.clone()
    }

    #[getter]
    fn image_hw(&self) -> (usize, usize) {
        self.inner.image_hw
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.layer_names()
    }

    #[getter]
    fn class_ids(&self) -> Vec<i32> {
        self.inner.class_ids()
    }

    fn features(&self, layer: &str) -> PyResult<PyTensor> {
        Ok(wrap(self.inner.layer(layer).map_err(err)?.features.clone()))
    }

    fn grads(&self, class_id: i32, layer: &str) -> PyResult<PyTensor> {
        let rec = self.inner.class(class_id).map_err(err)?;
        rec.grads
            .get(layer)
            .map(|t| wrap(t.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("unknown layer {layer:?}")))
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(image_id={:?}, layers={:?}, classes={:?})",
            self.inner.image_id,
            self.inner.layer_names(),
            self.inner.class_ids()
        )
    }
}

fn selection(layers: Option<Vec<String>>, default: LayerSelection) -> LayerSelection {
    match layers {
        None => default,
        Some(v) if v.is_empty() => LayerSelection::None,
        Some(v) => LayerSelection::Named(v),
    }
}

/// Final `[0, 1]` map at image size. `layers` lists the layers to cluster
/// and propagate over (deepest first, `[]` for none); `sim_layers` the
/// layers whose gradients are fused.
#[pyfunction]
#[pyo3(signature = (bundle, class_id, centroids = 10, seed = 0, layers = None, sim_layers = None, tanh_shallow = true))]
fn region_cam(
    bundle: &PyBundle,
    class_id: i32,
    centroids: usize,
    seed: u64,
    layers: Option<Vec<String>>,
    sim_layers: Option<Vec<String>>,
    tanh_shallow: bool,
) -> PyResult<PyTensor> {
    let cfg = core::SipConfig {
        centroids,
        seed,
        layer_subset: selection(layers, LayerSelection::AllButDeepest),
        sim_layers: selection(sim_layers, LayerSelection::AllButShallowest),
        tanh_shallow,
        ..Default::default()
    };
    Ok(wrap(
        core::region_cam(&bundle.inner, class_id, &cfg)
            .map_err(err)?
            .map,
    ))
}

#[pyfunction]
fn compute_sim(grads: &PyTensor) -> PyResult<PyTensor> {
    Ok(wrap(core::compute_sim(&grads.inner).map_err(err)?))
}

#[pyfunction]
fn baseline_cam(features: &PyTensor, gap_weights: &PyTensor) -> PyResult<PyTensor> {
    Ok(wrap(
        core::baseline_cam(&features.inner, &gap_weights.inner).map_err(err)?,
    ))
}

#[pyfunction]
fn baseline_gradcam(features: &PyTensor, grads: &PyTensor) -> PyResult<PyTensor> {
    Ok(wrap(
        core::baseline_gradcam(&features.inner, &grads.inner).map_err(err)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (maps, out_h, out_w, tanh_shallow = true))]
fn fuse_sims(
    maps: Vec<PyRef<'_, PyTensor>>,
    out_h: usize,
    out_w: usize,
    tanh_shallow: bool,
) -> PyResult<PyTensor> {
    let maps: Vec<core::Tensor<f32>> = maps.iter().map(|m| m.inner.clone()).collect();
    Ok(wrap(
        core::fuse_sims(&maps, (out_h, out_w), tanh_shallow).map_err(err)?,
    ))
}

/// Cosine K-means over the rows of an `[n, d]` tensor.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (points, m, seed = 0, max_iter = 100, tol = 1e-5, restarts = 1, spherical = false))]
fn kmeans_cosine<'py>(
    py: Python<'py>,
    points: &PyTensor,
    m: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
    spherical: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let opts = core::KMeansOptions {
        max_iter,
        tol,
        restarts,
        spherical,
    };
    let r = core::kmeans_cosine(&points.inner, m, seed, &opts).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("labels", r.labels)?;
    d.set_item("centroids", wrap(r.centroids))?;
    d.set_item("objective", r.objective)?;
    d.set_item("trace", r.trace)?;
    d.set_item("iterations", r.iterations)?;
    d.set_item("converged", r.converged)?;
    Ok(d)
}

/// Replaces each value of an `[h, w]` map by its region mean; `labels` is
/// the flat row-major label list with values in `[0, m)`.
#[pyfunction]
fn propagate_once(s: &PyTensor, labels: Vec<i32>, m: usize) -> PyResult<PyTensor> {
    let lt = core::Tensor::new(s.inner.shape().to_vec(), labels).map_err(err)?;
    let lm = core::LabelMap::new("labels", lt, m).map_err(err)?;
    Ok(wrap(core::propagate_once(&s.inner, &lm).map_err(err)?))
}

/// Seed labels (flat, row-major) from `{class_id: map}`.
#[pyfunction]
fn make_seed(maps: BTreeMap<i32, PyRef<'_, PyTensor>>, bg_threshold: f32) -> PyResult<Vec<i32>> {
    let maps = maps
        .into_iter()
        .map(|(c, t)| {
            Ok((
                c,
                core::ActivationMap::new(c, t.inner.clone(), Resolution::Image)?,
            ))
        })
        .collect::<core::Result<BTreeMap<_, _>>>()
        .map_err(err)?;
    Ok(core::make_seed(&maps, bg_threshold)
        .map_err(err)?
        .labels
        .into_data())
}

/// `(per_class, mean)` for flat gt and prediction label lists.
#[pyfunction]
#[pyo3(signature = (gt, pred, num_classes, ignore_label = 255))]
fn miou(
    gt: Vec<i32>,
    pred: Vec<i32>,
    num_classes: usize,
    ignore_label: i32,
) -> PyResult<(Vec<Option<f64>>, f64)> {
    let n = gt.len();
    let gt = core::Tensor::new(vec![n], gt).map_err(err)?;
    let pred = core::Tensor::new(vec![pred.len()], pred).map_err(err)?;
    let mut cm = core::ConfusionMatrix::new(num_classes);
    cm.update(&gt, &pred, ignore_label).map_err(err)?;
    Ok(core::miou(&cm))
}

fn bbox(b: (usize, usize, usize, usize)) -> PyResult<core::BBox> {
    core::BBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

/// IoU of half-open `(x0, y0, x1, y1)` boxes.
#[pyfunction]
fn box_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> PyResult<f64> {
    Ok(core::box_iou(&bbox(a)?, &bbox(b)?))
}

/// Tight box `(x0, y0, x1, y1)` of the largest 8-connected component of
/// a mask given as rows of booleans.
#[pyfunction]
fn largest_component_bbox(mask: Vec<Vec<bool>>) -> PyResult<(usize, usize, usize, usize)> {
    let h = mask.len();
    let w = mask.first().map_or(0, Vec::len);
    if mask.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    let m = core::Mask {
        h,
        w,
        bits: mask.into_iter().flatten().collect(),
    };
    let b = core::largest_component_bbox(&m).map_err(err)?;
    Ok((b.x0, b.y0, b.x1, b.y1))
}

#[pyfunction]
fn threshold_mask(map: &PyTensor, frac: f32) -> PyResult<Vec<bool>> {
    Ok(core::threshold_mask(&map.inner, frac).map_err(err)?.bits)
}

#[pymodule]
#[pyo3(name = "region_cam")]
fn region_cam_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(region_cam, m)?)?;
    m.add_function(wrap_pyfunction!(compute_sim, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_cam, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_gradcam, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_sims, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(propagate_once, m)?)?;
    m.add_function(wrap_pyfunction!(make_seed, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(largest_component_bbox, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_mask, m)?)?;
    Ok(())
}
