//! Semantic information maps and the CAM / Grad-CAM baselines.
//!
//! A semantic information map (SIM) of a layer is the channel sum of the
//! positive part of the class-score gradient. SIMs of several layers are
//! resampled to a common grid and summed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;

/// Where an activation map lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    /// Native grid of the named layer.
    Layer(String),
    /// Common grid used for fusion and propagation.
    Working,
    /// Original image size.
    Image,
}

/// Single-channel, non-negative, finite map for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub class_id: i32,
    pub map: Tensor<f32>,
    pub resolution: Resolution,
}

impl ActivationMap {
    pub fn new(class_id: i32, map: Tensor<f32>, resolution: Resolution) -> Result<Self> {
        if map.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "activation maps are [h, w], got {:?}",
                map.shape()
            )));
        }
        if !map.all_finite() {
            return Err(Error::NonFinite);
        }
        if map.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "activation maps must be non-negative".into(),
            ));
        }
        Ok(Self {
            class_id,
            map,
            resolution,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.map.shape()[0], self.map.shape()[1])
    }
}

/// Per-layer SIMs (deepest first) and their fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStack {
    pub per_layer: Vec<ActivationMap>,
    pub fused: ActivationMap,
}

fn split_hwk(t: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, k] => Ok((*h, *w, *k)),
        other => Err(Error::ShapeMismatch(format!(
            "{what} must be [h, w, k], got {other:?}"
        ))),
    }
}

/// `out[i, j] = sum_k max(grads[i, j, k], 0)`, summed in channel order.
pub fn compute_sim(grads: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, k) = split_hwk(grads, "gradients")?;
    let out: Vec<f32> = grads
        .data()
        .par_chunks(k)
        .map(|px| px.iter().fold(0.0f32, |acc, &g| acc + g.max(0.0)))
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Resamples every map to `working_hw` and sums them, deepest first.
///
/// With `tanh_shallow`, every map except the deepest (index 0) is passed
/// through `tanh` at its native resolution before resampling.
pub fn fuse_sims(
    stack: &[Tensor<f32>],
    working_hw: (usize, usize),
    tanh_shallow: bool,
) -> Result<Tensor<f32>> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let (h, w) = working_hw;
    let mut acc = Tensor::<f32>::zeros(vec![h, w])?;
    for (idx, sim) in stack.iter().enumerate() {
        let scaled;
        let src = if tanh_shallow && idx > 0 {
            scaled = sim.map(f32::tanh);
            &scaled
        } else {
            sim
        };
        let resized = bilinear_resize(src, h, w)?;
        for (a, &v) in acc.data_mut().iter_mut().zip(resized.data()) {
            *a += v;
        }
    }
    Ok(acc)
}

fn weighted_channel_sum(features: &Tensor<f32>, weights: &[f32]) -> Result<Tensor<f32>> {
    let (h, w, k) = split_hwk(features, "features")?;
    if weights.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {k} channels",
            weights.len()
        )));
    }
    let out: Vec<f32> = features
        .data()
        .par_chunks(k)
        .map(|px| {
            let s = px
                .iter()
                .zip(weights)
                .fold(0.0f32, |acc, (&f, &wk)| acc + wk * f);
            s.max(0.0)
        })
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Original CAM: `max(sum_k W_k F[i, j, k], 0)` on the last feature map.
pub fn baseline_cam(features_last: &Tensor<f32>, gap_weights: &Tensor<f32>) -> Result<Tensor<f32>> {
    weighted_channel_sum(features_last, gap_weights.data())
}

/// Grad-CAM: channel weights are the spatial mean of the gradients.
pub fn baseline_gradcam(features: &Tensor<f32>, grads: &Tensor<f32>) -> Result<Tensor<f32>> {
    if features.shape() != grads.shape() {
        return Err(Error::ShapeMismatch(format!(
            "features {:?} vs gradients {:?}",
            features.shape(),
            grads.shape()
        )));
    }
    let (h, w, k) = split_hwk(grads, "gradients")?;
    let n = (h * w) as f64;
    let mut sums = vec![0.0f64; k];
    for px in grads.data().chunks_exact(k) {
        for (s, &g) in sums.iter_mut().zip(px) {
            *s += f64::from(g);
        }
    }
    // Sums of up to 2^29 equal f32 values are exact in f64, so spatially
    // constant gradients give alpha equal to that constant.
    let alpha: Vec<f32> = sums.iter().map(|s| (s / n) as f32).collect();
    weighted_channel_sum(features, &alpha)
}
