//! Semantic information propagation: region averaging of the fused SIM
//! over superpixel partitions, cascaded from deep to shallow layers, and
//! the full per-class pipeline built on it.

use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::sim::{self, ActivationMap, Resolution, SimStack};
use crate::superpixel::{cluster_layer, KMeansOptions, LabelMap};
use crate::tensor::{minmax_normalize, Tensor};

/// Which bundle layers a stage uses, deepest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    All,
    /// Every layer but the shallowest one. Default for SIM layers.
    AllButShallowest,
    /// Every layer but the deepest one. Default for clustered layers.
    AllButDeepest,
    Named(Vec<String>),
    None,
}

impl LayerSelection {
    pub fn resolve(&self, bundle: &FeatureBundle) -> Result<Vec<usize>> {
        let n = bundle.layers.len();
        Ok(match self {
            LayerSelection::All => (0..n).collect(),
            LayerSelection::AllButShallowest => (0..n - 1).collect(),
            LayerSelection::AllButDeepest => (1..n).collect(),
            LayerSelection::None => Vec::new(),
            LayerSelection::Named(names) => {
                let idx = names
                    .iter()
                    .map(|name| bundle.layer_index(name))
                    .collect::<Result<Vec<_>>>()?;
                if idx.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidArgument(format!(
                        "layers {names:?} must be distinct and ordered deep to shallow"
                    )));
                }
                idx
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SipConfig {
    /// Layers whose gradients form the SIM.
    pub sim_layers: LayerSelection,
    /// Layers clustered into superpixels and propagated over, deepest first.
    pub layer_subset: LayerSelection,
    /// Centroids per layer.
    pub centroids: usize,
    pub seed: u64,
    /// `tanh` on every SIM but the deepest before fusion.
    pub tanh_shallow: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub spherical: bool,
}

impl Default for SipConfig {
    fn default() -> Self {
        let km = KMeansOptions::default();
        Self {
            sim_layers: LayerSelection::AllButShallowest,
            layer_subset: LayerSelection::AllButDeepest,
            centroids: 10,
            seed: 0,
            tanh_shallow: true,
            max_iter: km.max_iter,
            tol: km.tol,
            restarts: km.restarts,
            spherical: km.spherical,
        }
    }
}

impl SipConfig {
    pub fn kmeans_options(&self) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            restarts: self.restarts,
            spherical: self.spherical,
        }
    }
}

/// Replaces every value by the mean of its superpixel.
pub fn propagate_once(s: &Tensor<f32>, labels: &LabelMap) -> Result<Tensor<f32>> {
    if s.shape() != labels.labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "map {:?} vs labels {:?}",
            s.shape(),
            labels.labels.shape()
        )));
    }
    let mut sums = vec![0.0f64; labels.m];
    let mut counts = vec![0usize; labels.m];
    for (&v, &l) in s.data().iter().zip(labels.labels.data()) {
        sums[l as usize] += f64::from(v);
        counts[l as usize] += 1;
    }
    let means: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { (s / n as f64) as f32 } else { 0.0 })
        .collect();
    Ok(labels.labels.map(|l| means[l as usize]))
}

/// Applies [`propagate_once`] for each label map in turn, deepest first.
/// Label maps are nearest-resized to the map's grid first.
pub fn propagate_cascade(s_fused: &Tensor<f32>, labelmaps: &[LabelMap]) -> Result<Tensor<f32>> {
    if labelmaps.is_empty() {
        return Err(Error::EmptyCascade);
    }
    let (h, w) = s_fused.hw()?;
    let mut out = s_fused.clone();
    for lm in labelmaps {
        let lm = if lm.hw() == (h, w) {
            lm.clone()
        } else {
            lm.resized(h, w)?
        };
        out = propagate_once(&out, &lm)?;
    }
    Ok(out)
}

/// Per-bundle state shared by every class: the resolved layer sets and the
/// superpixel partitions, which do not depend on the class.
#[derive(Debug, Clone)]
pub struct RegionCam<'a> {
    bundle: &'a FeatureBundle,
    cfg: SipConfig,
    sim_layers: Vec<usize>,
    labelmaps: Vec<LabelMap>,
    working_hw: (usize, usize),
}

impl<'a> RegionCam<'a> {
    pub fn new(bundle: &'a FeatureBundle, cfg: &SipConfig) -> Result<Self> {
        let sim_layers = cfg.sim_layers.resolve(bundle)?;
        if sim_layers.is_empty() {
            return Err(Error::EmptyStack);
        }
        let sip_layers = cfg.layer_subset.resolve(bundle)?;
        let opts = cfg.kmeans_options();
        let labelmaps = sip_layers
            .iter()
            .map(|&i| cluster_layer(&bundle.layers[i], cfg.centroids, cfg.seed, &opts))
            .collect::<Result<Vec<_>>>()?;
        // Work on the shallowest clustered grid, or the shallowest SIM grid
        // when there is nothing to propagate over.
        let working_layer = sip_layers
            .last()
            .or(sim_layers.last())
            .copied()
            .unwrap_or(0);
        let working_hw = bundle.layers[working_layer].features.hw()?;
        Ok(Self {
            bundle,
            cfg: cfg.clone(),
            sim_layers,
            labelmaps,
            working_hw,
        })
    }

    pub fn labelmaps(&self) -> &[LabelMap] {
        &self.labelmaps
    }

    pub fn working_hw(&self) -> (usize, usize) {
        self.working_hw
    }

    /// Per-layer SIMs and their fusion at the working resolution.
    pub fn sims(&self, class_id: i32) -> Result<SimStack> {
        let class = self.bundle.class(class_id)?;
        let mut per_layer = Vec::with_capacity(self.sim_layers.len());
        for &i in &self.sim_layers {
            let name = &self.bundle.layers[i].name;
            let map = sim::compute_sim(&class.grads[name])?;
            per_layer.push(ActivationMap::new(
                class_id,
                map,
                Resolution::Layer(name.clone()),
            )?);
        }
        let maps: Vec<Tensor<f32>> = per_layer.iter().map(|a| a.map.clone()).collect();
        let fused = sim::fuse_sims(&maps, self.working_hw, self.cfg.tanh_shallow)?;
        Ok(SimStack {
            per_layer,
            fused: ActivationMap::new(class_id, fused, Resolution::Working)?,
        })
    }

    /// The propagated map at working resolution, before resizing and
    /// normalisation. Without clustered layers this is the fused SIM.
    pub fn propagated(&self, class_id: i32) -> Result<Tensor<f32>> {
        let fused = self.sims(class_id)?.fused.map;
        if self.labelmaps.is_empty() {
            Ok(fused)
        } else {
            propagate_cascade(&fused, &self.labelmaps)
        }
    }

    /// Final map at image size, normalised to `[0, 1]`.
    pub fn map(&self, class_id: i32) -> Result<ActivationMap> {
        let m = self.propagated(class_id)?;
        finish(class_id, &m, self.bundle.image_hw)
    }
}

/// Resizes a working-resolution map to image size and normalises it.
pub fn finish(class_id: i32, map: &Tensor<f32>, image_hw: (usize, usize)) -> Result<ActivationMap> {
    let resized = bilinear_resize(map, image_hw.0, image_hw.1)?;
    ActivationMap::new(class_id, minmax_normalize(&resized), Resolution::Image)
}

pub fn region_cam(bundle: &FeatureBundle, class_id: i32, cfg: &SipConfig) -> Result<ActivationMap> {
    bundle.class(class_id)?;
    RegionCam::new(bundle, cfg)?.map(class_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, labels: Vec<i32>, m: usize) -> LabelMap {
        LabelMap::new("t", Tensor::new(vec![h, w], labels).unwrap(), m).unwrap()
    }

    #[test]
    fn two_region_means() {
        let s = Tensor::new(vec![2, 2], vec![1.0f32, 3.0, 5.0, 7.0]).unwrap();
        let out = propagate_once(&s, &lm(2, 2, vec![0, 0, 1, 1], 2)).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0, 6.0, 6.0]);
    }

    #[test]
    fn single_region_is_global_mean() {
        let s = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = propagate_once(&s, &lm(2, 3, vec![0; 6], 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn shape_mismatch() {
        let s = Tensor::<f32>::zeros(vec![2, 2]).unwrap();
        assert!(matches!(
            propagate_once(&s, &lm(1, 4, vec![0; 4], 1)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cascade_single_equals_once() {
        let s = Tensor::new(vec![2, 2], vec![0.5f32, 1.5, 4.0, 9.0]).unwrap();
        let l = lm(2, 2, vec![0, 1, 0, 1], 2);
        assert_eq!(
            propagate_cascade(&s, std::slice::from_ref(&l)).unwrap(),
            propagate_once(&s, &l).unwrap()
        );
        assert!(matches!(
            propagate_cascade(&s, &[]),
            Err(Error::EmptyCascade)
        ));
    }

    #[test]
    fn cascade_same_partition_twice_is_noop() {
        let s = Tensor::new(vec![2, 2], vec![0.1f32, 0.7, 0.3, 0.9]).unwrap();
        let l = lm(2, 2, vec![0, 1, 1, 0], 2);
        let once = propagate_cascade(&s, std::slice::from_ref(&l)).unwrap();
        let twice = propagate_cascade(&s, &[l.clone(), l]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn cascade_upsamples_coarse_labels() {
        let s = Tensor::new(vec![2, 4], vec![1.0f32, 1.0, 3.0, 3.0, 5.0, 5.0, 7.0, 7.0]).unwrap();
        let coarse = lm(1, 2, vec![0, 1], 2);
        let out = propagate_cascade(&s, &[coarse]).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0, 5.0, 5.0, 3.0, 3.0, 5.0, 5.0]);
    }

    #[test]
    fn named_selection_must_be_ordered() {
        use crate::bundle::{ClassRecord, LayerRecord};
        let layer = |name: &str, h| LayerRecord {
            name: name.into(),
            features: Tensor::full(vec![h, h, 2], 1.0).unwrap(),
        };
        let b = FeatureBundle {
            image_id: "x".into(),
            image_hw: (4, 4),
            layers: vec![layer("deep", 2), layer("shallow", 4)],
            classes: vec![ClassRecord {
                class_id: 1,
                score: 0.0,
                grads: Default::default(),
                gap_weights: None,
                top1_correct: None,
                top5_correct: None,
            }],
            image_rgb: None,
            provenance: serde_json::Value::Null,
        };
        let sel = LayerSelection::Named(vec!["shallow".into(), "deep".into()]);
        assert!(sel.resolve(&b).is_err());
        let sel = LayerSelection::Named(vec!["deep".into(), "shallow".into()]);
        assert_eq!(sel.resolve(&b).unwrap(), vec![0, 1]);
        assert_eq!(LayerSelection::AllButDeepest.resolve(&b).unwrap(), vec![1]);
        assert!(LayerSelection::Named(vec!["nope".into()])
            .resolve(&b)
            .is_err());
    }
}
