use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use region_cam_core::bundle::discover_bundles;
use region_cam_core::sip::{finish, LayerSelection, RegionCam, SipConfig};
use region_cam_core::{
    baseline_cam, baseline_gradcam, load_array, read_bundle, ActivationMap, Error, FeatureBundle,
    Tensor,
};

use crate::config::Method;

pub fn bundle_paths(root: &Path) -> Result<Vec<PathBuf>> {
    let paths = discover_bundles(root)?;
    if paths.is_empty() {
        bail!("no bundles found under {}", root.display());
    }
    Ok(paths)
}

pub fn load(path: &Path) -> Result<FeatureBundle> {
    read_bundle(path).with_context(|| format!("in bundle {}", path.display()))
}

/// Final `[0, 1]` maps at image size for `classes`.
pub fn class_maps(
    bundle: &FeatureBundle,
    method: Method,
    sip: &SipConfig,
    classes: &[i32],
) -> Result<BTreeMap<i32, ActivationMap>, Error> {
    let deepest = &bundle.layers[0];
    let mut out = BTreeMap::new();
    match method {
        Method::RegionCam | Method::SimOnly => {
            let mut cfg = sip.clone();
            if method == Method::SimOnly {
                cfg.layer_subset = LayerSelection::None;
            }
            let rc = RegionCam::new(bundle, &cfg)?;
            for &c in classes {
                out.insert(c, rc.map(c)?);
            }
        }
        Method::Cam => {
            for &c in classes {
                let rec = bundle.class(c)?;
                let w = rec
                    .gap_weights
                    .as_ref()
                    .ok_or(Error::MissingGapWeights(c))?;
                let cam = baseline_cam(&deepest.features, w)?;
                out.insert(c, finish(c, &cam, bundle.image_hw)?);
            }
        }
        Method::Gradcam => {
            for &c in classes {
                let grads = &bundle.class(c)?.grads[&deepest.name];
                let cam = baseline_gradcam(&deepest.features, grads)?;
                out.insert(c, finish(c, &cam, bundle.image_hw)?);
            }
        }
    }
    Ok(out)
}

pub fn all_maps(
    bundle: &FeatureBundle,
    method: Method,
    sip: &SipConfig,
) -> Result<BTreeMap<i32, ActivationMap>> {
    class_maps(bundle, method, sip, &bundle.class_ids())
        .with_context(|| format!("computing {} maps for {}", method.name(), bundle.image_id))
}

pub fn gt_mask(gt_dir: &Path, image_id: &str) -> Result<Tensor<i32>> {
    let path = gt_dir.join(format!("{image_id}.npy"));
    if !path.is_file() {
        bail!("missing ground-truth mask {}", path.display());
    }
    Ok(load_array(&path)?)
}

pub type Sample = (BTreeMap<i32, ActivationMap>, Tensor<i32>);

/// Maps and ground truth for every bundle, in bundle order.
pub fn dataset(
    paths: &[PathBuf],
    gt_dir: &Path,
    method: Method,
    sip: &SipConfig,
) -> Result<Vec<Sample>> {
    paths
        .par_iter()
        .map(|p| {
            let b = load(p)?;
            let gt = gt_mask(gt_dir, &b.image_id)?;
            Ok((all_maps(&b, method, sip)?, gt))
        })
        .collect()
}
