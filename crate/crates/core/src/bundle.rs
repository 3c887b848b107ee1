//! The feature bundle interchange directory.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/features_<layer>.npy        [h, w, k] float32
//! <dir>/grad_<class>_<layer>.npy    [h, w, k] float32
//! <dir>/gapw_<class>.npy            [k_deepest] float32, optional
//! <dir>/image.npy                   [H0, W0, 3] float32 in [0, 1], optional
//! ```
//!
//! Layers are listed deepest first. The manifest order is authoritative;
//! layer names only need to be usable inside file names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_NAME: &str = "region-cam-bundle";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    /// `[h, w, k]`
    pub features: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord {
    pub class_id: i32,
    /// Pre-softmax class score.
    pub score: f64,
    /// Gradient of the score with respect to each layer's features.
    pub grads: BTreeMap<String, Tensor<f32>>,
    /// Classifier weights of a GAP head, when the backbone has one.
    pub gap_weights: Option<Tensor<f32>>,
    /// Whether this class is the classifier's top-1 / top-5 prediction.
    pub top1_correct: Option<bool>,
    pub top5_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image_id: String,
    /// Original image size `(H0, W0)`.
    pub image_hw: (usize, usize),
    /// Deepest first.
    pub layers: Vec<LayerRecord>,
    pub classes: Vec<ClassRecord>,
    pub image_rgb: Option<Tensor<f32>>,
    /// Free-form exporter metadata (model name, preprocessing constants).
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    image_id: String,
    image_hw: [usize; 2],
    layers: Vec<ManifestLayer>,
    classes: Vec<ManifestClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default)]
    provenance: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    features: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestClass {
    class_id: i32,
    score: f64,
    grads: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gap_weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top1_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top5_correct: Option<bool>,
}

impl FeatureBundle {
    pub fn layer(&self, name: &str) -> Result<&LayerRecord> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn class(&self, class_id: i32) -> Result<&ClassRecord> {
        self.classes
            .iter()
            .find(|c| c.class_id == class_id)
            .ok_or(Error::UnknownClass(class_id))
    }

    pub fn class_ids(&self) -> Vec<i32> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Checks every structural invariant of a bundle.
    pub fn validate(&self) -> Result<()> {
        check_name("image_id", &self.image_id)?;
        if self.image_hw.0 == 0 || self.image_hw.1 == 0 {
            return Err(Error::ManifestInvalid("image_hw must be positive".into()));
        }
        if self.layers.len() < 2 {
            return Err(Error::ManifestInvalid(format!(
                "a bundle needs at least 2 layers, found {}",
                self.layers.len()
            )));
        }
        let mut names = BTreeSet::new();
        for layer in &self.layers {
            check_name("layer name", &layer.name)?;
            if !names.insert(layer.name.as_str()) {
                return Err(Error::ManifestInvalid(format!(
                    "duplicate layer {:?}",
                    layer.name
                )));
            }
            if layer.features.rank() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "features of {} must be [h, w, k], got {:?}",
                    layer.name,
                    layer.features.shape()
                )));
            }
            if !layer.features.all_finite() {
                return Err(Error::NonFinite);
            }
        }
        for pair in self.layers.windows(2) {
            let deep = pair[0].features.hw()?;
            let shallow = pair[1].features.hw()?;
            if deep.0 > shallow.0 || deep.1 > shallow.1 {
                return Err(Error::NonMonotoneLayers {
                    deeper: pair[0].name.clone(),
                    deeper_hw: deep,
                    shallower: pair[1].name.clone(),
                    shallower_hw: shallow,
                });
            }
        }

        let mut ids = BTreeSet::new();
        for class in &self.classes {
            if class.class_id < 0 {
                return Err(Error::InvalidClassId(class.class_id));
            }
            if !ids.insert(class.class_id) {
                return Err(Error::ManifestInvalid(format!(
                    "duplicate class {}",
                    class.class_id
                )));
            }
            if !class.score.is_finite() {
                return Err(Error::NonFinite);
            }
            let keys: BTreeSet<&str> = class.grads.keys().map(String::as_str).collect();
            if keys != names {
                return Err(Error::ManifestInvalid(format!(
                    "class {} gradients cover {:?}, layers are {:?}",
                    class.class_id, keys, names
                )));
            }
            for layer in &self.layers {
                let grad = &class.grads[&layer.name];
                if grad.shape() != layer.features.shape() {
                    return Err(Error::GradShapeMismatch {
                        layer: layer.name.clone(),
                        class_id: class.class_id,
                        grad: grad.shape().to_vec(),
                        features: layer.features.shape().to_vec(),
                    });
                }
                if !grad.all_finite() {
                    return Err(Error::NonFinite);
                }
            }
            if let Some(w) = &class.gap_weights {
                let k = self.layers[0].features.channels()?;
                if w.shape() != [k] {
                    return Err(Error::ShapeMismatch(format!(
                        "gap weights of class {} are {:?}, deepest layer has {k} channels",
                        class.class_id,
                        w.shape()
                    )));
                }
            }
        }

        if let Some(img) = &self.image_rgb {
            let want = [self.image_hw.0, self.image_hw.1, 3];
            if img.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "image is {:?}, expected {want:?}",
                    img.shape()
                )));
            }
        }
        Ok(())
    }
}

fn check_name(what: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::ManifestInvalid(format!(
            "{what} {name:?} must be non-empty and use only [A-Za-z0-9_.-]"
        )))
    }
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = Path::new(rel);
    if !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::ManifestInvalid(format!(
            "tensor path {rel:?} must be relative and stay inside the bundle"
        )));
    }
    Ok(dir.join(p))
}

pub fn features_file(layer: &str) -> String {
    format!("features_{layer}.npy")
}

pub fn grad_file(class_id: i32, layer: &str) -> String {
    format!("grad_{class_id}_{layer}.npy")
}

pub fn gap_file(class_id: i32) -> String {
    format!("gapw_{class_id}.npy")
}

pub const IMAGE_FILE: &str = "image.npy";

/// Reads and fully validates a bundle directory.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<FeatureBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::ManifestMissing(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::ManifestInvalid(format!("{}: {e}", manifest_path.display())))?;
    if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
        return Err(Error::ManifestInvalid(format!(
            "unsupported format {:?} version {}",
            m.format, m.version
        )));
    }

    let mut layers = Vec::with_capacity(m.layers.len());
    for l in &m.layers {
        check_name("layer name", &l.name)?;
        layers.push(LayerRecord {
            name: l.name.clone(),
            features: npy::load_array(resolve(dir, &l.features)?)?,
        });
    }
    let mut classes = Vec::with_capacity(m.classes.len());
    for c in &m.classes {
        let mut grads = BTreeMap::new();
        for (layer, rel) in &c.grads {
            grads.insert(layer.clone(), npy::load_array(resolve(dir, rel)?)?);
        }
        let gap_weights = match &c.gap_weights {
            Some(rel) => Some(npy::load_array(resolve(dir, rel)?)?),
            None => None,
        };
        classes.push(ClassRecord {
            class_id: c.class_id,
            score: c.score,
            grads,
            gap_weights,
            top1_correct: c.top1_correct,
            top5_correct: c.top5_correct,
        });
    }
    let image_rgb = match &m.image {
        Some(rel) => Some(npy::load_array(resolve(dir, rel)?)?),
        None => None,
    };
    let bundle = FeatureBundle {
        image_id: m.image_id,
        image_hw: (m.image_hw[0], m.image_hw[1]),
        layers,
        classes,
        image_rgb,
        provenance: m.provenance,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle. Refuses to replace an existing bundle unless `force`.
pub fn write_bundle(b: &FeatureBundle, dir: impl AsRef<Path>, force: bool) -> Result<()> {
    let dir = dir.as_ref();
    b.validate()?;
    if dir.join(MANIFEST).exists() && !force {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut layers = Vec::new();
    for l in &b.layers {
        let file = features_file(&l.name);
        npy::save_array(&l.features, dir.join(&file))?;
        layers.push(ManifestLayer {
            name: l.name.clone(),
            features: file,
        });
    }
    let mut classes = Vec::new();
    for c in &b.classes {
        let mut grads = BTreeMap::new();
        for (layer, g) in &c.grads {
            let file = grad_file(c.class_id, layer);
            npy::save_array(g, dir.join(&file))?;
            grads.insert(layer.clone(), file);
        }
        let gap_weights = match &c.gap_weights {
            Some(w) => {
                let file = gap_file(c.class_id);
                npy::save_array(w, dir.join(&file))?;
                Some(file)
            }
            None => None,
        };
        classes.push(ManifestClass {
            class_id: c.class_id,
            score: c.score,
            grads,
            gap_weights,
            top1_correct: c.top1_correct,
            top5_correct: c.top5_correct,
        });
    }
    let image = match &b.image_rgb {
        Some(img) => {
            npy::save_array(img, dir.join(IMAGE_FILE))?;
            Some(IMAGE_FILE.to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        image_id: b.image_id.clone(),
        image_hw: [b.image_hw.0, b.image_hw.1],
        layers,
        classes,
        image,
        provenance: b.provenance.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::ManifestInvalid(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Bundle directories under `root`: `root` itself when it holds a
/// manifest, otherwise every immediate subdirectory that does, sorted.
pub fn discover_bundles(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join(MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.join(MANIFEST).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::ManifestMissing(root.join(MANIFEST)));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Vec<usize>, offset: f32) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| offset + i as f32 * 0.25).collect()).unwrap()
    }

    fn sample(layers: &[(&str, usize, usize)]) -> FeatureBundle {
        let layers: Vec<LayerRecord> = layers
            .iter()
            .map(|&(name, h, k)| LayerRecord {
                name: name.into(),
                features: ramp(vec![h, h, k], 0.0),
            })
            .collect();
        let grads = layers
            .iter()
            .map(|l| (l.name.clone(), ramp(l.features.shape().to_vec(), -1.0)))
            .collect();
        FeatureBundle {
            image_id: "img_0001".into(),
            image_hw: (16, 16),
            classes: vec![ClassRecord {
                class_id: 3,
                score: 4.75,
                grads,
                gap_weights: Some(ramp(vec![layers[0].features.channels().unwrap()], 0.5)),
                top1_correct: Some(true),
                top5_correct: None,
            }],
            layers,
            image_rgb: Some(Tensor::full(vec![16, 16, 3], 0.5).unwrap()),
            provenance: serde_json::json!({"model": "synthetic"}),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample(&[("block_5", 2, 8), ("block_4", 4, 4), ("block_3", 8, 2)]);
        write_bundle(&b, dir.path(), false).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn manifest_paths_are_relative() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample(&[("block_5", 2, 2), ("block_4", 4, 2)]);
        write_bundle(&b, dir.path(), false).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["layers"][0]["features"], "features_block_5.npy");
        assert_eq!(v["classes"][0]["grads"]["block_4"], "grad_3_block_4.npy");
        assert!(!text.contains(&dir.path().display().to_string()));
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample(&[("a", 2, 2), ("b", 4, 2)]);
        write_bundle(&b, dir.path(), false).unwrap();
        assert!(matches!(
            write_bundle(&b, dir.path(), false),
            Err(Error::AlreadyExists(_))
        ));
        write_bundle(&b, dir.path(), true).unwrap();
    }

    #[test]
    fn rejects_gradient_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample(&[("block_5", 7, 64), ("block_4", 14, 64)]);
        write_bundle(&b, dir.path(), false).unwrap();
        // swap in a [7,7,64] gradient for the [14,14,64] layer
        npy::save_array(
            &Tensor::<f32>::zeros(vec![7, 7, 64]).unwrap(),
            dir.path().join(grad_file(3, "block_4")),
        )
        .unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::GradShapeMismatch { ref layer, class_id: 3, .. }) if layer == "block_4"
        ));
    }

    #[test]
    fn rejects_shallow_first_order() {
        let b = sample(&[("block_1", 8, 2), ("block_2", 4, 2)]);
        assert!(matches!(b.validate(), Err(Error::NonMonotoneLayers { .. })));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::ManifestMissing(_))
        ));
    }

    #[test]
    fn rejects_escaping_paths() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample(&[("a", 2, 2), ("b", 4, 2)]);
        write_bundle(&b, dir.path(), false).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"features_a.npy\"", "\"../features_a.npy\"");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(Error::ManifestInvalid(_))
        ));
    }

    #[test]
    fn rejects_missing_gradient_layer() {
        let mut b = sample(&[("a", 2, 2), ("b", 4, 2)]);
        b.classes[0].grads.remove("b");
        assert!(matches!(b.validate(), Err(Error::ManifestInvalid(_))));
    }

    #[test]
    fn rejects_single_layer() {
        let b = sample(&[("a", 2, 2)]);
        assert!(b.validate().is_err());
    }
}
