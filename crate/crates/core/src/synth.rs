//! Synthetic bundles with a planted rectangular object.
//!
//! Object pixels carry features along one axis and background pixels along
//! an orthogonal one, each with small multiplicative and additive noise.
//! Class gradients are positive on the object and mostly negative
//! elsewhere, with sparse weak positive speckle in the background so the
//! fused map is noisy before propagation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::{ClassRecord, FeatureBundle, LayerRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedObject {
    pub image_hw: (usize, usize),
    /// `(name, h, w, k)` deepest first. Every extent must divide the image.
    pub layers: Vec<(String, usize, usize, usize)>,
    /// Object box in image pixels, half-open `(y0, x0, y1, x1)`.
    pub object: (usize, usize, usize, usize),
    pub class_id: i32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for PlantedObject {
    fn default() -> Self {
        Self {
            image_hw: (32, 32),
            layers: vec![
                ("block_3".into(), 8, 8, 8),
                ("block_2".into(), 16, 16, 8),
                ("block_1".into(), 32, 32, 8),
            ],
            object: (8, 12, 24, 28),
            class_id: 1,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl PlantedObject {
    /// Ground-truth mask at image size: `class_id` on the object, 0 elsewhere.
    pub fn gt_mask(&self) -> Result<Tensor<i32>> {
        let (h, w) = self.image_hw;
        let (y0, x0, y1, x1) = self.object;
        Tensor::from_fn2(h, w, |i, j| {
            if (y0..y1).contains(&i) && (x0..x1).contains(&j) {
                self.class_id
            } else {
                0
            }
        })
    }

    fn inside(&self, i: usize, j: usize, h: usize, w: usize) -> bool {
        // center of cell (i, j) in image pixels
        let (ih, iw) = self.image_hw;
        let y = (i as f64 + 0.5) * ih as f64 / h as f64;
        let x = (j as f64 + 0.5) * iw as f64 / w as f64;
        let (y0, x0, y1, x1) = self.object;
        y >= y0 as f64 && y < y1 as f64 && x >= x0 as f64 && x < x1 as f64
    }

    pub fn build(&self) -> Result<FeatureBundle> {
        if self.layers.iter().any(|l| l.3 < 2) {
            return Err(Error::InvalidArgument(
                "layers need at least 2 channels".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = self.noise;
        let mut layers = Vec::new();
        let mut grads = BTreeMap::new();
        for (name, h, w, k) in &self.layers {
            let (h, w, k) = (*h, *w, *k);
            let mut feat = Vec::with_capacity(h * w * k);
            let mut grad = Vec::with_capacity(h * w * k);
            for i in 0..h {
                for j in 0..w {
                    let obj = self.inside(i, j, h, w);
                    let axis = if obj { 0 } else { 1 };
                    let speckle = !obj && rng.random::<f32>() < 0.08;
                    for c in 0..k {
                        let base = if c == axis {
                            1.0 + noise * rng.random_range(-1.0f32..1.0)
                        } else {
                            noise * rng.random::<f32>()
                        };
                        feat.push(base);
                        let g = if obj {
                            if c % 2 == 0 {
                                rng.random_range(0.5f32..1.5)
                            } else {
                                -rng.random_range(0.0f32..1.0)
                            }
                        } else if speckle && c == 0 {
                            rng.random_range(0.5f32..2.0)
                        } else {
                            -rng.random_range(0.0f32..0.5)
                        };
                        grad.push(g);
                    }
                }
            }
            layers.push(LayerRecord {
                name: name.clone(),
                features: Tensor::new(vec![h, w, k], feat)?,
            });
            grads.insert(name.clone(), Tensor::new(vec![h, w, k], grad)?);
        }
        let k_deep = self.layers[0].3;
        let mut gap = vec![0.0f32; k_deep];
        gap[0] = 1.0;
        gap[1] = -0.5;

        let (ih, iw) = self.image_hw;
        let image = Tensor::new(
            vec![ih, iw, 3],
            (0..ih * iw)
                .flat_map(|p| {
                    if self.inside(p / iw, p % iw, ih, iw) {
                        [0.8f32, 0.2, 0.2]
                    } else {
                        [0.3f32, 0.5, 0.3]
                    }
                })
                .collect(),
        )?;
        let bundle = FeatureBundle {
            image_id: format!("synthetic_{}", self.seed),
            image_hw: self.image_hw,
            layers,
            classes: vec![ClassRecord {
                class_id: self.class_id,
                score: 5.0,
                grads,
                gap_weights: Some(Tensor::new(vec![k_deep], gap)?),
                top1_correct: Some(true),
                top5_correct: Some(true),
            }],
            image_rgb: Some(image),
            provenance: serde_json::json!({
                "model": "synthetic-planted-object",
                "seed": self.seed,
            }),
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_valid_bundle() {
        let p = PlantedObject::default();
        let b = p.build().unwrap();
        assert_eq!(b.layers.len(), 3);
        assert_eq!(
            p.gt_mask()
                .unwrap()
                .data()
                .iter()
                .filter(|&&v| v == 1)
                .count(),
            16 * 16
        );
        assert_eq!(p.build().unwrap(), b);
    }
}
