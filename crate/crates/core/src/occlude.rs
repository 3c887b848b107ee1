//! Occlusion of high-activation regions and the before/after report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locate::Mask;
use crate::tensor::Tensor;

/// Per-channel normalisation means of the input pipeline; the default fill.
pub const MEAN_RGB: [f32; 3] = [0.485, 0.456, 0.406];
pub const DEFAULT_OCCLUSION_FRAC: f32 = 0.85;

/// Pixels at or above `frac * max(map)`. A map with no positive value
/// occludes nothing.
pub fn occlusion_mask(map: &Tensor<f32>, frac: f32) -> Result<Mask> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::OutOfUnitRange {
            what: "fraction",
            value: f64::from(frac),
        });
    }
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "expected [h, w], got {other:?}"
            )))
        }
    };
    let max = map.max_value();
    if max <= 0.0 {
        return Ok(Mask {
            h,
            w,
            bits: vec![false; h * w],
        });
    }
    let cut = f64::from(frac) * f64::from(max);
    Ok(Mask {
        h,
        w,
        bits: map.data().iter().map(|&v| f64::from(v) >= cut).collect(),
    })
}

/// Replaces masked pixels of an `[H, W, 3]` image with `fill`.
pub fn apply_occlusion(image: &Tensor<f32>, mask: &Mask, fill: [f32; 3]) -> Result<Tensor<f32>> {
    if image.shape() != [mask.h, mask.w, 3] {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs mask [{}, {}]",
            image.shape(),
            mask.h,
            mask.w
        )));
    }
    let mut out = image.clone();
    for (px, &hit) in out.data_mut().chunks_exact_mut(3).zip(&mask.bits) {
        if hit {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

/// Classification metrics of one model run, in any consistent unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyStats {
    pub acc1: f64,
    pub acc5: f64,
    pub conf1: f64,
    pub conf5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDrop {
    pub before: f64,
    pub after: f64,
    /// `before - after`; larger means the occluded region mattered more.
    pub drop: f64,
}

impl MetricDrop {
    fn new(before: f64, after: f64) -> Self {
        Self {
            before,
            after,
            drop: before - after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub acc1: MetricDrop,
    pub acc5: MetricDrop,
    pub conf1: MetricDrop,
    pub conf5: MetricDrop,
}

pub fn occlusion_report(
    before: &[ClassifyStats],
    after: &[ClassifyStats],
) -> Result<Vec<OcclusionRow>> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch(before.len(), after.len()));
    }
    Ok(before
        .iter()
        .zip(after)
        .map(|(b, a)| OcclusionRow {
            name: None,
            acc1: MetricDrop::new(b.acc1, a.acc1),
            acc5: MetricDrop::new(b.acc5, a.acc5),
            conf1: MetricDrop::new(b.conf1, a.conf1),
            conf5: MetricDrop::new(b.conf5, a.conf5),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_plateau() {
        let m = Tensor::new(vec![1, 4], vec![1.0f32, 0.9, 0.9, 0.2]).unwrap();
        assert_eq!(
            occlusion_mask(&m, 0.85).unwrap().bits,
            vec![true, true, true, false]
        );
        assert_eq!(
            occlusion_mask(&m, 1.0).unwrap().bits,
            vec![true, false, false, false]
        );
    }

    #[test]
    fn zero_map_masks_nothing() {
        let m = Tensor::<f32>::zeros(vec![3, 3]).unwrap();
        assert_eq!(occlusion_mask(&m, 0.85).unwrap().count(), 0);
        assert_eq!(occlusion_mask(&m, 0.0).unwrap().count(), 0);
    }

    #[test]
    fn empty_and_full_masks() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let none = Mask {
            h: 1,
            w: 2,
            bits: vec![false; 2],
        };
        assert_eq!(apply_occlusion(&img, &none, MEAN_RGB).unwrap(), img);
        let all = Mask {
            h: 1,
            w: 2,
            bits: vec![true; 2],
        };
        let out = apply_occlusion(&img, &all, [0.0, 0.5, 1.0]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
        let wrong = Mask {
            h: 2,
            w: 1,
            bits: vec![true; 2],
        };
        assert!(apply_occlusion(&img, &wrong, MEAN_RGB).is_err());
    }

    #[test]
    fn report_arithmetic() {
        let s = ClassifyStats {
            acc1: 0.7,
            acc5: 0.9,
            conf1: 0.8,
            conf5: 0.6,
        };
        let rows = occlusion_report(&[s], &[s]).unwrap();
        assert_eq!(rows[0].acc1.drop, 0.0);
        let after = ClassifyStats { acc1: 0.5, ..s };
        let rows = occlusion_report(&[s], &[after]).unwrap();
        assert!((rows[0].acc1.drop - 0.2).abs() < 1e-12);
        assert!(matches!(
            occlusion_report(&[s], &[]),
            Err(Error::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn percent_rows() {
        // percentages, as a reclassification run reports them
        let before = ClassifyStats {
            acc1: 70.02,
            acc5: 89.41,
            conf1: 83.81,
            conf5: 69.04,
        };
        let after = ClassifyStats {
            acc1: 57.16,
            acc5: 79.33,
            conf1: 78.68,
            conf5: 60.74,
        };
        let rows = occlusion_report(&[before], &[after]).unwrap();
        assert!((rows[0].acc1.drop - 12.86).abs() < 1e-9);
        assert!((rows[0].acc5.drop - 10.08).abs() < 1e-9);
    }
}
