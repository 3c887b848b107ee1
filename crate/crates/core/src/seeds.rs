//! Segmentation seeds from class activation maps, and mIoU scoring.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::ActivationMap;
use crate::tensor::Tensor;

pub const BACKGROUND: i32 = 0;
pub const DEFAULT_IGNORE_LABEL: i32 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct SeedMask {
    /// `[H0, W0]`; 0 is background, other values are class ids.
    pub labels: Tensor<i32>,
    pub threshold: f32,
}

/// The evaluation grid `0, 0.01, ..., 1` (101 thresholds).
pub fn default_grid() -> Vec<f32> {
    (0..=100).map(|i| (f64::from(i) / 100.0) as f32).collect()
}

/// Parses `start:step:end` (inclusive), a comma list, or a single value.
pub fn parse_grid(spec: &str) -> Result<Vec<f32>> {
    let bad = || Error::InvalidArgument(format!("bad threshold grid {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [start, step, end] => {
            let start: f64 = start.trim().parse().map_err(|_| bad())?;
            let step: f64 = step.trim().parse().map_err(|_| bad())?;
            let end: f64 = end.trim().parse().map_err(|_| bad())?;
            if step <= 0.0 || end < start {
                return Err(bad());
            }
            let n = ((end - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| (start + i as f64 * step) as f32).collect()
        }
        [_] => spec
            .split(',')
            .map(|v| v.trim().parse::<f32>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(bad()),
    };
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    for &t in &grid {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfUnitRange {
                what: "threshold",
                value: f64::from(t),
            });
        }
    }
    Ok(grid)
}

/// Background wherever every class is below `bg_threshold`, otherwise the
/// class with the largest value (ties to the smallest class id).
pub fn make_seed(maps: &BTreeMap<i32, ActivationMap>, bg_threshold: f32) -> Result<SeedMask> {
    if !(0.0..=1.0).contains(&bg_threshold) {
        return Err(Error::OutOfUnitRange {
            what: "background threshold",
            value: f64::from(bg_threshold),
        });
    }
    let mut iter = maps.iter();
    let (_, first) = iter.next().ok_or(Error::EmptyClassSet)?;
    let shape = first.map.shape().to_vec();
    for (&c, m) in maps {
        if c <= BACKGROUND {
            return Err(Error::InvalidClassId(c));
        }
        if m.map.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "class {c} map {:?} vs {:?}",
                m.map.shape(),
                shape
            )));
        }
    }
    let n = first.map.len();
    let labels = (0..n)
        .map(|p| {
            // BTreeMap iterates ids ascending, so strict > keeps the smallest on ties.
            let mut best = (BACKGROUND, f32::NEG_INFINITY);
            for (&c, m) in maps {
                let v = m.map.data()[p];
                if v > best.1 {
                    best = (c, v);
                }
            }
            if best.1 < bg_threshold {
                BACKGROUND
            } else {
                best.0
            }
        })
        .collect();
    Ok(SeedMask {
        labels: Tensor::new(shape, labels)?,
        threshold: bg_threshold,
    })
}

/// Ground truth by prediction pixel counts over `num_classes` labels
/// (background included).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major `[gt][pred]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::LengthMismatch(self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn index(&self, label: i32) -> Result<usize> {
        if label < 0 || label as usize >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(label as usize)
    }

    /// Adds one image, skipping pixels whose ground truth is `ignore_label`.
    pub fn update(
        &mut self,
        gt: &Tensor<i32>,
        pred: &Tensor<i32>,
        ignore_label: i32,
    ) -> Result<()> {
        if gt.shape() != pred.shape() {
            return Err(Error::ShapeMismatch(format!(
                "ground truth {:?} vs prediction {:?}",
                gt.shape(),
                pred.shape()
            )));
        }
        let mut local = ConfusionMatrix::new(self.num_classes);
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g == ignore_label {
                continue;
            }
            let (g, p) = (local.index(g)?, local.index(p)?);
            local.counts[g * self.num_classes + p] += 1;
        }
        self.merge(&local)
    }
}

pub fn update_confusion(
    cm: &ConfusionMatrix,
    gt: &Tensor<i32>,
    pred: &SeedMask,
    ignore_label: i32,
) -> Result<ConfusionMatrix> {
    let mut out = cm.clone();
    out.update(gt, &pred.labels, ignore_label)?;
    Ok(out)
}

/// Per-class IoU (`None` when a class is absent from both ground truth and
/// prediction) and the mean over the defined classes.
pub fn miou(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let c = cm.num_classes;
    let ratios: Vec<Option<(u64, u64)>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let gt: u64 = (0..c).map(|p| cm.get(k, p)).sum();
            let pred: u64 = (0..c).map(|g| cm.get(g, k)).sum();
            let union = gt + pred - tp;
            (union > 0).then_some((tp, union))
        })
        .collect();
    let per_class = ratios
        .iter()
        .map(|r| r.map(|(tp, union)| tp as f64 / union as f64))
        .collect();
    let defined: Vec<(u64, u64)> = ratios.into_iter().flatten().collect();
    (per_class, mean_of_ratios(&defined))
}

/// Mean of `num / den` ratios carried in double-double precision, so the
/// result is the correctly rounded mean (e.g. exactly `7/12` for 1/2, 2/3).
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &(num, den) in ratios {
        let (num, den) = (num as f64, den as f64);
        let q = num / den;
        let q_lo = (-q).mul_add(den, num) / den;
        let s = hi + q;
        let bp = s - hi;
        let err = (hi - (s - bp)) + (q - bp);
        hi = s;
        lo += err + q_lo;
    }
    let n = ratios.len() as f64;
    let q = hi / n;
    let r = (-q).mul_add(n, hi) + lo;
    q + r / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f32,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub best_threshold: f32,
    pub best_miou: f64,
    pub mean_miou: f64,
    pub images: usize,
}

/// Scores every threshold of `grid` over a dataset in one pass.
pub fn sweep_thresholds<I>(
    dataset: I,
    grid: &[f32],
    num_classes: usize,
    ignore_label: i32,
) -> Result<SweepReport>
where
    I: IntoIterator<Item = Result<(BTreeMap<i32, ActivationMap>, Tensor<i32>)>>,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut cms = vec![ConfusionMatrix::new(num_classes); grid.len()];
    let mut images = 0;
    for item in dataset {
        let (maps, gt) = item?;
        cms.par_iter_mut()
            .zip(grid.par_iter())
            .try_for_each(|(cm, &t)| {
                let seed = make_seed(&maps, t)?;
                cm.update(&gt, &seed.labels, ignore_label)
            })?;
        images += 1;
    }
    let points: Vec<SweepPoint> = grid
        .iter()
        .zip(&cms)
        .map(|(&threshold, cm)| {
            let (per_class, miou) = miou(cm);
            SweepPoint {
                threshold,
                miou,
                per_class,
            }
        })
        .collect();
    let best = points
        .iter()
        .fold(&points[0], |b, p| if p.miou > b.miou { p } else { b });
    let mean_miou = points.iter().map(|p| p.miou).sum::<f64>() / points.len() as f64;
    Ok(SweepReport {
        best_threshold: best.threshold,
        best_miou: best.miou,
        mean_miou,
        images,
        points,
    })
}
