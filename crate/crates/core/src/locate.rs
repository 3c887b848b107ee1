//! Weakly supervised localization: threshold, largest 8-connected
//! component, tight box, loc1/loc5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `[h, w]` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_tensor(&self) -> Result<Tensor<i32>> {
        Tensor::new(
            vec![self.h, self.w],
            self.bits.iter().map(|&b| b as i32).collect(),
        )
    }
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`; x is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "empty box ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// `map >= frac * max(map)`.
pub fn threshold_mask(map: &Tensor<f32>, frac: f32) -> Result<Mask> {
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
    let cut = f64::from(frac) * f64::from(map.max_value());
    Ok(Mask {
        h,
        w,
        bits: map.data().iter().map(|&v| f64::from(v) >= cut).collect(),
    })
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Tight box around the largest 8-connected component. Equal sizes go to
/// the component holding the first set pixel in row-major order.
pub fn largest_component_bbox(mask: &Mask) -> Result<BBox> {
    let (h, w) = (mask.h, mask.w);
    let mut parent: Vec<usize> = (0..h * w).collect();
    // First pass: union each set pixel with its already visited neighbours.
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let p = i * w + j;
            let mut neighbours = Vec::with_capacity(4);
            if j > 0 {
                neighbours.push((i, j - 1));
            }
            if i > 0 {
                if j > 0 {
                    neighbours.push((i - 1, j - 1));
                }
                neighbours.push((i - 1, j));
                if j + 1 < w {
                    neighbours.push((i - 1, j + 1));
                }
            }
            for (ni, nj) in neighbours {
                if mask.get(ni, nj) {
                    let a = find(&mut parent, p);
                    let b = find(&mut parent, ni * w + nj);
                    if a != b {
                        // keep the earlier pixel as root
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }

    #[derive(Clone, Copy)]
    struct Stats {
        size: usize,
        first: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    }
    let mut stats: Vec<Option<Stats>> = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            if !mask.get(i, j) {
                continue;
            }
            let root = find(&mut parent, i * w + j);
            let s = stats[root].get_or_insert(Stats {
                size: 0,
                first: i * w + j,
                x0: j,
                y0: i,
                x1: j + 1,
                y1: i + 1,
            });
            s.size += 1;
            s.x0 = s.x0.min(j);
            s.x1 = s.x1.max(j + 1);
            s.y1 = s.y1.max(i + 1);
        }
    }
    let best = stats
        .iter()
        .flatten()
        .fold(None::<Stats>, |best, s| match best {
            Some(b) if b.size > s.size || (b.size == s.size && b.first < s.first) => Some(b),
            _ => Some(*s),
        })
        .ok_or(Error::EmptyMask)?;
    BBox::new(best.x0, best.y0, best.x1, best.y1)
}

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocRecord {
    pub image_id: String,
    pub gt_boxes: Vec<BBox>,
    pub top1_correct: bool,
    pub top5_correct: bool,
    pub pred_box: BBox,
}

impl LocRecord {
    pub fn best_iou(&self) -> f64 {
        self.gt_boxes
            .iter()
            .map(|g| box_iou(&self.pred_box, g))
            .fold(0.0, f64::max)
    }
}

pub const LOC_IOU: f64 = 0.5;

/// `(loc1, loc5)`: fraction of records whose class is right (top-1 or
/// top-5) and whose box overlaps some ground-truth box with IoU >= 0.5.
pub fn loc_scores(records: &[LocRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    for r in records {
        if r.gt_boxes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "record {} has no ground-truth boxes",
                r.image_id
            )));
        }
        let box_ok = r.best_iou() >= LOC_IOU;
        hits1 += (box_ok && r.top1_correct) as usize;
        hits5 += (box_ok && r.top5_correct) as usize;
    }
    let n = records.len() as f64;
    Ok((hits1 as f64 / n, hits5 as f64 / n))
}

/// One image for a localization sweep.
#[derive(Debug, Clone)]
pub struct LocSample {
    pub image_id: String,
    /// Activation map for the ground-truth class, in `[0, 1]`.
    pub map: Tensor<f32>,
    pub gt_boxes: Vec<BBox>,
    pub top1_correct: bool,
    pub top5_correct: bool,
}

impl LocSample {
    pub fn record(&self, frac: f32) -> Result<LocRecord> {
        let mask = threshold_mask(&self.map, frac)?;
        Ok(LocRecord {
            image_id: self.image_id.clone(),
            gt_boxes: self.gt_boxes.clone(),
            top1_correct: self.top1_correct,
            top5_correct: self.top5_correct,
            pred_box: largest_component_bbox(&mask)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocPoint {
    pub frac: f32,
    pub loc1: f64,
    pub loc5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocSweepReport {
    pub points: Vec<LocPoint>,
    pub mean_loc1: f64,
    pub mean_loc5: f64,
    pub best_loc1: LocPoint,
    pub images: usize,
}

pub fn loc_sweep(samples: &[LocSample], grid: &[f32]) -> Result<LocSweepReport> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    use rayon::prelude::*;
    let points = grid
        .par_iter()
        .map(|&frac| {
            let records = samples
                .iter()
                .map(|s| s.record(frac))
                .collect::<Result<Vec<_>>>()?;
            let (loc1, loc5) = loc_scores(&records)?;
            Ok(LocPoint { frac, loc1, loc5 })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = points.len() as f64;
    let best_loc1 = points.iter().fold(points[0].clone(), |b, p| {
        if p.loc1 > b.loc1 {
            p.clone()
        } else {
            b
        }
    });
    Ok(LocSweepReport {
        mean_loc1: points.iter().map(|p| p.loc1).sum::<f64>() / n,
        mean_loc5: points.iter().map(|p| p.loc5).sum::<f64>() / n,
        best_loc1,
        images: samples.len(),
        points,
    })
}
