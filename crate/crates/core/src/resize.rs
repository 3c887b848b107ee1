//! Resampling with half-pixel centers (`align_corners = false`).
//!
//! A destination index `x_d` maps to the source coordinate
//! `x_s = (x_d + 0.5) * W / out_w - 0.5`, clamped to `[0, W - 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: x - lo as f64,
            }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // a + (b - a) t keeps equal endpoints exact.
    a + (b - a) * t
}

/// Bilinear resize of a `[H, W]` or `[H, W, C]` tensor.
pub fn bilinear_resize(src: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w) = src.hw()?;
    let c = src.channels()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::EmptyInput);
    }
    let mut shape = vec![out_h, out_w];
    if src.rank() == 3 {
        shape.push(c);
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }

    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let data = src.data();
    let at = |i: usize, j: usize, k: usize| f64::from(data[(i * w + j) * c + k]);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for r in &rows {
        for q in &cols {
            for k in 0..c {
                let top = lerp(at(r.lo, q.lo, k), at(r.lo, q.hi, k), q.frac);
                let bottom = lerp(at(r.hi, q.lo, k), at(r.hi, q.hi, k), q.frac);
                out.push(lerp(top, bottom, r.frac) as f32);
            }
        }
    }
    Tensor::new(shape, out)
}

/// Nearest-neighbour resize of a `[H, W]` grid: each output cell takes the
/// source cell that contains its center, `floor((x_d + 0.5) * W / out_w)`.
/// This is the half-pixel coordinate rounded to nearest, halves rounding up.
pub fn nearest_resize<T: Element>(
    src: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (h, w) = match src.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "nearest resize expects [h, w], got {other:?}"
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyInput);
    }
    if (h, w) == (out_h, out_w) {
        return Ok(src.clone());
    }
    let pick = |src_n: usize, dst_n: usize| -> Vec<usize> {
        (0..dst_n)
            .map(|d| (((2 * d + 1) * src_n) / (2 * dst_n)).min(src_n - 1))
            .collect()
    };
    let rows = pick(h, out_h);
    let cols = pick(w, out_w);
    let data = src.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &q in &cols {
            out.push(data[r * w + q]);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ramp_upsample_matches_hand_evaluation() {
        // x_s for columns 0..4 of a 2 -> 4 resize: -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1).
        let src = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&src, 2, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_stays_constant() {
        let src = Tensor::full(vec![3, 5], 3.5f32).unwrap();
        for (oh, ow) in [(1, 1), (7, 2), (13, 17)] {
            let out = bilinear_resize(&src, oh, ow).unwrap();
            assert!(out.data().iter().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn identity_resize_is_bitwise_copy() {
        let src = Tensor::new(vec![2, 3], vec![0.1f32, -2.0, 3.3, 1e-7, 5.0, 6.0]).unwrap();
        assert_eq!(bilinear_resize(&src, 2, 3).unwrap(), src);
    }

    #[test]
    fn multichannel_resize_keeps_channels_apart() {
        let src = Tensor::new(vec![1, 2, 2], vec![0.0f32, 10.0, 1.0, 10.0]).unwrap();
        let out = bilinear_resize(&src, 1, 4).unwrap();
        assert_eq!(out.shape(), &[1, 4, 2]);
        assert_eq!(out.data(), &[0.0, 10.0, 0.25, 10.0, 0.75, 10.0, 1.0, 10.0]);
    }

    #[test]
    fn nearest_blocks() {
        let src = Tensor::new(vec![2, 2], vec![0i32, 1, 2, 3]).unwrap();
        let out = nearest_resize(&src, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [0, 0, 1, 1,
                    0, 0, 1, 1,
                    2, 2, 3, 3,
                    2, 2, 3, 3];
        assert_eq!(out.data(), &want);
    }

    #[test]
    fn nearest_identity_and_single_label() {
        let src = Tensor::new(vec![2, 3], vec![4i32, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(nearest_resize(&src, 2, 3).unwrap(), src);
        let one = Tensor::full(vec![3, 3], 2i32).unwrap();
        let out = nearest_resize(&one, 5, 8).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
        assert!(out.data().iter().all(|&v| v == 2));
    }

    proptest! {
        #[test]
        fn bilinear_respects_bounds(
            h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12,
            seed in proptest::collection::vec(-100.0f32..100.0, 36),
        ) {
            let src = Tensor::new(vec![h, w], seed[..h * w].to_vec()).unwrap();
            let (lo, hi) = src.min_max();
            let out = bilinear_resize(&src, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|&v| lo <= v && v <= hi));
        }

        #[test]
        fn nearest_never_invents_labels(
            h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12,
            seed in proptest::collection::vec(0i32..50, 36),
        ) {
            let src = Tensor::new(vec![h, w], seed[..h * w].to_vec()).unwrap();
            let out = nearest_resize(&src, oh, ow).unwrap();
            prop_assert!(out.data().iter().all(|v| src.data().contains(v)));
        }
    }
}
