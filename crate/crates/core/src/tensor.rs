//! Dense row-major arrays of rank 1 to 4.
//!
//! Layout is channels-last throughout: feature maps are `[h, w, k]`,
//! single-channel maps are `[h, w]`.

use crate::error::{Error, Result};

/// Element types that can be stored in a [`Tensor`] and in an array file.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    /// Array-file dtype descriptor, e.g. `<f4`.
    const DESCR: &'static str;

    fn to_le_bytes4(self) -> [u8; 4];
    fn from_le_bytes4(bytes: [u8; 4]) -> Self;
    fn is_finite_value(self) -> bool;
}

impl Element for f32 {
    const DESCR: &'static str = "<f4";

    fn to_le_bytes4(self) -> [u8; 4] {
        self.to_le_bytes()
    }
    fn from_le_bytes4(bytes: [u8; 4]) -> Self {
        f32::from_le_bytes(bytes)
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
}

impl Element for i32 {
    const DESCR: &'static str = "<i4";

    fn to_le_bytes4(self) -> [u8; 4] {
        self.to_le_bytes()
    }
    fn from_le_bytes4(bytes: [u8; 4]) -> Self {
        i32::from_le_bytes(bytes)
    }
    fn is_finite_value(self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type IntTensor = Tensor<i32>;

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every extent must be >= 1".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn new_finite(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite_value()) {
            return Err(Error::NonFinite);
        }
        Self::new(shape, data)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::default())
    }

    pub fn from_fn2(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        check_shape(&[h, w])?;
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Ok(Self {
            shape: vec![h, w],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Spatial extent `(h, w)` of a rank-2 or rank-3 tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [h, w] | [h, w, _] => Ok((*h, *w)),
            other => Err(Error::ShapeMismatch(format!(
                "expected [h, w] or [h, w, c], got {other:?}"
            ))),
        }
    }

    /// Channel count: 1 for rank 2, the last extent for rank 3.
    pub fn channels(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [_, _] => Ok(1),
            [_, _, c] => Ok(*c),
            other => Err(Error::ShapeMismatch(format!(
                "expected [h, w] or [h, w, c], got {other:?}"
            ))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }
}

impl Tensor<f32> {
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_value(&self) -> f32 {
        self.min_max().1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first maximal element in row-major order.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Affine rescale to `[0, 1]`. Constant inputs map to all zeros.
pub fn minmax_normalize(t: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = t.min_max();
    if hi <= lo {
        return t.map(|_| 0.0);
    }
    let lo = f64::from(lo);
    let span = f64::from(hi) - lo;
    t.map(|v| {
        let x = ((f64::from(v) - lo) / span) as f32;
        x.clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new_finite(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn normalize_affine() {
        let t = Tensor::new(vec![3], vec![2.0f32, 4.0, 6.0]).unwrap();
        assert_eq!(minmax_normalize(&t).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let t = Tensor::full(vec![2, 3], 7.25f32).unwrap();
        assert!(minmax_normalize(&t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_idempotent_on_unit_range() {
        let t = Tensor::new(vec![4], vec![0.0f32, 0.3, 1.0, 0.77]).unwrap();
        assert_eq!(minmax_normalize(&t), t);
    }
}
