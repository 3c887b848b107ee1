//! Binary PPM (P6) previews of maps, seeds and images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn ppm_bytes(h: usize, w: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Piecewise-linear jet colormap on `[0, 1]`.
pub fn jet(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [to_u8(ramp(3.0)), to_u8(ramp(2.0)), to_u8(ramp(1.0))]
}

/// Heatmap of a `[h, w]` map with values in `[0, 1]`.
pub fn heatmap_ppm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = map.hw()?;
    let rgb: Vec<u8> = map.data().iter().flat_map(|&v| jet(v)).collect();
    Ok(ppm_bytes(h, w, &rgb))
}

/// The PASCAL VOC label palette; 255 (ignore) is drawn white.
pub fn label_color(label: i32) -> [u8; 3] {
    if label == 255 {
        return [255, 255, 255];
    }
    let mut c = label.max(0) as u32;
    let mut rgb = [0u8; 3];
    for shift in (0..8).rev() {
        for (ch, out) in rgb.iter_mut().enumerate() {
            *out |= (((c >> ch) & 1) as u8) << shift;
        }
        c >>= 3;
    }
    rgb
}

pub fn labels_ppm(labels: &Tensor<i32>) -> Result<Vec<u8>> {
    let (h, w) = labels.hw()?;
    let rgb: Vec<u8> = labels.data().iter().flat_map(|&l| label_color(l)).collect();
    Ok(ppm_bytes(h, w, &rgb))
}

/// `[h, w, 3]` image with values in `[0, 1]`.
pub fn image_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image.hw()?;
    if image.channels()? != 3 || image.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [h, w, 3], got {:?}",
            image.shape()
        )));
    }
    let rgb: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
    Ok(ppm_bytes(h, w, &rgb))
}

pub fn write_ppm(bytes: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
