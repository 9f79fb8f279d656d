//! Synthetic face data, labels, landmark maps and masks, plus persistence.

mod io;
mod manifest;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::tensor::Tensor;

pub use io::{load_image, load_raw, load_png, save_image, save_png, save_raw, ImageFormat};
pub use manifest::{generate_for_task, DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use split::{split_dataset, split_sizes, Splits};
pub use synth::{
    generate_dataset, generate_sample, generate_speaker_sequence, render_landmark_map,
    rerender_with_bits,
    FaceParams, FaceSample, Keypoint, Palette, RegionMaps, SynthFaceSpec, ATTRIBUTE_NAMES,
    MASK_BACKGROUND, MASK_FACE, PALETTE,
};

/// Row-major `H×W×C` image with every element in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(shape(format!("image {height}×{width} is smaller than 8×8")));
        }
        if channels != 1 && channels != 3 {
            return Err(shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(shape(format!(
                "buffer of {} values does not match {height}×{width}×{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(shape(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// `[1, C, H, W]` batch of one.
    pub fn to_batch(&self) -> Tensor {
        images_to_batch(std::slice::from_ref(self))
    }

    /// Sample `index` of an NCHW batch; values are clamped into `[0,1]`.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || index >= s[0] {
            return Err(shape(format!("cannot take sample {index} from {s:?}")));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let plane = h * w;
        let src = &batch.data()[index * c * plane..(index + 1) * c * plane];
        let mut data = vec![0f32; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = (src[ch * plane + p] as f32).clamp(0.0, 1.0);
            }
        }
        Self::new(h, w, c, data)
    }

    /// Largest absolute elementwise difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape("image shapes differ"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max))
    }

    /// ITU-R BT.601 luma as a one-channel image.
    pub fn to_luma(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

/// Stack equally-shaped images into an NCHW tensor.
pub fn images_to_batch(images: &[ImageTensor]) -> Tensor {
    assert!(!images.is_empty(), "empty image batch");
    let (h, w, c) = (images[0].height, images[0].width, images[0].channels);
    let plane = h * w;
    let mut data = Vec::with_capacity(images.len() * c * plane);
    for img in images {
        assert!(img.same_shape(&images[0]), "mixed image shapes in batch");
        for ch in 0..c {
            data.extend((0..plane).map(|p| img.data[p * c + ch] as f64));
        }
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

pub fn batch_to_images(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    (0..batch.shape()[0])
        .map(|i| ImageTensor::from_batch(batch, i))
        .collect()
}

/// Ordered binary attribute vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainLabel {
    pub bits: Vec<u8>,
}

impl DomainLabel {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(shape("domain label needs at least one attribute"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(shape("domain label bits must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Bitwise complement: the farthest domain in Hamming distance.
    pub fn inverse(&self) -> DomainLabel {
        DomainLabel {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Keep only the listed attribute positions, in the given order.
    pub fn select(&self, indices: &[usize]) -> DomainLabel {
        DomainLabel {
            bits: indices.iter().map(|&i| self.bits[i]).collect(),
        }
    }
}

/// `[N, K]` label tensor.
pub fn labels_to_tensor(labels: &[DomainLabel]) -> Tensor {
    let k = labels[0].len();
    let data = labels.iter().flat_map(|l| l.as_f64()).collect();
    Tensor::from_vec(&[labels.len(), k], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants_are_enforced() {
        assert!(ImageTensor::filled(7, 8, 3, 0.5).is_err());
        assert!(ImageTensor::filled(8, 8, 2, 0.5).is_err());
        assert!(ImageTensor::new(8, 8, 1, vec![1.5; 64]).is_err());
        assert!(ImageTensor::new(8, 8, 1, vec![0.5; 63]).is_err());
        assert!(ImageTensor::filled(8, 8, 1, 1.0).is_ok());
    }

    #[test]
    fn batch_layout_round_trips() {
        let data: Vec<f32> = (0..8 * 9 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        let img = ImageTensor::new(8, 9, 3, data).unwrap();
        let t = img.to_batch();
        assert_eq!(t.shape(), &[1, 3, 8, 9]);
        // channel-major inside the batch
        assert_eq!(t.data()[8 * 9] as f32, img.get(0, 0, 1));
        assert_eq!(ImageTensor::from_batch(&t, 0).unwrap(), img);
    }

    #[test]
    fn inverse_domain_is_bitwise_complement() {
        let c = DomainLabel::new(vec![1, 0, 1, 0, 0]).unwrap();
        assert_eq!(c.inverse().bits, vec![0, 1, 0, 1, 1]);
        assert_eq!(c.inverse().inverse(), c);
        assert!(DomainLabel::new(vec![2]).is_err());
    }
}
