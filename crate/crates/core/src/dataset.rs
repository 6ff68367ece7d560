//! In-memory image collections and batching.

use std::path::Path;

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::Result;
use crate::resample::{GridRect, Resampler};

/// A normalized CHW float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl Image {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Self {
        assert_eq!(data.len(), 3 * height * width, "CHW buffer size");
        Self { data, height, width }
    }

    /// Bilinear crop-and-resize of the pixel window `(x0, y0, w, h)`.
    pub fn crop_resize(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> Image {
        let r = Resampler::bilinear(
            (self.height, self.width),
            GridRect { x0, y0, w, h },
            (out_h, out_w),
        );
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * out_h * out_w);
        for c in 0..3 {
            let src: Vec<f64> = self.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .collect();
            out.extend(r.apply(&src, 1).into_iter().map(|v| v as f32));
        }
        Image::new(out, out_h, out_w)
    }
}

/// Per-channel pixel normalization applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PixelNorm {
    /// The `(0.5, 0.5)` convention of the ImageNet-21k ViT checkpoints.
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl PixelNorm {
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn apply(&self, rgb01: &mut [f32], plane: usize) {
        for c in 0..3 {
            for v in &mut rgb01[c * plane..(c + 1) * plane] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Reads an image file and resizes it to `size × size`.
pub fn load_image(path: &Path, size: usize, norm: &PixelNorm) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let img = image::imageops::resize(
        &img,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    norm.apply(&mut data, plane);
    Ok(Image::new(data, size, size))
}

/// Stacks images of one size into a batch tensor.
pub fn to_batch(images: &[&Image], device: &Device) -> Result<ImageTensor> {
    let (h, w) = (images[0].height, images[0].width);
    let bufs: Vec<&[f32]> = images.iter().map(|i| i.data.as_slice()).collect();
    ImageTensor::from_chw(&bufs, h, w, device)
}

/// Index batches for one epoch; shuffled from `(seed, epoch)` when requested.
pub fn epoch_batches(len: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
