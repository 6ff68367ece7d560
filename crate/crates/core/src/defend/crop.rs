use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::defend::sinkhorn::Matrix;
use crate::error::{Error, Result};
use crate::resample::{GridRect, Resampler};

/// Pixel box of a crop within its source image, plus the grids involved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    /// Source image `(height, width)` in pixels.
    pub source: (usize, usize),
    pub patch: usize,
    /// Side length the crop is resized to before encoding.
    pub resize_to: usize,
}

impl CropGeometry {
    pub fn full(height: usize, width: usize, patch: usize, resize_to: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: width,
            h: height,
            source: (height, width),
            patch,
            resize_to,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (sh, sw) = self.source;
        if self.patch == 0 || sh % self.patch != 0 || sw % self.patch != 0 {
            return Err(Error::config(format!(
                "source {sh}×{sw} not divisible by patch {}",
                self.patch
            )));
        }
        if self.w < self.patch || self.h < self.patch {
            return Err(Error::range(format!(
                "crop {}×{} smaller than one {}-pixel patch",
                self.w, self.h, self.patch
            )));
        }
        if self.x0 + self.w > sw || self.y0 + self.h > sh {
            return Err(Error::range(format!(
                "crop ({}, {}, {}, {}) leaves the {sh}×{sw} source",
                self.x0, self.y0, self.w, self.h
            )));
        }
        if self.resize_to < self.patch || self.resize_to % self.patch != 0 {
            return Err(Error::config(format!(
                "crop size {} not a multiple of patch {}",
                self.resize_to, self.patch
            )));
        }
        Ok(())
    }

    pub fn source_grid(&self) -> (usize, usize) {
        (self.source.0 / self.patch, self.source.1 / self.patch)
    }

    pub fn crop_grid(&self) -> (usize, usize) {
        let g = self.resize_to / self.patch;
        (g, g)
    }

    /// The crop box in patch-grid units.
    pub fn patch_rect(&self) -> GridRect {
        let p = self.patch as f64;
        GridRect {
            x0: self.x0 as f64 / p,
            y0: self.y0 as f64 / p,
            w: self.w as f64 / p,
            h: self.h as f64 / p,
        }
    }

    /// Cuts the box out of `image` and resizes it to `resize_to²`.
    pub fn apply(&self, image: &Image) -> Image {
        image.crop_resize(
            self.x0 as f64,
            self.y0 as f64,
            self.w as f64,
            self.h as f64,
            self.resize_to,
            self.resize_to,
        )
    }
}

/// Random crops by area fraction and aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSampler {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub resize_to: usize,
}

impl Default for CropSampler {
    fn default() -> Self {
        Self {
            scale: (0.3, 0.9),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            resize_to: 96,
        }
    }
}

impl CropSampler {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::range(format!("crop scale range ({lo}, {hi}) invalid")));
        }
        let (lo, hi) = self.ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::range(format!("crop ratio range ({lo}, {hi}) invalid")));
        }
        Ok(())
    }

    /// Area uniform in `scale`, log-uniform aspect ratio; falls back to a
    /// centred square of the mean scale after ten rejected draws.
    pub fn sample<R: Rng>(&self, rng: &mut R, height: usize, width: usize, patch: usize) -> CropGeometry {
        let area = (height * width) as f64;
        for _ in 0..10 {
            let s = if self.scale.0 < self.scale.1 {
                rng.random_range(self.scale.0..=self.scale.1)
            } else {
                self.scale.0
            };
            let (lr0, lr1) = (self.ratio.0.ln(), self.ratio.1.ln());
            let r = if lr0 < lr1 { rng.random_range(lr0..=lr1).exp() } else { self.ratio.0 };
            let w = (area * s * r).sqrt().round() as usize;
            let h = (area * s / r).sqrt().round() as usize;
            if w >= patch && h >= patch && w <= width && h <= height {
                let x0 = rng.random_range(0..=width - w);
                let y0 = rng.random_range(0..=height - h);
                return CropGeometry {
                    x0,
                    y0,
                    w,
                    h,
                    source: (height, width),
                    patch,
                    resize_to: self.resize_to,
                };
            }
        }
        let s = (0.5 * (self.scale.0 + self.scale.1)).sqrt();
        let w = ((width as f64 * s).round() as usize).clamp(patch, width);
        let h = ((height as f64 * s).round() as usize).clamp(patch, height);
        CropGeometry {
            x0: (width - w) / 2,
            y0: (height - h) / 2,
            w,
            h,
            source: (height, width),
            patch,
            resize_to: self.resize_to,
        }
    }
}

/// Carries the full-image cluster map onto the crop's patch grid.
///
/// `q` is reshaped to `(rows, cols, K)`, the crop's sub-rectangle is
/// bilinearly resampled at the crop grid's cell centres, and interpolated
/// rows are renormalized to sum to one. Rows that land exactly on a source
/// cell are copied unchanged.
pub fn align_crop(q: &Matrix, geom: &CropGeometry) -> Result<Matrix> {
    geom.validate()?;
    let src = geom.source_grid();
    if q.rows != src.0 * src.1 {
        return Err(Error::config(format!(
            "cluster map has {} rows, source grid has {}",
            q.rows,
            src.0 * src.1
        )));
    }
    let dst = geom.crop_grid();
    let r = Resampler::bilinear(src, geom.patch_rect(), dst);
    let k = q.cols;
    let mut out = r.apply(&q.data, k);
    for cell in 0..dst.0 * dst.1 {
        if r.is_exact(cell) {
            continue;
        }
        let row = &mut out[cell * k..(cell + 1) * k];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Ok(Matrix::new(dst.0 * dst.1, k, out))
}
