//! Bilinear resampling between regular grids.
//!
//! One operator serves three callers: pixel crops resized for the dense
//! stage, cluster maps carried from the full-image patch grid onto a crop's
//! patch grid, and position embeddings interpolated to a new grid size.
//! Sampling follows the half-pixel-center convention (`align_corners=false`).

/// Axis-aligned rectangle in continuous source-grid units (one unit = one cell).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl GridRect {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            w: cols as f64,
            h: rows as f64,
        }
    }
}

/// Sparse linear map from a `src` grid onto a `dst` grid.
#[derive(Debug, Clone)]
pub struct Resampler {
    pub src: (usize, usize),
    pub dst: (usize, usize),
    /// For every destination cell (row-major): `(source cell, weight)` pairs.
    taps: Vec<Vec<(usize, f64)>>,
}

fn axis_taps(start: f64, extent: f64, n_dst: usize, n_src: usize, i: usize) -> [(usize, f64); 2] {
    let pos = start + (i as f64 + 0.5) * extent / n_dst as f64 - 0.5;
    let pos = pos.clamp(0.0, (n_src - 1) as f64);
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let hi = (lo + 1).min(n_src - 1);
    [(lo, 1.0 - frac), (hi, frac)]
}

impl Resampler {
    /// Samples the `rect` sub-window of `src` at the cell centres of `dst`.
    pub fn bilinear(src: (usize, usize), rect: GridRect, dst: (usize, usize)) -> Self {
        let (src_rows, src_cols) = src;
        let (dst_rows, dst_cols) = dst;
        let mut taps = Vec::with_capacity(dst_rows * dst_cols);
        for i in 0..dst_rows {
            let ys = axis_taps(rect.y0, rect.h, dst_rows, src_rows, i);
            for j in 0..dst_cols {
                let xs = axis_taps(rect.x0, rect.w, dst_cols, src_cols, j);
                let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(y, wy) in &ys {
                    for &(x, wx) in &xs {
                        let w = wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        let idx = y * src_cols + x;
                        match cell.iter_mut().find(|(k, _)| *k == idx) {
                            Some(slot) => slot.1 += w,
                            None => cell.push((idx, w)),
                        }
                    }
                }
                taps.push(cell);
            }
        }
        Self { src, dst, taps }
    }

    /// True when destination cell `k` copies exactly one source cell.
    pub fn is_exact(&self, k: usize) -> bool {
        matches!(self.taps[k].as_slice(), [(_, w)] if *w == 1.0)
    }

    pub fn taps(&self, k: usize) -> &[(usize, f64)] {
        &self.taps[k]
    }

    /// Applies the map to channel-last data (`src cells × channels`).
    pub fn apply(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.taps.len() * channels];
        for (k, cell) in self.taps.iter().enumerate() {
            let row = &mut out[k * channels..(k + 1) * channels];
            if let [(idx, w)] = cell.as_slice() {
                if *w == 1.0 {
                    row.copy_from_slice(&data[idx * channels..(idx + 1) * channels]);
                    continue;
                }
            }
            for &(idx, w) in cell {
                let src = &data[idx * channels..(idx + 1) * channels];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }

    /// Dense `dst cells × src cells` matrix, row-major.
    pub fn to_dense(&self) -> Vec<f32> {
        let n_src = self.src.0 * self.src.1;
        let mut m = vec![0.0f32; self.taps.len() * n_src];
        for (k, cell) in self.taps.iter().enumerate() {
            for &(idx, w) in cell {
                m[k * n_src + idx] = w as f32;
            }
        }
        m
    }
}
