//! Test-time novelty scores, AUROC evaluation and per-patch discrepancy maps.

mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneHandle, ImageTensor};
use crate::error::{Error, Result};
use crate::mkd::{distill_pass, DistillConfig, EvalMask, MaskMode, StudentModel};
use crate::resample::{GridRect, Resampler};

pub use metrics::{auroc, rank_test_p, Label, NoveltyRecord, ScoreSummary};

/// A novelty score split into its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// The distillation loss of the image, i.e. the novelty score.
    pub total: f64,
    /// Mean over the compared spatial tokens only.
    pub spatial: f64,
    pub cls: Option<f64>,
    pub compared_patches: usize,
}

/// Mask mode used when scoring under `cfg`.
pub fn eval_mode(cfg: &DistillConfig) -> MaskMode {
    match cfg.eval_mask {
        EvalMask::SameAsTraining => cfg.mask_mode,
        EvalMask::None => MaskMode::None,
    }
}

fn check_pair(teacher: &BackboneHandle, student: &StudentModel) -> Result<()> {
    let s = student.backbone();
    if teacher.config() != s.config() {
        return Err(Error::config(format!(
            "teacher `{}` and student `{}` architectures differ",
            teacher.arch(),
            s.arch()
        )));
    }
    Ok(())
}

/// Per-image novelty scores with their token breakdown and per-patch terms.
///
/// Uses the same teacher/student pass and loss as training. Random test-time
/// masks draw from `cfg.eval_seed` for every image, so an image's score does
/// not depend on its batch neighbours.
pub fn score_batch(
    images: &ImageTensor,
    teacher: &BackboneHandle,
    student: &StudentModel,
    cfg: &DistillConfig,
) -> Result<(Vec<ScoreBreakdown>, Vec<DiscrepancyMap>)> {
    check_pair(teacher, student)?;
    let seed = cfg.eval_seed;
    let (terms, s_tokens) = distill_pass(teacher, student, images, cfg, eval_mode(cfg), |_| seed)?;
    let spatial = terms.spatial.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let total = terms.per_image()?.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let cls = match &terms.cls {
        Some(c) => Some(c.detach().to_dtype(DType::F64)?.to_vec1::<f64>()?),
        None => None,
    };
    let grid = s_tokens.grid;
    let mut out = Vec::with_capacity(total.len());
    let mut maps = Vec::with_capacity(total.len());
    for (b, row) in spatial.iter().enumerate() {
        let mut values = vec![None; grid.0 * grid.1];
        for (r, v) in row.iter().enumerate() {
            values[s_tokens.position(b, r)] = Some(*v);
        }
        out.push(ScoreBreakdown {
            total: total[b],
            spatial: row.iter().sum::<f64>() / row.len() as f64,
            cls: cls.as_ref().map(|c| c[b]),
            compared_patches: row.len(),
        });
        maps.push(DiscrepancyMap { grid, values });
    }
    Ok((out, maps))
}

/// Novelty score of every image in the batch; higher is more novel.
pub fn novelty_score(
    images: &ImageTensor,
    teacher: &BackboneHandle,
    student: &StudentModel,
    cfg: &DistillConfig,
) -> Result<Vec<f64>> {
    Ok(score_batch(images, teacher, student, cfg)?
        .0
        .into_iter()
        .map(|s| s.total)
        .collect())
}

/// Per-patch discrepancy maps for every image in the batch.
pub fn discrepancy_map(
    images: &ImageTensor,
    teacher: &BackboneHandle,
    student: &StudentModel,
    cfg: &DistillConfig,
) -> Result<Vec<DiscrepancyMap>> {
    Ok(score_batch(images, teacher, student, cfg)?.1)
}

/// Normalized feature distance of every patch on the patch grid; masked
/// patches are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMap {
    pub grid: (usize, usize),
    pub values: Vec<Option<f64>>,
}

impl DiscrepancyMap {
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.grid.1 + col]
    }

    pub fn visible_mean(&self) -> f64 {
        let v: Vec<f64> = self.values.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean over visible patches inside the cell rectangle `rows × cols`.
    pub fn region_mean(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in rows {
            for c in cols.clone() {
                if let Some(v) = self.get(r, c) {
                    sum += v;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Bilinear upsampling to `height × width` pixels; masked patches take
    /// the value 0 before interpolation.
    pub fn upsample(&self, height: usize, width: usize) -> Vec<f64> {
        let src: Vec<f64> = self.values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let r = Resampler::bilinear(self.grid, GridRect::full(self.grid.0, self.grid.1), (height, width));
        r.apply(&src, 1)
    }

    /// Writes a heat-colored PNG. Values are scaled by `vmax` (the map's own
    /// maximum when absent); masked patches are drawn gray.
    pub fn write_png(&self, path: &Path, pixels_per_patch: usize, vmax: Option<f64>) -> Result<()> {
        let (gh, gw) = self.grid;
        let (h, w) = (gh * pixels_per_patch, gw * pixels_per_patch);
        let top = vmax
            .unwrap_or_else(|| self.values.iter().flatten().copied().fold(0.0, f64::max))
            .max(1e-12);
        let up = self.upsample(h, w);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let cell = (y / pixels_per_patch) * gw + x / pixels_per_patch;
                let px = match self.values[cell] {
                    None => [128, 128, 128],
                    Some(_) => heat((up[y * w + x] / top).clamp(0.0, 1.0)),
                };
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        img.save(path)?;
        Ok(())
    }
}

/// Black to red to yellow to white.
fn heat(t: f64) -> [u8; 3] {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub normal: usize,
    pub abnormal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    /// One-sided rank-sum test that abnormal scores exceed normal ones.
    pub rank_test_p: f64,
    pub counts: LabelCounts,
    pub normal: ScoreSummary,
    pub abnormal: ScoreSummary,
    pub config_hash: String,
    /// Checkpoint role to content checksum.
    pub checkpoints: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_records(
        records: &[NoveltyRecord],
        config_hash: &str,
        checkpoints: BTreeMap<String, String>,
    ) -> Result<Self> {
        let scores = |l: Label| -> Vec<f64> {
            records.iter().filter(|r| r.label == l).map(|r| r.score).collect()
        };
        let (n, a) = (scores(Label::Normal), scores(Label::Abnormal));
        Ok(Self {
            auroc: auroc(records)?,
            rank_test_p: rank_test_p(records)?,
            counts: LabelCounts {
                normal: n.len(),
                abnormal: a.len(),
            },
            normal: ScoreSummary::of(&n),
            abnormal: ScoreSummary::of(&a),
            config_hash: config_hash.to_string(),
            checkpoints,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    score: f64,
    label: Label,
    config_hash: String,
}

/// Writes `id,score,label,config_hash` rows.
pub fn write_scores_csv(path: &Path, records: &[NoveltyRecord], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(ScoreRow {
            id: r.id.clone(),
            score: r.score,
            label: r.label,
            config_hash: config_hash.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<NoveltyRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row?;
            Ok(NoveltyRecord::new(row.id, row.score, row.label))
        })
        .collect()
}
