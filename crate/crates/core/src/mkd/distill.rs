use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::{l2_normalize, TokenSet};
use crate::error::{Error, Result};
use crate::mkd::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    SquaredError,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    None,
    /// Per-token standardization across channels, no affine parameters.
    Layer,
    /// Per-token unit L2 norm.
    #[default]
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormTarget {
    TeacherOnly,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMask {
    /// Score with the training-time masking configuration.
    #[default]
    SameAsTraining,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub loss: LossKind,
    pub normalization: Normalization,
    pub normalize: NormTarget,
    /// Number of final blocks distilled (1, 3 or 5 in the ablations).
    pub layers: usize,
    pub mask_mode: MaskMode,
    pub mask_ratio: f64,
    pub include_cls: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub smooth_l1_beta: f64,
    pub student_seed: Option<u64>,
    pub eval_mask: EvalMask,
    /// Seed for test-time random masking.
    pub eval_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SquaredError,
            normalization: Normalization::L2,
            normalize: NormTarget::Both,
            layers: 1,
            mask_mode: MaskMode::Guided,
            mask_ratio: 0.5,
            include_cls: true,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            smooth_l1_beta: 1.0,
            student_seed: None,
            eval_mask: EvalMask::SameAsTraining,
            eval_seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("at least one layer must be distilled"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::range(format!(
                "mask ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.loss == LossKind::SmoothL1 && !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth-L1 transition point must be positive"));
        }
        Ok(())
    }
}

/// Per-token distillation losses, already averaged over the distilled layers.
#[derive(Debug, Clone)]
pub struct DistillTerms {
    /// `(B, n)` loss of every compared spatial token, student row order.
    pub spatial: Tensor,
    /// `(B,)` classification-token loss, when included.
    pub cls: Option<Tensor>,
}

impl DistillTerms {
    /// `(B,)` mean over compared tokens per image.
    pub fn per_image(&self) -> Result<Tensor> {
        let n = self.spatial.dim(1)?;
        let sum = self.spatial.sum(1)?;
        Ok(match &self.cls {
            Some(c) => ((sum + c)? / (n + 1) as f64)?,
            None => (sum / n as f64)?,
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        Ok(self.per_image()?.mean_all()?)
    }
}

fn standardize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

fn normalize(x: &Tensor, how: Normalization) -> Result<Tensor> {
    match how {
        Normalization::None => Ok(x.clone()),
        Normalization::Layer => standardize(x),
        Normalization::L2 => l2_normalize(x),
    }
}

/// Per-token loss summed over channels; shapes `(…, D)` → `(…)`.
fn token_loss(t: &Tensor, s: &Tensor, cfg: &DistillConfig) -> Result<Tensor> {
    let diff = (t - s)?;
    let per_channel = match cfg.loss {
        LossKind::SquaredError => diff.sqr()?,
        LossKind::SmoothL1 => {
            let beta = cfg.smooth_l1_beta;
            let abs = diff.abs()?;
            let quad = (diff.sqr()? * (0.5 / beta))?;
            let lin = (&abs - 0.5 * beta)?;
            abs.lt(beta)?.where_cond(&quad, &lin)?
        }
    };
    Ok(per_channel.sum(D::Minus1)?)
}

/// Rows of teacher spatial tokens matching the student's visible positions.
fn aligned_teacher_rows(teacher: &TokenSet, student: &TokenSet, t_spatial: &Tensor) -> Result<Tensor> {
    match &student.visible_index {
        None => {
            if teacher.num_spatial() != student.num_spatial() {
                return Err(Error::config(format!(
                    "teacher has {} spatial tokens, student {} and no visible index",
                    teacher.num_spatial(),
                    student.num_spatial()
                )));
            }
            Ok(t_spatial.clone())
        }
        Some(rows) => {
            let (b, _, d) = t_spatial.dims3()?;
            let n = student.num_spatial();
            let flat: Vec<u32> = rows.iter().flatten().map(|&i| i as u32).collect();
            if flat.len() != b * n {
                return Err(Error::config("visible index does not match student tokens"));
            }
            if flat.iter().any(|&i| i as usize >= teacher.num_spatial()) {
                return Err(Error::config("visible index outside the teacher grid"));
            }
            let idx = Tensor::from_vec(flat, (b, n), t_spatial.device())?
                .unsqueeze(2)?
                .broadcast_as((b, n, d))?
                .contiguous()?;
            Ok(t_spatial.contiguous()?.gather(&idx, 1)?)
        }
    }
}

/// Per-token losses between teacher and student features.
///
/// Teacher rows are selected by the student's `visible_index`, so comparison
/// is by original grid position. Teacher features never carry gradient.
pub fn distill_terms(teacher: &TokenSet, student: &TokenSet, cfg: &DistillConfig) -> Result<DistillTerms> {
    if teacher.dim() != student.dim() {
        return Err(Error::config(format!(
            "teacher width {} differs from student width {}",
            teacher.dim(),
            student.dim()
        )));
    }
    if teacher.batch() != student.batch() {
        return Err(Error::config("teacher and student batch sizes differ"));
    }
    let k = cfg.layers;
    let (tl, sl) = (teacher.layers(), student.layers());
    if tl.len() < k || sl.len() < k {
        return Err(Error::config(format!(
            "{k} layers requested; teacher has {}, student {}",
            tl.len(),
            sl.len()
        )));
    }
    let student_norm = match cfg.normalize {
        NormTarget::Both => cfg.normalization,
        NormTarget::TeacherOnly => Normalization::None,
    };

    let mut spatial_acc: Option<Tensor> = None;
    let mut cls_acc: Option<Tensor> = None;
    for (t_layer, s_layer) in tl[tl.len() - k..].iter().zip(&sl[sl.len() - k..]) {
        let t_layer = t_layer.detach();
        let t_sp = normalize(&teacher.spatial_of(&t_layer)?, cfg.normalization)?;
        let t_sp = aligned_teacher_rows(teacher, student, &t_sp)?;
        let s_sp = normalize(&student.spatial_of(s_layer)?, student_norm)?;
        let sp = token_loss(&t_sp, &s_sp, cfg)?;
        spatial_acc = Some(match spatial_acc {
            Some(a) => (a + sp)?,
            None => sp,
        });
        if cfg.include_cls {
            let t_cls = normalize(&teacher.cls_of(&t_layer)?, cfg.normalization)?;
            let s_cls = normalize(&student.cls_of(s_layer)?, student_norm)?;
            let c = token_loss(&t_cls, &s_cls, cfg)?;
            cls_acc = Some(match cls_acc {
                Some(a) => (a + c)?,
                None => c,
            });
        }
    }
    let scale = 1.0 / k as f64;
    Ok(DistillTerms {
        spatial: (spatial_acc.expect("k >= 1") * scale)?,
        cls: cls_acc.map(|c| c * scale).transpose()?,
    })
}

/// Scalar distillation loss: mean over compared tokens (visible spatial
/// tokens plus, optionally, the classification token), averaged over images.
pub fn distill_features(teacher: &TokenSet, student: &TokenSet, cfg: &DistillConfig) -> Result<Tensor> {
    distill_terms(teacher, student, cfg)?.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn tokens(data: Vec<f32>, b: usize, t: usize, d: usize) -> TokenSet {
        let x = Tensor::from_vec(data, (b, t, d), &Device::Cpu).unwrap();
        TokenSet::new(vec![x], true, (1, t - 1), None)
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn identical_features_give_zero() {
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let t = tokens(data.clone(), 2, 5, 4);
        let s = tokens(data, 2, 5, 4);
        for loss in [LossKind::SquaredError, LossKind::SmoothL1] {
            for norm in [Normalization::None, Normalization::Layer, Normalization::L2] {
                let cfg = DistillConfig {
                    loss,
                    normalization: norm,
                    ..Default::default()
                };
                assert_eq!(scalar(&distill_features(&t, &s, &cfg).unwrap()), 0.0);
            }
        }
    }

    #[test]
    fn orthogonal_unit_tokens_give_two() {
        // Teacher tokens e0, student tokens e1.
        let t = tokens(vec![1., 0., 1., 0., 1., 0.], 1, 3, 2);
        let s = tokens(vec![0., 1., 0., 1., 0., 1.], 1, 3, 2);
        let v = scalar(&distill_features(&t, &s, &DistillConfig::default()).unwrap());
        assert!((v - 2.0).abs() < 1e-6);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let t = tokens(vec![0.0; 6], 1, 3, 2);
        let s = tokens(vec![0.0; 9], 1, 3, 3);
        assert!(matches!(
            distill_features(&t, &s, &DistillConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn visible_index_selects_teacher_rows() {
        // Teacher: cls + 3 spatial; student keeps grid positions 0 and 2.
        let t = tokens(vec![1., 0., 1., 0., 0., 1., 1., 0.], 1, 4, 2);
        let sx = Tensor::from_vec(vec![1f32, 0., 1., 0., 1., 0.], (1, 3, 2), &Device::Cpu).unwrap();
        let s = TokenSet::new(vec![sx], true, (1, 3), Some(vec![vec![0, 2]]));
        let v = scalar(&distill_features(&t, &s, &DistillConfig::default()).unwrap());
        assert_eq!(v, 0.0);
    }
}
