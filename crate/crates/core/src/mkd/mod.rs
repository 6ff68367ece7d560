//! Masked knowledge distillation: a randomly initialized student learns the
//! frozen teacher's final features from an attention-masked view.

mod distill;
mod mask;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::dataset::{epoch_batches, to_batch, Image};
use crate::encoder::{AttentionSaliency, BackboneHandle, ImageTensor, TokenSet};
use crate::error::{Error, Result};

pub use distill::{
    distill_features, distill_terms, DistillConfig, DistillTerms, EvalMask, LossKind, NormTarget,
    Normalization,
};
pub use mask::{build_mask, masked_count, student_forward_cost, MaskMode, MaskPlan};

/// Mixes a run seed with step and image indices into an independent stream seed.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Student network: the teacher's architecture, every parameter trainable,
/// weights drawn independently of the teacher.
#[derive(Debug, Clone)]
pub struct StudentModel(BackboneHandle);

impl StudentModel {
    pub fn init(teacher: &BackboneHandle, seed: u64) -> Result<Self> {
        let mut b = BackboneHandle::random(teacher.arch(), teacher.config().clone(), seed, teacher.device())?;
        b.set_all_trainable();
        Ok(Self(b))
    }

    /// A student that starts as an exact copy of `teacher`.
    pub fn copy_of(teacher: &BackboneHandle) -> Result<Self> {
        let mut b = teacher.deep_clone()?;
        b.set_all_trainable();
        Ok(Self(b))
    }

    pub fn backbone(&self) -> &BackboneHandle {
        &self.0
    }

    pub fn load(teacher: &BackboneHandle, path: &Path) -> Result<Self> {
        let s = Self::init(teacher, 0)?;
        s.0.load_weights(path)?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save(path)
    }
}

/// Masking plans for a batch; `None` when the student sees full inputs.
pub fn plans_for(
    saliency: &[AttentionSaliency],
    mode: MaskMode,
    ratio: f64,
    seed_of: impl Fn(usize) -> u64,
) -> Result<Option<Vec<MaskPlan>>> {
    if mode == MaskMode::None || masked_count(saliency.first().map_or(0, |s| s.len()), ratio) == 0 {
        return Ok(None);
    }
    saliency
        .iter()
        .enumerate()
        .map(|(i, s)| build_mask(s, ratio, mode, seed_of(i)))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// One teacher/student comparison: full teacher pass with attention, masking
/// from the teacher's saliency, masked student pass, per-token losses.
pub fn distill_pass(
    teacher: &BackboneHandle,
    student: &StudentModel,
    images: &ImageTensor,
    cfg: &DistillConfig,
    mode: MaskMode,
    seed_of: impl Fn(usize) -> u64,
) -> Result<(DistillTerms, TokenSet)> {
    let (t_tokens, saliency) = if mode == MaskMode::Guided || mode == MaskMode::Sampled {
        teacher.encode_with_attention(images, cfg.layers)?
    } else {
        let t = teacher.encode_layers(images, None, cfg.layers)?;
        let n = t.num_spatial();
        let uniform = vec![AttentionSaliency::normalized(vec![1.0; n]); images.batch()];
        (t, uniform)
    };
    let plans = plans_for(&saliency, mode, cfg.mask_ratio, seed_of)?;
    let s_tokens = student
        .backbone()
        .encode_layers(images, plans.as_deref(), cfg.layers)?;
    let terms = distill_terms(&t_tokens, &s_tokens, cfg)?;
    Ok((terms, s_tokens))
}

#[derive(Debug, Clone, Copy)]
pub struct MkdStepRecord {
    pub step: u64,
    pub loss: f64,
    pub student_tokens: usize,
    pub seconds: f64,
}

/// Single-writer trainer for the student.
pub struct MkdTrainer {
    pub student: StudentModel,
    opt: AdamW,
    cfg: DistillConfig,
    seed: u64,
    step: u64,
    dump_dir: Option<PathBuf>,
}

impl MkdTrainer {
    pub fn new(student: StudentModel, cfg: DistillConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            student.backbone().trainable_vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            student,
            opt,
            cfg,
            seed,
            step: 0,
            dump_dir: None,
        })
    }

    /// Where to write the student when a non-finite loss aborts training.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// One optimizer step on the distillation loss. The teacher must be
    /// fully frozen.
    pub fn step(&mut self, teacher: &BackboneHandle, images: &ImageTensor) -> Result<MkdStepRecord> {
        if !teacher.trainable_vars().is_empty() {
            return Err(Error::config("distillation teacher must be fully frozen"));
        }
        let start = Instant::now();
        let (seed, step) = (self.seed, self.step);
        let (terms, s_tokens) = distill_pass(
            teacher,
            &self.student,
            images,
            &self.cfg,
            self.cfg.mask_mode,
            |i| stream_seed(seed, step, i as u64),
        )?;
        let loss = terms.mean()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            if let Some(dir) = &self.dump_dir {
                std::fs::create_dir_all(dir)?;
                self.student.save(&dir.join("student_nonfinite.safetensors"))?;
            }
            return Err(Error::NumericalFailure {
                layer: format!("distillation loss at step {step}"),
            });
        }
        self.opt.backward_step(&loss)?;
        self.step += 1;
        Ok(MkdStepRecord {
            step,
            loss: value,
            student_tokens: s_tokens.num_spatial() + usize::from(s_tokens.has_cls()),
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// One pass over `data` in seeded shuffled order.
    pub fn run_epoch(
        &mut self,
        teacher: &BackboneHandle,
        data: &[Image],
        epoch: usize,
        mut on_step: impl FnMut(&MkdStepRecord),
    ) -> Result<f64> {
        let batches = epoch_batches(data.len(), self.cfg.batch_size, true, self.seed, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &data[i]).collect();
            let batch = to_batch(&imgs, teacher.device())?;
            let rec = self.step(teacher, &batch)?;
            total += rec.loss;
            on_step(&rec);
        }
        Ok(total / batches.len().max(1) as f64)
    }
}
