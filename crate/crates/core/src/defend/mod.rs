//! Dense feature fine-tuning on normal data: patch features of a random
//! crop are trained to predict the balanced prototype assignment computed on
//! the full image.

mod crop;
mod head;
mod loss;
mod sinkhorn;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{epoch_batches, to_batch, Image};
use crate::encoder::BackboneHandle;
use crate::error::{Error, Result};
use crate::mkd::stream_seed;

pub use crop::{align_crop, CropGeometry, CropSampler};
pub use head::{project, ProjectionHead, PrototypeBank};
pub use loss::{cosine_map, dense_loss, dense_loss_rows, targets_tensor, SimilarityLogits};
pub use sinkhorn::{sinkhorn, ClusterAssignment, Matrix, SinkhornConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefendConfig {
    pub temperature: f64,
    /// Explicit prototype count. When absent the runner applies twice the
    /// number of observed categories.
    pub prototypes: Option<usize>,
    /// Use 5 prototypes regardless of the data.
    pub ablation_prototypes: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub trainable_blocks: usize,
    pub head_hidden: usize,
    pub head_out: usize,
    pub sinkhorn: SinkhornConfig,
    /// Balance each image separately instead of the whole batch.
    pub per_image_balancing: bool,
    pub crop: CropSampler,
}

impl Default for DefendConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            prototypes: None,
            ablation_prototypes: false,
            epochs: 3,
            batch_size: 32,
            backbone_lr: 1e-5,
            head_lr: 1e-4,
            weight_decay: 0.05,
            trainable_blocks: 2,
            head_hidden: 2048,
            head_out: 256,
            sinkhorn: SinkhornConfig::default(),
            per_image_balancing: false,
            crop: CropSampler::default(),
        }
    }
}

impl DefendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("defend epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("defend batch size must be at least 1"));
        }
        if self.sinkhorn.iterations == 0 {
            return Err(Error::config("sinkhorn iterations must be at least 1"));
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::config("sinkhorn regularizer must be positive"));
        }
        if let Some(k) = self.prototypes {
            if k < 2 {
                return Err(Error::range(format!("need at least 2 prototypes, got {k}")));
            }
        }
        if self.head_hidden == 0 || self.head_out == 0 {
            return Err(Error::config("projection head widths must be positive"));
        }
        self.crop.validate()
    }

    /// The prototype count actually used, given the observed-category rule.
    pub fn prototype_count(&self, observed_rule: usize) -> usize {
        if self.ablation_prototypes {
            5
        } else {
            self.prototypes.unwrap_or(observed_rule)
        }
    }
}

fn to_matrix(t: &Tensor) -> Result<Matrix> {
    let (n, k) = t.dims2()?;
    let data = t.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Matrix::new(n, k, data))
}

/// Balanced assignment of `(N, D)` unit-norm features to the prototypes.
/// The result is plain data and carries no gradient.
pub fn sinkhorn_assign(z: &Tensor, p: &PrototypeBank, cfg: &SinkhornConfig) -> Result<ClusterAssignment> {
    let (n, _) = z.dims2()?;
    if n == 0 {
        return Err(Error::config("sinkhorn_assign needs at least one feature row"));
    }
    let s = cosine_map(&z.detach(), &p.tensor().detach())?;
    sinkhorn(&to_matrix(s.tensor())?, cfg)
}

#[derive(Debug, Clone)]
pub struct DefendStepRecord {
    pub step: u64,
    pub loss: f64,
    pub per_image: Vec<f64>,
    pub residual: f64,
    pub seconds: f64,
}

/// Single-writer trainer owning backbone, head and prototypes.
pub struct DefendTrainer {
    pub backbone: BackboneHandle,
    pub head: ProjectionHead,
    pub prototypes: PrototypeBank,
    opt_backbone: Option<AdamW>,
    opt_head: AdamW,
    cfg: DefendConfig,
    seed: u64,
    step: u64,
    dump_dir: Option<PathBuf>,
}

impl DefendTrainer {
    /// Unfreezes the configured number of final blocks of `backbone` and
    /// creates a fresh head and prototype bank of size `k`.
    pub fn new(mut backbone: BackboneHandle, k: usize, cfg: DefendConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        backbone.set_trainable(cfg.trainable_blocks)?;
        let device = backbone.device().clone();
        let head = ProjectionHead::new(
            backbone.embed_dim(),
            cfg.head_hidden,
            cfg.head_out,
            stream_seed(seed, 1, 0),
            &device,
        )?;
        let prototypes = PrototypeBank::new(k, cfg.head_out, stream_seed(seed, 2, 0), &device)?;
        Self::from_parts(backbone, head, prototypes, cfg, seed)
    }

    pub fn from_parts(
        backbone: BackboneHandle,
        head: ProjectionHead,
        prototypes: PrototypeBank,
        cfg: DefendConfig,
        seed: u64,
    ) -> Result<Self> {
        if head.out_dim != prototypes.dim() {
            return Err(Error::config(format!(
                "head output width {} does not match prototype width {}",
                head.out_dim,
                prototypes.dim()
            )));
        }
        let bb_vars = backbone.trainable_vars();
        let opt_backbone = if bb_vars.is_empty() {
            None
        } else {
            Some(AdamW::new(
                bb_vars,
                ParamsAdamW {
                    lr: cfg.backbone_lr,
                    weight_decay: cfg.weight_decay,
                    ..Default::default()
                },
            )?)
        };
        let mut head_vars = head.vars();
        head_vars.push(prototypes.var().clone());
        let opt_head = AdamW::new(
            head_vars,
            ParamsAdamW {
                lr: cfg.head_lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            backbone,
            head,
            prototypes,
            opt_backbone,
            opt_head,
            cfg,
            seed,
            step: 0,
            dump_dir: None,
        })
    }

    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &DefendConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Cluster maps of the full images, one per image.
    fn full_image_targets(&self, full: &[&Image]) -> Result<(Vec<Matrix>, f64)> {
        let batch = to_batch(full, self.backbone.device())?;
        let tokens = self.backbone.encode(&batch, None)?;
        let z = project(&tokens, &self.head)?.detach();
        let (b, n, d) = z.dims3()?;
        if self.cfg.per_image_balancing {
            let mut out = Vec::with_capacity(b);
            let mut residual: f64 = 0.0;
            for i in 0..b {
                let a = sinkhorn_assign(&z.get(i)?, &self.prototypes, &self.cfg.sinkhorn)?;
                residual = residual.max(a.residual);
                out.push(a.q);
            }
            Ok((out, residual))
        } else {
            let a = sinkhorn_assign(&z.reshape((b * n, d))?, &self.prototypes, &self.cfg.sinkhorn)?;
            Ok(((0..b).map(|i| a.q.slice_rows(i * n, n)).collect(), a.residual))
        }
    }

    /// Crop geometry of image `i` at the current step.
    pub fn crop_for(&self, i: usize, image: &Image) -> CropGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, self.step, i as u64));
        self.cfg
            .crop
            .sample(&mut rng, image.height, image.width, self.backbone.patch_size())
    }

    /// Dense loss per image for the given crops, without updating anything.
    pub fn loss_terms(&self, images: &[&Image], crops: &[CropGeometry]) -> Result<(Tensor, f64)> {
        let (q, residual) = self.full_image_targets(images)?;
        let mut targets = Vec::with_capacity(images.len());
        let mut cropped = Vec::with_capacity(images.len());
        for ((img, geom), q) in images.iter().zip(crops).zip(&q) {
            targets.push(align_crop(q, geom)?);
            cropped.push(geom.apply(img));
        }
        let refs: Vec<&Image> = cropped.iter().collect();
        let crop_batch = to_batch(&refs, self.backbone.device())?;
        let tokens = self.backbone.encode(&crop_batch, None)?;
        let z = project(&tokens, &self.head)?;
        let s = cosine_map(&z, self.prototypes.tensor())?;
        let t = targets_tensor(&targets, s.tensor().dtype(), self.backbone.device())?;
        let rows = dense_loss_rows(&s, &t, self.cfg.temperature)?;
        Ok((rows.mean(1)?, residual))
    }

    /// One optimizer step on a batch of normal images.
    pub fn step(&mut self, images: &[&Image]) -> Result<DefendStepRecord> {
        if images.is_empty() {
            return Err(Error::config("empty defend batch"));
        }
        let start = Instant::now();
        let crops: Vec<CropGeometry> = images
            .iter()
            .enumerate()
            .map(|(i, img)| self.crop_for(i, img))
            .collect();
        let (per_image, residual) = self.loss_terms(images, &crops)?;
        let loss = per_image.mean_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            if let Some(dir) = &self.dump_dir {
                std::fs::create_dir_all(dir)?;
                self.save(&dir.join("defend_nonfinite.safetensors"))?;
            }
            return Err(Error::NumericalFailure {
                layer: format!("dense loss at step {}", self.step),
            });
        }
        let grads = loss.backward()?;
        if let Some(opt) = &mut self.opt_backbone {
            opt.step(&grads)?;
        }
        self.opt_head.step(&grads)?;
        self.prototypes.renormalize()?;
        let rec = DefendStepRecord {
            step: self.step,
            loss: value,
            per_image: per_image.to_dtype(DType::F64)?.to_vec1::<f64>()?,
            residual,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(rec)
    }

    /// One pass over `data` in seeded shuffled order.
    pub fn run_epoch(
        &mut self,
        data: &[Image],
        epoch: usize,
        mut on_step: impl FnMut(&DefendStepRecord),
    ) -> Result<f64> {
        let batches = epoch_batches(data.len(), self.cfg.batch_size, true, self.seed, epoch);
        let mut total = 0.0;
        for idx in &batches {
            let imgs: Vec<&Image> = idx.iter().map(|&i| &data[i]).collect();
            let rec = self.step(&imgs)?;
            total += rec.loss;
            on_step(&rec);
        }
        Ok(total / batches.len().max(1) as f64)
    }

    /// Stage-1 checkpoint: backbone weights, head and prototypes in one file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = self.backbone.params().to_map("backbone.");
        map.extend(self.head.params().to_map("head."));
        map.insert("prototypes".into(), self.prototypes.tensor().clone());
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Restores a checkpoint written by [`save`](Self::save).
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = candle_core::safetensors::load(path, self.backbone.device())?;
        self.backbone.params().load_map(&map, "backbone.")?;
        self.head.params().load_map(&map, "head.")?;
        let p = map
            .get("prototypes")
            .ok_or_else(|| Error::config("checkpoint lacks `prototypes`"))?;
        if p.dims() != self.prototypes.tensor().dims() {
            return Err(Error::config("checkpoint prototype shape differs from the configured bank"));
        }
        self.prototypes.var().set(&p.to_dtype(DType::F32)?)?;
        Ok(())
    }

    /// The tuned backbone, fully frozen, ready to act as a teacher.
    pub fn into_teacher(self) -> BackboneHandle {
        let mut b = self.backbone;
        b.freeze();
        b
    }
}

/// Loads only the backbone part of a stage-1 checkpoint into `backbone`.
pub fn load_tuned_backbone(backbone: &BackboneHandle, path: &Path) -> Result<()> {
    let map = candle_core::safetensors::load(path, backbone.device())?;
    backbone.params().load_map(&map, "backbone.")
}
