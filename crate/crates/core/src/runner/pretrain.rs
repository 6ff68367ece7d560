//! Supervised multi-label glyph classification, used to give the toy
//! teacher semantically meaningful features before novelty training.

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::dataset::{epoch_batches, to_batch, Image};
use crate::encoder::{linear, BackboneHandle, Pretraining, VitConfig};
use crate::error::{Error, Result};
use crate::mkd::stream_seed;
use crate::params::{Init, ParamStore};
use crate::runner::config::PretrainConfig;
use crate::splits::{generate_synthetic, Partition};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean binary cross-entropy of `logits` against 0/1 `targets`.
fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // softplus(x) − y·x, with softplus(x) = max(x, 0) + ln(1 + e^{−|x|}).
    let relu = ((logits + logits.abs()?)? * 0.5)?;
    let soft = (relu + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((soft - (targets * logits)?)?.mean_all()?)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trains a fresh backbone of `cfg` to recognize which glyph categories a
/// synthetic scene contains. The returned backbone is frozen.
pub fn pretrain_teacher(
    arch: &str,
    vit: VitConfig,
    pcfg: &PretrainConfig,
    seed: u64,
    device: &Device,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<BackboneHandle> {
    let scenes = generate_synthetic(&pcfg.scenes, pcfg.images, Partition::Train)?;
    let vocab = pcfg.scenes.vocabulary;
    let mut backbone = BackboneHandle::random(arch, vit, stream_seed(seed, 10, 0), device)?;
    backbone.set_all_trainable();
    let mut head = ParamStore::new(device);
    {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 10, 1));
        let mut init = Init { rng: &mut rng, device };
        head.insert("weight", init.trunc_normal(&[vocab, backbone.embed_dim()], 0.02)?)?;
        head.insert("bias", init.zeros(&[vocab])?)?;
    }
    let mut vars = backbone.trainable_vars();
    vars.extend(head.vars_where(|_| true));
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: pcfg.learning_rate,
            weight_decay: pcfg.weight_decay,
            ..Default::default()
        },
    )?;
    let images: Vec<&Image> = scenes.iter().map(|s| &s.image).collect();
    let labels: Vec<Vec<f32>> = scenes
        .iter()
        .map(|s| {
            (0..vocab as u32)
                .map(|c| f32::from(u8::from(s.annotation.categories.contains(&c))))
                .collect()
        })
        .collect();
    let total_steps = pcfg.epochs * pcfg.images.div_ceil(pcfg.batch_size);
    let mut step = 0usize;
    for epoch in 0..pcfg.epochs {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let batches = epoch_batches(images.len(), pcfg.batch_size, true, seed, epoch);
        for idx in &batches {
            // Cosine learning-rate decay.
            let frac = step as f64 / total_steps.max(1) as f64;
            opt.set_learning_rate(pcfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
            let batch: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
            let x = to_batch(&batch, device)?;
            let flat: Vec<f32> = idx.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let y = Tensor::from_vec(flat, (idx.len(), vocab), device)?;
            let cls = backbone.encode(&x, None)?.cls()?;
            let logits = linear(&cls, head.var("weight")?.as_tensor(), Some(head.var("bias")?.as_tensor()))?;
            let loss = bce_with_logits(&logits, &y)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NumericalFailure {
                    layer: format!("pretraining loss at step {step}"),
                });
            }
            opt.backward_step(&loss)?;
            let pred = logits.detach().ge(0.0)?.to_dtype(DType::F32)?;
            let hits = pred.eq(&y)?.to_dtype(DType::F32)?.sum_all()?.to_scalar::<f32>()?;
            correct += hits as usize;
            seen += idx.len() * vocab;
            loss_sum += value;
            step += 1;
        }
        on_epoch(&PretrainEpoch {
            epoch,
            loss: loss_sum / batches.len() as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    backbone.freeze();
    backbone.set_pretraining(Pretraining::SyntheticSupervised);
    Ok(backbone)
}
