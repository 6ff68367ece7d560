//! Backbone adapter: patch tokenization, spatial features, classification-token
//! attention, selective unfreezing and token-dropping forward passes.

mod vit;

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mkd::MaskPlan;
use crate::params::ParamStore;

pub(crate) use vit::linear;
pub use vit::VitConfig;

/// A batch of images `(B, 3, H, W)`, normalized per backbone convention.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let (_, c, _, _) = pixels
            .dims4()
            .map_err(|_| Error::config(format!("expected B×3×H×W, got {:?}", pixels.dims())))?;
        if c != 3 {
            return Err(Error::config(format!("expected 3 channels, got {c}")));
        }
        let s = pixels.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Err(Error::NumericalFailure {
                layer: "input".into(),
            });
        }
        Ok(Self(pixels.to_dtype(DType::F32)?))
    }

    /// Builds a batch from CHW buffers of identical size.
    pub fn from_chw(images: &[&[f32]], height: usize, width: usize, device: &Device) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * 3 * height * width);
        for img in images {
            if img.len() != 3 * height * width {
                return Err(Error::config(format!(
                    "image buffer of {} values is not 3×{height}×{width}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Self::new(Tensor::from_vec(data, (images.len(), 3, height, width), device)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[3]
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self(self.0.narrow(0, start, len)?))
    }

    fn grid(&self, patch: usize) -> Result<(usize, usize)> {
        let (h, w) = (self.height(), self.width());
        if h % patch != 0 || w % patch != 0 {
            return Err(Error::config(format!(
                "image {h}×{w} not divisible by patch size {patch}"
            )));
        }
        Ok((h / patch, w / patch))
    }
}

/// Per-image token matrices for a batch.
///
/// Every layer tensor is `(B, T, D)`; when the backbone has a classification
/// token it sits at row 0 and the remaining rows are spatial.
#[derive(Debug, Clone)]
pub struct TokenSet {
    layers: Vec<Tensor>,
    has_cls: bool,
    pub grid: (usize, usize),
    /// Per image, original grid positions of the retained spatial rows.
    pub visible_index: Option<Vec<Vec<usize>>>,
}

impl TokenSet {
    pub fn new(
        layers: Vec<Tensor>,
        has_cls: bool,
        grid: (usize, usize),
        visible_index: Option<Vec<Vec<usize>>>,
    ) -> Self {
        Self {
            layers,
            has_cls,
            grid,
            visible_index,
        }
    }

    pub fn batch(&self) -> usize {
        self.last().dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.last().dims()[2]
    }

    pub fn num_spatial(&self) -> usize {
        self.last().dims()[1] - usize::from(self.has_cls)
    }

    pub fn has_cls(&self) -> bool {
        self.has_cls
    }

    /// All returned layers, oldest first. The last one is the final output.
    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("at least one layer")
    }

    pub fn spatial_of(&self, layer: &Tensor) -> Result<Tensor> {
        let n = self.num_spatial();
        Ok(layer.narrow(1, usize::from(self.has_cls), n)?)
    }

    /// Classification token of a layer; mean-pooled spatial tokens when the
    /// backbone has none.
    pub fn cls_of(&self, layer: &Tensor) -> Result<Tensor> {
        if self.has_cls {
            Ok(layer.narrow(1, 0, 1)?.squeeze(1)?)
        } else {
            Ok(layer.mean(1)?)
        }
    }

    /// Final-layer spatial tokens `(B, n, D)`.
    pub fn spatial(&self) -> Result<Tensor> {
        self.spatial_of(self.last())
    }

    /// Final-layer classification token `(B, D)`.
    pub fn cls(&self) -> Result<Tensor> {
        self.cls_of(self.last())
    }

    /// Grid position of spatial row `row` of image `b`.
    pub fn position(&self, b: usize, row: usize) -> usize {
        match &self.visible_index {
            Some(v) => v[b][row],
            None => row,
        }
    }
}

/// Attention mass from the classification token to each spatial patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSaliency {
    pub weights: Vec<f32>,
}

impl AttentionSaliency {
    /// Clamps negatives to zero and rescales to unit sum; uniform when the
    /// input carries no mass.
    pub fn normalized(mut weights: Vec<f32>) -> Self {
        for w in &mut weights {
            if !(*w > 0.0) {
                *w = 0.0;
            }
        }
        let total: f64 = weights.iter().map(|&w| w as f64).sum();
        if total > 0.0 {
            for w in &mut weights {
                *w = (*w as f64 / total) as f32;
            }
        } else {
            let n = weights.len().max(1) as f32;
            weights.iter_mut().for_each(|w| *w = 1.0 / n);
        }
        Self { weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pretraining {
    /// Supervised classification pretraining (ImageNet-21k style).
    Supervised,
    /// Self-distillation (DINO style).
    SelfDistilled,
    /// Supervised pretraining on the synthetic glyph vocabulary.
    SyntheticSupervised,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trainable {
    LastBlocks(usize),
    All,
}

/// A vision transformer plus its trainability mask.
#[derive(Debug, Clone)]
pub struct BackboneHandle {
    arch: String,
    pretraining: Pretraining,
    cfg: VitConfig,
    params: ParamStore,
    trainable: Trainable,
}

impl BackboneHandle {
    /// Freshly initialized weights, reproducible from `seed`. Fully frozen.
    pub fn random(arch: &str, cfg: VitConfig, seed: u64, device: &Device) -> Result<Self> {
        let params = vit::init_params(&cfg, seed, device)?;
        Ok(Self {
            arch: arch.to_string(),
            pretraining: Pretraining::Random,
            cfg,
            params,
            trainable: Trainable::LastBlocks(0),
        })
    }

    /// Known architecture with weights read from a safetensors checkpoint
    /// using timm parameter names. Extra keys (classifier heads) are ignored.
    pub fn from_checkpoint(
        arch: &str,
        cfg: VitConfig,
        path: &Path,
        pretraining: Pretraining,
        device: &Device,
    ) -> Result<Self> {
        let mut h = Self::random(arch, cfg, 0, device)?;
        h.params.load(path)?;
        h.pretraining = pretraining;
        Ok(h)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn pretraining(&self) -> Pretraining {
        self.pretraining
    }

    pub fn set_pretraining(&mut self, p: Pretraining) {
        self.pretraining = p;
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Makes exactly the final `last_k_layers` transformer blocks trainable.
    /// Patch and position embeddings, the class token and the closing
    /// LayerNorm stay frozen.
    pub fn set_trainable(&mut self, last_k_layers: usize) -> Result<()> {
        if last_k_layers > self.cfg.depth {
            return Err(Error::range(format!(
                "cannot unfreeze {last_k_layers} blocks of a depth-{} backbone",
                self.cfg.depth
            )));
        }
        self.trainable = Trainable::LastBlocks(last_k_layers);
        let first = self.cfg.depth - last_k_layers;
        log::info!(
            "{}: blocks {first}..{} trainable, {} frozen parameter tensors",
            self.arch,
            self.cfg.depth,
            self.params.names().filter(|n| !self.is_trainable(n)).count()
        );
        Ok(())
    }

    /// Every parameter trainable (student networks).
    pub fn set_all_trainable(&mut self) {
        self.trainable = Trainable::All;
    }

    pub fn freeze(&mut self) {
        self.trainable = Trainable::LastBlocks(0);
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self.trainable {
            Trainable::All => true,
            Trainable::LastBlocks(k) => {
                vit::block_of(name).is_some_and(|b| b + k >= self.cfg.depth)
            }
        }
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params.vars_where(|n| self.is_trainable(n))
    }

    pub fn checksum(&self) -> Result<String> {
        self.params.checksum(|_| true)
    }

    /// Checksum over the parameters the current mask keeps frozen.
    pub fn frozen_checksum(&self) -> Result<String> {
        self.params.checksum(|n| !self.is_trainable(n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        self.params.load(path)
    }

    /// Independent copy with fresh parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            pretraining: self.pretraining,
            cfg: self.cfg.clone(),
            params: self.params.deep_clone()?,
            trainable: self.trainable,
        })
    }

    fn keep_indices(&self, keep: &[MaskPlan], batch: usize, n: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
        if keep.len() != batch {
            return Err(Error::config(format!(
                "{} mask plans for a batch of {batch}",
                keep.len()
            )));
        }
        let mut rows = Vec::with_capacity(batch);
        for plan in keep {
            if plan.keep.len() != n {
                return Err(Error::config(format!(
                    "mask plan covers {} patches, image has {n}",
                    plan.keep.len()
                )));
            }
            rows.push(plan.kept_indices());
        }
        let n_keep = rows[0].len();
        if rows.iter().any(|r| r.len() != n_keep) {
            return Err(Error::config("mask plans in one batch must keep equally many patches"));
        }
        if n_keep == 0 {
            return Err(Error::config("mask plan keeps no patches"));
        }
        let flat: Vec<u32> = rows.iter().flatten().map(|&i| i as u32).collect();
        let t = Tensor::from_vec(flat, (batch, n_keep), self.device())?;
        Ok((t, rows))
    }

    fn run(
        &self,
        images: &ImageTensor,
        keep: Option<&[MaskPlan]>,
        top_layers: usize,
        want_attention: bool,
    ) -> Result<(TokenSet, Option<Tensor>)> {
        let grid = images.grid(self.cfg.patch_size)?;
        let n = grid.0 * grid.1;
        let (idx, visible) = match keep {
            Some(plans) => {
                let (t, rows) = self.keep_indices(plans, images.batch(), n)?;
                (Some(t), Some(rows))
            }
            None => (None, None),
        };
        let trainable = |name: &str| self.is_trainable(name);
        let view = vit::VitView {
            cfg: &self.cfg,
            params: &self.params,
            trainable: &trainable,
        };
        let out = view.forward(images.tensor(), idx.as_ref(), top_layers, want_attention)?;
        Ok((
            TokenSet::new(out.layers, self.cfg.class_token, grid, visible),
            out.attention,
        ))
    }

    /// Final-layer tokens. With a keep plan only the kept patch embeddings
    /// (with their position embeddings) enter the transformer blocks.
    pub fn encode(&self, images: &ImageTensor, keep: Option<&[MaskPlan]>) -> Result<TokenSet> {
        Ok(self.run(images, keep, 1, false)?.0)
    }

    /// Like [`encode`](Self::encode) but also returns the outputs of the
    /// last `top_layers` blocks (the final one normalized).
    pub fn encode_layers(
        &self,
        images: &ImageTensor,
        keep: Option<&[MaskPlan]>,
        top_layers: usize,
    ) -> Result<TokenSet> {
        if top_layers == 0 || top_layers > self.cfg.depth {
            return Err(Error::range(format!(
                "cannot return {top_layers} layers from a depth-{} backbone",
                self.cfg.depth
            )));
        }
        Ok(self.run(images, keep, top_layers, false)?.0)
    }

    /// Tokens and classification-token saliency from one unmasked pass.
    pub fn encode_with_attention(
        &self,
        images: &ImageTensor,
        top_layers: usize,
    ) -> Result<(TokenSet, Vec<AttentionSaliency>)> {
        if !self.cfg.class_token {
            return Err(Error::UnsupportedArchitecture(format!(
                "{} has no classification token",
                self.arch
            )));
        }
        let (tokens, attn) = self.run(images, None, top_layers.max(1), true)?;
        let attn = attn.expect("attention requested");
        Ok((tokens, saliency_from_attention(&attn)?))
    }

    /// Final-block attention from the classification token to every patch,
    /// averaged over heads, self-entry dropped, renormalized to unit sum.
    pub fn cls_attention(&self, images: &ImageTensor) -> Result<Vec<AttentionSaliency>> {
        let (_, sal) = self.encode_with_attention(images, 1)?;
        Ok(sal)
    }
}

fn saliency_from_attention(attn: &Tensor) -> Result<Vec<AttentionSaliency>> {
    let (_, _, t, _) = attn.dims4()?;
    // (B, heads, T, T) -> cls row over patches, mean over heads.
    let rows = attn
        .detach()
        .narrow(2, 0, 1)?
        .narrow(3, 1, t - 1)?
        .squeeze(2)?
        .mean(1)?
        .to_dtype(DType::F32)?;
    let rows = rows.to_vec2::<f32>()?;
    Ok(rows.into_iter().map(AttentionSaliency::normalized).collect())
}

/// L2-normalizes the last dimension with an epsilon-guarded norm.
pub(crate) fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()? + 1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BackboneHandle {
        let cfg = VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 3,
            num_heads: 2,
            mlp_dim: 32,
            class_token: true,
            ln_eps: 1e-6,
        };
        BackboneHandle::random("test", cfg, 7, &Device::Cpu).unwrap()
    }

    fn images(b: usize, side: usize) -> ImageTensor {
        let t = Tensor::randn(0f32, 1f32, (b, 3, side, side), &Device::Cpu).unwrap();
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn token_counts() {
        let m = toy();
        let ts = m.encode(&images(2, 32), None).unwrap();
        assert_eq!(ts.num_spatial(), 16);
        assert_eq!(ts.spatial().unwrap().dims(), &[2, 16, 16]);
        assert_eq!(ts.cls().unwrap().dims(), &[2, 16]);
        assert_eq!(ts.grid, (4, 4));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let m = toy();
        let err = m.encode(&images(1, 30), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn wrong_plan_length_is_rejected() {
        let m = toy();
        let plan = MaskPlan::keep_all(10);
        let err = m.encode(&images(1, 32), Some(&[plan])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn set_trainable_range() {
        let mut m = toy();
        assert!(matches!(m.set_trainable(4), Err(Error::Range(_))));
        m.set_trainable(3).unwrap();
        assert!(m.is_trainable("blocks.0.attn.qkv.weight"));
        assert!(!m.is_trainable("patch_embed.proj.weight"));
        assert!(!m.is_trainable("pos_embed"));
    }

    #[test]
    fn saliency_drops_cls_entry_and_renormalizes() {
        // One image, one head, T = 3 (cls + 2 patches).
        let attn = Tensor::new(&[[[[0.5f32, 0.3, 0.2], [0.1, 0.1, 0.8], [0.3, 0.3, 0.4]]]], &Device::Cpu)
            .unwrap();
        let s = saliency_from_attention(&attn).unwrap();
        assert!((s[0].weights[0] - 0.6).abs() < 1e-6);
        assert!((s[0].weights[1] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn non_cls_backbone_rejects_attention() {
        let mut cfg = toy().config().clone();
        cfg.class_token = false;
        let m = BackboneHandle::random("gap", cfg, 1, &Device::Cpu).unwrap();
        let ts = m.encode(&images(1, 32), None).unwrap();
        assert_eq!(ts.num_spatial(), 16);
        assert!(matches!(
            m.cls_attention(&images(1, 32)),
            Err(Error::UnsupportedArchitecture(_))
        ));
    }
}
