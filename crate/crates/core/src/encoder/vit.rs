//! Pre-norm vision transformer with timm-compatible parameter names.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::resample::{GridRect, Resampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    /// Native input side length; position embeddings cover this grid.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    #[serde(default = "default_true")]
    pub class_token: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-6
}

impl VitConfig {
    /// Known architecture ids. `vit_toy` is the desk-scale model used by the
    /// synthetic benchmarks.
    pub fn from_arch(id: &str) -> Result<Self> {
        let (image_size, patch_size, embed_dim, depth, num_heads) = match id {
            "vit_s16" => (224, 16, 384, 12, 6),
            "vit_b16" => (224, 16, 768, 12, 12),
            "vit_tiny16" => (224, 16, 192, 12, 3),
            "vit_toy" => (64, 8, 64, 4, 4),
            other => return Err(Error::UnsupportedArchitecture(other.to_string())),
        };
        Ok(Self {
            image_size,
            patch_size,
            embed_dim,
            depth,
            num_heads,
            mlp_dim: embed_dim * 4,
            class_token: true,
            ln_eps: 1e-6,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        Ok(())
    }
}

/// Output of one forward pass.
pub(crate) struct VitOutput {
    /// Outputs of the last requested blocks, oldest first, each
    /// `(B, T, D)`. The final entry has the closing LayerNorm applied.
    pub layers: Vec<Tensor>,
    /// Final-block attention probabilities `(B, heads, T, T)`.
    pub attention: Option<Tensor>,
}

pub(crate) fn init_params(cfg: &VitConfig, seed: u64, device: &Device) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        rng: &mut rng,
        device,
    };
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid();
    let extra = usize::from(cfg.class_token);
    let mut ps = ParamStore::new(device);
    ps.insert(
        "patch_embed.proj.weight",
        init.trunc_normal(&[d, 3, p, p], 0.02)?,
    )?;
    ps.insert("patch_embed.proj.bias", init.zeros(&[d])?)?;
    if cfg.class_token {
        ps.insert("cls_token", init.trunc_normal(&[1, 1, d], 0.02)?)?;
    }
    ps.insert(
        "pos_embed",
        init.trunc_normal(&[1, gr * gc + extra, d], 0.02)?,
    )?;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        ps.insert(format!("{b}norm1.weight"), init.ones(&[d])?)?;
        ps.insert(format!("{b}norm1.bias"), init.zeros(&[d])?)?;
        ps.insert(
            format!("{b}attn.qkv.weight"),
            init.trunc_normal(&[3 * d, d], 0.02)?,
        )?;
        ps.insert(format!("{b}attn.qkv.bias"), init.zeros(&[3 * d])?)?;
        ps.insert(
            format!("{b}attn.proj.weight"),
            init.trunc_normal(&[d, d], 0.02)?,
        )?;
        ps.insert(format!("{b}attn.proj.bias"), init.zeros(&[d])?)?;
        ps.insert(format!("{b}norm2.weight"), init.ones(&[d])?)?;
        ps.insert(format!("{b}norm2.bias"), init.zeros(&[d])?)?;
        ps.insert(
            format!("{b}mlp.fc1.weight"),
            init.trunc_normal(&[cfg.mlp_dim, d], 0.02)?,
        )?;
        ps.insert(format!("{b}mlp.fc1.bias"), init.zeros(&[cfg.mlp_dim])?)?;
        ps.insert(
            format!("{b}mlp.fc2.weight"),
            init.trunc_normal(&[d, cfg.mlp_dim], 0.02)?,
        )?;
        ps.insert(format!("{b}mlp.fc2.bias"), init.zeros(&[d])?)?;
    }
    ps.insert("norm.weight", init.ones(&[d])?)?;
    ps.insert("norm.bias", init.zeros(&[d])?)?;
    Ok(ps)
}

/// Block index of a parameter name, if it lives inside a transformer block.
pub(crate) fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

/// `x @ w^T + b` over the last dimension of a 2- or 3-d input.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let in_dim = *dims.last().expect("non-scalar");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().expect("non-scalar") = w.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

/// LayerNorm over the last dimension, built from differentiable primitives.
pub(crate) fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(w)?.broadcast_add(b)?)
}

/// Softmax over the last dimension with gradient support.
pub(crate) fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub(crate) struct VitView<'a> {
    pub cfg: &'a VitConfig,
    pub params: &'a ParamStore,
    pub trainable: &'a dyn Fn(&str) -> bool,
}

impl VitView<'_> {
    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.tensor(name, (self.trainable)(name))
    }

    /// Splits `(B, 3, H, W)` into `(B, N, 3·P·P)` patch vectors, channel-major
    /// within a patch to match the convolution weight layout.
    fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch_size;
        let (gh, gw) = (h / p, w / p);
        Ok(images
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?)
    }

    /// Patch position embeddings for a `grid`, bilinearly resampled from the
    /// native grid when sizes differ.
    fn patch_pos(&self, grid: (usize, usize)) -> Result<Tensor> {
        let pos = self.p("pos_embed")?;
        let extra = usize::from(self.cfg.class_token);
        let native = self.cfg.grid();
        let n0 = native.0 * native.1;
        let patch_pos = pos.narrow(1, extra, n0)?.squeeze(0)?;
        if grid == native {
            return Ok(patch_pos);
        }
        let r = Resampler::bilinear(native, GridRect::full(native.0, native.1), grid);
        let m = Tensor::from_vec(r.to_dense(), (grid.0 * grid.1, n0), pos.device())?
            .to_dtype(pos.dtype())?;
        Ok(m.matmul(&patch_pos)?)
    }

    fn check_finite(x: &Tensor, layer: &str) -> Result<()> {
        let s = x.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if s.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericalFailure {
                layer: layer.to_string(),
            })
        }
    }

    /// Runs the transformer. `keep` holds, per image, the grid indices of the
    /// patches that enter the blocks (`(B, n_keep)`, u32).
    pub fn forward(
        &self,
        images: &Tensor,
        keep: Option<&Tensor>,
        top_layers: usize,
        want_attention: bool,
    ) -> Result<VitOutput> {
        let cfg = self.cfg;
        let (b, _, h, w) = images.dims4()?;
        let grid = (h / cfg.patch_size, w / cfg.patch_size);
        let top_layers = top_layers.clamp(1, cfg.depth);

        let patches = self.patchify(images)?;
        let pw = self
            .p("patch_embed.proj.weight")?
            .reshape((cfg.embed_dim, 3 * cfg.patch_size * cfg.patch_size))?;
        let pb = self.p("patch_embed.proj.bias")?;
        let mut x = linear(&patches, &pw, Some(&pb))?;
        x = x.broadcast_add(&self.patch_pos(grid)?)?;
        if let Some(idx) = keep {
            let (_, n_keep) = idx.dims2()?;
            let idx = idx
                .unsqueeze(2)?
                .broadcast_as((b, n_keep, cfg.embed_dim))?
                .contiguous()?;
            x = x.contiguous()?.gather(&idx, 1)?;
        }
        if cfg.class_token {
            let cls = self
                .p("cls_token")?
                .broadcast_add(&self.p("pos_embed")?.narrow(1, 0, 1)?)?
                .broadcast_as((b, 1, cfg.embed_dim))?;
            x = Tensor::cat(&[&cls, &x], 1)?;
        }
        Self::check_finite(&x, "patch_embed")?;

        let mut layers = Vec::with_capacity(top_layers);
        let mut attention = None;
        for i in 0..cfg.depth {
            let last = i + 1 == cfg.depth;
            let (y, attn) = self.block(i, &x, want_attention && last)?;
            x = y;
            Self::check_finite(&x, &format!("blocks.{i}"))?;
            if attn.is_some() {
                attention = attn;
            }
            if i + top_layers >= cfg.depth && !last {
                layers.push(x.clone());
            }
        }
        let out = layer_norm(&x, &self.p("norm.weight")?, &self.p("norm.bias")?, cfg.ln_eps)?;
        Self::check_finite(&out, "norm")?;
        layers.push(out);
        Ok(VitOutput { layers, attention })
    }

    fn block(&self, i: usize, x: &Tensor, want_attention: bool) -> Result<(Tensor, Option<Tensor>)> {
        let cfg = self.cfg;
        let pre = format!("blocks.{i}.");
        let p = |s: &str| self.p(&format!("{pre}{s}"));
        let (b, t, d) = x.dims3()?;
        let heads = cfg.num_heads;
        let hd = d / heads;

        let hn = layer_norm(x, &p("norm1.weight")?, &p("norm1.bias")?, cfg.ln_eps)?;
        let qkv = linear(&hn, &p("attn.qkv.weight")?, Some(&p("attn.qkv.bias")?))?
            .reshape((b, t, 3, heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * (1.0 / (hd as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let attn = softmax(&q.matmul(&k.t()?)?)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let ctx = linear(&ctx, &p("attn.proj.weight")?, Some(&p("attn.proj.bias")?))?;
        let x = (x + ctx)?;

        let hn = layer_norm(&x, &p("norm2.weight")?, &p("norm2.bias")?, cfg.ln_eps)?;
        let hmid = linear(&hn, &p("mlp.fc1.weight")?, Some(&p("mlp.fc1.bias")?))?.gelu_erf()?;
        let mlp = linear(&hmid, &p("mlp.fc2.weight")?, Some(&p("mlp.fc2.bias")?))?;
        let x = (x + mlp)?;
        Ok((x, want_attention.then_some(attn)))
    }
}
