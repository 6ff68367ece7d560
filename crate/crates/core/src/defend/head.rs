use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{l2_normalize, linear, TokenSet};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// Three affine layers with GELU in between, L2-normalized output.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    params: ParamStore,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, seed: u64, device: &Device) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::config("projection head widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            device,
        };
        let mut params = ParamStore::new(device);
        let dims = [(in_dim, hidden), (hidden, hidden), (hidden, out_dim)];
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.insert(format!("layers.{i}.weight"), init.uniform(&[fan_out, fan_in], bound)?)?;
            params.insert(format!("layers.{i}.bias"), init.uniform(&[fan_out], bound)?)?;
        }
        Ok(Self {
            params,
            in_dim,
            hidden,
            out_dim,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars_where(|_| true)
    }

    /// Applies the head to `(…, in_dim)` features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dims().last().copied().unwrap_or(0);
        if d != self.in_dim {
            return Err(Error::config(format!(
                "projection head expects width {}, got {d}",
                self.in_dim
            )));
        }
        let mut h = x.clone();
        for i in 0..3 {
            let w = self.params.tensor(&format!("layers.{i}.weight"), true)?;
            let b = self.params.tensor(&format!("layers.{i}.bias"), true)?;
            h = linear(&h, &w, Some(&b))?;
            if i < 2 {
                h = h.gelu_erf()?;
            }
        }
        l2_normalize(&h)
    }
}

/// Projects the spatial tokens of every image to unit-norm features
/// `(B, n, out_dim)`. The classification token is not used.
pub fn project(tokens: &TokenSet, head: &ProjectionHead) -> Result<Tensor> {
    if tokens.num_spatial() == 0 {
        return Err(Error::config("cannot project an empty token set"));
    }
    head.forward(&tokens.spatial()?)
}

/// `K` learnable unit-norm prototype vectors.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    var: Var,
}

impl PrototypeBank {
    /// Unit-normalized isotropic Gaussian samples.
    pub fn new(k: usize, dim: usize, seed: u64, device: &Device) -> Result<Self> {
        if k < 2 {
            return Err(Error::range(format!("need at least 2 prototypes, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            device,
        };
        let raw = init.normal(&[k, dim], 1.0)?;
        let var = Var::from_tensor(&l2_normalize(&raw)?)?;
        Ok(Self { var })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, _) = t.dims2()?;
        if k < 2 {
            return Err(Error::range(format!("need at least 2 prototypes, got {k}")));
        }
        Ok(Self {
            var: Var::from_tensor(&l2_normalize(&t.to_dtype(DType::F32)?)?)?,
        })
    }

    pub fn k(&self) -> usize {
        self.var.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.var.dims()[1]
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn tensor(&self) -> &Tensor {
        self.var.as_tensor()
    }

    /// Re-projects every row onto the unit sphere.
    pub fn renormalize(&self) -> Result<()> {
        let t = l2_normalize(&self.var.as_tensor().detach())?;
        self.var.set(&t)?;
        Ok(())
    }

    pub fn row_norms(&self) -> Result<Vec<f32>> {
        Ok(self.var.as_tensor().sqr()?.sum(1)?.sqrt()?.to_vec1::<f32>()?)
    }
}
