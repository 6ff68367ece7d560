use candle_core::{DType, Tensor, D};

use crate::defend::sinkhorn::Matrix;
use crate::error::{Error, Result};

/// Cosine similarities `(…, M, K)` between unit-norm crop features and
/// unit-norm prototypes.
#[derive(Debug, Clone)]
pub struct SimilarityLogits(pub Tensor);

impl SimilarityLogits {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.dims().last().copied().unwrap_or(0)
    }
}

/// `s[…, i, k] = ⟨z[…, i], p[k]⟩`, differentiable in both operands.
pub fn cosine_map(z: &Tensor, prototypes: &Tensor) -> Result<SimilarityLogits> {
    let (_, d) = prototypes.dims2()?;
    let dz = z.dims().last().copied().unwrap_or(0);
    if dz != d {
        return Err(Error::config(format!(
            "feature width {dz} does not match prototype width {d}"
        )));
    }
    let pt = prototypes.t()?;
    let s = match z.rank() {
        2 => z.matmul(&pt)?,
        3 => z.broadcast_matmul(&pt)?,
        r => return Err(Error::config(format!("cosine_map expects rank 2 or 3 features, got {r}"))),
    };
    Ok(SimilarityLogits(s))
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-row cross-entropy `−Σ_k t[i,k]·log softmax(s[i]/τ)[k]`, shape `(…, M)`.
/// The target never receives gradient.
pub fn dense_loss_rows(s: &SimilarityLogits, target: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if s.0.dims() != target.dims() {
        return Err(Error::config(format!(
            "logits {:?} and target {:?} differ in shape",
            s.0.dims(),
            target.dims()
        )));
    }
    let logp = log_softmax(&(&s.0 / tau)?)?;
    let t = target.detach().to_dtype(logp.dtype())?;
    Ok((t * logp)?.sum(D::Minus1)?.neg()?)
}

/// Mean of [`dense_loss_rows`] over every patch.
pub fn dense_loss(s: &SimilarityLogits, target: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(dense_loss_rows(s, target, tau)?.mean_all()?)
}

/// Stacks per-image target maps into a `(B, M, K)` tensor.
pub fn targets_tensor(maps: &[Matrix], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let (m, k) = (maps[0].rows, maps[0].cols);
    let mut flat = Vec::with_capacity(maps.len() * m * k);
    for q in maps {
        if q.rows != m || q.cols != k {
            return Err(Error::config("target maps differ in shape within a batch"));
        }
        flat.extend_from_slice(&q.data);
    }
    Ok(Tensor::from_vec(flat, (maps.len(), m, k), device)?.to_dtype(dtype)?)
}
