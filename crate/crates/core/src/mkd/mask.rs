use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::AttentionSaliency;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Student sees every patch.
    None,
    /// Uniform sample without replacement.
    Random,
    /// Drop the highest-saliency patches.
    #[default]
    Guided,
    /// Sample dropped patches with probability proportional to saliency.
    Sampled,
}

/// Per-patch keep/drop decision for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub keep: Vec<bool>,
    pub ratio: f64,
    pub mode: MaskMode,
}

impl MaskPlan {
    pub fn keep_all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            ratio: 0.0,
            mode: MaskMode::None,
        }
    }

    fn from_masked(n: usize, masked: impl IntoIterator<Item = usize>, ratio: f64, mode: MaskMode) -> Self {
        let mut keep = vec![true; n];
        for i in masked {
            keep[i] = false;
        }
        Self { keep, ratio, mode }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Kept grid positions in increasing order.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// `round(ratio · n)`, half away from zero.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::range(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Builds the keep/drop plan for one image.
///
/// `seed` only matters for the random and sampled modes.
pub fn build_mask(attn: &AttentionSaliency, ratio: f64, mode: MaskMode, seed: u64) -> Result<MaskPlan> {
    check_ratio(ratio)?;
    let n = attn.len();
    if mode == MaskMode::None {
        return Ok(MaskPlan::keep_all(n));
    }
    let m = masked_count(n, ratio);
    let plan = match mode {
        MaskMode::None => unreachable!(),
        MaskMode::Guided => {
            let mut order: Vec<usize> = (0..n).collect();
            // Highest saliency first; ties go to the lower patch index.
            order.sort_by(|&a, &b| {
                attn.weights[b]
                    .total_cmp(&attn.weights[a])
                    .then(a.cmp(&b))
            });
            MaskPlan::from_masked(n, order.into_iter().take(m), ratio, mode)
        }
        MaskMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            MaskPlan::from_masked(n, index::sample(&mut rng, n, m), ratio, mode)
        }
        MaskMode::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = &attn.weights;
            let picked = index::sample_weighted(&mut rng, n, |i| w[i].max(0.0) as f64 + 1e-12, m)
                .map_err(|e| Error::config(format!("attention-proportional sampling: {e}")))?;
            MaskPlan::from_masked(n, picked, ratio, mode)
        }
    };
    Ok(plan)
}

/// Tokens the student processes per image: kept patches plus the
/// classification token.
pub fn student_forward_cost(n: usize, ratio: f64) -> usize {
    n - masked_count(n, ratio) + 1
}
