use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyRecord {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

impl NoveltyRecord {
    pub fn new(id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

struct RankSums {
    n_normal: usize,
    n_abnormal: usize,
    /// Sum of abnormal midranks (1-based).
    abnormal_ranks: f64,
    /// `Σ (t³ − t)` over tie groups.
    tie_term: f64,
}

fn rank_sums(records: &[NoveltyRecord]) -> Result<RankSums> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::UndefinedMetric(format!("non-finite score for `{}`", r.id)));
    }
    let n_abnormal = records.iter().filter(|r| r.label == Label::Abnormal).count();
    let n_normal = records.len() - n_abnormal;
    if n_abnormal == 0 || n_normal == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both labels; got {n_normal} normal and {n_abnormal} abnormal"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut abnormal_ranks = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && records[order[j]].score == records[order[i]].score {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let mid = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        for &k in &order[i..j] {
            if records[k].label == Label::Abnormal {
                abnormal_ranks += mid;
            }
        }
        i = j;
    }
    Ok(RankSums {
        n_normal,
        n_abnormal,
        abnormal_ranks,
        tie_term,
    })
}

/// Mann–Whitney statistic: the number of (abnormal, normal) pairs in which
/// the abnormal sample scores higher, ties counting one half.
fn u_statistic(r: &RankSums) -> f64 {
    let na = r.n_abnormal as f64;
    r.abnormal_ranks - na * (na + 1.0) / 2.0
}

/// Area under the ROC curve with abnormal as the positive class, computed
/// exactly from midranks.
pub fn auroc(records: &[NoveltyRecord]) -> Result<f64> {
    let r = rank_sums(records)?;
    Ok(u_statistic(&r) / (r.n_abnormal as f64 * r.n_normal as f64))
}

/// One-sided rank-sum test p-value for "abnormal scores exceed normal
/// scores", normal approximation with tie and continuity corrections.
pub fn rank_test_p(records: &[NoveltyRecord]) -> Result<f64> {
    let r = rank_sums(records)?;
    let (na, nn) = (r.n_abnormal as f64, r.n_normal as f64);
    let n = na + nn;
    let mean = na * nn / 2.0;
    let var = na * nn / 12.0 * ((n + 1.0) - r.tie_term / (n * (n - 1.0)));
    if !(var > 0.0) {
        return Ok(1.0);
    }
    let z = (u_statistic(&r) - mean - 0.5) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok(1.0 - std_normal.cdf(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        if scores.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                median: f64::NAN,
                max: f64::NAN,
            };
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        Self {
            count: m,
            mean,
            std: var.sqrt(),
            min: sorted[0],
            median,
            max: sorted[m - 1],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(scores: &[f64], labels: &[Label]) -> Vec<NoveltyRecord> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| NoveltyRecord::new(i.to_string(), s, l))
            .collect()
    }

    use Label::{Abnormal as A, Normal as N};

    #[test]
    fn separated_scores() {
        let r = recs(&[0.1, 0.2, 0.8, 0.9], &[N, N, A, A]);
        assert_eq!(auroc(&r).unwrap(), 1.0);
    }

    #[test]
    fn all_tied() {
        let r = recs(&[0.3; 5], &[N, A, N, A, A]);
        assert_eq!(auroc(&r).unwrap(), 0.5);
    }

    #[test]
    fn hand_example() {
        let r = recs(&[0.1, 0.4, 0.35, 0.8], &[N, N, A, A]);
        assert_eq!(auroc(&r).unwrap(), 0.75);
    }

    #[test]
    fn single_label_is_undefined() {
        let r = recs(&[0.1, 0.4], &[N, N]);
        assert!(matches!(auroc(&r), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn strong_separation_is_significant() {
        let scores: Vec<f64> = (0..60).map(f64::from).collect();
        let labels: Vec<Label> = (0..60).map(|i| if i < 30 { N } else { A }).collect();
        let p = rank_test_p(&recs(&scores, &labels)).unwrap();
        assert!(p < 1e-6);
        let flipped: Vec<Label> = labels.iter().map(|l| l.flipped()).collect();
        assert!(rank_test_p(&recs(&scores, &flipped)).unwrap() > 0.99);
    }

    #[test]
    fn summary_statistics() {
        let s = ScoreSummary::of(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.mean, 2.5);
        assert_eq!((s.min, s.max), (1.0, 4.0));
    }
}
