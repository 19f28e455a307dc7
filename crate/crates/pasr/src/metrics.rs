//! HR@k and NDCG@k over the 101-candidate ranking protocol.

use crate::error::{PasrError, Result};
use crate::model::Pasr;
use crate::pipeline::EvalSplit;

/// Rank of one user's true next location among the candidates
/// (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankOutcome {
    pub user: usize,
    pub rank: usize,
}

/// Fraction of users whose target ranked within the top k.
pub fn hit_rate_at_k(outcomes: &[RankOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(PasrError::EmptyInput("hit_rate_at_k"));
    }
    if k == 0 {
        return Err(PasrError::Domain("k must be positive".into()));
    }
    let hits = outcomes.iter().filter(|o| o.rank <= k).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Mean discounted gain of the single relevant item: 1/log2(rank+1)
/// when the target ranks within the top k, 0 otherwise. The ideal
/// value is 1, so the normalization is implicit.
pub fn ndcg_at_k(outcomes: &[RankOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(PasrError::EmptyInput("ndcg_at_k"));
    }
    if k == 0 {
        return Err(PasrError::Domain("k must be positive".into()));
    }
    let sum: f64 = outcomes
        .iter()
        .map(|o| if o.rank <= k { 1.0 / ((o.rank as f64) + 1.0).log2() } else { 0.0 })
        .sum();
    Ok(sum / outcomes.len() as f64)
}

/// The four headline metrics of the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTable {
    pub hr5: f64,
    pub ndcg5: f64,
    pub hr10: f64,
    pub ndcg10: f64,
}

impl MetricTable {
    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tvalue\nHR@5\t{:.6}\nNDCG@5\t{:.6}\nHR@10\t{:.6}\nNDCG@10\t{:.6}\n",
            self.hr5, self.ndcg5, self.hr10, self.ndcg10
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "hr5={:.6}\nndcg5={:.6}\nhr10={:.6}\nndcg10={:.6}\n",
            self.hr5, self.ndcg5, self.hr10, self.ndcg10
        )
    }
}

/// Rank every eval case's target among (target + sampled negatives).
pub fn rank_split(model: &Pasr, split: &EvalSplit) -> Result<Vec<RankOutcome>> {
    let mut outcomes = Vec::with_capacity(split.cases.len());
    for case in &split.cases {
        let history: Vec<usize> = case.history.iter().map(|s| s.0).collect();
        let mut candidates = Vec::with_capacity(case.negatives.len() + 1);
        candidates.push(case.target.0);
        candidates.extend_from_slice(&case.negatives);
        let ranked = model.rank_candidates(&history, &candidates)?;
        let rank = 1 + ranked
            .iter()
            .position(|r| r.location_id == case.target.0)
            .expect("target is in the candidate list");
        outcomes.push(RankOutcome { user: case.user, rank });
    }
    Ok(outcomes)
}

/// Full evaluation of a trained model on an eval split.
pub fn evaluate(model: &Pasr, split: &EvalSplit) -> Result<MetricTable> {
    let outcomes = rank_split(model, split)?;
    Ok(MetricTable {
        hr5: hit_rate_at_k(&outcomes, 5)?,
        ndcg5: ndcg_at_k(&outcomes, 5)?,
        hr10: hit_rate_at_k(&outcomes, 10)?,
        ndcg10: ndcg_at_k(&outcomes, 10)?,
    })
}
