//! Ranking metrics and evaluation drivers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EvalInstance, UserSequence};
use crate::encoder::encode_context;
use crate::error::{Error, Result};
use crate::model::AnDaModel;

/// Item ids ordered by descending score, ties broken by ascending id.
pub fn rank_items(scores: &[f64]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::contract(format!("score for item {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// `|top-K ∩ GT| / min(K, |GT|)`.
pub fn hit_ratio(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let denom = k.min(truth.len());
    if denom == 0 {
        return 0.0;
    }
    let hits = ranking.iter().take(k).filter(|i| truth.contains(i)).count();
    hits as f64 / denom as f64
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)`.
pub fn ndcg(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let discount = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let idcg: f64 = (1..=k.min(truth.len())).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Mean of precision@rank over the ranks of the relevant items.
pub fn average_precision(ranking: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, i) in ranking.iter().enumerate() {
        if truth.contains(i) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
            if hits == truth.len() {
                break;
            }
        }
    }
    sum / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: u64,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub ap: f64,
}

pub fn score_ranking(
    user_id: u64,
    ranking: &[usize],
    truth: &[usize],
    ks: &[usize],
) -> UserMetrics {
    UserMetrics {
        user_id,
        hr: ks.iter().map(|&k| hit_ratio(ranking, truth, k)).collect(),
        ndcg: ks.iter().map(|&k| ndcg(ranking, truth, k)).collect(),
        ap: average_precision(ranking, truth),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub per_user: Vec<UserMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn num_users(&self) -> usize {
        self.per_user.len()
    }

    fn slot(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        let j = self.slot(k)?;
        Some(mean(self.per_user.iter().map(|u| u.hr[j])))
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        let j = self.slot(k)?;
        Some(mean(self.per_user.iter().map(|u| u.ndcg[j])))
    }

    pub fn map(&self) -> f64 {
        mean(self.per_user.iter().map(|u| u.ap))
    }

    /// Flat summary: `num_users`, `hr@K`, `ndcg@K` and `map`.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("num_users".to_string(), self.num_users() as f64);
        for &k in &self.ks {
            m.insert(format!("hr@{k}"), self.hr(k).unwrap_or(f64::NAN));
            m.insert(format!("ndcg@{k}"), self.ndcg(k).unwrap_or(f64::NAN));
        }
        m.insert("map".to_string(), self.map());
        m
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_per_user_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["user_id".to_string()];
        header.extend(self.ks.iter().map(|k| format!("hr@{k}")));
        header.extend(self.ks.iter().map(|k| format!("ndcg@{k}")));
        header.push("ap".into());
        w.write_record(&header)?;
        for u in &self.per_user {
            let mut row = vec![u.user_id.to_string()];
            row.extend(u.hr.iter().chain(&u.ndcg).map(|x| x.to_string()));
            row.push(u.ap.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::contract(
            "cut-offs must be a non-empty list of positive integers",
        ));
    }
    Ok(())
}

/// Ranks the whole catalog for every instance with `model`.
pub fn evaluate_model(
    model: &AnDaModel,
    instances: &[EvalInstance],
    ks: &[usize],
    batch_size: usize,
) -> Result<MetricReport> {
    check_ks(ks)?;
    let layout = model.layout();
    let mut per_user = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let encoded = chunk
            .iter()
            .map(|inst| encode_context(&inst.context, &layout))
            .collect::<Result<Vec<_>>>()?;
        let logits = model.last_step_logits(&encoded)?;
        for (inst, row) in chunk.iter().zip(logits) {
            let ranking = rank_items(&row)?;
            per_user.push(score_ranking(
                inst.context.user_id,
                &ranking,
                inst.target.items(),
                ks,
            ));
        }
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        per_user,
    })
}

/// Most-popular baseline: one global ranking by training purchase count.
#[derive(Clone, Debug, PartialEq)]
pub struct PopRec {
    pub counts: Vec<u64>,
    ranking: Vec<usize>,
}

impl PopRec {
    pub fn fit(train: &[UserSequence], num_items: usize) -> Self {
        let mut counts = vec![0u64; num_items];
        for i in train
            .iter()
            .flat_map(|u| &u.baskets)
            .flat_map(|b| b.items())
        {
            counts[*i] += 1;
        }
        let mut ranking: Vec<usize> = (0..num_items).collect();
        ranking.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        Self { counts, ranking }
    }

    pub fn ranking(&self) -> &[usize] {
        &self.ranking
    }

    pub fn evaluate(&self, instances: &[EvalInstance], ks: &[usize]) -> Result<MetricReport> {
        check_ks(ks)?;
        Ok(MetricReport {
            ks: ks.to_vec(),
            per_user: instances
                .iter()
                .map(|inst| {
                    score_ranking(inst.context.user_id, &self.ranking, inst.target.items(), ks)
                })
                .collect(),
        })
    }
}

/// `(value − reference) / reference`; infinite when the reference is zero
/// and the value is not.
pub fn relative_change(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY * value.signum()
        }
    } else {
        (value - reference) / reference
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_id() {
        assert_eq!(rank_items(&[0.5, 0.9, 0.5, 0.9]).unwrap(), vec![1, 3, 0, 2]);
        assert!(rank_items(&[0.1, f64::NAN]).is_err());
    }

    #[test]
    fn hand_computed_metrics() {
        let ranking = [3, 1, 4, 0, 2];
        let truth = [1, 2];
        assert_eq!(hit_ratio(&ranking, &truth, 1), 0.0);
        assert_eq!(hit_ratio(&ranking, &truth, 2), 0.5);
        assert_eq!(hit_ratio(&ranking, &truth, 5), 1.0);
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((ndcg(&ranking, &truth, 2) - (1.0 / 3f64.log2()) / idcg).abs() < 1e-12);
        assert!((average_precision(&ranking, &truth) - (0.5 + 2.0 / 5.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let ranking = [2, 0, 1, 3];
        assert_eq!(hit_ratio(&ranking, &[2, 0], 5), 1.0);
        assert!((ndcg(&ranking, &[2, 0], 5) - 1.0).abs() < 1e-12);
        assert_eq!(average_precision(&ranking, &[2, 0]), 1.0);
    }

    #[test]
    fn relative_change_edges() {
        assert!((relative_change(0.6, 0.5) - 0.2).abs() < 1e-12);
        assert_eq!(relative_change(0.0, 0.0), 0.0);
        assert!(relative_change(0.1, 0.0).is_infinite());
    }
}
