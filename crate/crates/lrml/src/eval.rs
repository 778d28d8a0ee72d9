//! Leave-one-out ranking evaluation: HR@10 and nDCG@10 over the held-out
//! item ranked against each user's fixed 100 negatives.
//!
//! Ties rank the target after tied negatives (pessimistic), so near-constant
//! early-training scores do not inflate the metrics. Evaluation is read-only
//! over the parameters and embarrassingly parallel across users.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Which held-out item to rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Dev,
    Test,
}

/// Default ranking cutoff; the cutoff is a parameter internally but every
/// reported metric uses 10.
pub const CUTOFF: u32 = 10;

/// Per-user outcome of ranking the held-out item among 101 candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: u32,
    /// 1-based rank of the held-out item.
    pub rank: u32,
    pub hit10: bool,
    pub ndcg10: f64,
}

/// Aggregated metrics plus the per-user breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub hr10: f64,
    pub ndcg10: f64,
    pub per_user: Vec<RankResult>,
}

/// JSON envelope written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportJson {
    pub model: String,
    pub dataset: String,
    pub hr10: f64,
    pub ndcg10: f64,
    pub num_users: usize,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn to_json(&self, model: &str, dataset: &str, config_digest: &str) -> ReportJson {
        ReportJson {
            model: model.to_string(),
            dataset: dataset.to_string(),
            hr10: self.hr10,
            ndcg10: self.ndcg10,
            num_users: self.per_user.len(),
            config_digest: config_digest.to_string(),
        }
    }

    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("user,rank,hit10,ndcg10\n");
        for r in &self.per_user {
            out.push_str(&format!("{},{},{},{}\n", r.user, r.rank, r.hit10, r.ndcg10));
        }
        out
    }
}

/// Rank of `target` within an arbitrary candidate score list, pessimistic on
/// ties: rank = 1 + #strictly-greater + #tied-others.
pub fn rank_among(pref_scores: &[f64], target: usize) -> Result<u32> {
    if let Some(bad) = pref_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { candidate: bad });
    }
    let target_score = pref_scores[target];
    let mut rank = 1u32;
    for (j, &s) in pref_scores.iter().enumerate() {
        if j != target && s >= target_score {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Standard-protocol rank: exactly 101 candidates (1 target + 100
/// negatives).
pub fn rank_target(pref_scores: &[f64], target_position: usize) -> Result<u32> {
    if pref_scores.len() != 101 {
        return Err(Error::DimMismatch(format!(
            "rank_target expects 101 scores, got {}",
            pref_scores.len()
        )));
    }
    rank_among(pref_scores, target_position)
}

/// Position-discounted gain of a single relevant item at the given cutoff.
pub fn ndcg_at_cutoff(rank: u32, cutoff: u32) -> f64 {
    if rank <= cutoff {
        1.0 / (rank as f64 + 1.0).log2()
    } else {
        0.0
    }
}

/// 1/log2(rank+1) for rank <= 10, else 0.
pub fn ndcg_at_10(rank: u32) -> f64 {
    ndcg_at_cutoff(rank, CUTOFF)
}

/// Rank each user's held-out item against their fixed negatives and
/// aggregate. Parallel over users, aggregation in user order.
pub fn evaluate(
    split: &SplitDataset,
    params: &ModelParams,
    which: EvalSplit,
) -> Result<MetricsReport> {
    if params.num_users() != split.num_users() || params.num_items() != split.num_items() {
        return Err(Error::DimMismatch(format!(
            "params are {}x{} but split is {}x{}",
            params.num_users(),
            params.num_items(),
            split.num_users(),
            split.num_items()
        )));
    }
    let held_out = match which {
        EvalSplit::Dev => &split.dev_items,
        EvalSplit::Test => &split.test_items,
    };

    let per_user: Vec<RankResult> = (0..split.num_users())
        .into_par_iter()
        .map(|u| {
            let candidates = split.eval_candidates(u, held_out[u]);
            let mut scores = Vec::with_capacity(candidates.len());
            for &c in &candidates {
                scores.push(params.preference(u, c as usize)?);
            }
            let rank = rank_among(&scores, 0)?;
            Ok(RankResult {
                user: u as u32,
                rank,
                hit10: rank <= CUTOFF,
                ndcg10: ndcg_at_cutoff(rank, CUTOFF),
            })
        })
        .collect::<Result<_>>()?;

    Ok(aggregate(per_user))
}

/// Mean the per-user results in user order.
pub fn aggregate(per_user: Vec<RankResult>) -> MetricsReport {
    let n = per_user.len() as f64;
    let hr10 = per_user.iter().filter(|r| r.hit10).count() as f64 / n;
    let ndcg10 = per_user.iter().map(|r| r.ndcg10).sum::<f64>() / n;
    MetricsReport {
        hr10,
        ndcg10,
        per_user,
    }
}

/// HR at the cutoff for explicit (user, item) pairs, each ranked against the
/// user's non-interacted items. Used by the overfit diagnostics where the
/// item universe is too small for the 100-negative protocol.
pub fn hit_rate_over_pairs(
    pairs: &[(u32, u32)],
    interacted: impl Fn(usize) -> Vec<u32> + Sync,
    num_items: usize,
    params: &ModelParams,
    cutoff: u32,
) -> Result<f64> {
    let hits: Vec<bool> = pairs
        .par_iter()
        .map(|&(u, i)| {
            let user = u as usize;
            let known = interacted(user);
            let mut scores = vec![params.preference(user, i as usize)?];
            for cand in 0..num_items as u32 {
                if cand != i && known.binary_search(&cand).is_err() {
                    scores.push(params.preference(user, cand as usize)?);
                }
            }
            Ok(rank_among(&scores, 0)? <= cutoff)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split_with, Dataset};
    use crate::model::ModelKind;

    #[test]
    fn unique_max_ranks_first() {
        let mut scores = vec![0.0; 101];
        scores[7] = 1.0;
        assert_eq!(rank_target(&scores, 7).unwrap(), 1);
    }

    #[test]
    fn all_tied_is_pessimistic_last() {
        let scores = vec![0.5; 101];
        assert_eq!(rank_target(&scores, 0).unwrap(), 101);
    }

    #[test]
    fn rank_counts_strictly_greater_plus_ties() {
        // target greater than 90, less than 10 -> rank 11
        let mut scores = vec![0.5]; // target
        scores.extend(std::iter::repeat_n(1.0, 10));
        scores.extend(std::iter::repeat_n(0.0, 90));
        let rank = rank_target(&scores, 0).unwrap();
        assert_eq!(rank, 11);
        assert!(rank > CUTOFF);
    }

    #[test]
    fn rank_rejects_non_finite() {
        let mut scores = vec![0.0; 101];
        scores[3] = f64::NAN;
        assert!(matches!(
            rank_target(&scores, 0),
            Err(Error::NonFiniteScore { candidate: 3 })
        ));
    }

    #[test]
    fn rank_target_requires_101() {
        assert!(rank_target(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn ndcg_closed_forms() {
        assert_eq!(ndcg_at_10(1), 1.0);
        assert!((ndcg_at_10(3) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_10(11), 0.0);
    }

    #[test]
    fn ndcg_never_exceeds_hit_indicator() {
        for rank in 1..=101 {
            let hit = rank <= CUTOFF;
            let ndcg = ndcg_at_10(rank);
            assert!(ndcg <= if hit { 1.0 } else { 0.0 } + 1e-15);
            if !hit {
                assert_eq!(ndcg, 0.0);
            }
        }
    }

    fn toy_split(num_users: usize, num_items: usize, negatives: usize) -> SplitDataset {
        let interactions = (0..num_users)
            .map(|u| ((u % 3) as u32..(u % 3) as u32 + 5).collect::<Vec<u32>>())
            .collect::<Vec<_>>();
        let ds = Dataset::from_interactions(num_items, interactions).unwrap();
        leave_one_out_split_with(&ds, 11, negatives).unwrap()
    }

    #[test]
    fn perfect_oracle_scores_one() {
        // oracle: preference 1 for the held-out item, 0 elsewhere, realized
        // by ranking precomputed score vectors through the same path
        let per_user: Vec<RankResult> = (0..5)
            .map(|u| {
                let mut scores = vec![0.0; 13];
                scores[0] = 1.0;
                let rank = rank_among(&scores, 0).unwrap();
                RankResult {
                    user: u,
                    rank,
                    hit10: rank <= CUTOFF,
                    ndcg10: ndcg_at_10(rank),
                }
            })
            .collect();
        let report = aggregate(per_user);
        assert_eq!(report.hr10, 1.0);
        assert_eq!(report.ndcg10, 1.0);
    }

    #[test]
    fn evaluate_is_read_only_and_repeatable() {
        let split = toy_split(6, 50, 20);
        let params = ModelParams::init(ModelKind::Lrml, 6, 50, 8, 4, 3);
        let before = params.clone();
        let a = evaluate(&split, &params, EvalSplit::Test).unwrap();
        let b = evaluate(&split, &params, EvalSplit::Test).unwrap();
        assert_eq!(params, before);
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_rejects_mismatched_params() {
        let split = toy_split(6, 50, 20);
        let params = ModelParams::init(ModelKind::Cml, 5, 50, 8, 0, 3);
        assert!(evaluate(&split, &params, EvalSplit::Dev).is_err());
    }

    #[test]
    fn iid_scores_give_uniform_ranks() {
        // Exchangeable candidates: hit rate 10/101 and rank uniform on
        // [1, 101], Monte Carlo over 10^4 users.
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(20_24);
        let users = 10_000;
        let mut hits = 0usize;
        let mut rank_sum = 0u64;
        for _ in 0..users {
            let scores: Vec<f64> = (0..101).map(|_| rng.gen::<f64>()).collect();
            let rank = rank_target(&scores, 0).unwrap();
            rank_sum += u64::from(rank);
            hits += usize::from(rank <= 10);
        }
        let hr = hits as f64 / users as f64;
        let mean_rank = rank_sum as f64 / users as f64;
        // 10/101 = 0.0990 with sd ~0.003 at n=10^4; mean rank 51 with
        // sd ~0.29
        assert!((hr - 10.0 / 101.0).abs() < 0.012, "hr {hr}");
        assert!((mean_rank - 51.0).abs() < 1.2, "mean rank {mean_rank}");
    }

    #[test]
    fn rank_invariant_under_increasing_transform() {
        let scores: Vec<f64> = (0..101).map(|i| ((i * 37) % 101) as f64 / 13.0).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
        for t in 0..101 {
            assert_eq!(
                rank_target(&scores, t).unwrap(),
                rank_target(&transformed, t).unwrap()
            );
        }
    }
}
