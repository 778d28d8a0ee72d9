//! Qualitative analyses over a trained model: attention profiles by
//! attribute class, time binning, relation-vector nearest-neighbor attribute
//! matching, and the ill-posedness diagnostic for plain metric learning.
//!
//! Everything is emitted as CSV-ready structures; plotting is external.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm};
use crate::lrml;
use crate::model::ModelParams;

/// Mean attention vector per attribute class, classes in presentation order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub attribute: String,
    pub classes: Vec<String>,
    /// One row per class, each a length-N probability distribution.
    pub mean_attention: Vec<Vec<f64>>,
    /// Pair count per retained class.
    pub support: Vec<usize>,
    /// Declared classes that had no pairs and were dropped.
    pub dropped: Vec<String>,
}

impl AttentionProfile {
    /// CSV with memory slices as rows and classes as columns, matching the
    /// heatmap orientation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice");
        for c in &self.classes {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let slices = self.mean_attention.first().map_or(0, Vec::len);
        for i in 0..slices {
            out.push_str(&format!("M{}", i + 1));
            for row in &self.mean_attention {
                out.push_str(&format!(",{}", row[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn require_memory(params: &ModelParams, operation: &str) -> Result<()> {
    if !params.kind().has_memory() {
        return Err(Error::UnsupportedOperation {
            kind: params.kind().to_string(),
            operation: operation.to_string(),
        });
    }
    Ok(())
}

/// Mean attention vector over all pairs of each class.
///
/// When `declared_classes` is given the profile follows that order and
/// records empty classes in `dropped`; otherwise classes are discovered from
/// the pairs and ordered numerically when all labels parse as integers,
/// lexicographically otherwise.
pub fn attention_by_class(
    attribute: &str,
    pairs: &[(u32, u32, String)],
    declared_classes: Option<&[String]>,
    params: &ModelParams,
) -> Result<AttentionProfile> {
    require_memory(params, "attention profile")?;
    if pairs.is_empty() {
        return Err(Error::Analysis("no pairs to profile".into()));
    }
    if pairs.iter().any(|(_, _, c)| c.is_empty()) {
        return Err(Error::Analysis("empty class label".into()));
    }

    let attentions: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|&(u, i, _)| lrml::attention_for_pair(u as usize, i as usize, params))
        .collect::<Result<_>>()?;

    let n = params.num_slices();
    let mut sums: HashMap<&str, (Vec<f64>, usize)> = HashMap::new();
    for ((_, _, class), att) in pairs.iter().zip(&attentions) {
        let entry = sums
            .entry(class.as_str())
            .or_insert_with(|| (vec![0.0; n], 0));
        for (s, &a) in entry.0.iter_mut().zip(att) {
            *s += a;
        }
        entry.1 += 1;
    }

    let ordered: Vec<String> = match declared_classes {
        Some(declared) => declared.to_vec(),
        None => {
            let mut found: Vec<String> = sums.keys().map(|s| s.to_string()).collect();
            sort_class_labels(&mut found);
            found
        }
    };

    let mut classes = Vec::new();
    let mut mean_attention = Vec::new();
    let mut support = Vec::new();
    let mut dropped = Vec::new();
    for class in ordered {
        match sums.get(class.as_str()) {
            Some((sum, count)) => {
                classes.push(class);
                mean_attention.push(sum.iter().map(|s| s / *count as f64).collect());
                support.push(*count);
            }
            None => dropped.push(class),
        }
    }

    Ok(AttentionProfile {
        attribute: attribute.to_string(),
        classes,
        mean_attention,
        support,
        dropped,
    })
}

fn sort_class_labels(labels: &mut [String]) {
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap());
    } else {
        labels.sort();
    }
}

/// Equal-frequency chronological bins. Returns the bin index of each input
/// timestamp; bins are labeled 0..num_bins-1 in ascending time order.
pub fn bin_timestamps(timestamps: &[i64], num_bins: usize) -> Result<Vec<usize>> {
    if num_bins < 1 {
        return Err(Error::InvalidConfig("num_bins must be >= 1".into()));
    }
    if timestamps.is_empty() {
        return Err(Error::MissingTimestamps("no timestamps to bin".into()));
    }
    let (min, max) = timestamps
        .iter()
        .fold((i64::MAX, i64::MIN), |(lo, hi), &t| (lo.min(t), hi.max(t)));
    if min == max {
        return Err(Error::DegenerateTimestamps);
    }

    let n = timestamps.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&k| (timestamps[k], k));
    let mut bins = vec![0usize; n];
    for (rank, &k) in order.iter().enumerate() {
        bins[k] = rank * num_bins / n;
    }
    Ok(bins)
}

/// One attribute viewed per test pair: a user attribute carries the user's
/// value, an item attribute the item's. Missing values exclude the pair from
/// that attribute's statistics.
#[derive(Debug, Clone)]
pub struct PairAttribute {
    pub name: String,
    pub values: Vec<Option<String>>,
}

impl PairAttribute {
    pub fn from_user_table(name: &str, table: &HashMap<u32, String>, pairs: &[(u32, u32)]) -> Self {
        PairAttribute {
            name: name.to_string(),
            values: pairs.iter().map(|&(u, _)| table.get(&u).cloned()).collect(),
        }
    }

    pub fn from_item_table(name: &str, table: &HashMap<u32, String>, pairs: &[(u32, u32)]) -> Self {
        PairAttribute {
            name: name.to_string(),
            values: pairs.iter().map(|&(_, i)| table.get(&i).cloned()).collect(),
        }
    }

    /// Both attributes must match: the pair value is the tuple of values,
    /// present only when both sides are present.
    pub fn conjunction(a: &PairAttribute, b: &PairAttribute) -> Self {
        let values = a
            .values
            .iter()
            .zip(&b.values)
            .map(|(va, vb)| match (va, vb) {
                (Some(x), Some(y)) => Some(format!("{x}\u{1f}{y}")),
                _ => None,
            })
            .collect();
        PairAttribute {
            name: format!("{} AND {}", a.name, b.name),
            values,
        }
    }
}

/// Attribute agreement between each test pair and its nearest neighbor by
/// relation-vector cosine similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub attribute: String,
    /// Fraction of pairs whose nearest neighbor has the same value.
    pub match_rate: f64,
    /// Collision probability of two independent draws from the empirical
    /// class distribution: Σ_c f_c².
    pub random_rate: f64,
    pub diff: f64,
    /// 95% bootstrap interval on `diff`.
    pub diff_ci95: (f64, f64),
    /// Pairs that entered the match computation.
    pub support: usize,
}

/// Full outcome of the relation-similarity experiment.
#[derive(Debug, Clone)]
pub struct RelationMatchOutcome {
    pub reports: Vec<MatchReport>,
    /// Pairs excluded for a zero-norm relation vector.
    pub excluded_pairs: usize,
}

pub fn match_reports_csv(reports: &[MatchReport]) -> String {
    let mut out = String::from("attribute,match_pct,random_pct,diff_pct\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.2},{:.2},{:.2}\n",
            r.attribute,
            100.0 * r.match_rate,
            100.0 * r.random_rate,
            100.0 * r.diff
        ));
    }
    out
}

const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Generate the relation vector of every test pair, find each pair's
/// nearest neighbor by cosine similarity (self excluded, ties to the lowest
/// index), and report per-attribute match rates against the analytic
/// random-chance baseline.
pub fn relation_similarity_matches<R: Rng>(
    test_pairs: &[(u32, u32)],
    attributes: &[PairAttribute],
    params: &ModelParams,
    rng: &mut R,
) -> Result<RelationMatchOutcome> {
    require_memory(params, "relation similarity")?;
    if test_pairs.len() < 2 {
        return Err(Error::Analysis(
            "need at least 2 test pairs for nearest-neighbor matching".into(),
        ));
    }
    for attr in attributes {
        if attr.values.len() != test_pairs.len() {
            return Err(Error::DimMismatch(format!(
                "attribute {} has {} values for {} pairs",
                attr.name,
                attr.values.len(),
                test_pairs.len()
            )));
        }
    }

    let relations: Vec<Vec<f64>> = test_pairs
        .par_iter()
        .map(|&(u, i)| lrml::relation_for_pair(u as usize, i as usize, params))
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = relations.iter().map(|r| l2_norm(r)).collect();
    let valid: Vec<bool> = norms.iter().map(|&n| n > 0.0).collect();
    let excluded_pairs = valid.iter().filter(|&&v| !v).count();
    if test_pairs.len() - excluded_pairs < 2 {
        return Err(Error::Analysis(
            "fewer than 2 pairs with nonzero relation vectors".into(),
        ));
    }

    // Exact O(n^2) nearest-neighbor search; test sets are small enough that
    // no approximate index is warranted.
    let nearest: Vec<Option<usize>> = (0..test_pairs.len())
        .into_par_iter()
        .map(|i| {
            if !valid[i] {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for j in 0..test_pairs.len() {
                if j == i || !valid[j] {
                    continue;
                }
                let cos = dot(&relations[i], &relations[j]) / (norms[i] * norms[j]);
                match best {
                    Some((_, b)) if cos <= b => {}
                    _ => best = Some((j, cos)),
                }
            }
            best.map(|(j, _)| j)
        })
        .collect();

    let mut reports = Vec::with_capacity(attributes.len());
    for attr in attributes {
        reports.push(match_report(attr, &nearest, &valid, rng));
    }
    Ok(RelationMatchOutcome {
        reports,
        excluded_pairs,
    })
}

fn match_report<R: Rng>(
    attr: &PairAttribute,
    nearest: &[Option<usize>],
    valid: &[bool],
    rng: &mut R,
) -> MatchReport {
    // Empirical class distribution over valid pairs carrying the attribute.
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut population = 0usize;
    for (k, value) in attr.values.iter().enumerate() {
        if valid[k] {
            if let Some(v) = value {
                *freq.entry(v.as_str()).or_insert(0) += 1;
                population += 1;
            }
        }
    }
    let random_rate = if population == 0 {
        0.0
    } else {
        freq.values()
            .map(|&c| {
                let f = c as f64 / population as f64;
                f * f
            })
            .sum()
    };

    let mut matches: Vec<bool> = Vec::new();
    for (k, value) in attr.values.iter().enumerate() {
        let (Some(v), Some(nn)) = (value, nearest[k]) else {
            continue;
        };
        if let Some(nv) = &attr.values[nn] {
            matches.push(v == nv);
        }
    }

    let support = matches.len();
    let match_rate = if support == 0 {
        0.0
    } else {
        matches.iter().filter(|&&m| m).count() as f64 / support as f64
    };
    let diff = match_rate - random_rate;
    let diff_ci95 = bootstrap_diff_ci(&matches, random_rate, rng);

    MatchReport {
        attribute: attr.name.clone(),
        match_rate,
        random_rate,
        diff,
        diff_ci95,
        support,
    }
}

/// Percentile bootstrap over the match indicators; the random baseline is
/// analytic and held fixed.
fn bootstrap_diff_ci<R: Rng>(matches: &[bool], random_rate: f64, rng: &mut R) -> (f64, f64) {
    if matches.is_empty() {
        return (0.0, 0.0);
    }
    let n = matches.len();
    let mut diffs = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let hits = (0..n).filter(|_| matches[rng.gen_range(0..n)]).count();
        diffs.push(hits as f64 / n as f64 - random_rate);
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = diffs[(BOOTSTRAP_RESAMPLES as f64 * 0.025) as usize];
    let hi = diffs[(BOOTSTRAP_RESAMPLES as f64 * 0.975) as usize - 1];
    (lo, hi)
}

/// Interactions per free embedding row: `(interactions × d) / ((|U| + |I|) ×
/// d)`. Values far above 1 flag the over-constrained algebraic system of
/// plain metric learning; the ratio is independent of `d`.
pub fn ill_posedness_ratio(ds: &Dataset, d: usize) -> f64 {
    ill_posedness_ratio_from_counts(
        ds.num_interactions() as u64,
        ds.num_users() as u64,
        ds.num_items() as u64,
        d,
    )
}

/// Same diagnostic from summary counts alone.
pub fn ill_posedness_ratio_from_counts(
    interactions: u64,
    num_users: u64,
    num_items: u64,
    d: usize,
) -> f64 {
    let equations = interactions as f64 * d as f64;
    let free_vars = (num_users + num_items) as f64 * d as f64;
    equations / free_vars
}
