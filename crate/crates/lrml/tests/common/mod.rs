//! Shared helpers for the integration suites: the central finite-difference
//! gradient oracle and synthetic dataset builders. The oracle only ever
//! calls the public loss entry point, never the analytic backward path it
//! checks.

#![allow(dead_code)]

use lrml::data::{leave_one_out_split_with, Dataset, SplitDataset};
use lrml::linalg::Matrix;
use lrml::model::{LossHyper, ModelKind, ModelParams};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

/// Central-difference step matching the documented gradient-check protocol.
pub const FD_STEP: f64 = 1e-5;

/// Floored relative error: |a−n| / max(|a|, |n|, 1e-3).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Parameter blocks a single pair's loss can touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    UserRow,
    PosRow,
    NegRow,
    Memory,
    Keys,
    MfWeights,
}

fn entry_mut(
    params: &mut ModelParams,
    block: Block,
    user: usize,
    pos: usize,
    neg: usize,
    idx: usize,
) -> &mut f64 {
    match block {
        Block::UserRow => &mut params.user_emb.row_mut(user)[idx],
        Block::PosRow => &mut params.item_emb.row_mut(pos)[idx],
        Block::NegRow => &mut params.item_emb.row_mut(neg)[idx],
        Block::Memory => &mut params.memory.data_mut()[idx],
        Block::Keys => &mut params.keys.data_mut()[idx],
        Block::MfWeights => &mut params.mf_weights[idx],
    }
}

/// Central finite difference of the pair loss along one coordinate.
pub fn fd_gradient(
    params: &ModelParams,
    block: Block,
    user: usize,
    pos: usize,
    neg: usize,
    idx: usize,
    hyper: &LossHyper,
) -> f64 {
    let mut probe = params.clone();
    *entry_mut(&mut probe, block, user, pos, neg, idx) += FD_STEP;
    let up = probe.pair_loss(user, pos, neg, hyper).unwrap();
    let mut probe = params.clone();
    *entry_mut(&mut probe, block, user, pos, neg, idx) -= FD_STEP;
    let down = probe.pair_loss(user, pos, neg, hyper).unwrap();
    (up - down) / (2.0 * FD_STEP)
}

/// Worst floored relative error between the analytic gradient and finite
/// differences over every touched coordinate of one pair. `neg` must differ
/// from `pos` so the two item rows are distinct coordinates.
pub fn max_grad_rel_err(
    params: &ModelParams,
    user: usize,
    pos: usize,
    neg: usize,
    hyper: &LossHyper,
) -> f64 {
    assert_ne!(pos, neg, "item rows must be distinct for the oracle");
    let (_, grads) = params.pair_grads(user, pos, neg, hyper).unwrap();
    let d = params.dim();
    let mut worst = 0.0f64;
    let mut check = |block: Block, idx: usize, analytic: f64| {
        let numeric = fd_gradient(params, block, user, pos, neg, idx, hyper);
        worst = worst.max(rel_err(analytic, numeric));
    };
    for j in 0..d {
        check(Block::UserRow, j, grads.user_grad[j]);
        check(Block::PosRow, j, grads.pos_grad[j]);
        check(Block::NegRow, j, grads.neg_grad[j]);
    }
    for idx in 0..grads.memory_grad.data().len() {
        check(Block::Memory, idx, grads.memory_grad.data()[idx]);
        check(Block::Keys, idx, grads.keys_grad.data()[idx]);
    }
    for j in 0..grads.mf_weights_grad.len() {
        check(Block::MfWeights, j, grads.mf_weights_grad[j]);
    }
    worst
}

/// Random parameters at a scale that produces healthy gradients; the check
/// is of the chain rule, not of an initialization scheme.
pub fn random_params(
    kind: ModelKind,
    num_users: usize,
    num_items: usize,
    dim: usize,
    slices: usize,
    std: f64,
    rng: &mut StdRng,
) -> ModelParams {
    let mut params = ModelParams::init(kind, num_users, num_items, dim, slices, 0);
    let mut fill = |m: &mut Matrix| {
        for x in m.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = z * std;
        }
    };
    fill(&mut params.user_emb);
    fill(&mut params.item_emb);
    fill(&mut params.memory);
    fill(&mut params.keys);
    for x in &mut params.mf_weights {
        let z: f64 = rng.sample(StandardNormal);
        *x = z * std;
    }
    params
}

/// Two-community planted structure: each block's users interact with every
/// item of their block, so a capacity-rich model can overfit it completely.
pub fn planted_block_dataset(
    users_per_block: usize,
    items_per_block: usize,
    blocks: usize,
) -> Dataset {
    let num_items = items_per_block * blocks;
    let interactions = (0..users_per_block * blocks)
        .map(|u| {
            let block = u / users_per_block;
            let start = (block * items_per_block) as u32;
            (start..start + items_per_block as u32).collect::<Vec<u32>>()
        })
        .collect();
    Dataset::from_interactions(num_items, interactions).unwrap()
}

pub fn planted_block_split(
    users_per_block: usize,
    items_per_block: usize,
    blocks: usize,
    negatives: usize,
    seed: u64,
) -> SplitDataset {
    let ds = planted_block_dataset(users_per_block, items_per_block, blocks);
    leave_one_out_split_with(&ds, seed, negatives).unwrap()
}

/// Structureless dataset: each user interacts with a few uniformly random
/// items.
pub fn random_dataset(
    num_users: usize,
    num_items: usize,
    interactions_per_user: usize,
    seed: u64,
) -> Dataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let interactions = (0..num_users)
        .map(|_| {
            let mut items = std::collections::BTreeSet::new();
            while items.len() < interactions_per_user {
                items.insert(rng.gen_range(0..num_items) as u32);
            }
            items.into_iter().collect::<Vec<u32>>()
        })
        .collect();
    Dataset::from_interactions(num_items, interactions).unwrap()
}
