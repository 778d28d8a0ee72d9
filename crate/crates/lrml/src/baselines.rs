//! CML, BPR, and generalized-MF baselines under the same trainer and
//! evaluator as LRML.
//!
//! CML is the r ≡ 0 special case of the translation model and trains with
//! the identical hinge loss and unit-ball projection. BPR ranks by inner
//! product with a log-sigmoid pairwise loss; MF scores with
//! σ(hᵀ(p ⊙ q)) and trains pointwise with binary cross-entropy, one sampled
//! negative per positive.

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sigmoid, sigmoid};
use crate::model::{LossHyper, ModelParams, PairGrads};
use crate::optim::hinge_loss;

/// Squared Euclidean distance between user and item embeddings.
pub fn cml_score(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch(format!(
            "cml score: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter().zip(q).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

/// Hinge pair loss and gradient for CML. Same derivation as LRML with the
/// relation vector fixed at zero.
pub(crate) fn cml_pair_into(
    params: &ModelParams,
    user: usize,
    pos_item: usize,
    neg_item: usize,
    hyper: &LossHyper,
    out: &mut PairGrads,
) -> Result<f64> {
    let p = params.user_emb.row(user);
    let q_pos = params.item_emb.row(pos_item);
    let q_neg = params.item_emb.row(neg_item);
    let score_pos = cml_score(p, q_pos)?;
    let score_neg = cml_score(p, q_neg)?;
    let loss = hinge_loss(score_pos, score_neg, hyper.margin);
    if loss > 0.0 {
        for j in 0..p.len() {
            let e_pos = p[j] - q_pos[j];
            let e_neg = p[j] - q_neg[j];
            out.user_grad[j] = 2.0 * (e_pos - e_neg);
            out.pos_grad[j] = -2.0 * e_pos;
            out.neg_grad[j] = 2.0 * e_neg;
        }
    }
    Ok(loss)
}

/// BPR pair loss: −log σ(p·q_pos − p·q_neg) + λ_v‖p‖² + λ_q‖q_pos‖².
pub fn bpr_pair_loss(p: &[f64], q_pos: &[f64], q_neg: &[f64], reg_user: f64, reg_item: f64) -> f64 {
    let x = dot(p, q_pos) - dot(p, q_neg);
    -log_sigmoid(x) + reg_user * dot(p, p) + reg_item * dot(q_pos, q_pos)
}

pub(crate) fn bpr_pair_into(
    params: &ModelParams,
    user: usize,
    pos_item: usize,
    neg_item: usize,
    hyper: &LossHyper,
    out: &mut PairGrads,
) -> Result<f64> {
    let p = params.user_emb.row(user);
    let q_pos = params.item_emb.row(pos_item);
    let q_neg = params.item_emb.row(neg_item);
    let x = dot(p, q_pos) - dot(p, q_neg);
    let loss = bpr_pair_loss(p, q_pos, q_neg, hyper.reg_user, hyper.reg_item);
    // d(−log σ(x))/dx = σ(x) − 1
    let coeff = sigmoid(x) - 1.0;
    for j in 0..p.len() {
        out.user_grad[j] = coeff * (q_pos[j] - q_neg[j]) + 2.0 * hyper.reg_user * p[j];
        out.pos_grad[j] = coeff * p[j] + 2.0 * hyper.reg_item * q_pos[j];
        out.neg_grad[j] = -coeff * p[j];
    }
    Ok(loss)
}

/// Generalized-MF score σ(hᵀ(p ⊙ q)).
pub fn mf_score(p: &[f64], q: &[f64], h: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.len() != h.len() {
        return Err(Error::DimMismatch(format!(
            "mf score: p {} q {} h {}",
            p.len(),
            q.len(),
            h.len()
        )));
    }
    let z: f64 = p.iter().zip(q).zip(h).map(|((&a, &b), &w)| w * a * b).sum();
    Ok(sigmoid(z))
}

/// Pointwise binary cross-entropy over one positive and one sampled
/// negative, with the same L2 terms as BPR on the touched user and positive
/// item rows.
pub fn mf_pair_loss(
    p: &[f64],
    q_pos: &[f64],
    q_neg: &[f64],
    h: &[f64],
    reg_user: f64,
    reg_item: f64,
) -> f64 {
    let z_pos: f64 = p
        .iter()
        .zip(q_pos)
        .zip(h)
        .map(|((&a, &b), &w)| w * a * b)
        .sum();
    let z_neg: f64 = p
        .iter()
        .zip(q_neg)
        .zip(h)
        .map(|((&a, &b), &w)| w * a * b)
        .sum();
    // −log σ(z_pos) − log(1 − σ(z_neg)), with log(1 − σ(z)) = log σ(−z)
    -log_sigmoid(z_pos) - log_sigmoid(-z_neg) + reg_user * dot(p, p) + reg_item * dot(q_pos, q_pos)
}

pub(crate) fn mf_pair_into(
    params: &ModelParams,
    user: usize,
    pos_item: usize,
    neg_item: usize,
    hyper: &LossHyper,
    out: &mut PairGrads,
) -> Result<f64> {
    let p = params.user_emb.row(user);
    let q_pos = params.item_emb.row(pos_item);
    let q_neg = params.item_emb.row(neg_item);
    let h = &params.mf_weights;
    let loss = mf_pair_loss(p, q_pos, q_neg, h, hyper.reg_user, hyper.reg_item);

    let z_pos: f64 = p
        .iter()
        .zip(q_pos)
        .zip(h)
        .map(|((&a, &b), &w)| w * a * b)
        .sum();
    let z_neg: f64 = p
        .iter()
        .zip(q_neg)
        .zip(h)
        .map(|((&a, &b), &w)| w * a * b)
        .sum();
    let c_pos = sigmoid(z_pos) - 1.0;
    let c_neg = sigmoid(z_neg);

    for j in 0..p.len() {
        out.user_grad[j] =
            c_pos * h[j] * q_pos[j] + c_neg * h[j] * q_neg[j] + 2.0 * hyper.reg_user * p[j];
        out.pos_grad[j] = c_pos * h[j] * p[j] + 2.0 * hyper.reg_item * q_pos[j];
        out.neg_grad[j] = c_neg * h[j] * p[j];
        out.mf_weights_grad[j] = c_pos * p[j] * q_pos[j] + c_neg * p[j] * q_neg[j];
    }
    Ok(loss)
}
