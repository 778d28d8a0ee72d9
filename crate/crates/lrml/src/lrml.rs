//! LRML forward pass and its hand-derived backward pass.
//!
//! The model scores a user-item pair by how far the relation-translated user
//! embedding lands from the item embedding:
//!
//! ```text
//! s = p ⊙ q                     joint embedding
//! a = softmax(s·k_1, …, s·k_N)  attention over the key matrix
//! r = Σ_i a_i m_i               relation vector read from memory
//! score(p, q) = ‖p + r − q‖²    lower is better
//! ```
//!
//! Training minimizes the pairwise hinge `max(0, score_pos + margin −
//! score_neg)` where the negative reuses the relation vector generated from
//! the positive pair.

use crate::error::{Error, Result};
use crate::linalg::{dist_sq, dot, hadamard, softmax_in_place, Matrix};
use crate::model::{ModelParams, PairGrads};

/// Intermediate state of one pair's forward pass, consumed by
/// [`backward_pair_into`]. Caller must not mutate params between forward and
/// backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
    /// Joint embedding s = p ⊙ q_pos.
    pub joint: Vec<f64>,
    /// Attention distribution over memory slices.
    pub attention: Vec<f64>,
    /// Relation vector r.
    pub relation: Vec<f64>,
    pub score_pos: f64,
    pub score_neg: f64,
}

/// Hadamard product of the user and item embeddings.
pub fn joint_embedding(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::DimMismatch(format!(
            "joint embedding: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(hadamard(p, q))
}

/// Softmax-normalized attention of the joint embedding over the key matrix.
pub fn attention(joint: &[f64], keys: &Matrix) -> Result<Vec<f64>> {
    if keys.cols() != joint.len() {
        return Err(Error::DimMismatch(format!(
            "attention: joint dim {} vs key dim {}",
            joint.len(),
            keys.cols()
        )));
    }
    let mut logits: Vec<f64> = (0..keys.rows()).map(|i| dot(joint, keys.row(i))).collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Convex combination of memory slices under the attention weights.
pub fn relation_vector(attention: &[f64], memory: &Matrix) -> Result<Vec<f64>> {
    if memory.rows() != attention.len() {
        return Err(Error::DimMismatch(format!(
            "relation: attention len {} vs memory rows {}",
            attention.len(),
            memory.rows()
        )));
    }
    let mut r = vec![0.0; memory.cols()];
    for (i, &a) in attention.iter().enumerate() {
        let row = memory.row(i);
        for (rj, &mj) in r.iter_mut().zip(row) {
            *rj += a * mj;
        }
    }
    Ok(r)
}

/// Relation vector for a (user, item) pair straight from the parameters.
pub fn relation_for_pair(user: usize, item: usize, params: &ModelParams) -> Result<Vec<f64>> {
    params.check_user(user)?;
    params.check_item(item)?;
    let s = joint_embedding(params.user_emb.row(user), params.item_emb.row(item))?;
    let a = attention(&s, &params.keys)?;
    relation_vector(&a, &params.memory)
}

/// Attention distribution for a (user, item) pair; the analysis module's
/// probe into what the memory is addressing.
pub fn attention_for_pair(user: usize, item: usize, params: &ModelParams) -> Result<Vec<f64>> {
    params.check_user(user)?;
    params.check_item(item)?;
    let s = joint_embedding(params.user_emb.row(user), params.item_emb.row(item))?;
    attention(&s, &params.keys)
}

/// Squared translation distance ‖p + r − q‖²; nonnegative, zero only when
/// the relation lands exactly on the item.
pub fn score(user: usize, item: usize, params: &ModelParams) -> Result<f64> {
    let r = relation_for_pair(user, item, params)?;
    let p = params.user_emb.row(user);
    let q = params.item_emb.row(item);
    Ok(p.iter()
        .zip(&r)
        .zip(q)
        .map(|((&pj, &rj), &qj)| {
            let e = pj + rj - qj;
            e * e
        })
        .sum())
}

/// Forward both sides of a hinge pair. The relation vector is generated once
/// from the positive pair and reused for the negative item.
pub fn forward_pair(
    user: usize,
    pos_item: usize,
    neg_item: usize,
    params: &ModelParams,
) -> Result<ForwardCache> {
    params.check_user(user)?;
    params.check_item(pos_item)?;
    params.check_item(neg_item)?;

    let p = params.user_emb.row(user);
    let q_pos = params.item_emb.row(pos_item);
    let q_neg = params.item_emb.row(neg_item);

    let joint = joint_embedding(p, q_pos)?;
    let att = attention(&joint, &params.keys)?;
    let relation = relation_vector(&att, &params.memory)?;

    let translated: Vec<f64> = p.iter().zip(&relation).map(|(&pj, &rj)| pj + rj).collect();
    let score_pos = dist_sq(&translated, q_pos);
    let score_neg = dist_sq(&translated, q_neg);

    Ok(ForwardCache {
        user,
        pos_item,
        neg_item,
        joint,
        attention: att,
        relation,
        score_pos,
        score_neg,
    })
}

/// Exact gradient of the single-pair hinge loss through the whole stack,
/// written into `out`. Identically zero when the hinge is inactive.
///
/// With e± = p + r − q±, the active-hinge gradients are
///   ∂L/∂q_pos = −2·e_pos + (∂L/∂s) ⊙ p
///   ∂L/∂q_neg = +2·e_neg
///   ∂L/∂p     = 2·(e_pos − e_neg) + (∂L/∂s) ⊙ q_pos
///   ∂L/∂M     = a · g_rᵀ           with g_r = 2·(e_pos − e_neg)
///   ∂L/∂K     = g_z · sᵀ           with g_z = (diag(a) − a aᵀ)·(M g_r)
///   ∂L/∂s     = Kᵀ g_z
pub fn backward_pair_into(
    cache: &ForwardCache,
    params: &ModelParams,
    margin: f64,
    out: &mut PairGrads,
) -> Result<()> {
    if cache.attention.len() != params.num_slices() || cache.joint.len() != params.dim() {
        return Err(Error::DimMismatch(
            "cache shape does not match params".into(),
        ));
    }
    if cache.score_pos + margin - cache.score_neg <= 0.0 {
        return Ok(());
    }

    let d = params.dim();
    let n = params.num_slices();
    let p = params.user_emb.row(cache.user);
    let q_pos = params.item_emb.row(cache.pos_item);
    let q_neg = params.item_emb.row(cache.neg_item);
    let r = &cache.relation;
    let a = &cache.attention;
    let s = &cache.joint;

    let mut e_pos = vec![0.0; d];
    let mut e_neg = vec![0.0; d];
    let mut g_r = vec![0.0; d];
    for j in 0..d {
        e_pos[j] = p[j] + r[j] - q_pos[j];
        e_neg[j] = p[j] + r[j] - q_neg[j];
        g_r[j] = 2.0 * (e_pos[j] - e_neg[j]);
    }

    // Readout: grad M = outer(a, g_r); upstream into attention u = M·g_r.
    let mut u = vec![0.0; n];
    for i in 0..n {
        let m_row = params.memory.row(i);
        u[i] = dot(m_row, &g_r);
        let grad_row = out.memory_grad.row_mut(i);
        for j in 0..d {
            grad_row[j] = a[i] * g_r[j];
        }
    }

    // Softmax Jacobian: g_z = a ⊙ (u − (a·u)·1).
    let au = dot(a, &u);
    let g_z: Vec<f64> = (0..n).map(|i| a[i] * (u[i] - au)).collect();

    // Keys: grad K = outer(g_z, s); upstream into the joint embedding.
    let mut g_s = vec![0.0; d];
    for i in 0..n {
        let k_row = params.keys.row(i);
        let grad_row = out.keys_grad.row_mut(i);
        for j in 0..d {
            grad_row[j] = g_z[i] * s[j];
            g_s[j] += g_z[i] * k_row[j];
        }
    }

    for j in 0..d {
        out.user_grad[j] = g_r[j] + g_s[j] * q_pos[j];
        out.pos_grad[j] = -2.0 * e_pos[j] + g_s[j] * p[j];
        out.neg_grad[j] = 2.0 * e_neg[j];
    }
    Ok(())
}

/// Allocating variant of [`backward_pair_into`].
pub fn backward_pair(cache: &ForwardCache, params: &ModelParams, margin: f64) -> Result<PairGrads> {
    let mut out = PairGrads::zeros_like(params);
    out.user = cache.user;
    out.pos_item = cache.pos_item;
    out.neg_item = cache.neg_item;
    backward_pair_into(cache, params, margin, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    fn toy_params(memory_rows: Vec<Vec<f64>>, key_rows: Vec<Vec<f64>>) -> ModelParams {
        let d = memory_rows[0].len();
        let mut params = ModelParams::init(ModelKind::Lrml, 2, 3, d, memory_rows.len(), 0);
        params.memory = Matrix::from_rows(memory_rows);
        params.keys = Matrix::from_rows(key_rows);
        params
    }

    #[test]
    fn joint_embedding_is_elementwise_product() {
        assert_eq!(
            joint_embedding(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![3.0, 8.0]
        );
        assert_eq!(
            joint_embedding(&[1.0, 2.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            joint_embedding(&[1.5, -2.0], &[1.0, 1.0]).unwrap(),
            vec![1.5, -2.0]
        );
        assert!(joint_embedding(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn attention_equal_logits_is_uniform() {
        let keys = Matrix::from_rows(vec![vec![0.0, 0.0]; 5]);
        let a = attention(&[0.3, -0.7], &keys).unwrap();
        for x in &a {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_closed_form() {
        // logits (ln 2, 0) via s = (ln 2) e1 against keys e1 and 0
        let keys = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let a = attention(&[2.0_f64.ln(), 5.0], &keys).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attention_survives_huge_logits() {
        let keys = Matrix::from_rows(vec![vec![1000.0, 0.0], vec![0.0, 0.0]]);
        let a = attention(&[1.0, 0.0], &keys).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-12);
        assert!(a[1].abs() < 1e-12);
    }

    #[test]
    fn relation_one_hot_selects_slice() {
        let memory = Matrix::from_rows(vec![vec![1.0, 2.0], vec![-3.0, 4.0]]);
        let r = relation_vector(&[0.0, 1.0], &memory).unwrap();
        assert_eq!(r, vec![-3.0, 4.0]);
    }

    #[test]
    fn relation_uniform_is_midpoint() {
        let memory = Matrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = relation_vector(&[0.5, 0.5], &memory).unwrap();
        assert_eq!(r, vec![0.5, 0.5]);
    }

    #[test]
    fn relation_stays_in_convex_hull() {
        let memory = Matrix::from_rows(vec![vec![1.0, -2.0], vec![3.0, 0.5], vec![-1.0, 1.0]]);
        let mut a = vec![0.2, 0.5, 0.3];
        softmax_in_place(&mut a);
        let r = relation_vector(&a, &memory).unwrap();
        for j in 0..2 {
            let lo = (0..3)
                .map(|i| memory.row(i)[j])
                .fold(f64::INFINITY, f64::min);
            let hi = (0..3)
                .map(|i| memory.row(i)[j])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(r[j] >= lo - 1e-12 && r[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn score_exact_translation_is_zero() {
        // keys are zero -> uniform attention; both memory rows equal the
        // needed translation so r = q - p and the score vanishes.
        let mut params = toy_params(
            vec![vec![0.0, 0.5], vec![0.0, 0.5]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        );
        params.user_emb.row_mut(0).copy_from_slice(&[0.5, 0.0]);
        params.item_emb.row_mut(0).copy_from_slice(&[0.5, 0.5]);
        let s = score(0, 0, &params).unwrap();
        assert!(s.abs() < 1e-30);
    }

    #[test]
    fn score_with_zero_relation_is_squared_distance() {
        let mut params = toy_params(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![vec![0.1, 0.2], vec![-0.5, 0.3]],
        );
        params.user_emb.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        params.item_emb.row_mut(0).copy_from_slice(&[0.0, 1.0]);
        let s = score(0, 0, &params).unwrap();
        assert!((s - 2.0).abs() < 1e-15);
    }

    #[test]
    fn score_hand_arithmetic() {
        // p=(0.3,0.4), r=(0.1,-0.2), q=(0,0) -> 0.4^2 + 0.2^2 = 0.20
        let mut params = toy_params(
            vec![vec![0.1, -0.2], vec![0.1, -0.2]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        );
        params.user_emb.row_mut(0).copy_from_slice(&[0.3, 0.4]);
        params.item_emb.row_mut(0).copy_from_slice(&[0.0, 0.0]);
        let s = score(0, 0, &params).unwrap();
        assert!((s - 0.20).abs() < 1e-15);
    }

    #[test]
    fn score_rejects_out_of_range() {
        let params = toy_params(vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]);
        assert!(score(9, 0, &params).is_err());
        assert!(score(0, 9, &params).is_err());
    }

    #[test]
    fn forward_pair_degenerate_negative() {
        let params = ModelParams::init(ModelKind::Lrml, 3, 4, 6, 3, 5);
        let cache = forward_pair(1, 2, 2, &params).unwrap();
        assert_eq!(cache.score_pos, cache.score_neg);
    }

    #[test]
    fn forward_pair_reuses_positive_relation() {
        // r is contrived to equal q_pos - p, so score_pos = 0 and
        // score_neg = ||q_pos - q_neg||^2 under the shared r.
        let mut params = toy_params(
            vec![vec![0.2, 0.1], vec![0.2, 0.1]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        );
        params.user_emb.row_mut(0).copy_from_slice(&[0.1, 0.3]);
        params.item_emb.row_mut(0).copy_from_slice(&[0.3, 0.4]); // = p + r
        params.item_emb.row_mut(1).copy_from_slice(&[-0.2, 0.9]);
        let cache = forward_pair(0, 0, 1, &params).unwrap();
        assert!(cache.score_pos.abs() < 1e-30);
        let expected = dist_sq(params.item_emb.row(0), params.item_emb.row(1));
        assert!((cache.score_neg - expected).abs() < 1e-15);
    }

    #[test]
    fn cache_attention_reproduces_relation() {
        let params = ModelParams::init(ModelKind::Lrml, 4, 5, 8, 4, 11);
        let cache = forward_pair(2, 1, 3, &params).unwrap();
        let r = relation_vector(&cache.attention, &params.memory).unwrap();
        assert_eq!(r, cache.relation);
    }

    #[test]
    fn inactive_hinge_zeroes_gradient() {
        let params = ModelParams::init(ModelKind::Lrml, 3, 4, 6, 3, 5);
        let mut cache = forward_pair(0, 1, 2, &params).unwrap();
        // force the hinge inactive
        cache.score_pos = 0.0;
        cache.score_neg = 10.0;
        let grads = backward_pair(&cache, &params, 0.2).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn negative_item_gradient_closed_form() {
        // Active hinge: dL/dq_neg = +2 (p + r - q_neg).
        let params = ModelParams::init(ModelKind::Lrml, 3, 4, 6, 3, 9);
        let cache = forward_pair(0, 1, 2, &params).unwrap();
        // std-0.01 init scores are tiny, so margin 0.2 keeps the hinge active
        let grads = backward_pair(&cache, &params, 0.2).unwrap();
        let p = params.user_emb.row(0);
        let q_neg = params.item_emb.row(2);
        for j in 0..params.dim() {
            let expected = 2.0 * (p[j] + cache.relation[j] - q_neg[j]);
            assert!((grads.neg_grad[j] - expected).abs() < 1e-15);
        }
    }
}
