//! Pairwise training: hinge objective, lazy sparse Adam, unit-ball
//! projection, and the epoch loop with dev-set early stopping.
//!
//! Each epoch visits every training (user, positive-item) pair once in
//! seeded-shuffled order, pairs it with one fresh sampled negative,
//! partitions the stream into `num_batches` near-equal batches, applies one
//! Adam step per batch (batch gradient = mean over pairs), then projects
//! metric-model embeddings back onto the unit ball. The per-epoch RNG is
//! derived from `(seed, epoch)` so a run resumed from a checkpoint replays
//! bit-identically.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalSplit};
use crate::linalg::{l2_norm, Matrix};
use crate::model::{LossHyper, ModelKind, ModelParams, PairGrads};
use crate::snapshot::{read_f64_vec, write_f64_slice, ReadExt, WriteExt};

/// Full hyperparameter record for one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    /// Embedding dimensionality d.
    pub dim: usize,
    /// Memory slices N (LRML only).
    pub memory_slices: usize,
    /// Hinge margin λ.
    pub margin: f64,
    pub learning_rate: f64,
    /// Number of batches per epoch, B.
    pub num_batches: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without dev-nDCG improvement.
    pub patience_epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// L2 coefficient λ_v on the user row (BPR/MF).
    pub reg_user: f64,
    /// L2 coefficient λ_q on the positive item row (BPR/MF).
    pub reg_item: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model_kind: ModelKind::Lrml,
            dim: 100,
            memory_slices: 20,
            margin: 0.2,
            learning_rate: 0.001,
            num_batches: 10,
            max_epochs: 500,
            patience_epochs: 50,
            checkpoint_every: 50,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            reg_user: 1e-4,
            reg_item: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::InvalidConfig("margin must be > 0".into()));
        }
        if self.num_batches < 1 {
            return Err(Error::InvalidConfig("num_batches must be >= 1".into()));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0)
            || !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0)
        {
            return Err(Error::InvalidConfig("adam betas must be in (0, 1)".into()));
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::InvalidConfig("adam_epsilon must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.dim < 1 {
            return Err(Error::InvalidConfig("dim must be >= 1".into()));
        }
        if self.model_kind.has_memory() && self.memory_slices < 1 {
            return Err(Error::InvalidConfig(
                "memory_slices must be >= 1 for lrml".into(),
            ));
        }
        if self.max_epochs < 1 {
            return Err(Error::InvalidConfig("max_epochs must be >= 1".into()));
        }
        if self.patience_epochs < 1 {
            return Err(Error::InvalidConfig("patience_epochs must be >= 1".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_hyper(&self) -> LossHyper {
        LossHyper {
            margin: self.margin,
            reg_user: self.reg_user,
            reg_item: self.reg_item,
        }
    }
}

/// Pairwise ranking loss: max(0, score_pos + margin − score_neg).
#[inline]
pub fn hinge_loss(score_pos: f64, score_neg: f64, margin: f64) -> f64 {
    (score_pos + margin - score_neg).max(0.0)
}

/// Rescale any user/item embedding row with L2 norm above 1 back to norm 1;
/// interior rows and the memory/key/output blocks are untouched.
pub fn project_unit_ball(params: &mut ModelParams) {
    for table in [&mut params.user_emb, &mut params.item_emb] {
        for i in 0..table.rows() {
            let row = table.row_mut(i);
            let norm = l2_norm(row);
            if norm > 1.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
    }
}

/// Accumulated gradient of one batch: sparse user/item rows plus dense
/// memory, key, and output-weight blocks.
#[derive(Debug, Clone)]
pub struct GradBatch {
    pub user_rows: BTreeMap<u32, Vec<f64>>,
    pub item_rows: BTreeMap<u32, Vec<f64>>,
    pub memory: Matrix,
    pub keys: Matrix,
    pub mf_weights: Vec<f64>,
    pub pairs: usize,
    dim: usize,
}

impl GradBatch {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradBatch {
            user_rows: BTreeMap::new(),
            item_rows: BTreeMap::new(),
            memory: Matrix::zeros(params.num_slices(), params.dim()),
            keys: Matrix::zeros(params.num_slices(), params.dim()),
            mf_weights: vec![0.0; params.mf_weights.len()],
            pairs: 0,
            dim: params.dim(),
        }
    }

    pub fn clear(&mut self) {
        self.user_rows.clear();
        self.item_rows.clear();
        self.memory.fill(0.0);
        self.keys.fill(0.0);
        self.mf_weights.iter_mut().for_each(|x| *x = 0.0);
        self.pairs = 0;
    }

    /// Count a pair into the batch. `active` pairs contribute their
    /// gradient; inactive hinge pairs only enter the denominator.
    pub fn add_pair(&mut self, grads: &PairGrads, active: bool) {
        self.pairs += 1;
        if !active {
            return;
        }
        add_row(
            &mut self.user_rows,
            grads.user as u32,
            &grads.user_grad,
            self.dim,
        );
        add_row(
            &mut self.item_rows,
            grads.pos_item as u32,
            &grads.pos_grad,
            self.dim,
        );
        add_row(
            &mut self.item_rows,
            grads.neg_item as u32,
            &grads.neg_grad,
            self.dim,
        );
        axpy_all(self.memory.data_mut(), grads.memory_grad.data());
        axpy_all(self.keys.data_mut(), grads.keys_grad.data());
        axpy_all(&mut self.mf_weights, &grads.mf_weights_grad);
    }

    /// Divide everything by the pair count: batch gradient is a mean, so
    /// the learning rate is batch-size invariant.
    pub fn finish_mean(&mut self) {
        if self.pairs == 0 {
            return;
        }
        let inv = 1.0 / self.pairs as f64;
        for row in self.user_rows.values_mut() {
            row.iter_mut().for_each(|x| *x *= inv);
        }
        for row in self.item_rows.values_mut() {
            row.iter_mut().for_each(|x| *x *= inv);
        }
        self.memory.data_mut().iter_mut().for_each(|x| *x *= inv);
        self.keys.data_mut().iter_mut().for_each(|x| *x *= inv);
        self.mf_weights.iter_mut().for_each(|x| *x *= inv);
    }

    fn check_finite(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        for row in self.user_rows.values() {
            if !finite(row) {
                return Err(Error::NonFiniteGradient { block: "user_emb" });
            }
        }
        for row in self.item_rows.values() {
            if !finite(row) {
                return Err(Error::NonFiniteGradient { block: "item_emb" });
            }
        }
        if !finite(self.memory.data()) {
            return Err(Error::NonFiniteGradient { block: "memory" });
        }
        if !finite(self.keys.data()) {
            return Err(Error::NonFiniteGradient { block: "keys" });
        }
        if !finite(&self.mf_weights) {
            return Err(Error::NonFiniteGradient {
                block: "mf_weights",
            });
        }
        Ok(())
    }
}

fn add_row(rows: &mut BTreeMap<u32, Vec<f64>>, idx: u32, grad: &[f64], dim: usize) {
    let entry = rows.entry(idx).or_insert_with(|| vec![0.0; dim]);
    axpy_all(entry, grad);
}

#[inline]
fn axpy_all(acc: &mut [f64], add: &[f64]) {
    debug_assert_eq!(acc.len(), add.len());
    for (a, &b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// Adam learning-rate schedule constants.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            epsilon: c.adam_epsilon,
        }
    }
}

/// First/second-moment accumulators shaped like the parameters, plus the
/// global timestep used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    user_m: Matrix,
    user_v: Matrix,
    item_m: Matrix,
    item_v: Matrix,
    memory_m: Matrix,
    memory_v: Matrix,
    keys_m: Matrix,
    keys_v: Matrix,
    mf_m: Vec<f64>,
    mf_v: Vec<f64>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let (u, i, n, d) = (
            params.num_users(),
            params.num_items(),
            params.num_slices(),
            params.dim(),
        );
        AdamState {
            t: 0,
            user_m: Matrix::zeros(u, d),
            user_v: Matrix::zeros(u, d),
            item_m: Matrix::zeros(i, d),
            item_v: Matrix::zeros(i, d),
            memory_m: Matrix::zeros(n, d),
            memory_v: Matrix::zeros(n, d),
            keys_m: Matrix::zeros(n, d),
            keys_v: Matrix::zeros(n, d),
            mf_m: vec![0.0; params.mf_weights.len()],
            mf_v: vec![0.0; params.mf_weights.len()],
        }
    }
}

/// One bias-corrected Adam update from an accumulated batch gradient.
///
/// Embedding rows absent from the batch keep their moments unchanged (lazy
/// sparse Adam); the dense memory/key/output blocks always update. Errors on
/// any non-finite gradient entry, naming the parameter block.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradBatch,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    grads.check_finite()?;
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);

    let update = |value: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *value -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
    };

    for (&u, grad) in &grads.user_rows {
        let row = params.user_emb.row_mut(u as usize);
        let m = state.user_m.row_mut(u as usize);
        let v = state.user_v.row_mut(u as usize);
        for j in 0..grad.len() {
            update(&mut row[j], &mut m[j], &mut v[j], grad[j]);
        }
    }
    for (&i, grad) in &grads.item_rows {
        let row = params.item_emb.row_mut(i as usize);
        let m = state.item_m.row_mut(i as usize);
        let v = state.item_v.row_mut(i as usize);
        for j in 0..grad.len() {
            update(&mut row[j], &mut m[j], &mut v[j], grad[j]);
        }
    }
    for (value, (m, (v, &g))) in params.memory.data_mut().iter_mut().zip(
        state.memory_m.data_mut().iter_mut().zip(
            state
                .memory_v
                .data_mut()
                .iter_mut()
                .zip(grads.memory.data()),
        ),
    ) {
        update(value, m, v, g);
    }
    for (value, (m, (v, &g))) in params.keys.data_mut().iter_mut().zip(
        state
            .keys_m
            .data_mut()
            .iter_mut()
            .zip(state.keys_v.data_mut().iter_mut().zip(grads.keys.data())),
    ) {
        update(value, m, v, g);
    }
    for (value, (m, (v, &g))) in params.mf_weights.iter_mut().zip(
        state
            .mf_m
            .iter_mut()
            .zip(state.mf_v.iter_mut().zip(&grads.mf_weights)),
    ) {
        update(value, m, v, g);
    }
    Ok(())
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u32,
    pub mean_loss: f64,
    pub dev_hr10: f64,
    pub dev_ndcg10: f64,
    pub wall_seconds: f64,
}

impl EpochRow {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,dev_hr10,dev_ndcg10,wall_seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.mean_loss, self.dev_hr10, self.dev_ndcg10, self.wall_seconds
        )
    }
}

/// Result of a finished run: the dev-best parameters and the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_params: ModelParams,
    pub best_epoch: u32,
    pub best_dev_ndcg10: f64,
    pub log: Vec<EpochRow>,
}

/// Incremental training driver. The CLI steps it epoch by epoch so it can
/// checkpoint and resume; [`train`] wraps the whole loop.
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    adam: AdamState,
    base_pairs: Vec<(u32, u32)>,
    epochs_done: u32,
    best_params: ModelParams,
    best_epoch: u32,
    best_ndcg: f64,
    since_improve: u32,
    log: Vec<EpochRow>,
    batch: GradBatch,
    scratch: PairGrads,
}

impl Trainer {
    pub fn new(split: &SplitDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(
            config.model_kind,
            split.num_users(),
            split.num_items(),
            config.dim,
            config.memory_slices,
            config.seed,
        );
        let adam = AdamState::zeros_like(&params);
        let base_pairs: Vec<(u32, u32)> = split.train.pairs().collect();
        if base_pairs.is_empty() {
            return Err(Error::InvalidConfig("no training pairs".into()));
        }
        let batch = GradBatch::zeros_like(&params);
        let scratch = PairGrads::zeros_like(&params);
        Ok(Trainer {
            config,
            best_params: params.clone(),
            params,
            adam,
            base_pairs,
            epochs_done: 0,
            best_epoch: 0,
            best_ndcg: f64::NEG_INFINITY,
            since_improve: 0,
            log: Vec::new(),
            batch,
            scratch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epochs_done(&self) -> u32 {
        self.epochs_done
    }

    pub fn log(&self) -> &[EpochRow] {
        &self.log
    }

    pub fn best_epoch(&self) -> u32 {
        self.best_epoch
    }

    pub fn best_params(&self) -> &ModelParams {
        &self.best_params
    }

    /// Adjust the remaining budget when resuming; everything else in the
    /// config stays as the run was started.
    pub fn extend_budget(
        &mut self,
        max_epochs: Option<usize>,
        patience_epochs: Option<usize>,
        checkpoint_every: Option<usize>,
    ) {
        if let Some(e) = max_epochs {
            self.config.max_epochs = e;
        }
        if let Some(p) = patience_epochs {
            self.config.patience_epochs = p;
        }
        if let Some(c) = checkpoint_every {
            self.config.checkpoint_every = c;
        }
    }

    /// Early-stop or epoch-budget reached.
    pub fn finished(&self) -> bool {
        self.epochs_done as usize >= self.config.max_epochs
            || self.since_improve as usize >= self.config.patience_epochs
    }

    /// One full pass over the training pairs plus the dev evaluation.
    pub fn run_epoch(&mut self, split: &SplitDataset) -> Result<&EpochRow> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let hyper = self.config.loss_hyper();
        let adam_hyper = AdamHyper::from(&self.config);
        let mut rng = StdRng::seed_from_u64(epoch_seed(self.config.seed, epoch));

        let mut pairs = self.base_pairs.clone();
        pairs.shuffle(&mut rng);

        let total = pairs.len();
        let num_batches = self.config.num_batches.min(total);
        let base = total / num_batches;
        let rem = total % num_batches;

        let mut loss_sum = 0.0;
        let mut offset = 0;
        for b in 0..num_batches {
            let len = base + usize::from(b < rem);
            if len == 0 {
                continue;
            }
            self.batch.clear();
            for &(user, pos) in &pairs[offset..offset + len] {
                let neg = split.sample_train_negative(user as usize, &mut rng);
                let loss = self.params.pair_grads_into(
                    user as usize,
                    pos as usize,
                    neg as usize,
                    &hyper,
                    &mut self.scratch,
                )?;
                loss_sum += loss;
                self.batch.add_pair(&self.scratch, loss > 0.0);
            }
            offset += len;
            self.batch.finish_mean();
            adam_step(&mut self.params, &self.batch, &mut self.adam, &adam_hyper)?;
            if self.config.model_kind.uses_projection() {
                project_unit_ball(&mut self.params);
            }
        }

        let report = eval::evaluate(split, &self.params, EvalSplit::Dev)?;
        let row = EpochRow {
            epoch,
            mean_loss: loss_sum / total as f64,
            dev_hr10: report.hr10,
            dev_ndcg10: report.ndcg10,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.epochs_done = epoch;
        if row.dev_ndcg10 > self.best_ndcg {
            self.best_ndcg = row.dev_ndcg10;
            self.best_epoch = epoch;
            self.best_params = self.params.clone();
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        self.log.push(row);
        Ok(self.log.last().unwrap())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            best_params: self.best_params,
            best_epoch: self.best_epoch,
            best_dev_ndcg10: self.best_ndcg,
            log: self.log,
        }
    }

    /// Serialize everything needed to resume at an epoch boundary: params,
    /// optimizer moments, best-so-far state, and the log.
    pub fn save_state<W: Write>(&self, w: &mut W) -> Result<()> {
        state_io::write(self, w)
    }

    /// Restore a trainer saved with [`Self::save_state`]; `split` must be
    /// the same split the run started from.
    pub fn load_state<R: Read>(r: &mut R, split: &SplitDataset) -> Result<Trainer> {
        state_io::read(r, split)
    }
}

/// Deterministic per-epoch stream seed (splitmix64 over seed and epoch).
fn epoch_seed(seed: u64, epoch: u32) -> u64 {
    let mut z = seed
        .wrapping_add(u64::from(epoch).wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Run the full loop: epochs until early stop or the epoch budget, returning
/// the dev-best checkpoint and the log.
pub fn train(split: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(split, config.clone())?;
    while !trainer.finished() {
        trainer.run_epoch(split)?;
    }
    Ok(trainer.into_outcome())
}

// Resume-state layout (version 1): magic "LRMLSTAT", version u32,
// config JSON (u64 length + bytes), counters, params snapshot,
// best-params snapshot, Adam t + all moment blocks, log rows.
mod state_io {
    use super::*;

    const MAGIC: &[u8; 8] = b"LRMLSTAT";
    const VERSION: u32 = 1;

    fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
        write_f64_slice(w, m.data())
    }

    fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
        let data = read_f64_vec(r, rows * cols)?;
        let mut m = Matrix::zeros(rows, cols);
        m.data_mut().copy_from_slice(&data);
        Ok(m)
    }

    pub fn write<W: Write>(t: &Trainer, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32(VERSION)?;
        let config = serde_json::to_vec(&t.config)
            .map_err(|e| Error::SnapshotFormat(format!("config encode: {e}")))?;
        w.write_u64(config.len() as u64)?;
        w.write_all(&config)?;
        w.write_u32(t.epochs_done)?;
        w.write_u32(t.best_epoch)?;
        w.write_f64(t.best_ndcg)?;
        w.write_u32(t.since_improve)?;
        t.params.write_to(w)?;
        t.best_params.write_to(w)?;
        w.write_u64(t.adam.t)?;
        for m in [
            &t.adam.user_m,
            &t.adam.user_v,
            &t.adam.item_m,
            &t.adam.item_v,
            &t.adam.memory_m,
            &t.adam.memory_v,
            &t.adam.keys_m,
            &t.adam.keys_v,
        ] {
            write_matrix(w, m)?;
        }
        write_f64_slice(w, &t.adam.mf_m)?;
        write_f64_slice(w, &t.adam.mf_v)?;
        w.write_u64(t.log.len() as u64)?;
        for row in &t.log {
            w.write_u32(row.epoch)?;
            w.write_f64(row.mean_loss)?;
            w.write_f64(row.dev_hr10)?;
            w.write_f64(row.dev_ndcg10)?;
            w.write_f64(row.wall_seconds)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R, split: &SplitDataset) -> Result<Trainer> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::SnapshotFormat("bad trainer-state magic".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::SnapshotFormat(format!(
                "unsupported trainer-state version {version}"
            )));
        }
        let config_len = r.read_u64()? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)?;
        let config: TrainConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::SnapshotFormat(format!("config decode: {e}")))?;
        let epochs_done = r.read_u32()?;
        let best_epoch = r.read_u32()?;
        let best_ndcg = r.read_f64()?;
        let since_improve = r.read_u32()?;
        let params = ModelParams::read_from(r)?;
        let best_params = ModelParams::read_from(r)?;
        if params.num_users() != split.num_users() || params.num_items() != split.num_items() {
            return Err(Error::DimMismatch(format!(
                "trainer state is for {}x{} but split has {}x{}",
                params.num_users(),
                params.num_items(),
                split.num_users(),
                split.num_items()
            )));
        }
        let (u, i, n, d) = (
            params.num_users(),
            params.num_items(),
            params.num_slices(),
            params.dim(),
        );
        let mut adam = AdamState::zeros_like(&params);
        adam.t = r.read_u64()?;
        adam.user_m = read_matrix(r, u, d)?;
        adam.user_v = read_matrix(r, u, d)?;
        adam.item_m = read_matrix(r, i, d)?;
        adam.item_v = read_matrix(r, i, d)?;
        adam.memory_m = read_matrix(r, n, d)?;
        adam.memory_v = read_matrix(r, n, d)?;
        adam.keys_m = read_matrix(r, n, d)?;
        adam.keys_v = read_matrix(r, n, d)?;
        adam.mf_m = read_f64_vec(r, params.mf_weights.len())?;
        adam.mf_v = read_f64_vec(r, params.mf_weights.len())?;
        let log_len = r.read_u64()? as usize;
        let mut log = Vec::with_capacity(log_len);
        for _ in 0..log_len {
            log.push(EpochRow {
                epoch: r.read_u32()?,
                mean_loss: r.read_f64()?,
                dev_hr10: r.read_f64()?,
                dev_ndcg10: r.read_f64()?,
                wall_seconds: r.read_f64()?,
            });
        }

        let batch = GradBatch::zeros_like(&params);
        let scratch = PairGrads::zeros_like(&params);
        Ok(Trainer {
            config,
            base_pairs: split.train.pairs().collect(),
            params,
            adam,
            epochs_done,
            best_params,
            best_epoch,
            best_ndcg,
            since_improve,
            log,
            batch,
            scratch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split_with, Dataset};

    #[test]
    fn hinge_loss_cases() {
        assert_eq!(hinge_loss(0.1, 0.5, 0.2), 0.0);
        assert!((hinge_loss(0.5, 0.4, 0.2) - 0.3).abs() < 1e-15);
        for x in [0.0, 1.0, 7.5] {
            assert!((hinge_loss(x, x, 0.2) - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_rescales_only_long_rows() {
        let mut params = ModelParams::init(ModelKind::Cml, 2, 2, 2, 0, 0);
        params.user_emb.row_mut(0).copy_from_slice(&[3.0, 4.0]);
        params.user_emb.row_mut(1).copy_from_slice(&[0.1, 0.1]);
        params.item_emb.row_mut(0).copy_from_slice(&[0.0, -5.0]);
        project_unit_ball(&mut params);
        assert_eq!(params.user_emb.row(0), &[0.6, 0.8]);
        assert_eq!(params.user_emb.row(1), &[0.1, 0.1]);
        assert_eq!(params.item_emb.row(0), &[0.0, -1.0]);
        // idempotent
        let once = params.clone();
        project_unit_ball(&mut params);
        assert_eq!(params, once);
    }

    #[test]
    fn adam_zero_gradient_only_advances_time() {
        let mut params = ModelParams::init(ModelKind::Lrml, 3, 3, 4, 2, 1);
        let before = params.clone();
        let mut state = AdamState::zeros_like(&params);
        let batch = GradBatch::zeros_like(&params);
        let hyper = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        adam_step(&mut params, &batch, &mut state, &hyper).unwrap();
        assert_eq!(state.t, 1);
        // dense blocks see zero gradient: m stays 0, update is 0/(0+eps)
        assert_eq!(params, before);
    }

    #[test]
    fn adam_constant_gradient_converges_to_lr_step() {
        // with g constant, m_hat -> g and v_hat -> g^2, so each step
        // approaches lr * sign(g)
        let mut params = ModelParams::init(ModelKind::Cml, 1, 1, 1, 0, 3);
        let mut state = AdamState::zeros_like(&params);
        let hyper = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut batch = GradBatch::zeros_like(&params);
        batch.user_rows.insert(0, vec![2.5]);
        batch.pairs = 1;
        let mut prev = params.user_emb.row(0)[0];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut params, &batch, &mut state, &hyper).unwrap();
            let now = params.user_emb.row(0)[0];
            last_step = prev - now;
            prev = now;
        }
        assert!(
            (last_step - hyper.lr).abs() < 1e-5,
            "late-stage step was {last_step}"
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = ModelParams::init(ModelKind::Lrml, 2, 2, 3, 2, 1);
        let mut state = AdamState::zeros_like(&params);
        let mut batch = GradBatch::zeros_like(&params);
        batch.memory.row_mut(0)[1] = f64::NAN;
        batch.pairs = 1;
        let hyper = AdamHyper {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        match adam_step(&mut params, &batch, &mut state, &hyper) {
            Err(Error::NonFiniteGradient { block: "memory" }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn tiny_split() -> crate::data::SplitDataset {
        let interactions = (0..8)
            .map(|u| ((u % 5)..(u % 5 + 6)).collect::<Vec<u32>>())
            .collect::<Vec<_>>();
        let ds = Dataset::from_interactions(30, interactions).unwrap();
        leave_one_out_split_with(&ds, 7, 10).unwrap()
    }

    fn tiny_config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            dim: 4,
            memory_slices: 2,
            max_epochs: 5,
            num_batches: 3,
            patience_epochs: 50,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let split = tiny_split();
        for kind in [
            ModelKind::Lrml,
            ModelKind::Cml,
            ModelKind::Bpr,
            ModelKind::Mf,
        ] {
            let a = train(&split, &tiny_config(kind)).unwrap();
            let b = train(&split, &tiny_config(kind)).unwrap();
            assert_eq!(a.best_params, b.best_params, "{kind}");
            for (ra, rb) in a.log.iter().zip(&b.log) {
                assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
                assert_eq!(ra.dev_ndcg10.to_bits(), rb.dev_ndcg10.to_bits());
                assert_eq!(ra.dev_hr10.to_bits(), rb.dev_hr10.to_bits());
            }
        }
    }

    #[test]
    fn best_params_match_argmax_of_log() {
        let split = tiny_split();
        let outcome = train(&split, &tiny_config(ModelKind::Lrml)).unwrap();
        let argmax = outcome
            .log
            .iter()
            .max_by(|a, b| {
                a.dev_ndcg10
                    .partial_cmp(&b.dev_ndcg10)
                    .unwrap()
                    .then(b.epoch.cmp(&a.epoch)) // first maximum wins
            })
            .unwrap();
        assert_eq!(outcome.best_epoch, argmax.epoch);
        assert_eq!(outcome.best_dev_ndcg10, argmax.dev_ndcg10);
    }

    #[test]
    fn patience_counter_semantics() {
        // dev nDCG can't improve when lr is zero-ish... instead emulate by
        // patience 3 with a model whose dev metric is constant: margin tiny
        // and lr tiny so params barely move; metrics tie -> no improvement
        // after epoch 1.
        let split = tiny_split();
        let config = TrainConfig {
            model_kind: ModelKind::Cml,
            dim: 4,
            learning_rate: 1e-12,
            max_epochs: 500,
            patience_epochs: 3,
            num_batches: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train(&split, &config).unwrap();
        // epoch 1 improves over -inf; epochs 2..4 tie -> stop at epoch 4
        assert_eq!(outcome.log.len(), 4);
        assert_eq!(outcome.best_epoch, 1);
    }

    #[test]
    fn unit_ball_holds_after_training() {
        let split = tiny_split();
        for kind in [ModelKind::Lrml, ModelKind::Cml] {
            let outcome = train(&split, &tiny_config(kind)).unwrap();
            assert!(outcome.best_params.max_embedding_row_norm() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn resume_from_state_matches_uninterrupted() {
        let split = tiny_split();
        let config = TrainConfig {
            max_epochs: 6,
            ..tiny_config(ModelKind::Lrml)
        };

        let full = train(&split, &config).unwrap();

        let mut first = Trainer::new(&split, config.clone()).unwrap();
        for _ in 0..3 {
            first.run_epoch(&split).unwrap();
        }
        let mut buf = Vec::new();
        first.save_state(&mut buf).unwrap();
        let mut resumed = Trainer::load_state(&mut std::io::Cursor::new(buf), &split).unwrap();
        while !resumed.finished() {
            resumed.run_epoch(&split).unwrap();
        }
        let outcome = resumed.into_outcome();

        assert_eq!(outcome.best_params, full.best_params);
        assert_eq!(outcome.best_epoch, full.best_epoch);
        assert_eq!(outcome.log.len(), full.log.len());
        for (a, b) in outcome.log.iter().zip(&full.log) {
            assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
            assert_eq!(a.dev_ndcg10.to_bits(), b.dev_ndcg10.to_bits());
        }
    }

    #[test]
    fn initial_mean_loss_is_near_margin() {
        // With zero memory and std-0.01 embeddings, positive and negative
        // scores are near-identical, so the mean hinge loss at init sits at
        // the margin.
        let interactions = (0..30)
            .map(|u| ((u % 11)..(u % 11 + 8)).collect::<Vec<u32>>())
            .collect::<Vec<_>>();
        let ds = Dataset::from_interactions(60, interactions).unwrap();
        let split = leave_one_out_split_with(&ds, 3, 20).unwrap();
        for margin in [0.1, 0.2, 0.5] {
            let mut params = ModelParams::init(ModelKind::Lrml, 30, 60, 100, 20, 8);
            params.memory.fill(0.0);
            let hyper = LossHyper {
                margin,
                reg_user: 0.0,
                reg_item: 0.0,
            };
            let mut rng = rand::rngs::StdRng::seed_from_u64(4);
            let mut total = 0.0;
            let mut count = 0usize;
            for (u, pos) in split.train.pairs() {
                let neg = split.sample_train_negative(u as usize, &mut rng);
                total += params
                    .pair_loss(u as usize, pos as usize, neg as usize, &hyper)
                    .unwrap();
                count += 1;
            }
            let mean = total / count as f64;
            assert!(
                mean >= 0.8 * margin && mean <= 1.2 * margin,
                "margin {margin}: mean initial loss {mean}"
            );
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = [
            TrainConfig {
                margin: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                num_batches: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                adam_beta1: 1.0,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
