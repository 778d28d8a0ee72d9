//! Shared model parameter container for LRML and the baselines, plus the
//! preference-score and pair-gradient dispatch used by the trainer and
//! evaluator.
//!
//! All four models live in one container so the optimizer, snapshot format,
//! and evaluation loop are written once. Blocks a model does not use are
//! zero-row matrices / empty vectors.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lrml;
use crate::snapshot::{read_f64_vec, write_f64_slice, ReadExt, WriteExt};

/// Standard deviation for Gaussian parameter initialization.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Translation metric model with the attentive memory module.
    Lrml,
    /// Collaborative metric learning: plain squared distance.
    Cml,
    /// Bayesian personalized ranking over inner products.
    Bpr,
    /// Generalized matrix factorization with a learned output weight vector.
    Mf,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Lrml => "lrml",
            ModelKind::Cml => "cml",
            ModelKind::Bpr => "bpr",
            ModelKind::Mf => "mf",
        }
    }

    /// Metric models constrain user/item rows to the unit ball after each
    /// batch; the dot-product models are L2-regularized instead.
    pub fn uses_projection(&self) -> bool {
        matches!(self, ModelKind::Lrml | ModelKind::Cml)
    }

    pub fn has_memory(&self) -> bool {
        matches!(self, ModelKind::Lrml)
    }

    pub fn has_output_weights(&self) -> bool {
        matches!(self, ModelKind::Mf)
    }

    fn tag(&self) -> u8 {
        match self {
            ModelKind::Lrml => 0,
            ModelKind::Cml => 1,
            ModelKind::Bpr => 2,
            ModelKind::Mf => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Lrml),
            1 => Ok(ModelKind::Cml),
            2 => Ok(ModelKind::Bpr),
            3 => Ok(ModelKind::Mf),
            other => Err(Error::SnapshotFormat(format!(
                "unknown model kind tag {other}"
            ))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lrml" => Ok(ModelKind::Lrml),
            "cml" => Ok(ModelKind::Cml),
            "bpr" => Ok(ModelKind::Bpr),
            "mf" => Ok(ModelKind::Mf),
            other => Err(Error::InvalidConfig(format!(
                "unknown model {other:?}, expected lrml|cml|bpr|mf"
            ))),
        }
    }
}

/// Loss hyperparameters shared across model kinds. Hinge models read
/// `margin`; BPR and MF read the L2 coefficients.
#[derive(Debug, Clone, Copy)]
pub struct LossHyper {
    pub margin: f64,
    pub reg_user: f64,
    pub reg_item: f64,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            margin: 0.2,
            reg_user: 1e-4,
            reg_item: 1e-4,
        }
    }
}

/// All trainable parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    kind: ModelKind,
    /// User embedding table, one row per user.
    pub user_emb: Matrix,
    /// Item embedding table, one row per item.
    pub item_emb: Matrix,
    /// Memory slices (LRML), zero rows otherwise.
    pub memory: Matrix,
    /// Key matrix addressing the memory (LRML), zero rows otherwise.
    pub keys: Matrix,
    /// MF output weights, empty otherwise.
    pub mf_weights: Vec<f64>,
}

impl ModelParams {
    /// Gaussian init (mean 0, std 0.01) of every block the kind uses.
    pub fn init(
        kind: ModelKind,
        num_users: usize,
        num_items: usize,
        dim: usize,
        memory_slices: usize,
        seed: u64,
    ) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let user_emb = Matrix::randn(num_users, dim, INIT_STD, &mut rng);
        let item_emb = Matrix::randn(num_items, dim, INIT_STD, &mut rng);
        let slices = if kind.has_memory() { memory_slices } else { 0 };
        let memory = Matrix::randn(slices, dim, INIT_STD, &mut rng);
        let keys = Matrix::randn(slices, dim, INIT_STD, &mut rng);
        let mf_weights = if kind.has_output_weights() {
            Matrix::randn(1, dim, INIT_STD, &mut rng).data().to_vec()
        } else {
            Vec::new()
        };
        ModelParams {
            kind,
            user_emb,
            item_emb,
            memory,
            keys,
            mf_weights,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn num_slices(&self) -> usize {
        self.memory.rows()
    }

    pub(crate) fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.num_users() {
            return Err(Error::IndexOutOfRange(format!(
                "user {user} >= {}",
                self.num_users()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.num_items() {
            return Err(Error::IndexOutOfRange(format!(
                "item {item} >= {}",
                self.num_items()
            )));
        }
        Ok(())
    }

    /// Preference score for ranking: higher is better for every kind.
    /// Metric models negate their squared distance so one convention covers
    /// both families.
    pub fn preference(&self, user: usize, item: usize) -> Result<f64> {
        self.check_user(user)?;
        self.check_item(item)?;
        let p = self.user_emb.row(user);
        let q = self.item_emb.row(item);
        match self.kind {
            ModelKind::Lrml => Ok(-lrml::score(user, item, self)?),
            ModelKind::Cml => Ok(-baselines::cml_score(p, q)?),
            ModelKind::Bpr => Ok(crate::linalg::dot(p, q)),
            ModelKind::Mf => baselines::mf_score(p, q, &self.mf_weights),
        }
    }

    /// Single-pair training loss and its exact gradient, written into `out`.
    /// Returns the loss value.
    pub fn pair_grads_into(
        &self,
        user: usize,
        pos_item: usize,
        neg_item: usize,
        hyper: &LossHyper,
        out: &mut PairGrads,
    ) -> Result<f64> {
        self.check_user(user)?;
        self.check_item(pos_item)?;
        self.check_item(neg_item)?;
        out.reset(user, pos_item, neg_item);
        match self.kind {
            ModelKind::Lrml => {
                let cache = lrml::forward_pair(user, pos_item, neg_item, self)?;
                lrml::backward_pair_into(&cache, self, hyper.margin, out)?;
                Ok(crate::optim::hinge_loss(
                    cache.score_pos,
                    cache.score_neg,
                    hyper.margin,
                ))
            }
            ModelKind::Cml => baselines::cml_pair_into(self, user, pos_item, neg_item, hyper, out),
            ModelKind::Bpr => baselines::bpr_pair_into(self, user, pos_item, neg_item, hyper, out),
            ModelKind::Mf => baselines::mf_pair_into(self, user, pos_item, neg_item, hyper, out),
        }
    }

    /// Allocating variant of [`Self::pair_grads_into`].
    pub fn pair_grads(
        &self,
        user: usize,
        pos_item: usize,
        neg_item: usize,
        hyper: &LossHyper,
    ) -> Result<(f64, PairGrads)> {
        let mut out = PairGrads::zeros_like(self);
        let loss = self.pair_grads_into(user, pos_item, neg_item, hyper, &mut out)?;
        Ok((loss, out))
    }

    /// Loss value only; used by the evaluator's loss diagnostics and the
    /// finite-difference tests.
    pub fn pair_loss(
        &self,
        user: usize,
        pos_item: usize,
        neg_item: usize,
        hyper: &LossHyper,
    ) -> Result<f64> {
        self.check_user(user)?;
        self.check_item(pos_item)?;
        self.check_item(neg_item)?;
        match self.kind {
            ModelKind::Lrml => {
                let cache = lrml::forward_pair(user, pos_item, neg_item, self)?;
                Ok(crate::optim::hinge_loss(
                    cache.score_pos,
                    cache.score_neg,
                    hyper.margin,
                ))
            }
            ModelKind::Cml => {
                let p = self.user_emb.row(user);
                let pos = baselines::cml_score(p, self.item_emb.row(pos_item))?;
                let neg = baselines::cml_score(p, self.item_emb.row(neg_item))?;
                Ok(crate::optim::hinge_loss(pos, neg, hyper.margin))
            }
            ModelKind::Bpr => Ok(baselines::bpr_pair_loss(
                self.user_emb.row(user),
                self.item_emb.row(pos_item),
                self.item_emb.row(neg_item),
                hyper.reg_user,
                hyper.reg_item,
            )),
            ModelKind::Mf => Ok(baselines::mf_pair_loss(
                self.user_emb.row(user),
                self.item_emb.row(pos_item),
                self.item_emb.row(neg_item),
                &self.mf_weights,
                hyper.reg_user,
                hyper.reg_item,
            )),
        }
    }

    pub fn max_embedding_row_norm(&self) -> f64 {
        self.user_emb
            .max_row_norm()
            .max(self.item_emb.max_row_norm())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        params_io::write(self, w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ModelParams> {
        params_io::read(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let file = File::open(path).map_err(|source| Error::FileOpen {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}

/// Gradient of a single-pair loss: sparse rows for the touched user and
/// items, dense blocks for memory, keys, and MF weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads {
    pub user: usize,
    pub pos_item: usize,
    pub neg_item: usize,
    pub user_grad: Vec<f64>,
    pub pos_grad: Vec<f64>,
    pub neg_grad: Vec<f64>,
    pub memory_grad: Matrix,
    pub keys_grad: Matrix,
    pub mf_weights_grad: Vec<f64>,
}

impl PairGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let d = params.dim();
        let n = params.num_slices();
        PairGrads {
            user: 0,
            pos_item: 0,
            neg_item: 0,
            user_grad: vec![0.0; d],
            pos_grad: vec![0.0; d],
            neg_grad: vec![0.0; d],
            memory_grad: Matrix::zeros(n, d),
            keys_grad: Matrix::zeros(n, d),
            mf_weights_grad: vec![0.0; params.mf_weights.len()],
        }
    }

    fn reset(&mut self, user: usize, pos_item: usize, neg_item: usize) {
        self.user = user;
        self.pos_item = pos_item;
        self.neg_item = neg_item;
        self.user_grad.iter_mut().for_each(|x| *x = 0.0);
        self.pos_grad.iter_mut().for_each(|x| *x = 0.0);
        self.neg_grad.iter_mut().for_each(|x| *x = 0.0);
        self.memory_grad.fill(0.0);
        self.keys_grad.fill(0.0);
        self.mf_weights_grad.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.user_grad.iter().all(|&x| x == 0.0)
            && self.pos_grad.iter().all(|&x| x == 0.0)
            && self.neg_grad.iter().all(|&x| x == 0.0)
            && self.memory_grad.data().iter().all(|&x| x == 0.0)
            && self.keys_grad.data().iter().all(|&x| x == 0.0)
            && self.mf_weights_grad.iter().all(|&x| x == 0.0)
    }
}

// Parameter snapshot layout (version 1, little-endian):
//   magic "LRMLPRMS", version u32, kind u8, dim u64, slices u64,
//   num_users u64, num_items u64, then row-major f64 blocks:
//   user_emb, item_emb, memory, keys, mf_weights (dim entries, MF only).
mod params_io {
    use super::*;

    const MAGIC: &[u8; 8] = b"LRMLPRMS";
    const VERSION: u32 = 1;

    pub fn write<W: Write>(params: &ModelParams, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32(VERSION)?;
        w.write_all(&[params.kind.tag()])?;
        w.write_u64(params.dim() as u64)?;
        w.write_u64(params.num_slices() as u64)?;
        w.write_u64(params.num_users() as u64)?;
        w.write_u64(params.num_items() as u64)?;
        write_f64_slice(w, params.user_emb.data())?;
        write_f64_slice(w, params.item_emb.data())?;
        write_f64_slice(w, params.memory.data())?;
        write_f64_slice(w, params.keys.data())?;
        write_f64_slice(w, &params.mf_weights)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<ModelParams> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::SnapshotFormat("bad parameter magic".into()));
        }
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::SnapshotFormat(format!(
                "unsupported parameter version {version}"
            )));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = ModelKind::from_tag(tag[0])?;
        let dim = r.read_u64()? as usize;
        let slices = r.read_u64()? as usize;
        let num_users = r.read_u64()? as usize;
        let num_items = r.read_u64()? as usize;

        let read_matrix = |r: &mut R, rows: usize| -> Result<Matrix> {
            let data = read_f64_vec(r, rows * dim)?;
            let mut m = Matrix::zeros(rows, dim);
            m.data_mut().copy_from_slice(&data);
            Ok(m)
        };
        let user_emb = read_matrix(r, num_users)?;
        let item_emb = read_matrix(r, num_items)?;
        let memory = read_matrix(r, slices)?;
        let keys = read_matrix(r, slices)?;
        let mf_weights = if kind.has_output_weights() {
            read_f64_vec(r, dim)?
        } else {
            Vec::new()
        };

        Ok(ModelParams {
            kind,
            user_emb,
            item_emb,
            memory,
            keys,
            mf_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn init_shapes_follow_kind() {
        let lrml = ModelParams::init(ModelKind::Lrml, 5, 7, 8, 4, 1);
        assert_eq!(lrml.user_emb.rows(), 5);
        assert_eq!(lrml.item_emb.rows(), 7);
        assert_eq!(lrml.num_slices(), 4);
        assert!(lrml.mf_weights.is_empty());

        let bpr = ModelParams::init(ModelKind::Bpr, 5, 7, 8, 4, 1);
        assert_eq!(bpr.num_slices(), 0);
        assert!(bpr.mf_weights.is_empty());

        let mf = ModelParams::init(ModelKind::Mf, 5, 7, 8, 4, 1);
        assert_eq!(mf.mf_weights.len(), 8);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(ModelKind::Lrml, 4, 4, 6, 3, 42);
        let b = ModelParams::init(ModelKind::Lrml, 4, 4, 6, 3, 42);
        assert_eq!(a, b);
        let c = ModelParams::init(ModelKind::Lrml, 4, 4, 6, 3, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn snapshot_round_trip_every_kind() {
        for kind in [
            ModelKind::Lrml,
            ModelKind::Cml,
            ModelKind::Bpr,
            ModelKind::Mf,
        ] {
            let params = ModelParams::init(kind, 6, 9, 5, 3, 7);
            let mut buf = Vec::new();
            params.write_to(&mut buf).unwrap();
            let back = ModelParams::read_from(&mut Cursor::new(buf)).unwrap();
            assert_eq!(back, params, "kind {kind}");
        }
    }

    #[test]
    fn snapshot_rejects_wrong_magic() {
        let err = ModelParams::read_from(&mut Cursor::new(b"NOTMAGIC0000".to_vec())).unwrap_err();
        assert!(matches!(err, Error::SnapshotFormat(_)));
    }

    #[test]
    fn preference_checks_indices() {
        let params = ModelParams::init(ModelKind::Cml, 3, 3, 4, 0, 0);
        assert!(params.preference(3, 0).is_err());
        assert!(params.preference(0, 3).is_err());
        assert!(params.preference(2, 2).is_ok());
    }
}
