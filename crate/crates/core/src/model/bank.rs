use super::{ModelDims, ModelParams};
use crate::numcore::Mat64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// Where a bank row's current value came from, for routing gradients during
/// training. Values produced before the current backprop segment are `Const`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Const,
    InitUser,
    InitItem,
    Out { batch: u32, row: u32, side: Side },
}

/// Current dynamic embeddings of every user and item.
///
/// Static embeddings are one-hot and never stored; the prediction layer
/// selects the matching weight columns instead.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    pub dyn_user: Mat64,
    /// One row per real item plus the sentinel row, which always holds the
    /// initial item vector.
    pub dyn_item: Mat64,
    pub user_seen: Vec<bool>,
    pub item_seen: Vec<bool>,
    /// Item of each user's previous interaction (sentinel before the first).
    pub prev_item: Vec<usize>,
    /// That item's embedding as produced by the user's previous interaction.
    pub prev_item_snap: Mat64,
    pub user_last_time: Vec<f64>,
    pub item_last_time: Vec<f64>,
    pub(crate) user_ref: Vec<NodeRef>,
    pub(crate) item_ref: Vec<NodeRef>,
    pub(crate) snap_ref: Vec<NodeRef>,
}

impl EmbeddingBank {
    pub fn new(params: &ModelParams) -> Self {
        let d: ModelDims = params.dims;
        let mut bank = EmbeddingBank {
            dyn_user: Mat64::zeros(d.num_users, d.user_dim),
            dyn_item: Mat64::zeros(d.num_items + 1, d.item_dim),
            user_seen: vec![false; d.num_users],
            item_seen: vec![false; d.num_items],
            prev_item: vec![d.sentinel_item(); d.num_users],
            prev_item_snap: Mat64::zeros(d.num_users, d.item_dim),
            user_last_time: vec![0.0; d.num_users],
            item_last_time: vec![0.0; d.num_items],
            user_ref: vec![NodeRef::InitUser; d.num_users],
            item_ref: vec![NodeRef::InitItem; d.num_items + 1],
            snap_ref: vec![NodeRef::InitItem; d.num_users],
        };
        bank.reset(params);
        bank
    }

    /// Back to the state before any interaction: every row equals the
    /// trainable initial vector of its entity type.
    pub fn reset(&mut self, params: &ModelParams) {
        let d = params.dims;
        self.user_seen.iter_mut().for_each(|s| *s = false);
        self.item_seen.iter_mut().for_each(|s| *s = false);
        self.prev_item.iter_mut().for_each(|p| *p = d.sentinel_item());
        self.user_last_time.iter_mut().for_each(|t| *t = 0.0);
        self.item_last_time.iter_mut().for_each(|t| *t = 0.0);
        self.user_ref.iter_mut().for_each(|r| *r = NodeRef::InitUser);
        self.item_ref.iter_mut().for_each(|r| *r = NodeRef::InitItem);
        self.snap_ref.iter_mut().for_each(|r| *r = NodeRef::InitItem);
        self.refresh_init(params);
    }

    /// Re-copies the initial vectors into rows that no interaction has
    /// touched yet (after the initial vectors were trained).
    pub fn refresh_init(&mut self, params: &ModelParams) {
        for u in 0..self.user_seen.len() {
            if !self.user_seen[u] {
                self.dyn_user.row_mut(u).copy_from_slice(&params.init_user);
                self.prev_item_snap.row_mut(u).copy_from_slice(&params.init_item);
            }
        }
        for i in 0..self.item_seen.len() {
            if !self.item_seen[i] {
                self.dyn_item.row_mut(i).copy_from_slice(&params.init_item);
            }
        }
        let sentinel = self.item_seen.len();
        self.dyn_item.row_mut(sentinel).copy_from_slice(&params.init_item);
    }

    /// Cuts the gradient graph: everything currently stored becomes a constant
    /// except rows still equal to the initial vectors.
    pub(crate) fn freeze_refs(&mut self) {
        for r in self
            .user_ref
            .iter_mut()
            .chain(self.item_ref.iter_mut())
            .chain(self.snap_ref.iter_mut())
        {
            if matches!(r, NodeRef::Out { .. }) {
                *r = NodeRef::Const;
            }
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_seen.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_seen.len()
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.dyn_user.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.dyn_item.row(i)
    }
}
