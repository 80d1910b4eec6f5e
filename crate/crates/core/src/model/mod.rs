//! The coupled user/item embedding model: parameters, the embedding bank,
//! update / project / predict operations and the loss.

mod bank;
pub mod checkpoint;
mod ops;
mod params;
pub mod step;

pub use bank::{EmbeddingBank, NodeRef, Side};
pub use ops::{
    ground_truth_rank, interaction_loss, nearest_item, predict_item, project_user, state_change_loss,
    state_score, update_item, update_user, LossConfig, LossParts, PredictedEmbedding,
};
pub use params::{InitConfig, ModelParams};

use crate::error::{Error, Result};

/// Sizes of every model tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Dynamic user embedding size (n).
    pub user_dim: usize,
    /// Dynamic item embedding size (m).
    pub item_dim: usize,
    pub num_users: usize,
    /// Real items; the static item space has one extra slot for the sentinel.
    pub num_items: usize,
    pub feature_dim: usize,
}

impl ModelDims {
    pub const DEFAULT_EMBED_DIM: usize = 128;

    pub fn new(num_users: usize, num_items: usize, feature_dim: usize, embed_dim: usize) -> Self {
        ModelDims {
            user_dim: embed_dim,
            item_dim: embed_dim,
            num_users,
            num_items,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_dim == 0 || self.item_dim == 0 {
            return Err(Error::Config("embedding dimensions must be at least 1".into()));
        }
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::Config("need at least one user and one item".into()));
        }
        Ok(())
    }

    /// Static user space size (one-hot length).
    pub fn static_user_dim(&self) -> usize {
        self.num_users
    }

    /// Static item space size, including the sentinel slot.
    pub fn static_item_dim(&self) -> usize {
        self.num_items + 1
    }

    pub fn sentinel_item(&self) -> usize {
        self.num_items
    }

    /// Input width of the prediction layer: `[û, ū, k, k̄]`.
    pub fn theta_in(&self) -> usize {
        self.user_dim + self.static_user_dim() + self.item_dim + self.static_item_dim()
    }

    /// Output width of the prediction layer: `[static item part, dynamic item part]`.
    pub fn theta_out(&self) -> usize {
        self.static_item_dim() + self.item_dim
    }

    pub(crate) fn theta_user_onehot_col(&self, user: usize) -> usize {
        self.user_dim + user
    }

    pub(crate) fn theta_item_dyn_cols(&self) -> std::ops::Range<usize> {
        let start = self.user_dim + self.static_user_dim();
        start..start + self.item_dim
    }

    pub(crate) fn theta_item_onehot_col(&self, item: usize) -> usize {
        self.user_dim + self.static_user_dim() + self.item_dim + item
    }
}
