use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelDims;
use crate::error::{Error, Result};
use crate::numcore::{LinearLayer, Mat64, RnnCell};

/// Random initialization settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub seed: u64,
    /// Std of the Gaussian used for the recurrent cells, the projection
    /// vector and the state head.
    pub weight_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { seed: 0, weight_std: 0.1 }
    }
}

/// Every trainable tensor. The same struct doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// State n, input `[i(t⁻), f, Δu]`.
    pub rnn_user: RnnCell,
    /// State m, input `[u(t⁻), f, Δi]`.
    pub rnn_item: RnnCell,
    /// Bias-free map from elapsed time to the projection context vector.
    pub proj_w: Vec<f64>,
    pub theta: LinearLayer,
    pub state_head: LinearLayer,
    pub init_user: Vec<f64>,
    pub init_item: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let (n, m, f) = (dims.user_dim, dims.item_dim, dims.feature_dim);
        ModelParams {
            dims,
            rnn_user: RnnCell::zeros(n, m + f + 1),
            rnn_item: RnnCell::zeros(m, n + f + 1),
            proj_w: vec![0.0; n],
            theta: LinearLayer::zeros(dims.theta_out(), dims.theta_in(), true),
            state_head: LinearLayer::zeros(1, n, true),
            init_user: vec![0.0; n],
            init_item: vec![0.0; m],
        }
    }

    pub fn init(dims: ModelDims, cfg: InitConfig) -> Result<Self> {
        dims.validate()?;
        if !(cfg.weight_std >= 0.0 && cfg.weight_std.is_finite()) {
            return Err(Error::Config(format!("weight std must be non-negative, got {}", cfg.weight_std)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.weight_std).expect("valid std");
        let mut p = ModelParams::zeros(dims);
        let mut gauss = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        gauss(p.rnn_user.w_state.as_mut_slice());
        gauss(p.rnn_user.w_input.as_mut_slice());
        gauss(p.rnn_item.w_state.as_mut_slice());
        gauss(p.rnn_item.w_input.as_mut_slice());
        gauss(&mut p.proj_w);
        gauss(p.state_head.weight.as_mut_slice());

        let bound = 1.0 / (dims.theta_in() as f64).sqrt();
        for w in p.theta.weight.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        for b in p.theta.bias.as_mut().expect("theta has bias") {
            *b = rng.random_range(-bound..bound);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims)
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("rnn_user.w_state", self.rnn_user.w_state.as_slice()),
            ("rnn_user.w_input", self.rnn_user.w_input.as_slice()),
            ("rnn_user.bias", &self.rnn_user.bias),
            ("rnn_item.w_state", self.rnn_item.w_state.as_slice()),
            ("rnn_item.w_input", self.rnn_item.w_input.as_slice()),
            ("rnn_item.bias", &self.rnn_item.bias),
            ("proj_w", &self.proj_w),
            ("theta.weight", self.theta.weight.as_slice()),
            ("theta.bias", self.theta.bias.as_deref().unwrap_or(&[])),
            ("state_head.weight", self.state_head.weight.as_slice()),
            ("state_head.bias", self.state_head.bias.as_deref().unwrap_or(&[])),
            ("init_user", &self.init_user),
            ("init_item", &self.init_item),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("rnn_user.w_state", self.rnn_user.w_state.as_mut_slice()),
            ("rnn_user.w_input", self.rnn_user.w_input.as_mut_slice()),
            ("rnn_user.bias", &mut self.rnn_user.bias),
            ("rnn_item.w_state", self.rnn_item.w_state.as_mut_slice()),
            ("rnn_item.w_input", self.rnn_item.w_input.as_mut_slice()),
            ("rnn_item.bias", &mut self.rnn_item.bias),
            ("proj_w", &mut self.proj_w),
            ("theta.weight", self.theta.weight.as_mut_slice()),
            ("theta.bias", self.theta.bias.as_deref_mut().unwrap_or(&mut [])),
            ("state_head.weight", self.state_head.weight.as_mut_slice()),
            ("state_head.bias", self.state_head.bias.as_deref_mut().unwrap_or(&mut [])),
            ("init_user", &mut self.init_user),
            ("init_item", &mut self.init_item),
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("ModelParams::set_flat", self.num_scalars(), flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Full one-hot static embedding of a user (tests and diagnostics only).
    pub fn static_user_embedding(&self, user: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dims.static_user_dim()];
        v[user] = 1.0;
        v
    }

    pub fn static_item_embedding(&self, item: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dims.static_item_dim()];
        v[item] = 1.0;
        v
    }

    pub(crate) fn theta_weight(&self) -> &Mat64 {
        &self.theta.weight
    }
}
