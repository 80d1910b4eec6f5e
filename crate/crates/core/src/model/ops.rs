use super::{EmbeddingBank, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{dot, sigmoid, softplus};

/// Loss weights. `squared` swaps every L2 norm for its square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub lambda_i: f64,
    pub lambda_s: f64,
    pub squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_u: 1.0, lambda_i: 1.0, lambda_s: 1.0, squared: false }
    }
}

impl LossConfig {
    #[inline]
    pub(crate) fn norm_term(&self, v_norm: f64) -> f64 {
        if self.squared {
            v_norm * v_norm
        } else {
            v_norm
        }
    }

    /// d(norm_term(‖v‖))/dv = coef · v
    #[inline]
    pub(crate) fn norm_grad_coef(&self, v_norm: f64) -> f64 {
        if self.squared {
            2.0
        } else if v_norm > 0.0 {
            1.0 / v_norm
        } else {
            0.0
        }
    }
}

/// Per-interaction loss, each component already scaled by its λ.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub pred: f64,
    pub drift_u: f64,
    pub drift_i: f64,
    pub state: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.pred + self.drift_u + self.drift_i + self.state
    }

    pub fn add(&mut self, other: &LossParts) {
        self.pred += other.pred;
        self.drift_u += other.drift_u;
        self.drift_i += other.drift_i;
        self.state += other.state;
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Output of the prediction layer: `[static item part (d_i), dynamic item part (m)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedEmbedding(pub Vec<f64>);

impl PredictedEmbedding {
    pub fn static_part(&self, dims: &ModelDims) -> &[f64] {
        &self.0[..dims.static_item_dim()]
    }

    pub fn dynamic_part(&self, dims: &ModelDims) -> &[f64] {
        &self.0[dims.static_item_dim()..]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(op, expected, got));
    }
    Ok(())
}

pub(crate) fn rnn_input(other: &[f64], features: &[f64], delta: f64, out: &mut [f64]) {
    let (a, rest) = out.split_at_mut(other.len());
    a.copy_from_slice(other);
    let (f, d) = rest.split_at_mut(features.len());
    f.copy_from_slice(features);
    d[0] = delta;
}

pub fn update_user(params: &ModelParams, u_prev: &[f64], i_prev: &[f64], delta_u: f64, f: &[f64]) -> Result<Vec<f64>> {
    let d = params.dims;
    check_len("update_user", d.item_dim, i_prev.len())?;
    check_len("update_user", d.feature_dim, f.len())?;
    let mut input = vec![0.0; d.item_dim + d.feature_dim + 1];
    rnn_input(i_prev, f, delta_u, &mut input);
    params.rnn_user.forward(u_prev, &input)
}

pub fn update_item(params: &ModelParams, i_prev: &[f64], u_prev: &[f64], delta_i: f64, f: &[f64]) -> Result<Vec<f64>> {
    let d = params.dims;
    check_len("update_item", d.user_dim, u_prev.len())?;
    check_len("update_item", d.feature_dim, f.len())?;
    let mut input = vec![0.0; d.user_dim + d.feature_dim + 1];
    rnn_input(u_prev, f, delta_i, &mut input);
    params.rnn_item.forward(i_prev, &input)
}

#[inline]
pub(crate) fn project_into(proj_w: &[f64], u: &[f64], delta: f64, out: &mut [f64]) {
    for ((o, &w), &x) in out.iter_mut().zip(proj_w).zip(u) {
        *o = (1.0 + w * delta) * x;
    }
}

/// `û = (1 + w) ∘ u` with `w = proj_w · Δ`.
pub fn project_user(params: &ModelParams, u: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_len("project_user", params.dims.user_dim, u.len())?;
    let mut out = vec![0.0; u.len()];
    project_into(&params.proj_w, u, delta, &mut out);
    Ok(out)
}

/// One output unit of the prediction layer; the one-hot inputs contribute the
/// single weight at their column.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn theta_unit(
    row: &[f64],
    n: usize,
    item_cols: std::ops::Range<usize>,
    u_hat: &[f64],
    ucol: usize,
    k_dyn: &[f64],
    kcol: usize,
    bias: f64,
) -> f64 {
    let mut v = dot(&row[..n], u_hat) + row[ucol];
    v += dot(&row[item_cols], k_dyn) + row[kcol];
    v + bias
}

/// Full prediction-layer output for one interaction.
#[inline]
pub(crate) fn theta_into(params: &ModelParams, u_hat: &[f64], user: usize, k_dyn: &[f64], k: usize, out: &mut [f64]) {
    let d = &params.dims;
    let w = params.theta_weight();
    let item_cols = d.theta_item_dyn_cols();
    let ucol = d.theta_user_onehot_col(user);
    let kcol = d.theta_item_onehot_col(k);
    let bias = params.theta.bias.as_deref();
    for (o, y) in out.iter_mut().enumerate() {
        let b = bias.map_or(0.0, |b| b[o]);
        *y = theta_unit(w.row(o), d.user_dim, item_cols.clone(), u_hat, ucol, k_dyn, kcol, b);
    }
}

pub fn predict_item(
    params: &ModelParams,
    u_hat: &[f64],
    user: usize,
    prev_item_dyn: &[f64],
    prev_item: usize,
) -> Result<PredictedEmbedding> {
    let d = params.dims;
    check_len("predict_item", d.user_dim, u_hat.len())?;
    check_len("predict_item", d.item_dim, prev_item_dyn.len())?;
    if user >= d.num_users {
        return Err(Error::IdOutOfRange { what: "user", id: user, limit: d.num_users });
    }
    if prev_item > d.sentinel_item() {
        return Err(Error::IdOutOfRange { what: "item", id: prev_item, limit: d.static_item_dim() });
    }
    let mut out = vec![0.0; d.theta_out()];
    theta_into(params, u_hat, user, prev_item_dyn, prev_item, &mut out);
    Ok(PredictedEmbedding(out))
}

/// Squared distance from `pred` to `[onehot(j), dyn(j)]` for every real item.
fn item_sq_distances(pred: &PredictedEmbedding, dims: &ModelDims, bank: &EmbeddingBank) -> Vec<f64> {
    let stat = pred.static_part(dims);
    let dynp = pred.dynamic_part(dims);
    let base = dot(stat, stat) + 1.0;
    (0..dims.num_items)
        .map(|j| {
            let row = bank.item(j);
            let mut dd = 0.0;
            for (a, b) in dynp.iter().zip(row) {
                dd += (a - b) * (a - b);
            }
            base - 2.0 * stat[j] + dd
        })
        .collect()
}

/// Every real item ordered by ascending distance to the prediction (ties by id).
pub fn nearest_item(pred: &PredictedEmbedding, dims: &ModelDims, bank: &EmbeddingBank) -> Vec<usize> {
    let dist = item_sq_distances(pred, dims, bank);
    let mut order: Vec<usize> = (0..dims.num_items).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order
}

/// 1-based rank of `truth`; items at exactly the same distance are counted
/// ahead of it.
pub fn ground_truth_rank(pred: &PredictedEmbedding, dims: &ModelDims, bank: &EmbeddingBank, truth: usize) -> usize {
    let dist = item_sq_distances(pred, dims, bank);
    let target = dist[truth];
    1 + dist
        .iter()
        .enumerate()
        .filter(|&(j, &d)| j != truth && d <= target)
        .count()
}

/// The three-term interaction loss plus nothing else; the state term is
/// computed by [`state_change_loss`].
#[allow(clippy::too_many_arguments)]
pub fn interaction_loss(
    dims: &ModelDims,
    cfg: &LossConfig,
    pred: &PredictedEmbedding,
    true_item: usize,
    j_before: &[f64],
    j_after: &[f64],
    u_before: &[f64],
    u_after: &[f64],
) -> LossParts {
    loss_terms(dims, cfg, &pred.0, true_item, j_before, j_after, u_before, u_after)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_terms(
    dims: &ModelDims,
    cfg: &LossConfig,
    pred: &[f64],
    true_item: usize,
    j_before: &[f64],
    j_after: &[f64],
    u_before: &[f64],
    u_after: &[f64],
) -> LossParts {
    let (stat, dynp) = pred.split_at(dims.static_item_dim());
    let mut sq = 0.0;
    for (c, &p) in stat.iter().enumerate() {
        let t = if c == true_item { 1.0 } else { 0.0 };
        sq += (p - t) * (p - t);
    }
    for (p, t) in dynp.iter().zip(j_before) {
        sq += (p - t) * (p - t);
    }
    let mut du = 0.0;
    for (a, b) in u_after.iter().zip(u_before) {
        du += (a - b) * (a - b);
    }
    let mut di = 0.0;
    for (a, b) in j_after.iter().zip(j_before) {
        di += (a - b) * (a - b);
    }
    LossParts {
        pred: cfg.norm_term(sq.sqrt()),
        drift_u: cfg.lambda_u * cfg.norm_term(du.sqrt()),
        drift_i: cfg.lambda_i * cfg.norm_term(di.sqrt()),
        state: 0.0,
    }
}

pub(crate) fn state_logit(params: &ModelParams, u_after: &[f64]) -> f64 {
    dot(params.state_head.weight.row(0), u_after) + params.state_head.bias.as_ref().map_or(0.0, |b| b[0])
}

/// Probability of a state change after the interaction that produced `u_after`.
pub fn state_score(params: &ModelParams, u_after: &[f64]) -> f64 {
    sigmoid(state_logit(params, u_after))
}

/// Unscaled binary cross-entropy of the state head against `label`.
pub fn state_change_loss(params: &ModelParams, u_after: &[f64], label: bool) -> f64 {
    let s = state_logit(params, u_after);
    softplus(s) - if label { s } else { 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitConfig;
    use crate::numcore::Mat64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { user_dim: 3, item_dim: 3, num_users: 3, num_items: 3, feature_dim: 2 }
    }

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(dims(), InitConfig { seed, weight_std: 0.5 }).unwrap()
    }

    #[test]
    fn zero_params_update_to_zero() {
        let p = ModelParams::zeros(dims());
        let out = update_user(&p, &[0.3, -0.2, 0.9], &[1.0, 2.0, 3.0], 4.0, &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let out = update_item(&p, &[0.3, -0.2, 0.9], &[1.0, 2.0, 3.0], 4.0, &[1.0, -1.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn updates_stay_in_tanh_range_and_are_shared() {
        let p = params(1);
        let a = update_user(&p, &[0.9, -0.9, 0.5], &[5.0, -5.0, 2.0], 10.0, &[3.0, 3.0]).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1.0));
        // same inputs for two different users: the cell is shared
        let b = update_user(&p, &[0.9, -0.9, 0.5], &[5.0, -5.0, 2.0], 10.0, &[3.0, 3.0]).unwrap();
        assert_eq!(a, b);
        let c = update_item(&p, &[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6], 1.0, &[0.0, 1.0]).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1.0));
        assert_eq!(c, update_item(&p, &[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6], 1.0, &[0.0, 1.0]).unwrap());
        assert!(update_user(&p, &[0.0; 3], &[0.0; 2], 0.0, &[0.0; 2]).is_err());
    }

    #[test]
    fn projection_identity_and_zero() {
        let p = params(2);
        let u = [0.4, -0.7, 0.1];
        assert_eq!(project_user(&p, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(project_user(&p, &[0.0; 3], 123.0).unwrap(), vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn projection_is_affine_in_delta(seed in 0u64..1000, delta in 0.0f64..5.0, a in -3.0f64..3.0) {
            let p = params(seed);
            let u = [0.4, -0.7, 0.1];
            let base = project_user(&p, &u, delta).unwrap();
            let scaled = project_user(&p, &u, a * delta).unwrap();
            for k in 0..3 {
                let lhs = scaled[k] - u[k];
                let rhs = a * (base[k] - u[k]);
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_theta_outputs_bias() {
        let mut p = params(3);
        p.theta.weight.fill(0.0);
        let c: Vec<f64> = (0..dims().theta_out()).map(|k| k as f64 * 0.5).collect();
        p.theta.bias = Some(c.clone());
        let out = predict_item(&p, &[1.0, 2.0, 3.0], 1, &[4.0, 5.0, 6.0], 3).unwrap();
        assert_eq!(out.0, c);
        assert_eq!(out.len(), dims().static_item_dim() + dims().item_dim);
    }

    #[test]
    fn column_selection_equals_explicit_one_hot() {
        let p = params(4);
        let d = dims();
        let u_hat = [0.2, -0.1, 0.7];
        let k_dyn = [0.5, 0.3, -0.6];
        for user in 0..3 {
            for k in 0..=3 {
                let mut x = u_hat.to_vec();
                x.extend(p.static_user_embedding(user));
                x.extend(k_dyn);
                x.extend(p.static_item_embedding(k));
                assert_eq!(x.len(), d.theta_in());
                let dense = p.theta.forward(&x).unwrap();
                let fast = predict_item(&p, &u_hat, user, &k_dyn, k).unwrap();
                for (a, b) in dense.iter().zip(&fast.0) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(predict_item(&p, &u_hat, 3, &k_dyn, 0).is_err());
        assert!(predict_item(&p, &u_hat, 0, &k_dyn, 4).is_err());
    }

    fn bank_with(items: &[[f64; 2]]) -> (ModelDims, EmbeddingBank) {
        let d = ModelDims { user_dim: 2, item_dim: 2, num_users: 1, num_items: items.len(), feature_dim: 0 };
        let p = ModelParams::zeros(d);
        let mut bank = EmbeddingBank::new(&p);
        for (j, e) in items.iter().enumerate() {
            bank.dyn_item.row_mut(j).copy_from_slice(e);
        }
        (d, bank)
    }

    fn target(d: &ModelDims, bank: &EmbeddingBank, j: usize) -> PredictedEmbedding {
        let mut v = vec![0.0; d.static_item_dim()];
        v[j] = 1.0;
        v.extend_from_slice(bank.item(j));
        PredictedEmbedding(v)
    }

    #[test]
    fn exact_target_ranks_first() {
        let items: Vec<[f64; 2]> = (0..8).map(|j| [j as f64 * 0.1, -(j as f64) * 0.2]).collect();
        let (d, bank) = bank_with(&items);
        let pred = target(&d, &bank, 5);
        assert_eq!(nearest_item(&pred, &d, &bank)[0], 5);
        assert_eq!(ground_truth_rank(&pred, &d, &bank, 5), 1);
    }

    #[test]
    fn ties_rank_ground_truth_last() {
        let items = vec![[0.3, 0.3]; 6];
        let (d, bank) = bank_with(&items);
        let mut v = vec![0.0; d.static_item_dim()];
        v.extend([0.3, 0.3]);
        let pred = PredictedEmbedding(v);
        for truth in 0..6 {
            assert_eq!(ground_truth_rank(&pred, &d, &bank, truth), 6);
        }
    }

    #[test]
    fn ranking_matches_brute_force_distances() {
        let items = [[0.0, 0.0], [1.0, 1.0], [-0.5, 0.25], [0.2, -0.9]];
        let (d, bank) = bank_with(&items);
        let pred = PredictedEmbedding(vec![0.1, 0.6, 0.0, 0.2, 0.0, 0.3, 0.4]);
        // brute force over explicit [onehot(j), e_j]
        let mut brute: Vec<(f64, usize)> = (0..4)
            .map(|j| {
                let t = target(&d, &bank, j);
                (crate::numcore::l2_dist(&pred.0, &t.0).unwrap(), j)
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0));
        let expect: Vec<usize> = brute.iter().map(|&(_, j)| j).collect();
        assert_eq!(nearest_item(&pred, &d, &bank), expect);
        for (r, &j) in expect.iter().enumerate() {
            assert_eq!(ground_truth_rank(&pred, &d, &bank, j), r + 1);
        }
    }

    proptest! {
        #[test]
        fn appending_far_items_keeps_ranking(seed in 0u64..500, extra in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let items: Vec<[f64; 2]> = (0..5).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let (d, bank) = bank_with(&items);
            let mut stat: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
            let dynp = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut v = stat.clone();
            v.push(0.0);
            v.extend(dynp);
            let before = nearest_item(&PredictedEmbedding(v), &d, &bank);

            let mut more = items.clone();
            more.extend(std::iter::repeat_n([50.0, 50.0], extra));
            let (d2, bank2) = bank_with(&more);
            stat.extend(std::iter::repeat_n(0.0, extra));
            let mut v2 = stat;
            v2.push(0.0);
            v2.extend(dynp);
            let after = nearest_item(&PredictedEmbedding(v2), &d2, &bank2);
            prop_assert_eq!(&after[..5], &before[..]);
        }
    }

    #[test]
    fn loss_examples() {
        let d = ModelDims { user_dim: 2, item_dim: 2, num_users: 1, num_items: 1, feature_dim: 0 };
        let cfg = LossConfig::default();
        // perfect prediction of item 0 with frozen embeddings
        let j = [0.2, -0.4];
        let pred = PredictedEmbedding(vec![1.0, 0.0, 0.2, -0.4]);
        let l = interaction_loss(&d, &cfg, &pred, 0, &j, &j, &[0.1, 0.1], &[0.1, 0.1]);
        assert_eq!(l.total(), 0.0);

        // λ = 0 leaves only the prediction distance
        let zero = LossConfig { lambda_u: 0.0, lambda_i: 0.0, ..cfg };
        let pred = PredictedEmbedding(vec![0.0, 0.0, 0.2, -0.4]);
        let l = interaction_loss(&d, &zero, &pred, 0, &j, &[0.9, 0.9], &[0.0, 0.0], &[0.5, 0.5]);
        assert_eq!(l.total(), l.pred);
        assert_eq!(l.pred, 1.0);

        // pred = (1, 0, ...) against target 0 with no drift
        let d3 = ModelDims { user_dim: 2, item_dim: 2, num_users: 1, num_items: 2, feature_dim: 0 };
        let pred = PredictedEmbedding(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let l = interaction_loss(&d3, &cfg, &pred, 2, &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        // target is the sentinel one-hot: distance sqrt(2); against item 1 it is 1
        assert!((l.pred - 2f64.sqrt()).abs() < 1e-15);
        let l = interaction_loss(&d3, &cfg, &PredictedEmbedding(vec![0.0, 0.0, 0.0, 0.0, 0.0]), 1, &[1.0, 0.0], &[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(l.pred, 2f64.sqrt());
    }

    #[test]
    fn drift_terms_vanish_iff_unchanged() {
        let d = ModelDims { user_dim: 2, item_dim: 2, num_users: 1, num_items: 1, feature_dim: 0 };
        let cfg = LossConfig::default();
        let pred = PredictedEmbedding(vec![0.0; 4]);
        let same = interaction_loss(&d, &cfg, &pred, 0, &[0.3, 0.3], &[0.3, 0.3], &[0.1, 0.2], &[0.1, 0.2]);
        assert_eq!((same.drift_u, same.drift_i), (0.0, 0.0));
        let moved = interaction_loss(&d, &cfg, &pred, 0, &[0.3, 0.3], &[0.3, 0.4], &[0.1, 0.2], &[0.1, 0.25]);
        assert!(moved.drift_u > 0.0 && moved.drift_i > 0.0);
    }

    #[test]
    fn state_loss_examples() {
        let mut p = ModelParams::zeros(dims());
        assert!((state_change_loss(&p, &[0.5, 0.5, 0.5], true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((state_change_loss(&p, &[0.5, 0.5, 0.5], false) - std::f64::consts::LN_2).abs() < 1e-15);
        p.state_head.bias = Some(vec![40.0]);
        assert!(state_change_loss(&p, &[0.0; 3], true) < 1e-15);
        assert!(state_score(&p, &[0.0; 3]) > 0.999);
    }

    #[test]
    fn state_loss_gradient_matches_finite_differences() {
        let p = params(9);
        let u = [0.3, -0.8, 0.45];
        for label in [false, true] {
            let p_s = state_score(&p, &u);
            let analytic: Vec<f64> = p.state_head.weight.row(0).iter().map(|w| (p_s - f64::from(u8::from(label))) * w).collect();
            let fd = crate::numcore::finite_diff_grad(|x| state_change_loss(&p, x, label), &u, 1e-5);
            for (a, b) in analytic.iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-8));
            }
        }
        let _ = Mat64::zeros(1, 1);
    }
}
