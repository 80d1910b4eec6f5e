//! Batched forward pass over one t-Batch and reverse-mode gradients over a
//! window of consecutive batches.

use rayon::prelude::*;

use super::ops::{loss_terms, project_into, rnn_input, state_logit, theta_unit};
use super::{EmbeddingBank, LossConfig, LossParts, ModelParams, NodeRef, Side};
use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::numcore::{axpy, dot, sigmoid, softplus, Mat64, PAR_ROWS, ROW_BLOCK};

/// Everything a step needs besides the bank.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub params: &'a ModelParams,
    pub loss: LossConfig,
    pub dataset: &'a Dataset,
    /// Normalized elapsed time since the user's previous interaction, by seq index.
    pub delta_u: &'a [f64],
    /// Same for the item.
    pub delta_i: &'a [f64],
    /// Reported in non-finite loss diagnostics.
    pub epoch: usize,
}

/// Activations of one batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchTape {
    pub seq: Vec<usize>,
    users: Vec<usize>,
    items: Vec<usize>,
    prev_items: Vec<usize>,
    labels: Vec<bool>,
    du: Vec<f64>,
    u_prev: Mat64,
    j_prev: Mat64,
    k_dyn: Mat64,
    u_ref: Vec<NodeRef>,
    j_ref: Vec<NodeRef>,
    k_ref: Vec<NodeRef>,
    user_in: Mat64,
    item_in: Mat64,
    u_hat: Mat64,
    pred: Mat64,
    u_after: Mat64,
    j_after: Mat64,
    logits: Vec<f64>,
    pub loss: LossParts,
}

impl BatchTape {
    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn user_after(&self, r: usize) -> &[f64] {
        self.u_after.row(r)
    }

    pub fn item_after(&self, r: usize) -> &[f64] {
        self.j_after.row(r)
    }

    pub fn prediction(&self, r: usize) -> &[f64] {
        self.pred.row(r)
    }

    /// Probability of a state change after row `r`.
    pub fn state_score(&self, r: usize) -> f64 {
        sigmoid(self.logits[r])
    }
}

fn check_distinct(what: &'static str, ids: &[usize]) -> Result<()> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("batch contains {what} {} more than once", w[0])));
    }
    Ok(())
}

/// Batched prediction layer, blocked so each weight row is loaded once per
/// block of interactions.
fn theta_batch(params: &ModelParams, u_hat: &Mat64, users: &[usize], k_dyn: &Mat64, prev: &[usize]) -> Mat64 {
    let d = params.dims;
    let out_dim = d.theta_out();
    let w = params.theta_weight();
    let bias = params.theta.bias.as_deref();
    let item_cols = d.theta_item_dyn_cols();
    let mut out = Mat64::zeros(users.len(), out_dim);
    let kernel = |(blk, chunk): (usize, &mut [f64])| {
        let r0 = blk * ROW_BLOCK;
        let rows = chunk.len() / out_dim;
        let cols: Vec<(usize, usize)> = (r0..r0 + rows)
            .map(|r| (d.theta_user_onehot_col(users[r]), d.theta_item_onehot_col(prev[r])))
            .collect();
        for o in 0..out_dim {
            let row = w.row(o);
            let b = bias.map_or(0.0, |b| b[o]);
            for (k, &(ucol, kcol)) in cols.iter().enumerate() {
                let r = r0 + k;
                chunk[k * out_dim + o] =
                    theta_unit(row, d.user_dim, item_cols.clone(), u_hat.row(r), ucol, k_dyn.row(r), kcol, b);
            }
        }
    };
    if out_dim == 0 {
        return out;
    }
    let block = ROW_BLOCK * out_dim;
    if users.len() >= PAR_ROWS {
        out.as_mut_slice().par_chunks_mut(block).enumerate().for_each(kernel);
    } else {
        out.as_mut_slice().chunks_mut(block).enumerate().for_each(kernel);
    }
    out
}

/// Runs one batch: reads every input from the bank, computes all rows, then
/// writes the new embeddings back. Rows must not share a user or an item.
/// `batch_id` tags the written rows for gradient routing.
pub fn forward_batch(ctx: &StepContext, bank: &mut EmbeddingBank, batch_id: u32, rows: &[usize]) -> Result<BatchTape> {
    let p = ctx.params;
    let d = p.dims;
    let (n, m, nf) = (d.user_dim, d.item_dim, d.feature_dim);
    let b = rows.len();

    let mut users = Vec::with_capacity(b);
    let mut items = Vec::with_capacity(b);
    for &s in rows {
        let it = ctx
            .dataset
            .interactions
            .get(s)
            .ok_or(Error::IdOutOfRange { what: "interaction", id: s, limit: ctx.dataset.len() })?;
        if it.user >= d.num_users {
            return Err(Error::IdOutOfRange { what: "user", id: it.user, limit: d.num_users });
        }
        if it.item >= d.num_items {
            return Err(Error::IdOutOfRange { what: "item", id: it.item, limit: d.num_items });
        }
        if it.features.len() != nf {
            return Err(Error::shape("forward_batch features", nf, it.features.len()));
        }
        users.push(it.user);
        items.push(it.item);
    }
    check_distinct("user", &users)?;
    check_distinct("item", &items)?;

    let mut tape = BatchTape {
        seq: rows.to_vec(),
        prev_items: users.iter().map(|&u| bank.prev_item[u]).collect(),
        labels: rows.iter().map(|&s| ctx.dataset.interactions[s].state_label).collect(),
        du: rows.iter().map(|&s| ctx.delta_u[s]).collect(),
        u_prev: Mat64::zeros(b, n),
        j_prev: Mat64::zeros(b, m),
        k_dyn: Mat64::zeros(b, m),
        u_ref: users.iter().map(|&u| bank.user_ref[u]).collect(),
        j_ref: items.iter().map(|&i| bank.item_ref[i]).collect(),
        k_ref: users.iter().map(|&u| bank.snap_ref[u]).collect(),
        user_in: Mat64::zeros(b, m + nf + 1),
        item_in: Mat64::zeros(b, n + nf + 1),
        u_hat: Mat64::zeros(b, n),
        pred: Mat64::zeros(0, 0),
        u_after: Mat64::zeros(0, 0),
        j_after: Mat64::zeros(0, 0),
        logits: vec![0.0; b],
        loss: LossParts::default(),
        users,
        items,
    };

    for (r, &s) in rows.iter().enumerate() {
        let (u, i) = (tape.users[r], tape.items[r]);
        let f = &ctx.dataset.interactions[s].features;
        tape.u_prev.row_mut(r).copy_from_slice(bank.user(u));
        tape.j_prev.row_mut(r).copy_from_slice(bank.item(i));
        tape.k_dyn.row_mut(r).copy_from_slice(bank.prev_item_snap.row(u));
        rnn_input(bank.item(i), f, ctx.delta_u[s], tape.user_in.row_mut(r));
        rnn_input(bank.user(u), f, ctx.delta_i[s], tape.item_in.row_mut(r));
        project_into(&p.proj_w, bank.user(u), ctx.delta_u[s], tape.u_hat.row_mut(r));
    }

    tape.pred = theta_batch(p, &tape.u_hat, &tape.users, &tape.k_dyn, &tape.prev_items);
    tape.u_after = p.rnn_user.forward_batch(&tape.u_prev, &tape.user_in)?;
    tape.j_after = p.rnn_item.forward_batch(&tape.j_prev, &tape.item_in)?;

    #[allow(clippy::needless_range_loop)]
    for r in 0..b {
        let mut parts = loss_terms(
            &d,
            &ctx.loss,
            tape.pred.row(r),
            tape.items[r],
            tape.j_prev.row(r),
            tape.j_after.row(r),
            tape.u_prev.row(r),
            tape.u_after.row(r),
        );
        let s = state_logit(p, tape.u_after.row(r));
        tape.logits[r] = s;
        parts.state = ctx.loss.lambda_s * (softplus(s) - if tape.labels[r] { s } else { 0.0 });
        if !parts.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: ctx.epoch, batch: batch_id as usize, seq_index: rows[r] });
        }
        tape.loss.add(&parts);
    }

    for (r, &s) in rows.iter().enumerate() {
        let (u, i) = (tape.users[r], tape.items[r]);
        let t = ctx.dataset.interactions[s].timestamp;
        bank.dyn_user.row_mut(u).copy_from_slice(tape.u_after.row(r));
        bank.dyn_item.row_mut(i).copy_from_slice(tape.j_after.row(r));
        bank.prev_item_snap.row_mut(u).copy_from_slice(tape.j_after.row(r));
        bank.prev_item[u] = i;
        bank.user_seen[u] = true;
        bank.item_seen[i] = true;
        bank.user_last_time[u] = t;
        bank.item_last_time[i] = t;
        let row = r as u32;
        bank.user_ref[u] = NodeRef::Out { batch: batch_id, row, side: Side::User };
        bank.item_ref[i] = NodeRef::Out { batch: batch_id, row, side: Side::Item };
        bank.snap_ref[u] = NodeRef::Out { batch: batch_id, row, side: Side::Item };
    }
    Ok(tape)
}

/// Gradient of the summed loss of every tape w.r.t. all parameters,
/// accumulated into `grads`. `tapes[k]` must have been produced with
/// `batch_id = k`; refs that point outside the window are treated as constants.
pub fn backward_window(params: &ModelParams, loss: &LossConfig, tapes: &[BatchTape], grads: &mut ModelParams) {
    let d = params.dims;
    let (n, m) = (d.user_dim, d.item_dim);
    let mut g_user: Vec<Mat64> = tapes.iter().map(|t| Mat64::zeros(t.len(), n)).collect();
    let mut g_item: Vec<Mat64> = tapes.iter().map(|t| Mat64::zeros(t.len(), m)).collect();

    for b in (0..tapes.len()).rev() {
        let tape = &tapes[b];
        let mut g_u_after = std::mem::replace(&mut g_user[b], Mat64::zeros(0, 0));
        let mut g_j_after = std::mem::replace(&mut g_item[b], Mat64::zeros(0, 0));
        let (d_u_prev, d_j_prev, d_k_dyn) = backward_batch(params, loss, tape, &mut g_u_after, &mut g_j_after, grads);

        let mut route = |r: NodeRef, g: &[f64], grads: &mut ModelParams| match r {
            NodeRef::Const => {}
            NodeRef::InitUser => axpy(1.0, g, &mut grads.init_user),
            NodeRef::InitItem => axpy(1.0, g, &mut grads.init_item),
            NodeRef::Out { batch, row, side } => {
                let bb = batch as usize;
                if bb >= b {
                    debug_assert!(false, "gradient routed forward in time");
                    return;
                }
                let target = match side {
                    Side::User => &mut g_user[bb],
                    Side::Item => &mut g_item[bb],
                };
                axpy(1.0, g, target.row_mut(row as usize));
            }
        };
        for r in 0..tape.len() {
            route(tape.u_ref[r], d_u_prev.row(r), grads);
            route(tape.j_ref[r], d_j_prev.row(r), grads);
            route(tape.k_ref[r], d_k_dyn.row(r), grads);
        }
    }
}

/// Local backward for one batch given upstream gradients on its outputs.
/// Returns gradients w.r.t. the user inputs, item inputs and previous-item inputs.
fn backward_batch(
    params: &ModelParams,
    loss: &LossConfig,
    tape: &BatchTape,
    g_u_after: &mut Mat64,
    g_j_after: &mut Mat64,
    grads: &mut ModelParams,
) -> (Mat64, Mat64, Mat64) {
    let d = params.dims;
    let (n, m) = (d.user_dim, d.item_dim);
    let b = tape.len();
    let si = d.static_item_dim();
    let out_dim = d.theta_out();

    let mut d_pred = Mat64::zeros(b, out_dim);
    let mut d_u_prev = Mat64::zeros(b, n);
    let mut d_j_prev = Mat64::zeros(b, m);
    let head_w = params.state_head.weight.row(0);

    for r in 0..b {
        // prediction distance
        let pred = tape.pred.row(r);
        let jp = tape.j_prev.row(r);
        let e = d_pred.row_mut(r);
        for c in 0..si {
            e[c] = pred[c] - if c == tape.items[r] { 1.0 } else { 0.0 };
        }
        for c in 0..m {
            e[si + c] = pred[si + c] - jp[c];
        }
        let coef = loss.norm_grad_coef(dot(e, e).sqrt());
        e.iter_mut().for_each(|x| *x *= coef);
        axpy(-1.0, &e[si..], d_j_prev.row_mut(r));

        // drift terms
        let diff_u: Vec<f64> = tape.u_after.row(r).iter().zip(tape.u_prev.row(r)).map(|(a, b)| a - b).collect();
        let cu = loss.lambda_u * loss.norm_grad_coef(dot(&diff_u, &diff_u).sqrt());
        axpy(cu, &diff_u, g_u_after.row_mut(r));
        axpy(-cu, &diff_u, d_u_prev.row_mut(r));
        let diff_j: Vec<f64> = tape.j_after.row(r).iter().zip(jp).map(|(a, b)| a - b).collect();
        let cj = loss.lambda_i * loss.norm_grad_coef(dot(&diff_j, &diff_j).sqrt());
        axpy(cj, &diff_j, g_j_after.row_mut(r));
        axpy(-cj, &diff_j, d_j_prev.row_mut(r));

        // state head
        let y = if tape.labels[r] { 1.0 } else { 0.0 };
        let ds = loss.lambda_s * (sigmoid(tape.logits[r]) - y);
        axpy(ds, head_w, g_u_after.row_mut(r));
        axpy(ds, tape.u_after.row(r), grads.state_head.weight.row_mut(0));
        if let Some(hb) = grads.state_head.bias.as_mut() {
            hb[0] += ds;
        }
    }

    let (d_u_hat, d_k_dyn) = theta_backward(params, tape, &d_pred, grads);

    for r in 0..b {
        let delta = tape.du[r];
        let up = tape.u_prev.row(r);
        let gh = d_u_hat.row(r);
        let out = d_u_prev.row_mut(r);
        for k in 0..n {
            out[k] += gh[k] * (1.0 + params.proj_w[k] * delta);
            grads.proj_w[k] += gh[k] * up[k] * delta;
        }
    }

    let (gs, gi) = params
        .rnn_user
        .backward_batch(&tape.u_prev, &tape.user_in, &tape.u_after, g_u_after, &mut grads.rnn_user);
    for r in 0..b {
        axpy(1.0, gs.row(r), d_u_prev.row_mut(r));
        axpy(1.0, &gi.row(r)[..m], d_j_prev.row_mut(r));
    }
    let (gs, gi) = params
        .rnn_item
        .backward_batch(&tape.j_prev, &tape.item_in, &tape.j_after, g_j_after, &mut grads.rnn_item);
    for r in 0..b {
        axpy(1.0, gs.row(r), d_j_prev.row_mut(r));
        axpy(1.0, &gi.row(r)[..n], d_u_prev.row_mut(r));
    }
    (d_u_prev, d_j_prev, d_k_dyn)
}

/// Prediction-layer backward with one-hot blocks as column scatters.
fn theta_backward(params: &ModelParams, tape: &BatchTape, d_pred: &Mat64, grads: &mut ModelParams) -> (Mat64, Mat64) {
    let d = params.dims;
    let (n, m) = (d.user_dim, d.item_dim);
    let b = tape.len();
    let dyn_cols = d.theta_item_dyn_cols();
    let w = params.theta_weight();
    let in_dim = d.theta_in();

    let weight_kernel = |(o, g_row): (usize, &mut [f64])| {
        for r in 0..b {
            let c = d_pred.get(r, o);
            if c == 0.0 {
                continue;
            }
            axpy(c, tape.u_hat.row(r), &mut g_row[..n]);
            axpy(c, tape.k_dyn.row(r), &mut g_row[dyn_cols.clone()]);
            g_row[d.theta_user_onehot_col(tape.users[r])] += c;
            g_row[d.theta_item_onehot_col(tape.prev_items[r])] += c;
        }
    };
    let gw = grads.theta.weight.as_mut_slice();
    if gw.len() / in_dim.max(1) >= PAR_ROWS && b > 1 {
        gw.par_chunks_mut(in_dim).enumerate().for_each(weight_kernel);
    } else {
        gw.chunks_mut(in_dim).enumerate().for_each(weight_kernel);
    }
    if let Some(gb) = grads.theta.bias.as_mut() {
        for r in 0..b {
            axpy(1.0, d_pred.row(r), gb);
        }
    }

    let mut d_u_hat = Mat64::zeros(b, n);
    let mut d_k_dyn = Mat64::zeros(b, m);
    let input_kernel = |r: usize, gu: &mut [f64], gk: &mut [f64]| {
        for (o, &c) in d_pred.row(r).iter().enumerate() {
            if c != 0.0 {
                let row = w.row(o);
                axpy(c, &row[..n], gu);
                axpy(c, &row[dyn_cols.clone()], gk);
            }
        }
    };
    if b >= PAR_ROWS {
        d_u_hat
            .as_mut_slice()
            .par_chunks_mut(n)
            .zip(d_k_dyn.as_mut_slice().par_chunks_mut(m))
            .enumerate()
            .for_each(|(r, (gu, gk))| input_kernel(r, gu, gk));
    } else {
        for r in 0..b {
            let (gu, gk) = (d_u_hat.row_mut(r), d_k_dyn.row_mut(r));
            input_kernel(r, gu, gk);
        }
    }
    (d_u_hat, d_k_dyn)
}

/// Loss and gradients of running `plan` from a fresh bank, one window covering
/// every batch. Used for gradient checks; training uses the same two calls.
pub fn plan_loss_and_gradients(
    ctx: &StepContext,
    plan: &[Vec<usize>],
) -> Result<(LossParts, ModelParams)> {
    let mut bank = EmbeddingBank::new(ctx.params);
    let mut tapes = Vec::with_capacity(plan.len());
    let mut total = LossParts::default();
    for (k, rows) in plan.iter().enumerate() {
        let tape = forward_batch(ctx, &mut bank, k as u32, rows)?;
        total.add(&tape.loss);
        tapes.push(tape);
    }
    let mut grads = ctx.params.zeros_like();
    backward_window(ctx.params, &ctx.loss, &tapes, &mut grads);
    Ok((total, grads))
}

/// Summed loss of running `plan` from a fresh bank (forward only).
pub fn plan_loss(ctx: &StepContext, plan: &[Vec<usize>]) -> Result<LossParts> {
    let mut bank = EmbeddingBank::new(ctx.params);
    let mut total = LossParts::default();
    for (k, rows) in plan.iter().enumerate() {
        total.add(&forward_batch(ctx, &mut bank, k as u32, rows)?.loss);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        interaction_loss, predict_item, project_user, state_change_loss, update_item, update_user, InitConfig,
        ModelDims,
    };
    use crate::numcore::finite_diff_grad;
    use crate::tbatch::{build_tbatches, naive_plan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(seed: u64, users: usize, items: usize, len: usize, f: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..len)
            .map(|k| {
                let feats = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
                (rng.random_range(0..users), rng.random_range(0..items), k as f64, rng.random_bool(0.2), feats)
            })
            .collect();
        Dataset::from_dense(users, items, f, rows).unwrap()
    }

    fn deltas(ds: &Dataset) -> (Vec<f64>, Vec<f64>) {
        let ann = crate::ingest::annotate_deltas(ds);
        (ann.iter().map(|a| a.delta_u / 3.0).collect(), ann.iter().map(|a| a.delta_i / 3.0).collect())
    }

    fn small_params(ds: &Dataset, seed: u64) -> ModelParams {
        let dims = ModelDims::new(ds.num_users, ds.num_items, ds.feature_dim, 4);
        let mut p = ModelParams::init(dims, InitConfig { seed, weight_std: 0.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        p.init_user.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        p.init_item.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        p
    }

    #[test]
    fn single_row_matches_scalar_ops() {
        let ds = random_dataset(1, 3, 3, 1, 2);
        let (du, di) = deltas(&ds);
        let p = small_params(&ds, 2);
        let ctx = StepContext { params: &p, loss: LossConfig::default(), dataset: &ds, delta_u: &du, delta_i: &di, epoch: 1 };
        let mut bank = EmbeddingBank::new(&p);
        let before = bank.clone();
        let tape = forward_batch(&ctx, &mut bank, 0, &[0]).unwrap();

        let it = &ds.interactions[0];
        let (u, i) = (it.user, it.item);
        let u_hat = project_user(&p, before.user(u), du[0]).unwrap();
        let pred = predict_item(&p, &u_hat, u, before.prev_item_snap.row(u), before.prev_item[u]).unwrap();
        let u_after = update_user(&p, before.user(u), before.item(i), du[0], &it.features).unwrap();
        let j_after = update_item(&p, before.item(i), before.user(u), di[0], &it.features).unwrap();
        let mut l = interaction_loss(&p.dims, &ctx.loss, &pred, i, before.item(i), &j_after, before.user(u), &u_after);
        l.state = state_change_loss(&p, &u_after, it.state_label);

        assert_eq!(tape.prediction(0), &pred.0[..]);
        assert_eq!(tape.user_after(0), &u_after[..]);
        assert_eq!(tape.item_after(0), &j_after[..]);
        assert_eq!(tape.loss, l);
        assert_eq!(bank.user(u), &u_after[..]);
        assert_eq!(bank.item(i), &j_after[..]);
        assert_eq!(bank.prev_item[u], i);
        assert_eq!(bank.prev_item_snap.row(u), &j_after[..]);
    }

    #[test]
    fn duplicate_entities_in_a_batch_are_rejected() {
        let ds = Dataset::from_dense(2, 2, 0, vec![(0, 0, 0.0, false, vec![]), (0, 1, 1.0, false, vec![])]).unwrap();
        let p = small_params(&ds, 3);
        let z = vec![0.0; 2];
        let ctx = StepContext { params: &p, loss: LossConfig::default(), dataset: &ds, delta_u: &z, delta_i: &z, epoch: 1 };
        let mut bank = EmbeddingBank::new(&p);
        assert!(forward_batch(&ctx, &mut bank, 0, &[0, 1]).is_err());
    }

    #[test]
    fn tbatch_and_sequential_agree_bitwise() {
        let ds = random_dataset(4, 6, 5, 80, 2);
        let (du, di) = deltas(&ds);
        let p = small_params(&ds, 5);
        let ctx = StepContext { params: &p, loss: LossConfig::default(), dataset: &ds, delta_u: &du, delta_i: &di, epoch: 1 };
        let mut a = EmbeddingBank::new(&p);
        let mut b = EmbeddingBank::new(&p);
        type Row = (Vec<f64>, Vec<f64>, Vec<f64>, f64);
        let mut per_seq_a: Vec<Option<Row>> = vec![None; ds.len()];
        let mut per_seq_b = per_seq_a.clone();
        let snapshot = |t: &BatchTape, r: usize| -> Row {
            (t.prediction(r).to_vec(), t.user_after(r).to_vec(), t.item_after(r).to_vec(), t.state_score(r))
        };
        for (k, rows) in build_tbatches(&ds).batches.iter().enumerate() {
            let t = forward_batch(&ctx, &mut a, k as u32, rows).unwrap();
            for (r, &s) in rows.iter().enumerate() {
                per_seq_a[s] = Some(snapshot(&t, r));
            }
        }
        for (k, rows) in naive_plan(&ds).batches.iter().enumerate() {
            let t = forward_batch(&ctx, &mut b, k as u32, rows).unwrap();
            per_seq_b[rows[0]] = Some(snapshot(&t, 0));
        }
        assert_eq!(per_seq_a, per_seq_b);
        assert_eq!(a.dyn_user, b.dyn_user);
        assert_eq!(a.dyn_item, b.dyn_item);
    }

    fn check_grads(ds: &Dataset, p: &ModelParams, plan: &[Vec<usize>], loss: LossConfig) {
        let (du, di) = deltas(ds);
        let ctx = StepContext { params: p, loss, dataset: ds, delta_u: &du, delta_i: &di, epoch: 1 };
        let (_, grads) = plan_loss_and_gradients(&ctx, plan).unwrap();
        let analytic = grads.to_flat();
        let x0 = p.to_flat();
        let numeric = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.set_flat(x).unwrap();
                let c = StepContext { params: &q, ..ctx };
                plan_loss(&c, plan).unwrap().total()
            },
            &x0,
            1e-5,
        );
        let names: Vec<(&str, usize)> = p.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
        let mut off = 0;
        for (name, len) in names {
            let a = &analytic[off..off + len];
            let g = &numeric[off..off + len];
            let diff: f64 = a.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale = crate::numcore::l2_norm(a).max(crate::numcore::l2_norm(g)).max(1e-6);
            assert!(diff / scale < 1e-4, "{name}: rel err {}", diff / scale);
            off += len;
        }
    }

    #[test]
    fn single_interaction_gradients_match_finite_differences() {
        for seed in 0..5 {
            let ds = random_dataset(10 + seed, 3, 3, 1, 2);
            let p = small_params(&ds, seed);
            check_grads(&ds, &p, &[vec![0]], LossConfig::default());
        }
    }

    #[test]
    fn window_gradients_match_finite_differences() {
        for seed in 0..3 {
            let ds = random_dataset(20 + seed, 3, 3, 10, 2);
            let p = small_params(&ds, seed);
            let plan = build_tbatches(&ds).batches;
            check_grads(&ds, &p, &plan, LossConfig::default());
            check_grads(&ds, &p, &plan, LossConfig { squared: true, lambda_u: 0.5, lambda_i: 2.0, lambda_s: 0.7 });
        }
    }

    #[test]
    fn window_gradient_is_plan_independent() {
        let ds = random_dataset(30, 4, 4, 20, 2);
        let (du, di) = deltas(&ds);
        let p = small_params(&ds, 6);
        let ctx = StepContext { params: &p, loss: LossConfig::default(), dataset: &ds, delta_u: &du, delta_i: &di, epoch: 1 };
        let (la, ga) = plan_loss_and_gradients(&ctx, &build_tbatches(&ds).batches).unwrap();
        let (lb, gb) = plan_loss_and_gradients(&ctx, &naive_plan(&ds).batches).unwrap();
        assert!((la.total() - lb.total()).abs() <= 1e-12 * la.total());
        for (x, y) in ga.to_flat().iter().zip(gb.to_flat()) {
            assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }
}
