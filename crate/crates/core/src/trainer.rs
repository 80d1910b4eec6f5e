//! Epoch loop over a batch plan: forward each batch, backpropagate every
//! `bptt_window` batches, take an Adam step, keep the best validation epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::evalkit::{eval_interaction, eval_state_change, Task};
use crate::ingest::{Dataset, Splits, TimeDeltas};
use crate::model::step::{backward_window, forward_batch, StepContext};
use crate::model::{EmbeddingBank, InitConfig, LossConfig, LossParts, ModelDims, ModelParams};
use crate::tbatch::{build_tbatches_range, BatchPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Consecutive batches per backprop segment.
    pub bptt_window: usize,
    pub seed: u64,
    pub lambda_u: f64,
    pub lambda_i: f64,
    pub lambda_s: f64,
    pub squared_loss: bool,
    /// Divide elapsed times by the training mean of nonzero user deltas.
    pub normalize_deltas: bool,
    /// Std of the Gaussian initialization.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            bptt_window: 64,
            seed: 0,
            lambda_u: 1.0,
            lambda_i: 1.0,
            lambda_s: 1.0,
            squared_loss: false,
            normalize_deltas: true,
            init_std: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_u: self.lambda_u,
            lambda_i: self.lambda_i,
            lambda_s: self.lambda_s,
            squared: self.squared_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.bptt_window == 0 {
            return Err(Error::Config("bptt_window must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_u", self.lambda_u),
            ("lambda_i", self.lambda_i),
            ("lambda_s", self.lambda_s),
            ("init_std", self.init_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(num_scalars: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_scalars], v: vec![0.0; num_scalars], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, wd: f64) -> Result<()> {
        for (name, g) in grads.tensors() {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        if self.m.len() != params.num_scalars() {
            return Err(Error::shape("Adam::step", self.m.len(), params.num_scalars()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut off = 0;
        for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let m = &mut self.m[off..off + p.len()];
            let v = &mut self.v[off..off + p.len()];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[k]);
            }
            off += p.len();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub components: LossParts,
    pub seconds: f64,
    pub optimizer_steps: usize,
    /// Validation MRR or AUC, when validation ran.
    pub val_metric: Option<f64>,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,loss_total,loss_pred,loss_drift_u,loss_drift_i,loss_state,val_metric,seconds";

    pub fn csv_row(&self) -> String {
        let c = &self.components;
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{:.3}",
            self.epoch,
            self.total,
            c.pred,
            c.drift_u,
            c.drift_i,
            c.state,
            self.val_metric.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.seconds
        )
    }
}

pub fn write_training_log(path: impl AsRef<Path>, reports: &[EpochReport]) -> Result<()> {
    let mut out = String::from(EpochReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    fs::write(path, out)?;
    Ok(())
}

/// One training epoch. The bank is reset to the initial vectors first.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    params: &mut ModelParams,
    opt: &mut Adam,
    bank: &mut EmbeddingBank,
    dataset: &Dataset,
    deltas: &TimeDeltas,
    plan: &BatchPlan,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport> {
    let start = Instant::now();
    let loss_cfg = cfg.loss();
    bank.reset(params);
    let mut total = LossParts::default();
    let mut steps = 0;
    let mut batch_offset = 0;
    for window in plan.batches.chunks(cfg.bptt_window) {
        let mut grads = params.zeros_like();
        {
            let ctx = StepContext {
                params,
                loss: loss_cfg,
                dataset,
                delta_u: &deltas.delta_u,
                delta_i: &deltas.delta_i,
                epoch,
            };
            let mut tapes = Vec::with_capacity(window.len());
            for (k, rows) in window.iter().enumerate() {
                let tape = forward_batch(&ctx, bank, k as u32, rows).map_err(|e| match e {
                    Error::NonFiniteLoss { epoch, seq_index, .. } => {
                        Error::NonFiniteLoss { epoch, batch: batch_offset + k + 1, seq_index }
                    }
                    other => other,
                })?;
                total.add(&tape.loss);
                tapes.push(tape);
            }
            backward_window(params, &loss_cfg, &tapes, &mut grads);
        }
        opt.step(params, &grads, cfg.learning_rate, cfg.weight_decay)?;
        bank.freeze_refs();
        bank.refresh_init(params);
        steps += 1;
        batch_offset += window.len();
    }
    Ok(EpochReport {
        epoch,
        total: total.total(),
        components: total,
        seconds: start.elapsed().as_secs_f64(),
        optimizer_steps: steps,
        val_metric: None,
    })
}

/// Forward-only pass over `plan` from a freshly reset bank; returns the summed loss.
pub fn forward_epoch(
    params: &ModelParams,
    bank: &mut EmbeddingBank,
    dataset: &Dataset,
    deltas: &TimeDeltas,
    plan: &BatchPlan,
    loss: LossConfig,
) -> Result<LossParts> {
    bank.reset(params);
    let ctx = StepContext { params, loss, dataset, delta_u: &deltas.delta_u, delta_i: &deltas.delta_i, epoch: 0 };
    let mut total = LossParts::default();
    for (k, rows) in plan.batches.iter().enumerate() {
        total.add(&forward_batch(&ctx, bank, k as u32, rows)?.loss);
    }
    Ok(total)
}

/// 1-based index of the largest finite value; the earliest wins ties.
pub fn best_epoch(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in metrics.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
            best = Some((k + 1, v));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    pub val_metric: f64,
    pub val_recall10: Option<f64>,
    /// Bank of the best epoch advanced through the validation range.
    pub eval_bank: EmbeddingBank,
    /// Interactions consumed by `eval_bank`.
    pub eval_position: usize,
    pub deltas: TimeDeltas,
    pub loss: LossConfig,
}

/// Full training run with per-epoch validation and best-epoch selection.
pub fn train(dims: ModelDims, dataset: &Dataset, splits: &Splits, cfg: &TrainConfig, task: Task) -> Result<TrainOutcome> {
    cfg.validate()?;
    let deltas = TimeDeltas::fit(dataset, splits.train.clone(), cfg.normalize_deltas)?;
    let mut params = ModelParams::init(dims, InitConfig { seed: cfg.seed, weight_std: cfg.init_std })?;
    let mut opt = Adam::new(params.num_scalars());
    let mut bank = EmbeddingBank::new(&params);
    let plan = build_tbatches_range(dataset, splits.train.clone());

    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Option<f64>, ModelParams, EmbeddingBank)> = None;
    let mut best_idx = 0;
    for epoch in 1..=cfg.epochs {
        let mut report = run_epoch(&mut params, &mut opt, &mut bank, dataset, &deltas, &plan, cfg, epoch)?;
        let mut frozen = bank.clone();
        let (metric, recall) = match task {
            Task::Interaction => {
                let e = eval_interaction(&params, &mut frozen, dataset, &deltas, splits.valid.clone())?;
                (e.mrr, Some(e.recall10))
            }
            Task::StateChange => (eval_state_change(&params, &mut frozen, dataset, &deltas, splits.valid.clone())?.auc, None),
        };
        report.val_metric = Some(metric);
        log::info!(
            "epoch {epoch}: loss {:.4} (pred {:.4}, drift {:.4}/{:.4}, state {:.4}) val {:.4} in {:.1}s",
            report.total,
            report.components.pred,
            report.components.drift_u,
            report.components.drift_i,
            report.components.state,
            metric,
            report.seconds
        );
        if best.as_ref().is_none_or(|(b, ..)| metric > *b) {
            best = Some((metric, recall, params.clone(), frozen));
            best_idx = epoch;
        }
        reports.push(report);
    }
    let (val_metric, val_recall10, params, eval_bank) = best.ok_or_else(|| Error::Eval("no epoch was validated".into()))?;
    Ok(TrainOutcome {
        params,
        best_epoch: best_idx,
        reports,
        val_metric,
        val_recall10,
        eval_bank,
        eval_position: splits.valid.end,
        deltas,
        loss: cfg.loss(),
    })
}
