//! Frozen-parameter evaluation: next-item ranking metrics, state-change AUC,
//! the early-warning ratio and configuration sweeps.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ingest::{chronological_split, Dataset, SplitConfig, TimeDeltas};
use crate::model::step::{forward_batch, StepContext};
use crate::model::{ground_truth_rank, predict_item, project_user, EmbeddingBank, LossConfig, ModelDims, ModelParams};
use crate::tbatch::build_tbatches_range;
use crate::trainer::{train, TrainConfig};

pub const METRICS_HEADER: &str = "task,split,mrr,recall10,auc,n";
pub const EARLY_WARNING_HEADER: &str = "offset,mean_ratio,ci_low,ci_high";
pub const SWEEP_HEADER: &str = "setting,value,task,mrr,recall10,auc,n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Next-item prediction, scored by MRR.
    Interaction,
    /// Final-interaction-before-drop-out prediction, scored by AUC.
    StateChange,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Interaction => "interaction",
            Task::StateChange => "statechange",
        }
    }

    pub fn default_split(self) -> SplitConfig {
        match self {
            Task::Interaction => SplitConfig::INTERACTION,
            Task::StateChange => SplitConfig::STATE_CHANGE,
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interaction" => Ok(Task::Interaction),
            "statechange" | "state_change" | "state" => Ok(Task::StateChange),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected interaction or statechange)"))),
        }
    }
}

/// Ranking metrics over one range.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEval {
    pub mrr: f64,
    pub recall10: f64,
    /// 1-based rank of each ground-truth item, in stream order.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEval {
    pub auc: f64,
    /// Predicted state-change probability per interaction, in stream order.
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// One `metrics.csv` row; fields that do not apply to the task are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub task: Task,
    pub split: String,
    pub mrr: Option<f64>,
    pub recall10: Option<f64>,
    pub auc: Option<f64>,
    pub n: usize,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.task.name(),
            self.split,
            opt(self.mrr),
            opt(self.recall10),
            opt(self.auc),
            self.n
        )
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// `(MRR, recall@k)` of a rank list.
pub fn mrr_recall(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::Eval("no ranks to average".into()));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
    Ok((mrr, hits / n))
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores count 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval(format!("AUC needs both classes, got {pos} positive and {neg} negative")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        rank_sum_pos += avg * order[start..end].iter().filter(|&&k| labels[k]).count() as f64;
        start = end;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

fn step_ctx<'a>(params: &'a ModelParams, dataset: &'a Dataset, deltas: &'a TimeDeltas) -> StepContext<'a> {
    StepContext {
        params,
        loss: LossConfig::default(),
        dataset,
        delta_u: &deltas.delta_u,
        delta_i: &deltas.delta_i,
        epoch: 0,
    }
}

fn check_range(dataset: &Dataset, range: &Range<usize>) -> Result<()> {
    if range.is_empty() {
        return Err(Error::Eval("empty evaluation range".into()));
    }
    if range.end > dataset.len() {
        return Err(Error::IdOutOfRange { what: "interaction", id: range.end - 1, limit: dataset.len() });
    }
    Ok(())
}

/// Advances the bank through `range` without scoring anything.
pub fn advance(params: &ModelParams, bank: &mut EmbeddingBank, dataset: &Dataset, deltas: &TimeDeltas, range: Range<usize>) -> Result<()> {
    if range.is_empty() {
        return Ok(());
    }
    let ctx = step_ctx(params, dataset, deltas);
    for rows in build_tbatches_range(dataset, range).batches {
        forward_batch(&ctx, bank, 0, &rows)?;
    }
    Ok(())
}

/// Ranks each ground-truth item among all real items before applying the
/// interaction, one interaction at a time.
pub fn eval_interaction(
    params: &ModelParams,
    bank: &mut EmbeddingBank,
    dataset: &Dataset,
    deltas: &TimeDeltas,
    range: Range<usize>,
) -> Result<InteractionEval> {
    check_range(dataset, &range)?;
    let ctx = step_ctx(params, dataset, deltas);
    let dims = params.dims;
    let mut ranks = Vec::with_capacity(range.len());
    for s in range {
        let it = &dataset.interactions[s];
        let u_hat = project_user(params, bank.user(it.user), deltas.delta_u[s])?;
        let pred = predict_item(params, &u_hat, it.user, bank.prev_item_snap.row(it.user), bank.prev_item[it.user])?;
        ranks.push(ground_truth_rank(&pred, &dims, bank, it.item));
        forward_batch(&ctx, bank, 0, &[s])?;
    }
    let (mrr, recall10) = mrr_recall(&ranks, 10)?;
    Ok(InteractionEval { mrr, recall10, ranks })
}

/// Scores every interaction in `range` with the state head applied to the
/// updated user embedding, then computes AUC against the labels.
pub fn eval_state_change(
    params: &ModelParams,
    bank: &mut EmbeddingBank,
    dataset: &Dataset,
    deltas: &TimeDeltas,
    range: Range<usize>,
) -> Result<StateEval> {
    check_range(dataset, &range)?;
    let ctx = step_ctx(params, dataset, deltas);
    let start = range.start;
    let mut scores = vec![0.0; range.len()];
    for rows in build_tbatches_range(dataset, range.clone()).batches {
        let tape = forward_batch(&ctx, bank, 0, &rows)?;
        for (r, &s) in rows.iter().enumerate() {
            scores[s - start] = tape.state_score(r);
        }
    }
    let labels: Vec<bool> = dataset.interactions[range].iter().map(|it| it.state_label).collect();
    let auc = auc(&scores, &labels)?;
    Ok(StateEval { auc, scores, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyWarningPoint {
    /// Interactions before the dropping user's final one (0 = the final one).
    pub offset: usize,
    pub mean_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Droppers contributing a score at this offset.
    pub n_droppers: usize,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Mean dropper score `offset` interactions before their final one, divided by
/// the mean score of all non-dropper interactions in the range, with a
/// delta-method 95% interval. `scores` is aligned with `range`. Offsets with
/// no dropper history are omitted; rows run from `horizon` down to 0.
pub fn early_warning_curve(
    scores: &[f64],
    dataset: &Dataset,
    range: Range<usize>,
    horizon: usize,
) -> Result<Vec<EarlyWarningPoint>> {
    if scores.len() != range.len() {
        return Err(Error::shape("early_warning_curve", range.len(), scores.len()));
    }
    if horizon == 0 {
        return Err(Error::Config("early-warning horizon must be at least 1".into()));
    }
    let slice = &dataset.interactions[range.clone()];
    let mut dropper = vec![false; dataset.num_users];
    for it in slice {
        if it.state_label {
            dropper[it.user] = true;
        }
    }
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_users];
    let mut others = Vec::new();
    for (k, it) in slice.iter().enumerate() {
        if dropper[it.user] {
            per_user[it.user].push(k);
        } else {
            others.push(scores[k]);
        }
    }
    if !dropper.iter().any(|&d| d) {
        return Err(Error::Eval("no dropping users in range".into()));
    }
    if others.is_empty() {
        return Err(Error::Eval("no non-dropping users in range".into()));
    }
    let (mean_n, var_n) = mean_var(&others);
    if mean_n <= 0.0 {
        return Err(Error::Eval("non-dropper mean score is not positive".into()));
    }

    let mut curve = Vec::new();
    for offset in (0..=horizon).rev() {
        let mut at = Vec::new();
        for (u, idx) in per_user.iter().enumerate() {
            if !dropper[u] {
                continue;
            }
            // final = last positive interaction of the user within range
            let Some(final_pos) = idx.iter().rposition(|&k| slice[k].state_label) else { continue };
            if final_pos >= offset {
                at.push(scores[idx[final_pos - offset]]);
            }
        }
        if at.is_empty() {
            continue;
        }
        let (mean_d, var_d) = mean_var(&at);
        let ratio = mean_d / mean_n;
        let rel_var = var_d / (at.len() as f64 * mean_d * mean_d) + var_n / (others.len() as f64 * mean_n * mean_n);
        let half = 1.96 * ratio * rel_var.max(0.0).sqrt();
        curve.push(EarlyWarningPoint {
            offset,
            mean_ratio: ratio,
            ci_low: ratio - half,
            ci_high: ratio + half,
            n_droppers: at.len(),
        });
    }
    Ok(curve)
}

pub fn write_early_warning(path: impl AsRef<Path>, curve: &[EarlyWarningPoint]) -> Result<()> {
    let mut out = String::from(EARLY_WARNING_HEADER);
    out.push('\n');
    for p in curve {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6}", p.offset, p.mean_ratio, p.ci_low, p.ci_high);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Model and training settings for one full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub task: Task,
    pub split: SplitConfig,
    pub embed_dim: usize,
    pub train: TrainConfig,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: crate::trainer::TrainOutcome,
    pub metrics: Vec<MetricsRow>,
    /// Test-range scores for the state task (empty for the interaction task).
    pub test_scores: Vec<f64>,
    pub test_range: Range<usize>,
    /// Bank after the test range, with its position.
    pub final_bank: EmbeddingBank,
}

/// Trains on the first split, selects the best epoch on validation and
/// reports validation and test metrics of that epoch.
pub fn train_and_evaluate(dataset: &Dataset, settings: &RunSettings) -> Result<RunResult> {
    let splits = chronological_split(dataset.len(), &settings.split)?;
    let dims = ModelDims::new(dataset.num_users, dataset.num_items, dataset.feature_dim, settings.embed_dim);
    let outcome = train(dims, dataset, &splits, &settings.train, settings.task)?;

    let task = settings.task;
    let mut bank = outcome.eval_bank.clone();
    let deltas = &outcome.deltas;
    let mut metrics = vec![match task {
        Task::Interaction => MetricsRow {
            task,
            split: "valid".into(),
            mrr: Some(outcome.val_metric),
            recall10: outcome.val_recall10,
            auc: None,
            n: splits.valid.len(),
        },
        Task::StateChange => MetricsRow {
            task,
            split: "valid".into(),
            mrr: None,
            recall10: None,
            auc: Some(outcome.val_metric),
            n: splits.valid.len(),
        },
    }];
    let mut test_scores = Vec::new();
    match task {
        Task::Interaction => {
            let e = eval_interaction(&outcome.params, &mut bank, dataset, deltas, splits.test.clone())?;
            metrics.push(MetricsRow {
                task,
                split: "test".into(),
                mrr: Some(e.mrr),
                recall10: Some(e.recall10),
                auc: None,
                n: e.ranks.len(),
            });
        }
        Task::StateChange => {
            let e = eval_state_change(&outcome.params, &mut bank, dataset, deltas, splits.test.clone())?;
            metrics.push(MetricsRow {
                task,
                split: "test".into(),
                mrr: None,
                recall10: None,
                auc: Some(e.auc),
                n: e.scores.len(),
            });
            test_scores = e.scores;
        }
    }
    Ok(RunResult { outcome, metrics, test_scores, test_range: splits.test, final_bank: bank })
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SweepSetting {
    /// Training fraction; validation and test each take the next 10%.
    TrainFrac(f64),
    EmbedDim(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: SweepSetting,
    pub test: MetricsRow,
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let (name, value) = match self.setting {
            SweepSetting::TrainFrac(f) => ("train_frac", format!("{f}")),
            SweepSetting::EmbedDim(d) => ("embed_dim", d.to_string()),
        };
        let t = &self.test;
        format!("{name},{value},{},{},{},{},{}", t.task.name(), opt(t.mrr), opt(t.recall10), opt(t.auc), t.n)
    }
}

/// One full train + evaluate run per setting, everything else from `base`.
pub fn sweep(dataset: &Dataset, base: &RunSettings, settings: &[SweepSetting]) -> Result<Vec<SweepRow>> {
    settings
        .iter()
        .map(|&setting| {
            let mut run = base.clone();
            match setting {
                SweepSetting::TrainFrac(f) => {
                    run.split = SplitConfig { train_frac: f, valid_frac: 0.1, test_frac: 0.1 };
                }
                SweepSetting::EmbedDim(d) => run.embed_dim = d,
            }
            let result = train_and_evaluate(dataset, &run)?;
            let test = result.metrics.into_iter().find(|m| m.split == "test").expect("test row present");
            Ok(SweepRow { setting, test })
        })
        .collect()
}

pub fn write_sweep(path: impl AsRef<Path>, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
