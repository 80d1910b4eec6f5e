//! t-Batch: compile a time-sorted stream into the fewest batches such that no
//! user or item occurs twice in a batch and every entity's interactions land
//! in strictly increasing batches.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;

use crate::ingest::Dataset;

/// Ordered batches of interaction seq indices. Batches are consumed in order;
/// interactions inside one batch are independent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    /// 1-based batch index of every interaction, indexed by seq index.
    pub fn batch_index_of(&self, num_interactions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_interactions];
        for (b, batch) in self.batches.iter().enumerate() {
            for &j in batch {
                if j < num_interactions {
                    out[j] = Some(b + 1);
                }
            }
        }
        out
    }
}

/// Last batch (1-based, 0 = none yet) each user and item was assigned to.
#[derive(Debug, Clone)]
pub struct SchedulerState {
    last_user: Vec<usize>,
    last_item: Vec<usize>,
    steps: usize,
}

impl SchedulerState {
    pub fn new(num_users: usize, num_items: usize) -> Self {
        SchedulerState {
            last_user: vec![0; num_users],
            last_item: vec![0; num_items],
            steps: 0,
        }
    }

    /// Assigns the next interaction and returns its 1-based batch index.
    #[inline]
    pub fn assign(&mut self, user: usize, item: usize) -> usize {
        let idx = self.last_user[user].max(self.last_item[item]) + 1;
        self.last_user[user] = idx;
        self.last_item[item] = idx;
        self.steps += 1;
        idx
    }

    /// Number of assignments performed; one constant-time step per interaction.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

pub fn build_tbatches(dataset: &Dataset) -> BatchPlan {
    build_tbatches_range(dataset, 0..dataset.len())
}

/// t-Batch over a contiguous slice of the stream; the plan holds global seq indices.
pub fn build_tbatches_range(dataset: &Dataset, range: Range<usize>) -> BatchPlan {
    build_with_state(dataset, range).0
}

pub(crate) fn build_with_state(dataset: &Dataset, range: Range<usize>) -> (BatchPlan, SchedulerState) {
    let mut state = SchedulerState::new(dataset.num_users, dataset.num_items);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for it in &dataset.interactions[range] {
        let idx = state.assign(it.user, it.item);
        if idx > batches.len() {
            batches.push(Vec::new());
        }
        batches[idx - 1].push(it.seq_index);
    }
    (BatchPlan { batches }, state)
}

/// One interaction per batch, in time order.
pub fn naive_plan(dataset: &Dataset) -> BatchPlan {
    naive_plan_range(0..dataset.len())
}

pub fn naive_plan_range(range: Range<usize>) -> BatchPlan {
    BatchPlan {
        batches: range.map(|j| vec![j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entity {
    User(usize),
    Item(usize),
    /// An interaction seq index.
    Interaction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateEntityInBatch,
    OrderInversion,
    MissingOrDuplicatedInteraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// 1-based batch index, when one applies.
    pub batch: Option<usize>,
    pub entity: Entity,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} of {:?}", self.kind, self.entity)?;
        if let Some(b) = self.batch {
            write!(f, " in batch {b}")?;
        }
        Ok(())
    }
}

/// Checks a plan against both co-batching conditions and coverage of `range`.
pub fn verify_plan_range(dataset: &Dataset, plan: &BatchPlan, range: Range<usize>) -> Vec<Violation> {
    let mut violations = Vec::new();
    let n = dataset.len();

    let mut seen = vec![0usize; n];
    for (b, batch) in plan.batches.iter().enumerate() {
        for &j in batch {
            if j >= n || !range.contains(&j) {
                violations.push(Violation {
                    kind: ViolationKind::MissingOrDuplicatedInteraction,
                    batch: Some(b + 1),
                    entity: Entity::Interaction(j),
                });
            } else {
                seen[j] += 1;
            }
        }
    }
    for j in range.clone() {
        if seen[j] != 1 {
            violations.push(Violation {
                kind: ViolationKind::MissingOrDuplicatedInteraction,
                batch: None,
                entity: Entity::Interaction(j),
            });
        }
    }

    // condition 1
    let mut user_mark = vec![usize::MAX; dataset.num_users];
    let mut item_mark = vec![usize::MAX; dataset.num_items];
    for (b, batch) in plan.batches.iter().enumerate() {
        for &j in batch.iter().filter(|&&j| j < n) {
            let it = &dataset.interactions[j];
            if user_mark[it.user] == b {
                violations.push(Violation {
                    kind: ViolationKind::DuplicateEntityInBatch,
                    batch: Some(b + 1),
                    entity: Entity::User(it.user),
                });
            }
            if item_mark[it.item] == b {
                violations.push(Violation {
                    kind: ViolationKind::DuplicateEntityInBatch,
                    batch: Some(b + 1),
                    entity: Entity::Item(it.item),
                });
            }
            user_mark[it.user] = b;
            item_mark[it.item] = b;
        }
    }

    // condition 2; equal batches are already reported as duplicates above
    let batch_of = plan.batch_index_of(n);
    let mut user_last = vec![0usize; dataset.num_users];
    let mut item_last = vec![0usize; dataset.num_items];
    for j in range {
        let Some(b) = batch_of[j] else { continue };
        let it = &dataset.interactions[j];
        if b < user_last[it.user] {
            violations.push(Violation {
                kind: ViolationKind::OrderInversion,
                batch: Some(b),
                entity: Entity::User(it.user),
            });
        }
        if b < item_last[it.item] {
            violations.push(Violation {
                kind: ViolationKind::OrderInversion,
                batch: Some(b),
                entity: Entity::Item(it.item),
            });
        }
        user_last[it.user] = user_last[it.user].max(b);
        item_last[it.item] = item_last[it.item].max(b);
    }
    violations
}

pub fn verify_plan(dataset: &Dataset, plan: &BatchPlan) -> Vec<Violation> {
    verify_plan_range(dataset, plan, 0..dataset.len())
}

/// Minimal feasible batch index of every interaction, via longest paths in the
/// explicit dependency graph (edge from each interaction to the next one of
/// the same user and of the same item). Quadratic; meant as a test oracle.
pub fn chain_depth_oracle(dataset: &Dataset) -> Vec<usize> {
    let s = &dataset.interactions;
    let n = s.len();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for j in 0..n {
        let prev_user = (0..j).rev().find(|&p| s[p].user == s[j].user);
        let prev_item = (0..j).rev().find(|&p| s[p].item == s[j].item);
        for p in [prev_user, prev_item].into_iter().flatten() {
            if !succ[p].contains(&j) {
                succ[p].push(j);
                indegree[j] += 1;
            }
        }
    }
    let mut depth = vec![1usize; n];
    let mut ready: VecDeque<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    while let Some(p) = ready.pop_front() {
        for &q in &succ[p] {
            depth[q] = depth[q].max(depth[p] + 1);
            indegree[q] -= 1;
            if indegree[q] == 0 {
                ready.push_back(q);
            }
        }
    }
    depth
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStats {
    pub num_interactions: usize,
    pub num_batches: usize,
    pub mean_batch: f64,
    pub max_batch: usize,
    /// `|S| / C`
    pub parallelism: f64,
}

impl PlanStats {
    pub const CSV_HEADER: &'static str = "num_interactions,num_batches,mean_batch,max_batch,parallelism";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.num_interactions, self.num_batches, self.mean_batch, self.max_batch, self.parallelism
        )
    }
}

pub fn plan_stats(plan: &BatchPlan) -> PlanStats {
    let num_interactions = plan.num_interactions();
    let num_batches = plan.num_batches();
    let ratio = if num_batches == 0 {
        0.0
    } else {
        num_interactions as f64 / num_batches as f64
    };
    PlanStats {
        num_interactions,
        num_batches,
        mean_batch: ratio,
        max_batch: plan.batches.iter().map(Vec::len).max().unwrap_or(0),
        parallelism: ratio,
    }
}

/// The three-user, four-item network used as the running example: users
/// u1..u3 are dense ids 0..2, items i1..i4 are 0..3, timestamps 1..9.
pub fn example_network() -> Dataset {
    let rows = [(0, 0), (1, 0), (2, 1), (0, 1), (1, 1), (2, 2), (1, 2), (2, 3), (1, 3)];
    Dataset::from_dense(
        3,
        4,
        0,
        rows.iter()
            .enumerate()
            .map(|(k, &(u, i))| (u, i, (k + 1) as f64, false, vec![]))
            .collect(),
    )
    .expect("valid example network")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::annotate_deltas;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(seed: u64, n: usize, users: usize, items: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::from_dense(
            users,
            items,
            0,
            (0..n)
                .map(|k| (rng.random_range(0..users), rng.random_range(0..items), k as f64, false, vec![]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn example_network_compiles_to_five_batches() {
        let ds = example_network();
        let plan = build_tbatches(&ds);
        assert_eq!(plan.batches, vec![vec![0, 2], vec![1, 3, 5], vec![4, 7], vec![6], vec![8]]);
        assert!(verify_plan(&ds, &plan).is_empty());
        let stats = plan_stats(&plan);
        assert_eq!(stats.num_batches, 5);
        assert_eq!(stats.parallelism, 1.8);
        assert_eq!(naive_plan(&ds).num_batches(), 9);
    }

    #[test]
    fn example_network_oracle_depths() {
        assert_eq!(chain_depth_oracle(&example_network()), vec![1, 2, 1, 2, 3, 2, 4, 3, 5]);
    }

    #[test]
    fn example_network_user_two_deltas() {
        let ds = example_network();
        let ann = annotate_deltas(&ds);
        // u2 interacts at t2, t5, t7, t9
        let d: Vec<f64> = [1, 4, 6, 8].iter().map(|&j| ann[j].delta_u).collect();
        assert_eq!(d, vec![0.0, 5.0 - 2.0, 7.0 - 5.0, 9.0 - 7.0]);
    }

    #[test]
    fn single_user_stream_is_fully_sequential() {
        let ds = random_stream(1, 30, 1, 5);
        assert_eq!(build_tbatches(&ds).num_batches(), 30);
        assert_eq!(chain_depth_oracle(&ds), (1..=30).collect::<Vec<_>>());
    }

    #[test]
    fn disjoint_pairs_share_one_batch() {
        let n = 25;
        let ds = Dataset::from_dense(n, n, 0, (0..n).map(|k| (k, k, k as f64, false, vec![])).collect()).unwrap();
        let plan = build_tbatches(&ds);
        assert_eq!(plan.num_batches(), 1);
        assert_eq!(plan_stats(&plan).parallelism, n as f64);
        assert!(chain_depth_oracle(&ds).iter().all(|&d| d == 1));
    }

    #[test]
    fn empty_stream() {
        let ds = Dataset::from_dense(1, 1, 0, vec![]).unwrap();
        assert_eq!(naive_plan(&ds).num_batches(), 0);
        assert_eq!(build_tbatches(&ds).num_batches(), 0);
        assert_eq!(plan_stats(&naive_plan(&ds)).parallelism, 0.0);
    }

    #[test]
    fn naive_plan_is_valid_with_unit_parallelism() {
        let ds = random_stream(2, 200, 10, 10);
        let plan = naive_plan(&ds);
        assert!(verify_plan(&ds, &plan).is_empty());
        assert_eq!(plan_stats(&plan).parallelism, 1.0);
    }

    #[test]
    fn duplicate_user_in_batch_three_is_reported_once() {
        // user 0 with items 0,1 at t=0,1 ; user 1 with item 2 at t=2 ; user 2 with items 3,4 at t=3,4
        let ds = Dataset::from_dense(
            3,
            5,
            0,
            vec![
                (0, 0, 0.0, false, vec![]),
                (0, 1, 1.0, false, vec![]),
                (1, 2, 2.0, false, vec![]),
                (2, 3, 3.0, false, vec![]),
                (2, 4, 4.0, false, vec![]),
            ],
        )
        .unwrap();
        let plan = BatchPlan { batches: vec![vec![0], vec![1], vec![2, 3, 4]] };
        let v = verify_plan(&ds, &plan);
        assert_eq!(
            v,
            vec![Violation {
                kind: ViolationKind::DuplicateEntityInBatch,
                batch: Some(3),
                entity: Entity::User(2)
            }]
        );
    }

    #[test]
    fn missing_interaction_is_reported() {
        let ds = random_stream(3, 12, 4, 4);
        let mut plan = naive_plan(&ds);
        plan.batches.retain(|b| b != &vec![7]);
        let v = verify_plan(&ds, &plan);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::MissingOrDuplicatedInteraction);
        assert_eq!(v[0].entity, Entity::Interaction(7));
    }

    #[test]
    fn order_inversion_is_reported() {
        let ds = Dataset::from_dense(1, 2, 0, vec![(0, 0, 0.0, false, vec![]), (0, 1, 1.0, false, vec![])]).unwrap();
        let plan = BatchPlan { batches: vec![vec![1], vec![0]] };
        let v = verify_plan(&ds, &plan);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::OrderInversion);
        assert_eq!(v[0].entity, Entity::User(0));
    }

    #[test]
    fn random_streams_match_oracle() {
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let n = rng.random_range(0..400);
            let ds = random_stream(seed, n, rng.random_range(1..30), rng.random_range(1..30));
            let plan = build_tbatches(&ds);
            assert!(verify_plan(&ds, &plan).is_empty());
            let depth = chain_depth_oracle(&ds);
            let batch_of: Vec<usize> = plan.batch_index_of(n).into_iter().map(Option::unwrap).collect();
            assert_eq!(batch_of, depth);
            assert_eq!(plan.num_batches(), depth.iter().copied().max().unwrap_or(0));
            assert!(plan.batches.iter().all(|b| b.windows(2).all(|w| w[0] < w[1])));
        }
    }

    #[test]
    fn range_plan_uses_global_indices() {
        let ds = example_network();
        let plan = build_tbatches_range(&ds, 4..9);
        assert_eq!(plan.num_interactions(), 5);
        assert!(verify_plan_range(&ds, &plan, 4..9).is_empty());
        assert!(plan.batches.iter().flatten().all(|&j| (4..9).contains(&j)));
    }

    #[test]
    fn scheduler_work_is_one_step_per_interaction() {
        for n in [0, 10, 1000, 20000] {
            let ds = random_stream(9, n, 50, 50);
            let (_, state) = build_with_state(&ds, 0..n);
            assert_eq!(state.steps(), n);
        }
    }

    #[test]
    fn deterministic() {
        let ds = random_stream(4, 500, 20, 20);
        assert_eq!(build_tbatches(&ds), build_tbatches(&ds));
    }
}
