//! Runtime-constrained selection of one pruning level per layer.
//!
//! [`dp_solve`] picks the level assignment minimising `Σ c_g · p_{g,l}`
//! subject to the estimated runtime fitting a time budget. [`coefficient_search`]
//! then tunes the per-layer coefficients `c_g` by random mutation, keeping a
//! mutation only if the resulting assignment lowers an end-to-end loss.

use std::collections::HashMap;
use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{sum_ms, LatencyTable, SpeedupEstimate};
use crate::par;
use crate::pruner::LayerDatabase;

pub const DEFAULT_BUCKETS: usize = 10_000;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_MUTATION_PROB: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOption {
    pub level_index: usize,
    pub kept: usize,
    pub runtime_ms: f64,
    pub prior: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupOptions {
    pub name: String,
    pub levels: Vec<LevelOption>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchProblem {
    pub groups: Vec<GroupOptions>,
    pub dense_runtime_ms: f64,
}

impl SearchProblem {
    pub fn new(groups: Vec<GroupOptions>, dense_runtime_ms: f64) -> Result<Self> {
        if !(dense_runtime_ms > 0.0 && dense_runtime_ms.is_finite()) {
            return Err(Error::InvalidTable(format!(
                "dense runtime must be positive, got {dense_runtime_ms}"
            )));
        }
        for g in &groups {
            if g.levels.is_empty() {
                return Err(Error::InvalidArgument(format!("layer {} has no levels", g.name)));
            }
            for l in &g.levels {
                if !(l.runtime_ms >= 0.0 && l.runtime_ms.is_finite()) {
                    return Err(Error::InvalidTable(format!(
                        "layer {} level {}: runtime {}",
                        g.name, l.level_index, l.runtime_ms
                    )));
                }
                if !l.prior.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "prior of layer {} level {}",
                        g.name, l.level_index
                    )));
                }
            }
        }
        Ok(SearchProblem {
            groups,
            dense_runtime_ms,
        })
    }

    /// Attaches table runtimes to each database level.
    pub fn from_databases(dbs: &[LayerDatabase], table: &LatencyTable, interpolate: bool) -> Result<Self> {
        let groups = dbs
            .iter()
            .map(|db| {
                let levels = db
                    .variants
                    .iter()
                    .map(|v| {
                        Ok(LevelOption {
                            level_index: v.level_index,
                            kept: v.kept_structures,
                            runtime_ms: table.lookup(
                                &db.latency_key,
                                db.latency_count(v.kept_structures),
                                interpolate,
                            )?,
                            prior: v.relative_error,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GroupOptions {
                    name: db.layer.clone(),
                    levels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SearchProblem::new(groups, table.dense_runtime_ms)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn check(&self, levels: &[usize]) -> Result<()> {
        if levels.len() != self.groups.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} level choices, got {}",
                self.groups.len(),
                levels.len()
            )));
        }
        for (g, &l) in self.groups.iter().zip(levels) {
            if l >= g.levels.len() {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: level {l} out of range",
                    g.name
                )));
            }
        }
        Ok(())
    }

    pub fn runtime(&self, levels: &[usize]) -> Result<f64> {
        self.check(levels)?;
        Ok(sum_ms(
            self.groups.iter().zip(levels).map(|(g, &l)| g.levels[l].runtime_ms),
        ))
    }

    pub fn objective(&self, coefficients: &[f64], levels: &[usize]) -> Result<f64> {
        self.check(levels)?;
        Ok(self
            .groups
            .iter()
            .zip(coefficients)
            .zip(levels)
            .map(|((g, c), &l)| c * g.levels[l].prior)
            .sum())
    }

    pub fn kept(&self, levels: &[usize]) -> Vec<usize> {
        self.groups.iter().zip(levels).map(|(g, &l)| g.levels[l].kept).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub target_speedup: f64,
    pub time_budget_ms: f64,
}

impl Budget {
    pub fn new(target_speedup: f64, dense_runtime_ms: f64) -> Result<Self> {
        if !(target_speedup >= 1.0 && target_speedup.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "target speedup must be a finite value >= 1, got {target_speedup}"
            )));
        }
        Ok(Budget {
            target_speedup,
            time_budget_ms: dense_runtime_ms / target_speedup,
        })
    }
}

/// Level per group minimising `Σ c_g · p_{g,l}` with runtime ≤ `budget_ms`.
///
/// Runtimes are rounded up to whole nanoseconds and then to buckets of
/// `ceil(budget / buckets)` ns, so any returned assignment is feasible in
/// real time. Ties prefer the faster level of each group.
pub fn dp_solve(problem: &SearchProblem, coefficients: &[f64], budget_ms: f64, buckets: usize) -> Result<Vec<usize>> {
    let g_count = problem.groups.len();
    if coefficients.len() != g_count {
        return Err(Error::InvalidArgument(format!(
            "expected {g_count} coefficients, got {}",
            coefficients.len()
        )));
    }
    if coefficients.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::InvalidArgument("coefficients must be finite and >= 0".into()));
    }
    if !(budget_ms >= 0.0 && budget_ms.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "budget must be finite and >= 0, got {budget_ms}"
        )));
    }
    if buckets == 0 {
        return Err(Error::InvalidArgument("bucket count must be positive".into()));
    }

    let weighted = |g: usize, l: usize| coefficients[g] * problem.groups[g].levels[l].prior;

    // Levels of each group by (runtime, index); scanning in this order with a
    // strict comparison breaks objective ties toward the faster level.
    let order: Vec<Vec<usize>> = problem
        .groups
        .iter()
        .map(|g| {
            let mut idx: Vec<usize> = (0..g.levels.len()).collect();
            idx.sort_by(|&a, &b| {
                g.levels[a]
                    .runtime_ms
                    .total_cmp(&g.levels[b].runtime_ms)
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    // Unconstrained optimum already fits: nothing to trade off.
    let free: Vec<usize> = (0..g_count)
        .map(|g| {
            order[g].iter().copied().fold(
                order[g][0],
                |best, l| if weighted(g, l) < weighted(g, best) { l } else { best },
            )
        })
        .collect();
    if problem.runtime(&free)? <= budget_ms {
        return Ok(free);
    }

    let budget_ns = (budget_ms * 1e6).floor() as u64;
    let bucket_ns = budget_ns.div_ceil(buckets as u64).max(1);
    let cap = (budget_ns / bucket_ns) as usize;
    let costs: Vec<Vec<usize>> = problem
        .groups
        .iter()
        .map(|g| {
            g.levels
                .iter()
                .map(|l| {
                    let ns = (l.runtime_ms * 1e6).ceil() as u64;
                    ns.div_ceil(bucket_ns).min(cap as u64 + 1) as usize
                })
                .collect()
        })
        .collect();

    // best[b]: minimal objective of the groups so far within b buckets.
    let mut best = vec![0.0f64; cap + 1];
    let mut choice: Vec<Vec<u32>> = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let prev = &best;
        let row: Vec<(f64, u32)> = par::map_range(cap + 1, |b| {
            let mut top = (f64::INFINITY, u32::MAX);
            for &l in &order[g] {
                let c = costs[g][l];
                if c <= b {
                    let v = prev[b - c] + weighted(g, l);
                    if v < top.0 {
                        top = (v, l as u32);
                    }
                }
            }
            top
        });
        best = row.iter().map(|r| r.0).collect();
        choice.push(row.into_iter().map(|r| r.1).collect());
    }
    if !best[cap].is_finite() {
        return Err(Error::Infeasible(format!(
            "no configuration fits a budget of {budget_ms} ms"
        )));
    }

    let mut levels = vec![0; g_count];
    let mut b = cap;
    for g in (0..g_count).rev() {
        let l = choice[g][b] as usize;
        levels[g] = l;
        b -= costs[g][l];
    }
    Ok(levels)
}

/// End-to-end loss of a level assignment. Lower is better.
pub trait Evaluator {
    fn evaluate(&self, levels: &[usize]) -> Result<f64>;
}

/// Sum of layer priors; a cheap stand-in when no model is at hand.
pub struct ProxyEvaluator<'a> {
    pub problem: &'a SearchProblem,
}

impl Evaluator for ProxyEvaluator<'_> {
    fn evaluate(&self, levels: &[usize]) -> Result<f64> {
        self.problem.objective(&vec![1.0; self.problem.len()], levels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub steps: usize,
    pub mutation_prob: f64,
    pub seed: u64,
    pub buckets: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            steps: DEFAULT_STEPS,
            mutation_prob: DEFAULT_MUTATION_PROB,
            seed: 0,
            buckets: DEFAULT_BUCKETS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateConfig {
    pub levels: Vec<usize>,
    pub kept: Vec<usize>,
    pub runtime_ms: f64,
    pub speedup: SpeedupEstimate,
    pub objective: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub candidate_loss: f64,
    pub best_loss: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub budget: Budget,
    pub best: CandidateConfig,
    pub coefficients: Vec<f64>,
    pub trace: Vec<TraceStep>,
    pub evaluations: usize,
}

struct Memo<'a, E: Evaluator + ?Sized> {
    evaluator: &'a E,
    cache: HashMap<Vec<usize>, f64>,
}

impl<E: Evaluator + ?Sized> Memo<'_, E> {
    fn loss(&mut self, levels: &[usize]) -> Result<f64> {
        if let Some(&v) = self.cache.get(levels) {
            return Ok(v);
        }
        let v = self.evaluator.evaluate(levels)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss of configuration {levels:?}")));
        }
        self.cache.insert(levels.to_vec(), v);
        Ok(v)
    }
}

fn candidate(
    problem: &SearchProblem,
    coefficients: &[f64],
    budget: &Budget,
    buckets: usize,
    memo: &mut Memo<'_, impl Evaluator + ?Sized>,
) -> Result<CandidateConfig> {
    let levels = dp_solve(problem, coefficients, budget.time_budget_ms, buckets)?;
    let runtime_ms = problem.runtime(&levels)?;
    if runtime_ms > budget.time_budget_ms {
        return Err(Error::Infeasible(format!(
            "solver returned runtime {runtime_ms} ms over budget {} ms",
            budget.time_budget_ms
        )));
    }
    let loss = memo.loss(&levels)?;
    Ok(CandidateConfig {
        kept: problem.kept(&levels),
        objective: problem.objective(coefficients, &levels)?,
        speedup: SpeedupEstimate::from_runtime(runtime_ms, problem.dense_runtime_ms),
        runtime_ms,
        levels,
        loss,
    })
}

/// Random-mutation search over per-layer coefficients. Each step rescales
/// every coefficient with probability `mutation_prob` by `exp(u)`,
/// `u ~ U(-ln 2, ln 2)`, and keeps the mutation only on a strict loss
/// improvement.
pub fn coefficient_search<E: Evaluator + ?Sized>(
    problem: &SearchProblem,
    evaluator: &E,
    target_speedup: f64,
    settings: &SearchSettings,
) -> Result<SearchOutcome> {
    if !(0.0..=1.0).contains(&settings.mutation_prob) {
        return Err(Error::InvalidArgument(format!(
            "mutation probability must be in [0, 1], got {}",
            settings.mutation_prob
        )));
    }
    let budget = Budget::new(target_speedup, problem.dense_runtime_ms)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut memo = Memo {
        evaluator,
        cache: HashMap::new(),
    };
    let mut coefficients = vec![1.0; problem.len()];
    let mut best = candidate(problem, &coefficients, &budget, settings.buckets, &mut memo)?;
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut trial = coefficients.clone();
        for c in trial.iter_mut() {
            if rng.random::<f64>() < settings.mutation_prob {
                *c *= rng.random_range(-LN_2..LN_2).exp();
            }
        }
        let cand = candidate(problem, &trial, &budget, settings.buckets, &mut memo)?;
        let accepted = cand.loss < best.loss;
        if accepted {
            coefficients = trial;
            best = cand.clone();
        }
        trace.push(TraceStep {
            step,
            candidate_loss: cand.loss,
            best_loss: best.loss,
            accepted,
        });
    }
    log::debug!(
        "target {target_speedup}: best loss {} after {} distinct evaluations",
        best.loss,
        memo.cache.len()
    );
    Ok(SearchOutcome {
        budget,
        best,
        coefficients,
        trace,
        evaluations: memo.cache.len(),
    })
}

/// One independent search per target. Targets must be strictly ascending.
pub fn plan_targets<E: Evaluator + ?Sized>(
    problem: &SearchProblem,
    evaluator: &E,
    targets: &[f64],
    settings: &SearchSettings,
) -> Result<Vec<SearchOutcome>> {
    check_targets(targets)?;
    targets
        .iter()
        .map(|&t| coefficient_search(problem, evaluator, t, settings))
        .collect()
}

pub fn check_targets(targets: &[f64]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no speedup targets given".into()));
    }
    if targets.iter().any(|t| !(t.is_finite() && *t >= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "speedup targets must be >= 1, got {targets:?}"
        )));
    }
    if targets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "speedup targets must be strictly ascending, got {targets:?}"
        )));
    }
    Ok(())
}
