//! The round-based active-learning loop.
//!
//! A run starts from a seeded random draw, then repeatedly scores the
//! unselected pool and moves the best `k` samples into the selected set
//! until the budget is spent. Strategies:
//!
//! * `idds`: `λ·mean_{u∈U} sim(x,u) − (1−λ)·mean_{s∈S} sim(x,s)`, highest first.
//! * `diversity_distance`: mean of `1 − sim(x,s)` over the selected set, highest first.
//! * `coreset`: greedy k-center on the distance `1 − sim`.
//! * `random`: next unselected items of one seeded permutation of the corpus.
//!
//! Ties always go to the earlier record in corpus order.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng;
use crate::similarity::{build_matrix, SimilarityKind, SimilarityMeasure, SimilarityOracle};
use crate::vectorize::FieldVectors;

pub const DEFAULT_LAMBDA: f64 = 0.67;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    DiversityDistance,
    Coreset,
    Idds,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::DiversityDistance => "diversity_distance",
            Strategy::Coreset => "coreset",
            Strategy::Idds => "idds",
        }
    }

    pub fn needs_similarity(self) -> bool {
        self != Strategy::Random
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(Strategy::Random),
            "diversity_distance" | "diversity" => Ok(Strategy::DiversityDistance),
            "coreset" => Ok(Strategy::Coreset),
            "idds" => Ok(Strategy::Idds),
            _ => Err(Error::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub budget: usize,
    pub rounds: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub kind: SimilarityKind,
    pub rng_seed: u64,
    /// Count `sim(x, x)` in the pool average of the IDDS score.
    pub include_self: bool,
    /// Average IDDS pool similarity over the pool as it stood after the seed
    /// round, instead of the current pool.
    pub static_pool_average: bool,
}

impl SelectionConfig {
    pub fn new(budget: usize, rounds: usize, strategy: Strategy, measure: SimilarityMeasure, rng_seed: u64) -> Self {
        SelectionConfig {
            budget,
            rounds,
            lambda: DEFAULT_LAMBDA,
            strategy,
            kind: SimilarityKind::tfidf(measure),
            rng_seed,
            include_self: true,
            static_pool_average: false,
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.budget == 0 || self.budget > pool_size {
            return bad(format!("budget {} must lie in 1..={pool_size}", self.budget));
        }
        if self.rounds == 0 || self.rounds > self.budget {
            return bad(format!("rounds {} must lie in 1..={}", self.rounds, self.budget));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} must lie in [0, 1]", self.lambda));
        }
        Ok(())
    }

    pub fn idds_params(&self) -> IddsParams {
        IddsParams {
            lambda: self.lambda,
            include_self: self.include_self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IddsParams {
    pub lambda: f64,
    pub include_self: bool,
}

impl Default for IddsParams {
    fn default() -> Self {
        IddsParams {
            lambda: DEFAULT_LAMBDA,
            include_self: true,
        }
    }
}

/// Per-round sizes: a seed round of `ceil(budget / rounds)` followed by
/// rounds of `ceil(remaining / rounds_left)`. Sums to `budget`.
pub fn round_sizes(budget: usize, rounds: usize) -> Vec<usize> {
    if rounds == 0 {
        return Vec::new();
    }
    let mut sizes = Vec::with_capacity(rounds);
    let mut taken = 0;
    for r in 0..rounds {
        let k = (budget - taken).div_ceil(rounds - r);
        sizes.push(k);
        taken += k;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub round: usize,
    pub id: String,
    /// `None` for the random seed round and the random strategy.
    pub score: Option<f64>,
}

/// Selected set, unselected pool and the audit trail of a run.
///
/// Items are addressed by their position in the corpus. The pool is kept
/// in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    ids: Vec<String>,
    selected: Vec<usize>,
    pool: Vec<usize>,
    in_pool: Vec<bool>,
    round: usize,
    seed: u64,
    frozen_pool: Option<Vec<usize>>,
    audit: Vec<AuditEntry>,
}

impl SelectionState {
    pub fn new(ids: Vec<String>, seed: u64) -> Self {
        let n = ids.len();
        SelectionState {
            ids,
            selected: Vec::new(),
            pool: (0..n).collect(),
            in_pool: vec![true; n],
            round: 0,
            seed,
            frozen_pool: None,
            audit: Vec::new(),
        }
    }

    /// Starts from an explicit selected set, leaving the rest in the pool.
    pub fn with_selected(ids: Vec<String>, selected: &[usize], seed: u64) -> Result<Self> {
        let mut state = SelectionState::new(ids, seed);
        for &i in selected {
            if i >= state.ids.len() || !state.in_pool[i] {
                return Err(Error::InvalidConfig(format!("bad initial selection index {i}")));
            }
            state.in_pool[i] = false;
            state.selected.push(i);
        }
        state.pool.retain(|&i| state.in_pool[i]);
        Ok(state)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn selected_ids(&self) -> Vec<&str> {
        self.selected.iter().map(|&i| self.ids[i].as_str()).collect()
    }

    pub fn pool_ids(&self) -> Vec<&str> {
        self.pool.iter().map(|&i| self.ids[i].as_str()).collect()
    }

    pub fn is_pooled(&self, x: usize) -> bool {
        self.in_pool.get(x).copied().unwrap_or(false)
    }

    /// Fixes the pool average of later IDDS scores to the current pool.
    pub fn freeze_pool_average(&mut self) {
        self.frozen_pool = Some(self.pool.clone());
    }

    fn average_pool(&self) -> &[usize] {
        self.frozen_pool.as_deref().unwrap_or(&self.pool)
    }

    fn take(&mut self, picks: &[(usize, Option<f64>)]) {
        for &(i, score) in picks {
            debug_assert!(self.in_pool[i]);
            self.in_pool[i] = false;
            self.selected.push(i);
            self.audit.push(AuditEntry {
                round: self.round,
                id: self.ids[i].clone(),
                score,
            });
        }
        let in_pool = &self.in_pool;
        self.pool.retain(|&i| in_pool[i]);
        self.round += 1;
    }

    /// Draws the next `k` pool items from the seeded corpus permutation.
    pub fn random_round(&mut self, k: usize) -> Result<()> {
        self.ensure_pool(k)?;
        let picks: Vec<(usize, Option<f64>)> = rng::permutation(self.ids.len(), self.seed)
            .into_iter()
            .filter(|&i| self.in_pool[i])
            .take(k)
            .map(|i| (i, None))
            .collect();
        self.take(&picks);
        Ok(())
    }

    fn ensure_pool(&self, k: usize) -> Result<()> {
        if k > self.pool.len() {
            return Err(Error::InsufficientPool {
                requested: k,
                available: self.pool.len(),
            });
        }
        Ok(())
    }
}

fn check_oracle(state: &SelectionState, sims: &dyn SimilarityOracle) -> Result<()> {
    if sims.len() != state.ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "similarity oracle covers {} items, state has {}",
            sims.len(),
            state.ids.len()
        )));
    }
    Ok(())
}

/// IDDS score of pool member `x`.
pub fn idds_score(x: usize, state: &SelectionState, sims: &dyn SimilarityOracle, params: IddsParams) -> Result<f64> {
    if state.selected.is_empty() {
        return Err(Error::EmptySelected);
    }
    let pool = state.average_pool();
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if !state.is_pooled(x) {
        return Err(Error::UnknownRecord(
            state.ids.get(x).cloned().unwrap_or_else(|| format!("#{x}")),
        ));
    }
    let pool_sum: f64 = pool
        .iter()
        .filter(|&&j| params.include_self || j != x)
        .map(|&j| sims.sim(x, j))
        .sum();
    let selected_sum: f64 = state.selected.iter().map(|&i| sims.sim(x, i)).sum();
    let pool_avg = pool_sum / pool.len() as f64;
    let selected_avg = selected_sum / state.selected.len() as f64;
    Ok(params.lambda * pool_avg - (1.0 - params.lambda) * selected_avg)
}

/// Mean distance `1 − sim` from `x` to the selected set.
pub fn mean_selected_distance(x: usize, state: &SelectionState, sims: &dyn SimilarityOracle) -> Result<f64> {
    if state.selected.is_empty() {
        return Err(Error::EmptySelected);
    }
    let total: f64 = state.selected.iter().map(|&s| 1.0 - sims.sim(x, s)).sum();
    Ok(total / state.selected.len() as f64)
}

/// Highest-scoring `k` of `scored`, which is in pool order. The sort is
/// stable, so equal scores keep pool order.
fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, Option<f64>)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.into_iter().take(k).map(|(i, s)| (i, Some(s))).collect()
}

/// Runs one selection round of size `k` with the configured strategy.
pub fn select_round(
    state: &mut SelectionState,
    config: &SelectionConfig,
    sims: Option<&dyn SimilarityOracle>,
    k: usize,
) -> Result<()> {
    state.ensure_pool(k)?;
    if config.strategy == Strategy::Random {
        return state.random_round(k);
    }
    let sims = sims.ok_or_else(|| {
        Error::InvalidConfig(format!("strategy {} needs a similarity oracle", config.strategy))
    })?;
    check_oracle(state, sims)?;
    if state.selected.is_empty() {
        return Err(Error::EmptySelected);
    }
    let picks = match config.strategy {
        Strategy::Idds => {
            let params = config.idds_params();
            let scored = state
                .pool
                .par_iter()
                .map(|&x| idds_score(x, state, sims, params).map(|s| (x, s)))
                .collect::<Result<Vec<_>>>()?;
            top_k(scored, k)
        }
        Strategy::DiversityDistance => {
            let scored = state
                .pool
                .par_iter()
                .map(|&x| mean_selected_distance(x, state, sims).map(|s| (x, s)))
                .collect::<Result<Vec<_>>>()?;
            top_k(scored, k)
        }
        Strategy::Coreset => coreset_picks(state, sims, k),
        Strategy::Random => unreachable!(),
    };
    state.take(&picks);
    Ok(())
}

/// `k` steps of greedy k-center: each step takes the pool item farthest from
/// its nearest selected item, then counts it as selected.
fn coreset_picks(state: &SelectionState, sims: &dyn SimilarityOracle, k: usize) -> Vec<(usize, Option<f64>)> {
    let mut candidates: Vec<(usize, f64)> = state
        .pool
        .par_iter()
        .map(|&x| {
            let nearest = state
                .selected
                .iter()
                .map(|&s| 1.0 - sims.sim(x, s))
                .fold(f64::INFINITY, f64::min);
            (x, nearest)
        })
        .collect();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let (best, _) = candidates
            .iter()
            .enumerate()
            .fold((usize::MAX, f64::NEG_INFINITY), |(bi, bd), (pos, &(_, d))| {
                if d > bd {
                    (pos, d)
                } else {
                    (bi, bd)
                }
            });
        let (center, dist) = candidates.remove(best);
        picks.push((center, Some(dist)));
        for (x, d) in candidates.iter_mut() {
            *d = d.min(1.0 - sims.sim(*x, center));
        }
    }
    picks
}

/// Full run over precomputed similarities: seeded random first round, then
/// scored rounds until `|selected| = budget`.
pub fn run_selection_with(
    ids: Vec<String>,
    sims: Option<&dyn SimilarityOracle>,
    config: &SelectionConfig,
) -> Result<SelectionState> {
    config.validate(ids.len())?;
    let mut state = SelectionState::new(ids, config.rng_seed);
    if config.strategy.needs_similarity() {
        match sims {
            Some(s) => check_oracle(&state, s)?,
            None => {
                return Err(Error::InvalidConfig(format!(
                    "strategy {} needs a similarity oracle",
                    config.strategy
                )))
            }
        }
    }
    let sizes = round_sizes(config.budget, config.rounds);
    state.random_round(sizes[0])?;
    if config.static_pool_average {
        state.freeze_pool_average();
    }
    for &k in &sizes[1..] {
        select_round(&mut state, config, sims, k)?;
    }
    debug_assert_eq!(state.selected.len(), config.budget);
    Ok(state)
}

/// Builds the similarity matrix for `config.kind` over `vectors` and runs
/// the selection loop.
pub fn run_selection(corpus: &Corpus, vectors: &[FieldVectors], config: &SelectionConfig) -> Result<SelectionState> {
    config.validate(corpus.len())?;
    if vectors.len() != corpus.len()
        || vectors.iter().zip(corpus.ids()).any(|(v, id)| v.record_id != id)
    {
        return Err(Error::DimensionMismatch(
            "field vectors are not aligned with the corpus".into(),
        ));
    }
    let ids: Vec<String> = corpus.ids().map(str::to_string).collect();
    if !config.strategy.needs_similarity() {
        return run_selection_with(ids, None, config);
    }
    let matrix = build_matrix(vectors, vectors, config.kind.measure)?;
    run_selection_with(ids, Some(&matrix), config)
}

/// One line of a selection output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionLine {
    pub round: usize,
    pub id: String,
    pub score: Option<f64>,
    pub strategy: Strategy,
}

pub fn write_selection_jsonl<W: Write>(state: &SelectionState, strategy: Strategy, mut out: W) -> std::io::Result<()> {
    for entry in state.audit() {
        let line = SelectionLine {
            round: entry.round,
            id: entry.id.clone(),
            score: entry.score,
            strategy,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_selection_jsonl<R: BufRead>(reader: R, source_name: &str) -> Result<Vec<SelectionLine>> {
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        lines.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            source_name: source_name.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(lines)
}
