//! Training-free candidate selection: a Gaussian-complexity score for
//! ranking architectures without any trained weights, constrained random
//! search over resource budgets, and the narrowing step that freezes the
//! winners into a finite candidate list for later training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::plan::{forward_plain, init_store_for, plan_for, NormMode, Plan, RunUntil};
use crate::rng::{derive_seed, substream};
use crate::space::{ArchConfig, ResourceReport, SearchSpace};
use crate::supernet::Supernet;
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::recalibrate_and_evaluate;

use rand::Rng;
use rand_distr::Distribution;

/// Draws exhausted before a budget is declared unsatisfiable.
const REJECTION_BUDGET: usize = 10_000;
/// Spaces at or below this many functional networks are searched by full
/// enumeration whenever the sample allowance covers the feasible set.
const ENUMERATION_LIMIT: usize = 100_000;

/// One architecture picked for one resource budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub encoding: String,
    pub score: f64,
    pub resources: ResourceReport,
    pub constraint_id: usize,
}

impl ScoredCandidate {
    pub fn arch(&self, space: &SearchSpace) -> Result<ArchConfig> {
        ArchConfig::decode(&self.encoding, space)
    }
}

/// Which resource a budget bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    Flops,
    Params,
}

/// One upper bound, e.g. `flops <= 1500000`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub limit: u64,
}

impl Constraint {
    pub fn parse(s: &str) -> Result<Constraint> {
        let err = || {
            Error::InvalidArgument(format!(
                "cannot parse constraint {s:?} (expected `flops <= N` or `params <= N`)"
            ))
        };
        let (kind_s, limit_s) = s.split_once("<=").ok_or_else(err)?;
        let kind = match kind_s.trim() {
            "flops" => ConstraintKind::Flops,
            "params" => ConstraintKind::Params,
            _ => return Err(err()),
        };
        let limit: u64 = limit_s.trim().replace('_', "").parse().map_err(|_| err())?;
        if limit == 0 {
            return Err(Error::InvalidArgument(format!("constraint {s:?} has a zero budget")));
        }
        Ok(Constraint { kind, limit })
    }

    pub fn satisfied_by(&self, r: &ResourceReport) -> bool {
        match self.kind {
            ConstraintKind::Flops => r.flops <= self.limit,
            ConstraintKind::Params => r.params <= self.limit,
        }
    }
}

impl std::fmt::Display for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            ConstraintKind::Flops => "flops",
            ConstraintKind::Params => "params",
        };
        write!(f, "{kind} <= {}", self.limit)
    }
}

/// An ordered list of budgets, one search winner each.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    /// Parse one budget per line; blank lines and `#` comments skipped.
    pub fn parse(text: &str) -> Result<ConstraintSet> {
        let mut constraints = vec![];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            constraints.push(Constraint::parse(line)?);
        }
        if constraints.is_empty() {
            return Err(Error::InvalidArgument("no constraints given".into()));
        }
        Ok(ConstraintSet { constraints })
    }

    /// Every budget must admit at least one architecture; resources grow
    /// monotonically with every choice, so the smallest network decides.
    pub fn check_feasible(&self, space: &SearchSpace) -> Result<()> {
        let floor = space.count_resources(&space.smallest(), space.resolution)?;
        for c in &self.constraints {
            if !c.satisfied_by(&floor) {
                return Err(Error::InfeasibleConstraint { constraint: c.to_string(), attempts: 0 });
            }
        }
        Ok(())
    }
}

/// The pre-pooling feature response to an input perturbation, the raw
/// material of the score: ||F(x + eps*d) - F(x)||_F / eps.
fn perturbation_response(
    plan: &Plan,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    delta: &Tensor<f32>,
    eps: f64,
) -> Result<f64> {
    let mut x_shift = x.clone();
    for (v, d) in x_shift.data_mut().iter_mut().zip(delta.data()) {
        *v += eps as f32 * d;
    }
    let base = forward_plain(plan, store, x, NormMode::Identity, RunUntil::PrePool)?;
    let moved = forward_plain(plan, store, &x_shift, NormMode::Identity, RunUntil::PrePool)?;
    let mut sq = 0.0f64;
    for (a, b) in moved.data().iter().zip(base.data()) {
        let d = (*a - *b) as f64;
        sq += d * d;
    }
    Ok(sq.sqrt() / eps)
}

/// Gaussian-complexity score of one architecture: over `repeats` trials
/// with fresh fan-in-scaled Gaussian weights (normalization layers as
/// identity), feed a standard-normal image and measure the pre-pooling
/// response to an eps-scaled Gaussian perturbation. The score is the log
/// of the mean response. Deterministic per (architecture, seed); the
/// stream is keyed by the canonical encoding, so cosmetically different
/// encodings of one network score identically.
pub fn zen_score(
    space: &SearchSpace,
    arch: &ArchConfig,
    repeats: usize,
    perturb_eps: f64,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 || !(perturb_eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "repeats {repeats} / eps {perturb_eps} unusable"
        )));
    }
    let plan = plan_for(space, arch)?;
    let encoding = arch.canonical(space).encode();
    let mut rng = substream(derive_seed(seed, &encoding), "zen-score");
    let normal = rand_distr::StandardNormal;
    let shape = [1usize, space.in_channels, space.resolution, space.resolution];
    let mut sum = 0.0f64;
    for _ in 0..repeats {
        let store: ParamStore<f32> = init_store_for(&plan, &mut rng);
        let mut draw = |n: usize| -> Tensor<f32> {
            let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(&shape, data).expect("shape fixed")
        };
        let x = draw(shape.iter().product());
        let delta = draw(shape.iter().product());
        sum += perturbation_response(&plan, &store, &x, &delta, perturb_eps)?;
    }
    let score = (sum / repeats as f64).ln();
    if !score.is_finite() {
        return Err(Error::ScoringError { arch: encoding });
    }
    Ok(score)
}

struct SearchState<'a, F> {
    space: &'a SearchSpace,
    scorer: F,
    memo: std::collections::BTreeMap<String, f64>,
    /// Canonical list of every network when the space is small enough to
    /// enumerate, paired with resources on first use.
    enumerated: Option<Vec<(ArchConfig, ResourceReport)>>,
}

impl<'a, F: FnMut(&ArchConfig) -> Result<f64>> SearchState<'a, F> {
    fn new(space: &'a SearchSpace, scorer: F) -> Result<Self> {
        let enumerated = match space.enumerate_canonical(ENUMERATION_LIMIT) {
            Some(all) => {
                let mut list = Vec::with_capacity(all.len());
                for arch in all {
                    let r = space.count_resources(&arch, space.resolution)?;
                    list.push((arch, r));
                }
                Some(list)
            }
            None => None,
        };
        Ok(SearchState { space, scorer, memo: std::collections::BTreeMap::new(), enumerated })
    }

    fn score(&mut self, arch: &ArchConfig) -> Result<f64> {
        let key = arch.canonical(self.space).encode();
        if let Some(&s) = self.memo.get(&key) {
            return Ok(s);
        }
        let s = (self.scorer)(arch)?;
        self.memo.insert(key, s);
        Ok(s)
    }

    /// The candidate pool for one budget: the full feasible set when the
    /// space is enumerable and the sample allowance covers it, otherwise
    /// rejection-sampled draws.
    fn candidates<R: Rng>(
        &mut self,
        constraint: &Constraint,
        samples: usize,
        rng: &mut R,
    ) -> Result<Vec<(ArchConfig, ResourceReport)>> {
        if let Some(all) = &self.enumerated {
            let feasible: Vec<(ArchConfig, ResourceReport)> = all
                .iter()
                .filter(|(_, r)| constraint.satisfied_by(r))
                .cloned()
                .collect();
            if feasible.is_empty() {
                return Err(Error::InfeasibleConstraint {
                    constraint: constraint.to_string(),
                    attempts: all.len(),
                });
            }
            if samples >= feasible.len() {
                return Ok(feasible);
            }
        }
        let mut out = Vec::with_capacity(samples);
        let mut attempts = 0usize;
        while out.len() < samples {
            if attempts >= REJECTION_BUDGET {
                return Err(Error::InfeasibleConstraint {
                    constraint: constraint.to_string(),
                    attempts,
                });
            }
            attempts += 1;
            let arch = self.space.sample_uniform(rng).canonical(self.space);
            let r = self.space.count_resources(&arch, self.space.resolution)?;
            if constraint.satisfied_by(&r) {
                out.push((arch, r));
            }
        }
        Ok(out)
    }

    /// Best-scoring feasible candidate; ties fall to lower FLOPs, then to
    /// the lexicographically smaller encoding.
    fn select_one<R: Rng>(
        &mut self,
        constraint: &Constraint,
        constraint_id: usize,
        samples: usize,
        rng: &mut R,
    ) -> Result<ScoredCandidate> {
        let pool = self.candidates(constraint, samples, rng)?;
        let mut best: Option<ScoredCandidate> = None;
        for (arch, resources) in pool {
            let score = self.score(&arch)?;
            let encoding = arch.encode();
            let wins = match &best {
                None => true,
                Some(b) => {
                    score > b.score
                        || (score == b.score && resources.flops < b.resources.flops)
                        || (score == b.score
                            && resources.flops == b.resources.flops
                            && encoding < b.encoding)
                }
            };
            if wins {
                best = Some(ScoredCandidate { encoding, score, resources, constraint_id });
            }
        }
        Ok(best.expect("candidate pool is never empty"))
    }
}

/// For each budget, draw `samples_per_constraint` feasible architectures
/// (or enumerate the whole feasible set when it is smaller) and keep the
/// best-scoring one. Deterministic per seed.
pub fn zero_shot_search<F: FnMut(&ArchConfig) -> Result<f64>>(
    space: &SearchSpace,
    scorer: F,
    constraints: &ConstraintSet,
    samples_per_constraint: usize,
    seed: u64,
) -> Result<Vec<ScoredCandidate>> {
    if samples_per_constraint == 0 {
        return Err(Error::InvalidArgument("samples_per_constraint must be at least 1".into()));
    }
    let mut state = SearchState::new(space, scorer)?;
    let mut rng = substream(seed, "zero-shot-search");
    let mut out = Vec::with_capacity(constraints.constraints.len());
    for (i, c) in constraints.constraints.iter().enumerate() {
        out.push(state.select_one(c, i, samples_per_constraint, &mut rng)?);
    }
    Ok(out)
}

/// Build the narrowed candidate list: one winner per budget, freezing the
/// search space to a finite set for later training. A winner duplicating
/// an earlier one is re-selected once with fresh draws and kept if the
/// duplicate persists.
pub fn narrow_space<F: FnMut(&ArchConfig) -> Result<f64>>(
    space: &SearchSpace,
    scorer: F,
    constraints: &ConstraintSet,
    samples_per_constraint: usize,
    seed: u64,
) -> Result<Vec<ScoredCandidate>> {
    if samples_per_constraint == 0 {
        return Err(Error::InvalidArgument("samples_per_constraint must be at least 1".into()));
    }
    let mut state = SearchState::new(space, scorer)?;
    let mut rng = substream(seed, "zero-shot-search");
    let mut out: Vec<ScoredCandidate> = Vec::with_capacity(constraints.constraints.len());
    for (i, c) in constraints.constraints.iter().enumerate() {
        let mut pick = state.select_one(c, i, samples_per_constraint, &mut rng)?;
        if out.iter().any(|p| p.encoding == pick.encoding) {
            pick = state.select_one(c, i, samples_per_constraint, &mut rng)?;
        }
        out.push(pick);
    }
    Ok(out)
}

/// Pick the most accurate candidate on the test split, recalibrating each
/// one first. Ties fall to lower FLOPs, then the smaller encoding.
pub fn validation_search(
    net: &mut Supernet<f32>,
    candidates: &[ArchConfig],
    data: &Dataset,
) -> Result<(ArchConfig, f64)> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to evaluate".into()));
    }
    let mut best: Option<(ArchConfig, f64, ResourceReport, String)> = None;
    for arch in candidates {
        let acc = recalibrate_and_evaluate(net, arch, data)?;
        let space = net.space();
        let resources = space.count_resources(arch, space.resolution)?;
        let encoding = arch.encode();
        let wins = match &best {
            None => true,
            Some((_, b_acc, b_res, b_enc)) => {
                acc > *b_acc
                    || (acc == *b_acc && resources.flops < b_res.flops)
                    || (acc == *b_acc && resources.flops == b_res.flops && encoding < *b_enc)
            }
        };
        if wins {
            best = Some((arch.clone(), acc, resources, encoding));
        }
    }
    let (arch, acc, _, _) = best.expect("candidate list is non-empty");
    Ok((arch, acc))
}
