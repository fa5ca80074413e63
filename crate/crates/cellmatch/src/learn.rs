//! Self-supervised cost-parameter learning: single- and bi-objective
//! tree-structured Parzen estimators, Pareto utilities and the three-stage
//! optimization loop (linear covariances, sparsity gates, offset
//! covariances).
//!
//! Suggestions are deterministic given the history and the caller's RNG;
//! the optimization loop is sequential while the pairwise solves inside one
//! loss evaluation run in parallel.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::lap_from_instance;
use crate::costs::{
    build_pairwise_instance, CostWeights, GmInstance, SharedCovariances, SparsityParams,
};
use crate::error::{Error, Result};
use crate::geometry::Worm;
use crate::gm::{solve_gm, stream_rng, GmConfig};
use crate::mgm::{discrete_cycle_loss, synchronization_loss, synchronize, MultiMatching, SyncMode};
use crate::scalar::{fcmp, Real};

/// Random trials before the density model takes over.
pub const N_STARTUP: usize = 10;
/// Fraction of the history modeled as "good".
const GAMMA: f64 = 0.25;
/// Candidates drawn from the good-set density per suggestion.
const N_CANDIDATES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DimKind {
    Continuous,
    Integer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub kind: DimKind,
    pub low: f64,
    pub high: f64,
    pub log_scale: bool,
}

impl Dim {
    pub fn continuous(name: &str, low: f64, high: f64, log_scale: bool) -> Self {
        Self { name: name.into(), kind: DimKind::Continuous, low, high, log_scale }
    }

    pub fn integer(name: &str, low: f64, high: f64) -> Self {
        Self { name: name.into(), kind: DimKind::Integer, low, high, log_scale: false }
    }

    /// The space the density model works in: log-scaled dims are flattened.
    fn to_internal(&self, value: f64) -> f64 {
        if self.log_scale {
            value.ln()
        } else {
            value
        }
    }

    fn from_internal(&self, z: f64) -> f64 {
        let raw = if self.log_scale { z.exp() } else { z };
        let clamped = raw.clamp(self.low, self.high);
        match self.kind {
            DimKind::Continuous => clamped,
            DimKind::Integer => clamped.round().clamp(self.low, self.high),
        }
    }

    fn bounds_internal(&self) -> (f64, f64) {
        (self.to_internal(self.low), self.to_internal(self.high))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::EmptySpace);
        }
        for d in &self.dims {
            if !(d.low < d.high) {
                return Err(Error::InvalidInput(format!(
                    "dimension {} has empty range [{}, {}]",
                    d.name, d.low, d.high
                )));
            }
            if d.log_scale && d.low <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "log dimension {} needs a positive lower bound",
                    d.name
                )));
            }
        }
        Ok(())
    }

    pub fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
        self.dims
            .iter()
            .map(|d| {
                let (lo, hi) = d.bounds_internal();
                (d.name.clone(), d.from_internal(rng.gen_range(lo..hi)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub params: BTreeMap<String, f64>,
    pub objectives: Vec<f64>,
}

/// Gaussian kernel density over one dimension, truncated to the bounds and
/// mixed with one uniform pseudo-kernel (the prior keeps the density-ratio
/// score bounded in regions neither set covers).
struct Kde {
    centers: Vec<f64>,
    bandwidth: f64,
    lo: f64,
    hi: f64,
}

impl Kde {
    /// Scott's rule, floored at range/min(100, n) so a clustered set keeps a
    /// count-dependent minimum spread: wide while few samples exist, never
    /// narrower than a hundredth of the range. Without the floor the
    /// good-set density collapses onto its first cluster and the search
    /// stalls there.
    fn fit(samples: &[f64], lo: f64, hi: f64) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let floor = (hi - lo) / n.min(100.0);
        let bandwidth = (var.sqrt() * n.powf(-0.2)).max(floor).max(1e-12);
        Self { centers: samples.to_vec(), bandwidth, lo, hi }
    }

    fn log_density(&self, z: f64) -> f64 {
        let h = self.bandwidth;
        let mut acc = 1.0 / (self.hi - self.lo);
        for &c in &self.centers {
            let mass = normal_cdf((self.hi - c) / h) - normal_cdf((self.lo - c) / h);
            let u = (z - c) / h;
            acc += (-0.5 * u * u).exp() / (h * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-12));
        }
        (acc / (self.centers.len() + 1) as f64).max(1e-300).ln()
    }

    /// Draw from the mixture: a random kernel (or the uniform prior
    /// component), truncated to the bounds by clamping.
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let pick = rng.gen_range(0..=self.centers.len());
        if pick == self.centers.len() {
            rng.gen_range(self.lo..self.hi)
        } else {
            let noise: f64 = rng.sample(StandardNormal);
            (self.centers[pick] + noise * self.bandwidth).clamp(self.lo, self.hi)
        }
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Shared density-ratio sampler: given the history already ordered so that
/// the first `n_good` entries are the good set, draw candidates around good
/// points and return the one maximizing Σ log g(z) − log b(z).
fn parzen_suggest(
    ordered: &[&Trial],
    n_good: usize,
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<String, f64> {
    let (good, bad) = ordered.split_at(n_good);
    let mut kdes = Vec::with_capacity(space.dims.len());
    for d in &space.dims {
        let (lo, hi) = d.bounds_internal();
        let pull = |set: &[&Trial]| -> Vec<f64> {
            set.iter().map(|t| d.to_internal(t.params[&d.name])).collect()
        };
        let g = Kde::fit(&pull(good), lo, hi);
        let b = if bad.is_empty() { None } else { Some(Kde::fit(&pull(bad), lo, hi)) };
        kdes.push((g, b, lo, hi));
    }

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..N_CANDIDATES {
        let mut zs = Vec::with_capacity(space.dims.len());
        let mut score = 0.0;
        for (g, b, _, _) in &kdes {
            let z = g.sample(rng);
            score += g.log_density(z) - b.as_ref().map_or(0.0, |b| b.log_density(z));
            zs.push(z);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, zs));
        }
    }
    let (_, zs) = best.expect("at least one candidate");
    space
        .dims
        .iter()
        .zip(zs)
        .map(|(d, z)| (d.name.clone(), d.from_internal(z)))
        .collect()
}

fn check_history(history: &[Trial], space: &SearchSpace, n_objectives: usize) -> Result<()> {
    for t in history {
        if t.objectives.len() != n_objectives || t.objectives.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "trial {} must carry {} finite objectives",
                t.trial_id, n_objectives
            )));
        }
        for d in &space.dims {
            if !t.params.contains_key(&d.name) {
                return Err(Error::InvalidInput(format!(
                    "trial {} is missing parameter {}",
                    t.trial_id, d.name
                )));
            }
        }
    }
    Ok(())
}

/// Single-objective suggestion: the best quarter of the history (by
/// objective, ties by trial id) forms the good set; below `N_STARTUP` trials
/// the suggestion is a uniform sample.
pub fn tpe_suggest(
    history: &[Trial],
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    space.validate()?;
    check_history(history, space, 1)?;
    if history.len() < N_STARTUP {
        return Ok(space.sample_uniform(rng));
    }
    let mut ordered: Vec<&Trial> = history.iter().collect();
    ordered.sort_by(|a, b| {
        fcmp(&a.objectives[0], &b.objectives[0]).then(a.trial_id.cmp(&b.trial_id))
    });
    let n_good = ((GAMMA * history.len() as f64).ceil() as usize).max(1);
    Ok(parzen_suggest(&ordered, n_good, space, rng))
}

/// Nondomination rank of every trial (rank 0 = Pareto front, rank 1 = front
/// of the rest, ...), minimizing both objectives.
fn nondomination_ranks(trials: &[Trial]) -> Vec<usize> {
    let n = trials.len();
    let mut rank = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut level = 0;
    while !remaining.is_empty() {
        let front: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| {
                !remaining.iter().any(|&j| j != i && dominates(&trials[j], &trials[i]))
            })
            .collect();
        for &i in &front {
            rank[i] = level;
        }
        remaining.retain(|i| rank[*i] == usize::MAX);
        level += 1;
    }
    rank
}

fn dominates(a: &Trial, b: &Trial) -> bool {
    let le = a.objectives.iter().zip(&b.objectives).all(|(x, y)| x <= y);
    let lt = a.objectives.iter().zip(&b.objectives).any(|(x, y)| x < y);
    le && lt
}

/// Bi-objective suggestion: trials are ordered by (nondomination rank, trial
/// id) and the best quarter forms the good set.
pub fn motpe_suggest(
    history: &[Trial],
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, f64>> {
    space.validate()?;
    check_history(history, space, 2)?;
    if history.len() < N_STARTUP {
        return Ok(space.sample_uniform(rng));
    }
    let ranks = nondomination_ranks(history);
    let mut ordered: Vec<(usize, &Trial)> =
        history.iter().enumerate().map(|(i, t)| (ranks[i], t)).collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.trial_id.cmp(&b.1.trial_id)));
    let ordered: Vec<&Trial> = ordered.into_iter().map(|(_, t)| t).collect();
    let n_good = ((GAMMA * history.len() as f64).ceil() as usize).max(1);
    Ok(parzen_suggest(&ordered, n_good, space, rng))
}

/// All nondominated trials under bi-objective minimization, in input order.
/// Points equal on both axes do not dominate each other and are all kept.
pub fn pareto_front(trials: &[Trial]) -> Vec<Trial> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        fcmp(&trials[a].objectives[0], &trials[b].objectives[0])
            .then(fcmp(&trials[a].objectives[1], &trials[b].objectives[1]))
            .then(trials[a].trial_id.cmp(&trials[b].trial_id))
    });
    let mut keep = vec![false; trials.len()];
    let mut best_prev = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        // One group of equal first objectives at a time.
        let f1 = trials[order[i]].objectives[0];
        let mut j = i;
        while j < order.len() && trials[order[j]].objectives[0] == f1 {
            j += 1;
        }
        let group_min =
            order[i..j].iter().map(|&k| trials[k].objectives[1]).fold(f64::INFINITY, f64::min);
        for &k in &order[i..j] {
            keep[k] = trials[k].objectives[1] == group_min && group_min < best_prev;
        }
        best_prev = best_prev.min(group_min);
        i = j;
    }
    trials.iter().zip(keep).filter_map(|(t, k)| k.then(|| t.clone())).collect()
}

/// Pick from a (loss, density) Pareto front: drop trials at or above the
/// density cap, keep those within the loss band of the best survivor, return
/// the sparsest of them (ties toward the lower trial id).
pub fn stage2_select(front: &[Trial], cap: f64, band: f64) -> Result<Trial> {
    let feasible: Vec<&Trial> = front.iter().filter(|t| t.objectives[1] < cap).collect();
    if feasible.is_empty() {
        return Err(Error::NoFeasible);
    }
    let min_loss = feasible.iter().map(|t| t.objectives[0]).fold(f64::INFINITY, f64::min);
    let threshold = min_loss + band * min_loss.abs();
    let mut kept: Vec<&Trial> =
        feasible.into_iter().filter(|t| t.objectives[0] <= threshold).collect();
    kept.sort_by(|a, b| {
        fcmp(&a.objectives[1], &b.objectives[1]).then(a.trial_id.cmp(&b.trial_id))
    });
    Ok(kept[0].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negated count of pairwise matches surviving sparse synchronization.
    SyncSparse,
    /// Count of transitively broken matching chains over worm triples.
    DiscreteCycle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnConfig {
    pub n_learn: usize,
    pub trials_per_stage: [usize; 3],
    pub seed: u64,
    pub n_lin_cap: f64,
    pub loss_band: f64,
    pub loss_kind: LossKind,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            n_learn: 15,
            trials_per_stage: [200, 200, 100],
            seed: 0,
            n_lin_cap: 12_000.0,
            loss_band: 0.0005,
            loss_kind: LossKind::SyncSparse,
        }
    }
}

/// One line of the persisted trial log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub stage: usize,
    pub params: BTreeMap<String, f64>,
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome<F: Real> {
    pub sigmas: SharedCovariances<F>,
    pub sparsity: SparsityParams<F>,
    pub trial_log: Vec<TrialRecord>,
}

/// Unassignment offset while scoring candidate parameters.
const LEARN_C0: f64 = 10_000.0;
/// Covariance-diagonal search range; the learned values of interest sit
/// well inside it and only ratios matter for the matchings.
const SIGMA_BOUNDS: (f64, f64) = (1.0, 200.0);

fn sigma_space(prefix_a: &str, prefix_b: Option<&str>) -> SearchSpace {
    let mut dims = Vec::new();
    for p in std::iter::once(prefix_a).chain(prefix_b) {
        for axis in ["x", "y", "z"] {
            dims.push(Dim::continuous(
                &format!("{p}_{axis}"),
                SIGMA_BOUNDS.0,
                SIGMA_BOUNDS.1,
                true,
            ));
        }
    }
    SearchSpace { dims }
}

fn vec3_from(params: &BTreeMap<String, f64>, prefix: &str) -> [f64; 3] {
    [params[&format!("{prefix}_x")], params[&format!("{prefix}_y")], params[&format!("{prefix}_z")]]
}

/// Loss and mean allowed-pair count of one parameter set over all worm
/// pairs. Pure linear weights route through the LAP; a positive offset
/// weight routes through the quadratic solver.
fn evaluate<F: Real>(
    worms: &[&Worm<F>],
    sigmas: &SharedCovariances<F>,
    weights: &CostWeights<F>,
    sparsity: &SparsityParams<F>,
    kind: LossKind,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = worms.len();
    let pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let solved: Vec<((usize, usize), GmInstance<F>, crate::assignment::Matching)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let inst =
                build_pairwise_instance(worms[a], worms[b], weights, sigmas, sparsity, F::cast(LEARN_C0));
            let m = if inst.has_quadratic() {
                let cfg = GmConfig { seed: seed ^ ((a as u64) << 32 | b as u64), ..GmConfig::default() };
                solve_gm(&inst, &cfg).matching
            } else {
                lap_from_instance(&inst).0
            };
            ((a, b), inst, m)
        })
        .collect();

    let mut mm = MultiMatching::new(n);
    let mut instances: BTreeMap<(usize, usize), GmInstance<F>> = BTreeMap::new();
    let mut allowed_total = 0usize;
    for ((a, b), inst, m) in solved {
        allowed_total += inst.num_allowed();
        instances.insert((a, b), inst);
        mm.insert(a, b, m);
    }
    let n_lin = allowed_total as f64 / pairs.len().max(1) as f64;

    let loss = match kind {
        LossKind::DiscreteCycle => discrete_cycle_loss(&mm)?.inconsistent_triples as f64,
        LossKind::SyncSparse => {
            let sizes: Vec<usize> = worms.iter().map(|w| w.len()).collect();
            let allowed =
                |a: usize, i: usize, b: usize, s: usize| instances[&(a, b)].allowed_cost(i, s).is_some();
            let cost = |a: usize, i: usize, b: usize, s: usize| {
                instances[&(a, b)].allowed_cost(i, s).unwrap_or_else(F::infinity)
            };
            let (_, mm_out) = synchronize(&mm, &sizes, SyncMode::Sparse, allowed, cost);
            synchronization_loss(&mm, &mm_out)?
        }
    };
    Ok((loss, n_lin))
}

fn run_stage<E>(
    stage: usize,
    trials: usize,
    space: &SearchSpace,
    bi_objective: bool,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<TrialRecord>,
    mut eval: E,
) -> Result<Vec<Trial>>
where
    E: FnMut(&BTreeMap<String, f64>) -> Result<Vec<f64>>,
{
    let mut history: Vec<Trial> = Vec::with_capacity(trials);
    for t in 0..trials {
        let params = if bi_objective {
            motpe_suggest(&history, space, rng)
        } else {
            tpe_suggest(&history, space, rng)
        }
        .map_err(|e| Error::StageFailed { stage, source: Box::new(e) })?;
        let objectives =
            eval(&params).map_err(|e| Error::StageFailed { stage, source: Box::new(e) })?;
        log.push(TrialRecord { trial: t, stage, params: params.clone(), objectives: objectives.clone() });
        history.push(Trial { trial_id: t, params, objectives });
    }
    Ok(history)
}

fn best_trial(history: &[Trial]) -> &Trial {
    history
        .iter()
        .min_by(|a, b| fcmp(&a.objectives[0], &b.objectives[0]).then(a.trial_id.cmp(&b.trial_id)))
        .expect("stage produced at least one trial")
}

/// Three-stage parameter learning on the first `n_learn` worms (ordered by
/// worm id): linear covariance diagonals by TPE against dense LAP matchings,
/// then sparsity gates by bi-objective TPE trading loss against instance
/// density, then offset covariance diagonals by TPE against the full sparse
/// quadratic solver.
pub fn learn_parameters<F: Real>(
    worms: &[Worm<F>],
    cfg: &LearnConfig,
) -> Result<LearnOutcome<F>> {
    if cfg.n_learn < 3 || worms.len() < 3 {
        return Err(Error::InvalidInput("learning needs at least 3 worms".into()));
    }
    let mut order: Vec<usize> = (0..worms.len()).collect();
    order.sort_by(|&a, &b| worms[a].worm_id.cmp(&worms[b].worm_id));
    let selected: Vec<&Worm<F>> =
        order.into_iter().take(cfg.n_learn).map(|i| &worms[i]).collect();

    let mut log = Vec::new();

    // Stage 1: Σ^cen and Σ^rad diagonals against dense linear matchings.
    let space1 = sigma_space("sigma_cen", Some("sigma_rad"));
    let dense = SparsityParams::dense();
    let linear_weights = CostWeights::new(F::one(), F::one(), F::zero());
    let mut rng = stream_rng(cfg.seed, 101);
    let kind = cfg.loss_kind;
    let history1 = run_stage(1, cfg.trials_per_stage[0], &space1, false, &mut rng, &mut log, |p| {
        let sigmas = SharedCovariances {
            sigma_cen: vec3_from(p, "sigma_cen").map(F::cast),
            sigma_rad: vec3_from(p, "sigma_rad").map(F::cast),
            sigma_off: [F::one(); 3],
        };
        let (loss, _) = evaluate(&selected, &sigmas, &linear_weights, &dense, kind, cfg.seed)?;
        Ok(vec![loss])
    })?;
    let stage1 = best_trial(&history1);
    let mut sigmas = SharedCovariances {
        sigma_cen: vec3_from(&stage1.params, "sigma_cen").map(F::cast),
        sigma_rad: vec3_from(&stage1.params, "sigma_rad").map(F::cast),
        sigma_off: [F::one(); 3],
    };

    // Stage 2: sparsity gates against (loss, mean allowed pairs).
    let space2 = SearchSpace {
        dims: vec![
            Dim::integer("k_min", 1.0, 30.0),
            Dim::continuous("tau_cen", 0.01, 10.0, true),
            Dim::continuous("tau_rad", 0.01, 10.0, true),
        ],
    };
    let mut rng = stream_rng(cfg.seed, 102);
    let history2 = run_stage(2, cfg.trials_per_stage[1], &space2, true, &mut rng, &mut log, |p| {
        let sp = SparsityParams {
            k_min: p["k_min"] as usize,
            tau_cen: F::cast(p["tau_cen"]),
            tau_rad: F::cast(p["tau_rad"]),
        };
        let (loss, n_lin) = evaluate(&selected, &sigmas, &linear_weights, &sp, kind, cfg.seed)?;
        Ok(vec![loss, n_lin])
    })?;
    let front = pareto_front(&history2);
    let chosen = stage2_select(&front, cfg.n_lin_cap, cfg.loss_band)
        .map_err(|e| Error::StageFailed { stage: 2, source: Box::new(e) })?;
    let sparsity = SparsityParams {
        k_min: chosen.params["k_min"] as usize,
        tau_cen: F::cast(chosen.params["tau_cen"]),
        tau_rad: F::cast(chosen.params["tau_rad"]),
    };

    // Stage 3: Σ^off diagonals against the sparse quadratic solver.
    let space3 = sigma_space("sigma_off", None);
    let quad_weights = CostWeights::uniform();
    let mut rng = stream_rng(cfg.seed, 103);
    let history3 = run_stage(3, cfg.trials_per_stage[2], &space3, false, &mut rng, &mut log, |p| {
        let s = SharedCovariances { sigma_off: vec3_from(p, "sigma_off").map(F::cast), ..sigmas };
        let (loss, _) = evaluate(&selected, &s, &quad_weights, &sparsity, kind, cfg.seed)?;
        Ok(vec![loss])
    })?;
    let stage3 = best_trial(&history3);
    sigmas.sigma_off = vec3_from(&stage3.params, "sigma_off").map(F::cast);

    Ok(LearnOutcome { sigmas, sparsity, trial_log: log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Nucleus;

    fn unit_space(n: usize) -> SearchSpace {
        SearchSpace {
            dims: (0..n).map(|i| Dim::continuous(&format!("x{i}"), 0.0, 1.0, false)).collect(),
        }
    }

    fn trial(id: usize, params: &[(&str, f64)], objectives: &[f64]) -> Trial {
        Trial {
            trial_id: id,
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            objectives: objectives.to_vec(),
        }
    }

    #[test]
    fn cold_start_is_uniform_and_reproducible() {
        let space = unit_space(3);
        let a = tpe_suggest(&[], &space, &mut stream_rng(5, 0)).unwrap();
        let b = tpe_suggest(&[], &space, &mut stream_rng(5, 0)).unwrap();
        let c = tpe_suggest(&[], &space, &mut stream_rng(5, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for v in a.values() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn empty_space_is_rejected() {
        let space = SearchSpace { dims: vec![] };
        assert!(matches!(
            tpe_suggest(&[], &space, &mut stream_rng(0, 0)),
            Err(Error::EmptySpace)
        ));
    }

    #[test]
    fn log_dimension_stays_in_bounds() {
        let space = SearchSpace { dims: vec![Dim::continuous("s", 1.0, 200.0, true)] };
        let mut history = Vec::new();
        let mut rng = stream_rng(9, 0);
        for t in 0..60 {
            let params = tpe_suggest(&history, &space, &mut rng).unwrap();
            let v = params["s"];
            assert!((1.0..=200.0).contains(&v), "out of bounds: {v}");
            history.push(Trial { trial_id: t, params, objectives: vec![(v - 3.0).abs()] });
        }
    }

    #[test]
    fn integer_dimension_yields_integers() {
        let space = SearchSpace { dims: vec![Dim::integer("k", 1.0, 30.0)] };
        let mut history = Vec::new();
        let mut rng = stream_rng(11, 0);
        for t in 0..40 {
            let params = tpe_suggest(&history, &space, &mut rng).unwrap();
            let v = params["k"];
            assert_eq!(v, v.round());
            assert!((1.0..=30.0).contains(&v));
            history.push(Trial { trial_id: t, params, objectives: vec![(v - 7.0).abs()] });
        }
    }

    #[test]
    fn suggestions_stay_inside_a_tight_good_cluster() {
        // 8 trials clustered near 0.3 with the best objectives, 24 spread
        // elsewhere; suggestions should fall inside the cluster's
        // neighborhood almost always.
        let mut history = Vec::new();
        for i in 0..8 {
            let x = 0.3 + 0.001 * i as f64;
            history.push(trial(i, &[("x0", x)], &[0.001 * i as f64]));
        }
        for i in 0..24 {
            let x = 0.65 + 0.01 * i as f64 % 0.35;
            history.push(trial(8 + i, &[("x0", x)], &[10.0 + i as f64]));
        }
        let space = unit_space(1);
        let mut inside = 0;
        for seed in 0..100 {
            let p = tpe_suggest(&history, &space, &mut stream_rng(seed, 3)).unwrap();
            if (0.25..=0.36).contains(&p["x0"]) {
                inside += 1;
            }
        }
        assert!(inside >= 90, "only {inside}/100 suggestions landed in the cluster");
    }

    fn run_sphere(dims: usize, trials: usize, seed: u64) -> f64 {
        let space = unit_space(dims);
        let center: Vec<f64> = (0..dims).map(|i| 0.2 + 0.1 * i as f64 % 0.6).collect();
        let mut rng = stream_rng(seed, 7);
        let mut history: Vec<Trial> = Vec::new();
        let mut best = f64::INFINITY;
        for t in 0..trials {
            let params = tpe_suggest(&history, &space, &mut rng).unwrap();
            let f: f64 = (0..dims)
                .map(|i| (params[&format!("x{i}")] - center[i]).powi(2))
                .sum();
            best = best.min(f);
            history.push(Trial { trial_id: t, params, objectives: vec![f] });
        }
        best
    }

    #[test]
    fn sphere_benchmark_converges() {
        let mut bests: Vec<f64> = (0..10).map(|s| run_sphere(6, 300, s)).collect();
        bests.sort_by(fcmp);
        let median = 0.5 * (bests[4] + bests[5]);
        // Median over seeds must reach a tenth of the squared range.
        assert!(median <= 0.1, "median best {median} too large: {bests:?}");
    }

    #[test]
    fn degenerate_second_objective_matches_tpe() {
        let mut single = Vec::new();
        let mut double = Vec::new();
        for i in 0..20 {
            let x = (i as f64 * 0.047) % 1.0;
            let y = (i as f64 * 0.031) % 1.0;
            let f = (x - 0.5).powi(2);
            single.push(trial(i, &[("x0", x), ("x1", y)], &[f]));
            double.push(trial(i, &[("x0", x), ("x1", y)], &[f, 7.0]));
        }
        let space = unit_space(2);
        let a = tpe_suggest(&single, &space, &mut stream_rng(21, 4)).unwrap();
        let b = motpe_suggest(&double, &space, &mut stream_rng(21, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_nondominated_history_is_handled() {
        let mut history = Vec::new();
        for i in 0..16 {
            let x = i as f64 / 15.0;
            history.push(trial(i, &[("x0", x), ("x1", 0.5)], &[x, 1.0 - x]));
        }
        let space = unit_space(2);
        let p = motpe_suggest(&history, &space, &mut stream_rng(3, 5)).unwrap();
        assert!((0.0..=1.0).contains(&p["x0"]));
    }

    #[test]
    fn motpe_concentrates_near_the_front() {
        // f1 = x + y², f2 = (1−x) + y²: the front sits at y = 0, every
        // positive y is pure excess. Suggestions should push y down.
        let mut history = Vec::new();
        let mut rng = stream_rng(17, 6);
        for i in 0..60 {
            let x: f64 = rng.gen();
            let y: f64 = rng.gen();
            history.push(trial(i, &[("x0", x), ("x1", y)], &[x + y * y, (1.0 - x) + y * y]));
        }
        let space = unit_space(2);
        let mut mean_sq = 0.0;
        for seed in 0..100 {
            let p = motpe_suggest(&history, &space, &mut stream_rng(seed, 8)).unwrap();
            mean_sq += p["x1"] * p["x1"];
        }
        mean_sq /= 100.0;
        // Uniform sampling would give E[y²] = 1/3.
        assert!(mean_sq < 0.16, "suggestions not front-seeking: E[y²] = {mean_sq}");
    }

    #[test]
    fn pareto_front_hand_example() {
        let trials = vec![
            trial(0, &[("x0", 0.0)], &[1.0, 3.0]),
            trial(1, &[("x0", 0.0)], &[2.0, 2.0]),
            trial(2, &[("x0", 0.0)], &[3.0, 1.0]),
            trial(3, &[("x0", 0.0)], &[2.0, 3.0]),
        ];
        let front = pareto_front(&trials);
        let ids: Vec<usize> = front.iter().map(|t| t.trial_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn identical_points_are_all_kept() {
        let trials: Vec<Trial> =
            (0..5).map(|i| trial(i, &[("x0", 0.0)], &[2.0, 2.0])).collect();
        assert_eq!(pareto_front(&trials).len(), 5);
    }

    #[test]
    fn front_matches_quadratic_oracle() {
        let mut rng = stream_rng(23, 9);
        let trials: Vec<Trial> = (0..400)
            .map(|i| {
                let a: f64 = (rng.gen::<f64>() * 8.0).floor();
                let b: f64 = (rng.gen::<f64>() * 8.0).floor();
                trial(i, &[("x0", 0.0)], &[a, b])
            })
            .collect();
        let fast: Vec<usize> = pareto_front(&trials).iter().map(|t| t.trial_id).collect();
        let slow: Vec<usize> = trials
            .iter()
            .filter(|t| !trials.iter().any(|o| o.trial_id != t.trial_id && dominates(o, t)))
            .map(|t| t.trial_id)
            .collect();
        assert_eq!(fast, slow);
    }

    #[test]
    fn stage2_rule_hand_example() {
        let front = vec![
            trial(0, &[("k_min", 1.0)], &[-100.0, 5000.0]),
            trial(1, &[("k_min", 1.0)], &[-99.97, 2000.0]),
            trial(2, &[("k_min", 1.0)], &[-90.0, 100.0]),
        ];
        let chosen = stage2_select(&front, 12_000.0, 0.0005).unwrap();
        assert_eq!(chosen.trial_id, 1);

        let single = vec![trial(4, &[("k_min", 1.0)], &[-50.0, 900.0])];
        assert_eq!(stage2_select(&single, 12_000.0, 0.0005).unwrap().trial_id, 4);

        let over = vec![
            trial(0, &[("k_min", 1.0)], &[-100.0, 12_000.0]),
            trial(1, &[("k_min", 1.0)], &[-99.0, 15_000.0]),
        ];
        assert!(matches!(stage2_select(&over, 12_000.0, 0.0005), Err(Error::NoFeasible)));
    }

    fn identical_worms(n_worms: usize, n_nuclei: usize) -> Vec<Worm<f64>> {
        let mut rng = stream_rng(31, 10);
        let base: Vec<[f64; 3]> = (0..n_nuclei)
            .map(|_| [rng.gen_range(-9.0..9.0), rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)])
            .collect();
        (0..n_worms)
            .map(|w| Worm {
                worm_id: format!("worm-{w:02}"),
                nuclei: base
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Nucleus { id: i, centroid: c, radii: [1.0, 0.9, 0.8] })
                    .collect(),
                gt_labels: None,
            })
            .collect()
    }

    #[test]
    fn noise_free_worms_reach_the_floor_loss() {
        let worms = identical_worms(4, 6);
        let cfg = LearnConfig {
            n_learn: 4,
            trials_per_stage: [12, 12, 8],
            seed: 3,
            ..LearnConfig::default()
        };
        let out = learn_parameters(&worms, &cfg).unwrap();
        // 6 worm pairs × 6 nuclei, all retained by synchronization.
        let floor = -(6.0 * 6.0);
        for stage in 1..=3 {
            let best = out
                .trial_log
                .iter()
                .filter(|r| r.stage == stage)
                .map(|r| r.objectives[0])
                .fold(f64::INFINITY, f64::min);
            assert_eq!(best, floor, "stage {stage} missed the floor");
        }
        out.sigmas.validate().unwrap();
        out.sparsity.validate().unwrap();
        assert_eq!(out.trial_log.len(), 12 + 12 + 8);
    }

    #[test]
    fn stage2_density_objective_stays_under_the_cap() {
        let worms = identical_worms(4, 6);
        let cfg = LearnConfig {
            n_learn: 4,
            trials_per_stage: [10, 10, 6],
            seed: 5,
            ..LearnConfig::default()
        };
        let out = learn_parameters(&worms, &cfg).unwrap();
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let selected: Vec<&Worm<f64>> = worms.iter().collect();
        let (_, n_lin) =
            evaluate(&selected, &out.sigmas, &weights, &out.sparsity, cfg.loss_kind, 5).unwrap();
        assert!(n_lin < cfg.n_lin_cap);
    }

    #[test]
    fn learning_is_deterministic() {
        let worms = identical_worms(4, 5);
        let cfg = LearnConfig {
            n_learn: 4,
            trials_per_stage: [11, 11, 6],
            seed: 9,
            ..LearnConfig::default()
        };
        let a = learn_parameters(&worms, &cfg).unwrap();
        let b = learn_parameters(&worms, &cfg).unwrap();
        assert_eq!(a.sigmas, b.sigmas);
        assert_eq!(a.sparsity.k_min, b.sparsity.k_min);
        assert_eq!(a.sparsity.tau_cen, b.sparsity.tau_cen);
        assert_eq!(a.sparsity.tau_rad, b.sparsity.tau_rad);
        for (x, y) in a.trial_log.iter().zip(&b.trial_log) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.objectives, y.objectives);
        }
    }

    #[test]
    fn cycle_loss_kind_also_runs() {
        let worms = identical_worms(4, 5);
        let cfg = LearnConfig {
            n_learn: 4,
            trials_per_stage: [10, 10, 6],
            seed: 2,
            loss_kind: LossKind::DiscreteCycle,
            ..LearnConfig::default()
        };
        let out = learn_parameters(&worms, &cfg).unwrap();
        let best = out
            .trial_log
            .iter()
            .filter(|r| r.stage == 3)
            .map(|r| r.objectives[0])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 0.0, "identical worms must admit a cycle-consistent matching");
    }

    #[test]
    fn too_few_worms_are_rejected() {
        let worms = identical_worms(2, 5);
        assert!(learn_parameters(&worms, &LearnConfig::default()).is_err());
    }
}
