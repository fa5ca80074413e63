//! Sparse quadratic graph matching: multi-start best-improvement local
//! search, plus an exhaustive oracle for small instances.
//!
//! Each restart starts from the assignment that is optimal for the linear
//! costs alone; restarts after the first drop a random tenth of those pairs
//! before searching. When a tenth rounds down to fewer pairs than there are
//! restarts, the drop counts spread out up to a full rebuild instead, so
//! tiny instances still explore distinct basins. Move deltas come from
//! cached per-assignment incident sums, so scoring a relabel costs no pair
//! evaluations and scoring a swap costs four. On instances small enough
//! that the extra scan is negligible, the neighborhood also includes
//! evictions: one left node takes an occupied right while the displaced
//! holder relabels to a free right or drops out.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{lap_from_instance, Matching};
use crate::costs::GmInstance;
use crate::error::{Error, Result};
use crate::scalar::{fcmp, Real};

/// Independent RNG stream derived from one master seed.
///
/// Every randomized stage keys its draws by (seed, stream) so results do not
/// depend on scheduling or worker count.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct GmConfig {
    pub restarts: usize,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for GmConfig {
    fn default() -> Self {
        Self { restarts: 4, max_sweeps: 400, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GmSolution<F: Real> {
    pub matching: Matching,
    pub objective: F,
    /// Total local-search sweeps across restarts.
    pub iterations: usize,
    pub restarts_used: usize,
}

/// Pair-cost evaluation counts, split because cache construction is a
/// per-restart cost while sweeps repeat.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub init_evals: u64,
    pub sweep_evals: u64,
    pub sweeps: usize,
}

/// Value of the matching under the instance's costs:
/// sum of selected linear entries plus every unordered matched pair's
/// quadratic cost.
pub fn gm_objective<F: Real>(inst: &GmInstance<F>, m: &Matching) -> Result<F> {
    let mut total = F::zero();
    for &(i, s) in &m.pairs {
        total = total
            + inst
                .allowed_cost(i, s)
                .ok_or(Error::ForbiddenPair { left: i, right: s })?;
    }
    for (a, &(i, s)) in m.pairs.iter().enumerate() {
        for &(j, t) in &m.pairs[a + 1..] {
            total = total + inst.quad_cost(i, s, j, t);
        }
    }
    Ok(total)
}

/// Widest instance side on which eviction moves are scanned; their sweep
/// cost grows with the row fill, so large instances stay on relabels and
/// swaps alone.
const EVICTION_BOUND: usize = 16;

#[derive(Debug, Clone, Copy)]
enum Move {
    Set { left: usize, to: Option<usize> },
    Swap { left_a: usize, left_b: usize },
    /// `left` takes the occupied right `to`; the displaced holder moves to
    /// `evicted_to` (a free right) or becomes unassigned.
    Evict { left: usize, to: usize, evicted_to: Option<usize> },
}

/// Local-search state: assignment plus incident quadratic sums.
///
/// `inc[i][k]` is the sum of pair costs between the hypothetical assignment
/// (i, allowed[i][k]) and every currently matched left node other than i.
struct Search<'a, F: Real> {
    inst: &'a GmInstance<F>,
    forward: Vec<Option<usize>>,
    backward: Vec<Option<usize>>,
    inc: Vec<Vec<F>>,
    evals: u64,
}

fn slot<F: Real>(row: &[(usize, F)], s: usize) -> Option<usize> {
    row.binary_search_by(|&(r, _)| r.cmp(&s)).ok()
}

impl<'a, F: Real> Search<'a, F> {
    fn new(inst: &'a GmInstance<F>, m: &Matching) -> Self {
        let mut search = Self {
            inst,
            forward: vec![None; inst.n_left],
            backward: vec![None; inst.n_right],
            inc: inst
                .allowed
                .iter()
                .map(|row| vec![F::zero(); row.len()])
                .collect(),
            evals: 0,
        };
        for &(i, s) in &m.pairs {
            search.apply_set(i, Some(s));
        }
        search
    }

    fn q(&mut self, i: usize, s: usize, j: usize, t: usize) -> F {
        self.evals += 1;
        self.inst.quad_cost(i, s, j, t)
    }

    fn linear(&self, i: usize, k: usize) -> F {
        self.inst.allowed[i][k].1
    }

    /// Reassign one left node, keeping every inc row consistent.
    fn apply_set(&mut self, i: usize, to: Option<usize>) {
        let from = self.forward[i];
        if from == to {
            return;
        }
        if self.inst.has_quadratic() {
            for l in 0..self.inst.n_left {
                if l == i {
                    continue;
                }
                for k in 0..self.inst.allowed[l].len() {
                    let s_k = self.inst.allowed[l][k].0;
                    if let Some(s) = from {
                        let d = self.q(l, s_k, i, s);
                        self.inc[l][k] = self.inc[l][k] - d;
                    }
                    if let Some(s) = to {
                        let d = self.q(l, s_k, i, s);
                        self.inc[l][k] = self.inc[l][k] + d;
                    }
                }
            }
        }
        if let Some(s) = from {
            self.backward[s] = None;
        }
        if let Some(s) = to {
            debug_assert!(self.backward[s].is_none() || self.backward[s] == Some(i));
            self.backward[s] = Some(i);
        }
        self.forward[i] = to;
    }

    fn apply(&mut self, mv: Move) {
        match mv {
            Move::Set { left, to } => self.apply_set(left, to),
            Move::Swap { left_a, left_b } => {
                let s = self.forward[left_a];
                let t = self.forward[left_b];
                self.apply_set(left_a, None);
                self.apply_set(left_b, None);
                self.apply_set(left_a, t);
                self.apply_set(left_b, s);
            }
            Move::Evict { left, to, evicted_to } => {
                let holder = self.backward[to].expect("eviction target stays occupied");
                self.apply_set(holder, None);
                self.apply_set(left, Some(to));
                self.apply_set(holder, evicted_to);
            }
        }
    }

    /// Best strictly improving move, scanning relabels, unassignments,
    /// swaps of two matched lefts and (on small instances) evictions. Ties
    /// keep the first candidate in scan order, so sweeps are deterministic.
    fn best_move(&mut self) -> Option<(F, Move)> {
        let evictions = self.inst.n_left.max(self.inst.n_right) <= EVICTION_BOUND;
        let mut best: Option<(F, Move)> = None;
        let consider = |delta: F, mv: Move, best: &mut Option<(F, Move)>| {
            let improves = match best {
                Some((d, _)) => fcmp(&delta, d) == std::cmp::Ordering::Less,
                None => true,
            };
            if improves {
                *best = Some((delta, mv));
            }
        };
        for i in 0..self.inst.n_left {
            let cur = self.forward[i];
            let cur_term = cur.map(|s| {
                let k = slot(&self.inst.allowed[i], s).expect("assignment stays allowed");
                self.linear(i, k) + self.inc[i][k]
            });
            if let Some(term) = cur_term {
                consider(-term, Move::Set { left: i, to: None }, &mut best);
            }
            for k in 0..self.inst.allowed[i].len() {
                let (t, c_t) = self.inst.allowed[i][k];
                if cur == Some(t) {
                    continue;
                }
                let new_term = c_t + self.inc[i][k];
                match self.backward[t] {
                    None => {
                        let delta = new_term - cur_term.unwrap_or_else(F::zero);
                        consider(delta, Move::Set { left: i, to: Some(t) }, &mut best);
                    }
                    Some(j) => {
                        let k_jt =
                            slot(&self.inst.allowed[j], t).expect("assignment stays allowed");
                        if evictions {
                            // i takes t; the holder j relabels to a free
                            // right or drops out. j landing on i's old
                            // right is the swap below, never generated
                            // here (that right is still occupied).
                            let hold = self.linear(j, k_jt) + self.inc[j][k_jt];
                            // inc rows count the holder at t (and i at its
                            // old right); correct both out of the sums.
                            let shared = self.q(i, t, j, t);
                            let cross_old = match cur {
                                Some(s) => self.q(i, s, j, t),
                                None => F::zero(),
                            };
                            let base = new_term - cur_term.unwrap_or_else(F::zero) - hold
                                - shared
                                + cross_old;
                            consider(
                                base,
                                Move::Evict { left: i, to: t, evicted_to: None },
                                &mut best,
                            );
                            for k_u in 0..self.inst.allowed[j].len() {
                                let (u, c_u) = self.inst.allowed[j][k_u];
                                if self.backward[u].is_some() {
                                    continue;
                                }
                                let cross_new = self.q(i, t, j, u);
                                let cross_cur = match cur {
                                    Some(s) => self.q(i, s, j, u),
                                    None => F::zero(),
                                };
                                let delta =
                                    base + c_u + self.inc[j][k_u] + cross_new - cross_cur;
                                consider(
                                    delta,
                                    Move::Evict { left: i, to: t, evicted_to: Some(u) },
                                    &mut best,
                                );
                            }
                        }
                        // Swap candidate; visit each unordered pair once.
                        if j <= i || cur.is_none() {
                            continue;
                        }
                        let s = cur.unwrap();
                        let Some(k_js) = slot(&self.inst.allowed[j], s) else {
                            continue;
                        };
                        let linear_delta = c_t + self.linear(j, k_js)
                            - cur_term.unwrap()
                            - (self.linear(j, k_jt) + self.inc[j][k_jt])
                            + self.inc[i][k]
                            + self.inc[j][k_js];
                        // inc rows include the partner at its pre-swap spot
                        // (and the degenerate shared-right terms); correct
                        // both out and add the post-swap pair cost.
                        let correction = self.q(i, t, j, s) + self.q(i, s, j, t)
                            - self.q(i, t, j, t)
                            - self.q(i, s, j, s);
                        consider(
                            linear_delta + correction,
                            Move::Swap { left_a: i, left_b: j },
                            &mut best,
                        );
                    }
                }
            }
        }
        best
    }

    fn matching(&self) -> Matching {
        let pairs = self
            .forward
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .collect();
        Matching { pairs, n_left: self.inst.n_left, n_right: self.inst.n_right }
    }
}

fn improvement_threshold<F: Real>(objective: F) -> F {
    F::cast(-1e-9) * (F::one() + objective.abs())
}

/// One restart of local search from `start`; returns the final matching with
/// its exactly recomputed objective and the sweep count.
fn run_restart<F: Real>(
    inst: &GmInstance<F>,
    start: Matching,
    max_sweeps: usize,
    stats: &mut SolveStats,
) -> (Matching, F, usize) {
    let mut search = Search::new(inst, &start);
    stats.init_evals += search.evals;
    search.evals = 0;
    let mut objective = gm_objective(inst, &start).expect("initialization stays allowed");
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let Some((delta, mv)) = search.best_move() else {
            break;
        };
        if fcmp(&delta, &improvement_threshold(objective)) != std::cmp::Ordering::Less {
            break;
        }
        search.apply(mv);
        objective = objective + delta;
        sweeps += 1;
    }
    stats.sweep_evals += search.evals;
    stats.sweeps += sweeps;
    let matching = search.matching();
    let objective = gm_objective(inst, &matching).expect("search stays inside allowed set");
    (matching, objective, sweeps)
}

fn perturb(m: &mut Matching, seed: u64, restart: u64, restarts: usize) {
    if m.pairs.is_empty() {
        return;
    }
    let mut rng = stream_rng(seed, restart);
    let len = m.pairs.len();
    let base = ((len as f64) * 0.1).round().max(1.0) as usize;
    // A tenth of a tiny matching cannot hand each restart its own basin;
    // below that regime the drop counts spread out to a full rebuild.
    let drop = if base < restarts {
        base.max((len * restart as usize).div_ceil(restarts.saturating_sub(1).max(1)))
    } else {
        base
    };
    let dropped = rand::seq::index::sample(&mut rng, len, drop.min(len));
    let dropped: std::collections::BTreeSet<usize> = dropped.into_iter().collect();
    m.pairs = m
        .pairs
        .iter()
        .enumerate()
        .filter(|(idx, _)| !dropped.contains(idx))
        .map(|(_, &p)| p)
        .collect();
}

/// Heuristic minimization of the instance objective.
///
/// Guarantees: never worse than the linear-assignment initialization,
/// uniqueness on both sides, and bit-identical output for a fixed seed.
pub fn solve_gm<F: Real>(inst: &GmInstance<F>, cfg: &GmConfig) -> GmSolution<F> {
    solve_gm_instrumented(inst, cfg).0
}

pub fn solve_gm_instrumented<F: Real>(
    inst: &GmInstance<F>,
    cfg: &GmConfig,
) -> (GmSolution<F>, SolveStats) {
    let (init, _) = lap_from_instance(inst);
    let init_objective = gm_objective(inst, &init).expect("LAP stays inside allowed set");
    if !inst.has_quadratic() {
        let solution = GmSolution {
            matching: init,
            objective: init_objective,
            iterations: 0,
            restarts_used: 1,
        };
        return (solution, SolveStats::default());
    }

    let mut stats = SolveStats::default();
    let restarts = cfg.restarts.max(1);
    let mut best: Option<(F, Matching, usize)> = None;
    let mut total_sweeps = 0;
    for r in 0..restarts {
        let mut start = init.clone();
        if r > 0 {
            perturb(&mut start, cfg.seed, r as u64, restarts);
        }
        let (matching, objective, sweeps) = run_restart(inst, start, cfg.max_sweeps, &mut stats);
        total_sweeps += sweeps;
        let better = match &best {
            Some((obj, _, _)) => fcmp(&objective, obj) == std::cmp::Ordering::Less,
            None => true,
        };
        if better {
            best = Some((objective, matching, r));
        }
    }
    let (mut objective, mut matching, _) = best.expect("at least one restart");
    // Float drift must not let a restart land above its own initialization.
    if fcmp(&objective, &init_objective) == std::cmp::Ordering::Greater {
        objective = init_objective;
        matching = init;
    }
    let solution = GmSolution {
        matching,
        objective,
        iterations: total_sweeps,
        restarts_used: restarts,
    };
    (solution, stats)
}

const BRUTE_FORCE_BOUND: usize = 8;

/// Global optimum by exhaustive enumeration of partial injective maps.
pub fn brute_force_gm<F: Real>(inst: &GmInstance<F>) -> Result<GmSolution<F>> {
    if inst.n_left.max(inst.n_right) > BRUTE_FORCE_BOUND {
        return Err(Error::TooLarge {
            n_left: inst.n_left,
            n_right: inst.n_right,
            bound: BRUTE_FORCE_BOUND,
        });
    }
    let mut best_objective = F::zero();
    let mut best_pairs: Vec<(usize, usize)> = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut used: u16 = 0;
    recurse(
        inst,
        0,
        F::zero(),
        &mut stack,
        &mut used,
        &mut best_objective,
        &mut best_pairs,
    );
    Ok(GmSolution {
        matching: Matching {
            pairs: best_pairs,
            n_left: inst.n_left,
            n_right: inst.n_right,
        },
        objective: best_objective,
        iterations: 0,
        restarts_used: 0,
    })
}

fn recurse<F: Real>(
    inst: &GmInstance<F>,
    i: usize,
    objective: F,
    stack: &mut Vec<(usize, usize)>,
    used: &mut u16,
    best_objective: &mut F,
    best_pairs: &mut Vec<(usize, usize)>,
) {
    if i == inst.n_left {
        if fcmp(&objective, best_objective) == std::cmp::Ordering::Less {
            *best_objective = objective;
            *best_pairs = stack.clone();
        }
        return;
    }
    recurse(inst, i + 1, objective, stack, used, best_objective, best_pairs);
    for &(s, c) in &inst.allowed[i] {
        if *used & (1 << s) != 0 {
            continue;
        }
        let mut added = c;
        for &(j, t) in stack.iter() {
            added = added + inst.quad_cost(j, t, i, s);
        }
        stack.push((i, s));
        *used |= 1 << s;
        recurse(inst, i + 1, objective + added, stack, used, best_objective, best_pairs);
        *used &= !(1 << s);
        stack.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::QuadCosts;
    use std::collections::BTreeMap;

    fn table_instance(
        n_left: usize,
        n_right: usize,
        linear: &[(usize, usize, f64)],
        quad: &[(usize, usize, usize, usize, f64)],
    ) -> GmInstance<f64> {
        let mut allowed = vec![Vec::new(); n_left];
        for &(i, s, c) in linear {
            allowed[i].push((s, c));
        }
        for row in &mut allowed {
            row.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let quad = if quad.is_empty() {
            QuadCosts::None
        } else {
            let mut table = BTreeMap::new();
            for &(i, s, j, t, v) in quad {
                assert!(i < j);
                table.insert((i, s, j, t), v);
            }
            QuadCosts::Table(table)
        };
        GmInstance { n_left, n_right, c0: 0.0, allowed, quad }
    }

    fn random_instance(rng: &mut ChaCha8Rng, n_left: usize, n_right: usize) -> GmInstance<f64> {
        let mut allowed = vec![Vec::new(); n_left];
        for row in allowed.iter_mut() {
            for s in 0..n_right {
                if rng.gen_bool(0.8) {
                    row.push((s, rng.gen_range(-2.0..1.0)));
                }
            }
        }
        let mut table = BTreeMap::new();
        for i in 0..n_left {
            for j in i + 1..n_left {
                for &(s, _) in &allowed[i] {
                    for &(t, _) in &allowed[j] {
                        if s != t && rng.gen_bool(0.5) {
                            table.insert((i, s, j, t), rng.gen_range(-1.0..1.0));
                        }
                    }
                }
            }
        }
        GmInstance { n_left, n_right, c0: 0.0, allowed, quad: QuadCosts::Table(table) }
    }

    #[test]
    fn objective_of_empty_matching_is_zero() {
        let inst = table_instance(2, 2, &[(0, 0, -1.0), (1, 1, -1.0)], &[]);
        let m = Matching::empty(2, 2);
        assert_eq!(gm_objective(&inst, &m).unwrap(), 0.0);
    }

    #[test]
    fn objective_of_single_pair_is_its_linear_cost() {
        let inst = table_instance(2, 2, &[(0, 1, -3.5), (1, 0, 2.0)], &[]);
        let m = Matching { pairs: vec![(0, 1)], n_left: 2, n_right: 2 };
        assert_eq!(gm_objective(&inst, &m).unwrap(), -3.5);
    }

    #[test]
    fn objective_rejects_forbidden_assignments() {
        let inst = table_instance(2, 2, &[(0, 0, -1.0)], &[]);
        let m = Matching { pairs: vec![(0, 1)], n_left: 2, n_right: 2 };
        match gm_objective(&inst, &m) {
            Err(Error::ForbiddenPair { left: 0, right: 1 }) => {}
            other => panic!("expected ForbiddenPair, got {other:?}"),
        }
    }

    #[test]
    fn objective_matches_materialized_recomputation() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..50 {
            let inst = random_instance(&mut rng, 5, 6);
            let dense = inst.materialized();
            let (m, _) = lap_from_instance(&inst);
            let a = gm_objective(&inst, &m).unwrap();
            let b = gm_objective(&dense, &m).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_quadratic_part_reduces_to_lap() {
        let mut rng = stream_rng(7, 0);
        for _ in 0..50 {
            let mut inst = random_instance(&mut rng, 6, 6);
            inst.quad = QuadCosts::None;
            let (lap, lap_obj) = lap_from_instance(&inst);
            let sol = solve_gm(&inst, &GmConfig::default());
            assert_eq!(sol.matching.pairs, lap.pairs);
            assert!((sol.objective - lap_obj).abs() < 1e-12);
            assert_eq!(sol.iterations, 0);
        }
    }

    #[test]
    fn quadratic_reward_flips_to_the_swapped_pair() {
        // Linear part slightly favors the identity; the pair term pays much
        // more for the crossed assignment.
        let inst = table_instance(
            2,
            2,
            &[(0, 0, -1.1), (0, 1, -1.0), (1, 0, -1.0), (1, 1, -1.1)],
            &[(0, 1, 1, 0, -5.0), (0, 0, 1, 1, 0.5)],
        );
        let brute = brute_force_gm(&inst).unwrap();
        assert_eq!(brute.matching.pairs, vec![(0, 1), (1, 0)]);
        assert!((brute.objective - (-7.0)).abs() < 1e-12);
        let sol = solve_gm(&inst, &GmConfig::default());
        assert_eq!(sol.matching.pairs, brute.matching.pairs);
        assert!((sol.objective - brute.objective).abs() < 1e-9);
    }

    #[test]
    fn brute_force_handles_trivial_and_oversized_instances() {
        let inst = table_instance(1, 1, &[(0, 0, -5.0)], &[]);
        let sol = brute_force_gm(&inst).unwrap();
        assert_eq!(sol.matching.pairs, vec![(0, 0)]);
        assert_eq!(sol.objective, -5.0);

        let big = table_instance(9, 2, &[], &[]);
        match brute_force_gm(&big) {
            Err(Error::TooLarge { n_left: 9, n_right: 2, bound: 8 }) => {}
            other => panic!("expected TooLarge, got {other:?}"),
        }
    }

    #[test]
    fn brute_force_agrees_with_lap_when_quadratic_is_zero() {
        let mut rng = stream_rng(23, 0);
        for _ in 0..50 {
            let mut inst = random_instance(&mut rng, 5, 5);
            inst.quad = QuadCosts::None;
            let (_, lap_obj) = lap_from_instance(&inst);
            let brute = brute_force_gm(&inst).unwrap();
            assert!(
                (brute.objective - lap_obj).abs() < 1e-9,
                "{} vs {lap_obj}",
                brute.objective
            );
        }
    }

    #[test]
    fn search_never_lands_above_its_initialization() {
        let mut rng = stream_rng(31, 0);
        for _ in 0..30 {
            let inst = random_instance(&mut rng, 7, 7);
            let (init, _) = lap_from_instance(&inst);
            let init_obj = gm_objective(&inst, &init).unwrap();
            let sol = solve_gm(&inst, &GmConfig { restarts: 3, ..Default::default() });
            assert!(sol.objective <= init_obj + 1e-9);
            assert!(sol.matching.is_valid());
            assert!(gm_objective(&inst, &sol.matching).is_ok());
        }
    }

    fn random_matching(rng: &mut ChaCha8Rng, inst: &GmInstance<f64>) -> Matching {
        let mut used = vec![false; inst.n_right];
        let mut pairs = Vec::new();
        for i in 0..inst.n_left {
            let open: Vec<usize> = inst.allowed[i]
                .iter()
                .map(|&(s, _)| s)
                .filter(|&s| !used[s])
                .collect();
            if open.is_empty() || rng.gen_bool(0.3) {
                continue;
            }
            let s = open[rng.gen_range(0..open.len())];
            used[s] = true;
            pairs.push((i, s));
        }
        Matching { pairs, n_left: inst.n_left, n_right: inst.n_right }
    }

    #[test]
    fn applied_move_deltas_match_recomputation() {
        let mut rng = stream_rng(67, 0);
        for round in 0..30 {
            let inst = random_instance(&mut rng, 8, 8);
            let start = random_matching(&mut rng, &inst);
            let mut search = Search::new(&inst, &start);
            let mut objective = gm_objective(&inst, &search.matching()).unwrap();
            while let Some((delta, mv)) = search.best_move() {
                if fcmp(&delta, &improvement_threshold(objective)) != std::cmp::Ordering::Less {
                    break;
                }
                search.apply(mv);
                let actual = gm_objective(&inst, &search.matching()).unwrap();
                assert!(
                    (objective + delta - actual).abs() < 1e-9,
                    "round {round}: promised delta {delta}, got {}",
                    actual - objective
                );
                objective = actual;
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_solutions() {
        let mut rng = stream_rng(47, 0);
        let inst = random_instance(&mut rng, 8, 8);
        let cfg = GmConfig { restarts: 5, max_sweeps: 200, seed: 99 };
        let a = solve_gm(&inst, &cfg);
        let b = solve_gm(&inst, &cfg);
        assert_eq!(a.matching.pairs, b.matching.pairs);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn solution_objective_matches_recomputation() {
        let mut rng = stream_rng(53, 0);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 6, 7);
            let sol = solve_gm(&inst, &GmConfig { restarts: 2, ..Default::default() });
            let recomputed = gm_objective(&inst, &sol.matching).unwrap();
            assert!((sol.objective - recomputed).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_evaluation_count_stays_within_the_size_bound() {
        // Per sweep: at most 4 pair evaluations per swap candidate plus a
        // full cache refresh per accepted move, both within 16·|S|·L̄².
        for n in [8usize, 16, 32] {
            let mut rng = stream_rng(61, n as u64);
            let inst = random_instance(&mut rng, n, n);
            let (_, stats) =
                solve_gm_instrumented(&inst, &GmConfig { restarts: 1, ..Default::default() });
            if stats.sweeps == 0 {
                continue;
            }
            let size = inst.num_allowed() as f64;
            let mean_row = size / n as f64;
            let bound = 16.0 * size * mean_row * mean_row * stats.sweeps as f64;
            assert!(
                (stats.sweep_evals as f64) <= bound,
                "n={n}: {} evals over {} sweeps exceeds {bound}",
                stats.sweep_evals,
                stats.sweeps
            );
        }
    }
}
