//! Joining pairwise matchings across many worms: cycle-consistency loss,
//! greedy synchronization into consistent cliques, and reference-worm
//! selection.
//!
//! A chain s→t→u over a worm triple is broken when the direct matching does
//! not send s to u. The loss counts broken chains over the three cyclic
//! rotations of every ascending worm triple, so each two-edge path is
//! examined exactly once.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::assignment::{lap_from_instance, Matching};
use crate::costs::{build_pairwise_instance, CostWeights, SharedCovariances, SparsityParams};
use crate::error::{Error, Result};
use crate::geometry::Worm;
use crate::scalar::{fcmp, Real};

/// Pairwise matchings over a set of worms, keyed by ascending worm index.
#[derive(Debug, Clone, Default)]
pub struct MultiMatching {
    pub n_worms: usize,
    pub pairwise: BTreeMap<(usize, usize), Matching>,
}

impl MultiMatching {
    pub fn new(n_worms: usize) -> Self {
        Self { n_worms, pairwise: BTreeMap::new() }
    }

    pub fn insert(&mut self, a: usize, b: usize, m: Matching) {
        assert!(a < b && b < self.n_worms, "pair key must be ascending and in range");
        self.pairwise.insert((a, b), m);
    }

    pub fn get(&self, a: usize, b: usize) -> Option<&Matching> {
        self.pairwise.get(&(a, b))
    }

    pub fn total_matches(&self) -> usize {
        self.pairwise.values().map(Matching::len).sum()
    }

    /// Forward map x→y, inverting the stored matching when x > y.
    fn directed(&self, x: usize, y: usize) -> Option<Vec<Option<usize>>> {
        if x < y {
            self.pairwise.get(&(x, y)).map(Matching::forward)
        } else {
            self.pairwise.get(&(y, x)).map(Matching::backward)
        }
    }
}

/// Disjoint cliques of (worm index, nucleus index), at most one nucleus per
/// worm per clique. The pairwise matchings a universe induces are cycle
/// consistent by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Universe {
    pub cliques: Vec<Vec<(usize, usize)>>,
}

impl Universe {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for clique in &self.cliques {
            let mut worms = BTreeSet::new();
            for &(w, n) in clique {
                if !worms.insert(w) {
                    return Err(Error::InvalidInput(format!(
                        "clique holds two nuclei of worm {w}"
                    )));
                }
                if !seen.insert((w, n)) {
                    return Err(Error::InvalidInput(format!(
                        "nucleus ({w},{n}) appears in two cliques"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pairwise matchings implied by clique membership, covering every worm
    /// pair (empty where no clique spans it).
    pub fn induced(&self, sizes: &[usize]) -> MultiMatching {
        let n = sizes.len();
        let mut mm = MultiMatching::new(n);
        for a in 0..n {
            for b in a + 1..n {
                mm.insert(a, b, Matching::empty(sizes[a], sizes[b]));
            }
        }
        for clique in &self.cliques {
            for (idx, &(a, i)) in clique.iter().enumerate() {
                for &(b, j) in &clique[idx + 1..] {
                    debug_assert!(a < b, "clique members sorted by worm");
                    let m = mm.pairwise.get_mut(&(a, b)).expect("all pairs present");
                    m.pairs.push((i, j));
                }
            }
        }
        for m in mm.pairwise.values_mut() {
            m.pairs.sort_unstable();
        }
        mm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub inconsistent_triples: usize,
    pub total_triples_checked: usize,
}

/// Count broken transitive chains over all ascending worm triples and their
/// three cyclic rotations. A chain is checked when its two hops exist; it is
/// broken when the closing matching disagrees or is absent.
pub fn discrete_cycle_loss(mm: &MultiMatching) -> Result<CycleReport> {
    let n = mm.n_worms;
    for a in 0..n {
        for b in a + 1..n {
            if !mm.pairwise.contains_key(&(a, b)) {
                return Err(Error::MissingPair { a, b });
            }
        }
    }
    let mut maps: BTreeMap<(usize, usize), Vec<Option<usize>>> = BTreeMap::new();
    for x in 0..n {
        for y in 0..n {
            if x != y {
                maps.insert((x, y), mm.directed(x, y).expect("coverage checked"));
            }
        }
    }
    let mut inconsistent = 0;
    let mut total = 0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for (x, y, z) in [(a, b, c), (b, c, a), (c, a, b)] {
                    let xy = &maps[&(x, y)];
                    let yz = &maps[&(y, z)];
                    let xz = &maps[&(x, z)];
                    for (s, &t) in xy.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let Some(u) = yz[t] else { continue };
                        total += 1;
                        if xz[s] != Some(u) {
                            inconsistent += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(CycleReport { inconsistent_triples: inconsistent, total_triples_checked: total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncMode {
    Dense,
    Sparse,
}

/// Heap key: prefer higher support, then lower cost, then lower edge id.
struct EdgeKey {
    support: usize,
    cost: f64,
    id: usize,
}

impl PartialEq for EdgeKey {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for EdgeKey {}
impl PartialOrd for EdgeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EdgeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.support
            .cmp(&other.support)
            .then_with(|| fcmp(&other.cost, &self.cost))
            .then_with(|| other.id.cmp(&self.id))
    }
}

struct Cliques {
    parent: Vec<usize>,
    // Root-indexed; non-roots hold empty maps.
    members: Vec<BTreeMap<usize, usize>>,
    incident: Vec<Vec<usize>>,
}

impl Cliques {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// None when the union would put two nuclei of one worm in a clique.
    fn compatible(&self, ra: usize, rb: usize) -> bool {
        let (small, big) = if self.members[ra].len() <= self.members[rb].len() {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.members[small]
            .iter()
            .all(|(w, n)| self.members[big].get(w).is_none_or(|m| m == n))
    }

    fn union(&mut self, ra: usize, rb: usize) -> usize {
        let (root, child) = if self.members[ra].len() >= self.members[rb].len() {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[child] = root;
        let moved = std::mem::take(&mut self.members[child]);
        self.members[root].extend(moved);
        let moved_edges = std::mem::take(&mut self.incident[child]);
        self.incident[root].extend(moved_edges);
        root
    }
}

/// Caps speculative plateau probing per synchronize call; small instances
/// explore exhaustively, large ones stay near-linear in the edge count.
const PLATEAU_PROBES: usize = 20_000;

#[derive(Clone, Copy)]
enum Move {
    /// Move `x` into clique `to` (no nucleus of x's worm there).
    Relocate { x: usize, to: usize },
    /// Move `x` into `to`, displacing blocker `b` into `b_to` (fresh
    /// singleton when None).
    Replace { x: usize, to: usize, b: usize, b_to: Option<usize> },
}

#[derive(Clone, Copy)]
struct Undo {
    mv: Move,
    /// x's clique before the move.
    from: usize,
}

/// Post-merge improvement state over materialized cliques. Nodes are flat
/// ids; `members` maps worm → nucleus per clique, so one-nucleus-per-worm
/// holds structurally.
struct Descent<'a> {
    ends: &'a [(usize, usize)],
    adj: &'a [Vec<usize>],
    node_wn: &'a [(usize, usize)],
    base: &'a [usize],
    mode: SyncMode,
    allowed: &'a dyn Fn(usize, usize, usize, usize) -> bool,
    members: Vec<BTreeMap<usize, usize>>,
    clique_of: Vec<usize>,
    /// Work budget for speculative plateau probes, per call.
    probes: usize,
}

impl Descent<'_> {
    /// Input edges from a node into a clique. Only edges incident to a moved
    /// node change retention, so move deltas reduce to gain differences.
    fn gain(&self, node: usize, cl: usize) -> isize {
        self.adj[node]
            .iter()
            .filter(|&&eid| {
                let (na, nb) = self.ends[eid];
                let other = if na == node { nb } else { na };
                self.clique_of[other] == cl
            })
            .count() as isize
    }

    /// Insertion legality: no second nucleus of the node's worm (`skip` is
    /// the member about to leave) and, in sparse mode, mask-allowed implied
    /// pairs.
    fn admits(&self, cl: usize, (w, n): (usize, usize), skip: Option<(usize, usize)>) -> bool {
        self.members[cl].iter().all(|(&w2, &n2)| {
            if skip == Some((w2, n2)) {
                return true;
            }
            if w2 == w {
                return false;
            }
            if self.mode != SyncMode::Sparse {
                return true;
            }
            let ((wa, na), (wb, nb)) =
                if w < w2 { ((w, n), (w2, n2)) } else { ((w2, n2), (w, n)) };
            (self.allowed)(wa, na, wb, nb)
        })
    }

    /// Canonical move drawing `x` toward `y`'s clique, with its retention
    /// delta: a relocation when the target has no nucleus of x's worm, else
    /// a replacement sending the blocker to its best other home (fresh
    /// singleton when no adjacent clique gains).
    fn side_move(&self, x: usize, y: usize) -> Option<(isize, Move)> {
        let (wx, nx) = self.node_wn[x];
        let k = self.clique_of[x];
        let l = self.clique_of[y];
        match self.members[l].get(&wx).copied() {
            None => {
                if !self.admits(l, (wx, nx), None) {
                    return None;
                }
                let delta = self.gain(x, l) - self.gain(x, k);
                Some((delta, Move::Relocate { x, to: l }))
            }
            Some(nbl) => {
                if !self.admits(l, (wx, nx), Some((wx, nbl))) {
                    return None;
                }
                let b = self.base[wx] + nbl;
                let mut cands: BTreeSet<usize> = BTreeSet::new();
                for &e2 in &self.adj[b] {
                    let (ea, eb) = self.ends[e2];
                    let other = if ea == b { eb } else { ea };
                    cands.insert(self.clique_of[other]);
                }
                let mut best: (isize, Option<usize>) = (0, None);
                for cand in cands {
                    if cand == l {
                        continue;
                    }
                    let skip = if cand == k { Some((wx, nx)) } else { None };
                    if !self.admits(cand, (wx, nbl), skip) {
                        continue;
                    }
                    let g = self.gain(b, cand);
                    if g > best.0 {
                        best = (g, Some(cand));
                    }
                }
                let delta =
                    self.gain(x, l) - self.gain(x, k) + best.0 - self.gain(b, l);
                Some((delta, Move::Replace { x, to: l, b, b_to: best.1 }))
            }
        }
    }

    fn do_move(&mut self, mv: Move) -> Undo {
        match mv {
            Move::Relocate { x, to } => {
                let (wx, nx) = self.node_wn[x];
                let from = self.clique_of[x];
                self.members[from].remove(&wx);
                self.members[to].insert(wx, nx);
                self.clique_of[x] = to;
                Undo { mv, from }
            }
            Move::Replace { x, to, b, b_to } => {
                let (wx, nx) = self.node_wn[x];
                let (_, nbl) = self.node_wn[b];
                let from = self.clique_of[x];
                // Same key wx: inserting x drops the blocker's entry.
                self.members[to].insert(wx, nx);
                self.members[from].remove(&wx);
                self.clique_of[x] = to;
                match b_to {
                    Some(cand) => {
                        self.members[cand].insert(wx, nbl);
                        self.clique_of[b] = cand;
                    }
                    None => {
                        self.members.push(BTreeMap::from([(wx, nbl)]));
                        self.clique_of[b] = self.members.len() - 1;
                    }
                }
                Undo { mv, from }
            }
        }
    }

    /// Valid only while the move is the latest applied one (a fresh
    /// singleton must still sit at the end of `members`).
    fn undo_move(&mut self, u: Undo) {
        match u.mv {
            Move::Relocate { x, to } => {
                let (wx, nx) = self.node_wn[x];
                self.members[to].remove(&wx);
                self.members[u.from].insert(wx, nx);
                self.clique_of[x] = u.from;
            }
            Move::Replace { x, to, b, b_to } => {
                let (wx, nx) = self.node_wn[x];
                let (_, nbl) = self.node_wn[b];
                match b_to {
                    Some(cand) => {
                        self.members[cand].remove(&wx);
                    }
                    None => {
                        self.members.pop();
                    }
                }
                self.clique_of[b] = to;
                self.members[to].insert(wx, nbl);
                self.members[u.from].insert(wx, nx);
                self.clique_of[x] = u.from;
            }
        }
    }

    /// Apply the first strictly improving move among `eids`.
    fn strict_pass(&mut self, eids: &[usize]) -> Option<Undo> {
        for &eid in eids {
            let (na, nb) = self.ends[eid];
            if self.clique_of[na] == self.clique_of[nb] {
                continue;
            }
            for (x, y) in [(na, nb), (nb, na)] {
                if let Some((delta, mv)) = self.side_move(x, y) {
                    if delta > 0 {
                        return Some(self.do_move(mv));
                    }
                }
            }
        }
        None
    }

    /// Edges incident to the cliques a move touched.
    fn local_eids(&self, u: &Undo) -> Vec<usize> {
        let mut cls = BTreeSet::new();
        cls.insert(u.from);
        match u.mv {
            Move::Relocate { to, .. } => {
                cls.insert(to);
            }
            Move::Replace { to, b, .. } => {
                cls.insert(to);
                cls.insert(self.clique_of[b]);
            }
        }
        let mut out = BTreeSet::new();
        for &c in &cls {
            for (&w, &n) in &self.members[c] {
                for &eid in &self.adj[self.base[w] + n] {
                    out.insert(eid);
                }
            }
        }
        out.into_iter().collect()
    }

    /// Zero-delta moves on the edge list, in scan order.
    fn plateau_moves(&self, eids: &[usize]) -> Vec<Move> {
        let mut out = Vec::new();
        for &eid in eids {
            let (na, nb) = self.ends[eid];
            if self.clique_of[na] == self.clique_of[nb] {
                continue;
            }
            for (x, y) in [(na, nb), (nb, na)] {
                if let Some((0, mv)) = self.side_move(x, y) {
                    out.push(mv);
                }
            }
        }
        out
    }

    /// Strict moves to a fixpoint, then plateau probes: a zero-delta move is
    /// kept only when a strictly improving local move follows, directly or
    /// after one further local zero-delta move. Every committed step raises
    /// the retained-match count, which with the probe budget bounds the
    /// loop.
    fn run(&mut self) {
        let all: Vec<usize> = (0..self.ends.len()).collect();
        loop {
            if self.strict_pass(&all).is_some() {
                continue;
            }
            let mut advanced = false;
            'plateau: for mv1 in self.plateau_moves(&all) {
                if self.probes == 0 {
                    break;
                }
                self.probes -= 1;
                let undo1 = self.do_move(mv1);
                let local1 = self.local_eids(&undo1);
                if self.strict_pass(&local1).is_some() {
                    advanced = true;
                    break 'plateau;
                }
                for mv2 in self.plateau_moves(&local1) {
                    if self.probes == 0 {
                        break;
                    }
                    self.probes -= 1;
                    let undo2 = self.do_move(mv2);
                    let mut scope = local1.clone();
                    scope.extend(self.local_eids(&undo2));
                    scope.sort_unstable();
                    scope.dedup();
                    if self.strict_pass(&scope).is_some() {
                        advanced = true;
                        break 'plateau;
                    }
                    self.undo_move(undo2);
                }
                self.undo_move(undo1);
            }
            if !advanced {
                break;
            }
        }
    }
}

/// Greedy synchronization: start from singleton cliques and merge along
/// input match edges, highest support first (cost, then edge id, break
/// ties). A merge happens only if the union keeps at most one nucleus per
/// worm and, in sparse mode, implies no pair outside the allowed mask.
/// A strict-improvement descent then relocates or substitutes one nucleus
/// at a time; every applied move raises the retained-match count, which
/// bounds the loop and repairs early greedy commitments.
///
/// Returns the universe of cliques with at least two members and the
/// pairwise matchings it induces. Missing input pairs count as empty.
pub fn synchronize<F: Real>(
    mm: &MultiMatching,
    sizes: &[usize],
    mode: SyncMode,
    allowed: impl Fn(usize, usize, usize, usize) -> bool,
    cost: impl Fn(usize, usize, usize, usize) -> F,
) -> (Universe, MultiMatching) {
    assert_eq!(sizes.len(), mm.n_worms, "one size per worm");
    // Flat node ids per (worm, nucleus).
    let mut base = vec![0usize; sizes.len()];
    let mut total_nodes = 0;
    for (w, &k) in sizes.iter().enumerate() {
        base[w] = total_nodes;
        total_nodes += k;
    }

    struct Edge {
        a: usize,
        i: usize,
        b: usize,
        j: usize,
        cost: f64,
    }
    let mut edges = Vec::new();
    for (&(a, b), m) in &mm.pairwise {
        for &(i, j) in &m.pairs {
            let c = cost(a, i, b, j).to_f64().unwrap_or(f64::INFINITY);
            edges.push(Edge { a, i, b, j, cost: c });
        }
    }

    let mut cliques = Cliques {
        parent: (0..total_nodes).collect(),
        members: Vec::with_capacity(total_nodes),
        incident: vec![Vec::new(); total_nodes],
    };
    for (w, &k) in sizes.iter().enumerate() {
        for n in 0..k {
            cliques.members.push(BTreeMap::from([(w, n)]));
        }
    }
    for (id, e) in edges.iter().enumerate() {
        cliques.incident[base[e.a] + e.i].push(id);
        cliques.incident[base[e.b] + e.j].push(id);
    }

    let mut support = vec![1usize; edges.len()];
    let mut done = vec![false; edges.len()];
    let mut heap: BinaryHeap<EdgeKey> = edges
        .iter()
        .enumerate()
        .map(|(id, e)| EdgeKey { support: 1, cost: e.cost, id })
        .collect();

    while let Some(key) = heap.pop() {
        let id = key.id;
        if done[id] || key.support != support[id] {
            continue;
        }
        done[id] = true;
        let e = &edges[id];
        let ra = cliques.find(base[e.a] + e.i);
        let rb = cliques.find(base[e.b] + e.j);
        if ra == rb {
            continue;
        }
        if !cliques.compatible(ra, rb) {
            continue;
        }
        if mode == SyncMode::Sparse {
            let ok = cliques.members[ra].iter().all(|(&w1, &n1)| {
                cliques.members[rb].iter().all(|(&w2, &n2)| {
                    let ((wa, na), (wb, nb)) =
                        if w1 < w2 { ((w1, n1), (w2, n2)) } else { ((w2, n2), (w1, n1)) };
                    allowed(wa, na, wb, nb)
                })
            });
            if !ok {
                continue;
            }
        }
        let root = cliques.union(ra, rb);
        // Supports of edges leaving the merged clique may have grown.
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let incident = cliques.incident[root].clone();
        let mut cross = Vec::new();
        for &eid in &incident {
            if done[eid] {
                continue;
            }
            let e = &edges[eid];
            let r1 = cliques.find(base[e.a] + e.i);
            let r2 = cliques.find(base[e.b] + e.j);
            if r1 == r2 {
                continue;
            }
            let other = if r1 == root { r2 } else { r1 };
            *counts.entry(other).or_insert(0) += 1;
            cross.push((eid, other));
        }
        for (eid, other) in cross {
            let s = counts[&other];
            if s != support[eid] {
                support[eid] = s;
                heap.push(EdgeKey { support: s, cost: edges[eid].cost, id: eid });
            }
        }
    }

    // Materialize the union-find state for the descent.
    let mut node_wn = Vec::with_capacity(total_nodes);
    for (w, &k) in sizes.iter().enumerate() {
        for n in 0..k {
            node_wn.push((w, n));
        }
    }
    let mut members: Vec<BTreeMap<usize, usize>> = Vec::new();
    let mut clique_of = vec![usize::MAX; total_nodes];
    let mut root_index: BTreeMap<usize, usize> = BTreeMap::new();
    for node in 0..total_nodes {
        let root = cliques.find(node);
        let idx = *root_index.entry(root).or_insert_with(|| {
            members.push(BTreeMap::new());
            members.len() - 1
        });
        let (w, n) = node_wn[node];
        members[idx].insert(w, n);
        clique_of[node] = idx;
    }

    let ends: Vec<(usize, usize)> =
        edges.iter().map(|e| (base[e.a] + e.i, base[e.b] + e.j)).collect();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); total_nodes];
    for (id, &(na, nb)) in ends.iter().enumerate() {
        adj[na].push(id);
        adj[nb].push(id);
    }

    let mut descent = Descent {
        ends: &ends,
        adj: &adj,
        node_wn: &node_wn,
        base: &base,
        mode,
        allowed: &allowed,
        members,
        clique_of,
        probes: PLATEAU_PROBES,
    };
    descent.run();

    let mut cliques_out: Vec<Vec<(usize, usize)>> = descent
        .members
        .iter()
        .filter(|m| m.len() >= 2)
        .map(|m| m.iter().map(|(&w, &n)| (w, n)).collect())
        .collect();
    cliques_out.sort_unstable();
    let universe = Universe { cliques: cliques_out };
    let induced = universe.induced(sizes);
    (universe, induced)
}

/// Per-pair count of input matches kept by the output.
fn retained_counts(mm_in: &MultiMatching, mm_out: &MultiMatching) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for (&key, m_in) in &mm_in.pairwise {
        let kept = match mm_out.pairwise.get(&key) {
            Some(m_out) => {
                let set: BTreeSet<(usize, usize)> = m_out.pairs.iter().copied().collect();
                m_in.pairs.iter().filter(|p| set.contains(p)).count()
            }
            None => 0,
        };
        counts.insert(key, kept);
    }
    counts
}

/// Negative count of input matches retained by a cycle-consistent output;
/// lower is better.
pub fn synchronization_loss(mm_in: &MultiMatching, mm_out: &MultiMatching) -> Result<f64> {
    let report = discrete_cycle_loss(mm_out)?;
    if report.inconsistent_triples > 0 {
        return Err(Error::InconsistentInput { broken: report.inconsistent_triples });
    }
    let retained: usize = retained_counts(mm_in, mm_out).values().sum();
    Ok(-(retained as f64))
}

/// Worm with the most retained matches after dense synchronization of plain
/// unit-covariance linear matchings; ties go to the lowest index.
pub fn select_reference_worm<F: Real>(worms: &[Worm<F>]) -> Result<usize> {
    if worms.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "reference selection needs at least 3 worms, got {}",
            worms.len()
        )));
    }
    // Large acceptance offset: no plausible pair should be rejected when
    // scoring worms with unlearned unit covariances.
    let c0 = F::cast(10_000.0);
    let weights = CostWeights::new(F::one(), F::one(), F::zero());
    let sigmas = SharedCovariances::identity();
    let sparsity = SparsityParams::dense();

    let n = worms.len();
    let sizes: Vec<usize> = worms.iter().map(Worm::len).collect();
    let mut instances = BTreeMap::new();
    let mut mm = MultiMatching::new(n);
    for a in 0..n {
        for b in a + 1..n {
            let inst = build_pairwise_instance(&worms[a], &worms[b], &weights, &sigmas, &sparsity, c0);
            let (m, _) = lap_from_instance(&inst);
            mm.insert(a, b, m);
            instances.insert((a, b), inst);
        }
    }
    let (_, mm_out) = synchronize(
        &mm,
        &sizes,
        SyncMode::Dense,
        |_, _, _, _| true,
        |a, i, b, j| instances[&(a, b)].allowed_cost(i, j).unwrap_or_else(F::zero),
    );
    let counts = retained_counts(&mm, &mm_out);
    let mut incident = vec![0usize; n];
    for (&(a, b), &kept) in &counts {
        incident[a] += kept;
        incident[b] += kept;
    }
    let best = incident
        .iter()
        .enumerate()
        .max_by(|(ia, va), (ib, vb)| va.cmp(vb).then(ib.cmp(ia)))
        .expect("at least 3 worms")
        .0;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm::stream_rng;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn identity_matching(n: usize) -> Matching {
        Matching { pairs: (0..n).map(|i| (i, i)).collect(), n_left: n, n_right: n }
    }

    /// Two identities and a swap over three 2-nucleus worms.
    fn swap_example() -> MultiMatching {
        let mut mm = MultiMatching::new(3);
        mm.insert(0, 1, identity_matching(2));
        mm.insert(1, 2, identity_matching(2));
        mm.insert(0, 2, Matching { pairs: vec![(0, 1), (1, 0)], n_left: 2, n_right: 2 });
        mm
    }

    fn random_universe(rng: &mut ChaCha8Rng, sizes: &[usize]) -> Universe {
        let mut pool: Vec<Vec<usize>> =
            sizes.iter().map(|&k| (0..k).collect()).collect();
        for nuclei in pool.iter_mut() {
            nuclei.shuffle(rng);
        }
        let mut cliques = Vec::new();
        loop {
            let mut clique = Vec::new();
            for (w, nuclei) in pool.iter_mut().enumerate() {
                if !nuclei.is_empty() && rng.gen_bool(0.6) {
                    clique.push((w, nuclei.pop().unwrap()));
                }
            }
            if clique.len() >= 2 {
                cliques.push(clique);
            }
            if pool.iter().map(Vec::len).sum::<usize>() < 2 {
                break;
            }
        }
        Universe { cliques }
    }

    #[test]
    fn universe_validation_catches_duplicates() {
        let u = Universe { cliques: vec![vec![(0, 0), (0, 1)]] };
        assert!(u.validate().is_err());
        let u = Universe { cliques: vec![vec![(0, 0), (1, 0)], vec![(1, 0), (2, 0)]] };
        assert!(u.validate().is_err());
        let u = Universe { cliques: vec![vec![(0, 0), (1, 0)], vec![(0, 1), (2, 0)]] };
        assert!(u.validate().is_ok());
    }

    #[test]
    fn induced_matchings_are_cycle_consistent() {
        let sizes = [3usize, 4, 2, 3];
        for seed in 0..10 {
            let mut rng = stream_rng(101, seed);
            let universe = random_universe(&mut rng, &sizes);
            universe.validate().unwrap();
            let mm = universe.induced(&sizes);
            let report = discrete_cycle_loss(&mm).unwrap();
            assert_eq!(report.inconsistent_triples, 0, "seed {seed}");
        }
    }

    #[test]
    fn empty_matchings_have_no_inconsistencies() {
        let sizes = [2usize, 2, 2];
        let mm = Universe { cliques: vec![] }.induced(&sizes);
        let report = discrete_cycle_loss(&mm).unwrap();
        assert_eq!(report.inconsistent_triples, 0);
        assert_eq!(report.total_triples_checked, 0);
    }

    #[test]
    fn missing_pair_is_an_error() {
        let mut mm = MultiMatching::new(3);
        mm.insert(0, 1, identity_matching(2));
        mm.insert(1, 2, identity_matching(2));
        match discrete_cycle_loss(&mm) {
            Err(Error::MissingPair { a: 0, b: 2 }) => {}
            other => panic!("expected MissingPair, got {other:?}"),
        }
    }

    #[test]
    fn swap_example_breaks_every_chain() {
        // All six two-hop chains compose to the wrong closure; value frozen
        // against exhaustive chain enumeration.
        let report = discrete_cycle_loss(&swap_example()).unwrap();
        assert_eq!(report.total_triples_checked, 6);
        assert_eq!(report.inconsistent_triples, 6);
    }

    #[test]
    fn cycle_loss_is_invariant_under_worm_relabeling() {
        let sizes = [3usize, 4, 2, 3];
        let mut rng = stream_rng(17, 0);
        for _ in 0..10 {
            let mut mm = MultiMatching::new(4);
            for a in 0..4 {
                for b in a + 1..4 {
                    let mut rights: Vec<usize> = (0..sizes[b]).collect();
                    rights.shuffle(&mut rng);
                    let mut pairs = Vec::new();
                    for i in 0..sizes[a] {
                        if rng.gen_bool(0.7) {
                            if let Some(s) = rights.pop() {
                                pairs.push((i, s));
                            }
                        }
                    }
                    pairs.sort_unstable();
                    mm.insert(a, b, Matching { pairs, n_left: sizes[a], n_right: sizes[b] });
                }
            }
            let mut perm: Vec<usize> = (0..4).collect();
            perm.shuffle(&mut rng);
            let mut relabeled = MultiMatching::new(4);
            for (&(a, b), m) in &mm.pairwise {
                let (pa, pb) = (perm[a], perm[b]);
                if pa < pb {
                    relabeled.insert(pa, pb, m.clone());
                } else {
                    let pairs = m.pairs.iter().map(|&(i, s)| (s, i)).collect::<Vec<_>>();
                    let mut pairs = pairs;
                    pairs.sort_unstable();
                    relabeled.insert(pb, pa, Matching {
                        pairs,
                        n_left: m.n_right,
                        n_right: m.n_left,
                    });
                }
            }
            let a = discrete_cycle_loss(&mm).unwrap();
            let b = discrete_cycle_loss(&relabeled).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn consistent_input_passes_through_sparse_synchronization() {
        let sizes = [3usize, 4, 2, 3];
        let mut rng = stream_rng(29, 0);
        let universe = random_universe(&mut rng, &sizes);
        let mm = universe.induced(&sizes);
        let input_pairs: BTreeSet<(usize, usize, usize, usize)> = mm
            .pairwise
            .iter()
            .flat_map(|(&(a, b), m)| m.pairs.iter().map(move |&(i, s)| (a, i, b, s)))
            .collect();
        let (out_universe, out_mm) = synchronize(
            &mm,
            &sizes,
            SyncMode::Sparse,
            |a, i, b, s| input_pairs.contains(&(a, i, b, s)),
            |_, _, _, _| 0.0f64,
        );
        out_universe.validate().unwrap();
        for (key, m) in &mm.pairwise {
            assert_eq!(&out_mm.pairwise[key], m);
        }
        let loss = synchronization_loss(&mm, &out_mm).unwrap();
        assert_eq!(loss, -(mm.total_matches() as f64));
    }

    #[test]
    fn swap_example_keeps_the_optimal_consistent_subset() {
        let mm = swap_example();
        let (universe, out) =
            synchronize(&mm, &[2, 2, 2], SyncMode::Dense, |_, _, _, _| true, |_, _, _, _| 0.0f64);
        universe.validate().unwrap();
        assert_eq!(discrete_cycle_loss(&out).unwrap().inconsistent_triples, 0);
        // Hand enumeration over all consistent universes on this instance
        // tops out at 4 retained matches (two full pairwise match sets).
        let loss = synchronization_loss(&mm, &out).unwrap();
        assert_eq!(loss, -4.0);
    }

    #[test]
    fn dense_mode_adds_the_implied_transitive_pair() {
        let mut mm = MultiMatching::new(3);
        mm.insert(0, 1, identity_matching(1));
        mm.insert(1, 2, identity_matching(1));
        let (universe, out) =
            synchronize(&mm, &[1, 1, 1], SyncMode::Dense, |_, _, _, _| true, |_, _, _, _| 0.0f64);
        assert_eq!(universe.cliques, vec![vec![(0, 0), (1, 0), (2, 0)]]);
        assert_eq!(out.pairwise[&(0, 2)].pairs, vec![(0, 0)]);
    }

    #[test]
    fn sparse_mode_never_emits_a_forbidden_pair() {
        let sizes = [4usize, 4, 4, 4, 4];
        let mut rng = stream_rng(37, 0);
        for round in 0..5 {
            let mut mm = MultiMatching::new(5);
            for a in 0..5 {
                for b in a + 1..5 {
                    let mut rights: Vec<usize> = (0..4).collect();
                    rights.shuffle(&mut rng);
                    let mut pairs: Vec<(usize, usize)> =
                        (0..4).filter(|_| rng.gen_bool(0.8)).map(|i| (i, rights[i])).collect();
                    pairs.sort_unstable();
                    mm.insert(a, b, Matching { pairs, n_left: 4, n_right: 4 });
                }
            }
            // Forbid pairs whose indices differ by more than 1.
            let allowed = |_: usize, i: usize, _: usize, s: usize| i.abs_diff(s) <= 1;
            let (universe, out) =
                synchronize(&mm, &sizes, SyncMode::Sparse, allowed, |_, _, _, _| 0.0f64);
            universe.validate().unwrap();
            for (&(a, b), m) in &out.pairwise {
                for &(i, s) in &m.pairs {
                    assert!(allowed(a, i, b, s), "round {round}: forbidden ({a},{i})-({b},{s})");
                }
            }
            assert_eq!(discrete_cycle_loss(&out).unwrap().inconsistent_triples, 0);
        }
    }

    #[test]
    fn loss_rejects_inconsistent_output() {
        let mm = swap_example();
        match synchronization_loss(&mm, &mm) {
            Err(Error::InconsistentInput { broken: 6 }) => {}
            other => panic!("expected InconsistentInput, got {other:?}"),
        }
    }

    #[test]
    fn identical_worms_select_the_first_reference() {
        let mut rng = stream_rng(43, 0);
        let nuclei: Vec<crate::geometry::Nucleus<f64>> = (0..8)
            .map(|id| crate::geometry::Nucleus {
                id,
                centroid: [rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)],
                radii: [1.0, 0.8, 0.6],
            })
            .collect();
        let worms: Vec<Worm<f64>> = (0..4)
            .map(|w| Worm { worm_id: format!("w{w}"), nuclei: nuclei.clone(), gt_labels: None })
            .collect();
        assert_eq!(select_reference_worm(&worms).unwrap(), 0);
        assert!(select_reference_worm(&worms[..2]).is_err());
    }

    #[test]
    fn noisy_outlier_is_not_selected_as_reference() {
        let mut rng = stream_rng(47, 1);
        let base: Vec<[f64; 3]> = (0..10)
            .map(|_| {
                [rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let worms: Vec<Worm<f64>> = (0..6)
            .map(|w| {
                let noise = if w == 2 { 4.0 } else { 1e-3 };
                let nuclei = base
                    .iter()
                    .enumerate()
                    .map(|(id, c)| crate::geometry::Nucleus {
                        id,
                        centroid: [
                            c[0] + rng.gen_range(-noise..noise),
                            c[1] + rng.gen_range(-noise..noise),
                            c[2] + rng.gen_range(-noise..noise),
                        ],
                        radii: [1.0, 0.8, 0.6],
                    })
                    .collect();
                Worm { worm_id: format!("w{w}"), nuclei, gt_labels: None }
            })
            .collect();
        let chosen = select_reference_worm(&worms).unwrap();
        assert_ne!(chosen, 2);
    }
}
