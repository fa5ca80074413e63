//! Gaussian matching costs: Mahalanobis distances over centroids, radii and
//! centroid offsets, the unassignment shift c0, and sparsification of a worm
//! pair into a solvable graph-matching instance.
//!
//! Shared (cross-label) covariances are diagonal throughout; the per-label
//! full-covariance flavor of the same costs is produced by the atlas module.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Nucleus, Worm};
use crate::linalg::{self, Mat3, Vec3};
use crate::scalar::{fcmp, Real};

/// Diagonal entries of the shared covariances Σ^cen, Σ^rad, Σ^off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct SharedCovariances<F: Real> {
    pub sigma_cen: Vec3<F>,
    pub sigma_rad: Vec3<F>,
    pub sigma_off: Vec3<F>,
}

impl<F: Real> SharedCovariances<F> {
    pub fn identity() -> Self {
        let one = [F::one(); 3];
        Self { sigma_cen: one, sigma_rad: one, sigma_off: one }
    }

    pub fn validate(&self) -> Result<()> {
        for &v in self.sigma_cen.iter().chain(&self.sigma_rad).chain(&self.sigma_off) {
            if !(v > F::zero()) {
                return Err(Error::NonPositiveVariance { value: v.to_f64().unwrap_or(f64::NAN) });
            }
        }
        Ok(())
    }
}

/// Relative weighting of the three cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct CostWeights<F: Real> {
    pub lambda_cen: F,
    pub lambda_rad: F,
    pub lambda_off: F,
}

impl<F: Real> CostWeights<F> {
    pub fn new(lambda_cen: F, lambda_rad: F, lambda_off: F) -> Self {
        Self { lambda_cen, lambda_rad, lambda_off }
    }

    pub fn uniform() -> Self {
        Self::new(F::one(), F::one(), F::one())
    }

    pub fn as_array(&self) -> [F; 3] {
        [self.lambda_cen, self.lambda_rad, self.lambda_off]
    }

    pub fn validate(&self) -> Result<()> {
        let [c, r, o] = self.as_array();
        if c < F::zero() || r < F::zero() || o < F::zero() {
            return Err(Error::InvalidInput("negative cost weight".into()));
        }
        if c == F::zero() && r == F::zero() && o == F::zero() {
            return Err(Error::ZeroWeights);
        }
        Ok(())
    }
}

/// Candidate-set sparsification: distance gates plus a per-node rescue count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct SparsityParams<F: Real> {
    pub k_min: usize,
    pub tau_cen: F,
    pub tau_rad: F,
}

impl<F: Real> SparsityParams<F> {
    /// No gating at all: thresholds at +∞ admit every candidate.
    pub fn dense() -> Self {
        Self { k_min: 1, tau_cen: F::infinity(), tau_rad: F::infinity() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 {
            return Err(Error::InvalidInput("k_min must be at least 1".into()));
        }
        if !(self.tau_cen > F::zero()) || !(self.tau_rad > F::zero()) {
            return Err(Error::InvalidInput("sparsity thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Squared Mahalanobis distance with a diagonal covariance.
pub fn mahalanobis<F: Real>(diff: Vec3<F>, sigma_diag: Vec3<F>) -> Result<F> {
    let mut acc = F::zero();
    for k in 0..3 {
        if !(sigma_diag[k] > F::zero()) {
            return Err(Error::NonPositiveVariance {
                value: sigma_diag[k].to_f64().unwrap_or(f64::NAN),
            });
        }
        acc = acc + diff[k] * diff[k] / sigma_diag[k];
    }
    Ok(acc)
}

/// Rescale weights to a positive multiple with Euclidean norm √3.
pub fn normalize_weights<F: Real>(w: CostWeights<F>) -> Result<CostWeights<F>> {
    let norm = linalg::norm(w.as_array());
    if !(norm > F::zero()) {
        return Err(Error::ZeroWeights);
    }
    let f = F::cast(3.0).sqrt() / norm;
    Ok(CostWeights::new(w.lambda_cen * f, w.lambda_rad * f, w.lambda_off * f))
}

/// Linear matching cost λ_cen·d_cen + λ_rad·d_rad under shared covariances.
pub fn linear_cost<F: Real>(
    i: &Nucleus<F>,
    s: &Nucleus<F>,
    w: &CostWeights<F>,
    sigmas: &SharedCovariances<F>,
) -> Result<F> {
    let d_cen = mahalanobis(linalg::sub(i.centroid, s.centroid), sigmas.sigma_cen)?;
    let d_rad = mahalanobis(linalg::sub(i.radii, s.radii), sigmas.sigma_rad)?;
    Ok(w.lambda_cen * d_cen + w.lambda_rad * d_rad)
}

/// Quadratic cost of assigning the source pair (i,j) to the target pair (s,t):
/// Mahalanobis mismatch of the two centroid offset vectors.
pub fn quadratic_cost<F: Real>(
    i: &Nucleus<F>,
    j: &Nucleus<F>,
    s: &Nucleus<F>,
    t: &Nucleus<F>,
    w: &CostWeights<F>,
    sigmas: &SharedCovariances<F>,
) -> Result<F> {
    if i.id == j.id || s.id == t.id {
        return Err(Error::SamePair);
    }
    let off_src = linalg::sub(i.centroid, j.centroid);
    let off_dst = linalg::sub(s.centroid, t.centroid);
    Ok(w.lambda_off * mahalanobis(linalg::sub(off_src, off_dst), sigmas.sigma_off)?)
}

/// Quadratic-cost backing store of an instance.
#[derive(Debug, Clone)]
pub enum QuadCosts<F: Real> {
    /// Purely linear instance.
    None,
    /// Shared diagonal Σ^off over raw centroid offsets; evaluated on demand.
    SharedDiag {
        left_cen: Vec<Vec3<F>>,
        right_cen: Vec<Vec3<F>>,
        lambda_off: F,
        inv_sigma_off: Vec3<F>,
    },
    /// Per-left-pair offset Gaussians (atlas matching): mean offset and
    /// precision matrix keyed by (i, j) with i < j.
    PerPair {
        right_cen: Vec<Vec3<F>>,
        lambda_off: F,
        offsets: BTreeMap<(usize, usize), (Vec3<F>, Mat3<F>)>,
    },
    /// Fully materialized table keyed (i, s, j, t) with i < j; absent = 0.
    /// Exists for brute-force oracles and hand-built test instances.
    Table(BTreeMap<(usize, usize, usize, usize), F>),
}

/// A (possibly sparsified) graph-matching instance between a left and a right
/// node set. Stored linear costs are shifted: C_is = linear_cost(i,s) − c0.
#[derive(Debug, Clone)]
pub struct GmInstance<F: Real> {
    pub n_left: usize,
    pub n_right: usize,
    pub c0: F,
    /// Per left node: (right node, shifted cost), sorted by right node.
    pub allowed: Vec<Vec<(usize, F)>>,
    pub quad: QuadCosts<F>,
}

impl<F: Real> GmInstance<F> {
    /// Shifted linear cost if (i,s) is allowed.
    pub fn allowed_cost(&self, i: usize, s: usize) -> Option<F> {
        let row = self.allowed.get(i)?;
        row.binary_search_by_key(&s, |&(r, _)| r).ok().map(|k| row[k].1)
    }

    /// Total number of allowed assignments (the n_lin of one instance).
    pub fn num_allowed(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }

    pub fn has_quadratic(&self) -> bool {
        !matches!(self.quad, QuadCosts::None)
    }

    /// Quadratic cost c_{is,jt}; symmetric under exchanging the two
    /// assignments. A shared right node can never occur in a feasible
    /// matching, so such queries cost zero (solver caches rely on this).
    pub fn quad_cost(&self, i: usize, s: usize, j: usize, t: usize) -> F {
        debug_assert!(i != j);
        if s == t {
            return F::zero();
        }
        let (i, s, j, t) = if i < j { (i, s, j, t) } else { (j, t, i, s) };
        match &self.quad {
            QuadCosts::None => F::zero(),
            QuadCosts::SharedDiag { left_cen, right_cen, lambda_off, inv_sigma_off } => {
                let off_l = linalg::sub(left_cen[i], left_cen[j]);
                let off_r = linalg::sub(right_cen[s], right_cen[t]);
                let d = linalg::sub(off_l, off_r);
                let mut acc = F::zero();
                for k in 0..3 {
                    acc = acc + d[k] * d[k] * inv_sigma_off[k];
                }
                *lambda_off * acc
            }
            QuadCosts::PerPair { right_cen, lambda_off, offsets } => {
                match offsets.get(&(i, j)) {
                    Some((mean_off, precision)) => {
                        let off_r = linalg::sub(right_cen[s], right_cen[t]);
                        let d = linalg::sub(*mean_off, off_r);
                        *lambda_off * linalg::quadratic_form(precision, d)
                    }
                    None => F::zero(),
                }
            }
            QuadCosts::Table(map) => map.get(&(i, s, j, t)).copied().unwrap_or_else(F::zero),
        }
    }

    /// Copy of the instance with quadratic costs materialized into a table
    /// (restricted to allowed assignments); used by enumeration oracles.
    pub fn materialized(&self) -> Self {
        let mut table = BTreeMap::new();
        for i in 0..self.n_left {
            for j in i + 1..self.n_left {
                for &(s, _) in &self.allowed[i] {
                    for &(t, _) in &self.allowed[j] {
                        if s == t {
                            continue;
                        }
                        let v = self.quad_cost(i, s, j, t);
                        if v != F::zero() {
                            table.insert((i, s, j, t), v);
                        }
                    }
                }
            }
        }
        Self {
            n_left: self.n_left,
            n_right: self.n_right,
            c0: self.c0,
            allowed: self.allowed.clone(),
            quad: QuadCosts::Table(table),
        }
    }
}

/// Sparsify one worm pair into a GM instance (left = `a`, right = `b`).
///
/// Gate ∪ rescue selection for one left node's candidates (cost, right
/// index, gate flag): keep every gated candidate plus the k_min cheapest
/// overall, shift stored costs by −c0, order the row by right index.
pub(crate) fn select_allowed_row<F: Real>(
    scratch: &mut Vec<(F, usize, bool)>,
    k_min: usize,
    c0: F,
) -> Vec<(usize, F)> {
    let k = k_min.min(scratch.len());
    scratch.sort_by(|x, y| fcmp(&x.0, &y.0).then(x.1.cmp(&y.1)));
    let mut row: Vec<(usize, F)> = scratch
        .iter()
        .enumerate()
        .filter(|&(rank, &(_, _, gated))| gated || rank < k)
        .map(|(_, &(cost, s_idx, _))| (s_idx, cost - c0))
        .collect();
    row.sort_by_key(|&(s_idx, _)| s_idx);
    row
}

/// allowed(i) = { s : d_cen ≤ τ_cen and d_rad ≤ τ_rad } ∪ { k_min lowest
/// linear-cost candidates of i }, so no row is ever empty.
///
/// Parameters must already be validated; see the respective `validate()`.
pub fn build_pairwise_instance<F: Real>(
    a: &Worm<F>,
    b: &Worm<F>,
    w: &CostWeights<F>,
    sigmas: &SharedCovariances<F>,
    sp: &SparsityParams<F>,
    c0: F,
) -> GmInstance<F> {
    let n_left = a.len();
    let n_right = b.len();
    let inv = |v: Vec3<F>| [F::one() / v[0], F::one() / v[1], F::one() / v[2]];
    let inv_cen = inv(sigmas.sigma_cen);
    let inv_rad = inv(sigmas.sigma_rad);

    let mut allowed = Vec::with_capacity(n_left);
    let mut scratch: Vec<(F, usize, bool)> = Vec::with_capacity(n_right);
    for i in &a.nuclei {
        scratch.clear();
        for (s_idx, s) in b.nuclei.iter().enumerate() {
            let dc = linalg::sub(i.centroid, s.centroid);
            let dr = linalg::sub(i.radii, s.radii);
            let mut d_cen = F::zero();
            let mut d_rad = F::zero();
            for k in 0..3 {
                d_cen = d_cen + dc[k] * dc[k] * inv_cen[k];
                d_rad = d_rad + dr[k] * dr[k] * inv_rad[k];
            }
            let cost = w.lambda_cen * d_cen + w.lambda_rad * d_rad;
            let gated = d_cen <= sp.tau_cen && d_rad <= sp.tau_rad;
            scratch.push((cost, s_idx, gated));
        }
        allowed.push(select_allowed_row(&mut scratch, sp.k_min, c0));
    }

    let quad = if w.lambda_off > F::zero() {
        QuadCosts::SharedDiag {
            left_cen: a.centroids(),
            right_cen: b.centroids(),
            lambda_off: w.lambda_off,
            inv_sigma_off: inv(sigmas.sigma_off),
        }
    } else {
        QuadCosts::None
    };

    GmInstance { n_left, n_right, c0, allowed, quad }
}
