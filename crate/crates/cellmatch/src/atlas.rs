//! Gaussian nucleus atlases: construction from cliques or from ground-truth
//! labels, greedy label transfer, worm-to-atlas matching, and accuracy
//! accounting.
//!
//! Every atlas entry carries full (not diagonal) covariances; entries with
//! fewer than three samples fall back to a shared covariance because an
//! empirical one would be rank deficient. All covariances get a small
//! diagonal floor so their precision matrices exist.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assignment::Matching;
use crate::costs::{
    normalize_weights, select_allowed_row, CostWeights, GmInstance, QuadCosts, SharedCovariances,
    SparsityParams,
};
use crate::error::{Error, Result};
use crate::geometry::{covariance, least_squares_affine, mean_point, Worm};
use crate::gm::{solve_gm, GmConfig};
use crate::linalg::{self, Mat3, Vec3};
use crate::mgm::Universe;
use crate::scalar::Real;

/// Diagonal floor added to every covariance (squared length units).
pub const COV_EPSILON: f64 = 1e-4;
/// Unassignment offset for atlas matching; high so that as many nuclei as
/// possible get a label.
pub const ATLAS_C0: f64 = 10_000.0;
/// Samples needed before a group's empirical covariance is trusted.
const EMPIRICAL_MIN: usize = 3;
/// Minimum samples per atlas entry.
const SUPPORT_MIN: usize = 2;

/// Default sparsity for matching a worm against an atlas.
pub fn atlas_sparsity<F: Real>() -> SparsityParams<F> {
    SparsityParams { k_min: 6, tau_cen: F::cast(8.0), tau_rad: F::cast(12.0) }
}

/// Default supervised cost weights before normalization.
pub fn supervised_weights<F: Real>() -> CostWeights<F> {
    CostWeights::new(F::cast(0.48), F::cast(0.34), F::cast(0.81))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasEntry<F: Real> {
    pub label: usize,
    pub mean_cen: Vec3<F>,
    pub cov_cen: Mat3<F>,
    pub mean_rad: Vec3<F>,
    pub cov_rad: Mat3<F>,
    pub support: usize,
}

/// Entry statistics plus pairwise offset statistics, keyed by entry index
/// (ascending pairs; the reversed offset is the negated mean with the same
/// covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas<F: Real> {
    pub entries: Vec<AtlasEntry<F>>,
    pub offsets: BTreeMap<(usize, usize), (Vec3<F>, Mat3<F>)>,
    pub weights: CostWeights<F>,
    /// Transferred ground-truth label per entry index; absent entries are
    /// unlabeled.
    pub label_names: Option<BTreeMap<usize, usize>>,
}

impl<F: Real> Atlas<F> {
    pub fn offset(&self, i: usize, j: usize) -> Option<(Vec3<F>, Mat3<F>)> {
        if i < j {
            self.offsets.get(&(i, j)).copied()
        } else {
            self.offsets
                .get(&(j, i))
                .map(|&(m, c)| (linalg::scale(m, -F::one()), c))
        }
    }

    /// Label used for scoring each entry: the transferred name when present,
    /// otherwise the entry's own label id.
    pub fn scoring_labels(&self) -> BTreeMap<usize, usize> {
        match &self.label_names {
            Some(map) => map.clone(),
            None => self.entries.iter().enumerate().map(|(i, e)| (i, e.label)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub unmatched: usize,
}

impl AccuracyReport {
    fn new(correct: usize, total: usize, unmatched: usize) -> Self {
        Self { correct, total, accuracy: correct as f64 / total.max(1) as f64, unmatched }
    }
}

fn diag3<F: Real>(v: Vec3<F>) -> Mat3<F> {
    let mut m = [[F::zero(); 3]; 3];
    for k in 0..3 {
        m[k][k] = v[k];
    }
    m
}

fn regularize<F: Real>(mut m: Mat3<F>) -> Mat3<F> {
    let eps = F::cast(COV_EPSILON);
    for k in 0..3 {
        m[k][k] = m[k][k] + eps;
    }
    m
}

/// Per-group samples: (worm index, centroid, radii), at most one per worm.
type Samples<F> = Vec<(usize, Vec3<F>, Vec3<F>)>;

struct Fallbacks<F: Real> {
    cen: Vec3<F>,
    rad: Vec3<F>,
    off: Vec3<F>,
}

fn build_entries<F: Real>(
    groups: &[Samples<F>],
    ids: &[usize],
    fallback: &Fallbacks<F>,
) -> Result<(Vec<AtlasEntry<F>>, BTreeMap<(usize, usize), (Vec3<F>, Mat3<F>)>)> {
    let mut entries = Vec::with_capacity(groups.len());
    for (g, samples) in groups.iter().enumerate() {
        let support = samples.len();
        if support < SUPPORT_MIN {
            return Err(Error::InsufficientSupport {
                group: ids[g],
                support,
                need: SUPPORT_MIN,
            });
        }
        let cens: Vec<Vec3<F>> = samples.iter().map(|&(_, c, _)| c).collect();
        let rads: Vec<Vec3<F>> = samples.iter().map(|&(_, _, r)| r).collect();
        let mean_cen = mean_point(&cens);
        let mean_rad = mean_point(&rads);
        let (cov_cen, cov_rad) = if support >= EMPIRICAL_MIN {
            (covariance(&cens, mean_cen), covariance(&rads, mean_rad))
        } else {
            (diag3(fallback.cen), diag3(fallback.rad))
        };
        entries.push(AtlasEntry {
            label: ids[g],
            mean_cen,
            cov_cen: regularize(cov_cen),
            mean_rad,
            cov_rad: regularize(cov_rad),
            support,
        });
    }

    let by_worm: Vec<BTreeMap<usize, Vec3<F>>> = groups
        .iter()
        .map(|samples| samples.iter().map(|&(w, c, _)| (w, c)).collect())
        .collect();
    let mut offsets = BTreeMap::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let diffs: Vec<Vec3<F>> = by_worm[i]
                .iter()
                .filter_map(|(w, &ci)| by_worm[j].get(w).map(|&cj| linalg::sub(ci, cj)))
                .collect();
            let (mean_off, cov_off) = if diffs.len() >= EMPIRICAL_MIN {
                let mean = mean_point(&diffs);
                (mean, covariance(&diffs, mean))
            } else {
                (
                    linalg::sub(entries[i].mean_cen, entries[j].mean_cen),
                    diag3(fallback.off),
                )
            };
            offsets.insert((i, j), (mean_off, regularize(cov_off)));
        }
    }
    Ok((entries, offsets))
}

/// λ^{cen,rad,off} := ‖diag(Σ^{cen,rad,off})‖, normalized to the length of
/// (1,1,1).
fn weights_from_sigmas<F: Real>(sigmas: &SharedCovariances<F>) -> Result<CostWeights<F>> {
    normalize_weights(CostWeights::new(
        linalg::norm(sigmas.sigma_cen),
        linalg::norm(sigmas.sigma_rad),
        linalg::norm(sigmas.sigma_off),
    ))
}

/// Atlas from the cliques of a synchronized universe. `sigmas` are the
/// learned shared covariances; they set the cost weights and stand in for
/// empirical covariances on small cliques.
pub fn build_unsupervised_atlas<F: Real>(
    universe: &Universe,
    worms: &[Worm<F>],
    sigmas: &SharedCovariances<F>,
) -> Result<Atlas<F>> {
    sigmas.validate()?;
    universe.validate()?;
    let groups: Vec<Samples<F>> = universe
        .cliques
        .iter()
        .map(|clique| {
            clique
                .iter()
                .map(|&(w, n)| (w, worms[w].nuclei[n].centroid, worms[w].nuclei[n].radii))
                .collect()
        })
        .collect();
    let ids: Vec<usize> = (0..groups.len()).collect();
    let fallback = Fallbacks {
        cen: sigmas.sigma_cen,
        rad: sigmas.sigma_rad,
        off: sigmas.sigma_off,
    };
    let (entries, offsets) = build_entries(&groups, &ids, &fallback)?;
    Ok(Atlas { entries, offsets, weights: weights_from_sigmas(sigmas)?, label_names: None })
}

/// Atlas from ground-truth label classes; entries are ordered and identified
/// by label id. Weights default to the tuned supervised triple.
pub fn build_supervised_atlas<F: Real>(
    worms: &[Worm<F>],
    weights: Option<CostWeights<F>>,
) -> Result<Atlas<F>> {
    let mut grouped: BTreeMap<usize, Samples<F>> = BTreeMap::new();
    for (w, worm) in worms.iter().enumerate() {
        if worm.gt_labels.is_none() {
            return Err(Error::MissingLabels { worm_id: worm.worm_id.clone() });
        }
        for (n, nucleus) in worm.nuclei.iter().enumerate() {
            if let Some(label) = worm.gt_label_at(n) {
                grouped.entry(label).or_default().push((w, nucleus.centroid, nucleus.radii));
            }
        }
    }
    let ids: Vec<usize> = grouped.keys().copied().collect();
    let groups: Vec<Samples<F>> = grouped.into_values().collect();

    // Pooled within-label variance stands in for rank-deficient groups; an
    // offset is a difference of two roughly independent centroids.
    let mut pooled = [F::zero(); 3];
    let mut pooled_n = 0usize;
    for samples in &groups {
        if samples.len() >= EMPIRICAL_MIN {
            let cens: Vec<Vec3<F>> = samples.iter().map(|&(_, c, _)| c).collect();
            let cov = covariance(&cens, mean_point(&cens));
            for k in 0..3 {
                pooled[k] = pooled[k] + cov[k][k];
            }
            pooled_n += 1;
        }
    }
    let pooled = if pooled_n > 0 {
        linalg::scale(pooled, F::one() / F::cast(pooled_n))
    } else {
        [F::one(); 3]
    };
    let fallback = Fallbacks { cen: pooled, rad: pooled, off: linalg::scale(pooled, F::two()) };

    let (entries, offsets) = build_entries(&groups, &ids, &fallback)?;
    let weights = normalize_weights(weights.unwrap_or_else(supervised_weights))?;
    let label_names = entries.iter().enumerate().map(|(i, e)| (i, e.label)).collect();
    Ok(Atlas { entries, offsets, weights, label_names: Some(label_names) })
}

/// Greedy label transfer: repeatedly give the label with the globally
/// highest in-clique occurrence count to that clique (ties toward the lower
/// label, then the lower clique), consuming both. Cliques left over are
/// unlabeled and absent from the map.
pub fn assign_gt_labels<F: Real>(
    universe: &Universe,
    worms: &[Worm<F>],
) -> Result<BTreeMap<usize, usize>> {
    for worm in worms {
        if worm.gt_labels.is_none() {
            return Err(Error::MissingLabels { worm_id: worm.worm_id.clone() });
        }
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, clique) in universe.cliques.iter().enumerate() {
        for &(w, n) in clique {
            if let Some(label) = worms[w].gt_label_at(n) {
                *counts.entry((k, label)).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize, usize)> =
        counts.into_iter().map(|((k, label), c)| (c, label, k)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used_labels = BTreeSet::new();
    let mut assigned = BTreeMap::new();
    for (count, label, clique) in ranked {
        if count == 0 {
            break;
        }
        if used_labels.contains(&label) || assigned.contains_key(&clique) {
            continue;
        }
        used_labels.insert(label);
        assigned.insert(clique, label);
    }
    Ok(assigned)
}

/// GM instance for matching atlas entries (left) against a worm's nuclei
/// (right), with per-entry full-covariance Mahalanobis costs.
pub fn build_atlas_instance<F: Real>(
    atlas: &Atlas<F>,
    worm: &Worm<F>,
    sp: &SparsityParams<F>,
    c0: F,
) -> Result<GmInstance<F>> {
    let singular = || Error::InvalidInput("atlas covariance is not invertible".into());
    let tol = F::cast(1e-18);
    let mut precisions = Vec::with_capacity(atlas.entries.len());
    for e in &atlas.entries {
        let p_cen = linalg::inverse3(&e.cov_cen, tol).ok_or_else(singular)?;
        let p_rad = linalg::inverse3(&e.cov_rad, tol).ok_or_else(singular)?;
        precisions.push((p_cen, p_rad));
    }

    let n_left = atlas.entries.len();
    let n_right = worm.len();
    let w = &atlas.weights;
    let mut allowed = Vec::with_capacity(n_left);
    let mut scratch: Vec<(F, usize, bool)> = Vec::with_capacity(n_right);
    for (e, &(p_cen, p_rad)) in atlas.entries.iter().zip(&precisions) {
        scratch.clear();
        for (s_idx, s) in worm.nuclei.iter().enumerate() {
            let d_cen = linalg::quadratic_form(&p_cen, linalg::sub(e.mean_cen, s.centroid));
            let d_rad = linalg::quadratic_form(&p_rad, linalg::sub(e.mean_rad, s.radii));
            let cost = w.lambda_cen * d_cen + w.lambda_rad * d_rad;
            let gated = d_cen <= sp.tau_cen && d_rad <= sp.tau_rad;
            scratch.push((cost, s_idx, gated));
        }
        allowed.push(select_allowed_row(&mut scratch, sp.k_min, c0));
    }

    let quad = if w.lambda_off > F::zero() && !atlas.offsets.is_empty() {
        let mut offsets = BTreeMap::new();
        for (&key, &(mean, cov)) in &atlas.offsets {
            offsets.insert(key, (mean, linalg::inverse3(&cov, tol).ok_or_else(singular)?));
        }
        QuadCosts::PerPair {
            right_cen: worm.centroids(),
            lambda_off: w.lambda_off,
            offsets,
        }
    } else {
        QuadCosts::None
    };
    Ok(GmInstance { n_left, n_right, c0, allowed, quad })
}

pub fn match_to_atlas<F: Real>(
    atlas: &Atlas<F>,
    worm: &Worm<F>,
    sp: &SparsityParams<F>,
    c0: F,
) -> Result<Matching> {
    let inst = build_atlas_instance(atlas, worm, sp, c0)?;
    Ok(solve_gm(&inst, &GmConfig::default()).matching)
}

/// Score a worm-to-atlas matching against the worm's ground truth. A nucleus
/// is correct when its matched entry carries its label; a match to an
/// unlabeled entry is incorrect, no match counts as unmatched.
pub fn atlas_accuracy<F: Real>(
    matching: &Matching,
    worm: &Worm<F>,
    label_map: &BTreeMap<usize, usize>,
) -> AccuracyReport {
    let total = worm.len();
    let by_nucleus = matching.backward();
    let mut correct = 0;
    let mut unmatched = 0;
    for s in 0..total {
        match by_nucleus.get(s).copied().flatten() {
            None => unmatched += 1,
            Some(entry) => {
                if let Some(&label) = label_map.get(&entry) {
                    if worm.gt_label_at(s) == Some(label) {
                        correct += 1;
                    }
                }
            }
        }
    }
    AccuracyReport::new(correct, total, unmatched)
}

/// Score clique membership directly: each nucleus inherits its clique's
/// transferred label; nuclei in unlabeled cliques or outside every clique
/// count as unmatched.
pub fn pre_atlas_accuracy<F: Real>(
    universe: &Universe,
    label_map: &BTreeMap<usize, usize>,
    worms: &[Worm<F>],
) -> AccuracyReport {
    let mut clique_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, clique) in universe.cliques.iter().enumerate() {
        for &(w, n) in clique {
            clique_of.insert((w, n), k);
        }
    }
    let mut correct = 0;
    let mut unmatched = 0;
    let mut total = 0;
    for (w, worm) in worms.iter().enumerate() {
        total += worm.len();
        for n in 0..worm.len() {
            match clique_of.get(&(w, n)).and_then(|k| label_map.get(k)) {
                None => unmatched += 1,
                Some(&label) => {
                    if worm.gt_label_at(n) == Some(label) {
                        correct += 1;
                    }
                }
            }
        }
    }
    AccuracyReport::new(correct, total, unmatched)
}

/// Root-mean-square distance of a point set from its barycenter.
fn rms_extent<F: Real>(points: &[Vec3<F>]) -> F {
    let center = mean_point(points);
    let mut sum = F::zero();
    for &p in points {
        sum = sum + linalg::norm_sq(linalg::sub(p, center));
    }
    (sum / F::cast(points.len().max(1))).sqrt()
}

/// Pick the base worm the others fit most closely after alignment: for each
/// candidate, the rest are least-squares aligned onto it by shared labels,
/// and the score is the mean over worms of the per-nucleus centroid distance
/// to the base's same-labeled nucleus, normalized by the base's extent.
/// Returns the argmin, ties toward the lowest index.
///
/// The distance is anchored on the base worm rather than on atlas means:
/// averaging first would let a base's own deviation cancel out of its score,
/// defeating the selection.
pub fn select_supervised_base_worm<F: Real>(worms: &[Worm<F>]) -> Result<usize> {
    if worms.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "base selection needs at least 3 worms, got {}",
            worms.len()
        )));
    }
    let mut best: Option<(F, usize)> = None;
    for base in 0..worms.len() {
        let aligned = align_by_ground_truth(worms, base)?;
        let base_points: BTreeMap<usize, Vec3<F>> = (0..worms[base].len())
            .filter_map(|n| worms[base].gt_label_at(n).map(|l| (l, worms[base].nuclei[n].centroid)))
            .collect();
        let flat: Vec<Vec3<F>> = base_points.values().copied().collect();
        let scale = rms_extent(&flat).max(F::cast(1e-12));
        let mut score = F::zero();
        let mut n_worms = 0usize;
        for (w, worm) in aligned.iter().enumerate() {
            if w == base {
                continue;
            }
            let mut sum = F::zero();
            let mut count = 0usize;
            for (n, nucleus) in worm.nuclei.iter().enumerate() {
                let Some(target) = worm.gt_label_at(n).and_then(|l| base_points.get(&l)) else {
                    continue;
                };
                sum = sum + linalg::norm(linalg::sub(*target, nucleus.centroid));
                count += 1;
            }
            score = score + sum / (F::cast(count.max(1)) * scale);
            n_worms += 1;
        }
        let score = score / F::cast(n_worms.max(1));
        if best.as_ref().is_none_or(|&(b, _)| score < b) {
            best = Some((score, base));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

/// Affine-align every worm onto the base via shared ground-truth labels;
/// the base itself passes through unchanged.
pub fn align_by_ground_truth<F: Real>(worms: &[Worm<F>], base: usize) -> Result<Vec<Worm<F>>> {
    let label_points = |worm: &Worm<F>| -> Result<BTreeMap<usize, Vec3<F>>> {
        if worm.gt_labels.is_none() {
            return Err(Error::MissingLabels { worm_id: worm.worm_id.clone() });
        }
        Ok((0..worm.len())
            .filter_map(|n| worm.gt_label_at(n).map(|l| (l, worm.nuclei[n].centroid)))
            .collect())
    };
    let base_points = label_points(&worms[base])?;
    let mut aligned = Vec::with_capacity(worms.len());
    for (w, worm) in worms.iter().enumerate() {
        if w == base {
            aligned.push(worm.clone());
            continue;
        }
        let points = label_points(worm)?;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (label, &p) in &points {
            if let Some(&q) = base_points.get(label) {
                src.push(p);
                dst.push(q);
            }
        }
        let tf = least_squares_affine(&src, &dst)?;
        aligned.push(tf.apply_to_worm(worm));
    }
    Ok(aligned)
}

fn mat_to_rows<F: Real>(m: &Mat3<F>) -> [F; 9] {
    let mut out = [F::zero(); 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[r][c];
        }
    }
    out
}

fn mat_from_rows<F: Real>(v: &[F; 9]) -> Mat3<F> {
    let mut m = [[F::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = v[3 * r + c];
        }
    }
    m
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct EntryFile<F: Real> {
    label: usize,
    mean_cen: Vec3<F>,
    cov_cen: [F; 9],
    mean_rad: Vec3<F>,
    cov_rad: [F; 9],
    support: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct OffsetFile<F: Real> {
    mean: Vec3<F>,
    cov: [F; 9],
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct AtlasFile<F: Real> {
    entries: Vec<EntryFile<F>>,
    offsets: BTreeMap<String, OffsetFile<F>>,
    weights: CostWeights<F>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    label_names: Option<BTreeMap<usize, usize>>,
}

impl<F: Real> Serialize for Atlas<F> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let file = AtlasFile {
            entries: self
                .entries
                .iter()
                .map(|e| EntryFile {
                    label: e.label,
                    mean_cen: e.mean_cen,
                    cov_cen: mat_to_rows(&e.cov_cen),
                    mean_rad: e.mean_rad,
                    cov_rad: mat_to_rows(&e.cov_rad),
                    support: e.support,
                })
                .collect(),
            offsets: self
                .offsets
                .iter()
                .map(|(&(i, j), (m, c))| {
                    (format!("{i}-{j}"), OffsetFile { mean: *m, cov: mat_to_rows(c) })
                })
                .collect(),
            weights: self.weights,
            label_names: self.label_names.clone(),
        };
        file.serialize(serializer)
    }
}

impl<'de, F: Real> Deserialize<'de> for Atlas<F> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = AtlasFile::<F>::deserialize(deserializer)?;
        let mut offsets = BTreeMap::new();
        for (key, off) in file.offsets {
            let (i, j) = key
                .split_once('-')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| D::Error::custom(format!("bad offset key {key:?}")))?;
            if i >= j {
                return Err(D::Error::custom(format!("offset key {key:?} not ascending")));
            }
            offsets.insert((i, j), (off.mean, mat_from_rows(&off.cov)));
        }
        Ok(Atlas {
            entries: file
                .entries
                .into_iter()
                .map(|e| AtlasEntry {
                    label: e.label,
                    mean_cen: e.mean_cen,
                    cov_cen: mat_from_rows(&e.cov_cen),
                    mean_rad: e.mean_rad,
                    cov_rad: mat_from_rows(&e.cov_rad),
                    support: e.support,
                })
                .collect(),
            offsets,
            weights: file.weights,
            label_names: file.label_names,
        })
    }
}
