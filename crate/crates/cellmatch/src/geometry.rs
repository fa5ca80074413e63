//! Worm geometry: domain types, ellipsoid fitting, canonical rigid alignment
//! and least-squares affine registration.
//!
//! Canonical alignment maps the barycenter to the origin and the longest
//! principal axis to x. Sign ambiguities are resolved in a fixed order: the
//! third centroid moment along x must be non-negative, the rotation about x is
//! chosen to maximize mirror symmetry across the xz-plane (36-step scan plus
//! golden-section refinement), and the remaining half-turn ambiguity falls to
//! the sign of the third moment along z.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::scalar::Real;

/// A segmented nucleus: center position plus principal-axis radii (descending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct Nucleus<F: Real> {
    pub id: usize,
    pub centroid: Vec3<F>,
    pub radii: Vec3<F>,
}

/// One recorded individual: its nuclei plus optional ground-truth labels
/// (keyed by nucleus id; evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct Worm<F: Real> {
    pub worm_id: String,
    pub nuclei: Vec<Nucleus<F>>,
    pub gt_labels: Option<BTreeMap<usize, usize>>,
}

impl<F: Real> Worm<F> {
    pub fn len(&self) -> usize {
        self.nuclei.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nuclei.is_empty()
    }

    pub fn centroids(&self) -> Vec<Vec3<F>> {
        self.nuclei.iter().map(|n| n.centroid).collect()
    }

    /// Ground-truth label of the nucleus at list position `index`.
    pub fn gt_label_at(&self, index: usize) -> Option<usize> {
        let id = self.nuclei.get(index)?.id;
        self.gt_labels.as_ref()?.get(&id).copied()
    }

    /// Checks the documented schema invariants; used on every file load.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for n in &self.nuclei {
            if !ids.insert(n.id) {
                return Err(Error::InvalidInput(format!(
                    "worm {}: duplicate nucleus id {}",
                    self.worm_id, n.id
                )));
            }
            if !(n.radii[0] >= n.radii[1] && n.radii[1] >= n.radii[2] && n.radii[2] > F::zero()) {
                return Err(Error::InvalidInput(format!(
                    "worm {}: nucleus {} radii must be descending and positive",
                    self.worm_id, n.id
                )));
            }
            if n.centroid.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "worm {}: nucleus {} has a non-finite centroid",
                    self.worm_id, n.id
                )));
            }
        }
        if let Some(labels) = &self.gt_labels {
            let mut seen = BTreeSet::new();
            for (nucleus_id, label) in labels {
                if !ids.contains(nucleus_id) {
                    return Err(Error::InvalidInput(format!(
                        "worm {}: gt label references unknown nucleus {}",
                        self.worm_id, nucleus_id
                    )));
                }
                if !seen.insert(*label) {
                    return Err(Error::InvalidInput(format!(
                        "worm {}: label {} assigned to two nuclei",
                        self.worm_id, label
                    )));
                }
            }
        }
        Ok(())
    }
}

// The on-disk schema stores the label inline per nucleus; internally labels
// live in one map so unlabeled worms carry no per-nucleus baggage.
#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct NucleusFile<F: Real> {
    id: usize,
    centroid: Vec3<F>,
    radii: Vec3<F>,
    gt_label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Real")]
struct WormFile<F: Real> {
    worm_id: String,
    nuclei: Vec<NucleusFile<F>>,
}

impl<F: Real> Serialize for Worm<F> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let file = WormFile {
            worm_id: self.worm_id.clone(),
            nuclei: self
                .nuclei
                .iter()
                .map(|n| NucleusFile {
                    id: n.id,
                    centroid: n.centroid,
                    radii: n.radii,
                    gt_label: self.gt_labels.as_ref().and_then(|m| m.get(&n.id).copied()),
                })
                .collect(),
        };
        file.serialize(serializer)
    }
}

impl<'de, F: Real> Deserialize<'de> for Worm<F> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = WormFile::<F>::deserialize(deserializer)?;
        let mut gt_labels = BTreeMap::new();
        let mut any_label = false;
        let nuclei = file
            .nuclei
            .into_iter()
            .map(|n| {
                if let Some(label) = n.gt_label {
                    gt_labels.insert(n.id, label);
                    any_label = true;
                }
                Nucleus { id: n.id, centroid: n.centroid, radii: n.radii }
            })
            .collect();
        let worm = Worm {
            worm_id: file.worm_id,
            nuclei,
            gt_labels: any_label.then_some(gt_labels),
        };
        worm.validate().map_err(serde::de::Error::custom)?;
        Ok(worm)
    }
}

/// Proper rigid motion x ↦ R·x + t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct RigidTransform<F: Real> {
    pub rotation: Mat3<F>,
    pub translation: Vec3<F>,
}

impl<F: Real> RigidTransform<F> {
    /// Validates RᵀR = I within 1e-9 and det = +1.
    pub fn new(rotation: Mat3<F>, translation: Vec3<F>) -> Result<Self> {
        let gram = linalg::mat_mul(&linalg::transpose(&rotation), &rotation);
        let tol = F::cast(1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { F::one() } else { F::zero() };
                if (gram[i][j] - expect).abs() > tol {
                    return Err(Error::InvalidInput("rotation is not orthonormal".into()));
                }
            }
        }
        if (linalg::det3(&rotation) - F::one()).abs() > F::cast(1e-6) {
            return Err(Error::InvalidInput("rotation has det != +1".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: linalg::identity(), translation: [F::zero(); 3] }
    }

    pub fn apply(&self, v: Vec3<F>) -> Vec3<F> {
        linalg::add(linalg::mat_vec(&self.rotation, v), self.translation)
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: linalg::mat_mul(&self.rotation, &other.rotation),
            translation: linalg::add(
                linalg::mat_vec(&self.rotation, other.translation),
                self.translation,
            ),
        }
    }

    pub fn apply_to_worm(&self, worm: &Worm<F>) -> Worm<F> {
        let mut out = worm.clone();
        for n in &mut out.nuclei {
            n.centroid = self.apply(n.centroid);
        }
        out
    }
}

/// Invertible affine map x ↦ A·x + t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct AffineTransform<F: Real> {
    pub linear: Mat3<F>,
    pub translation: Vec3<F>,
}

impl<F: Real> AffineTransform<F> {
    pub fn new(linear: Mat3<F>, translation: Vec3<F>) -> Result<Self> {
        if linalg::det3(&linear).abs() <= F::cast(1e-12) {
            return Err(Error::DegenerateCloud("affine map is singular"));
        }
        Ok(Self { linear, translation })
    }

    pub fn identity() -> Self {
        Self { linear: linalg::identity(), translation: [F::zero(); 3] }
    }

    pub fn apply(&self, v: Vec3<F>) -> Vec3<F> {
        linalg::add(linalg::mat_vec(&self.linear, v), self.translation)
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self {
            linear: linalg::mat_mul(&self.linear, &other.linear),
            translation: linalg::add(
                linalg::mat_vec(&self.linear, other.translation),
                self.translation,
            ),
        }
    }

    /// Centroids move under the map; radii stay untouched (they are sizes, not
    /// positions, and the fitted maps are near-rigid corrections).
    pub fn apply_to_worm(&self, worm: &Worm<F>) -> Worm<F> {
        let mut out = worm.clone();
        for n in &mut out.nuclei {
            n.centroid = self.apply(n.centroid);
        }
        out
    }

    /// Mean squared correspondence residual Σ‖A·src−dst‖²/n.
    pub fn mean_squared_residual(&self, src: &[Vec3<F>], dst: &[Vec3<F>]) -> F {
        let n = src.len().max(1);
        let sum: F = src
            .iter()
            .zip(dst)
            .map(|(&s, &d)| linalg::norm_sq(linalg::sub(self.apply(s), d)))
            .sum();
        sum / F::cast(n)
    }
}

pub fn mean_point<F: Real>(points: &[Vec3<F>]) -> Vec3<F> {
    let mut acc = [F::zero(); 3];
    for p in points {
        acc = linalg::add(acc, *p);
    }
    linalg::scale(acc, F::one() / F::cast(points.len()))
}

/// Sample covariance (denominator n−1) of a point cloud around its mean.
pub fn covariance<F: Real>(points: &[Vec3<F>], mean: Vec3<F>) -> Mat3<F> {
    let mut cov = [[F::zero(); 3]; 3];
    for p in points {
        let d = linalg::sub(*p, mean);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] = cov[i][j] + d[i] * d[j];
            }
        }
    }
    let denom = F::cast(points.len().saturating_sub(1).max(1));
    for row in &mut cov {
        for v in row.iter_mut() {
            *v = *v / denom;
        }
    }
    cov
}

/// PCA ellipsoid fit: mean, per-axis extents (two standard deviations,
/// descending) and the orthonormal axes as rows.
pub fn fit_ellipsoid<F: Real>(points: &[Vec3<F>]) -> Result<(Vec3<F>, Vec3<F>, Mat3<F>)> {
    if points.len() < 4 {
        return Err(Error::DegenerateCloud("need at least 4 points"));
    }
    let mean = mean_point(points);
    let cov = covariance(points, mean);
    let (vals, axes) = linalg::sym_eigen3(&cov);
    if vals[2] <= F::cast(1e-12) * vals[0].max(F::one()) {
        return Err(Error::DegenerateCloud("covariance rank below 3"));
    }
    let radii = [
        F::two() * vals[0].sqrt(),
        F::two() * vals[1].sqrt(),
        F::two() * vals[2].sqrt(),
    ];
    Ok((mean, radii, axes))
}

/// Mirror-asymmetry of a centered cloud rotated by `angle` about x: mean
/// squared distance from each reflected point to its nearest original point.
fn mirror_asymmetry<F: Real>(centered: &[Vec3<F>], angle: F) -> F {
    let rot = linalg::rotation_from_axis_angle([F::one(), F::zero(), F::zero()], angle);
    let rotated: Vec<Vec3<F>> = centered.iter().map(|&p| linalg::mat_vec(&rot, p)).collect();
    let mut total = F::zero();
    for &p in &rotated {
        let mirrored = [p[0], -p[1], p[2]];
        let mut best = F::infinity();
        for &q in &rotated {
            let d = linalg::norm_sq(linalg::sub(mirrored, q));
            if d < best {
                best = d;
            }
        }
        total = total + best;
    }
    total / F::cast(rotated.len())
}

fn golden_section_min<F: Real>(mut lo: F, mut hi: F, tol: F, f: impl Fn(F) -> F) -> F {
    let inv_phi = F::cast(0.618_033_988_749_894_9);
    let mut a = hi - (hi - lo) * inv_phi;
    let mut b = lo + (hi - lo) * inv_phi;
    let mut fa = f(a);
    let mut fb = f(b);
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - (hi - lo) * inv_phi;
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + (hi - lo) * inv_phi;
            fb = f(b);
        }
    }
    (lo + hi) * F::half()
}

fn third_moment<F: Real>(points: &[Vec3<F>], axis: usize) -> F {
    points.iter().map(|p| p[axis] * p[axis] * p[axis]).sum()
}

/// Canonical rigid alignment of a worm (see module docs for the sign rules).
pub fn prealign<F: Real>(worm: &Worm<F>) -> Result<(Worm<F>, RigidTransform<F>)> {
    let points = worm.centroids();
    if points.len() < 4 {
        return Err(Error::DegenerateCloud("need at least 4 nuclei"));
    }
    let mean = mean_point(&points);
    let cov = covariance(&points, mean);
    let (vals, mut axes) = linalg::sym_eigen3(&cov);
    if vals[2] <= F::cast(1e-12) * vals[0].max(F::one()) {
        return Err(Error::DegenerateCloud("centroid covariance rank below 3"));
    }
    if linalg::det3(&axes) < F::zero() {
        axes[2] = linalg::scale(axes[2], -F::one());
    }

    let centered: Vec<Vec3<F>> = points.iter().map(|&p| linalg::sub(p, mean)).collect();
    let mut frame: Vec<Vec3<F>> = centered.iter().map(|&p| linalg::mat_vec(&axes, p)).collect();
    // Head-tail: third moment along the longest axis must be non-negative.
    if third_moment(&frame, 0) < F::zero() {
        axes[0] = linalg::scale(axes[0], -F::one());
        axes[1] = linalg::scale(axes[1], -F::one());
        for p in &mut frame {
            p[0] = -p[0];
            p[1] = -p[1];
        }
    }

    // Roll about x: scan full circle, refine the best bracket.
    let step = F::cast(std::f64::consts::PI / 18.0);
    let mut best_k = 0usize;
    let mut best_val = F::infinity();
    for k in 0..36 {
        let val = mirror_asymmetry(&frame, F::cast(k) * step);
        if val < best_val {
            best_val = val;
            best_k = k;
        }
    }
    let center = F::cast(best_k) * step;
    let angle = golden_section_min(center - step, center + step, F::cast(1e-10), |a| {
        mirror_asymmetry(&frame, a)
    });
    let mut roll = linalg::rotation_from_axis_angle([F::one(), F::zero(), F::zero()], angle);

    // Mirror symmetry cannot tell a half-turn apart; the z third moment can.
    let rolled: Vec<Vec3<F>> = frame.iter().map(|&p| linalg::mat_vec(&roll, p)).collect();
    if third_moment(&rolled, 2) < F::zero() {
        let pi = F::cast(std::f64::consts::PI);
        roll = linalg::mat_mul(
            &linalg::rotation_from_axis_angle([F::one(), F::zero(), F::zero()], pi),
            &roll,
        );
    }

    let rotation = linalg::mat_mul(&roll, &axes);
    let translation = linalg::scale(linalg::mat_vec(&rotation, mean), -F::one());
    let tf = RigidTransform::new(rotation, translation)?;
    Ok((tf.apply_to_worm(worm), tf))
}

/// Ordinary least squares fit of dst ≈ A·src + t via the normal equations.
pub fn least_squares_affine<F: Real>(src: &[Vec3<F>], dst: &[Vec3<F>]) -> Result<AffineTransform<F>> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput("correspondence lists differ in length".into()));
    }
    if src.len() < 4 {
        return Err(Error::DegenerateCloud("need at least 4 correspondence pairs"));
    }
    let mut gram = [[F::zero(); 4]; 4];
    let mut rhs = [[F::zero(); 4]; 3];
    for (s, d) in src.iter().zip(dst) {
        let aug = [s[0], s[1], s[2], F::one()];
        for i in 0..4 {
            for j in 0..4 {
                gram[i][j] = gram[i][j] + aug[i] * aug[j];
            }
            for dim in 0..3 {
                rhs[dim][i] = rhs[dim][i] + aug[i] * d[dim];
            }
        }
    }
    let scale = gram
        .iter()
        .flatten()
        .fold(F::one(), |acc, &v| acc.max(v.abs()));
    let tol = F::cast(1e-12) * scale;
    let mut linear = [[F::zero(); 3]; 3];
    let mut translation = [F::zero(); 3];
    for dim in 0..3 {
        let beta = linalg::solve4(&gram, &rhs[dim], tol)
            .ok_or(Error::DegenerateCloud("normal matrix singular"))?;
        linear[dim] = [beta[0], beta[1], beta[2]];
        translation[dim] = beta[3];
    }
    AffineTransform::new(linear, translation)
}
