//! Synthetic stereotyped-organism generator.
//!
//! Plants a ground-truth body plan (per-label centroid and radii means packed
//! into an elongated ellipsoidal body) and samples labeled worms from it:
//! a smooth per-worm deformation field plus independent noise, dropout,
//! spurious detections, and a random rigid pose. Stands in for a microscopy
//! dataset at desk scale, with ground truth attached for evaluation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, UnitBall};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Nucleus, Worm};
use crate::gm::stream_rng;
use crate::linalg::Vec3;
use crate::scalar::Real;

/// RNG streams; worm sampling uses the per-worm seed, not the master seed.
const STREAM_MODEL: u64 = 11;
const STREAM_WORM: u64 = 12;
const STREAM_SEEDS: u64 = 13;

/// Nucleus semi-axis range the model samples from, in body length units.
const RADII_RANGE: (f64, f64) = (0.5, 0.9);
/// Noisy radii are clamped to stay a valid ellipsoid.
const RADII_FLOOR: f64 = 1e-3;
/// Placement gives up after this many rejections for one label.
const MAX_PLACE_ATTEMPTS: usize = 10_000;
/// Number of monomials in the degree-2 deformation basis.
const N_BASIS: usize = 10;

/// Rigid pose perturbation ranges; a worm's pose is drawn uniformly from
/// `[-rotation, rotation]` per Euler axis and `[-translation, translation]`
/// per translation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct PoseJitter<F: Real> {
    pub rotation: F,
    pub translation: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct GeneratorConfig<F: Real> {
    pub n_labels: usize,
    /// Body extent along x; the body is the ellipsoid with semi-axes
    /// (length/2, width/2, width/2).
    pub body_length: F,
    pub body_width: F,
    pub centroid_noise_sigma: Vec3<F>,
    pub radii_noise_sigma: Vec3<F>,
    /// Std of each random coefficient of the smooth deformation field.
    pub deformation_magnitude: F,
    pub dropout_prob: F,
    /// Expected number of unlabeled spurious nuclei per worm.
    pub spurious_rate: F,
    pub pose_jitter: PoseJitter<F>,
    pub seed: u64,
}

impl<F: Real> GeneratorConfig<F> {
    /// Small body plan for fast end-to-end runs.
    pub fn desk() -> Self {
        Self {
            n_labels: 60,
            body_length: F::cast(40.0),
            body_width: F::cast(10.0),
            centroid_noise_sigma: [F::cast(0.25); 3],
            radii_noise_sigma: [F::cast(0.02); 3],
            deformation_magnitude: F::cast(0.4),
            dropout_prob: F::cast(0.02),
            spurious_rate: F::cast(0.5),
            pose_jitter: PoseJitter { rotation: F::cast(0.2), translation: F::two() },
            seed: 0,
        }
    }

    /// Benchmark-sized body plan; same noise regime as [`desk`](Self::desk).
    pub fn full_scale() -> Self {
        Self {
            n_labels: 558,
            body_length: F::cast(80.0),
            body_width: F::cast(16.0),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: &str| Err(Error::InvalidInput(format!("generator config: {msg}")));
        if self.n_labels == 0 {
            return err("n_labels must be at least 1");
        }
        if !(self.body_length > F::zero()) || !(self.body_width > F::zero()) {
            return err("body dimensions must be positive");
        }
        let sigmas = self.centroid_noise_sigma.iter().chain(&self.radii_noise_sigma);
        for &s in sigmas {
            if !(s >= F::zero()) || !s.is_finite() {
                return err("noise sigmas must be non-negative");
            }
        }
        if !(self.deformation_magnitude >= F::zero()) {
            return err("deformation magnitude must be non-negative");
        }
        if !(self.dropout_prob >= F::zero() && self.dropout_prob <= F::one()) {
            return err("dropout probability must lie in [0, 1]");
        }
        if !(self.spurious_rate >= F::zero()) || !self.spurious_rate.is_finite() {
            return err("spurious rate must be non-negative");
        }
        if !(self.pose_jitter.rotation >= F::zero()) || !(self.pose_jitter.translation >= F::zero())
        {
            return err("pose jitter ranges must be non-negative");
        }
        Ok(())
    }

    fn semi_axes(&self) -> [f64; 3] {
        let l = self.body_length.to_f64().unwrap() / 2.0;
        let w = self.body_width.to_f64().unwrap() / 2.0;
        [l, w, w]
    }
}

impl<F: Real> Default for GeneratorConfig<F> {
    fn default() -> Self {
        Self::desk()
    }
}

/// Planted body plan: one centroid mean and one radii mean per label, plus the
/// ellipsoid the labels live in (the global shape all worms share).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct GroundTruthModel<F: Real> {
    pub centroid_means: Vec<Vec3<F>>,
    pub radii_means: Vec<Vec3<F>>,
    pub body_semi_axes: Vec3<F>,
}

impl<F: Real> GroundTruthModel<F> {
    pub fn n_labels(&self) -> usize {
        self.centroid_means.len()
    }

    /// Separation floor used when packing labels: twice the median semi-axis.
    pub fn min_separation(&self) -> F {
        let mut all: Vec<F> = self.radii_means.iter().flatten().copied().collect();
        all.sort_by(crate::scalar::fcmp);
        F::two() * all[all.len() / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroid_means.is_empty() || self.centroid_means.len() != self.radii_means.len() {
            return Err(Error::InvalidInput("model label lists are empty or mismatched".into()));
        }
        for (a, ma) in self.centroid_means.iter().enumerate() {
            for mb in &self.centroid_means[a + 1..] {
                if ma == mb {
                    return Err(Error::InvalidInput(format!("label means {a} collide")));
                }
            }
        }
        for r in &self.radii_means {
            if !(r[0] >= r[1] && r[1] >= r[2] && r[2] > F::zero()) {
                return Err(Error::InvalidInput("radii means must be descending positive".into()));
            }
        }
        Ok(())
    }
}

fn sample_in_ellipsoid(rng: &mut ChaCha8Rng, semi: [f64; 3]) -> [f64; 3] {
    let p: [f64; 3] = UnitBall.sample(rng);
    [p[0] * semi[0], p[1] * semi[1], p[2] * semi[2]]
}

fn sample_radii(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut r = [0.0; 3];
    for v in &mut r {
        *v = rng.gen_range(RADII_RANGE.0..RADII_RANGE.1);
    }
    r.sort_by(|a, b| b.partial_cmp(a).unwrap());
    r
}

/// Samples label means inside the body, rejecting placements closer than
/// twice the median radius to any earlier label.
pub fn make_ground_truth<F: Real>(cfg: &GeneratorConfig<F>) -> Result<GroundTruthModel<F>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_MODEL);
    let semi = cfg.semi_axes();

    // Radii first: the packing threshold depends on their median.
    let radii: Vec<[f64; 3]> = (0..cfg.n_labels).map(|_| sample_radii(&mut rng)).collect();
    let mut all: Vec<f64> = radii.iter().flatten().copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_sep = 2.0 * all[all.len() / 2];
    let min_sep2 = min_sep * min_sep;

    let mut means: Vec<[f64; 3]> = Vec::with_capacity(cfg.n_labels);
    for label in 0..cfg.n_labels {
        let mut placed = false;
        for _ in 0..MAX_PLACE_ATTEMPTS {
            let p = sample_in_ellipsoid(&mut rng, semi);
            let ok = means.iter().all(|q| {
                let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2] >= min_sep2
            });
            if ok {
                means.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PackingFailed { label, attempts: MAX_PLACE_ATTEMPTS });
        }
    }

    let cast3 = |v: [f64; 3]| [F::cast(v[0]), F::cast(v[1]), F::cast(v[2])];
    Ok(GroundTruthModel {
        centroid_means: means.into_iter().map(cast3).collect(),
        radii_means: radii.into_iter().map(cast3).collect(),
        body_semi_axes: cast3(semi),
    })
}

/// Degree-2 monomials of the body coordinates, the span of the deformation
/// field. The constant term is a per-worm shift; linear and quadratic terms
/// move nearby labels together, which is what makes offset statistics carry
/// signal beyond per-label noise.
fn deformation_basis(u: [f64; 3]) -> [f64; N_BASIS] {
    [
        1.0,
        u[0],
        u[1],
        u[2],
        u[0] * u[0],
        u[1] * u[1],
        u[2] * u[2],
        u[0] * u[1],
        u[0] * u[2],
        u[1] * u[2],
    ]
}

fn rotation_from_angles(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    // Rz(c) * Ry(b) * Rx(a)
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

/// Draws one worm: per label, centroid = mean + smooth field + noise and
/// radii = mean + noise (clamped), then dropout, Poisson spurious nuclei,
/// and a rigid pose. Ground-truth labels ride along keyed by nucleus id.
pub fn sample_worm<F: Real>(
    model: &GroundTruthModel<F>,
    cfg: &GeneratorConfig<F>,
    worm_seed: u64,
) -> Worm<F> {
    let mut rng = stream_rng(worm_seed, STREAM_WORM);
    let semi: [f64; 3] = std::array::from_fn(|k| model.body_semi_axes[k].to_f64().unwrap());
    let mag = cfg.deformation_magnitude.to_f64().unwrap();
    let sigma_cen: [f64; 3] = std::array::from_fn(|k| cfg.centroid_noise_sigma[k].to_f64().unwrap());
    let sigma_rad: [f64; 3] = std::array::from_fn(|k| cfg.radii_noise_sigma[k].to_f64().unwrap());
    let dropout = cfg.dropout_prob.to_f64().unwrap();

    // One deformation field per worm: random coefficients per output axis.
    let coeffs: [[f64; N_BASIS]; 3] = std::array::from_fn(|_| {
        std::array::from_fn(|_| mag * rng.sample::<f64, _>(StandardNormal))
    });

    let mut points: Vec<[f64; 3]> = Vec::new();
    let mut radii: Vec<[f64; 3]> = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for label in 0..model.n_labels() {
        let mean: [f64; 3] =
            std::array::from_fn(|k| model.centroid_means[label][k].to_f64().unwrap());
        let mean_rad: [f64; 3] =
            std::array::from_fn(|k| model.radii_means[label][k].to_f64().unwrap());
        // Fixed draw order per label so dropout does not shift the stream.
        let g_cen: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let g_rad: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let drop: f64 = rng.gen();
        if drop < dropout {
            continue;
        }

        let u = [mean[0] / semi[0], mean[1] / semi[1], mean[2] / semi[2]];
        let phi = deformation_basis(u);
        let field: [f64; 3] =
            std::array::from_fn(|axis| (0..N_BASIS).map(|k| coeffs[axis][k] * phi[k]).sum());

        points.push(std::array::from_fn(|k| mean[k] + field[k] + sigma_cen[k] * g_cen[k]));
        let mut r: [f64; 3] =
            std::array::from_fn(|k| (mean_rad[k] + sigma_rad[k] * g_rad[k]).max(RADII_FLOOR));
        r.sort_by(|a, b| b.partial_cmp(a).unwrap());
        radii.push(r);
        labels.push(Some(label));
    }

    let rate = cfg.spurious_rate.to_f64().unwrap();
    if rate > 0.0 {
        let n_spurious = Poisson::new(rate).unwrap().sample(&mut rng) as usize;
        for _ in 0..n_spurious {
            points.push(sample_in_ellipsoid(&mut rng, semi));
            radii.push(sample_radii(&mut rng));
            labels.push(None);
        }
    }

    let range = |rng: &mut ChaCha8Rng, half: f64| {
        if half > 0.0 {
            rng.gen_range(-half..half)
        } else {
            0.0
        }
    };
    let rot_half = cfg.pose_jitter.rotation.to_f64().unwrap();
    let angles: [f64; 3] = std::array::from_fn(|_| range(&mut rng, rot_half));
    let trans_half = cfg.pose_jitter.translation.to_f64().unwrap();
    let t: [f64; 3] = std::array::from_fn(|_| range(&mut rng, trans_half));
    let rot = rotation_from_angles(angles[0], angles[1], angles[2]);

    let mut nuclei = Vec::with_capacity(points.len());
    let mut gt_labels = std::collections::BTreeMap::new();
    for (id, ((p, r), label)) in points.iter().zip(&radii).zip(&labels).enumerate() {
        let posed: [f64; 3] = std::array::from_fn(|i| {
            rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2] + t[i]
        });
        nuclei.push(Nucleus {
            id,
            centroid: std::array::from_fn(|k| F::cast(posed[k])),
            radii: std::array::from_fn(|k| F::cast(r[k])),
        });
        if let Some(l) = label {
            gt_labels.insert(id, *l);
        }
    }

    Worm {
        worm_id: format!("worm_{worm_seed:016x}"),
        nuclei,
        gt_labels: (!gt_labels.is_empty()).then_some(gt_labels),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Real> {
    pub model: GroundTruthModel<F>,
    pub train: Vec<Worm<F>>,
    pub test: Vec<Worm<F>>,
}

/// Plants a model and samples disjoint train/test worm sets from per-worm
/// seeds derived off the master seed. Worms are generated concurrently; the
/// output depends only on (cfg, counts).
pub fn generate_dataset<F: Real>(
    cfg: &GeneratorConfig<F>,
    n_train: usize,
    n_test: usize,
) -> Result<Dataset<F>> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput("train and test counts must be at least 1".into()));
    }
    let model = make_ground_truth(cfg)?;

    let mut seed_rng = stream_rng(cfg.seed, STREAM_SEEDS);
    let mut used = BTreeSet::new();
    let mut draw_seeds = |n: usize| -> Vec<u64> {
        (0..n)
            .map(|_| loop {
                let s = seed_rng.gen::<u64>();
                if used.insert(s) {
                    return s;
                }
            })
            .collect()
    };
    let train_seeds = draw_seeds(n_train);
    let test_seeds = draw_seeds(n_test);

    let sample_all = |seeds: &[u64], prefix: &str| -> Vec<Worm<F>> {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut w = sample_worm(&model, cfg, s);
                w.worm_id = format!("{prefix}_{i:03}");
                w
            })
            .collect()
    };
    let train = sample_all(&train_seeds, "train");
    let test = sample_all(&test_seeds, "test");
    Ok(Dataset { model, train, test })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Lays the dataset out as `model.json`, `train/<worm_id>.json`, and
/// `test/<worm_id>.json` under `dir`.
pub fn write_dataset<F: Real>(dataset: &Dataset<F>, dir: &Path) -> Result<()> {
    let train_dir = dir.join("train");
    let test_dir = dir.join("test");
    fs::create_dir_all(&train_dir)?;
    fs::create_dir_all(&test_dir)?;
    write_json(&dir.join("model.json"), &dataset.model)?;
    for (worms, sub) in [(&dataset.train, &train_dir), (&dataset.test, &test_dir)] {
        for w in worms.iter() {
            write_json(&sub.join(format!("{}.json", w.worm_id)), w)?;
        }
    }
    Ok(())
}

/// Loads every `*.json` worm in `dir`, sorted by file name so worm order is
/// stable across platforms.
pub fn read_worms_dir<F: Real>(dir: &Path) -> Result<Vec<Worm<F>>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
}
