//! Iterative affine refinement: alternate matching a worm against a
//! reference (another worm or an atlas) with an affine least-squares fit on
//! the matched centroids, applying the fit after every round.

use crate::assignment::Matching;
use crate::atlas::{build_atlas_instance, Atlas};
use crate::costs::{build_pairwise_instance, CostWeights, SharedCovariances, SparsityParams};
use crate::error::{Error, Result};
use crate::geometry::{least_squares_affine, AffineTransform, Worm};
use crate::gm::{solve_gm, GmConfig};
use crate::linalg::Vec3;
use crate::scalar::Real;

/// What the worm is matched against on every round.
pub enum RealignTarget<'a, F: Real> {
    Worm {
        reference: &'a Worm<F>,
        weights: &'a CostWeights<F>,
        sigmas: &'a SharedCovariances<F>,
        sparsity: &'a SparsityParams<F>,
        c0: F,
    },
    Atlas {
        atlas: &'a Atlas<F>,
        sparsity: &'a SparsityParams<F>,
        c0: F,
    },
}

#[derive(Debug, Clone)]
pub struct RealignOutcome<F: Real> {
    pub worm: Worm<F>,
    /// Mean squared residual of the affine fit, one entry per iteration.
    pub residuals: Vec<F>,
    /// Composition of all per-iteration fits; maps the input worm onto the
    /// output worm.
    pub transform: AffineTransform<F>,
}

/// Matched (worm centroid, reference centroid) pairs for the current round.
fn correspondences<F: Real>(
    target: &RealignTarget<'_, F>,
    worm: &Worm<F>,
) -> Result<Vec<(Vec3<F>, Vec3<F>)>> {
    let pick = |m: Matching, right_is_worm: bool| -> Vec<(usize, usize)> {
        if right_is_worm {
            m.pairs.iter().map(|&(e, s)| (s, e)).collect()
        } else {
            m.pairs
        }
    };
    let pairs = match target {
        RealignTarget::Worm { reference, weights, sigmas, sparsity, c0 } => {
            let inst = build_pairwise_instance(worm, reference, weights, sigmas, sparsity, *c0);
            pick(solve_gm(&inst, &GmConfig::default()).matching, false)
        }
        RealignTarget::Atlas { atlas, sparsity, c0 } => {
            let inst = build_atlas_instance(atlas, worm, sparsity, *c0)?;
            pick(solve_gm(&inst, &GmConfig::default()).matching, true)
        }
    };
    Ok(pairs
        .into_iter()
        .map(|(w, r)| {
            let dst = match target {
                RealignTarget::Worm { reference, .. } => reference.nuclei[r].centroid,
                RealignTarget::Atlas { atlas, .. } => atlas.entries[r].mean_cen,
            };
            (worm.nuclei[w].centroid, dst)
        })
        .collect())
}

/// Repeats {match against the reference, fit an affine map on the matched
/// centroids, apply it} `iterations` times. The matching is re-solved each
/// round with the same parameters. Fails with NoMatches when a round yields
/// fewer than 4 correspondences.
pub fn realign<F: Real>(
    worm: &Worm<F>,
    target: &RealignTarget<'_, F>,
    iterations: usize,
) -> Result<RealignOutcome<F>> {
    if iterations < 1 {
        return Err(Error::InvalidInput("realign needs at least one iteration".into()));
    }
    let mut current = worm.clone();
    let mut residuals = Vec::with_capacity(iterations);
    let mut total = AffineTransform::identity();
    for _ in 0..iterations {
        let matched = correspondences(target, &current)?;
        if matched.len() < 4 {
            return Err(Error::NoMatches { found: matched.len(), need: 4 });
        }
        let (src, dst): (Vec<Vec3<F>>, Vec<Vec3<F>>) = matched.into_iter().unzip();
        let tf = least_squares_affine(&src, &dst)?;
        residuals.push(tf.mean_squared_residual(&src, &dst));
        current = tf.apply_to_worm(&current);
        total = tf.compose(&total);
    }
    Ok(RealignOutcome { worm: current, residuals, transform: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{atlas_sparsity, build_supervised_atlas, ATLAS_C0};
    use crate::geometry::Nucleus;
    use crate::gm::stream_rng;
    use crate::linalg;
    use rand::Rng;

    fn grid_worm(id: &str, n: usize, seed: u64) -> Worm<f64> {
        let mut rng = stream_rng(seed, 50);
        let nuclei = (0..n)
            .map(|i| Nucleus {
                id: i,
                centroid: [
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(-3.0..3.0),
                ],
                radii: [1.2, 1.0, 0.8],
            })
            .collect();
        Worm { worm_id: id.into(), nuclei, gt_labels: None }
    }

    fn worm_target<'a>(
        reference: &'a Worm<f64>,
        weights: &'a CostWeights<f64>,
        sigmas: &'a SharedCovariances<f64>,
        sparsity: &'a SparsityParams<f64>,
    ) -> RealignTarget<'a, f64> {
        RealignTarget::Worm { reference, weights, sigmas, sparsity, c0: 10_000.0 }
    }

    #[test]
    fn self_reference_is_a_fixed_point() {
        let worm = grid_worm("w", 12, 1);
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let sigmas = SharedCovariances::identity();
        let sparsity = SparsityParams::dense();
        let target = worm_target(&worm, &weights, &sigmas, &sparsity);
        let out = realign(&worm, &target, 1).unwrap();
        assert!(out.residuals[0] < 1e-18);
        for (a, b) in worm.nuclei.iter().zip(&out.worm.nuclei) {
            for k in 0..3 {
                assert!((a.centroid[k] - b.centroid[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_copy_is_recovered_in_one_round() {
        let reference = grid_worm("ref", 15, 2);
        let tf = AffineTransform::new(
            [[1.1, 0.05, 0.0], [-0.04, 0.95, 0.02], [0.01, 0.0, 1.05]],
            [0.4, -0.2, 0.1],
        )
        .unwrap();
        // The worm is the reference pulled back through the inverse map; one
        // fitted round must push it onto the reference again.
        let inv = linalg::inverse3(&tf.linear, 1e-15).unwrap();
        let back = AffineTransform::new(
            inv,
            linalg::scale(linalg::mat_vec(&inv, tf.translation), -1.0),
        )
        .unwrap();
        let worm = back.apply_to_worm(&reference);
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let sigmas = SharedCovariances::identity();
        let sparsity = SparsityParams::dense();
        let target = worm_target(&reference, &weights, &sigmas, &sparsity);
        let out = realign(&worm, &target, 1).unwrap();
        for (a, b) in reference.nuclei.iter().zip(&out.worm.nuclei) {
            for k in 0..3 {
                assert!((a.centroid[k] - b.centroid[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noisy_pair_discrepancy_shrinks() {
        let reference = grid_worm("ref", 20, 3);
        let mut rng = stream_rng(3, 51);
        let mut worm = reference.clone();
        worm.worm_id = "noisy".into();
        for n in &mut worm.nuclei {
            for k in 0..3 {
                n.centroid[k] = n.centroid[k] * 1.08 + rng.gen_range(-0.3..0.3) + 0.7;
            }
        }
        let before: f64 = reference
            .nuclei
            .iter()
            .zip(&worm.nuclei)
            .map(|(a, b)| linalg::norm(linalg::sub(a.centroid, b.centroid)))
            .sum::<f64>()
            / reference.len() as f64;
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let sigmas = SharedCovariances::identity();
        let sparsity = SparsityParams::dense();
        let target = worm_target(&reference, &weights, &sigmas, &sparsity);
        let out = realign(&worm, &target, 7).unwrap();
        let after: f64 = reference
            .nuclei
            .iter()
            .zip(&out.worm.nuclei)
            .map(|(a, b)| linalg::norm(linalg::sub(a.centroid, b.centroid)))
            .sum::<f64>()
            / reference.len() as f64;
        assert!(after < before, "after {after} should beat before {before}");
    }

    #[test]
    fn composed_transform_reproduces_the_output() {
        let reference = grid_worm("ref", 18, 4);
        let mut rng = stream_rng(4, 52);
        let mut worm = reference.clone();
        for n in &mut worm.nuclei {
            for k in 0..3 {
                n.centroid[k] += rng.gen_range(-0.5..0.5);
            }
        }
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let sigmas = SharedCovariances::identity();
        let sparsity = SparsityParams::dense();
        let target = worm_target(&reference, &weights, &sigmas, &sparsity);
        let out = realign(&worm, &target, 5).unwrap();
        assert_eq!(out.residuals.len(), 5);
        let replayed = out.transform.apply_to_worm(&worm);
        for (a, b) in replayed.nuclei.iter().zip(&out.worm.nuclei) {
            for k in 0..3 {
                assert!((a.centroid[k] - b.centroid[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_nuclei_fail_with_no_matches() {
        let reference = grid_worm("ref", 10, 5);
        let mut worm = grid_worm("w", 3, 6);
        worm.nuclei.truncate(3);
        let weights = CostWeights::new(1.0, 1.0, 0.0);
        let sigmas = SharedCovariances::identity();
        let sparsity = SparsityParams::dense();
        let target = worm_target(&reference, &weights, &sigmas, &sparsity);
        match realign(&worm, &target, 1) {
            Err(Error::NoMatches { found: 3, need: 4 }) => {}
            other => panic!("expected NoMatches, got {other:?}"),
        }
    }

    #[test]
    fn atlas_reference_pulls_a_shifted_worm_onto_the_means() {
        let mut worms = Vec::new();
        let mut rng = stream_rng(7, 53);
        let base = grid_worm("base", 14, 7);
        for w in 0..5 {
            let mut worm = base.clone();
            worm.worm_id = format!("w{w}");
            for n in &mut worm.nuclei {
                for k in 0..3 {
                    n.centroid[k] += rng.gen_range(-0.2..0.2);
                }
            }
            worm.gt_labels = Some((0..worm.len()).map(|i| (i, i)).collect());
            worms.push(worm);
        }
        let atlas = build_supervised_atlas(&worms, None).unwrap();
        let shift = AffineTransform::new(linalg::identity(), [2.0, -1.0, 0.5]).unwrap();
        let worm = shift.apply_to_worm(&base);
        let sparsity = atlas_sparsity();
        let target = RealignTarget::Atlas { atlas: &atlas, sparsity: &sparsity, c0: ATLAS_C0 };
        let out = realign(&worm, &target, 7).unwrap();
        let dist = |w: &Worm<f64>| -> f64 {
            w.nuclei
                .iter()
                .zip(&atlas.entries)
                .map(|(n, e)| linalg::norm(linalg::sub(n.centroid, e.mean_cen)))
                .sum::<f64>()
                / w.len() as f64
        };
        // Entry order equals nucleus order here because labels are 0..n.
        assert!(dist(&out.worm) < 0.25, "got {}", dist(&out.worm));
        assert!(dist(&out.worm) < dist(&worm));
    }
}
