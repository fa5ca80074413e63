//! Batch pipeline drivers.
//!
//! Composes the library into the two end-to-end runs (unsupervised multi-worm
//! matching with a learned cost model; supervised atlas from ground truth)
//! plus the evaluation sweep, and defines the on-disk report and parameter
//! schemas. Every run is a pure function of (inputs, options); reports carry
//! the seed, a config hash, and the crate version so reruns are comparable
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{lap_from_instance, Matching};
use crate::atlas::{
    align_by_ground_truth, assign_gt_labels, atlas_accuracy, atlas_sparsity,
    build_supervised_atlas, build_unsupervised_atlas, match_to_atlas, pre_atlas_accuracy,
    select_supervised_base_worm, AccuracyReport, Atlas, ATLAS_C0,
};
use crate::costs::{build_pairwise_instance, CostWeights, SharedCovariances, SparsityParams};
use crate::error::{Error, Result};
use crate::geometry::{prealign, Worm};
use crate::gm::{solve_gm, GmConfig};
use crate::learn::{learn_parameters, LearnConfig, TrialRecord};
use crate::mgm::{
    select_reference_worm, synchronization_loss, synchronize, MultiMatching, SyncMode, Universe,
};
use crate::realign::{realign, RealignTarget};
use crate::scalar::Real;

/// Unassignment offset for the final training-set matchings; realignment and
/// atlas matching use the larger offset that keeps every nucleus assigned.
pub const PAIRWISE_C0: f64 = 40.0;
const REALIGN_C0: f64 = 10_000.0;

/// Cost models exercised by the ablation comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Learned covariances and sparsity, quadratic offset costs.
    LearnedFull,
    /// Unit covariances, uniform weights, dense candidates; no learning pass.
    UnlearnedQuadratic,
    /// Learned covariances but no quadratic term anywhere.
    LinearOnly,
}

impl std::fmt::Display for CostMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CostMode::LearnedFull => "learned-full",
            CostMode::UnlearnedQuadratic => "unlearned-quadratic",
            CostMode::LinearOnly => "linear-only",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Master seed; also overrides `learn.seed` and derives per-pair solver
    /// seeds, so one value pins the whole run.
    pub seed: u64,
    pub cost_mode: CostMode,
    pub sync_mode: SyncMode,
    /// Stop after synchronization; no atlas, no test matching.
    pub skip_atlas: bool,
    pub realign_iterations: usize,
    pub pairwise_c0: f64,
    pub learn: LearnConfig,
    pub gm: GmConfig,
    /// Use these cost parameters instead of learning (resume, ablations).
    /// Ignored by [`CostMode::UnlearnedQuadratic`].
    pub preset: Option<CostParams>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            cost_mode: CostMode::LearnedFull,
            sync_mode: SyncMode::Dense,
            skip_atlas: false,
            realign_iterations: 7,
            pairwise_c0: PAIRWISE_C0,
            learn: LearnConfig::default(),
            gm: GmConfig::default(),
            preset: None,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl PipelineOptions {
    /// Stable fingerprint over every option; worker count is deliberately not
    /// an option, so reports from different pools hash identically.
    pub fn config_hash(&self) -> String {
        format!("{:016x}", fnv1a(format!("{self:?}").as_bytes()))
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::PipelineStage { stage: name, source: Box::new(e) })
}

fn prealign_all<F: Real>(worms: &[Worm<F>]) -> Result<Vec<Worm<F>>> {
    worms.iter().map(|w| prealign(w).map(|(aligned, _)| aligned)).collect()
}

fn realign_all<F: Real>(
    worms: &[Worm<F>],
    reference: &Worm<F>,
    weights: &CostWeights<F>,
    sigmas: &SharedCovariances<F>,
    sparsity: &SparsityParams<F>,
    iterations: usize,
) -> Result<Vec<Worm<F>>> {
    worms
        .par_iter()
        .map(|w| {
            let target = RealignTarget::Worm {
                reference,
                weights,
                sigmas,
                sparsity,
                c0: F::cast(REALIGN_C0),
            };
            realign(w, &target, iterations).map(|o| o.worm)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct UnsupervisedRun<F: Real> {
    /// Index of the reference worm within the training set.
    pub reference: usize,
    pub sigmas: SharedCovariances<F>,
    pub sparsity: SparsityParams<F>,
    pub weights: CostWeights<F>,
    pub trial_log: Vec<TrialRecord>,
    /// Pairwise matches before and after the consistency projection.
    pub raw_matches: usize,
    pub retained_matches: usize,
    pub universe: Universe,
    pub consistent: MultiMatching,
    /// Clique index -> ground-truth label, when training labels exist.
    pub label_map: BTreeMap<usize, usize>,
    pub pre_atlas: Option<AccuracyReport>,
    pub atlas: Option<Atlas<F>>,
    /// Realigned copies the run operated on.
    pub train: Vec<Worm<F>>,
    pub test: Vec<Worm<F>>,
    pub test_matchings: Vec<(String, Matching)>,
    pub test_reports: Vec<(String, AccuracyReport)>,
}

/// Full unsupervised pipeline: prealign, pick a reference, realign with
/// unlearned linear costs, learn the cost model, realign again with it,
/// match all training pairs, synchronize, and (unless skipped) build the
/// atlas and label the test worms.
pub fn run_pipeline_unsupervised<F: Real>(
    train: &[Worm<F>],
    test: &[Worm<F>],
    opts: &PipelineOptions,
) -> Result<UnsupervisedRun<F>> {
    if train.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "unsupervised pipeline needs at least 3 training worms, got {}",
            train.len()
        )));
    }

    let train_p = stage("prealign", prealign_all(train))?;
    let test_p = stage("prealign", prealign_all(test))?;
    let reference = stage("select-reference", select_reference_worm(&train_p))?;

    let unit = SharedCovariances::identity();
    let dense = SparsityParams::dense();
    let linear = CostWeights::new(F::one(), F::one(), F::zero());
    let ref_1 = train_p[reference].clone();
    let iters = opts.realign_iterations;
    let train_r1 =
        stage("realign-1", realign_all(&train_p, &ref_1, &linear, &unit, &dense, iters))?;
    let test_r1 = stage("realign-1", realign_all(&test_p, &ref_1, &linear, &unit, &dense, iters))?;

    let (sigmas, sparsity, trial_log) = match (opts.cost_mode, &opts.preset) {
        (CostMode::UnlearnedQuadratic, _) => {
            (SharedCovariances::identity(), SparsityParams::dense(), Vec::new())
        }
        (_, Some(p)) => (p.sigmas(), p.sparsity(), Vec::new()),
        (CostMode::LearnedFull | CostMode::LinearOnly, None) => {
            let cfg = LearnConfig { seed: opts.seed, ..opts.learn.clone() };
            let out = stage("learn", learn_parameters(&train_r1, &cfg))?;
            (out.sigmas, out.sparsity, out.trial_log)
        }
    };
    let weights = match opts.cost_mode {
        CostMode::LinearOnly => CostWeights::new(F::one(), F::one(), F::zero()),
        _ => CostWeights::uniform(),
    };

    let ref_2 = train_r1[reference].clone();
    let train_r2 =
        stage("realign-2", realign_all(&train_r1, &ref_2, &weights, &sigmas, &sparsity, iters))?;
    let test_r2 =
        stage("realign-2", realign_all(&test_r1, &ref_2, &weights, &sigmas, &sparsity, iters))?;

    let n = train_r2.len();
    let pair_keys: Vec<(usize, usize)> =
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let solved: Vec<_> = pair_keys
        .par_iter()
        .map(|&(a, b)| {
            let inst = build_pairwise_instance(
                &train_r2[a],
                &train_r2[b],
                &weights,
                &sigmas,
                &sparsity,
                F::cast(opts.pairwise_c0),
            );
            let matching = if inst.has_quadratic() {
                let cfg = GmConfig {
                    seed: opts.seed ^ (((a as u64) << 32) | b as u64),
                    ..opts.gm.clone()
                };
                solve_gm(&inst, &cfg).matching
            } else {
                lap_from_instance(&inst).0
            };
            ((a, b), inst, matching)
        })
        .collect();
    let mut mm = MultiMatching::new(n);
    let mut instances = BTreeMap::new();
    for ((a, b), inst, matching) in solved {
        mm.insert(a, b, matching);
        instances.insert((a, b), inst);
    }
    let raw_matches = mm.total_matches();

    let sizes: Vec<usize> = train_r2.iter().map(Worm::len).collect();
    let allowed =
        |a: usize, i: usize, b: usize, s: usize| instances[&(a, b)].allowed_cost(i, s).is_some();
    let cost = |a: usize, i: usize, b: usize, s: usize| {
        instances[&(a, b)].allowed_cost(i, s).unwrap_or_else(F::infinity)
    };
    let (universe, consistent) = synchronize(&mm, &sizes, opts.sync_mode, allowed, cost);
    let retained = stage("synchronize", synchronization_loss(&mm, &consistent))?;
    let retained_matches = (-retained) as usize;

    let have_gt = train_r2.iter().all(|w| w.gt_labels.is_some());
    let (label_map, pre_atlas) = if have_gt {
        let map = stage("label-transfer", assign_gt_labels(&universe, &train_r2))?;
        let report = pre_atlas_accuracy(&universe, &map, &train_r2);
        (map, Some(report))
    } else {
        (BTreeMap::new(), None)
    };

    let mut atlas = None;
    let mut test_matchings = Vec::new();
    let mut test_reports = Vec::new();
    if !opts.skip_atlas {
        let built = stage("build-atlas", build_unsupervised_atlas(&universe, &train_r2, &sigmas))?;
        let sp = atlas_sparsity::<F>();
        let matched: Vec<(String, Matching)> = stage(
            "match",
            test_r2
                .par_iter()
                .map(|w| Ok((w.worm_id.clone(), match_to_atlas(&built, w, &sp, F::cast(ATLAS_C0))?)))
                .collect(),
        )?;
        for ((id, matching), worm) in matched.iter().zip(&test_r2) {
            if worm.gt_labels.is_some() && !label_map.is_empty() {
                test_reports.push((id.clone(), atlas_accuracy(matching, worm, &label_map)));
            }
        }
        atlas = Some(built);
        test_matchings = matched;
    }

    Ok(UnsupervisedRun {
        reference,
        sigmas,
        sparsity,
        weights,
        trial_log,
        raw_matches,
        retained_matches,
        universe,
        consistent,
        label_map,
        pre_atlas,
        atlas,
        train: train_r2,
        test: test_r2,
        test_matchings,
        test_reports,
    })
}

#[derive(Debug, Clone)]
pub struct SupervisedRun<F: Real> {
    /// Index of the base worm within the training set.
    pub base: usize,
    pub atlas: Atlas<F>,
    /// Ground-truth-aligned training worms the atlas was built from.
    pub train: Vec<Worm<F>>,
    pub test_matchings: Vec<(String, Matching)>,
    pub test_reports: Vec<(String, AccuracyReport)>,
}

/// Supervised pipeline: pick the base worm, align every training worm onto it
/// by shared ground-truth labels, build the atlas from the label classes, and
/// match the test worms (realigned onto the atlas first) against it.
pub fn run_pipeline_supervised<F: Real>(
    train: &[Worm<F>],
    test: &[Worm<F>],
    opts: &PipelineOptions,
) -> Result<SupervisedRun<F>> {
    for w in train {
        if w.gt_labels.is_none() {
            return Err(Error::MissingLabels { worm_id: w.worm_id.clone() });
        }
    }
    let train_p = stage("prealign", prealign_all(train))?;
    let test_p = stage("prealign", prealign_all(test))?;
    let base = stage("select-base", select_supervised_base_worm(&train_p))?;
    let aligned = stage("align", align_by_ground_truth(&train_p, base))?;
    let atlas = stage("build-atlas", build_supervised_atlas(&aligned, None))?;

    let sp = atlas_sparsity::<F>();
    let labels = atlas.scoring_labels();
    let results: Vec<(String, Matching, Option<AccuracyReport>)> = stage(
        "match",
        test_p
            .par_iter()
            .map(|w| {
                let target =
                    RealignTarget::Atlas { atlas: &atlas, sparsity: &sp, c0: F::cast(ATLAS_C0) };
                let aligned = realign(w, &target, opts.realign_iterations)?.worm;
                let matching = match_to_atlas(&atlas, &aligned, &sp, F::cast(ATLAS_C0))?;
                let report = aligned
                    .gt_labels
                    .is_some()
                    .then(|| atlas_accuracy(&matching, &aligned, &labels));
                Ok((w.worm_id.clone(), matching, report))
            })
            .collect(),
    )?;

    let mut test_matchings = Vec::new();
    let mut test_reports = Vec::new();
    for (id, matching, report) in results {
        if let Some(r) = report {
            test_reports.push((id.clone(), r));
        }
        test_matchings.push((id, matching));
    }
    Ok(SupervisedRun { base, atlas, train: aligned, test_matchings, test_reports })
}

/// Cost-parameter file schema: everything a matching stage needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub sigma_cen: [f64; 3],
    pub sigma_rad: [f64; 3],
    pub sigma_off: [f64; 3],
    pub lambda: [f64; 3],
    pub k_min: usize,
    pub tau_cen: f64,
    pub tau_rad: f64,
    pub c0: f64,
}

impl CostParams {
    pub fn new<F: Real>(
        sigmas: &SharedCovariances<F>,
        weights: &CostWeights<F>,
        sparsity: &SparsityParams<F>,
        c0: f64,
    ) -> Self {
        let v3 = |v: [F; 3]| std::array::from_fn(|k| v[k].to_f64().unwrap());
        Self {
            sigma_cen: v3(sigmas.sigma_cen),
            sigma_rad: v3(sigmas.sigma_rad),
            sigma_off: v3(sigmas.sigma_off),
            lambda: v3([weights.lambda_cen, weights.lambda_rad, weights.lambda_off]),
            k_min: sparsity.k_min,
            tau_cen: sparsity.tau_cen.to_f64().unwrap(),
            tau_rad: sparsity.tau_rad.to_f64().unwrap(),
            c0,
        }
    }

    pub fn sigmas<F: Real>(&self) -> SharedCovariances<F> {
        let v3 = |v: [f64; 3]| std::array::from_fn(|k| F::cast(v[k]));
        SharedCovariances {
            sigma_cen: v3(self.sigma_cen),
            sigma_rad: v3(self.sigma_rad),
            sigma_off: v3(self.sigma_off),
        }
    }

    pub fn weights<F: Real>(&self) -> CostWeights<F> {
        CostWeights::new(F::cast(self.lambda[0]), F::cast(self.lambda[1]), F::cast(self.lambda[2]))
    }

    pub fn sparsity<F: Real>(&self) -> SparsityParams<F> {
        SparsityParams {
            k_min: self.k_min,
            tau_cen: F::cast(self.tau_cen),
            tau_rad: F::cast(self.tau_rad),
        }
    }
}

/// On-disk mirror of [`MultiMatching`]; its map keys do not survive JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiMatchingFile {
    pub n_worms: usize,
    pub matchings: Vec<PairMatching>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMatching {
    pub a: usize,
    pub b: usize,
    pub matching: Matching,
}

impl MultiMatchingFile {
    pub fn from_multi(mm: &MultiMatching) -> Self {
        Self {
            n_worms: mm.n_worms,
            matchings: mm
                .pairwise
                .iter()
                .map(|(&(a, b), m)| PairMatching { a, b, matching: m.clone() })
                .collect(),
        }
    }

    pub fn into_multi(self) -> MultiMatching {
        let mut mm = MultiMatching::new(self.n_worms);
        for p in self.matchings {
            mm.insert(p.a, p.b, p.matching);
        }
        mm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WormAccuracy {
    pub worm_id: String,
    pub correct: usize,
    pub total: usize,
    pub unmatched: usize,
    pub accuracy: f64,
}

fn worm_accuracies(reports: &[(String, AccuracyReport)]) -> Vec<WormAccuracy> {
    reports
        .iter()
        .map(|(id, r)| WormAccuracy {
            worm_id: id.clone(),
            correct: r.correct,
            total: r.total,
            unmatched: r.unmatched,
            accuracy: r.accuracy,
        })
        .collect()
}

/// Population mean and standard deviation; (0, 0) for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Top-level result of one pipeline run, as persisted to disk. Deliberately
/// timestamp-free: identical inputs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub pipeline: String,
    pub cost_mode: Option<String>,
    pub sync_mode: Option<String>,
    pub reference: String,
    pub n_train: usize,
    pub n_test: usize,
    pub params: Option<CostParams>,
    pub raw_matches: Option<usize>,
    pub retained_matches: Option<usize>,
    pub pre_atlas: Option<AccuracyReport>,
    pub test_mean_accuracy: Option<f64>,
    pub test_std_accuracy: Option<f64>,
    pub per_worm: Vec<WormAccuracy>,
}

impl RunReport {
    pub fn from_unsupervised<F: Real>(
        run: &UnsupervisedRun<F>,
        opts: &PipelineOptions,
    ) -> Self {
        let params = matches!(opts.cost_mode, CostMode::LearnedFull | CostMode::LinearOnly)
            .then(|| CostParams::new(&run.sigmas, &run.weights, &run.sparsity, opts.pairwise_c0));
        let per_worm = worm_accuracies(&run.test_reports);
        let accs: Vec<f64> = per_worm.iter().map(|w| w.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: opts.seed,
            config_hash: opts.config_hash(),
            pipeline: "unsupervised".to_string(),
            cost_mode: Some(opts.cost_mode.to_string()),
            sync_mode: Some(
                match opts.sync_mode {
                    SyncMode::Dense => "dense",
                    SyncMode::Sparse => "sparse",
                }
                .to_string(),
            ),
            reference: run.train[run.reference].worm_id.clone(),
            n_train: run.train.len(),
            n_test: run.test.len(),
            params,
            raw_matches: Some(run.raw_matches),
            retained_matches: Some(run.retained_matches),
            pre_atlas: run.pre_atlas,
            test_mean_accuracy: (!accs.is_empty()).then_some(mean),
            test_std_accuracy: (!accs.is_empty()).then_some(std),
            per_worm,
        }
    }

    pub fn from_supervised<F: Real>(run: &SupervisedRun<F>, opts: &PipelineOptions) -> Self {
        let per_worm = worm_accuracies(&run.test_reports);
        let accs: Vec<f64> = per_worm.iter().map(|w| w.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: opts.seed,
            config_hash: opts.config_hash(),
            pipeline: "supervised".to_string(),
            cost_mode: None,
            sync_mode: None,
            reference: run.train[run.base].worm_id.clone(),
            n_train: run.train.len(),
            n_test: run.test_matchings.len(),
            params: None,
            raw_matches: None,
            retained_matches: None,
            pre_atlas: None,
            test_mean_accuracy: (!accs.is_empty()).then_some(mean),
            test_std_accuracy: (!accs.is_empty()).then_some(std),
            per_worm,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Plain-text accuracy table for terminal output.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pipeline: {} (seed {})", self.pipeline, self.seed);
        if let Some(pre) = &self.pre_atlas {
            let _ = writeln!(
                out,
                "pre-atlas: {}/{} correct, {} unmatched, accuracy {:.4}",
                pre.correct, pre.total, pre.unmatched, pre.accuracy
            );
        }
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>10} {:>10}", "worm", "correct", "total", "unmatched", "accuracy");
        for w in &self.per_worm {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>10} {:>10.4}",
                w.worm_id, w.correct, w.total, w.unmatched, w.accuracy
            );
        }
        if let (Some(mean), Some(std)) = (self.test_mean_accuracy, self.test_std_accuracy) {
            let _ = writeln!(out, "mean accuracy {mean:.4} +/- {std:.4}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub n_train: usize,
    pub pre_atlas_accuracy: f64,
    pub atlas_mean_accuracy: f64,
    pub atlas_std_accuracy: f64,
}

/// Runs the unsupervised pipeline once per training-set size.
pub fn run_training_size_sweep<F: Real>(
    train: &[Worm<F>],
    test: &[Worm<F>],
    opts: &PipelineOptions,
    sizes: &[usize],
) -> Result<Vec<SweepPoint>> {
    sizes
        .iter()
        .map(|&n| {
            if n > train.len() {
                return Err(Error::InvalidInput(format!(
                    "sweep size {n} exceeds the {} available training worms",
                    train.len()
                )));
            }
            let run = run_pipeline_unsupervised(&train[..n], test, opts)?;
            let accs: Vec<f64> = run.test_reports.iter().map(|(_, r)| r.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            Ok(SweepPoint {
                n_train: n,
                pre_atlas_accuracy: run.pre_atlas.map_or(0.0, |r| r.accuracy),
                atlas_mean_accuracy: mean,
                atlas_std_accuracy: std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub per_worm: Vec<WormAccuracy>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Evaluation driver: sweeps the training-set size and reports per-worm
/// accuracies at the largest size.
pub fn run_evaluate<F: Real>(
    train: &[Worm<F>],
    test: &[Worm<F>],
    opts: &PipelineOptions,
    sizes: &[usize],
) -> Result<EvalReport> {
    if sizes.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one size".into()));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let sweep = run_training_size_sweep(train, test, opts, &sorted)?;
    let largest = *sorted.last().expect("non-empty");
    let run = run_pipeline_unsupervised(&train[..largest], test, opts)?;
    let per_worm = worm_accuracies(&run.test_reports);
    let accs: Vec<f64> = per_worm.iter().map(|w| w.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(EvalReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.seed,
        config_hash: opts.config_hash(),
        per_worm,
        mean_accuracy: mean,
        std_accuracy: std,
        sweep,
    })
}

/// Line chart of accuracy against training-set size, one polyline per series.
/// Self-contained SVG with no external references.
pub fn sweep_svg(sweep: &[SweepPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let xs: Vec<f64> = sweep.iter().map(|p| p.n_train as f64).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let x_max = xs.iter().copied().fold(1.0, f64::max);
    let y_min = sweep
        .iter()
        .flat_map(|p| [p.pre_atlas_accuracy, p.atlas_mean_accuracy])
        .fold(1.0f64, f64::min)
        .min(0.9)
        .max(0.0);
    let sx = |x: f64| M + (x - x_min) / (x_max - x_min).max(1e-9) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y_min) / (1.0 - y_min).max(1e-9) * (H - 2.0 * M);

    let polyline = |vals: &[(f64, f64)], color: &str| {
        let pts: Vec<String> =
            vals.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    };
    let pre: Vec<(f64, f64)> =
        sweep.iter().map(|p| (p.n_train as f64, p.pre_atlas_accuracy)).collect();
    let post: Vec<(f64, f64)> =
        sweep.iter().map(|p| (p.n_train as f64, p.atlas_mean_accuracy)).collect();

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    let _ = write!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    );
    let _ = write!(
        svg,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        H - M
    );
    for p in sweep {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            sx(p.n_train as f64),
            H - M + 18.0,
            p.n_train
        );
    }
    for frac in [0.0f64, 0.5, 1.0] {
        let y = y_min + frac * (1.0 - y_min);
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{y:.2}</text>\n",
            M - 6.0,
            sy(y) + 4.0
        );
    }
    svg.push_str(&polyline(&pre, "#d62728"));
    svg.push_str(&polyline(&post, "#1f77b4"));
    for (vals, color) in [(&pre, "#d62728"), (&post, "#1f77b4")] {
        for &(x, y) in vals.iter() {
            let _ = write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            );
        }
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{M}\" font-size=\"12\" fill=\"#d62728\">pre-atlas</text>\n",
        W - M - 120.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#1f77b4\">atlas</text>\n",
        W - M - 120.0,
        M + 16.0
    );
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">training worms</text>\n",
        W / 2.0,
        H - 12.0
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GeneratorConfig, PoseJitter};

    /// Small, quiet dataset plus matching options sized for unit tests.
    fn tiny_setup() -> (Vec<Worm<f64>>, Vec<Worm<f64>>, PipelineOptions) {
        let mut cfg = GeneratorConfig::<f64>::desk();
        cfg.n_labels = 20;
        cfg.centroid_noise_sigma = [0.0; 3];
        cfg.radii_noise_sigma = [0.0; 3];
        cfg.deformation_magnitude = 0.0;
        cfg.dropout_prob = 0.0;
        cfg.spurious_rate = 0.0;
        cfg.pose_jitter = PoseJitter { rotation: 0.1, translation: 1.0 };
        cfg.seed = 5;
        let ds = generate_dataset(&cfg, 6, 2).unwrap();
        let mut opts = PipelineOptions::default();
        opts.learn.n_learn = 4;
        opts.learn.trials_per_stage = [30, 30, 15];
        (ds.train, ds.test, opts)
    }

    #[test]
    fn noise_free_unsupervised_run_is_perfect() {
        let (train, test, opts) = tiny_setup();
        let run = run_pipeline_unsupervised(&train, &test, &opts).unwrap();
        let pre = run.pre_atlas.expect("training worms carry labels");
        assert_eq!(pre.accuracy, 1.0, "pre-atlas: {pre:?}");
        assert_eq!(run.test_reports.len(), 2);
        for (id, r) in &run.test_reports {
            assert_eq!(r.accuracy, 1.0, "{id}: {r:?}");
        }
        assert_eq!(run.universe.cliques.len(), 20);
        assert_eq!(run.raw_matches, run.retained_matches);
    }

    #[test]
    fn noise_free_supervised_run_is_perfect() {
        let (train, test, opts) = tiny_setup();
        let run = run_pipeline_supervised(&train, &test, &opts).unwrap();
        assert_eq!(run.test_reports.len(), 2);
        for (id, r) in &run.test_reports {
            assert_eq!(r.accuracy, 1.0, "{id}: {r:?}");
        }
    }

    #[test]
    fn unlabeled_input_fails_the_supervised_run() {
        let (mut train, test, opts) = tiny_setup();
        train[1].gt_labels = None;
        match run_pipeline_supervised(&train, &test, &opts) {
            Err(Error::MissingLabels { worm_id }) => assert_eq!(worm_id, "train_001"),
            other => panic!("expected MissingLabels, got {other:?}"),
        }
    }

    #[test]
    fn skip_atlas_stops_after_synchronization() {
        let (train, test, mut opts) = tiny_setup();
        opts.skip_atlas = true;
        let run = run_pipeline_unsupervised(&train, &test, &opts).unwrap();
        assert!(run.atlas.is_none());
        assert!(run.test_matchings.is_empty());
        assert!(run.pre_atlas.is_some());
    }

    #[test]
    fn reports_embed_seed_hash_and_version_and_rerun_identically() {
        let (train, test, mut opts) = tiny_setup();
        opts.seed = 9;
        let run = run_pipeline_unsupervised(&train, &test, &opts).unwrap();
        let report = RunReport::from_unsupervised(&run, &opts);
        assert_eq!(report.seed, 9);
        assert_eq!(report.version, env!("CARGO_PKG_VERSION"));
        assert_eq!(report.config_hash, opts.config_hash());
        assert!(report.params.is_some());

        let again = run_pipeline_unsupervised(&train, &test, &opts).unwrap();
        assert_eq!(report.to_json(), RunReport::from_unsupervised(&again, &opts).to_json());

        let parsed: RunReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed.config_hash, report.config_hash);
        let table = report.table();
        assert!(table.contains("pre-atlas") && table.contains("mean accuracy"));
    }

    #[test]
    fn config_hash_tracks_option_changes() {
        let a = PipelineOptions::default();
        let mut b = PipelineOptions::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.pairwise_c0 = 41.0;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn cost_params_round_trip_preserves_values() {
        let sigmas = SharedCovariances::<f64> {
            sigma_cen: [1.5, 2.0, 2.5],
            sigma_rad: [0.1, 0.2, 0.3],
            sigma_off: [3.0, 4.0, 5.0],
        };
        let weights = CostWeights::new(0.5, 0.3, 0.8);
        let sp = SparsityParams { k_min: 7, tau_cen: 1.95, tau_rad: 0.15 };
        let params = CostParams::new(&sigmas, &weights, &sp, 40.0);
        let json = serde_json::to_string(&params).unwrap();
        let back: CostParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.sigmas::<f64>().sigma_cen, sigmas.sigma_cen);
        assert_eq!(back.sparsity::<f64>().k_min, 7);
        assert_eq!(back.weights::<f64>().lambda_off, 0.8);
    }

    #[test]
    fn multi_matching_file_round_trips() {
        let mut mm = MultiMatching::new(3);
        mm.insert(0, 1, Matching { pairs: vec![(0, 1), (1, 0)], n_left: 2, n_right: 2 });
        mm.insert(1, 2, Matching { pairs: vec![(0, 0)], n_left: 2, n_right: 2 });
        let file = MultiMatchingFile::from_multi(&mm);
        let json = serde_json::to_string(&file).unwrap();
        let back: MultiMatchingFile = serde_json::from_str(&json).unwrap();
        let mm2 = back.into_multi();
        assert_eq!(mm2.n_worms, 3);
        assert_eq!(mm2.get(0, 1), mm.get(0, 1));
        assert_eq!(mm2.total_matches(), 3);
    }

    #[test]
    fn sweep_improves_or_holds_with_more_data_on_clean_input() {
        let (train, test, opts) = tiny_setup();
        let sweep = run_training_size_sweep(&train, &test, &opts, &[4, 6]).unwrap();
        assert_eq!(sweep.len(), 2);
        for p in &sweep {
            assert_eq!(p.pre_atlas_accuracy, 1.0);
            assert_eq!(p.atlas_mean_accuracy, 1.0);
        }
        let svg = sweep_svg(&sweep);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn evaluate_report_is_stable_json() {
        let (train, test, opts) = tiny_setup();
        let report = run_evaluate(&train, &test, &opts, &[4, 6]).unwrap();
        assert_eq!(report.sweep.len(), 2);
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.std_accuracy, 0.0);
        let json = serde_json::to_string_pretty(&report).unwrap();
        let parsed: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string_pretty(&parsed).unwrap(), json);
    }
}
