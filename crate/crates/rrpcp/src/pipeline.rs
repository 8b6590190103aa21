//! Causal per-frame orchestration.
//!
//! Each frame is projected onto the orthogonal complement of the background
//! subspace, the sparse foreground is recovered by ℓ1 minimization seeded
//! with a predicted support, the support is refined by threshold/least-squares
//! passes, object trackers are corrected from the recovered foreground's
//! centroids, and the cleaned background is fed back into the subspace
//! estimate. A support-free variant of the same loop and an offline convex
//! program (see [`crate::pcp`]) serve as baselines.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::MetricsRow;
use crate::sparse::{
    add_ls_del, add_ls_del_with_retry, AddLsDelParams, EpsilonRule, ModCsSolver, SolverOptions,
};
use crate::subspace::{self, SubspaceEstimate, UpdateParams};
use crate::support;
use crate::synthdata::{FrameSequence, GroundTruth, ObjectSpec, Scene};
use crate::tracker::{
    observe_centroids, predict_support, CentroidStat, KalmanParams, ObjectTracker,
};

/// Separation algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Support-aided ℓ1 recovery with Kalman support prediction.
    SuppredModcs,
    /// Plain ℓ1 recovery: empty known support, no tracking.
    PlainRrpcp,
    /// Offline convex separation of the whole sequence at once.
    Pcp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [
        Algorithm::SuppredModcs,
        Algorithm::PlainRrpcp,
        Algorithm::Pcp,
    ];

    /// Stable name used in file names and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::SuppredModcs => "suppred-modcs",
            Algorithm::PlainRrpcp => "rrpcp",
            Algorithm::Pcp => "pcp",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "suppred-modcs" => Ok(Algorithm::SuppredModcs),
            "rrpcp" | "plain-rrpcp" => Ok(Algorithm::PlainRrpcp),
            "pcp" => Ok(Algorithm::Pcp),
            other => Err(Error::invalid(format!(
                "unknown algorithm {other:?} (expected suppred-modcs, rrpcp, or pcp)"
            ))),
        }
    }
}

/// Constants of the data-fit radius schedule (see [`EpsilonRule`]).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonConfig {
    /// Multiplier on the smoothed residual estimate.
    pub scale: f64,
    /// Relative floor against the measurement norm.
    pub floor_fraction: f64,
    /// Exponential smoothing weight on the previous residual estimate.
    pub smoothing: f64,
    /// Radius used before any residual has been observed. This is an absolute
    /// quantity: set it near the expected first-frame residual norm.
    pub init: f64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        let d = EpsilonRule::default();
        EpsilonConfig {
            scale: d.scale,
            floor_fraction: d.floor_fraction,
            smoothing: d.smoothing,
            init: d.epsilon_init,
        }
    }
}

impl EpsilonConfig {
    fn rule(&self) -> EpsilonRule {
        EpsilonRule::new(self.scale, self.floor_fraction, self.smoothing, self.init)
    }
}

/// Every knob of the causal runners, deserializable from JSON with defaults
/// for all fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Fraction of squared singular mass the initial subspace must capture.
    pub energy_fraction: f64,
    /// Subtract the temporal mean of the training frames before the SVD.
    pub center_training: bool,
    /// Frames between incremental subspace refreshes.
    pub update_cadence: usize,
    /// Number of recent background estimates kept for the refresh.
    pub update_buffer: usize,
    /// Incremental-update forgetting factor and direction thresholds.
    pub subspace: UpdateParams,
    /// AR coefficient used for measurement noise cancellation; keep equal to
    /// the generating model's coefficient.
    pub ar_coefficient: f64,
    /// Sparse-solver stopping tolerance.
    pub solver_tol: f64,
    /// Sparse-solver iteration cap per frame.
    pub solver_max_iter: usize,
    /// Start each solve from the previous frame's solution.
    pub warm_start: bool,
    /// Data-fit radius schedule.
    pub epsilon: EpsilonConfig,
    /// Support-addition threshold as a multiple of the per-measurement
    /// residual level.
    pub alpha_add_scale: f64,
    /// Support-deletion threshold as a multiple of the same level.
    pub alpha_del_scale: f64,
    /// Cap on support additions per frame, as a fraction of the measurement
    /// count. When more candidates clear the addition threshold, the threshold
    /// is raised so only the strongest ones enter: a dense disturbance (e.g. a
    /// background direction not yet absorbed into the subspace estimate) makes
    /// the solver spread small mass over many off-support entries, and
    /// admitting them all at once strains the least-squares conditioning and
    /// recycles junk through the noise cancellation.
    pub max_additions_fraction: f64,
    /// Smallest acceptable singular value of the column-normalized
    /// least-squares submatrix in the support refinement.
    pub conditioning_floor: f64,
    /// Process/measurement noise intensities of the per-axis trackers.
    pub kalman: KalmanParams,
    /// Reduction used for centroid observations.
    pub centroid_stat: CentroidStat,
    /// Standard deviation of the perturbation applied to the true initial
    /// object positions when seeding the trackers.
    pub init_position_noise: f64,
    /// Standard deviation of the perturbation applied to the true initial
    /// object velocities.
    pub init_velocity_noise: f64,
    /// Seed of the initial-state perturbation.
    pub init_seed: u64,
    /// Use the true support as the predicted support. Validates the recovery
    /// and feedback plumbing independently of the tracker.
    pub oracle_support: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            energy_fraction: 0.9999,
            center_training: false,
            update_cadence: 10,
            update_buffer: 20,
            subspace: UpdateParams::default(),
            ar_coefficient: 0.95,
            solver_tol: 1e-6,
            solver_max_iter: 2000,
            warm_start: true,
            epsilon: EpsilonConfig::default(),
            alpha_add_scale: 2.0,
            alpha_del_scale: 4.0,
            max_additions_fraction: 0.125,
            conditioning_floor: 0.1,
            kalman: KalmanParams::default(),
            centroid_stat: CentroidStat::default(),
            init_position_noise: 1.0,
            init_velocity_noise: 0.1,
            init_seed: 0,
            oracle_support: false,
        }
    }
}

impl PipelineConfig {
    /// Checks that every tolerance and cadence is usable.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("energy_fraction", self.energy_fraction),
            ("ar_coefficient", self.ar_coefficient),
            ("solver_tol", self.solver_tol),
            ("epsilon.scale", self.epsilon.scale),
            ("epsilon.floor_fraction", self.epsilon.floor_fraction),
            ("epsilon.init", self.epsilon.init),
            ("alpha_add_scale", self.alpha_add_scale),
            ("alpha_del_scale", self.alpha_del_scale),
            ("max_additions_fraction", self.max_additions_fraction),
            ("conditioning_floor", self.conditioning_floor),
            ("kalman.process_noise", self.kalman.process_noise),
            ("kalman.measurement_noise", self.kalman.measurement_noise),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        if self.energy_fraction > 1.0 {
            return Err(Error::invalid("energy_fraction must lie in (0, 1]"));
        }
        if self.max_additions_fraction > 1.0 {
            return Err(Error::invalid("max_additions_fraction must lie in (0, 1]"));
        }
        if !(self.ar_coefficient < 1.0) {
            return Err(Error::invalid("ar_coefficient must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.epsilon.smoothing) {
            return Err(Error::invalid("epsilon.smoothing must lie in [0, 1)"));
        }
        if self.update_cadence == 0 || self.update_buffer == 0 {
            return Err(Error::invalid(
                "update_cadence and update_buffer must be at least 1",
            ));
        }
        if self.solver_max_iter == 0 {
            return Err(Error::invalid("solver_max_iter must be at least 1"));
        }
        if self.init_position_noise < 0.0 || self.init_velocity_noise < 0.0 {
            return Err(Error::invalid("initial-state noise must be nonnegative"));
        }
        Ok(())
    }
}

/// Everything a causal runner produced for one frame.
#[derive(Debug, Clone)]
pub struct FrameEstimate {
    /// Recovered sparse (foreground-minus-background) vector.
    pub sparse: Array1<f64>,
    /// Recovered background vector; `sparse + low_rank` equals the observed
    /// frame bitwise.
    pub low_rank: Array1<f64>,
    /// Foreground readout: the observed frame on the updated support, zero
    /// elsewhere.
    pub overlay: Array1<f64>,
    /// Support predicted before the frame was seen (empty for the plain
    /// runner, which predicts nothing).
    pub support_pred: Vec<usize>,
    /// Support after threshold/least-squares refinement.
    pub support_upd: Vec<usize>,
    /// Sparse-solver iterations spent on this frame.
    pub solver_iters: usize,
    /// Whether the sparse solver certified convergence.
    pub converged: bool,
    /// Data-fit radius used for this frame.
    pub epsilon: f64,
    /// Subspace rank in effect while this frame was processed.
    pub rank: usize,
}

/// Output of one causal run over a scene.
#[derive(Debug)]
pub struct RunOutput {
    /// Per-frame estimates in frame order.
    pub frames: Vec<FrameEstimate>,
    /// Per-frame metrics against the scene's ground truth.
    pub rows: Vec<MetricsRow>,
    /// Estimated object positions per frame (frame → object → axis); empty
    /// for the plain runner.
    pub track_positions: Vec<Vec<Vec<f64>>>,
    /// Frames on which the sparse solver exhausted its budget.
    pub nonconverged_frames: usize,
    /// Frames on which support refinement had to escalate its addition
    /// threshold beyond the standard retry to stay well conditioned.
    pub escalated_frames: usize,
    /// Orthogonality defect of the subspace estimate after each incremental
    /// refresh, in refresh order (see
    /// [`SubspaceEstimate::orthogonality_defect`]).
    pub update_defects: Vec<f64>,
    /// Subspace rank after the last frame.
    pub final_rank: usize,
    /// Wall-clock time of the run.
    pub elapsed: Duration,
}

/// Batch-initializes the background subspace from training frames.
pub fn initial_subspace(
    training: &FrameSequence,
    cfg: &PipelineConfig,
) -> Result<SubspaceEstimate> {
    subspace::estimate_initial_pc(training, cfg.energy_fraction, cfg.center_training)
}

/// Runs the support-aided separation: Kalman-predicted supports feed the
/// partial-support solver, refined supports feed the trackers back.
pub fn run_suppred_modcs(
    scene: &Scene,
    objects: &[ObjectSpec],
    initial: &SubspaceEstimate,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    let trackers = init_trackers(objects, cfg)?;
    run_frames(
        scene,
        initial,
        cfg,
        Mode::Tracked {
            objects,
            trackers,
            oracle: cfg.oracle_support,
        },
    )
}

/// Runs the support-free baseline: the solver gets an empty known support and
/// the support estimate comes from the refinement step alone.
pub fn run_plain_rrpcp(
    scene: &Scene,
    initial: &SubspaceEstimate,
    cfg: &PipelineConfig,
) -> Result<RunOutput> {
    run_frames(scene, initial, cfg, Mode::Plain)
}

/// Scores per-frame estimates against ground truth.
///
/// Frames whose true sparse part is all-zero report no relative sparse error
/// (the flag column carries that state instead); support error columns count
/// set differences between estimated and true supports.
pub fn compute_metrics(
    frames: &[FrameEstimate],
    truth: &GroundTruth,
) -> Result<Vec<MetricsRow>> {
    if frames.len() != truth.sparse.len() {
        return Err(Error::dim(
            "compute_metrics frames",
            truth.sparse.len(),
            frames.len(),
        ));
    }
    let mut rows = Vec::with_capacity(frames.len());
    for (ti, est) in frames.iter().enumerate() {
        let s_true = &truth.sparse[ti];
        let l_true = &truth.background[ti];
        let t_true = &truth.supports[ti];
        if est.sparse.len() != s_true.len() {
            return Err(Error::dim(
                "compute_metrics frame length",
                s_true.len(),
                est.sparse.len(),
            ));
        }
        let s_true_norm = s_true.dot(s_true).sqrt();
        let l_true_norm = l_true.dot(l_true).sqrt();
        let diff_s = &est.sparse - s_true;
        let diff_l = &est.low_rank - l_true;
        rows.push(MetricsRow {
            frame: ti + 1,
            rel_err_s: if s_true_norm == 0.0 {
                None
            } else {
                Some(diff_s.dot(&diff_s).sqrt() / s_true_norm)
            },
            extras_pred: support::difference_count(&est.support_pred, t_true),
            misses_pred: support::difference_count(t_true, &est.support_pred),
            extras_upd: support::difference_count(&est.support_upd, t_true),
            misses_upd: support::difference_count(t_true, &est.support_upd),
            rel_err_l: if l_true_norm == 0.0 {
                0.0
            } else {
                diff_l.dot(&diff_l).sqrt() / l_true_norm
            },
            rank: est.rank,
            solver_iters: est.solver_iters,
            epsilon: est.epsilon,
            s_zero: s_true_norm == 0.0,
        });
    }
    Ok(rows)
}

/// Tracking variant of the shared frame loop.
enum Mode<'a> {
    Tracked {
        objects: &'a [ObjectSpec],
        trackers: Vec<ObjectTracker>,
        oracle: bool,
    },
    Plain,
}

/// Seeds one tracker per object from the configured truth plus Gaussian
/// perturbations of the stated strengths.
fn init_trackers(objects: &[ObjectSpec], cfg: &PipelineConfig) -> Result<Vec<ObjectTracker>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    rng.set_stream(0x12AC);
    objects
        .iter()
        .map(|obj| {
            let position: Vec<f64> = obj
                .initial_position
                .iter()
                .map(|&p| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    p + cfg.init_position_noise * n
                })
                .collect();
            let velocity: Vec<f64> = obj
                .initial_velocity
                .iter()
                .map(|&v| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v + cfg.init_velocity_noise * n
                })
                .collect();
            ObjectTracker::new(&position, &velocity)
        })
        .collect()
}

/// The shared causal loop.
fn run_frames(
    scene: &Scene,
    initial: &SubspaceEstimate,
    cfg: &PipelineConfig,
    mut mode: Mode<'_>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let horizon = scene.frames.len();
    let n = initial.ambient_dim();
    let shape = &scene.frames.shape;

    let mut sub = initial.clone();
    let mut solver = ModCsSolver::new(sub.complement.clone())?;
    let mut eps = cfg.epsilon.rule();
    let mut buffer: Vec<Array1<f64>> = Vec::new();
    let mut prev_background = Array1::<f64>::zeros(n);
    let mut warm: Option<Array1<f64>> = None;
    let mut frames_since_update = 0usize;

    let mut frames: Vec<FrameEstimate> = Vec::with_capacity(horizon);
    let mut track_positions: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut nonconverged = 0usize;
    let mut escalated = 0usize;
    let mut update_defects: Vec<f64> = Vec::new();

    for ti in 0..horizon {
        let t = ti + 1;
        let m_t = &scene.frames.frames[ti];
        let result: Result<()> = (|| {
            // 1. Refresh the subspace when due; the refreshed complement is
            //    what this frame's measurements are formed with.
            if frames_since_update >= cfg.update_cadence && !buffer.is_empty() {
                sub = subspace::update_pc(&sub, &buffer, &cfg.subspace, t)?;
                update_defects.push(sub.orthogonality_defect());
                solver = ModCsSolver::new(sub.complement.clone())?;
                warm = None;
                frames_since_update = 0;
                if std::env::var_os("RRPCP_DEBUG").is_some() {
                    let tsup = &scene.truth.supports[ti];
                    let energies: Vec<f64> = (0..sub.rank())
                        .map(|j| {
                            let col = sub.basis.column(j);
                            tsup.iter().map(|&i| col[i] * col[i]).sum()
                        })
                        .collect();
                    let max_energy = energies.iter().cloned().fold(0.0f64, f64::max);
                    let hot = energies.iter().filter(|&&e| e > 0.5).count();
                    eprintln!(
                        "refresh t={t} rank={} sv0={:.1} svmin={:.2} max_T_energy={max_energy:.3} hot={hot}",
                        sub.rank(),
                        sub.singular_values[0],
                        sub.singular_values[sub.rank() - 1],
                    );
                }
            }

            // 2. Project and cancel the predictable part of the background.
            let y = subspace::project(&sub, m_t)?;
            let y_canc = subspace::cancel_noise(&sub, &y, &prev_background, cfg.ar_coefficient)?;
            let y_norm = y_canc.dot(&y_canc).sqrt();

            // 3a. Predict the support.
            let support_pred: Vec<usize> = match &mut mode {
                Mode::Tracked {
                    objects,
                    trackers,
                    oracle,
                } => {
                    for tracker in trackers.iter_mut() {
                        tracker.predict(&cfg.kalman);
                    }
                    if *oracle {
                        scene.truth.supports[ti].clone()
                    } else {
                        let positions: Vec<Vec<f64>> =
                            trackers.iter().map(|tr| tr.position()).collect();
                        let widths: Vec<usize> =
                            objects.iter().map(|o| o.half_width).collect();
                        predict_support(shape, &positions, &widths)?.indices
                    }
                }
                Mode::Plain => Vec::new(),
            };

            // 3b. Recover the sparse part.
            let epsilon = eps.epsilon(y_norm);
            let options = SolverOptions {
                tol: Some(cfg.solver_tol),
                max_iter: Some(cfg.solver_max_iter),
                warm_start: warm.clone(),
            };
            let solved = solver.solve(&y_canc, &support_pred, epsilon, &options)?;
            if !solved.converged {
                nonconverged += 1;
            }

            // 3c. Refine the support. Thresholds scale with the estimated
            //     per-measurement residual level.
            let residual_level = eps
                .residual_estimate()
                .unwrap_or(epsilon)
                .max(cfg.epsilon.floor_fraction * y_norm);
            let sigma = residual_level / (sub.num_measurements() as f64).sqrt();
            let budget = ((cfg.max_additions_fraction * sub.num_measurements() as f64).ceil()
                as usize)
                .max(1);
            let alpha_add = bounded_alpha_add(
                &solved.solution,
                &support_pred,
                cfg.alpha_add_scale * sigma,
                budget,
            );
            let params = AddLsDelParams {
                alpha_add,
                alpha_del: cfg.alpha_del_scale * sigma,
                conditioning_floor: cfg.conditioning_floor,
            };
            let (support_upd, refined, did_escalate) = refine_support_resilient(
                &solved.solution,
                solver.matrix(),
                &y_canc,
                &support_pred,
                &params,
            )?;
            if did_escalate {
                escalated += 1;
            }

            // 3d. Observe centroids on the refined support and correct the
            //     trackers.
            if let Mode::Tracked {
                objects, trackers, ..
            } = &mut mode
            {
                if !objects.is_empty() {
                    let values: Vec<f64> = support_upd.iter().map(|&i| m_t[i]).collect();
                    let intensities: Vec<f64> = objects.iter().map(|o| o.intensity).collect();
                    let centers: Vec<Vec<f64>> =
                        trackers.iter().map(|tr| tr.position()).collect();
                    let observations = observe_centroids(
                        shape,
                        &support_upd,
                        &values,
                        &intensities,
                        &centers,
                        cfg.centroid_stat,
                    )?;
                    for (tracker, obs) in trackers.iter_mut().zip(&observations) {
                        tracker.update(obs, &cfg.kalman)?;
                    }
                }
                track_positions.push(trackers.iter().map(|tr| tr.position()).collect());
            }

            // 4. Feed back: foreground readout and an exactly-conserving
            //    background/sparse split.
            let mut overlay = Array1::<f64>::zeros(n);
            for &i in &support_upd {
                overlay[i] = m_t[i];
            }
            let (sparse, low_rank) = conserving_split(m_t, &refined);
            if std::env::var_os("RRPCP_DEBUG").is_some() {
                let ts = &scene.truth.sparse[ti];
                let diff = &sparse - ts;
                let leak = diff.dot(&diff).sqrt();
                let s_norm = ts.dot(ts).sqrt().max(1e-30);
                let tsup: std::collections::HashSet<usize> =
                    scene.truth.supports[ti].iter().copied().collect();
                let extras = support_upd.iter().filter(|i| !tsup.contains(i)).count();
                let misses = tsup
                    .iter()
                    .filter(|i| !support_upd.contains(i))
                    .count();
                let max_extra_val = support_upd
                    .iter()
                    .filter(|i| !tsup.contains(i))
                    .map(|&i| refined[i].abs())
                    .fold(0.0f64, f64::max);
                eprintln!(
                    "frame t={t} leak={leak:.4} rel={:.5} esc={did_escalate} |pred|={} |upd|={} ex={extras} mi={misses} maxex={max_extra_val:.2} eps={epsilon:.2} sig={sigma:.3} ynorm={y_norm:.1}",
                    leak / s_norm,
                    support_pred.len(),
                    support_upd.len()
                );
            }

            // 5. Advance the recursion.
            let data_residual = &y_canc - &solver.matrix().dot(&sparse);
            eps.observe(data_residual.dot(&data_residual).sqrt());
            warm = cfg.warm_start.then(|| solved.solution.clone());
            buffer.push(low_rank.clone());
            if buffer.len() > cfg.update_buffer {
                buffer.remove(0);
            }
            prev_background = low_rank.clone();
            frames_since_update += 1;

            frames.push(FrameEstimate {
                sparse,
                low_rank,
                overlay,
                support_pred,
                support_upd,
                solver_iters: solved.iterations,
                converged: solved.converged,
                epsilon,
                rank: sub.rank(),
            });
            Ok(())
        })();
        result.map_err(|e| e.at_frame(t))?;
    }

    let rows = compute_metrics(&frames, &scene.truth)?;
    Ok(RunOutput {
        frames,
        rows,
        track_positions,
        nonconverged_frames: nonconverged,
        escalated_frames: escalated,
        update_defects,
        final_rank: sub.rank(),
        elapsed: started.elapsed(),
    })
}

/// Least-squares refinement may debias an added entry, not amplify it: an
/// entry growing several times past its solver value (plus threshold slack)
/// means the submatrix is nearly singular along it, and such values are
/// treated as unusable even though the least-squares call itself succeeded.
const LS_GROWTH_FACTOR: f64 = 3.0;
const LS_GROWTH_SLACK: f64 = 2.0;

/// Raises the addition threshold just enough that at most `budget` candidate
/// entries clear it. Ties at the raised cutoff stay out, which keeps the
/// outcome deterministic.
fn bounded_alpha_add(s_hat: &Array1<f64>, known: &[usize], base: f64, budget: usize) -> f64 {
    let known: HashSet<usize> = known.iter().copied().collect();
    let mut magnitudes: Vec<f64> = s_hat
        .iter()
        .enumerate()
        .filter(|(i, v)| !known.contains(i) && v.abs() > base)
        .map(|(_, v)| v.abs())
        .collect();
    if magnitudes.len() <= budget {
        return base;
    }
    magnitudes.sort_unstable_by(|a, b| b.total_cmp(a));
    magnitudes[budget].max(base)
}

/// Support refinement that always produces a bounded estimate.
///
/// The refinement module already retries once with a doubled addition
/// threshold; when even that leaves the least-squares submatrix
/// ill-conditioned (a dense low-quality solver output can do this), or the
/// least squares amplifies an added entry far beyond its solver value, the
/// threshold escalates geometrically until the enlarged support is usable.
/// Should the whole ladder fail, the solver's own estimate masked to the
/// known support plus base-threshold candidates is used: it is
/// feasibility-bounded, so a frame never aborts and never feeds an amplified
/// artifact into the subspace update. Returns the final support, the refined
/// estimate, and whether escalation was needed.
fn refine_support_resilient(
    s_hat: &Array1<f64>,
    a: &Array2<f64>,
    y: &Array1<f64>,
    known_support: &[usize],
    params: &AddLsDelParams,
) -> Result<(Vec<usize>, Array1<f64>, bool)> {
    let known: HashSet<usize> = known_support.iter().copied().collect();
    let added_entries_sane = |support: &[usize], estimate: &Array1<f64>| {
        support.iter().all(|&i| {
            known.contains(&i)
                || estimate[i].abs()
                    <= LS_GROWTH_FACTOR * s_hat[i].abs() + LS_GROWTH_SLACK * params.alpha_add
        })
    };
    match add_ls_del_with_retry(s_hat, a, y, known_support, params) {
        Ok((support, estimate, _)) if added_entries_sane(&support, &estimate) => {
            return Ok((support, estimate, false));
        }
        Ok(_) | Err(Error::IllConditionedLs { .. }) => {}
        Err(e) => return Err(e),
    }
    let mut escalate = AddLsDelParams {
        // The retry already covered 2×; escalation continues from 4×.
        alpha_add: params.alpha_add.max(f64::MIN_POSITIVE) * 4.0,
        ..*params
    };
    for _ in 0..8 {
        match add_ls_del(s_hat, a, y, known_support, &escalate) {
            Ok((support, estimate, _)) if added_entries_sane(&support, &estimate) => {
                return Ok((support, estimate, true));
            }
            Ok(_) | Err(Error::IllConditionedLs { .. }) => escalate.alpha_add *= 4.0,
            Err(e) => return Err(e),
        }
    }
    let mut support: Vec<usize> = known_support.to_vec();
    support.extend(
        s_hat
            .iter()
            .enumerate()
            .filter(|(i, v)| !known.contains(i) && v.abs() > params.alpha_add)
            .map(|(i, _)| i),
    );
    support.sort_unstable();
    support.dedup();
    let mut estimate = Array1::<f64>::zeros(s_hat.len());
    for &i in &support {
        estimate[i] = s_hat[i];
    }
    Ok((support, estimate, true))
}

/// Splits a frame into sparse and background parts that sum back to the frame
/// bitwise.
///
/// Floating-point subtraction alone does not guarantee `l + s == m`; the pair
/// is alternated to a fixed point, and an entry that refuses to settle (it is
/// at rounding level anyway) falls back to (0, frame value), which conserves
/// trivially.
fn conserving_split(frame: &Array1<f64>, sparse_guess: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = frame.len();
    let mut sparse = Array1::<f64>::zeros(n);
    let mut low_rank = Array1::<f64>::zeros(n);
    for i in 0..n {
        let m = frame[i];
        let mut s = sparse_guess[i];
        let mut l = m - s;
        let mut settled = false;
        for _ in 0..4 {
            if l + s == m {
                settled = true;
                break;
            }
            s = m - l;
            if l + s == m {
                settled = true;
                break;
            }
            l = m - s;
        }
        if !settled {
            s = 0.0;
            l = m;
        }
        sparse[i] = s;
        low_rank[i] = l;
    }
    (sparse, low_rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcp::{per_frame_errors, PcpReport};
    use crate::synthdata::{
        compose, gen_background, gen_foreground, gen_training, BackgroundModel, BoundsPolicy,
        ScheduleEvent,
    };
    use crate::geom::ImageShape;

    /// 12×12 scene with an exactly low-rank background and one 3×3 block.
    fn miniature_scene(
        num_objects: usize,
        horizon: usize,
        seed: u64,
    ) -> (Scene, FrameSequence, Vec<ObjectSpec>) {
        let shape = ImageShape::new(vec![12, 12]).unwrap();
        let n = shape.num_pixels();
        let dirs = 20;
        let model = BackgroundModel::from_random_directions(
            n,
            dirs,
            vec![ScheduleEvent {
                time: 0,
                add: (0..dirs).collect(),
                begin_decay: vec![],
            }],
            0.95,
            vec![1.0; dirs],
            0.045,
            0.9,
            seed,
        )
        .unwrap();
        let objects: Vec<ObjectSpec> = [
            ObjectSpec {
                half_width: 1,
                intensity: 30.0,
                initial_position: vec![5.2, 4.8],
                initial_velocity: vec![0.08, 0.06],
                accel_variance: 1e-4,
            },
            ObjectSpec {
                half_width: 1,
                intensity: 18.0,
                initial_position: vec![8.6, 8.9],
                initial_velocity: vec![-0.07, 0.05],
                accel_variance: 1e-4,
            },
        ]
        .into_iter()
        .take(num_objects)
        .collect();
        let background = gen_background(&model, horizon, seed).unwrap();
        let foreground =
            gen_foreground(&objects, &shape, horizon, BoundsPolicy::Clamp, seed).unwrap();
        let scene = compose(&background, &foreground).unwrap();
        let training = gen_training(&model, 300, seed.wrapping_add(7)).unwrap();
        (scene, training, objects)
    }

    fn config_for_miniature() -> PipelineConfig {
        PipelineConfig {
            init_seed: 3,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_object_sequence_recovers_background() {
        let (scene, training, objects) = miniature_scene(0, 10, 11);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let out = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        for (ti, est) in out.frames.iter().enumerate() {
            let m = &scene.frames.frames[ti];
            let m_norm = m.dot(m).sqrt();
            let s_norm = est.sparse.dot(&est.sparse).sqrt();
            assert!(
                s_norm <= 1e-6 * m_norm.max(1.0),
                "frame {}: spurious sparse energy {s_norm:.3e}",
                ti + 1
            );
            assert!(out.rows[ti].s_zero);
            assert!(out.rows[ti].rel_err_s.is_none());
        }
    }

    #[test]
    fn oracle_support_mode_tracks_the_truth() {
        let (scene, training, objects) = miniature_scene(2, 12, 5);
        let cfg = PipelineConfig {
            oracle_support: true,
            ..config_for_miniature()
        };
        let sub = initial_subspace(&training, &cfg).unwrap();
        let out = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        for row in &out.rows {
            let err = row.rel_err_s.expect("objects present every frame");
            assert!(
                err < 1e-3,
                "frame {}: oracle-mode error {err:.3e} too large",
                row.frame
            );
            assert_eq!(row.extras_pred, 0);
            assert_eq!(row.misses_pred, 0);
        }
    }

    #[test]
    fn tracked_run_conserves_every_frame_bitwise() {
        let (scene, training, objects) = miniature_scene(2, 12, 8);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let out = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        assert_eq!(out.frames.len(), 12);
        for (ti, est) in out.frames.iter().enumerate() {
            let m = &scene.frames.frames[ti];
            for i in 0..m.len() {
                assert!(
                    est.low_rank[i] + est.sparse[i] == m[i],
                    "frame {} pixel {i}: split does not conserve",
                    ti + 1
                );
            }
            // Foreground readout agrees with the frame on the refined support
            // and vanishes elsewhere.
            for i in 0..m.len() {
                if support::contains(&est.support_upd, i) {
                    assert_eq!(est.overlay[i], m[i]);
                } else {
                    assert_eq!(est.overlay[i], 0.0);
                }
            }
        }
        assert_eq!(out.track_positions.len(), 12);
        assert_eq!(out.track_positions[0].len(), 2);
        // Twelve frames at the default cadence of ten: exactly one subspace
        // refresh, and it must leave the invariants intact.
        assert_eq!(out.update_defects.len(), 1);
        assert!(out.update_defects[0] <= 1e-10);
    }

    #[test]
    fn tracked_run_recovers_the_foreground_accurately() {
        let (scene, training, objects) = miniature_scene(2, 12, 8);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let out = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        let errors: Vec<f64> = out.rows.iter().filter_map(|r| r.rel_err_s).collect();
        let median = crate::report::median(&errors);
        assert!(
            median < 1e-2,
            "median relative sparse error {median:.3e} too large"
        );
    }

    #[test]
    fn plain_runner_reports_no_prediction() {
        let (scene, training, _objects) = miniature_scene(1, 8, 21);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let out = run_plain_rrpcp(&scene, &sub, &cfg).unwrap();
        assert!(out.track_positions.is_empty());
        for (ti, row) in out.rows.iter().enumerate() {
            assert_eq!(row.extras_pred, 0);
            assert_eq!(row.misses_pred, scene.truth.supports[ti].len());
        }
    }

    #[test]
    fn plain_runner_matches_support_aided_in_the_easy_regime() {
        // One 9-pixel object against 124 measurements: plain recovery
        // succeeds, so the two runners should agree closely.
        let (scene, training, objects) = miniature_scene(1, 10, 31);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let aided = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        let plain = run_plain_rrpcp(&scene, &sub, &cfg).unwrap();
        let med = |out: &RunOutput| {
            let errors: Vec<f64> = out.rows.iter().filter_map(|r| r.rel_err_s).collect();
            crate::report::median(&errors)
        };
        let med_aided = med(&aided);
        let med_plain = med(&plain);
        assert!(med_plain < 1e-2, "plain runner failed: {med_plain:.3e}");
        assert!(
            med_plain <= (2.0 * med_aided).max(1e-6),
            "plain {med_plain:.3e} vs aided {med_aided:.3e}"
        );
    }

    #[test]
    fn same_config_gives_identical_runs() {
        let (scene, training, objects) = miniature_scene(2, 10, 13);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let a = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        let b = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.sparse, fb.sparse);
            assert_eq!(fa.low_rank, fb.low_rank);
            assert_eq!(fa.support_upd, fb.support_upd);
        }
    }

    #[test]
    fn compute_metrics_matches_hand_computation() {
        let truth = GroundTruth {
            background: vec![
                Array1::from(vec![1.0, 2.0, 3.0]),
                Array1::from(vec![1.0, 2.0, 3.0]),
                Array1::from(vec![0.0, 0.0, 0.0]),
            ],
            overlay: vec![
                Array1::from(vec![0.0, 9.0, 0.0]),
                Array1::from(vec![0.0, 0.0, 0.0]),
                Array1::from(vec![0.0, 0.0, 0.0]),
            ],
            sparse: vec![
                Array1::from(vec![0.0, 7.0, 0.0]),
                Array1::from(vec![0.0, 0.0, 0.0]),
                Array1::from(vec![0.0, 0.0, 0.0]),
            ],
            supports: vec![vec![1], vec![], vec![]],
            states: vec![vec![], vec![], vec![]],
        };
        let zero = Array1::<f64>::zeros(3);
        let frames = vec![
            FrameEstimate {
                sparse: Array1::from(vec![0.0, 6.0, 0.5]),
                low_rank: Array1::from(vec![1.0, 3.0, 2.5]),
                overlay: zero.clone(),
                support_pred: vec![1],
                support_upd: vec![1, 2],
                solver_iters: 40,
                converged: true,
                epsilon: 0.25,
                rank: 2,
            },
            FrameEstimate {
                sparse: zero.clone(),
                low_rank: Array1::from(vec![1.0, 2.0, 3.0]),
                overlay: zero.clone(),
                support_pred: vec![0],
                support_upd: vec![],
                solver_iters: 7,
                converged: true,
                epsilon: 0.1,
                rank: 2,
            },
            FrameEstimate {
                sparse: zero.clone(),
                low_rank: Array1::from(vec![0.5, 0.0, 0.0]),
                overlay: zero.clone(),
                support_pred: vec![],
                support_upd: vec![],
                solver_iters: 3,
                converged: true,
                epsilon: 0.1,
                rank: 2,
            },
        ];
        let rows = compute_metrics(&frames, &truth).unwrap();

        // Frame 1: error vector (0, −1, 0.5), ‖S‖ = 7.
        let expected = (0.0f64 + 1.0 + 0.25).sqrt() / 7.0;
        assert!((rows[0].rel_err_s.unwrap() - expected).abs() < 1e-15);
        assert_eq!(rows[0].extras_pred, 0);
        assert_eq!(rows[0].misses_pred, 0);
        assert_eq!(rows[0].extras_upd, 1);
        assert_eq!(rows[0].misses_upd, 0);
        let expected_l = (0.0f64 + 1.0 + 0.25).sqrt() / (1.0f64 + 4.0 + 9.0).sqrt();
        assert!((rows[0].rel_err_l - expected_l).abs() < 1e-15);
        assert!(!rows[0].s_zero);

        // Frame 2: zero sparse truth, one spurious predicted pixel.
        assert!(rows[1].rel_err_s.is_none());
        assert!(rows[1].s_zero);
        assert_eq!(rows[1].extras_pred, 1);
        assert_eq!(rows[1].misses_pred, 0);
        assert_eq!(rows[1].rel_err_l, 0.0);

        // Frame 3: zero background truth reports a zero relative error by
        // convention.
        assert_eq!(rows[2].rel_err_l, 0.0);
        assert_eq!(rows[2].frame, 3);
    }

    #[test]
    fn metrics_agree_with_the_offline_convention_on_shared_estimates() {
        // Build one set of estimates and score it through both paths: the
        // offline column scorer and the causal scorer fed equivalent inputs.
        let n = 6;
        let horizon = 4;
        let mut low_rank = Array2::<f64>::zeros((n, horizon));
        let mut sparse = Array2::<f64>::zeros((n, horizon));
        let mut l_truth = Array2::<f64>::zeros((n, horizon));
        let mut s_truth = Array2::<f64>::zeros((n, horizon));
        for t in 0..horizon {
            for i in 0..n {
                l_truth[[i, t]] = ((i * 7 + t * 3) % 5) as f64 * 0.25 + 0.1;
                low_rank[[i, t]] = l_truth[[i, t]] + 0.01 * ((i + t) % 3) as f64;
            }
            s_truth[[t % n, t]] = 5.0 + t as f64;
            sparse[[(t + 1) % n, t]] = 4.0;
        }
        let report = PcpReport {
            low_rank: low_rank.clone(),
            sparse: sparse.clone(),
            iterations: 17,
            converged: true,
            feasibility: 0.0,
            objective_trace: vec![],
            completion_objective_trace: vec![],
            rank: 2,
        };
        let offline = per_frame_errors(&report, &l_truth, &s_truth).unwrap();

        let truth = GroundTruth {
            background: (0..horizon).map(|t| l_truth.column(t).to_owned()).collect(),
            overlay: (0..horizon).map(|t| s_truth.column(t).to_owned()).collect(),
            sparse: (0..horizon).map(|t| s_truth.column(t).to_owned()).collect(),
            supports: (0..horizon)
                .map(|t| {
                    (0..n)
                        .filter(|&i| s_truth[[i, t]] != 0.0)
                        .collect::<Vec<_>>()
                })
                .collect(),
            states: vec![vec![]; horizon],
        };
        let frames: Vec<FrameEstimate> = (0..horizon)
            .map(|t| {
                let s = sparse.column(t).to_owned();
                let support_upd: Vec<usize> =
                    (0..n).filter(|&i| s[i] != 0.0).collect();
                FrameEstimate {
                    sparse: s,
                    low_rank: low_rank.column(t).to_owned(),
                    overlay: Array1::zeros(n),
                    support_pred: vec![],
                    support_upd,
                    solver_iters: 17,
                    converged: true,
                    epsilon: 0.0,
                    rank: 2,
                }
            })
            .collect();
        let causal = compute_metrics(&frames, &truth).unwrap();

        assert_eq!(offline.len(), causal.len());
        for (a, b) in offline.iter().zip(&causal) {
            assert_eq!(a.frame, b.frame);
            assert_eq!(a.extras_pred, b.extras_pred);
            assert_eq!(a.misses_pred, b.misses_pred);
            assert_eq!(a.extras_upd, b.extras_upd);
            assert_eq!(a.misses_upd, b.misses_upd);
            assert_eq!(a.s_zero, b.s_zero);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs()));
            match (a.rel_err_s, b.rel_err_s) {
                (Some(x), Some(y)) => assert!(close(x, y)),
                (None, None) => {}
                other => panic!("sparse-error presence differs: {other:?}"),
            }
            assert!(close(a.rel_err_l, b.rel_err_l));
        }
    }

    #[test]
    fn conserving_split_settles_adversarial_values() {
        // Values chosen to produce inexact subtractions.
        let frame = Array1::from(vec![
            1.0,
            1e16,
            -3.125e-7,
            0.1 + 0.2,
            f64::MIN_POSITIVE,
            -7.7,
        ]);
        let guess = Array1::from(vec![
            0.3,
            1.000000000000001,
            1e9,
            0.1,
            -f64::MIN_POSITIVE * 0.5,
            7.7e-18,
        ]);
        let (s, l) = conserving_split(&frame, &guess);
        for i in 0..frame.len() {
            assert!(
                l[i] + s[i] == frame[i],
                "entry {i}: {} + {} != {}",
                l[i],
                s[i],
                frame[i]
            );
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for algo in Algorithm::ALL {
            let parsed: Algorithm = algo.name().parse().unwrap();
            assert_eq!(parsed, algo);
        }
        assert!("fft".parse::<Algorithm>().is_err());
        let parsed: Algorithm = "plain-rrpcp".parse().unwrap();
        assert_eq!(parsed, Algorithm::PlainRrpcp);
    }

    #[test]
    fn oracle_and_plain_runners_share_the_metrics_schema() {
        let (scene, training, objects) = miniature_scene(1, 6, 41);
        let cfg = config_for_miniature();
        let sub = initial_subspace(&training, &cfg).unwrap();
        let aided = run_suppred_modcs(&scene, &objects, &sub, &cfg).unwrap();
        let plain = run_plain_rrpcp(&scene, &sub, &cfg).unwrap();
        assert_eq!(aided.rows.len(), plain.rows.len());
        for (a, p) in aided.rows.iter().zip(&plain.rows) {
            assert_eq!(a.frame, p.frame);
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = PipelineConfig::default();
        assert!(good.validate().is_ok());
        let bad = PipelineConfig {
            solver_tol: 0.0,
            ..good.clone()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            update_cadence: 0,
            ..good.clone()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            ar_coefficient: 1.0,
            ..good
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pipeline_config_json_round_trip_with_defaults() {
        let parsed: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed.update_cadence, 10);
        assert_eq!(parsed.kalman.process_noise, 1e-4);
        let text = serde_json::to_string(&parsed).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.solver_max_iter, parsed.solver_max_iter);
        let err = serde_json::from_str::<PipelineConfig>("{\"no_such_knob\": 1}");
        assert!(err.is_err());
    }
}
