//! Synthetic scene generation: a slowly-varying low-rank background driven by
//! per-direction AR(1) coefficients, rigid moving blocks overlaid on top of it,
//! and their composition into observed frames with full ground truth.

use ndarray::prelude::*;
use ndarray_linalg::QR;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ImageShape;
use crate::support;

/// Fraction of the stationary amplitude a freshly added direction starts at.
pub const RAMP_START_FRACTION: f64 = 0.1;

/// Activation/deactivation event for background directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    /// Frame index the event takes effect at; 0 marks directions active from
    /// the start (stationary, no ramp-in).
    pub time: usize,
    /// Direction indices switched on at `time`.
    #[serde(default)]
    pub add: Vec<usize>,
    /// Direction indices that begin decaying at `time`.
    #[serde(default)]
    pub begin_decay: Vec<usize>,
}

/// Low-rank background generator: columns of `directions` span the candidate
/// subspace, each active column carrying an independent AR(1) coefficient.
#[derive(Debug, Clone)]
pub struct BackgroundModel {
    /// Orthonormal n×m matrix of candidate principal directions.
    pub directions: Array2<f64>,
    /// Events defining the active set over time, sorted by `time`.
    pub schedule: Vec<ScheduleEvent>,
    /// AR(1) coefficient in (0,1).
    pub ar_coefficient: f64,
    /// Per-direction stationary standard deviations.
    pub stationary_stddevs: Vec<f64>,
    /// Per-frame additive increment of a new direction's amplitude scale
    /// (a scale of `RAMP_START_FRACTION` ramps linearly to 1).
    pub transient_growth_rate: f64,
    /// Per-frame multiplicative factor applied to decaying coefficients.
    pub decay_rate: f64,
}

/// Per-direction activity during sequence generation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Inactive,
    /// Active since the given frame (0 = stationary from the start).
    Active { since: usize },
    Decaying,
}

impl BackgroundModel {
    /// Builds a model with orthonormalized seeded Gaussian directions.
    pub fn from_random_directions(
        n: usize,
        num_directions: usize,
        schedule: Vec<ScheduleEvent>,
        ar_coefficient: f64,
        stationary_stddevs: Vec<f64>,
        transient_growth_rate: f64,
        decay_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_directions > n {
            return Err(Error::invalid(format!(
                "cannot orthonormalize {num_directions} directions in dimension {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xD1BE);
        let gaussian: Array2<f64> =
            Array2::from_shape_fn((n, num_directions), |_| StandardNormal.sample(&mut rng));
        let (q, _r) = gaussian.qr()?;
        let model = BackgroundModel {
            directions: q,
            schedule,
            ar_coefficient,
            stationary_stddevs,
            transient_growth_rate,
            decay_rate,
        };
        model.validate()?;
        Ok(model)
    }

    /// Ambient dimension n.
    pub fn ambient_dim(&self) -> usize {
        self.directions.nrows()
    }

    /// Number of candidate directions m.
    pub fn num_directions(&self) -> usize {
        self.directions.ncols()
    }

    /// Direction indices active from the start (time-0 events).
    pub fn initial_directions(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .schedule
            .iter()
            .filter(|e| e.time == 0)
            .flat_map(|e| e.add.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_directions();
        if !(self.ar_coefficient >= 0.0 && self.ar_coefficient < 1.0) {
            return Err(Error::invalid(format!(
                "ar_coefficient must lie in [0,1), got {}",
                self.ar_coefficient
            )));
        }
        if self.stationary_stddevs.len() != m {
            return Err(Error::dim(
                "stationary_stddevs",
                m,
                self.stationary_stddevs.len(),
            ));
        }
        if self.stationary_stddevs.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("stationary stddevs must be positive"));
        }
        if !(self.transient_growth_rate > 0.0) || !(self.decay_rate > 0.0 && self.decay_rate < 1.0)
        {
            return Err(Error::invalid(
                "transient_growth_rate must be > 0 and decay_rate in (0,1)",
            ));
        }
        let gram = self.directions.t().dot(&self.directions);
        let eye = Array2::<f64>::eye(m);
        let max_dev = (&gram - &eye)
            .iter()
            .fold(0.0f64, |acc, &v| acc.max(v.abs()));
        if max_dev > 1e-10 {
            return Err(Error::invalid(format!(
                "direction matrix is not orthonormal (max |U'U - I| = {max_dev:.3e})"
            )));
        }
        // Schedule sanity: known indices, no double-activation, decay only on
        // directions previously activated.
        let mut activity = vec![false; m];
        let mut sorted: Vec<&ScheduleEvent> = self.schedule.iter().collect();
        sorted.sort_by_key(|e| e.time);
        for event in sorted {
            for &i in &event.add {
                if i >= m {
                    return Err(Error::invalid(format!(
                        "schedule adds direction {i} but the model has {m}"
                    )));
                }
                if activity[i] {
                    return Err(Error::invalid(format!(
                        "schedule activates direction {i} twice"
                    )));
                }
                activity[i] = true;
            }
            for &i in &event.begin_decay {
                if i >= m {
                    return Err(Error::invalid(format!(
                        "schedule decays direction {i} but the model has {m}"
                    )));
                }
                if !activity[i] {
                    return Err(Error::invalid(format!(
                        "schedule decays direction {i} before activating it"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generated background frames plus the coefficient trace behind them.
#[derive(Debug, Clone)]
pub struct BackgroundSequence {
    /// L_t for t = 1..=horizon.
    pub frames: Vec<Array1<f64>>,
    /// Per-frame coefficient vectors (length m, zero off the active set).
    pub coefficients: Vec<Array1<f64>>,
}

/// Runs the AR(1) background model forward for `horizon` frames.
pub fn gen_background(
    model: &BackgroundModel,
    horizon: usize,
    seed: u64,
) -> Result<BackgroundSequence> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    model.validate()?;
    let m = model.num_directions();
    let f = model.ar_coefficient;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xBA5E);

    let mut activity = vec![Activity::Inactive; m];
    let mut coeffs = Array1::<f64>::zeros(m);
    let mut frames = Vec::with_capacity(horizon);
    let mut trace = Vec::with_capacity(horizon);

    for t in 1..=horizon {
        apply_events(model, &mut activity, &mut coeffs, &mut rng, t)?;
        for i in 0..m {
            match activity[i] {
                Activity::Inactive => {}
                Activity::Active { since } => {
                    if since == t {
                        continue; // initial draw already made by apply_events
                    }
                    let scale = ramp_scale(model, since, t);
                    let sigma_noise =
                        scale * model.stationary_stddevs[i] * (1.0 - f * f).sqrt();
                    let nu: f64 = StandardNormal.sample(&mut rng);
                    coeffs[i] = f * coeffs[i] + sigma_noise * nu;
                }
                Activity::Decaying => {
                    coeffs[i] *= model.decay_rate;
                }
            }
        }
        frames.push(model.directions.dot(&coeffs));
        trace.push(coeffs.clone());
    }
    Ok(BackgroundSequence {
        frames,
        coefficients: trace,
    })
}

/// Amplitude scale of a direction added at `since`, evaluated at frame `t`.
fn ramp_scale(model: &BackgroundModel, since: usize, t: usize) -> f64 {
    if since == 0 {
        return 1.0; // initial directions are stationary from the start
    }
    let steps = (t - since) as f64;
    (RAMP_START_FRACTION + model.transient_growth_rate * steps).min(1.0)
}

fn apply_events(
    model: &BackgroundModel,
    activity: &mut [Activity],
    coeffs: &mut Array1<f64>,
    rng: &mut ChaCha8Rng,
    t: usize,
) -> Result<()> {
    for event in &model.schedule {
        // Time-0 events arm the initial set when the first frame is built.
        let effective = event.time.max(1);
        if effective != t {
            continue;
        }
        for &i in &event.add {
            activity[i] = Activity::Active { since: event.time };
            let scale = ramp_scale(model, event.time, t);
            let nu: f64 = StandardNormal.sample(rng);
            coeffs[i] = scale * model.stationary_stddevs[i] * nu;
        }
        for &i in &event.begin_decay {
            activity[i] = Activity::Decaying;
        }
    }
    Ok(())
}

/// Training sequence: only the time-0 directions, stationary throughout.
pub fn gen_training(model: &BackgroundModel, length: usize, seed: u64) -> Result<FrameSequence> {
    model.validate()?;
    let initial = model.initial_directions();
    if length < initial.len() {
        return Err(Error::invalid(format!(
            "training length {length} is below the {} initial directions",
            initial.len()
        )));
    }
    let f = model.ar_coefficient;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7EA1);
    let m = model.num_directions();
    let mut coeffs = Array1::<f64>::zeros(m);
    for &i in &initial {
        let nu: f64 = StandardNormal.sample(&mut rng);
        coeffs[i] = model.stationary_stddevs[i] * nu;
    }
    let mut frames = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            for &i in &initial {
                let sigma_noise = model.stationary_stddevs[i] * (1.0 - f * f).sqrt();
                let nu: f64 = StandardNormal.sample(&mut rng);
                coeffs[i] = f * coeffs[i] + sigma_noise * nu;
            }
        }
        frames.push(model.directions.dot(&coeffs));
    }
    let n = model.ambient_dim();
    Ok(FrameSequence {
        shape: ImageShape::new(vec![n])?,
        frames,
    })
}

/// What to do when a moving object's square would cross the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsPolicy {
    /// Clamp the position into range and zero the offending velocity axis.
    Clamp,
    /// Abort generation naming the frame and object.
    Error,
}

impl Default for BoundsPolicy {
    fn default() -> Self {
        BoundsPolicy::Clamp
    }
}

/// A rigid square block moving with constant velocity plus small random
/// acceleration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Half-width w: the block covers (2w+1) pixels per axis.
    pub half_width: usize,
    /// Constant pixel intensity painted on the block.
    pub intensity: f64,
    /// Initial position per axis (real-valued pixels).
    pub initial_position: Vec<f64>,
    /// Initial velocity per axis (pixels/frame).
    pub initial_velocity: Vec<f64>,
    /// Variance q of the per-frame velocity perturbation.
    pub accel_variance: f64,
}

/// True kinematic state of one object on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// Generated foreground: overlays, their supports, and true object states.
#[derive(Debug, Clone)]
pub struct ForegroundSequence {
    pub shape: ImageShape,
    /// O_t for t = 1..=horizon.
    pub overlays: Vec<Array1<f64>>,
    /// T_t as canonical supports.
    pub supports: Vec<Vec<usize>>,
    /// Per-frame, per-object true states.
    pub states: Vec<Vec<ObjectState>>,
}

/// Validates object specs against the image shape at their initial positions.
pub fn validate_objects(objects: &[ObjectSpec], shape: &ImageShape) -> Result<()> {
    let d = shape.ndim();
    for (idx, obj) in objects.iter().enumerate() {
        if obj.initial_position.len() != d || obj.initial_velocity.len() != d {
            return Err(Error::dim("object axes", d, obj.initial_position.len()));
        }
        if !obj.intensity.is_finite() || obj.intensity == 0.0 {
            return Err(Error::invalid(format!(
                "object {idx} intensity must be finite and nonzero"
            )));
        }
        if obj
            .initial_position
            .iter()
            .chain(&obj.initial_velocity)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid(format!(
                "object {idx} position and velocity must be finite"
            )));
        }
        // `>= 0` written as a negated `<` would let NaN through.
        if !(obj.accel_variance >= 0.0) {
            return Err(Error::invalid(format!(
                "object {idx} accel_variance must be ≥ 0"
            )));
        }
        for (axis, &p) in obj.initial_position.iter().enumerate() {
            let w = obj.half_width as f64;
            let dim = shape.dims[axis] as f64;
            let c = p.round();
            // Compared in floating point: positions are unbounded input, so
            // integer arithmetic here could overflow before the test fails.
            if !(c - w >= 0.0 && c + w <= dim - 1.0) {
                return Err(Error::invalid(format!(
                    "object {idx} does not fit in the image at t=0 (axis {axis})"
                )));
            }
        }
    }
    for i in 0..objects.len() {
        for j in (i + 1)..objects.len() {
            if objects[i].intensity == objects[j].intensity {
                return Err(Error::invalid(format!(
                    "objects {i} and {j} share intensity {}; intensities must be distinct",
                    objects[i].intensity
                )));
            }
        }
    }
    Ok(())
}

/// Support box of a single object centered at the rounded position.
pub fn object_box(shape: &ImageShape, position: &[f64], half_width: usize) -> Vec<usize> {
    let w = half_width as i64;
    let lo: Vec<i64> = position.iter().map(|p| p.round() as i64 - w).collect();
    let hi: Vec<i64> = position.iter().map(|p| p.round() as i64 + w).collect();
    shape.box_indices(&lo, &hi)
}

/// Simulates constant-velocity motion with truncated-Gaussian acceleration and
/// paints each object's square, replacing background pixels on its support.
pub fn gen_foreground(
    objects: &[ObjectSpec],
    shape: &ImageShape,
    horizon: usize,
    policy: BoundsPolicy,
    seed: u64,
) -> Result<ForegroundSequence> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    validate_objects(objects, shape)?;
    let n = shape.num_pixels();
    let d = shape.ndim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xF04E);

    let mut positions: Vec<Vec<f64>> = objects.iter().map(|o| o.initial_position.clone()).collect();
    let mut velocities: Vec<Vec<f64>> =
        objects.iter().map(|o| o.initial_velocity.clone()).collect();

    let mut overlays = Vec::with_capacity(horizon);
    let mut supports = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon);

    for t in 1..=horizon {
        for (obj_idx, obj) in objects.iter().enumerate() {
            for axis in 0..d {
                let accel = truncated_gaussian(&mut rng, obj.accel_variance);
                positions[obj_idx][axis] += velocities[obj_idx][axis];
                velocities[obj_idx][axis] += accel;
                let w = obj.half_width as f64;
                let hi = shape.dims[axis] as f64 - 1.0 - w;
                let p = positions[obj_idx][axis];
                // The square must stay inside after rounding the center.
                if p.round() < w || p.round() > hi.round() {
                    match policy {
                        BoundsPolicy::Error => {
                            return Err(Error::ObjectLeftImage {
                                object: obj_idx,
                                frame: t,
                            })
                        }
                        BoundsPolicy::Clamp => {
                            positions[obj_idx][axis] = p.clamp(w, hi);
                            velocities[obj_idx][axis] = 0.0;
                        }
                    }
                }
            }
        }
        let mut overlay = Array1::<f64>::zeros(n);
        let mut frame_support: Vec<usize> = Vec::new();
        for (obj_idx, obj) in objects.iter().enumerate() {
            let ids = object_box(shape, &positions[obj_idx], obj.half_width);
            for &i in &ids {
                overlay[i] = obj.intensity;
            }
            frame_support = support::union(&frame_support, &ids);
        }
        overlays.push(overlay);
        supports.push(frame_support);
        states.push(
            (0..objects.len())
                .map(|i| ObjectState {
                    position: positions[i].clone(),
                    velocity: velocities[i].clone(),
                })
                .collect(),
        );
    }
    Ok(ForegroundSequence {
        shape: shape.clone(),
        overlays,
        supports,
        states,
    })
}

/// Zero-mean Gaussian with variance q, rejection-sampled into ±3√q.
fn truncated_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> f64 {
    if variance == 0.0 {
        return 0.0;
    }
    let sigma = variance.sqrt();
    loop {
        let draw: f64 = StandardNormal.sample(rng);
        let a = sigma * draw;
        if a.abs() <= 3.0 * sigma {
            return a;
        }
    }
}

/// Observable frames plus everything needed to score an estimator against them.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub shape: ImageShape,
    pub frames: Vec<Array1<f64>>,
}

impl FrameSequence {
    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-frame ground truth of a composed scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub background: Vec<Array1<f64>>,
    pub overlay: Vec<Array1<f64>>,
    pub sparse: Vec<Array1<f64>>,
    pub supports: Vec<Vec<usize>>,
    pub states: Vec<Vec<ObjectState>>,
}

/// A composed scene: observable frames plus ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub frames: FrameSequence,
    pub truth: GroundTruth,
}

/// Overlays the foreground onto the background: observed pixels come from the
/// background off-support and from the object intensities on-support; the
/// equivalent additive sparse part is their difference on-support.
pub fn compose(
    background: &BackgroundSequence,
    foreground: &ForegroundSequence,
) -> Result<Scene> {
    if background.frames.len() != foreground.overlays.len() {
        return Err(Error::dim(
            "compose frame count",
            background.frames.len(),
            foreground.overlays.len(),
        ));
    }
    let n = foreground.shape.num_pixels();
    let horizon = background.frames.len();
    let mut frames = Vec::with_capacity(horizon);
    let mut sparse = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let l = &background.frames[t];
        if l.len() != n {
            return Err(Error::dim("compose pixel count", n, l.len()));
        }
        let o = &foreground.overlays[t];
        let mut m = l.clone();
        let mut s = Array1::<f64>::zeros(n);
        for &i in &foreground.supports[t] {
            m[i] = o[i];
            s[i] = o[i] - l[i];
        }
        frames.push(m);
        sparse.push(s);
    }
    Ok(Scene {
        frames: FrameSequence {
            shape: foreground.shape.clone(),
            frames,
        },
        truth: GroundTruth {
            background: background.frames.clone(),
            overlay: foreground.overlays.clone(),
            sparse,
            supports: foreground.supports.clone(),
            states: foreground.states.clone(),
        },
    })
}
