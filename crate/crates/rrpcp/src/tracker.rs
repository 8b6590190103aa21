//! Motion tracking for the overlaid objects: one scalar constant-velocity
//! Kalman filter per object and axis, box-shaped support prediction around
//! the predicted centers, and centroid observations extracted from the
//! recovered foreground.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ImageShape;
use crate::support;

/// Noise intensities shared by every axis filter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct KalmanParams {
    /// Per-step velocity random-walk variance (process noise).
    pub process_noise: f64,
    /// Centroid observation variance.
    pub measurement_noise: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        KalmanParams {
            process_noise: 1e-4,
            measurement_noise: 1e-3,
        }
    }
}

/// Scalar position/velocity filter for a single axis.
///
/// Dynamics: position += velocity each step, velocity perturbed by zero-mean
/// noise of variance `q`; the position alone is observed.
#[derive(Debug, Clone, Copy)]
pub struct AxisFilter {
    pub position: f64,
    pub velocity: f64,
    /// Covariance [[pp, pv], [pv, vv]].
    pub cov: [[f64; 2]; 2],
}

/// Tolerance on covariance eigenvalues: anything below this is a hard error.
const PSD_TOLERANCE: f64 = -1e-12;

impl AxisFilter {
    pub fn new(position: f64, velocity: f64, position_var: f64, velocity_var: f64) -> Self {
        AxisFilter {
            position,
            velocity,
            cov: [[position_var, 0.0], [0.0, velocity_var]],
        }
    }

    /// Time update: advances the state one step and inflates the covariance.
    pub fn predict(&mut self, process_noise: f64) {
        self.position += self.velocity;
        let [[pp, pv], [_, vv]] = self.cov;
        self.cov = [[pp + 2.0 * pv + vv, pv + vv], [pv + vv, vv + process_noise]];
    }

    /// Measurement update with an observed position.
    pub fn update(&mut self, observed: f64, measurement_noise: f64) -> Result<()> {
        let [[pp, pv], [_, vv]] = self.cov;
        let innovation_var = pp + measurement_noise;
        if innovation_var <= 0.0 {
            return Err(Error::invalid(format!(
                "non-positive innovation variance {innovation_var}"
            )));
        }
        let k0 = pp / innovation_var;
        let k1 = pv / innovation_var;
        let innovation = observed - self.position;
        self.position += k0 * innovation;
        self.velocity += k1 * innovation;
        // Σ − K (row 0 of Σ), then re-symmetrized.
        let new_pp = pp - k0 * pp;
        let new_pv = pv - k0 * pv;
        let new_vp = pv - k1 * pp;
        let new_vv = vv - k1 * pv;
        let off = 0.5 * (new_pv + new_vp);
        self.cov = [[new_pp, off], [off, new_vv]];
        self.check_psd()
    }

    /// Smallest covariance eigenvalue must stay above rounding level.
    fn check_psd(&self) -> Result<()> {
        let [[a, b], [_, d]] = self.cov;
        let tr = a + d;
        let det = a * d - b * b;
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        let min_eig = 0.5 * tr - disc;
        if min_eig < PSD_TOLERANCE {
            return Err(Error::invalid(format!(
                "covariance lost positive semidefiniteness (min eigenvalue {min_eig})"
            )));
        }
        Ok(())
    }
}

/// All axis filters of one tracked object.
#[derive(Debug, Clone)]
pub struct ObjectTracker {
    pub axes: Vec<AxisFilter>,
}

impl ObjectTracker {
    /// Starts a track at the given position and velocity guess with unit
    /// position variance and 0.1 velocity variance per axis.
    pub fn new(position: &[f64], velocity: &[f64]) -> Result<Self> {
        if position.len() != velocity.len() || position.is_empty() {
            return Err(Error::invalid("tracker position/velocity lengths differ"));
        }
        Ok(ObjectTracker {
            axes: position
                .iter()
                .zip(velocity)
                .map(|(&p, &v)| AxisFilter::new(p, v, 1.0, 0.1))
                .collect(),
        })
    }

    pub fn predict(&mut self, params: &KalmanParams) {
        for axis in &mut self.axes {
            axis.predict(params.process_noise);
        }
    }

    /// Updates every axis from a centroid observation; an invalid observation
    /// leaves the filter coasting on its prediction.
    pub fn update(&mut self, observation: &CentroidObservation, params: &KalmanParams) -> Result<()> {
        if !observation.valid {
            return Ok(());
        }
        if observation.position.len() != self.axes.len() {
            return Err(Error::dim(
                "centroid observation axes",
                self.axes.len(),
                observation.position.len(),
            ));
        }
        for (axis, &obs) in self.axes.iter_mut().zip(&observation.position) {
            axis.update(obs, params.measurement_noise)?;
        }
        Ok(())
    }

    pub fn position(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.position).collect()
    }
}

/// Box support predicted around one object's position.
#[derive(Debug, Clone)]
pub struct SupportPrediction {
    /// Canonical sorted pixel indices.
    pub indices: Vec<usize>,
    /// Whether any box center had to be pulled back inside the image.
    pub clamped: bool,
}

/// Predicts the support of one object: a (2w+1)^d box around the rounded
/// position, the center clamped so the box stays inside the image.
pub fn object_support(
    shape: &ImageShape,
    position: &[f64],
    half_width: usize,
) -> Result<SupportPrediction> {
    if position.len() != shape.ndim() {
        return Err(Error::dim("object_support axes", shape.ndim(), position.len()));
    }
    let w = half_width as i64;
    let mut lo = Vec::with_capacity(position.len());
    let mut hi = Vec::with_capacity(position.len());
    let mut clamped = false;
    for (axis, &p) in position.iter().enumerate() {
        let dim = shape.dims[axis] as i64;
        if dim < 2 * w + 1 {
            return Err(Error::invalid(format!(
                "box of half-width {half_width} cannot fit in axis {axis} of extent {dim}"
            )));
        }
        let mut center = p.round() as i64;
        let min_center = w;
        let max_center = dim - 1 - w;
        if center < min_center {
            center = min_center;
            clamped = true;
        } else if center > max_center {
            center = max_center;
            clamped = true;
        }
        lo.push(center - w);
        hi.push(center + w);
    }
    Ok(SupportPrediction {
        indices: shape.box_indices(&lo, &hi),
        clamped,
    })
}

/// Union of the per-object box predictions.
pub fn predict_support(
    shape: &ImageShape,
    positions: &[Vec<f64>],
    half_widths: &[usize],
) -> Result<SupportPrediction> {
    if positions.len() != half_widths.len() {
        return Err(Error::dim(
            "predict_support objects",
            positions.len(),
            half_widths.len(),
        ));
    }
    let mut indices = Vec::new();
    let mut clamped = false;
    for (pos, &w) in positions.iter().zip(half_widths) {
        let one = object_support(shape, pos, w)?;
        indices = support::union(&indices, &one.indices);
        clamped |= one.clamped;
    }
    Ok(SupportPrediction { indices, clamped })
}

/// Centroid extracted from the recovered foreground for one object.
#[derive(Debug, Clone)]
pub struct CentroidObservation {
    /// Per-axis centroid coordinate (meaningless when `valid` is false).
    pub position: Vec<f64>,
    /// False when no pixel was assigned to the object.
    pub valid: bool,
}

/// Centroid statistic over the assigned pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidStat {
    Mean,
    Median,
}

impl Default for CentroidStat {
    fn default() -> Self {
        CentroidStat::Mean
    }
}

/// Ties in the intensity assignment closer than this go to the object with
/// the nearest predicted center.
const INTENSITY_TIE: f64 = 1e-12;

/// Assigns each support pixel to the object whose nominal intensity is
/// closest to the pixel value (ties: nearest predicted center), then reduces
/// each object's pixel coordinates to a centroid.
pub fn observe_centroids(
    shape: &ImageShape,
    support_indices: &[usize],
    values: &[f64],
    intensities: &[f64],
    predicted_centers: &[Vec<f64>],
    stat: CentroidStat,
) -> Result<Vec<CentroidObservation>> {
    if support_indices.len() != values.len() {
        return Err(Error::dim(
            "observe_centroids values",
            support_indices.len(),
            values.len(),
        ));
    }
    if intensities.len() != predicted_centers.len() {
        return Err(Error::dim(
            "observe_centroids objects",
            intensities.len(),
            predicted_centers.len(),
        ));
    }
    let num_objects = intensities.len();
    let ndim = shape.ndim();
    let mut assigned: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); ndim]; num_objects];
    for (&idx, &value) in support_indices.iter().zip(values) {
        let coords = shape.coords_of(idx);
        let mut best = 0usize;
        let mut best_gap = f64::INFINITY;
        for (j, &intensity) in intensities.iter().enumerate() {
            let gap = (value - intensity).abs();
            if gap + INTENSITY_TIE < best_gap {
                best = j;
                best_gap = gap;
            } else if (gap - best_gap).abs() <= INTENSITY_TIE {
                // Tie: prefer the object whose predicted center is nearer.
                let dist = |obj: usize| -> f64 {
                    coords
                        .iter()
                        .zip(&predicted_centers[obj])
                        .map(|(&c, &p)| {
                            let d = c as f64 - p;
                            d * d
                        })
                        .sum()
                };
                if dist(j) < dist(best) {
                    best = j;
                    best_gap = gap;
                }
            }
        }
        for (axis, &c) in coords.iter().enumerate() {
            assigned[best][axis].push(c as f64);
        }
    }
    Ok(assigned
        .into_iter()
        .map(|axes| {
            let valid = !axes[0].is_empty();
            let position = axes
                .into_iter()
                .map(|mut coords| {
                    if coords.is_empty() {
                        return 0.0;
                    }
                    match stat {
                        CentroidStat::Mean => {
                            coords.iter().sum::<f64>() / coords.len() as f64
                        }
                        CentroidStat::Median => {
                            coords.sort_by(|a, b| a.partial_cmp(b).unwrap());
                            let n = coords.len();
                            if n % 2 == 1 {
                                coords[n / 2]
                            } else {
                                0.5 * (coords[n / 2 - 1] + coords[n / 2])
                            }
                        }
                    }
                })
                .collect();
            CentroidObservation { position, valid }
        })
        .collect())
}
