//! Principal-subspace estimation and maintenance: batch initialization from
//! training data, projection onto the orthogonal complement, AR noise
//! cancellation, and incremental updates from recent background estimates.

use ndarray::prelude::*;
use ndarray_linalg::{JobSvd, SVDDC, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::FrameSequence;

/// Orthonormal basis of the background subspace together with the explicit
/// complement operator used to form projected measurements.
#[derive(Debug, Clone)]
pub struct SubspaceEstimate {
    /// n×r orthonormal basis of the estimated subspace.
    pub basis: Array2<f64>,
    /// Singular values associated with the basis columns, descending.
    pub singular_values: Array1<f64>,
    /// (n−r)×n matrix with orthonormal rows spanning the complement.
    pub complement: Array2<f64>,
    /// Frame index of the most recent update (0 = training only).
    pub frame_of_last_update: usize,
}

impl SubspaceEstimate {
    /// Ambient dimension n.
    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Estimated rank r.
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Number of projected measurements n − r.
    pub fn num_measurements(&self) -> usize {
        self.complement.nrows()
    }

    /// Largest deviation from the orthogonality invariants; ≤ 1e-10 holds
    /// after construction and every update.
    pub fn orthogonality_defect(&self) -> f64 {
        let r = self.rank();
        let m = self.num_measurements();
        let btb = self.basis.t().dot(&self.basis) - Array2::<f64>::eye(r);
        let cct = self.complement.dot(&self.complement.t()) - Array2::<f64>::eye(m);
        let cross = self.complement.dot(&self.basis);
        let max = |a: &Array2<f64>| a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        max(&btb).max(max(&cct)).max(max(&cross))
    }
}

/// Parameters of the incremental update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateParams {
    /// Forgetting factor applied to existing singular values.
    pub forgetting: f64,
    /// A direction must reach this fraction of the largest singular value to
    /// be admitted as new.
    pub add_threshold: f64,
    /// An existing direction is dropped once it falls below this fraction of
    /// the largest singular value.
    pub delete_threshold: f64,
}

impl Default for UpdateParams {
    fn default() -> Self {
        UpdateParams {
            forgetting: 0.98,
            add_threshold: 0.05,
            delete_threshold: 0.01,
        }
    }
}

/// Batch initialization: SVD of the training frames, keeping the smallest
/// leading block carrying at least `energy_fraction` of squared singular mass.
///
/// Frames are used as-is (the generative model is zero-mean); pass
/// `center = true` to subtract the temporal mean first for non-synthetic data.
pub fn estimate_initial_pc(
    training: &FrameSequence,
    energy_fraction: f64,
    center: bool,
) -> Result<SubspaceEstimate> {
    if training.len() < 2 {
        return Err(Error::invalid("need at least 2 training frames"));
    }
    if !(energy_fraction > 0.0 && energy_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "energy_fraction must lie in (0,1], got {energy_fraction}"
        )));
    }
    let n = training.frames[0].len();
    let t = training.len();
    let mut stack = Array2::<f64>::zeros((n, t));
    for (j, frame) in training.frames.iter().enumerate() {
        if frame.len() != n {
            return Err(Error::dim("training frame", n, frame.len()));
        }
        stack.column_mut(j).assign(frame);
    }
    if center {
        let mean = stack.mean_axis(Axis(1)).expect("t >= 2");
        for mut col in stack.columns_mut() {
            col -= &mean;
        }
    }
    let (u_opt, sv, _) = stack.svddc(JobSvd::Some)?;
    let u = u_opt.ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;
    let total: f64 = sv.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::invalid("training frames are all zero"));
    }
    let mut rank = 0;
    let mut cum = 0.0;
    for &s in sv.iter() {
        if cum >= energy_fraction * total || s <= f64::EPSILON * sv[0] * (n.max(t) as f64) {
            break;
        }
        cum += s * s;
        rank += 1;
    }
    let rank = rank.max(1);
    if rank >= n {
        return Err(Error::EmptyComplement { rank, ambient: n });
    }
    let basis = u.slice(s![.., ..rank]).to_owned();
    let singular_values = sv.slice(s![..rank]).to_owned();
    let complement = complement_of(&basis)?;
    Ok(SubspaceEstimate {
        basis,
        singular_values,
        complement,
        frame_of_last_update: 0,
    })
}

/// Orthonormal basis of the complement of the column span, rows transposed.
///
/// Taken from the full orthogonal factor of the basis itself: the trailing
/// n−r left singular vectors of an n×r orthonormal matrix span its complement.
pub fn complement_of(basis: &Array2<f64>) -> Result<Array2<f64>> {
    let n = basis.nrows();
    let r = basis.ncols();
    if r >= n {
        return Err(Error::EmptyComplement { rank: r, ambient: n });
    }
    let (u_opt, _sv, _) = basis.svd(true, false)?;
    let u = u_opt.ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;
    Ok(u.slice(s![.., r..]).t().to_owned())
}

/// Projected measurement y = complement · frame.
pub fn project(sub: &SubspaceEstimate, frame: &Array1<f64>) -> Result<Array1<f64>> {
    if frame.len() != sub.ambient_dim() {
        return Err(Error::dim("project", sub.ambient_dim(), frame.len()));
    }
    Ok(sub.complement.dot(frame))
}

/// AR noise cancellation: y − f · complement · previous background estimate.
pub fn cancel_noise(
    sub: &SubspaceEstimate,
    y: &Array1<f64>,
    prev_background: &Array1<f64>,
    ar_coefficient: f64,
) -> Result<Array1<f64>> {
    if y.len() != sub.num_measurements() {
        return Err(Error::dim("cancel_noise y", sub.num_measurements(), y.len()));
    }
    if prev_background.len() != sub.ambient_dim() {
        return Err(Error::dim(
            "cancel_noise background",
            sub.ambient_dim(),
            prev_background.len(),
        ));
    }
    Ok(y - &(sub.complement.dot(prev_background) * ar_coefficient))
}

/// Incremental subspace update from a buffer of recent background estimates.
///
/// The buffer is split into its component inside the current span and the
/// orthonormalized residual outside it; a small augmented matrix of the
/// forgotten singular values and both coefficient blocks is decomposed, the
/// bases are rotated, weak new directions are rejected, stale old ones are
/// dropped, and the complement is recomputed from the refreshed basis.
pub fn update_pc(
    sub: &SubspaceEstimate,
    buffer: &[Array1<f64>],
    params: &UpdateParams,
    frame: usize,
) -> Result<SubspaceEstimate> {
    if buffer.is_empty() {
        return Err(Error::invalid("update buffer is empty"));
    }
    let n = sub.ambient_dim();
    let r = sub.rank();
    let b = buffer.len();
    let mut block = Array2::<f64>::zeros((n, b));
    for (j, v) in buffer.iter().enumerate() {
        if v.len() != n {
            return Err(Error::dim("update buffer vector", n, v.len()));
        }
        block.column_mut(j).assign(v);
    }

    // Coefficients inside the span and the residual outside it.
    let inside = sub.basis.t().dot(&block); // r×b
    let residual = &block - &sub.basis.dot(&inside); // n×b

    // Orthonormal basis of the genuinely new energy.
    let scale = block
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    let (ru_opt, rsv, _) = residual.svddc(JobSvd::Some)?;
    let ru = ru_opt.ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;
    let new_rank = rsv
        .iter()
        .filter(|&&s| s > 1e-12 * scale * (n as f64).sqrt())
        .count()
        .min(n - r);
    let fresh = ru.slice(s![.., ..new_rank]); // n×q
    let outside = fresh.t().dot(&residual); // q×b

    // Augmented small matrix: [γ·diag(σ), inside; 0, outside].
    let q = new_rank;
    let mut augmented = Array2::<f64>::zeros((r + q, r + b));
    for i in 0..r {
        augmented[[i, i]] = params.forgetting * sub.singular_values[i];
    }
    augmented.slice_mut(s![..r, r..]).assign(&inside);
    augmented.slice_mut(s![r.., r..]).assign(&outside);

    let (ku_opt, ksv, _) = augmented.svddc(JobSvd::Some)?;
    let ku = ku_opt.ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;

    // Rotated full basis in the ambient space: [basis, fresh] · ku.
    let mut joint = Array2::<f64>::zeros((n, r + q));
    joint.slice_mut(s![.., ..r]).assign(&sub.basis);
    joint.slice_mut(s![.., r..]).assign(&fresh);
    let rotated = joint.dot(&ku); // n×(r+q)

    // Selection: new directions must clear add_threshold; directions mostly
    // inside the old span survive until they fall below delete_threshold.
    let sigma_max = ksv.iter().cloned().fold(0.0f64, f64::max);
    let mut keep = Vec::new();
    for j in 0..ksv.len().min(r + q) {
        let s = ksv[j];
        let from_old: f64 = (0..r).map(|i| ku[[i, j]] * ku[[i, j]]).sum::<f64>().sqrt();
        let is_old = from_old >= std::f64::consts::FRAC_1_SQRT_2;
        let keep_it = if is_old {
            s >= params.delete_threshold * sigma_max
        } else {
            s >= params.add_threshold * sigma_max
        };
        if keep_it {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(Error::invalid("update would empty the subspace"));
    }
    if keep.len() >= n {
        return Err(Error::EmptyComplement {
            rank: keep.len(),
            ambient: n,
        });
    }
    let mut basis = Array2::<f64>::zeros((n, keep.len()));
    let mut singular_values = Array1::<f64>::zeros(keep.len());
    for (slot, &j) in keep.iter().enumerate() {
        basis.column_mut(slot).assign(&rotated.column(j));
        singular_values[slot] = ksv[j];
    }
    let complement = complement_of(&basis)?;
    Ok(SubspaceEstimate {
        basis,
        singular_values,
        complement,
        frame_of_last_update: frame,
    })
}

/// Principal angles (radians, ascending) between the column spans of two
/// orthonormal matrices.
///
/// Small angles are taken from the sine form sin θ = σ((I − AA')B), large ones
/// from the cosine form cos θ = σ(A'B); the cosine form alone cannot resolve
/// angles below ~1e-8 in double precision.
pub fn principal_angles(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("principal_angles", a.nrows(), b.nrows()));
    }
    let k = a.ncols().min(b.ncols());
    let gram = a.t().dot(b);
    let (_, cos_sv, _) = gram.svddc(JobSvd::None)?; // descending
    let residual = b - &a.dot(&gram);
    let (_, sin_sv, _) = residual.svddc(JobSvd::None)?; // descending
    let mut sin_asc: Vec<f64> = sin_sv.to_vec();
    sin_asc.reverse();
    let mut angles = Vec::with_capacity(k);
    for i in 0..k {
        let c = cos_sv.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
        let s = sin_asc.get(i).copied().unwrap_or(1.0).clamp(0.0, 1.0);
        angles.push(if c * c > 0.5 { s.asin() } else { c.acos() });
    }
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(Array1::from(angles))
}
