//! Image geometry: axis-ordered shapes and linear pixel indexing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the image grid each frame vector is a flattening of.
///
/// Axes are row-major: for a 2D shape `[rows, cols]` the pixel `(i, j)` maps
/// to linear index `i * cols + j`. One-dimensional signals use a single axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageShape {
    pub dims: Vec<usize>,
}

impl ImageShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("image shape needs at least one axis"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("image axes must be nonzero"));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::invalid("image pixel count overflows"));
        }
        Ok(ImageShape { dims })
    }

    /// Number of axes (1 for signals, 2 for images).
    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Total number of pixels n.
    pub fn num_pixels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major linear index of an in-bounds pixel coordinate.
    pub fn linear_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dims.len());
        let mut idx = 0usize;
        for (c, d) in coords.iter().zip(&self.dims) {
            debug_assert!(c < d);
            idx = idx * d + c;
        }
        idx
    }

    /// Inverse of [`linear_index`](Self::linear_index).
    pub fn coords_of(&self, mut idx: usize) -> Vec<usize> {
        let mut coords = vec![0usize; self.dims.len()];
        for (slot, d) in coords.iter_mut().zip(&self.dims).rev() {
            *slot = idx % d;
            idx /= d;
        }
        coords
    }

    /// Linear indices of the axis-aligned box `lo[a]..=hi[a]` per axis,
    /// in ascending order. Bounds must already be clipped to the image.
    pub fn box_indices(&self, lo: &[i64], hi: &[i64]) -> Vec<usize> {
        debug_assert_eq!(lo.len(), self.dims.len());
        debug_assert_eq!(hi.len(), self.dims.len());
        let mut out = Vec::new();
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return out;
        }
        let mut cursor: Vec<i64> = lo.to_vec();
        'odometer: loop {
            let coords: Vec<usize> = cursor.iter().map(|&c| c as usize).collect();
            out.push(self.linear_index(&coords));
            for axis in (0..cursor.len()).rev() {
                if cursor[axis] < hi[axis] {
                    cursor[axis] += 1;
                    continue 'odometer;
                }
                cursor[axis] = lo[axis];
            }
            break;
        }
        out.sort_unstable();
        out
    }
}
