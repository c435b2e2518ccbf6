//! Bilinear sampling at fractional coordinates with clamp-to-edge borders.
//!
//! Coordinates are continuous pixel positions: integer values land on pixel
//! centers. Points outside `[0, H-1] x [0, W-1]` are clamped onto the border
//! before interpolation, so a spatially constant field samples to the same
//! constant everywhere.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Field2D, NeighborField};

/// Continuous `(row, col)` position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub row: f64,
    pub col: f64,
}

impl SamplePoint {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }
}

/// Precomputed bilinear stencil for one sample point on a fixed grid shape.
///
/// Corners are ordered `(r0,c0), (r0,c1), (r1,c0), (r1,c1)` and stored as
/// flat row-major indices. `row_free`/`col_free` are false when the
/// coordinate was clamped, which zeroes the matching coordinate derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearTap {
    pub corners: [usize; 4],
    pub frac_row: f64,
    pub frac_col: f64,
    pub row_free: bool,
    pub col_free: bool,
}

/// Linear interpolation that returns `u` at `t = 0`, `v` at `t = 1` and `u`
/// when `u == v`, all exactly.
#[inline]
fn lerp(u: f64, v: f64, t: f64) -> f64 {
    if t <= 0.5 {
        u + t * (v - u)
    } else {
        v - (1.0 - t) * (v - u)
    }
}

/// Splits one axis coordinate into `(lower index, upper index, fraction, free)`.
#[inline]
fn axis(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    let hi = (len - 1) as f64;
    if len == 1 {
        return (0, 0, 0.0, false);
    }
    let free = (0.0..=hi).contains(&coord);
    let c = coord.clamp(0.0, hi);
    // The last cell is [len-2, len-1] so that c == len-1 gets fraction 1.
    let lo = (c.floor() as usize).min(len - 2);
    (lo, lo + 1, c - lo as f64, free)
}

impl BilinearTap {
    #[inline]
    pub fn new(height: usize, width: usize, point: SamplePoint) -> Self {
        let (r0, r1, a, row_free) = axis(point.row, height);
        let (c0, c1, b, col_free) = axis(point.col, width);
        Self {
            corners: [
                r0 * width + c0,
                r0 * width + c1,
                r1 * width + c0,
                r1 * width + c1,
            ],
            frac_row: a,
            frac_col: b,
            row_free,
            col_free,
        }
    }

    /// Interpolation weights for the four corners; they sum to 1.
    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (a, b) = (self.frac_row, self.frac_col);
        [(1.0 - a) * (1.0 - b), (1.0 - a) * b, a * (1.0 - b), a * b]
    }

    #[inline]
    pub fn sample(&self, values: &[f64]) -> f64 {
        // nested lerps: exact on constant data and at integer positions
        let (a, b) = (self.frac_row, self.frac_col);
        let c = self.corners;
        let (v00, v01, v10, v11) = (values[c[0]], values[c[1]], values[c[2]], values[c[3]]);
        lerp(lerp(v00, v01, b), lerp(v10, v11, b), a)
    }

    /// Partial derivatives of the sampled value with respect to the row and
    /// column coordinate.
    #[inline]
    pub fn coord_grad(&self, values: &[f64]) -> (f64, f64) {
        let (a, b) = (self.frac_row, self.frac_col);
        let c = self.corners;
        let (v00, v01, v10, v11) = (values[c[0]], values[c[1]], values[c[2]], values[c[3]]);
        let d_row = if self.row_free {
            (1.0 - b) * (v10 - v00) + b * (v11 - v01)
        } else {
            0.0
        };
        let d_col = if self.col_free {
            (1.0 - a) * (v01 - v00) + a * (v11 - v10)
        } else {
            0.0
        };
        (d_row, d_col)
    }
}

/// Derivatives of one bilinear sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    /// `(flat index, weight)` for the four corners, i.e. d value / d field.
    pub corner_weights: [(usize, f64); 4],
    pub d_row: f64,
    pub d_col: f64,
}

pub fn sample(field: &Field2D, point: SamplePoint) -> f64 {
    BilinearTap::new(field.height(), field.width(), point).sample(field.values())
}

pub fn sample_grad(field: &Field2D, point: SamplePoint) -> SampleGrad {
    let tap = BilinearTap::new(field.height(), field.width(), point);
    let w = tap.weights();
    let (d_row, d_col) = tap.coord_grad(field.values());
    SampleGrad {
        corner_weights: std::array::from_fn(|i| (tap.corners[i], w[i])),
        d_row,
        d_col,
    }
}

/// Bilinear taps for every `(pixel, neighbor)` pair of a neighbor field,
/// laid out like the field itself.
pub fn taps(neighbors: &NeighborField) -> Vec<BilinearTap> {
    let (h, w) = neighbors.shape();
    let k = neighbors.k();
    let mut out = Vec::with_capacity(h * w * k);
    for (i, &[p, q]) in neighbors.offsets().iter().enumerate() {
        let pixel = i / k;
        let (m, n) = ((pixel / w) as f64, (pixel % w) as f64);
        out.push(BilinearTap::new(h, w, SamplePoint::new(m + p, n + q)));
    }
    out
}

/// Samples `field` at every neighbor position; entry `(m, n, k)` is the value
/// at `(m + p_k, n + q_k)`.
pub fn gather(field: &Field2D, neighbors: &NeighborField) -> Result<Vec<f64>> {
    if field.shape() != neighbors.shape() {
        return Err(Error::ShapeMismatch(format!(
            "field {:?} vs neighbor field {:?}",
            field.shape(),
            neighbors.shape()
        )));
    }
    Ok(gather_taps(field.values(), &taps(neighbors)))
}

pub(crate) fn gather_taps(values: &[f64], taps: &[BilinearTap]) -> Vec<f64> {
    taps.par_iter().map(|t| t.sample(values)).collect()
}
