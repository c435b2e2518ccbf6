//! Grid containers shared by every stage of the pipeline.
//!
//! All grids are row-major with `(row, col)` indexing and the origin at the
//! top-left pixel. Multi-channel grids (neighbor offsets, affinities) keep the
//! channel index fastest: entry `(m, n, k)` lives at `(m * width + n) * k_len + k`.

use std::fmt;

use crate::error::{Error, Result};

/// Location and kind of the first invariant violation found by [`Validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub row: usize,
    pub col: usize,
    /// Channel index for multi-channel grids, `None` for scalar grids.
    pub channel: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    NonFinite(f64),
    OutOfRange { value: f64, lo: f64, hi: f64 },
    UnmaskedNonZero(f64),
    EmptyMask,
    Unstable { abs_sum: f64 },
    ReferenceMismatch { expected: f64, found: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.channel {
            Some(k) => write!(f, "at ({}, {}, {}): ", self.row, self.col, k)?,
            None => write!(f, "at ({}, {}): ", self.row, self.col)?,
        }
        match &self.kind {
            ViolationKind::NonFinite(v) => write!(f, "non-finite value {v}"),
            ViolationKind::OutOfRange { value, lo, hi } => {
                write!(f, "value {value} outside [{lo}, {hi}]")
            }
            ViolationKind::UnmaskedNonZero(v) => write!(f, "unobserved entry holds {v}"),
            ViolationKind::EmptyMask => write!(f, "mask has no observed entries"),
            ViolationKind::Unstable { abs_sum } => {
                write!(f, "absolute affinity sum {abs_sum} exceeds 1")
            }
            ViolationKind::ReferenceMismatch { expected, found } => {
                write!(f, "reference weight {found}, expected {expected}")
            }
        }
    }
}

/// Invariant checking for grid types. Returns the first violation in
/// row-major order.
pub trait Validate {
    fn validate(&self) -> std::result::Result<(), Violation>;
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDimensions { height, width });
    }
    Ok(())
}

fn first_non_finite(values: &[f64], width: usize, channels: usize) -> Option<Violation> {
    values.iter().position(|v| !v.is_finite()).map(|i| {
        let pixel = i / channels;
        Violation {
            row: pixel / width,
            col: pixel % width,
            channel: (channels > 1).then_some(i % channels),
            kind: ViolationKind::NonFinite(values[i]),
        }
    })
}

/// A dense `height x width` grid of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Field2D {
    /// Field with every entry equal to `fill`.
    pub fn filled(height: usize, width: usize, fill: f64) -> Result<Self> {
        Self::new(height, width, vec![fill; height.saturating_mul(width)])
    }

    /// Builds a field and checks that every value is finite.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let field = Self::from_vec(height, width, values)?;
        field.validate().map_err(Error::Invalid)?;
        Ok(field)
    }

    /// Builds a field checking only the shape. Use [`Validate::validate`] to
    /// inspect the values afterwards.
    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} field",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        check_dims(height, width)?;
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Replaces the whole value buffer, keeping the shape.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, values)
    }
}

impl Validate for Field2D {
    fn validate(&self) -> std::result::Result<(), Violation> {
        match first_non_finite(&self.values, self.width, 1) {
            Some(v) => Err(v),
            None => Ok(()),
        }
    }
}

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for a {height}x{width} grid",
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Self::new(height, width, vec![value; height.saturating_mul(width)])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch("mask intersection".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Mask::new(self.height, self.width, bits)
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let (h, w) = self.shape();
        let mut bits = vec![false; h * w];
        for m in 0..h {
            for n in 0..w {
                if !self.get(m, n) {
                    continue;
                }
                for i in m.saturating_sub(radius)..=(m + radius).min(h - 1) {
                    for j in n.saturating_sub(radius)..=(n + radius).min(w - 1) {
                        bits[i * w + j] = true;
                    }
                }
            }
        }
        Mask {
            height: h,
            width: w,
            bits,
        }
    }
}

/// Sparse depth observations: values are meters where `mask` is set and 0
/// elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    depth: Field2D,
    mask: Mask,
}

impl SparseDepth {
    pub fn new(depth: Field2D, mask: Mask) -> Result<Self> {
        if depth.shape() != mask.shape() {
            return Err(Error::ShapeMismatch("sparse depth and mask".into()));
        }
        let sparse = Self { depth, mask };
        sparse.validate().map_err(Error::Invalid)?;
        Ok(sparse)
    }

    /// Keeps `values` at masked pixels and zeroes the rest.
    pub fn from_masked(values: &Field2D, mask: Mask) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::ShapeMismatch("sparse depth and mask".into()));
        }
        let vals = values
            .values()
            .iter()
            .zip(mask.bits())
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect();
        Self::new(values.with_values(vals)?, mask)
    }

    pub fn depth(&self) -> &Field2D {
        &self.depth
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.depth.shape()
    }

    /// Observed samples as `(row, col, depth)` in row-major order.
    pub fn samples(&self) -> Vec<(usize, usize, f64)> {
        let w = self.depth.width();
        self.mask
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / w, i % w, self.depth.values()[i]))
            .collect()
    }
}

impl Validate for SparseDepth {
    fn validate(&self) -> std::result::Result<(), Violation> {
        self.depth.validate()?;
        let w = self.depth.width();
        for (i, (&v, &b)) in self.depth.values().iter().zip(self.mask.bits()).enumerate() {
            if !b && v != 0.0 {
                return Err(Violation {
                    row: i / w,
                    col: i % w,
                    channel: None,
                    kind: ViolationKind::UnmaskedNonZero(v),
                });
            }
        }
        if self.mask.count() == 0 {
            return Err(Violation {
                row: 0,
                col: 0,
                channel: None,
                kind: ViolationKind::EmptyMask,
            });
        }
        Ok(())
    }
}

/// Per-pixel confidence in `[0, 1]`. Out-of-range inputs are clamped on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Field2D);

impl ConfidenceMap {
    pub fn new(field: Field2D) -> Result<Self> {
        field.validate().map_err(Error::Invalid)?;
        let (h, w) = field.shape();
        let values = field.into_values().into_iter().map(clamp_unit).collect();
        Ok(Self(Field2D::from_vec(h, w, values)?))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Field2D::filled(height, width, value)?)
    }

    pub fn field(&self) -> &Field2D {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

impl Validate for ConfidenceMap {
    fn validate(&self) -> std::result::Result<(), Violation> {
        self.0.validate()?;
        let w = self.0.width();
        match self.0.values().iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(i) => Err(Violation {
                row: i / w,
                col: i % w,
                channel: None,
                kind: ViolationKind::OutOfRange {
                    value: self.0.values()[i],
                    lo: 0.0,
                    hi: 1.0,
                },
            }),
            None => Ok(()),
        }
    }
}

/// `K` fractional neighbor offsets `(p, q)` per pixel, in rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborField {
    height: usize,
    width: usize,
    k: usize,
    offsets: Vec<[f64; 2]>,
}

impl NeighborField {
    pub fn new(height: usize, width: usize, k: usize, offsets: Vec<[f64; 2]>) -> Result<Self> {
        let field = Self::from_vec(height, width, k, offsets)?;
        field.validate().map_err(Error::Invalid)?;
        Ok(field)
    }

    pub fn from_vec(height: usize, width: usize, k: usize, offsets: Vec<[f64; 2]>) -> Result<Self> {
        check_dims(height, width)?;
        if k == 0 {
            return Err(Error::Config("neighbor count K must be at least 1".into()));
        }
        if offsets.len() != height * width * k {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for a {height}x{width}x{k} neighbor field",
                offsets.len()
            )));
        }
        Ok(Self {
            height,
            width,
            k,
            offsets,
        })
    }

    /// The same offset list at every pixel.
    pub fn uniform(height: usize, width: usize, pattern: &[[f64; 2]]) -> Result<Self> {
        let offsets = pattern
            .iter()
            .copied()
            .cycle()
            .take(height.saturating_mul(width).saturating_mul(pattern.len()))
            .collect();
        Self::new(height, width, pattern.len(), offsets)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn offsets(&self) -> &[[f64; 2]] {
        &self.offsets
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[[f64; 2]] {
        let start = (row * self.width + col) * self.k;
        &self.offsets[start..start + self.k]
    }
}

impl Validate for NeighborField {
    fn validate(&self) -> std::result::Result<(), Violation> {
        let flat: Vec<f64> = self.offsets.iter().flatten().copied().collect();
        match first_non_finite(&flat, self.width, 2 * self.k) {
            Some(mut v) => {
                v.channel = v.channel.map(|c| c / 2);
                Err(v)
            }
            None => Ok(()),
        }
    }
}

/// Raw (unnormalized) affinities, `K` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    height: usize,
    width: usize,
    k: usize,
    raw: Vec<f64>,
}

impl AffinityField {
    pub fn new(height: usize, width: usize, k: usize, raw: Vec<f64>) -> Result<Self> {
        let field = Self::from_vec(height, width, k, raw)?;
        field.validate().map_err(Error::Invalid)?;
        Ok(field)
    }

    pub fn from_vec(height: usize, width: usize, k: usize, raw: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if k == 0 {
            return Err(Error::Config("neighbor count K must be at least 1".into()));
        }
        if raw.len() != height * width * k {
            return Err(Error::ShapeMismatch(format!(
                "{} affinities for a {height}x{width}x{k} field",
                raw.len()
            )));
        }
        Ok(Self {
            height,
            width,
            k,
            raw,
        })
    }

    pub fn filled(height: usize, width: usize, k: usize, value: f64) -> Result<Self> {
        Self::new(height, width, k, vec![value; height * width * k])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.k;
        &self.raw[start..start + self.k]
    }
}

impl Validate for AffinityField {
    fn validate(&self) -> std::result::Result<(), Violation> {
        match first_non_finite(&self.raw, self.width, self.k) {
            Some(v) => Err(v),
            None => Ok(()),
        }
    }
}

/// Normalized neighbor weights `w` and the reference weight `1 - sum(w)` per
/// pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAffinity {
    pub(crate) height: usize,
    pub(crate) width: usize,
    pub(crate) k: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) reference: Vec<f64>,
    /// Pixels where an always-normalizing scheme met an all-zero vector and
    /// fell back to identity propagation.
    pub(crate) degenerate: usize,
}

impl NormalizedAffinity {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.k;
        &self.weights[start..start + self.k]
    }

    pub fn degenerate_pixels(&self) -> usize {
        self.degenerate
    }
}

impl Validate for NormalizedAffinity {
    fn validate(&self) -> std::result::Result<(), Violation> {
        first_non_finite(&self.weights, self.width, self.k).map_or(Ok(()), Err)?;
        for (p, w) in self.weights.chunks(self.k).enumerate() {
            let (row, col) = (p / self.width, p % self.width);
            let abs_sum: f64 = w.iter().map(|v| v.abs()).sum();
            if abs_sum > 1.0 + 1e-12 {
                return Err(Violation {
                    row,
                    col,
                    channel: None,
                    kind: ViolationKind::Unstable { abs_sum },
                });
            }
            let expected = 1.0 - w.iter().sum::<f64>();
            if self.reference[p] != expected {
                return Err(Violation {
                    row,
                    col,
                    channel: None,
                    kind: ViolationKind::ReferenceMismatch {
                        expected,
                        found: self.reference[p],
                    },
                });
            }
        }
        Ok(())
    }
}
