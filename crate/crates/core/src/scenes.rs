//! Synthetic depth scenes with sharp discontinuities, plus sparse sampling
//! protocols and corruption models for the inputs.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field2D, Mask, SparseDepth};

/// Depth jump that counts as a discontinuity, in meters.
pub const DISCONTINUITY_THRESHOLD: f64 = 0.1;

/// Steepest slope of any generated plane, in meters per pixel.
const MAX_SLOPE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SceneKind {
    /// Left half at `d_min`, right half at `d_max`.
    TwoPlaneStep,
    /// `n` vertical strips, each a gently slanted plane.
    SlantedPlanes { n: usize },
    /// `n` fronto-parallel boxes in front of a receding ground plane.
    BoxesOnGround { n: usize },
    /// `k` horizontal bands of evenly spaced constant depth.
    Staircase { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_d_max")]
    pub d_max: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_d_min() -> f64 {
    1.0
}

fn default_d_max() -> f64 {
    10.0
}

impl SceneSpec {
    pub fn new(kind: SceneKind, height: usize, width: usize, seed: u64) -> Self {
        Self {
            kind,
            height,
            width,
            d_min: default_d_min(),
            d_max: default_d_max(),
            seed,
        }
    }

    pub fn with_range(mut self, d_min: f64, d_max: f64) -> Self {
        self.d_min = d_min;
        self.d_max = d_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDimensions {
                height: self.height,
                width: self.width,
            });
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        match self.kind {
            SceneKind::TwoPlaneStep if self.width < 2 => {
                Err(Error::Config("two-plane step needs width >= 2".into()))
            }
            SceneKind::SlantedPlanes { n } if n == 0 || n > self.width => Err(Error::Config(format!(
                "slanted planes: n = {n} must be in 1..={}",
                self.width
            ))),
            SceneKind::BoxesOnGround { .. } if self.height < 4 || self.width < 4 => {
                Err(Error::Config("boxes on ground needs at least 4x4 pixels".into()))
            }
            SceneKind::Staircase { k } if k == 0 || k > self.height => Err(Error::Config(format!(
                "staircase: k = {k} must be in 1..={}",
                self.height
            ))),
            _ => Ok(()),
        }
    }
}

/// Ground-truth depth and its discontinuity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub depth: Field2D,
    pub discontinuities: Mask,
}

impl Scene {
    /// Pixels within `radius` (Chebyshev) of a discontinuity.
    pub fn boundary_band(&self, radius: usize) -> Mask {
        self.discontinuities.dilate(radius)
    }
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (lo, hi) = (spec.d_min, spec.d_max);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let depth = match spec.kind {
        SceneKind::TwoPlaneStep => Field2D::from_fn(h, w, |_, c| if c < w / 2 { lo } else { hi })?,
        SceneKind::SlantedPlanes { n } => slanted_planes(&mut rng, h, w, n, lo, hi)?,
        SceneKind::BoxesOnGround { n } => boxes_on_ground(&mut rng, h, w, n, lo, hi)?,
        SceneKind::Staircase { k } => Field2D::from_fn(h, w, |r, _| {
            let band = r * k / h;
            if k == 1 {
                lo
            } else {
                lo + (hi - lo) * band as f64 / (k - 1) as f64
            }
        })?,
    };
    let discontinuities = discontinuity_mask(&depth);
    Ok(Scene {
        depth,
        discontinuities,
    })
}

/// Pixels whose 4-neighborhood (including themselves) spans more than
/// [`DISCONTINUITY_THRESHOLD`].
pub fn discontinuity_mask(depth: &Field2D) -> Mask {
    let (h, w) = depth.shape();
    let bits = (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let d = depth.get(r, c);
            let mut span: f64 = 0.0;
            let mut visit = |rr: usize, cc: usize| span = span.max((depth.get(rr, cc) - d).abs());
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
            span > DISCONTINUITY_THRESHOLD
        })
        .collect();
    Mask::new(h, w, bits).expect("shape taken from depth")
}

fn slanted_planes(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize, lo: f64, hi: f64) -> Result<Field2D> {
    let range = hi - lo;
    // keep every plane inside [lo, hi] over the whole image
    let slope = MAX_SLOPE.min(0.25 * range / (h + w) as f64);
    let margin = slope * (h + w) as f64 / 2.0;
    let min_gap = 0.15 * range;
    let mut planes: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut center = rng.random_range(lo + margin..=hi - margin);
        // adjacent strips must be separated by a visible jump
        for _ in 0..64 {
            match planes.last() {
                Some(&(prev, _, _)) if (center - prev).abs() < min_gap => {
                    center = rng.random_range(lo + margin..=hi - margin);
                }
                _ => break,
            }
        }
        planes.push((center, rng.random_range(-slope..=slope), rng.random_range(-slope..=slope)));
    }
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Field2D::from_fn(h, w, |r, c| {
        let (center, sr, sc) = planes[c * n / w];
        (center + sr * (r as f64 - cr) + sc * (c as f64 - cc)).clamp(lo, hi)
    })
}

fn boxes_on_ground(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize, lo: f64, hi: f64) -> Result<Field2D> {
    let range = hi - lo;
    // ground recedes from the bottom row (near) to the top row (far)
    let near = lo + 0.4 * range;
    let per_row = ((hi - near) / (h - 1) as f64).min(MAX_SLOPE);
    let ground = |r: usize| near + per_row * (h - 1 - r) as f64;
    let mut depth: Vec<f64> = (0..h * w).map(|i| ground(i / w)).collect();
    let mut boxes: Vec<(usize, usize, usize, usize, f64)> = (0..n)
        .map(|_| {
            let bh = rng.random_range(h / 8..=(h / 3).max(h / 8 + 1)).max(2);
            let bw = rng.random_range(w / 8..=(w / 3).max(w / 8 + 1)).max(2);
            let r0 = rng.random_range(0..=h - bh);
            let c0 = rng.random_range(0..=w - bw);
            // in front of the ground behind the box's footprint
            let d = rng.random_range(lo..=(ground(r0 + bh - 1) - 0.2 * range).max(lo));
            (r0, c0, bh, bw, d)
        })
        .collect();
    // far boxes first so nearer ones occlude them
    boxes.sort_by(|a, b| b.4.total_cmp(&a.4));
    for (r0, c0, bh, bw, d) in boxes {
        for r in r0..r0 + bh {
            depth[r * w + c0..r * w + c0 + bw].fill(d);
        }
    }
    Field2D::new(h, w, depth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplingProtocol {
    /// `count` pixels drawn uniformly without replacement.
    UniformRandom { count: usize },
    /// `rows` evenly spaced full rows, shifted down by `phase`.
    Scanline { rows: usize, phase: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseModel {
    #[default]
    None,
    /// Additive `N(0, sigma^2)` meters, floored at 1 mm.
    Gaussian { sigma: f64 },
    /// With probability `rate`, a sample within `radius` of a discontinuity
    /// takes the depth that differs most from its own inside that window.
    BoundaryMixing { radius: usize, rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub protocol: SamplingProtocol,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        match self.protocol {
            SamplingProtocol::UniformRandom { count: 0 } => {
                return Err(Error::Config("sample count must be at least 1".into()))
            }
            SamplingProtocol::Scanline { rows: 0, .. } => {
                return Err(Error::Config("scanline rows must be at least 1".into()))
            }
            _ => {}
        }
        match self.noise {
            NoiseModel::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("noise sigma {sigma} must be >= 0")))
            }
            NoiseModel::BoundaryMixing { rate, .. } if !(0.0..=1.0).contains(&rate) => {
                Err(Error::Config(format!("mixing rate {rate} must be in [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Sparse observations plus the set of samples the noise model altered.
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub sparse: SparseDepth,
    pub corrupted: Mask,
}

pub fn sample(gt: &Field2D, spec: &SamplingSpec) -> Result<SparseDepth> {
    sample_detailed(gt, spec).map(|s| s.sparse)
}

pub fn sample_detailed(gt: &Field2D, spec: &SamplingSpec) -> Result<Sampled> {
    spec.validate()?;
    let (h, w) = gt.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bits = vec![false; h * w];
    match spec.protocol {
        SamplingProtocol::UniformRandom { count } => {
            if count > h * w {
                return Err(Error::Config(format!(
                    "cannot draw {count} samples from {} pixels",
                    h * w
                )));
            }
            for i in index::sample(&mut rng, h * w, count) {
                bits[i] = true;
            }
        }
        SamplingProtocol::Scanline { rows, phase } => {
            if rows > h {
                return Err(Error::Config(format!("cannot take {rows} scanlines from {h} rows")));
            }
            for i in 0..rows {
                let r = (phase + i * h / rows) % h;
                bits[r * w..(r + 1) * w].fill(true);
            }
        }
    }
    let mut values = vec![0.0; h * w];
    let mut corrupted = vec![false; h * w];
    let gv = gt.values();
    for i in (0..h * w).filter(|&i| bits[i]) {
        values[i] = match spec.noise {
            NoiseModel::None => gv[i],
            NoiseModel::Gaussian { sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                corrupted[i] = sigma > 0.0;
                (gv[i] + sigma * z).max(1e-3)
            }
            NoiseModel::BoundaryMixing { radius, rate } => {
                let far = most_different(gt, i / w, i % w, radius);
                if (far - gv[i]).abs() > DISCONTINUITY_THRESHOLD && rng.random_bool(rate) {
                    corrupted[i] = true;
                    far
                } else {
                    gv[i]
                }
            }
        };
    }
    Ok(Sampled {
        sparse: SparseDepth::new(Field2D::new(h, w, values)?, Mask::new(h, w, bits)?)?,
        corrupted: Mask::new(h, w, corrupted)?,
    })
}

/// Depth in the `radius` window around `(r, c)` farthest from `gt(r, c)`;
/// ties go to the first in row-major order.
fn most_different(gt: &Field2D, r: usize, c: usize, radius: usize) -> f64 {
    let (h, w) = gt.shape();
    let d = gt.get(r, c);
    let mut best = d;
    for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
        for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
            let v = gt.get(rr, cc);
            if (v - d).abs() > (best - d).abs() {
                best = v;
            }
        }
    }
    best
}

/// One scene of each kind at the given size.
pub fn standard_suite(height: usize, width: usize, seed: u64) -> Vec<SceneSpec> {
    [
        SceneKind::TwoPlaneStep,
        SceneKind::SlantedPlanes { n: 3 },
        SceneKind::BoxesOnGround { n: 3 },
        SceneKind::Staircase { k: 4 },
    ]
    .into_iter()
    .enumerate()
    .map(|(i, kind)| SceneSpec::new(kind, height, width, seed.wrapping_add(i as u64)))
    .collect()
}
