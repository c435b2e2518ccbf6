//! Neighbor patterns and the iterated propagation operator
//! `x_t = w_ref * x_{t-1} + sum_k w_k * x_{t-1}(neighbor_k)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AffinityField, ConfidenceMap, Field2D, NeighborField, NormalizedAffinity, SparseDepth};
use crate::norm::{normalize_field, NormScheme};
use crate::sampler::{self, BilinearTap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpnDirection {
    TopDown,
    BottomUp,
    LeftRight,
    RightLeft,
}

/// Neighbor configuration. Fixed-local modes carry their integer pattern;
/// `NonLocal` takes its offsets from a [`NeighborField`] supplied at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NeighborMode {
    SpnThreeWay { direction: SpnDirection },
    Cspn3x3,
    NonLocal { k: usize },
}

impl NeighborMode {
    pub fn k(&self) -> usize {
        match self {
            NeighborMode::SpnThreeWay { .. } => 3,
            NeighborMode::Cspn3x3 => 8,
            NeighborMode::NonLocal { k } => *k,
        }
    }

    pub fn is_fixed_local(&self) -> bool {
        !matches!(self, NeighborMode::NonLocal { .. })
    }

    /// Integer offsets of the mode. For `NonLocal` this is the starting
    /// pattern: the nearest `K` pixels by square ring, ring by ring in
    /// row-major order (the CSPN pattern when `K = 8`).
    pub fn pattern(&self) -> Vec<(i32, i32)> {
        match self {
            NeighborMode::SpnThreeWay { direction } => pattern_spn(*direction).to_vec(),
            NeighborMode::Cspn3x3 => pattern_cspn().to_vec(),
            NeighborMode::NonLocal { k } => pattern_rings(*k),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NeighborMode::SpnThreeWay { direction } => format!("spn-{direction:?}").to_lowercase(),
            NeighborMode::Cspn3x3 => "cspn".into(),
            NeighborMode::NonLocal { k } => format!("non-local-{k}"),
        }
    }

    /// The mode's pattern replicated at every pixel.
    pub fn initial_field(&self, height: usize, width: usize) -> Result<NeighborField> {
        NeighborField::uniform(height, width, &pattern_to_offsets(&self.pattern()))
    }
}

/// The 8-neighborhood of a 3x3 window in row-major order.
pub fn pattern_cspn() -> [(i32, i32); 8] {
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
}

/// Three-way connections to the previous row or column along `direction`.
pub fn pattern_spn(direction: SpnDirection) -> [(i32, i32); 3] {
    match direction {
        SpnDirection::TopDown => [(-1, -1), (-1, 0), (-1, 1)],
        SpnDirection::BottomUp => [(1, -1), (1, 0), (1, 1)],
        SpnDirection::LeftRight => [(-1, -1), (0, -1), (1, -1)],
        SpnDirection::RightLeft => [(-1, 1), (0, 1), (1, 1)],
    }
}

fn pattern_rings(k: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(k);
    let mut ring = 1i32;
    while out.len() < k {
        for p in -ring..=ring {
            for q in -ring..=ring {
                if p.abs().max(q.abs()) == ring && out.len() < k {
                    out.push((p, q));
                }
            }
        }
        ring += 1;
    }
    out
}

pub fn pattern_to_offsets(pattern: &[(i32, i32)]) -> Vec<[f64; 2]> {
    pattern.iter().map(|&(p, q)| [p as f64, q as f64]).collect()
}

fn default_steps() -> usize {
    18
}

/// Settings for an iterated propagation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub scheme: NormScheme,
    #[serde(default)]
    pub use_confidence: bool,
    /// Re-impose the sparse seeds after every step.
    #[serde(default)]
    pub replace_seeds: bool,
    pub neighbor_mode: NeighborMode,
}

impl PropagationConfig {
    pub fn new(steps: usize, scheme: NormScheme, neighbor_mode: NeighborMode) -> Self {
        Self {
            steps,
            scheme,
            use_confidence: false,
            replace_seeds: false,
            neighbor_mode,
        }
    }

    pub fn with_confidence(mut self, on: bool) -> Self {
        self.use_confidence = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.neighbor_mode.k() == 0 {
            return Err(Error::Config("neighbor count K must be at least 1".into()));
        }
        self.scheme.validate(self.neighbor_mode.k())
    }
}

/// Inputs of one propagation run.
#[derive(Debug, Clone, Copy)]
pub struct PropagationInputs<'a> {
    pub x0: &'a Field2D,
    pub neighbors: &'a NeighborField,
    pub raw: &'a AffinityField,
    pub conf: Option<&'a ConfidenceMap>,
    /// Required when `replace_seeds` is set.
    pub seeds: Option<&'a SparseDepth>,
}

impl<'a> PropagationInputs<'a> {
    pub fn new(x0: &'a Field2D, neighbors: &'a NeighborField, raw: &'a AffinityField) -> Self {
        Self {
            x0,
            neighbors,
            raw,
            conf: None,
            seeds: None,
        }
    }

    pub fn with_confidence(mut self, conf: &'a ConfidenceMap) -> Self {
        self.conf = Some(conf);
        self
    }

    pub fn with_seeds(mut self, seeds: &'a SparseDepth) -> Self {
        self.seeds = Some(seeds);
        self
    }
}

/// Result of [`propagate`].
#[derive(Debug, Clone)]
pub struct Propagation {
    pub output: Field2D,
    /// `x_1 .. x_T` when requested.
    pub trace: Option<Vec<Field2D>>,
    pub weights: NormalizedAffinity,
}

/// Everything the forward and reverse sweeps share: sampling stencils,
/// sampled neighbor confidences and the normalized weights.
pub(crate) struct Prepared {
    pub taps: Vec<BilinearTap>,
    pub conf_samples: Option<Vec<f64>>,
    pub weights: NormalizedAffinity,
}

fn check_shapes(inputs: &PropagationInputs<'_>, use_confidence: bool) -> Result<()> {
    let shape = inputs.x0.shape();
    if inputs.neighbors.shape() != shape || inputs.raw.shape() != shape {
        return Err(Error::ShapeMismatch(format!(
            "x0 {shape:?}, neighbors {:?}, affinities {:?}",
            inputs.neighbors.shape(),
            inputs.raw.shape()
        )));
    }
    if inputs.neighbors.k() != inputs.raw.k() {
        return Err(Error::ShapeMismatch(format!(
            "{} neighbors but {} affinities per pixel",
            inputs.neighbors.k(),
            inputs.raw.k()
        )));
    }
    if use_confidence {
        match inputs.conf {
            Some(c) if c.shape() != shape => {
                return Err(Error::ShapeMismatch("confidence map".into()))
            }
            None => return Err(Error::Config("confidence enabled but no confidence map given".into())),
            _ => {}
        }
    }
    if let Some(s) = inputs.seeds {
        if s.shape() != shape {
            return Err(Error::ShapeMismatch("seed depth".into()));
        }
    }
    Ok(())
}

pub(crate) fn prepare(
    inputs: &PropagationInputs<'_>,
    scheme: &NormScheme,
    use_confidence: bool,
) -> Result<Prepared> {
    check_shapes(inputs, use_confidence)?;
    let taps = sampler::taps(inputs.neighbors);
    let conf_samples = if use_confidence {
        inputs.conf.map(|c| sampler::gather_taps(c.values(), &taps))
    } else {
        None
    };
    let weights = normalize_field(inputs.raw, conf_samples.as_deref(), scheme)?;
    Ok(Prepared {
        taps,
        conf_samples,
        weights,
    })
}

/// One propagation step over flat buffers.
pub(crate) fn step_taps(x: &[f64], taps: &[BilinearTap], weights: &NormalizedAffinity, out: &mut [f64]) {
    let k = weights.k;
    out.par_iter_mut().enumerate().for_each(|(p, o)| {
        let w = &weights.weights[p * k..(p + 1) * k];
        let t = &taps[p * k..(p + 1) * k];
        // x_p + sum w (s - x_p) equals ref * x_p + sum w s and keeps
        // constant fields exact
        let xp = x[p];
        let mut acc = 0.0;
        for (wk, tk) in w.iter().zip(t) {
            acc += wk * (tk.sample(x) - xp);
        }
        *o = xp + acc;
    });
}

pub(crate) fn impose_seeds(x: &mut [f64], seeds: &SparseDepth) {
    for ((v, &m), &s) in x.iter_mut().zip(seeds.mask().bits()).zip(seeds.depth().values()) {
        if m {
            *v = s;
        }
    }
}

/// A single step with weights normalized from `raw` (and `conf` when given).
pub fn propagate_step(
    x: &Field2D,
    neighbors: &NeighborField,
    raw: &AffinityField,
    conf: Option<&ConfidenceMap>,
    scheme: &NormScheme,
) -> Result<Field2D> {
    let mut inputs = PropagationInputs::new(x, neighbors, raw);
    inputs.conf = conf;
    let prep = prepare(&inputs, scheme, conf.is_some())?;
    let mut out = vec![0.0; x.len()];
    step_taps(x.values(), &prep.taps, &prep.weights, &mut out);
    Field2D::from_vec(x.height(), x.width(), out)
}

/// `config.steps` propagation steps with weights normalized once up front.
pub fn propagate(
    inputs: &PropagationInputs<'_>,
    config: &PropagationConfig,
    keep_trace: bool,
) -> Result<Propagation> {
    config.validate()?;
    if inputs.neighbors.k() != config.neighbor_mode.k() {
        return Err(Error::ShapeMismatch(format!(
            "neighbor mode expects K = {}, neighbor field has K = {}",
            config.neighbor_mode.k(),
            inputs.neighbors.k()
        )));
    }
    let seeds = seeds_for(inputs, config)?;
    let prep = prepare(inputs, &config.scheme, config.use_confidence)?;
    let (h, w) = inputs.x0.shape();
    let mut cur = inputs.x0.values().to_vec();
    let mut next = vec![0.0; cur.len()];
    let mut trace = keep_trace.then(|| Vec::with_capacity(config.steps));
    for _ in 0..config.steps {
        step_taps(&cur, &prep.taps, &prep.weights, &mut next);
        if let Some(s) = seeds {
            impose_seeds(&mut next, s);
        }
        std::mem::swap(&mut cur, &mut next);
        if let Some(t) = trace.as_mut() {
            t.push(Field2D::from_vec(h, w, cur.clone())?);
        }
    }
    Ok(Propagation {
        output: Field2D::from_vec(h, w, cur)?,
        trace,
        weights: prep.weights,
    })
}

pub(crate) fn seeds_for<'a>(
    inputs: &PropagationInputs<'a>,
    config: &PropagationConfig,
) -> Result<Option<&'a SparseDepth>> {
    if !config.replace_seeds {
        return Ok(None);
    }
    inputs
        .seeds
        .map(Some)
        .ok_or_else(|| Error::Config("replace_seeds needs sparse seeds".into()))
}

/// Fixed-local step: integer offsets with clamped integer indexing, no
/// interpolation.
pub fn propagate_step_local(x: &Field2D, pattern: &[(i32, i32)], weights: &NormalizedAffinity) -> Result<Field2D> {
    let (h, w) = x.shape();
    if weights.shape() != (h, w) || weights.k() != pattern.len() {
        return Err(Error::ShapeMismatch("fixed-local weights".into()));
    }
    let k = pattern.len();
    let xs = x.values();
    let out = (0..h * w)
        .into_par_iter()
        .map(|p| {
            let (m, n) = ((p / w) as i64, (p % w) as i64);
            let xp = xs[p];
            let mut acc = 0.0;
            for (j, &(dp, dq)) in pattern.iter().enumerate() {
                let i = (m + dp as i64).clamp(0, h as i64 - 1) as usize;
                let jj = (n + dq as i64).clamp(0, w as i64 - 1) as usize;
                acc += weights.weights[p * k + j] * (xs[i * w + jj] - xp);
            }
            xp + acc
        })
        .collect();
    Field2D::from_vec(h, w, out)
}

/// Fixed-local propagation: weights normalized once from `raw` (and the
/// confidences read at the integer neighbor positions), then `steps`
/// fixed-local steps.
pub fn propagate_local(
    x0: &Field2D,
    pattern: &[(i32, i32)],
    raw: &AffinityField,
    conf: Option<&ConfidenceMap>,
    scheme: &NormScheme,
    steps: usize,
) -> Result<Field2D> {
    let (h, w) = x0.shape();
    if raw.shape() != (h, w) || raw.k() != pattern.len() {
        return Err(Error::ShapeMismatch("fixed-local affinities".into()));
    }
    let conf_samples = conf.map(|c| {
        let mut out = Vec::with_capacity(h * w * pattern.len());
        for m in 0..h as i64 {
            for n in 0..w as i64 {
                for &(dp, dq) in pattern {
                    let i = (m + dp as i64).clamp(0, h as i64 - 1) as usize;
                    let j = (n + dq as i64).clamp(0, w as i64 - 1) as usize;
                    out.push(c.field().get(i, j));
                }
            }
        }
        out
    });
    let weights = normalize_field(raw, conf_samples.as_deref(), scheme)?;
    let mut x = x0.clone();
    for _ in 0..steps {
        x = propagate_step_local(&x, pattern, &weights)?;
    }
    Ok(x)
}

/// Mean over pixels of the (population) variance of the ground-truth depths
/// at each pixel's `K` neighbor positions. Square meters.
pub fn neighbor_depth_variance(gt: &Field2D, neighbors: &NeighborField) -> Result<f64> {
    let gathered = sampler::gather(gt, neighbors)?;
    let k = neighbors.k() as f64;
    let per_pixel: Vec<f64> = gathered
        .chunks(neighbors.k())
        .map(|vals| {
            let mean = vals.iter().sum::<f64>() / k;
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k
        })
        .collect();
    Ok(per_pixel.iter().sum::<f64>() / per_pixel.len() as f64)
}
