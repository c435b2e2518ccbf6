//! Direct optimization of per-pixel propagation parameters against a
//! ground-truth depth map.
//!
//! Every learnable quantity is a free per-pixel array: initial depth, neighbor
//! offsets, raw affinities, confidence, plus the scalar gamma of the
//! tanh-gamma scheme. Gradients come from [`crate::backprop::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backprop::{backward, forward, LossSpec, Rho};
use crate::error::{Error, Result};
use crate::grid::{AffinityField, ConfidenceMap, Field2D, Mask, NeighborField, SparseDepth};
use crate::io::fmt_sig;
use crate::metrics::{evaluate, evaluate_banded, MetricReport, CSV_HEADER};
use crate::norm::NormScheme;
use crate::propagation::{pattern_to_offsets, NeighborMode, PropagationConfig, PropagationInputs};
use crate::scenes::discontinuity_mask;

/// Band half-width around ground-truth discontinuities used for the
/// boundary metrics, in pixels.
pub const BOUNDARY_BAND_RADIUS: usize = 2;

/// Number of nearest samples blended by [`init_depth_idw`].
const IDW_NEIGHBORS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdwParams {
    /// Exponent of the inverse-distance weights.
    pub power: f64,
    /// Confidence length scale in pixels: `conf = exp(-d_nearest / lambda)`.
    pub lambda: f64,
}

impl Default for IdwParams {
    fn default() -> Self {
        Self {
            power: 2.0,
            lambda: 2.0,
        }
    }
}

/// Dense depth by inverse-distance weighting of the nearest samples, and a
/// confidence that decays with the distance to the nearest one.
pub fn init_depth_idw(sparse: &SparseDepth, params: &IdwParams) -> Result<(Field2D, ConfidenceMap)> {
    if !(params.power >= 0.0 && params.lambda > 0.0) {
        return Err(Error::Config(format!(
            "idw power {} must be >= 0 and lambda {} > 0",
            params.power, params.lambda
        )));
    }
    let samples = sparse.samples();
    if samples.is_empty() {
        return Err(Error::EmptySet("no samples to interpolate"));
    }
    let (h, w) = sparse.shape();
    let mut depth = Vec::with_capacity(h * w);
    let mut conf = Vec::with_capacity(h * w);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    for r in 0..h {
        for c in 0..w {
            dist.clear();
            dist.extend(samples.iter().enumerate().map(|(i, &(sr, sc, _))| {
                let (dr, dc) = (sr as f64 - r as f64, sc as f64 - c as f64);
                ((dr * dr + dc * dc).sqrt(), i)
            }));
            let n = IDW_NEIGHBORS.min(dist.len());
            let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if n < dist.len() {
                dist.select_nth_unstable_by(n - 1, by_distance);
            }
            let nearest = &mut dist[..n];
            nearest.sort_by(by_distance);
            let (d0, i0) = nearest[0];
            conf.push((-d0 / params.lambda).exp());
            if d0 == 0.0 {
                depth.push(samples[i0].2);
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for &(d, i) in nearest.iter() {
                let wgt = d.powf(-params.power);
                num += wgt * samples[i].2;
                den += wgt;
            }
            depth.push(num / den);
        }
    }
    Ok((Field2D::new(h, w, depth)?, ConfidenceMap::new(Field2D::new(h, w, conf)?)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Plain,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnFlags {
    #[serde(default)]
    pub x0: bool,
    #[serde(default)]
    pub offsets: bool,
    #[serde(default)]
    pub affinities: bool,
    #[serde(default)]
    pub confidence: bool,
    #[serde(default)]
    pub gamma: bool,
}

impl LearnFlags {
    pub const NONE: LearnFlags = LearnFlags {
        x0: false,
        offsets: false,
        affinities: false,
        confidence: false,
        gamma: false,
    };

    /// Offsets, affinities, confidence and gamma; the initial depth stays fixed.
    pub fn propagation() -> Self {
        LearnFlags {
            x0: false,
            offsets: true,
            affinities: true,
            confidence: true,
            gamma: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OffsetInit {
    /// The mode's integer pattern.
    CspnPattern,
    /// The integer pattern plus `N(0, sigma^2)` per coordinate.
    RandomJitter { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub learn: LearnFlags,
    pub offset_init: OffsetInit,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub idw: IdwParams,
    #[serde(default = "default_rho")]
    pub rho: Rho,
    /// Standard deviation of the initial raw affinities. Must be positive
    /// for Abs-Sum, whose all-zero vector is a degenerate point.
    #[serde(default = "default_affinity_init")]
    pub affinity_init: f64,
}

fn default_affinity_init() -> f64 {
    0.1
}

fn default_rho() -> Rho {
    Rho::L2
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step_size: 0.05,
            optimizer: Optimizer::adam(),
            learn: LearnFlags::propagation(),
            offset_init: OffsetInit::RandomJitter { sigma: 0.5 },
            seed: 0,
            idw: IdwParams::default(),
            rho: Rho::L2,
            affinity_init: default_affinity_init(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be > 0", self.step_size)));
        }
        match self.optimizer {
            Optimizer::Momentum { beta } if !(0.0..1.0).contains(&beta) => {
                Err(Error::Config(format!("momentum beta {beta} must be in [0, 1)")))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()))
            }
            _ => match self.offset_init {
                OffsetInit::RandomJitter { sigma } if !(sigma >= 0.0) => {
                    Err(Error::Config(format!("jitter sigma {sigma} must be >= 0")))
                }
                _ if !(self.affinity_init >= 0.0 && self.affinity_init.is_finite()) => Err(Error::Config(format!(
                    "affinity init {} must be >= 0",
                    self.affinity_init
                ))),
                _ => Ok(()),
            },
        }
    }
}

/// Everything a fit can change.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedParams {
    pub x0: Field2D,
    pub neighbors: NeighborField,
    pub raw: AffinityField,
    pub conf: ConfidenceMap,
    pub scheme: NormScheme,
}

impl LearnedParams {
    fn inputs(&self) -> PropagationInputs<'_> {
        PropagationInputs::new(&self.x0, &self.neighbors, &self.raw).with_confidence(&self.conf)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Loss of the returned parameters.
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Loss before each update, then the loss after the last one.
    pub loss_trace: Vec<f64>,
    pub params: LearnedParams,
    pub prediction: Field2D,
    pub metrics: MetricReport,
    /// Metrics within [`BOUNDARY_BAND_RADIUS`] of a discontinuity; `None`
    /// for scenes without one.
    pub band_metrics: Option<MetricReport>,
}

impl FitResult {
    /// Best loss seen up to each iteration.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.loss_trace
            .iter()
            .map(|&l| {
                best = best.min(l);
                best
            })
            .collect()
    }
}

/// Per-group optimizer state.
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, opt: &Optimizer, lr: f64, t: usize, params: &mut [f64], grad: &[f64]) {
        match *opt {
            Optimizer::Plain => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Initial parameters of a fit: IDW depth and confidence, offsets from the
/// mode's pattern, small random raw affinities.
pub fn initial_params(
    sparse: &SparseDepth,
    config: &FitConfig,
    prop: &PropagationConfig,
) -> Result<LearnedParams> {
    let (h, w) = sparse.shape();
    let (x0, conf) = init_depth_idw(sparse, &config.idw)?;
    let mode = prop.neighbor_mode;
    let k = mode.k();
    let base = pattern_to_offsets(&mode.pattern());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offsets = match (config.offset_init, mode.is_fixed_local()) {
        (OffsetInit::RandomJitter { sigma }, false) => (0..h * w)
            .flat_map(|_| base.iter().copied().collect::<Vec<_>>())
            .map(|[dr, dc]| {
                let jr: f64 = rng.sample(StandardNormal);
                let jc: f64 = rng.sample(StandardNormal);
                [dr + sigma * jr, dc + sigma * jc]
            })
            .collect(),
        _ => NeighborField::uniform(h, w, &base)?.offsets().to_vec(),
    };
    Ok(LearnedParams {
        x0,
        neighbors: NeighborField::new(h, w, k, offsets)?,
        raw: AffinityField::new(
            h,
            w,
            k,
            (0..h * w * k)
                .map(|_| config.affinity_init * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?,
        conf,
        scheme: prop.scheme,
    })
}

/// Fits the enabled parameter groups so that propagating `sparse`'s IDW
/// fill reproduces `gt`, and returns the best parameters seen.
pub fn fit(gt: &Field2D, sparse: &SparseDepth, config: &FitConfig, prop: &PropagationConfig) -> Result<FitResult> {
    config.validate()?;
    prop.validate()?;
    if gt.shape() != sparse.shape() {
        return Err(Error::ShapeMismatch(format!(
            "gt {:?} vs sparse {:?}",
            gt.shape(),
            sparse.shape()
        )));
    }
    let (h, w) = gt.shape();
    let init = initial_params(sparse, config, prop)?;
    fit_from(gt, sparse, init, config, prop, &LossSpec::dense(config.rho, h, w)?)
}

/// [`fit`] from explicit starting parameters and loss mask.
pub fn fit_from(
    gt: &Field2D,
    sparse: &SparseDepth,
    init: LearnedParams,
    config: &FitConfig,
    prop: &PropagationConfig,
    loss_spec: &LossSpec,
) -> Result<FitResult> {
    config.validate()?;
    prop.validate()?;
    let mut learn = config.learn;
    // fixed-local modes keep their integer pattern
    learn.offsets &= !prop.neighbor_mode.is_fixed_local();
    learn.confidence &= prop.use_confidence;
    learn.gamma &= init.scheme.gamma().is_some();

    let mut cfg = prop.clone();
    let mut p = init;
    let seeds_on = prop.replace_seeds;
    let run = |p: &LearnedParams, cfg: &PropagationConfig| {
        let inputs = p.inputs();
        let inputs = if seeds_on { inputs.with_seeds(sparse) } else { inputs };
        backward(&inputs, cfg, gt, loss_spec)
    };

    let n = p.x0.len();
    let k = p.raw.k();
    let mut slots = [Slot::new(n), Slot::new(2 * n * k), Slot::new(n * k), Slot::new(n), Slot::new(1)];
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut best: Option<(f64, usize, LearnedParams)> = None;
    let lr = config.step_size;

    for it in 0..=config.iterations {
        cfg.scheme = p.scheme;
        let (loss, grads) = run(&p, &cfg)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        trace.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, it, p.clone()));
        }
        if it == config.iterations {
            break;
        }
        let t = it + 1;
        if learn.x0 {
            let mut v = p.x0.values().to_vec();
            slots[0].step(&config.optimizer, lr, t, &mut v, &grads.d_x0);
            p.x0 = p.x0.with_values(v)?;
        }
        if learn.offsets {
            let mut v: Vec<f64> = p.neighbors.offsets().iter().flatten().copied().collect();
            let g: Vec<f64> = grads.d_offsets.iter().flatten().copied().collect();
            slots[1].step(&config.optimizer, lr, t, &mut v, &g);
            let offsets = v.chunks(2).map(|c| [c[0], c[1]]).collect();
            p.neighbors = NeighborField::new(h_of(&p), w_of(&p), k, offsets)?;
        }
        if learn.affinities {
            let mut v = p.raw.raw().to_vec();
            slots[2].step(&config.optimizer, lr, t, &mut v, &grads.d_raw_aff);
            p.raw = AffinityField::new(h_of(&p), w_of(&p), k, v)?;
        }
        if learn.confidence {
            let mut v = p.conf.values().to_vec();
            slots[3].step(&config.optimizer, lr, t, &mut v, &grads.d_conf);
            // ConfidenceMap clamps into [0, 1]
            p.conf = ConfidenceMap::new(p.conf.field().with_values(v)?)?;
        }
        if learn.gamma {
            if let Some(g) = p.scheme.gamma() {
                let mut v = [g];
                slots[4].step(&config.optimizer, lr, t, &mut v, &[grads.d_gamma]);
                p.scheme = p.scheme.with_gamma(v[0]).project_gamma();
            }
        }
    }

    let (best_loss, best_iteration, params) = best.expect("at least one evaluation");
    cfg.scheme = params.scheme;
    let inputs = params.inputs();
    let inputs = if seeds_on { inputs.with_seeds(sparse) } else { inputs };
    let prediction = forward(&inputs, &cfg)?.output();
    let (metrics, band_metrics) = evaluate_fit(&prediction, gt)?;
    Ok(FitResult {
        best_loss,
        best_iteration,
        loss_trace: trace,
        params,
        prediction,
        metrics,
        band_metrics,
    })
}

fn h_of(p: &LearnedParams) -> usize {
    p.x0.height()
}

fn w_of(p: &LearnedParams) -> usize {
    p.x0.width()
}

/// Whole-image and boundary-band metrics of a prediction.
pub fn evaluate_fit(pred: &Field2D, gt: &Field2D) -> Result<(MetricReport, Option<MetricReport>)> {
    let (h, w) = gt.shape();
    let valid = Mask::filled(h, w, true)?;
    let metrics = evaluate(pred, gt, &valid)?;
    let band = discontinuity_mask(gt).dilate(BOUNDARY_BAND_RADIUS);
    let band_metrics = if band.count() > 0 {
        Some(evaluate_banded(pred, gt, &valid, &band)?)
    } else {
        None
    };
    Ok((metrics, band_metrics))
}

/// Axes of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationAxes {
    pub modes: Vec<NeighborMode>,
    pub schemes: Vec<NormScheme>,
    pub confidence: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: NeighborMode,
    pub scheme: NormScheme,
    pub confidence: bool,
    pub result: FitResult,
}

pub const ABLATION_CSV_HEADER: &str = "mode,scheme,confidence,loss";

impl AblationRow {
    pub fn csv_header() -> String {
        format!("{ABLATION_CSV_HEADER},{CSV_HEADER},band_rmse,band_mae")
    }

    pub fn csv_row(&self) -> String {
        let band = self
            .result
            .band_metrics
            .as_ref()
            .map_or_else(|| "nan,nan".to_string(), |b| format!("{},{}", fmt_sig(b.rmse), fmt_sig(b.mae)));
        format!(
            "{},{},{},{},{},{}",
            self.mode.label(),
            self.scheme.name(),
            if self.confidence { "on" } else { "off" },
            fmt_sig(self.result.best_loss),
            self.result.metrics.csv_row(),
            band
        )
    }
}

/// One fit per point of `modes x schemes x confidence`, all from the same
/// seed. Schemes are adapted to each mode's K (tanh-C gets `C = K`,
/// tanh-gamma starts at `gamma = K` with bounds `[1, 2K]`).
pub fn ablation_grid(
    gt: &Field2D,
    sparse: &SparseDepth,
    axes: &AblationAxes,
    config: &FitConfig,
    base: &PropagationConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &mode in &axes.modes {
        for &scheme in &axes.schemes {
            for &confidence in &axes.confidence {
                let k = mode.k();
                let scheme = match scheme {
                    NormScheme::TanhC { .. } => NormScheme::tanh_c_for(k),
                    NormScheme::TanhGammaAbsSumStar { .. } => NormScheme::tanh_gamma_default(k),
                    other => other,
                };
                let prop = PropagationConfig {
                    scheme,
                    neighbor_mode: mode,
                    use_confidence: confidence,
                    ..base.clone()
                };
                let result = fit(gt, sparse, config, &prop)?;
                rows.push(AblationRow {
                    mode,
                    scheme,
                    confidence,
                    result,
                });
            }
        }
    }
    Ok(rows)
}
