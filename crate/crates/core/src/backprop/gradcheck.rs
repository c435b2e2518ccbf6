//! Central-difference verification of the analytic gradients.
//!
//! A coordinate is only compared where the objective is smooth across the
//! whole `[-h, +h]` bracket: both perturbed evaluations must land in the same
//! piecewise regime as the unperturbed one (same bilinear cells and clamp
//! flags, same fallback branches, same affinity signs and, for L1, the same
//! residual signs). Coordinates that cross a seam are counted as skipped.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{backward, forward, GradientBundle, LossSpec, Rho};
use crate::error::Result;
use crate::grid::{AffinityField, ConfidenceMap, Field2D, NeighborField};
use crate::norm::NormScheme;
use crate::propagation::{NeighborMode, PropagationConfig, PropagationInputs};

/// Denominator floor for the relative error. Central differences at
/// `h = 1e-6` carry 1e-10 to 2e-9 of absolute round-off on these instances,
/// so entries below ~1e-4 cannot be resolved to 1e-5 relative; for them the
/// check reads `|a - n| < 1e-4 * tolerance`.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    X0,
    RawAffinity,
    Offsets,
    Confidence,
    Gamma,
}

impl ParamGroup {
    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::X0 => "x0",
            ParamGroup::RawAffinity => "raw_affinity",
            ParamGroup::Offsets => "offsets",
            ParamGroup::Confidence => "confidence",
            ParamGroup::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    AbsSum,
    AbsSumStar,
    TanhC,
    TanhGamma,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 4] = [
        SchemeKind::AbsSum,
        SchemeKind::AbsSumStar,
        SchemeKind::TanhC,
        SchemeKind::TanhGamma,
    ];
}

/// Shape of a random gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOptions {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub steps: usize,
    pub rho: Rho,
    pub scheme: SchemeKind,
    pub use_confidence: bool,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            k: 4,
            steps: 3,
            rho: Rho::L2,
            scheme: SchemeKind::TanhGamma,
            use_confidence: true,
        }
    }
}

/// A self-contained propagation problem with a loss.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub x0: Field2D,
    pub neighbors: NeighborField,
    pub raw: AffinityField,
    pub conf: ConfidenceMap,
    pub config: PropagationConfig,
    pub gt: Field2D,
    pub loss: LossSpec,
}

impl GradcheckInstance {
    /// Random fields: depths in `[1, 3]`, fractional offsets within 2.5 px,
    /// raw affinities `1.5 * N(0, 1)`, confidences in `[0.05, 0.95]`.
    pub fn random(seed: u64, opts: InstanceOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, k) = (opts.height, opts.width, opts.k);
        let n = h * w;
        let x0 = Field2D::new(h, w, (0..n).map(|_| rng.random_range(1.0..3.0)).collect())?;
        let gt = Field2D::new(h, w, (0..n).map(|_| rng.random_range(1.0..3.0)).collect())?;
        let conf = ConfidenceMap::new(Field2D::new(h, w, (0..n).map(|_| rng.random_range(0.05..0.95)).collect())?)?;
        let offsets = (0..n * k)
            .map(|_| [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)])
            .collect();
        let neighbors = NeighborField::new(h, w, k, offsets)?;
        let raw = AffinityField::new(
            h,
            w,
            k,
            (0..n * k).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let scheme = match opts.scheme {
            SchemeKind::AbsSum => NormScheme::AbsSum,
            SchemeKind::AbsSumStar => NormScheme::AbsSumStar,
            SchemeKind::TanhC => NormScheme::TanhC {
                c: k as f64 * rng.random_range(1.0..1.5),
            },
            // small enough that the fallback fires on some pixels only
            SchemeKind::TanhGamma => NormScheme::tanh_gamma(rng.random_range(1.0..2.0), k),
        };
        let config = PropagationConfig::new(opts.steps, scheme, NeighborMode::NonLocal { k })
            .with_confidence(opts.use_confidence);
        let loss = LossSpec::dense(opts.rho, h, w)?;
        Ok(Self {
            x0,
            neighbors,
            raw,
            conf,
            config,
            gt,
            loss,
        })
    }

    pub fn inputs(&self) -> PropagationInputs<'_> {
        let inputs = PropagationInputs::new(&self.x0, &self.neighbors, &self.raw);
        if self.config.use_confidence {
            inputs.with_confidence(&self.conf)
        } else {
            inputs
        }
    }

    pub fn backward(&self) -> Result<(f64, GradientBundle)> {
        backward(&self.inputs(), &self.config, &self.gt, &self.loss)
    }

    /// `loss(a) - loss(b)` accumulated per pixel. Pixels outside the
    /// perturbation's reach are bitwise equal and contribute exactly zero,
    /// which keeps summation round-off out of the difference quotient.
    fn loss_difference(&self, a: &Field2D, b: &Field2D) -> f64 {
        let valid = self.loss.valid.bits();
        let mut total = 0.0;
        for (i, ((&pa, &pb), &g)) in a.values().iter().zip(b.values()).zip(self.gt.values()).enumerate() {
            if !valid[i] {
                continue;
            }
            let (ra, rb) = (pa - g, pb - g);
            total += match self.loss.rho {
                Rho::L1 => ra.abs() - rb.abs(),
                Rho::L2 => (pa - pb) * (ra + rb),
            };
        }
        total / self.loss.valid.count() as f64
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::X0, ParamGroup::RawAffinity, ParamGroup::Offsets];
        if self.config.use_confidence {
            g.push(ParamGroup::Confidence);
        }
        if self.config.scheme.gamma().is_some() {
            g.push(ParamGroup::Gamma);
        }
        g
    }

    fn coords(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::X0 | ParamGroup::Confidence => self.x0.len(),
            ParamGroup::RawAffinity => self.raw.raw().len(),
            ParamGroup::Offsets => 2 * self.neighbors.offsets().len(),
            ParamGroup::Gamma => 1,
        }
    }

    /// Prediction and regime signature with one coordinate shifted by `delta`.
    fn eval(&self, group: ParamGroup, index: usize, delta: f64) -> Result<(Field2D, Regime)> {
        let mut inst = self.clone();
        match group {
            ParamGroup::X0 => {
                let mut v = inst.x0.values().to_vec();
                v[index] += delta;
                inst.x0 = inst.x0.with_values(v)?;
            }
            ParamGroup::RawAffinity => {
                let mut v = inst.raw.raw().to_vec();
                v[index] += delta;
                inst.raw = AffinityField::new(inst.raw.height(), inst.raw.width(), inst.raw.k(), v)?;
            }
            ParamGroup::Offsets => {
                let mut v = inst.neighbors.offsets().to_vec();
                v[index / 2][index % 2] += delta;
                let (h, w) = inst.neighbors.shape();
                inst.neighbors = NeighborField::new(h, w, inst.neighbors.k(), v)?;
            }
            ParamGroup::Confidence => {
                let mut v = inst.conf.values().to_vec();
                v[index] += delta;
                inst.conf = ConfidenceMap::new(inst.conf.field().with_values(v)?)?;
            }
            ParamGroup::Gamma => {
                // the derivative is unconstrained: widen the bounds so the
                // bracket may step past them
                if let NormScheme::TanhGammaAbsSumStar {
                    gamma,
                    gamma_min,
                    gamma_max,
                } = inst.config.scheme
                {
                    inst.config.scheme = NormScheme::TanhGammaAbsSumStar {
                        gamma: gamma + delta,
                        gamma_min: gamma_min.min(gamma + delta),
                        gamma_max: gamma_max.max(gamma + delta),
                    };
                }
            }
        }
        inst.predict()
    }

    fn predict(&self) -> Result<(Field2D, Regime)> {
        let inputs = self.inputs();
        let tape = forward(&inputs, &self.config)?;
        let pred = tape.output();

        let mut discrete = Vec::new();
        for tap in &tape.prep.taps {
            discrete.push(tap.corners[0] as i64);
            discrete.push(tap.row_free as i64 | (tap.col_free as i64) << 1);
        }
        let k = self.raw.k();
        let mut buf = vec![0.0; k];
        for (p, raw) in self.raw.raw().chunks(k).enumerate() {
            let conf = tape.prep.conf_samples.as_ref().map(|c| &c[p * k..(p + 1) * k]);
            let outcome = self.config.scheme.apply(raw, conf, &mut buf);
            discrete.push(outcome.fired as i64 | (outcome.degenerate as i64) << 1);
            discrete.extend(buf.iter().map(|v| sign(*v) as i64));
        }
        let residual_signs = match self.loss.rho {
            Rho::L1 => pred
                .values()
                .iter()
                .zip(self.gt.values())
                .map(|(p, g)| sign(p - g))
                .collect(),
            Rho::L2 => Vec::new(),
        };
        Ok((
            pred,
            Regime {
                discrete,
                residual_signs,
            },
        ))
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Regime {
    discrete: Vec<i64>,
    residual_signs: Vec<i8>,
}

impl Regime {
    /// Same smooth piece as `base`. A zero L1 residual that moves is a kink
    /// inside the bracket, where central differences are only first-order
    /// accurate, so it counts as a change.
    fn matches(&self, base: &Regime) -> bool {
        self.discrete == base.discrete && self.residual_signs == base.residual_signs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Coordinates to compare per group; `usize::MAX` checks all of them.
    pub coords_per_group: usize,
    /// Seed for choosing the coordinate subset.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            coords_per_group: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    /// Coordinates excluded because the bracket crossed a seam or they sit
    /// on an L1 zero residual.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn group(&self, group: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,checked,skipped,max_rel_error,worst_index,passed\n");
        for g in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                g.group.name(),
                g.checked,
                g.skipped,
                crate::io::fmt_sig(g.max_rel_error),
                g.worst_index.map_or(String::new(), |i| i.to_string()),
                g.passed
            ));
        }
        out
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<13} checked {:>4}  skipped {:>3}  max rel err {:.3e}{}  {}",
                g.group.name(),
                g.checked,
                g.skipped,
                g.max_rel_error,
                g.worst_index.map_or(String::new(), |i| format!(" @ {i}")),
                if g.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "gradcheck {} (tolerance {:e})",
            if self.passed { "passed" } else { "FAILED" },
            self.tolerance
        )
    }
}

fn analytic(grads: &GradientBundle, group: ParamGroup, index: usize) -> f64 {
    match group {
        ParamGroup::X0 => grads.d_x0[index],
        ParamGroup::RawAffinity => grads.d_raw_aff[index],
        ParamGroup::Offsets => grads.d_offsets[index / 2][index % 2],
        ParamGroup::Confidence => grads.d_conf[index],
        ParamGroup::Gamma => grads.d_gamma,
    }
}

/// Compares `grads` against central differences of `instance`'s loss.
pub fn check_gradients(
    instance: &GradcheckInstance,
    grads: &GradientBundle,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let (_, base) = instance.predict()?;
    let h = opts.step;
    // L1 zero residuals are subgradient points of their own x0 entry
    let zero_residual: Vec<bool> = match instance.loss.rho {
        Rho::L1 => base.residual_signs.iter().map(|&s| s == 0).collect(),
        Rho::L2 => vec![false; instance.x0.len()],
    };
    let mut groups = Vec::new();
    for (gi, group) in instance.groups().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..instance.coords(group)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(gi as u64));
        order.shuffle(&mut rng);
        let mut report = GroupReport {
            group,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: None,
            passed: true,
        };
        for index in order {
            if report.checked >= opts.coords_per_group {
                break;
            }
            if group == ParamGroup::X0 && zero_residual[index] {
                report.skipped += 1;
                continue;
            }
            let (pp, rp) = instance.eval(group, index, h)?;
            let (pm, rm) = instance.eval(group, index, -h)?;
            if !rp.matches(&base) || !rm.matches(&base) {
                report.skipped += 1;
                continue;
            }
            let numeric = instance.loss_difference(&pp, &pm) / (2.0 * h);
            let a = analytic(grads, group, index);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst_index = Some(index);
                }
            }
        }
        report.passed = report.max_rel_error < opts.tolerance;
        groups.push(report);
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups,
        passed,
    })
}

/// Checks the default instance (8x8, K = 4, T = 3, L2, learnable gamma with
/// confidence) built from `seed`.
pub fn gradcheck(seed: u64, tolerance: f64) -> Result<GradcheckReport> {
    let inst = GradcheckInstance::random(seed, InstanceOptions::default())?;
    let (_, grads) = inst.backward()?;
    check_gradients(
        &inst,
        &grads,
        &GradcheckOptions {
            tolerance,
            seed,
            ..Default::default()
        },
    )
}
