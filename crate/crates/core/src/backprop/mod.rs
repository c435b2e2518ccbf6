//! Reverse-mode derivatives of the reconstruction loss through `T`
//! propagation steps.
//!
//! The forward sweep stores every intermediate field `x_0 .. x_T`; the
//! reverse sweep walks them backwards, then pulls the accumulated weight
//! gradients through the normalization scheme and the confidence sampling.
//! Per-pixel work runs in parallel; every scatter into shared buffers is done
//! in a fixed serial order so results do not depend on the worker count.

mod gradcheck;

pub use gradcheck::{
    check_gradients, gradcheck, GradcheckInstance, GradcheckOptions, GradcheckReport, GroupReport,
    InstanceOptions, ParamGroup, SchemeKind,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field2D, Mask};
use crate::propagation::{impose_seeds, prepare, seeds_for, step_taps, Prepared, PropagationConfig, PropagationInputs};

/// Exponent of the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rho {
    L1,
    L2,
}

impl Rho {
    pub fn from_int(rho: u8) -> Result<Self> {
        match rho {
            1 => Ok(Rho::L1),
            2 => Ok(Rho::L2),
            other => Err(Error::Config(format!("rho must be 1 or 2, got {other}"))),
        }
    }
}

/// `(1/|V|) sum_{v in V} |gt_v - pred_v|^rho` over the valid pixels `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub rho: Rho,
    pub valid: Mask,
}

impl LossSpec {
    pub fn new(rho: Rho, valid: Mask) -> Result<Self> {
        if valid.count() == 0 {
            return Err(Error::EmptySet("loss has no valid pixels"));
        }
        Ok(Self { rho, valid })
    }

    /// Every pixel valid.
    pub fn dense(rho: Rho, height: usize, width: usize) -> Result<Self> {
        Self::new(rho, Mask::filled(height, width, true)?)
    }
}

pub fn loss(pred: &Field2D, gt: &Field2D, spec: &LossSpec) -> Result<f64> {
    loss_and_grad(pred, gt, spec).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `pred`. The L1 subgradient at a
/// zero residual is 0.
pub fn loss_and_grad(pred: &Field2D, gt: &Field2D, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != gt.shape() || spec.valid.shape() != gt.shape() {
        return Err(Error::ShapeMismatch("loss operands".into()));
    }
    let n = spec.valid.count();
    if n == 0 {
        return Err(Error::EmptySet("loss has no valid pixels"));
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if !spec.valid.bits()[i] {
            continue;
        }
        let r = p - g;
        match spec.rho {
            Rho::L1 => {
                total += r.abs();
                grad[i] = if r > 0.0 {
                    inv
                } else if r < 0.0 {
                    -inv
                } else {
                    0.0
                };
            }
            Rho::L2 => {
                total += r * r;
                grad[i] = 2.0 * r * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Gradients of a scalar objective with respect to every learnable input.
/// Layouts mirror the primal containers.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub d_x0: Vec<f64>,
    pub d_raw_aff: Vec<f64>,
    pub d_offsets: Vec<[f64; 2]>,
    /// Zero when confidence is not used.
    pub d_conf: Vec<f64>,
    /// Zero for schemes without a learnable gamma.
    pub d_gamma: f64,
}

impl GradientBundle {
    pub fn all_finite(&self) -> bool {
        self.d_x0.iter().all(|v| v.is_finite())
            && self.d_raw_aff.iter().all(|v| v.is_finite())
            && self.d_offsets.iter().flatten().all(|v| v.is_finite())
            && self.d_conf.iter().all(|v| v.is_finite())
            && self.d_gamma.is_finite()
    }
}

/// Forward pass with all intermediates kept for the reverse sweep.
pub struct ForwardTape {
    pub(crate) prep: Prepared,
    /// `x_0 .. x_T`, flat.
    pub(crate) states: Vec<Vec<f64>>,
    height: usize,
    width: usize,
}

impl ForwardTape {
    pub fn output(&self) -> Field2D {
        Field2D::from_vec(self.height, self.width, self.states.last().cloned().unwrap_or_default())
            .expect("tape shape is consistent")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

pub fn forward(inputs: &PropagationInputs<'_>, config: &PropagationConfig) -> Result<ForwardTape> {
    config.validate()?;
    let seeds = seeds_for(inputs, config)?;
    let prep = prepare(inputs, &config.scheme, config.use_confidence)?;
    let mut states = Vec::with_capacity(config.steps + 1);
    states.push(inputs.x0.values().to_vec());
    for t in 0..config.steps {
        let mut next = vec![0.0; inputs.x0.len()];
        step_taps(&states[t], &prep.taps, &prep.weights, &mut next);
        if let Some(s) = seeds {
            impose_seeds(&mut next, s);
        }
        states.push(next);
    }
    let (height, width) = inputs.x0.shape();
    Ok(ForwardTape {
        prep,
        states,
        height,
        width,
    })
}

/// Pulls `cotangent = dL/dx_T` back through a recorded forward pass.
pub fn vjp_with_tape(
    tape: &ForwardTape,
    inputs: &PropagationInputs<'_>,
    config: &PropagationConfig,
    cotangent: &[f64],
) -> Result<GradientBundle> {
    let (h, w) = (tape.height, tape.width);
    let npix = h * w;
    if cotangent.len() != npix {
        return Err(Error::ShapeMismatch("cotangent".into()));
    }
    let seeds = seeds_for(inputs, config)?;
    let prep = &tape.prep;
    let k = prep.weights.k;
    let weights = &prep.weights.weights;
    let reference = &prep.weights.reference;

    let mut g = cotangent.to_vec();
    if let Some(s) = seeds {
        zero_masked(&mut g, s.mask());
    }
    let mut g_w = vec![0.0; npix * k];
    let mut g_ref = vec![0.0; npix];
    let mut g_off = vec![[0.0; 2]; npix * k];

    for t in (1..tape.states.len()).rev() {
        let x_prev = &tape.states[t - 1];
        // Per-pixel parameter gradients: disjoint writes, safe in parallel.
        g_w.par_chunks_mut(k)
            .zip(g_off.par_chunks_mut(k))
            .zip(g_ref.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((gw, go), gr))| {
                let gp = g[p];
                if gp == 0.0 {
                    return;
                }
                *gr += gp * x_prev[p];
                for j in 0..k {
                    let tap = &prep.taps[p * k + j];
                    gw[j] += gp * tap.sample(x_prev);
                    let (dr, dc) = tap.coord_grad(x_prev);
                    let scale = gp * weights[p * k + j];
                    go[j][0] += scale * dr;
                    go[j][1] += scale * dc;
                }
            });
        // Transpose of the step: ordered scatter into the previous state.
        let mut g_prev = vec![0.0; npix];
        for p in 0..npix {
            let gp = g[p];
            if gp == 0.0 {
                continue;
            }
            g_prev[p] += gp * reference[p];
            for j in 0..k {
                let tap = &prep.taps[p * k + j];
                let scale = gp * weights[p * k + j];
                for (c, cw) in tap.corners.iter().zip(tap.weights()) {
                    g_prev[*c] += scale * cw;
                }
            }
        }
        if t > 1 {
            if let Some(s) = seeds {
                zero_masked(&mut g_prev, s.mask());
            }
        }
        g = g_prev;
    }

    // w_ref = 1 - sum(w), so each neighbor weight also receives -dL/dw_ref.
    let conf_samples = prep.conf_samples.as_deref();
    let mut d_raw = vec![0.0; npix * k];
    let mut d_cs = vec![0.0; if conf_samples.is_some() { npix * k } else { 0 }];
    let raw = inputs.raw.raw();
    let scheme = &config.scheme;
    let pixel_vjp = |p: usize, dr: &mut [f64], dc: Option<&mut [f64]>| {
        let d_w: Vec<f64> = (0..k).map(|j| g_w[p * k + j] - g_ref[p]).collect();
        let c = conf_samples.map(|c| &c[p * k..(p + 1) * k]);
        scheme.vjp(&raw[p * k..(p + 1) * k], c, &d_w, dr, dc)
    };
    let d_gamma_px: Vec<f64> = if conf_samples.is_some() {
        d_raw
            .par_chunks_mut(k)
            .zip(d_cs.par_chunks_mut(k))
            .enumerate()
            .map(|(p, (dr, dc))| pixel_vjp(p, dr, Some(dc)))
            .collect()
    } else {
        d_raw
            .par_chunks_mut(k)
            .enumerate()
            .map(|(p, dr)| pixel_vjp(p, dr, None))
            .collect()
    };
    let d_gamma = if config.scheme.gamma().is_some() {
        d_gamma_px.iter().sum()
    } else {
        0.0
    };

    let mut d_conf = vec![0.0; npix];
    if let (Some(conf), true) = (inputs.conf, conf_samples.is_some()) {
        let cv = conf.values();
        for (i, tap) in prep.taps.iter().enumerate() {
            let gc = d_cs[i];
            if gc == 0.0 {
                continue;
            }
            for (c, cw) in tap.corners.iter().zip(tap.weights()) {
                d_conf[*c] += gc * cw;
            }
            let (dr, dc) = tap.coord_grad(cv);
            g_off[i][0] += gc * dr;
            g_off[i][1] += gc * dc;
        }
    }

    Ok(GradientBundle {
        height: h,
        width: w,
        k,
        d_x0: g,
        d_raw_aff: d_raw,
        d_offsets: g_off,
        d_conf,
        d_gamma,
    })
}

fn zero_masked(g: &mut [f64], mask: &Mask) {
    for (v, &m) in g.iter_mut().zip(mask.bits()) {
        if m {
            *v = 0.0;
        }
    }
}

/// Vector-Jacobian product of the propagation output with `cotangent`.
pub fn vjp(
    inputs: &PropagationInputs<'_>,
    config: &PropagationConfig,
    cotangent: &Field2D,
) -> Result<GradientBundle> {
    let tape = forward(inputs, config)?;
    vjp_with_tape(&tape, inputs, config, cotangent.values())
}

/// Loss of the propagated prediction against `gt` and its gradients.
pub fn backward(
    inputs: &PropagationInputs<'_>,
    config: &PropagationConfig,
    gt: &Field2D,
    spec: &LossSpec,
) -> Result<(f64, GradientBundle)> {
    let tape = forward(inputs, config)?;
    let pred = tape.output();
    let (l, g) = loss_and_grad(&pred, gt, spec)?;
    let grads = vjp_with_tape(&tape, inputs, config, &g)?;
    Ok((l, grads))
}
