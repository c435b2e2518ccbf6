//! Affinity normalization schemes and their derivatives.
//!
//! Every scheme runs the same three-stage pipeline on one pixel's `K` raw
//! affinities:
//!
//! 1. an elementwise pre-map: identity (`AbsSum`, `AbsSumStar`),
//!    `tanh(x) / C` (`TanhC`) or `tanh(x) / gamma` (`TanhGammaAbsSumStar`);
//! 2. optional multiplication by the neighbor confidences;
//! 3. a finishing step: unconditional division by the absolute sum
//!    (`AbsSum`), division only when the absolute sum exceeds 1
//!    (`AbsSumStar`, `TanhGammaAbsSumStar`), or nothing (`TanhC`).
//!
//! Confidence scaling sits before the finishing step so the stability bound
//! `sum |w| <= 1` holds on the weights that are actually propagated.

mod mc;

pub use mc::{mc_normalization_probability, mc_std_error, sample_normalized_pairs};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AffinityField, NormalizedAffinity};

/// Normalization scheme applied to raw affinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NormScheme {
    AbsSum,
    AbsSumStar,
    TanhC {
        c: f64,
    },
    TanhGammaAbsSumStar {
        gamma: f64,
        gamma_min: f64,
        gamma_max: f64,
    },
}

impl NormScheme {
    /// `TanhC` with `C = K`, the tightest constant that keeps stability.
    pub fn tanh_c_for(k: usize) -> Self {
        NormScheme::TanhC { c: k as f64 }
    }

    /// Learnable-gamma scheme with bounds `[1, 2K]`.
    pub fn tanh_gamma(gamma: f64, k: usize) -> Self {
        let (gamma_min, gamma_max) = default_gamma_bounds(k);
        NormScheme::TanhGammaAbsSumStar {
            gamma,
            gamma_min,
            gamma_max,
        }
    }

    /// Learnable-gamma scheme initialised at `gamma = K`.
    pub fn tanh_gamma_default(k: usize) -> Self {
        Self::tanh_gamma(k as f64, k)
    }

    pub fn name(&self) -> &'static str {
        match self {
            NormScheme::AbsSum => "abs-sum",
            NormScheme::AbsSumStar => "abs-sum-star",
            NormScheme::TanhC { .. } => "tanh-c",
            NormScheme::TanhGammaAbsSumStar { .. } => "tanh-gamma-abs-sum-star",
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            NormScheme::TanhGammaAbsSumStar { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    /// Same scheme with gamma replaced (no-op for other schemes).
    pub fn with_gamma(self, value: f64) -> Self {
        match self {
            NormScheme::TanhGammaAbsSumStar {
                gamma_min,
                gamma_max,
                ..
            } => NormScheme::TanhGammaAbsSumStar {
                gamma: value,
                gamma_min,
                gamma_max,
            },
            other => other,
        }
    }

    /// Projects gamma into its bounds.
    pub fn project_gamma(self) -> Self {
        match self {
            NormScheme::TanhGammaAbsSumStar {
                gamma,
                gamma_min,
                gamma_max,
            } => NormScheme::TanhGammaAbsSumStar {
                gamma: gamma.clamp(gamma_min, gamma_max),
                gamma_min,
                gamma_max,
            },
            other => other,
        }
    }

    /// Checks the side conditions for `k` neighbors: `C >= K` and
    /// `0 < gamma_min <= gamma <= gamma_max`.
    pub fn validate(&self, k: usize) -> Result<()> {
        match *self {
            NormScheme::TanhC { c } => {
                if !(c >= k as f64) || !c.is_finite() {
                    return Err(Error::Config(format!(
                        "tanh-c needs C >= K, got C = {c} with K = {k}"
                    )));
                }
            }
            NormScheme::TanhGammaAbsSumStar {
                gamma,
                gamma_min,
                gamma_max,
            } => {
                if !(gamma_min > 0.0) || !(gamma_min <= gamma_max) || !gamma_max.is_finite() {
                    return Err(Error::Config(format!(
                        "invalid gamma bounds [{gamma_min}, {gamma_max}]"
                    )));
                }
                if !(gamma_min..=gamma_max).contains(&gamma) {
                    return Err(Error::Config(format!(
                        "gamma {gamma} outside [{gamma_min}, {gamma_max}]"
                    )));
                }
            }
            NormScheme::AbsSum | NormScheme::AbsSumStar => {}
        }
        Ok(())
    }

    /// Elementwise pre-map and its derivative.
    #[inline]
    fn pre(&self, raw: f64) -> (f64, f64) {
        match *self {
            NormScheme::AbsSum | NormScheme::AbsSumStar => (raw, 1.0),
            NormScheme::TanhC { c } => {
                let t = raw.tanh();
                (t / c, (1.0 - t * t) / c)
            }
            NormScheme::TanhGammaAbsSumStar { gamma, .. } => {
                let t = raw.tanh();
                (t / gamma, (1.0 - t * t) / gamma)
            }
        }
    }

    /// Whether the renormalization branch fires for an already confidence
    /// scaled vector with absolute sum `abs_sum`.
    #[inline]
    fn fires(&self, abs_sum: f64) -> bool {
        match self {
            NormScheme::AbsSum => true,
            NormScheme::AbsSumStar | NormScheme::TanhGammaAbsSumStar { .. } => abs_sum > 1.0,
            NormScheme::TanhC { .. } => false,
        }
    }

    /// Normalizes one pixel's raw affinities into `out`.
    ///
    /// `conf` holds the confidences of the `K` neighbors. An all-zero vector
    /// under `AbsSum` yields zero weights and is reported as degenerate.
    pub fn apply(&self, raw: &[f64], conf: Option<&[f64]>, out: &mut [f64]) -> PixelNorm {
        debug_assert_eq!(raw.len(), out.len());
        for (k, (o, &r)) in out.iter_mut().zip(raw).enumerate() {
            let u = self.pre(r).0;
            *o = match conf {
                Some(c) => c[k] * u,
                None => u,
            };
        }
        let abs_sum: f64 = out.iter().map(|v| v.abs()).sum();
        if matches!(self, NormScheme::AbsSum) && abs_sum == 0.0 {
            return PixelNorm {
                fired: false,
                degenerate: true,
            };
        }
        let fired = self.fires(abs_sum);
        if fired {
            out.iter_mut().for_each(|v| *v /= abs_sum);
        }
        PixelNorm {
            fired,
            degenerate: false,
        }
    }

    /// Reverse-mode derivative of [`NormScheme::apply`].
    ///
    /// Given `d_w = dL/dw`, writes `dL/draw` into `d_raw`, adds `dL/dconf`
    /// into `d_conf` when confidences are used, and returns `dL/dgamma`
    /// (zero for schemes without gamma). The branch taken is the one
    /// `apply` takes on the same inputs.
    pub fn vjp(
        &self,
        raw: &[f64],
        conf: Option<&[f64]>,
        d_w: &[f64],
        d_raw: &mut [f64],
        mut d_conf: Option<&mut [f64]>,
    ) -> f64 {
        let k = raw.len();
        // Recompute the forward intermediates: u = pre(raw), v = conf * u.
        let mut u = [0.0f64; 32];
        let mut du = [0.0f64; 32];
        let mut heap_u;
        let mut heap_du;
        let (u, du): (&mut [f64], &mut [f64]) = if k <= 32 {
            (&mut u[..k], &mut du[..k])
        } else {
            heap_u = vec![0.0; k];
            heap_du = vec![0.0; k];
            (&mut heap_u[..], &mut heap_du[..])
        };
        let mut abs_sum = 0.0;
        let mut v_dot_dw = 0.0;
        for i in 0..k {
            let (ui, dui) = self.pre(raw[i]);
            u[i] = ui;
            du[i] = dui;
            let vi = conf.map_or(ui, |c| c[i] * ui);
            abs_sum += vi.abs();
            v_dot_dw += vi * d_w[i];
        }
        let degenerate = matches!(self, NormScheme::AbsSum) && abs_sum == 0.0;
        let fired = !degenerate && self.fires(abs_sum);

        let mut d_gamma = 0.0;
        for i in 0..k {
            let vi = conf.map_or(u[i], |c| c[i] * u[i]);
            let d_v = if degenerate {
                0.0
            } else if fired {
                d_w[i] / abs_sum - signum0(vi) * v_dot_dw / (abs_sum * abs_sum)
            } else {
                d_w[i]
            };
            let d_u = match conf {
                Some(c) => {
                    if let Some(dc) = d_conf.as_deref_mut() {
                        dc[i] += u[i] * d_v;
                    }
                    c[i] * d_v
                }
                None => d_v,
            };
            d_raw[i] = d_u * du[i];
            if let NormScheme::TanhGammaAbsSumStar { gamma, .. } = *self {
                d_gamma -= d_u * u[i] / gamma;
            }
        }
        d_gamma
    }
}

/// Sign with `sign(0) = 0`.
#[inline]
fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn default_gamma_bounds(k: usize) -> (f64, f64) {
    (1.0, 2.0 * k as f64)
}

/// Outcome of normalizing one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelNorm {
    /// The renormalization branch was taken.
    pub fired: bool,
    /// `AbsSum` met an all-zero vector; weights were set to zero.
    pub degenerate: bool,
}

/// `w_k = raw_k / sum |raw|`. Fails on the zero vector.
pub fn abs_sum(raw: &[f64]) -> Result<Vec<f64>> {
    let s: f64 = raw.iter().map(|v| v.abs()).sum();
    if s == 0.0 {
        return Err(Error::ZeroAffinity);
    }
    Ok(raw.iter().map(|v| v / s).collect())
}

/// Divides by the absolute sum only when it exceeds 1.
pub fn abs_sum_star(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().map(|v| v.abs()).sum();
    if s > 1.0 {
        raw.iter().map(|v| v / s).collect()
    } else {
        raw.to_vec()
    }
}

/// `w_k = tanh(raw_k) / C` with `C >= K`.
pub fn tanh_c(raw: &[f64], c: f64) -> Result<Vec<f64>> {
    NormScheme::TanhC { c }.validate(raw.len())?;
    Ok(raw.iter().map(|v| v.tanh() / c).collect())
}

/// `abs_sum_star(tanh(raw) / gamma)`. Only positivity of gamma is checked
/// here; bounds are enforced by [`NormScheme::validate`].
pub fn tanh_gamma_abs_sum_star(raw: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let u: Vec<f64> = raw.iter().map(|v| v.tanh() / gamma).collect();
    Ok(abs_sum_star(&u))
}

/// Elementwise product with neighbor confidences.
pub fn confidence_scale(weights: &[f64], neighbor_conf: &[f64]) -> Vec<f64> {
    weights.iter().zip(neighbor_conf).map(|(w, c)| c * w).collect()
}

/// Self weight `1 - sum(w)`.
pub fn reference_weight(weights: &[f64]) -> f64 {
    1.0 - weights.iter().sum::<f64>()
}

/// `1 - sum |w|`; non-negative exactly when the pixel is stable.
pub fn stability_margin(weights: &[f64]) -> f64 {
    1.0 - weights.iter().map(|v| v.abs()).sum::<f64>()
}

/// Normalizes every pixel of a raw affinity field.
///
/// `conf_samples` holds the confidence of each `(pixel, neighbor)` pair in
/// the affinity layout.
pub fn normalize_field(
    raw: &AffinityField,
    conf_samples: Option<&[f64]>,
    scheme: &NormScheme,
) -> Result<NormalizedAffinity> {
    let k = raw.k();
    scheme.validate(k)?;
    if let Some(c) = conf_samples {
        if c.len() != raw.raw().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} confidence samples for {} affinities",
                c.len(),
                raw.raw().len()
            )));
        }
    }
    let mut weights = vec![0.0; raw.raw().len()];
    let (reference, degenerate): (Vec<f64>, Vec<bool>) = weights
        .par_chunks_mut(k)
        .zip(raw.raw().par_chunks(k))
        .enumerate()
        .map(|(p, (w, r))| {
            let c = conf_samples.map(|c| &c[p * k..(p + 1) * k]);
            let outcome = scheme.apply(r, c, w);
            (reference_weight(w), outcome.degenerate)
        })
        .unzip();
    Ok(NormalizedAffinity {
        height: raw.height(),
        width: raw.width(),
        k,
        weights,
        reference,
        degenerate: degenerate.iter().filter(|&&d| d).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Validate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15)
    }

    #[test]
    fn abs_sum_examples() {
        assert!(close(&abs_sum(&[0.3, 0.7]).unwrap(), &[0.3, 0.7]));
        assert!(close(&abs_sum(&[1.0, -1.0]).unwrap(), &[0.5, -0.5]));
        assert!(close(&abs_sum(&[2.0, 0.0, 0.0, 2.0]).unwrap(), &[0.5, 0.0, 0.0, 0.5]));
        assert!(matches!(abs_sum(&[0.0, 0.0]), Err(Error::ZeroAffinity)));
    }

    #[test]
    fn abs_sum_star_examples() {
        assert_eq!(abs_sum_star(&[0.2, -0.3]), vec![0.2, -0.3]);
        assert!(close(&abs_sum_star(&[1.0, -1.0]), &[0.5, -0.5]));
        assert_eq!(abs_sum_star(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn tanh_c_examples() {
        assert_eq!(tanh_c(&[0.0, 0.0], 2.0).unwrap(), vec![0.0, 0.0]);
        let sat = tanh_c(&[50.0, -50.0], 2.0).unwrap();
        assert!((sat[0] - 0.5).abs() < 1e-12 && (sat[1] + 0.5).abs() < 1e-12);
        let w = tanh_c(&[0.5, -1.0], 2.0).unwrap();
        assert_eq!(w, vec![0.5f64.tanh() / 2.0, (-1.0f64).tanh() / 2.0]);
        assert!(matches!(tanh_c(&[0.1, 0.2, 0.3], 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn tanh_gamma_examples() {
        assert_eq!(tanh_gamma_abs_sum_star(&[0.0; 5], 3.0).unwrap(), vec![0.0; 5]);
        // small raw values stay in the pure scaled-tanh regime at gamma 1.25
        let raw = [0.3, -0.4];
        let w = tanh_gamma_abs_sum_star(&raw, 1.25).unwrap();
        assert!(w.iter().map(|v| v.abs()).sum::<f64>() <= 1.0);
        assert_eq!(w, vec![0.3f64.tanh() / 1.25, (-0.4f64).tanh() / 1.25]);
        // gamma = K never falls back
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..8).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let a = tanh_gamma_abs_sum_star(&raw, 8.0).unwrap();
            assert_eq!(a, tanh_c(&raw, 8.0).unwrap());
        }
    }

    #[test]
    fn gamma_bounds_enforced() {
        assert!(NormScheme::tanh_gamma(8.0, 8).validate(8).is_ok());
        assert!(NormScheme::tanh_gamma(0.5, 8).validate(8).is_err());
        assert!(NormScheme::tanh_gamma(17.0, 8).validate(8).is_err());
        assert_eq!(NormScheme::tanh_gamma(40.0, 8).project_gamma().gamma(), Some(16.0));
        assert!(tanh_gamma_abs_sum_star(&[1.0], 0.0).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_scale(&[0.4, 0.4], &[1.0, 1.0]), vec![0.4, 0.4]);
        assert_eq!(confidence_scale(&[0.4, -0.4], &[0.0, 0.0]), vec![0.0, -0.0]);
        assert_eq!(confidence_scale(&[0.4, 0.4], &[1.0, 0.5]), vec![0.4, 0.2]);
    }

    #[test]
    fn reference_and_margin_examples() {
        assert!((reference_weight(&[0.1, 0.3]) - 0.6).abs() < 1e-15);
        assert_eq!(reference_weight(&[0.0, 0.0]), 1.0);
        assert_eq!(reference_weight(&[-0.2, -0.3]), 1.5);
        assert_eq!(stability_margin(&[0.5, -0.5]), 0.0);
        assert!((stability_margin(&[0.1, 0.2]) - 0.7).abs() < 1e-15);
        let w = tanh_c(&[100.0, -100.0, 100.0, 3.0], 4.0).unwrap();
        assert!(stability_margin(&w) > 0.0);
    }

    #[test]
    fn zero_confidence_neighbor_contributes_nothing() {
        let scheme = NormScheme::tanh_gamma(1.0, 3);
        let mut w = [0.0; 3];
        scheme.apply(&[2.0, -1.0, 0.5], Some(&[0.0, 1.0, 1.0]), &mut w);
        assert_eq!(w[0], 0.0);
        let mut d_raw = [0.0; 3];
        let mut d_conf = [0.0; 3];
        scheme.vjp(&[2.0, -1.0, 0.5], Some(&[0.0, 1.0, 1.0]), &[1.0, 2.0, 3.0], &mut d_raw, Some(&mut d_conf));
        assert_eq!(d_raw[0], 0.0);
    }

    #[test]
    fn degenerate_abs_sum_pixel() {
        let raw = AffinityField::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let n = normalize_field(&raw, None, &NormScheme::AbsSum).unwrap();
        assert_eq!(n.degenerate_pixels(), 1);
        assert_eq!(n.pixel(0, 0), &[0.0, 0.0]);
        assert_eq!(n.reference()[0], 1.0);
        assert!(n.validate().is_ok());
    }

    /// Every scheme variant, including ones that need confidences.
    fn schemes(k: usize, rng: &mut ChaCha8Rng) -> Vec<NormScheme> {
        vec![
            NormScheme::AbsSum,
            NormScheme::AbsSumStar,
            NormScheme::TanhC { c: k as f64 * rng.random_range(1.0..2.0) },
            NormScheme::tanh_gamma(rng.random_range(1.0..2.0 * k as f64), k),
        ]
    }

    #[test]
    fn vjp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for trial in 0..200 {
            let k = [1, 2, 4, 8][trial % 4];
            for scheme in schemes(k, &mut rng) {
                let raw: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let conf: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let dw: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let objective = |raw: &[f64], conf: &[f64], s: &NormScheme| {
                    let mut w = vec![0.0; k];
                    let o = s.apply(raw, Some(conf), &mut w);
                    (w.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>(), o.fired)
                };
                let (_, fired) = objective(&raw, &conf, &scheme);
                let mut d_raw = vec![0.0; k];
                let mut d_conf = vec![0.0; k];
                let d_gamma = scheme.vjp(&raw, Some(&conf), &dw, &mut d_raw, Some(&mut d_conf));
                let check = |a: f64, plus: (f64, bool), minus: (f64, bool)| {
                    if plus.1 != fired || minus.1 != fired {
                        return;
                    }
                    let n = (plus.0 - minus.0) / (2.0 * h);
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                    assert!(rel < 1e-5, "{scheme:?}: analytic {a} vs fd {n}");
                };
                for i in 0..k {
                    let mut rp = raw.clone();
                    let mut rm = raw.clone();
                    rp[i] += h;
                    rm[i] -= h;
                    check(d_raw[i], objective(&rp, &conf, &scheme), objective(&rm, &conf, &scheme));
                    let mut cp = conf.clone();
                    let mut cm = conf.clone();
                    cp[i] += h;
                    cm[i] -= h;
                    check(d_conf[i], objective(&raw, &cp, &scheme), objective(&raw, &cm, &scheme));
                }
                if let Some(g) = scheme.gamma() {
                    let sp = scheme.with_gamma(g + h);
                    let sm = scheme.with_gamma(g - h);
                    check(d_gamma, objective(&raw, &conf, &sp), objective(&raw, &conf, &sm));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn outputs_are_stable(
            raw in prop::collection::vec(-20.0f64..20.0, 1..17),
            conf_seed in 0u64..10_000,
            gamma_frac in 0.0f64..1.0,
            use_conf in any::<bool>(),
        ) {
            let k = raw.len();
            let mut rng = ChaCha8Rng::seed_from_u64(conf_seed);
            let conf: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
            let (lo, hi) = default_gamma_bounds(k);
            for scheme in [
                NormScheme::AbsSum,
                NormScheme::AbsSumStar,
                NormScheme::tanh_c_for(k),
                NormScheme::tanh_gamma(lo + gamma_frac * (hi - lo), k),
            ] {
                let mut w = vec![0.0; k];
                scheme.apply(&raw, use_conf.then_some(&conf[..]), &mut w);
                prop_assert!(stability_margin(&w) >= -1e-12);
                prop_assert!((reference_weight(&w) + w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            }
        }

        #[test]
        fn abs_sum_star_fixed_point_inside_ball(raw in prop::collection::vec(-1.0f64..1.0, 1..9)) {
            let s: f64 = raw.iter().map(|v| v.abs()).sum();
            prop_assume!(s <= 1.0);
            prop_assert_eq!(abs_sum_star(&raw), raw);
        }

        #[test]
        fn gamma_at_least_k_never_falls_back(
            raw in prop::collection::vec(-50.0f64..50.0, 1..17),
            extra in 0.0f64..5.0,
        ) {
            let k = raw.len();
            let scheme = NormScheme::TanhGammaAbsSumStar { gamma: k as f64 + extra, gamma_min: 1.0, gamma_max: 100.0 };
            let mut w = vec![0.0; k];
            prop_assert!(!scheme.apply(&raw, None, &mut w).fired);
        }

        #[test]
        fn lowering_confidence_never_grows_weight(
            raw in prop::collection::vec(-5.0f64..5.0, 2..9),
            seed in 0u64..10_000,
            which in 0usize..8,
            drop in 0.0f64..1.0,
        ) {
            let k = raw.len();
            let which = which % k;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=1.0)).collect();
            let mut lowered = conf.clone();
            lowered[which] *= drop;
            for scheme in [NormScheme::AbsSum, NormScheme::AbsSumStar, NormScheme::tanh_c_for(k), NormScheme::tanh_gamma(1.5, k)] {
                let mut a = vec![0.0; k];
                let mut b = vec![0.0; k];
                scheme.apply(&raw, Some(&conf), &mut a);
                scheme.apply(&raw, Some(&lowered), &mut b);
                prop_assert!(b[which].abs() <= a[which].abs() + 1e-15);
            }
        }
    }
}
