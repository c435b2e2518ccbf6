//! Depth-completion error metrics over a mask of valid pixels.
//!
//! Inputs are in meters. RMSE and MAE are reported in millimeters, the
//! inverse-depth metrics in 1/km.

use crate::error::{Error, Result};
use crate::grid::{Field2D, Mask};
use crate::io::fmt_sig;

/// Thresholds for the `δ_τ` accuracy metrics.
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

pub const CSV_HEADER: &str = "rmse,mae,irmse,imae,rel,d1,d2,d3,count";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// mm
    pub rmse: f64,
    /// mm
    pub mae: f64,
    /// 1/km; `None` when some valid prediction is not positive.
    pub irmse: Option<f64>,
    /// 1/km; `None` when some valid prediction is not positive.
    pub imae: Option<f64>,
    pub rel: f64,
    /// Percentages for each entry of [`DELTA_THRESHOLDS`].
    pub delta: [f64; 3],
    pub count: usize,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), fmt_sig);
        format!(
            "{},{},{},{},{},{},{},{},{}",
            fmt_sig(self.rmse),
            fmt_sig(self.mae),
            opt(self.irmse),
            opt(self.imae),
            fmt_sig(self.rel),
            fmt_sig(self.delta[0]),
            fmt_sig(self.delta[1]),
            fmt_sig(self.delta[2]),
            self.count
        )
    }
}

/// Metrics of `pred` against `gt` over `valid`.
pub fn evaluate(pred: &Field2D, gt: &Field2D, valid: &Mask) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, gt {:?}, mask {:?}",
            pred.shape(),
            gt.shape(),
            valid.shape()
        )));
    }
    let w = gt.width();
    let mut count = 0usize;
    let (mut sq, mut abs, mut isq, mut iabs, mut rel) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut inverse_defined = true;
    for (i, (&p, &g)) in pred.values().iter().zip(gt.values()).enumerate() {
        if !valid.bits()[i] {
            continue;
        }
        if g <= 0.0 {
            return Err(Error::NonPositiveDepth {
                row: i / w,
                col: i % w,
                value: g,
            });
        }
        count += 1;
        let e = g - p;
        sq += e * e;
        abs += e.abs();
        rel += (e / g).abs();
        if p > 0.0 {
            let ie = 1.0 / g - 1.0 / p;
            isq += ie * ie;
            iabs += ie.abs();
            let ratio = (p / g).max(g / p);
            for (n, tau) in within.iter_mut().zip(DELTA_THRESHOLDS) {
                if ratio < tau {
                    *n += 1;
                }
            }
        } else {
            inverse_defined = false;
        }
    }
    if count == 0 {
        return Err(Error::EmptySet("no valid pixels to evaluate"));
    }
    let n = count as f64;
    Ok(MetricReport {
        rmse: (sq / n).sqrt() * 1000.0,
        mae: abs / n * 1000.0,
        irmse: inverse_defined.then(|| (isq / n).sqrt() * 1000.0),
        imae: inverse_defined.then(|| iabs / n * 1000.0),
        rel: rel / n,
        delta: within.map(|k| 100.0 * k as f64 / n),
        count,
    })
}

/// [`evaluate`] restricted to `band ∩ valid`.
pub fn evaluate_banded(pred: &Field2D, gt: &Field2D, valid: &Mask, band: &Mask) -> Result<MetricReport> {
    if band.shape() != valid.shape() {
        return Err(Error::ShapeMismatch(format!(
            "band {:?} vs mask {:?}",
            band.shape(),
            valid.shape()
        )));
    }
    let both = valid.and(band)?;
    if both.count() == 0 {
        return Err(Error::EmptySet("band does not intersect the valid pixels"));
    }
    evaluate(pred, gt, &both)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Field2D {
        Field2D::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn all(n: usize) -> Mask {
        Mask::filled(1, n, true).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let gt = row(&[1.0, 2.5, 7.0]);
        let r = evaluate(&gt, &gt, &all(3)).unwrap();
        assert_eq!((r.rmse, r.mae, r.rel), (0.0, 0.0, 0.0));
        assert_eq!((r.irmse, r.imae), (Some(0.0), Some(0.0)));
        assert_eq!(r.delta, [100.0; 3]);
        assert_eq!(r.count, 3);
    }

    #[test]
    fn two_pixel_example() {
        let r = evaluate(&row(&[1.0, 2.0]), &row(&[1.0, 1.0]), &all(2)).unwrap();
        assert!((r.rmse - 0.5f64.sqrt() * 1000.0).abs() < 1e-9);
        assert!((r.mae - 500.0).abs() < 1e-12);
        // mean(|gt - pred| / gt) = (0 + 1) / 2
        assert!((r.rel - 0.5).abs() < 1e-15);
        assert_eq!(r.delta[0], 50.0);
        // ratio 2 < 1.25^3 = 1.953125 is false
        assert_eq!(r.delta[2], 50.0);
    }

    #[test]
    fn inverse_example() {
        let r = evaluate(&row(&[4.0]), &row(&[2.0]), &all(1)).unwrap();
        assert!((r.irmse.unwrap() - 250.0).abs() < 1e-12);
        assert!((r.imae.unwrap() - 250.0).abs() < 1e-12);
    }

    #[test]
    fn delta_is_strict() {
        let r = evaluate(&row(&[1.25]), &row(&[1.0]), &all(1)).unwrap();
        assert_eq!(r.delta, [0.0, 100.0, 100.0]);
    }

    #[test]
    fn invalid_pixels_ignored() {
        let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let r = evaluate(&row(&[1.0, -5.0, 3.0]), &row(&[1.0, 0.0, 3.0]), &mask).unwrap();
        assert_eq!(r.count, 2);
        assert_eq!(r.rmse, 0.0);
    }

    #[test]
    fn bad_depths() {
        assert!(matches!(
            evaluate(&row(&[1.0]), &row(&[0.0]), &all(1)),
            Err(Error::NonPositiveDepth { .. })
        ));
        let r = evaluate(&row(&[-1.0, 2.0]), &row(&[1.0, 2.0]), &all(2)).unwrap();
        assert_eq!((r.irmse, r.imae), (None, None));
        assert!((r.mae - 1000.0).abs() < 1e-12);
        assert!(r.csv_row().contains(",nan,nan,"));
        assert!(evaluate(&row(&[1.0]), &row(&[1.0]), &Mask::filled(1, 1, false).unwrap()).is_err());
    }

    #[test]
    fn banded() {
        let pred = row(&[1.0, 2.0, 3.0, 5.0]);
        let gt = row(&[1.0, 2.5, 3.0, 4.0]);
        let valid = all(4);
        assert_eq!(
            evaluate_banded(&pred, &gt, &valid, &all(4)).unwrap(),
            evaluate(&pred, &gt, &valid).unwrap()
        );
        let band = Mask::new(1, 4, vec![false, true, false, true]).unwrap();
        let r = evaluate_banded(&pred, &gt, &valid, &band).unwrap();
        assert_eq!(r.count, 2);
        assert!(evaluate_banded(&pred, &gt, &band, &Mask::new(1, 4, vec![true, false, true, false]).unwrap()).is_err());
    }

    #[test]
    fn csv_columns() {
        let r = evaluate(&row(&[1.0, 2.0]), &row(&[1.0, 1.0]), &all(2)).unwrap();
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
        assert!(r.csv_row().ends_with(",2"));
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.1f64..50.0, 0.1f64..50.0), 1..40)
    }

    proptest! {
        #[test]
        fn scale_consistency(v in pairs(), e in -6i32..6, s in 0.01f64..100.0) {
            let pred = row(&v.iter().map(|p| p.0).collect::<Vec<_>>());
            let gt = row(&v.iter().map(|p| p.1).collect::<Vec<_>>());
            let mask = all(v.len());
            let base = evaluate(&pred, &gt, &mask).unwrap();
            // power-of-two scales are exact in floating point
            let p2 = 2f64.powi(e);
            let scale = |f: &Field2D, s: f64| f.with_values(f.values().iter().map(|x| x * s).collect()).unwrap();
            let r = evaluate(&scale(&pred, p2), &scale(&gt, p2), &mask).unwrap();
            prop_assert_eq!(r.rel, base.rel);
            prop_assert_eq!(r.delta, base.delta);
            prop_assert_eq!(r.rmse, base.rmse * p2);
            prop_assert_eq!(r.mae, base.mae * p2);
            prop_assert_eq!(r.irmse.unwrap(), base.irmse.unwrap() / p2);
            prop_assert_eq!(r.imae.unwrap(), base.imae.unwrap() / p2);
            let r = evaluate(&scale(&pred, s), &scale(&gt, s), &mask).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
            prop_assert!(close(r.rel, base.rel));
            prop_assert!(close(r.rmse, base.rmse * s));
            prop_assert!(close(r.mae, base.mae * s));
            prop_assert!(close(r.irmse.unwrap(), base.irmse.unwrap() / s));
        }

        #[test]
        fn orderings(v in pairs()) {
            let pred = row(&v.iter().map(|p| p.0).collect::<Vec<_>>());
            let gt = row(&v.iter().map(|p| p.1).collect::<Vec<_>>());
            let r = evaluate(&pred, &gt, &all(v.len())).unwrap();
            prop_assert!(r.delta[0] <= r.delta[1] && r.delta[1] <= r.delta[2]);
            prop_assert!(r.delta.iter().all(|d| (0.0..=100.0).contains(d)));
            prop_assert!(r.mae <= r.rmse * (1.0 + 1e-12));
            prop_assert!(r.imae.unwrap() <= r.irmse.unwrap() * (1.0 + 1e-12));
        }
    }
}
