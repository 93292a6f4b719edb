//! Principal branch of the Lambert-W function.
//!
//! `W0(z)` is the real solution `w >= -1` of `w e^w = z` for `z >= -1/e`.
//! Halley iteration from a logarithmic (or branch-point series) start.
//! For arguments too large to represent, [`lambert_w0_exp`] takes `ln z`
//! and solves `w + ln w = ln z` instead.

use std::f64::consts::E;

use crate::error::{Error, Result};

const MAX_ITER: usize = 50;
const REL_TOL: f64 = 1e-12;
const BRANCH_POINT: f64 = -1.0 / E;

/// Arguments above this go through the log-domain solver.
const LOG_DOMAIN_THRESHOLD: f64 = 1e300;

pub fn lambert_w0(z: f64) -> Result<f64> {
    if z.is_nan() || z < BRANCH_POINT {
        return Err(Error::Domain(format!(
            "lambert_w0 is defined for z >= -1/e, got {z}"
        )));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    if z > LOG_DOMAIN_THRESHOLD {
        return lambert_w0_exp(z.ln());
    }

    let mut w = if z < -0.25 {
        // Series about the branch point in p = sqrt(2(ez + 1)).
        let p = (2.0 * (E * z + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        z.ln_1p()
    };
    if z - BRANCH_POINT < 1e-15 {
        return Ok(w.max(-1.0));
    }

    let scale = z.abs().max(1.0);
    for _ in 0..MAX_ITER {
        let ew = w.exp();
        let f = w * ew - z;
        if f.abs() <= REL_TOL * scale {
            break;
        }
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let next = w - f / denom;
        if !next.is_finite() || next == w {
            break;
        }
        w = next;
    }
    Ok(w.max(-1.0))
}

/// `W0(e^{log_z})` without forming `e^{log_z}`.
///
/// Valid for any real `log_z`; small arguments fall back to [`lambert_w0`].
pub fn lambert_w0_exp(log_z: f64) -> Result<f64> {
    if log_z.is_nan() {
        return Err(Error::Domain("lambert_w0_exp of NaN".into()));
    }
    if log_z < 2.0 {
        return lambert_w0(log_z.exp());
    }
    if log_z == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    // g(w) = w + ln w - log_z, monotone for w > 0.
    let mut w = log_z - log_z.ln();
    for _ in 0..MAX_ITER {
        let g = w + w.ln() - log_z;
        let g1 = 1.0 + 1.0 / w;
        let g2 = -1.0 / (w * w);
        let step = g / (g1 - g * g2 / (2.0 * g1));
        let next = w - step;
        if !next.is_finite() {
            break;
        }
        let done = (next - w).abs() <= f64::EPSILON * next.abs();
        w = next;
        if done {
            break;
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_points() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert_relative_eq!(lambert_w0(E).unwrap(), 1.0, epsilon = 1e-15);
        // Omega constant.
        assert_relative_eq!(lambert_w0(1.0).unwrap(), 0.567_143_290_409_783_8, epsilon = 1e-15);
    }

    #[test]
    fn branch_point_and_domain() {
        assert_relative_eq!(lambert_w0(BRANCH_POINT).unwrap(), -1.0, epsilon = 1e-7);
        let near = BRANCH_POINT + 1e-10;
        let w = lambert_w0(near).unwrap();
        assert!(w >= -1.0);
        assert!((w * w.exp() - near).abs() < 1e-12);
        assert!(lambert_w0(-0.5).is_err());
        assert!(lambert_w0(f64::NAN).is_err());
    }

    #[test]
    fn negative_arguments_round_trip() {
        for i in 1..100 {
            let z = BRANCH_POINT * i as f64 / 100.0;
            let w = lambert_w0(z).unwrap();
            assert!((w * w.exp() - z).abs() <= 1e-12, "z = {z}");
        }
    }

    #[test]
    fn log_spaced_round_trip() {
        let n = 1000;
        for i in 0..n {
            let z = 10f64.powf(-8.0 + 16.0 * i as f64 / (n - 1) as f64);
            let w = lambert_w0(z).unwrap();
            let resid = (w * w.exp() - z).abs() / z.max(1.0);
            assert!(resid <= 1e-12, "z = {z}, resid = {resid}");
        }
    }

    #[test]
    fn strictly_increasing() {
        let mut prev = lambert_w0(BRANCH_POINT + 1e-12).unwrap();
        for i in 1..=2000 {
            let z = BRANCH_POINT + 1e-12 + (i as f64).powi(3) * 1e-4;
            let w = lambert_w0(z).unwrap();
            assert!(w > prev, "z = {z}");
            prev = w;
        }
    }

    #[test]
    fn log_domain_agrees_with_direct() {
        for &lz in &[2.5, 10.0, 100.0, 600.0, 690.0] {
            let a = lambert_w0_exp(lz).unwrap();
            let b = lambert_w0(f64::exp(lz)).unwrap();
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn log_domain_huge_arguments() {
        for &lz in &[1e3, 1e5, 1e10, 1e200] {
            let w = lambert_w0_exp(lz).unwrap();
            assert_relative_eq!(w + w.ln(), lz, max_relative = 1e-15);
        }
        let w = lambert_w0(1e305).unwrap();
        assert_relative_eq!(w + w.ln(), 1e305f64.ln(), max_relative = 1e-15);
    }
}
