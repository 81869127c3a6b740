//! Gradient estimators for the two non-differentiable maps in the search:
//! the score-to-mask threshold (straight-through) and the `sgn` activation
//! (quadratic-spline surrogate).

use crate::{Error, Result};

/// Width parameter of the quadratic-spline sign surrogate. Always > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineParam {
    t: f64,
}

impl SplineParam {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0) {
            return Err(Error::invalid("t", format!("spline width must be > 0, got {t}")));
        }
        Ok(SplineParam { t })
    }

    pub fn t(self) -> f64 {
        self.t
    }
}

impl Default for SplineParam {
    /// t = 1: the estimator the experiments settled on.
    fn default() -> Self {
        SplineParam { t: 1.0 }
    }
}

/// Straight-through gradient of the loss w.r.t. one pruning score.
///
/// The mask entry is relaxed to a real variable and d(mask)/d(score) is
/// taken as identity, leaving `upstream * alpha * sign * input_act` where
/// `input_act` is the post-activation value feeding this weight.
#[inline(always)]
pub fn ste_mask_grad(upstream: f32, alpha: f32, sign: f32, input_act: f32) -> f32 {
    upstream * alpha * sign * input_act
}

/// Four-piece quadratic spline approximating sgn(x).
///
/// Piecewise: -1 below -t, q1(x) = (x/t)^2 + 2(x/t) on [-t, 0),
/// q2(x) = -(x/t)^2 + 2(x/t) on [0, t), and 1 from t up.
pub fn spline_value(x: f64, t: SplineParam) -> f64 {
    let t = t.t;
    let r = x / t;
    if x < -t {
        -1.0
    } else if x < 0.0 {
        r * r + 2.0 * r
    } else if x < t {
        -r * r + 2.0 * r
    } else {
        1.0
    }
}

/// Derivative of [`spline_value`]: (2/t)(1 - |x|/t) on [-t, t], else 0.
pub fn spline_grad(x: f64, t: SplineParam) -> f64 {
    let t = t.t;
    if x < -t || x > t {
        0.0
    } else {
        (2.0 / t) * (1.0 - x.abs() / t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(v: f64) -> SplineParam {
        SplineParam::new(v).unwrap()
    }

    #[test]
    fn spline_param_rejects_nonpositive() {
        assert!(SplineParam::new(0.0).is_err());
        assert!(SplineParam::new(-1.0).is_err());
        assert!(SplineParam::new(f64::NAN).is_err());
        assert!(SplineParam::new(1.0).is_ok());
    }

    #[test]
    fn spline_grad_formula_points() {
        assert_abs_diff_eq!(spline_grad(0.0, t(1.0)), 2.0);
        assert_abs_diff_eq!(spline_grad(1.0, t(1.0)), 0.0);
        assert_abs_diff_eq!(spline_grad(-1.0, t(1.0)), 0.0);
        assert_abs_diff_eq!(spline_grad(0.5, t(1.0)), 1.0);
    }

    #[test]
    fn spline_value_knot_constraints() {
        // q1(-t) = -1, q2 reaches 1 at t, and s_t(0) = 0.
        for tv in [0.25, 1.0, 3.0] {
            let p = t(tv);
            assert_abs_diff_eq!(spline_value(-tv, p), -1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(spline_value(tv, p), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(spline_value(0.0, p), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn saturates_to_sign_outside_support() {
        let p = t(0.7);
        for x in [-5.0, -0.71, 0.71, 2.0] {
            assert_eq!(spline_value(x, p), if x < 0.0 { -1.0 } else { 1.0 });
            assert_eq!(spline_grad(x, p), 0.0);
        }
    }

    #[test]
    fn continuity_at_knots() {
        let p = t(1.0);
        let h = 1e-9;
        for knot in [-1.0, 0.0, 1.0] {
            let lo = spline_value(knot - h, p);
            let hi = spline_value(knot + h, p);
            assert_abs_diff_eq!(lo, hi, epsilon = 1e-7);
            let glo = spline_grad(knot - h, p);
            let ghi = spline_grad(knot + h, p);
            assert_abs_diff_eq!(glo, ghi, epsilon = 1e-7);
        }
    }

    #[test]
    fn pointwise_convergence_to_sign() {
        // For fixed x != 0 the spline tends to sgn(x) as t -> 0.
        for x in [-0.5f64, 0.3, 1.7] {
            let mut prev_gap = f64::INFINITY;
            for tv in [1.0, 0.1, 0.01] {
                let gap = (spline_value(x, t(tv)) - x.signum()).abs();
                assert!(gap <= prev_gap + 1e-12);
                prev_gap = gap;
            }
            assert!(prev_gap < 1e-9, "x={x} gap={prev_gap}");
        }
    }

    #[test]
    fn grad_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p = t(1.0);
        let h = 1e-5;
        let mut n = 0;
        while n < 20 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            // Stay away from the knots where the derivative is only one-sided.
            if x.abs() < 1e-3 || (x.abs() - 1.0).abs() < 1e-3 {
                continue;
            }
            let fd = (spline_value(x + h, p) - spline_value(x - h, p)) / (2.0 * h);
            assert_abs_diff_eq!(fd, spline_grad(x, p), epsilon = 1e-4);
            n += 1;
        }
    }

    #[test]
    fn grad_is_even() {
        let p = t(2.0);
        for x in [0.1, 0.5, 1.3, 1.99] {
            assert_abs_diff_eq!(spline_grad(x, p), spline_grad(-x, p), epsilon = 1e-12);
        }
    }

    #[test]
    fn ste_grad_values() {
        assert_abs_diff_eq!(ste_mask_grad(1.0, 0.5, 1.0, 2.0), 1.0);
        // Dead input activation kills the score gradient.
        assert_eq!(ste_mask_grad(123.0, 0.5, -1.0, 0.0), 0.0);
        // Linear in the upstream gradient.
        let a = ste_mask_grad(0.3, 0.7, -1.0, 1.5);
        let b = ste_mask_grad(0.6, 0.7, -1.0, 1.5);
        assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-7);
    }
}
