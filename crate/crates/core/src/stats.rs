//! Scalar special functions shared by the objectives and the metrics.

use statrs::function::beta;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    log_normal_pdf(x).exp()
}

pub fn log_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, accurate far into the lower tail.
pub fn log_ndtr(x: f64) -> f64 {
    if x > 6.0 {
        (-ndtr(-x)).ln_1p()
    } else if x > -30.0 {
        ndtr(x).ln()
    } else {
        // Mills-ratio asymptotic series
        let z2 = x * x;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        log_normal_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Gaussian log density `log N(y | mu, var)`.
pub fn gaussian_logpdf(y: f64, mu: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mu) * (y - mu) / var)
}

/// Two-sided p-value of Student's t statistic with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    // P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    let x = df / (df + t * t);
    beta::beta_reg(0.5 * df, 0.5, x)
}

/// Empirical quantile with linear interpolation between order statistics
/// (positions `(n - 1) q`).
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip() {
        for &y in &[1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((softplus(inv_softplus(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ndtr_reference_points() {
        assert!((ndtr(0.0) - 0.5).abs() < 1e-15);
        assert!((1.0 - ndtr(1.0) - 0.158_655_253_931_457_05).abs() < 1e-12);
        assert!((ndtr(-1.959_963_984_540_054) - 0.025).abs() < 1e-12);
    }

    #[test]
    fn log_ndtr_is_continuous_across_branches() {
        for &x in &[-30.0f64, 6.0] {
            let a = log_ndtr(x - 1e-9);
            let b = log_ndtr(x + 1e-9);
            assert!((a - b).abs() < 1e-6 * a.abs().max(1e-12), "{x}: {a} vs {b}");
        }
        assert!(log_ndtr(-40.0).is_finite());
        assert!(log_ndtr(40.0) <= 0.0);
    }

    #[test]
    fn t_pvalue_reference() {
        // t = 2.776445 is the 0.975 quantile with 4 df
        let p = student_t_two_sided(2.776_445_105_197_8, 4.0);
        assert!((p - 0.05).abs() < 1e-9, "{p}");
        assert!((student_t_two_sided(0.0, 7.0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_linear(&s, 0.5), 2.5);
        assert_eq!(quantile_linear(&s, 1.0), 4.0);
        assert_eq!(quantile_linear(&s, 0.0), 1.0);
    }
}
