use serde::{Deserialize, Serialize};

use super::PredictiveDistribution;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::stats;

/// Scale used to standardize log time inside the survival function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurvivalDenominator {
    /// `√(σ_f² + σ_obs²)`, the predictive standard deviation.
    #[default]
    VarianceSum,
    /// `σ_f + σ_obs`, a sum of standard deviations.
    SdSum,
}

impl SurvivalDenominator {
    pub fn scale(&self, sigma_f2: f64, sigma_obs2: f64) -> f64 {
        match self {
            SurvivalDenominator::VarianceSum => (sigma_f2 + sigma_obs2).sqrt(),
            SurvivalDenominator::SdSum => sigma_f2.sqrt() + sigma_obs2.sqrt(),
        }
    }

    pub(crate) fn scale_var<'t>(&self, sigma_f2: Var<'t>, sigma_obs2: Var<'t>) -> Result<Var<'t>> {
        match self {
            SurvivalDenominator::VarianceSum => sigma_f2.add(sigma_obs2)?.sqrt(),
            SurvivalDenominator::SdSum => sigma_f2.sqrt()?.add(sigma_obs2.sqrt()?),
        }
    }
}

/// `S(z) = 1 - Φ((log z - μ) / s)` for a log-normal predictive distribution.
pub fn lognormal_survival(
    z: f64,
    pred: &PredictiveDistribution,
    denominator: SurvivalDenominator,
) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::domain("lognormal_survival", format!("time must be positive, got {z}")));
    }
    let s = denominator.scale(pred.sigma_f2, pred.sigma_obs2);
    Ok(stats::ndtr(-(z.ln() - pred.mu) / s))
}

/// `log S` per row, for log times `y`, means `mu` and scales `s` (all `b x 1`).
pub(crate) fn log_survival<'t>(y: Var<'t>, mu: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    mu.sub(y)?.div(s)?.log_ndtr()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(mu: f64, f2: f64, o2: f64) -> PredictiveDistribution {
        PredictiveDistribution::new(mu, f2, o2)
    }

    #[test]
    fn median_and_tail() {
        let p = pred(1.3, 0.4, 0.2);
        let d = SurvivalDenominator::default();
        assert!((lognormal_survival(1.3f64.exp(), &p, d).unwrap() - 0.5).abs() < 1e-15);
        assert!(lognormal_survival(1e-300, &p, d).unwrap() > 1.0 - 1e-12);
        let s = lognormal_survival(1f64.exp(), &pred(0.0, 0.0, 1.0), d).unwrap();
        assert!((s - 0.158_655_253_931_457).abs() < 1e-12);
        assert!(lognormal_survival(0.0, &p, d).is_err());
    }

    #[test]
    fn literal_denominator_differs() {
        let p = pred(0.0, 1.0, 1.0);
        let z = 2f64.exp();
        let sum = lognormal_survival(z, &p, SurvivalDenominator::VarianceSum).unwrap();
        let lit = lognormal_survival(z, &p, SurvivalDenominator::SdSum).unwrap();
        assert!((sum - (1.0 - stats::ndtr(2.0 / 2f64.sqrt()))).abs() < 1e-14);
        assert!((lit - (1.0 - stats::ndtr(1.0))).abs() < 1e-14);
    }
}
