//! Point and distributional metrics over (truth, prediction) pairs.

use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::gp::PredictiveDistribution;
use crate::model::Model;
use crate::Prng;
use crate::stats::{ndtr, normal_pdf, quantile_linear, student_t_two_sided};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// How a log-normal predictive distribution is mapped to a single time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimate {
    /// `exp(μ)`.
    #[default]
    Median,
    /// `exp(μ + σ²/2)`.
    Mean,
}

pub fn point_prediction(pred: &PredictiveDistribution) -> f64 {
    point_prediction_with(pred, PointEstimate::Median)
}

pub fn point_prediction_with(pred: &PredictiveDistribution, kind: PointEstimate) -> f64 {
    match kind {
        PointEstimate::Median => pred.mu.exp(),
        PointEstimate::Mean => (pred.mu + 0.5 * pred.variance()).exp(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    /// True time.
    pub z: f64,
    pub z_hat: f64,
    /// `log z`.
    pub y: f64,
    /// Predictive mean of `log z`.
    pub y_hat: f64,
    /// Predictive variance of `log z`.
    pub var: f64,
    pub event: bool,
}

impl EvalPair {
    pub fn new(record: &PatientRecord, pred: &PredictiveDistribution) -> Self {
        EvalPair {
            z: record.time,
            z_hat: point_prediction(pred),
            y: record.log_time(),
            y_hat: pred.mu,
            var: pred.variance(),
            event: record.event,
        }
    }
}

fn nonempty(op: &'static str, pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::domain(op, "no evaluation pairs"))
    } else {
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of `|z - z_hat|`.
pub fn mad(pairs: &[EvalPair]) -> Result<f64> {
    nonempty("mad", pairs)?;
    Ok(median(pairs.iter().map(|p| (p.z - p.z_hat).abs()).collect()))
}

/// Root mean squared error of log times.
pub fn rmse_log(pairs: &[EvalPair]) -> Result<f64> {
    nonempty("rmse_log", pairs)?;
    let sse: f64 = pairs.iter().map(|p| (p.y - p.y_hat) * (p.y - p.y_hat)).sum();
    Ok((sse / pairs.len() as f64).sqrt())
}

/// Concordance index over comparable pairs: the shorter time is an observed
/// event and the longer-lived record should have the larger predicted time.
/// Prediction ties count one half.
pub fn c_index(times: &[f64], events: &[bool], predicted: &[f64]) -> Result<f64> {
    let n = times.len();
    if n < 2 || events.len() != n || predicted.len() != n {
        return Err(Error::domain(
            "c_index",
            format!(
                "need at least 2 aligned samples, got {n} times, {} events, {} predictions",
                events.len(),
                predicted.len()
            ),
        ));
    }
    // counted in halves so the sum is exact
    let (mut halves, mut comparable) = (0u64, 0u64);
    for i in 0..n {
        if !events[i] {
            continue;
        }
        for j in 0..n {
            if times[i] < times[j] {
                comparable += 1;
                halves += match predicted[i].partial_cmp(&predicted[j]) {
                    Some(std::cmp::Ordering::Less) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    if comparable == 0 {
        return Err(Error::domain("c_index", "no comparable pairs"));
    }
    Ok(halves as f64 / (2 * comparable) as f64)
}

pub fn c_index_pairs(pairs: &[EvalPair]) -> Result<f64> {
    let times: Vec<f64> = pairs.iter().map(|p| p.z).collect();
    let events: Vec<bool> = pairs.iter().map(|p| p.event).collect();
    let pred: Vec<f64> = pairs.iter().map(|p| p.z_hat).collect();
    c_index(&times, &events, &pred)
}

/// Continuous ranked probability score of `N(μ, σ²)` at `y`.
pub fn crps_gaussian(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain("crps_gaussian", format!("sigma must be > 0, got {sigma}")));
    }
    let u = (y - mu) / sigma;
    Ok(sigma * (u * (2.0 * ndtr(u) - 1.0) + 2.0 * normal_pdf(u) - FRAC_1_SQRT_PI))
}

/// Mean log-scale CRPS over the pairs.
pub fn mean_crps(pairs: &[EvalPair]) -> Result<f64> {
    nonempty("mean_crps", pairs)?;
    let mut total = 0.0;
    for p in pairs {
        total += crps_gaussian(p.y, p.y_hat, p.var.sqrt())?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMetric {
    Mad,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpPoint {
    pub q: f64,
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpCurve {
    pub quantiles: usize,
    pub points: Vec<QpPoint>,
}

/// Variance thresholds at `q = 1/Q, ..., 1` (linearly interpolated quantiles).
fn qp_thresholds(pairs: &[EvalPair], quantiles: usize) -> Result<Vec<(f64, f64)>> {
    if quantiles < 2 {
        return Err(Error::Config(format!("need at least 2 quantiles, got {quantiles}")));
    }
    if pairs.len() < quantiles {
        return Err(Error::domain(
            "qp_curve",
            format!("{} pairs are fewer than {quantiles} quantiles", pairs.len()),
        ));
    }
    let mut vars: Vec<f64> = pairs.iter().map(|p| p.var).collect();
    vars.sort_by(f64::total_cmp);
    Ok((1..=quantiles)
        .map(|k| {
            let q = k as f64 / quantiles as f64;
            (q, quantile_linear(&vars, q))
        })
        .collect())
}

/// Metric over the pairs whose variance is at or below each variance quantile.
pub fn qp_curve(pairs: &[EvalPair], quantiles: usize, metric: QpMetric) -> Result<QpCurve> {
    let mut points = Vec::with_capacity(quantiles);
    for (q, threshold) in qp_thresholds(pairs, quantiles)? {
        let subset: Vec<EvalPair> = pairs.iter().copied().filter(|p| p.var <= threshold).collect();
        let value = match metric {
            QpMetric::Mad => mad(&subset)?,
            QpMetric::Rmse => rmse_log(&subset)?,
        };
        points.push(QpPoint {
            q,
            value,
            n: subset.len(),
        });
    }
    Ok(QpCurve { quantiles, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoint {
    pub residual: f64,
    pub ecdf: f64,
    pub normal_cdf: f64,
}

/// Empirical CDF of `(y - μ)/σ` and its Kolmogorov-Smirnov distance to Φ.
pub fn residual_ecdf_ks(pairs: &[EvalPair]) -> Result<(Vec<EcdfPoint>, f64)> {
    nonempty("residual_ecdf_ks", pairs)?;
    let mut r = Vec::with_capacity(pairs.len());
    for p in pairs {
        if !(p.var > 0.0) {
            return Err(Error::domain(
                "residual_ecdf_ks",
                format!("predictive variance must be > 0, got {}", p.var),
            ));
        }
        r.push((p.y - p.y_hat) / p.var.sqrt());
    }
    r.sort_by(f64::total_cmp);
    Ok(ecdf_ks_sorted(&r))
}

/// ECDF points and KS statistic for already normalized, sorted residuals.
pub fn ecdf_ks_sorted(sorted: &[f64]) -> (Vec<EcdfPoint>, f64) {
    let n = sorted.len() as f64;
    let mut ks: f64 = 0.0;
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let phi = ndtr(x);
            let (below, at) = (i as f64 / n, (i + 1) as f64 / n);
            ks = ks.max((at - phi).abs()).max((phi - below).abs());
            EcdfPoint {
                residual: x,
                ecdf: at,
                normal_cdf: phi,
            }
        })
        .collect();
    (points, ks)
}

/// Two-sided p-value of the paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let k = a.len();
    if k < 2 || b.len() != k {
        return Err(Error::domain(
            "paired_t_test",
            format!("need two samples of equal length >= 2, got {} and {}", k, b.len()),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::domain("paired_t_test", "degenerate test: differences have zero variance"));
    }
    let t = mean / (var / k as f64).sqrt();
    Ok(student_t_two_sided(t, (k - 1) as f64))
}

pub const DEFAULT_MC_PASSES: usize = 50;
pub const DEFAULT_MC_DROPOUT_RATE: f64 = 0.2;

/// Monte Carlo dropout predictions of a linear-head model; see
/// [`Model::predict_mc_dropout`].
pub fn mc_dropout_predict(
    model: &Model,
    records: &[PatientRecord],
    passes: usize,
    rate: f64,
    rng: &mut Prng,
) -> Result<Vec<PredictiveDistribution>> {
    model.predict_mc_dropout(records, passes, rate, rng)
}

/// Summary written by the `evaluate` command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mad: f64,
    pub rmse_log: f64,
    pub c_index: f64,
    pub crps: f64,
    pub ks: f64,
}

impl Report {
    pub fn compute(pairs: &[EvalPair]) -> Result<Self> {
        Ok(Report {
            mad: mad(pairs)?,
            rmse_log: rmse_log(pairs)?,
            c_index: c_index_pairs(pairs)?,
            crps: mean_crps(pairs)?,
            ks: residual_ecdf_ks(pairs)?.1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(z: f64, z_hat: f64) -> EvalPair {
        EvalPair {
            z,
            z_hat,
            y: z.ln(),
            y_hat: z_hat.ln(),
            var: 1.0,
            event: true,
        }
    }

    #[test]
    fn mad_examples() {
        let p = [pair(10.0, 12.0), pair(10.0, 5.0), pair(10.0, 13.0)];
        assert_eq!(mad(&p).unwrap(), 3.0);
        assert_eq!(mad(&[pair(4.0, 5.0), pair(4.0, 1.0)]).unwrap(), 2.0);
        assert_eq!(mad(&[pair(3.0, 3.0)]).unwrap(), 0.0);
        assert!(mad(&[]).is_err());
    }

    #[test]
    fn rmse_examples() {
        let mut a = pair(1.0, 1.0);
        a.y_hat = 1.0;
        let mut b = pair(1.0, 1.0);
        b.y_hat = -1.0;
        assert_eq!(rmse_log(&[a, b]).unwrap(), 1.0);
        b.y_hat = 0.3;
        assert!((rmse_log(&[b]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn point_prediction_examples() {
        assert_eq!(point_prediction(&PredictiveDistribution::new(0.0, 0.5, 0.5)), 1.0);
        let z = point_prediction(&PredictiveDistribution::new(100f64.ln(), 0.0, 1.0));
        assert!((z - 100.0).abs() < 1e-12);
        let mean = point_prediction_with(&PredictiveDistribution::new(0.0, 1.0, 1.0), PointEstimate::Mean);
        assert!((mean - 1f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn c_index_ordering() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let ev = [true; 4];
        assert_eq!(c_index(&t, &ev, &[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(c_index(&t, &ev, &[4.0, 3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(c_index(&t, &ev, &[1.0; 4]).unwrap(), 0.5);
        assert!(c_index(&t, &[false; 4], &[1.0; 4]).is_err());
    }

    #[test]
    fn crps_reference() {
        let c = crps_gaussian(0.0, 0.0, 1.0).unwrap();
        assert!((c - (2.0 * normal_pdf(0.0) - FRAC_1_SQRT_PI)).abs() < 1e-15);
        assert!((c - 0.2337).abs() < 1e-4);
        let a = crps_gaussian(1.3, 0.2, 0.7).unwrap();
        let b = crps_gaussian(3.0 * 1.3, 3.0 * 0.2, 3.0 * 0.7).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
        assert!(crps_gaussian(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn qp_enumeration() {
        let pairs: Vec<EvalPair> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| EvalPair {
                var: v,
                y_hat: i as f64,
                ..pair(1.0, 1.0)
            })
            .collect();
        let c = qp_curve(&pairs, 2, QpMetric::Rmse).unwrap();
        assert_eq!(c.points.len(), 2);
        // threshold at the 0.5 quantile of {1,2,3,4} is 2.5
        assert_eq!(c.points[0].n, 2);
        assert!((c.points[0].value - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(c.points[1].n, 4);
        assert_eq!(c.points[1].value, rmse_log(&pairs).unwrap());
        assert!(qp_curve(&pairs, 5, QpMetric::Mad).is_err());
    }

    #[test]
    fn ks_examples() {
        let zero = EvalPair {
            y: 0.0,
            y_hat: 0.0,
            ..pair(1.0, 1.0)
        };
        let (pts, ks) = residual_ecdf_ks(&[zero; 7]).unwrap();
        assert!((ks - 0.5).abs() < 1e-15);
        assert_eq!(pts.len(), 7);
        let bad = EvalPair { var: 0.0, ..zero };
        assert!(residual_ecdf_ks(&[bad]).is_err());
    }

    #[test]
    fn t_test_degenerate() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[2.0; 4], &[1.0; 4]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }
}
