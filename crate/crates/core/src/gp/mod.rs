//! Output heads over latent covariates: exact GP, SVGP, PPGP and a linear
//! AFT baseline, all producing Gaussian distributions over log time.

mod exact;
mod kernel;
mod linear;
mod sparse;
mod survival;

use serde::{Deserialize, Serialize};

pub use exact::{exact_gp_objective, exact_gp_predict, DEFAULT_MAX_EXACT_N};
pub use kernel::{gram, init_params as init_kernel_params, noise_var, rbf, Hyper, Kernel};
pub use kernel::{RAW_LENGTHSCALE, RAW_NOISE, RAW_SIGNAL};
pub use linear::{insert_params as insert_linear_params, linear_predict, LinearAftHead, BETA, BIAS};
pub use sparse::{
    init_inducing, insert_params as insert_sparse_params, kl_gaussian, set_inducing_at_prior,
    svgp_predict, InducingPrior, SparseHead, SparseObjective, DEFAULT_NUM_INDUCING, INDUCING,
    Q_CHOL_RAW, Q_MEAN,
};
pub use survival::{lognormal_survival, SurvivalDenominator};

use crate::autodiff::{Bound, Tensor, Var};
use crate::error::{Error, Result};

/// Gaussian over log time-to-event, split into function and noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mu: f64,
    pub sigma_f2: f64,
    pub sigma_obs2: f64,
}

impl PredictiveDistribution {
    pub fn new(mu: f64, sigma_f2: f64, sigma_obs2: f64) -> Self {
        PredictiveDistribution {
            mu,
            sigma_f2,
            sigma_obs2,
        }
    }

    /// `σ² = σ_f² + σ_obs²`.
    pub fn variance(&self) -> f64 {
        self.sigma_f2 + self.sigma_obs2
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Exact,
    Svgp,
    Ppgp,
    Linear,
}

impl HeadKind {
    pub fn is_sparse(&self) -> bool {
        matches!(self, HeadKind::Svgp | HeadKind::Ppgp)
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HeadKind::Exact),
            "svgp" => Ok(HeadKind::Svgp),
            "ppgp" => Ok(HeadKind::Ppgp),
            "linear" => Ok(HeadKind::Linear),
            other => Err(Error::Config(format!(
                "unknown head {other:?} (expected exact|svgp|ppgp|linear)"
            ))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            HeadKind::Exact => "exact",
            HeadKind::Svgp => "svgp",
            HeadKind::Ppgp => "ppgp",
            HeadKind::Linear => "linear",
        };
        f.write_str(s)
    }
}

/// Censoring-aware training loss of any head on a batch of latent rows.
///
/// Observed rows contribute the head's own likelihood term and censored rows
/// (`events[i] == false`) the log survival of their predictive distribution.
/// With no censored rows this is exactly the head's uncensored objective. The
/// exact head conditions censored rows on the observed rows of the batch.
pub fn censored_objective<'t>(
    kind: HeadKind,
    bound: &Bound<'t>,
    h: Var<'t>,
    y: &[f64],
    events: &[bool],
    n_total: usize,
    denominator: SurvivalDenominator,
) -> Result<Var<'t>> {
    if events.len() != y.len() {
        return Err(Error::Shape {
            op: "censored_objective",
            lhs: (y.len(), 1),
            rhs: (events.len(), 1),
        });
    }
    match kind {
        HeadKind::Linear => LinearAftHead::bind(bound)?.objective(h, y, Some(events), denominator),
        HeadKind::Svgp | HeadKind::Ppgp => {
            let obj = if kind == HeadKind::Svgp {
                SparseObjective::Svgp
            } else {
                SparseObjective::Ppgp
            };
            SparseHead::bind(bound)?.objective(obj, h, y, Some(events), n_total, denominator)
        }
        HeadKind::Exact => exact_censored(bound, h, y, events, denominator),
    }
}

fn exact_censored<'t>(
    bound: &Bound<'t>,
    h: Var<'t>,
    y: &[f64],
    events: &[bool],
    denominator: SurvivalDenominator,
) -> Result<Var<'t>> {
    let tape = h.tape();
    let kernel = Kernel::bind(bound)?;
    let noise = noise_var(bound)?;
    let obs: Vec<usize> = (0..y.len()).filter(|&i| events[i]).collect();
    if obs.len() == y.len() {
        return exact_gp_objective(h, tape.constant(Tensor::column(y)), &kernel, noise);
    }
    if obs.is_empty() {
        return Err(Error::Data(
            "exact head needs at least one observed event in the training set".into(),
        ));
    }
    let cens: Vec<usize> = (0..y.len()).filter(|&i| !events[i]).collect();
    let pick = |idx: &[usize]| Tensor::column(&idx.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let (nll, mu, var_f) = exact::exact_posterior_terms(
        h.select_rows(&obs)?,
        tape.constant(pick(&obs)),
        h.select_rows(&cens)?,
        &kernel,
        noise,
    )?;
    let scale = denominator.scale_var(var_f, noise)?;
    let log_s = survival::log_survival(tape.constant(pick(&cens)), mu, scale)?;
    nll.sub(log_s.sum()?)
}
