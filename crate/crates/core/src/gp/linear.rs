use super::sparse::{gaussian_loglik, mix_by_event};
use super::survival::{log_survival, SurvivalDenominator};
use super::PredictiveDistribution;
use crate::autodiff::{Bound, ParameterStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BETA: &str = "aft.beta";
pub const BIAS: &str = "aft.bias";

pub fn insert_params(store: &mut ParameterStore, latent_dim: usize) -> Result<()> {
    store.insert(BETA, Tensor::zeros(latent_dim, 1))?;
    store.insert(BIAS, Tensor::scalar(0.0))?;
    Ok(())
}

/// Linear predictor `βᵀh + b` with Gaussian log-time noise.
#[derive(Clone, Copy)]
pub struct LinearAftHead<'t> {
    pub beta: Var<'t>,
    pub bias: Var<'t>,
    pub noise_var: Var<'t>,
}

impl<'t> LinearAftHead<'t> {
    pub fn bind(bound: &Bound<'t>) -> Result<Self> {
        Ok(LinearAftHead {
            beta: bound.get(BETA)?,
            bias: bound.get(BIAS)?,
            noise_var: super::kernel::noise_var(bound)?,
        })
    }

    pub fn mean(&self, h: Var<'t>) -> Result<Var<'t>> {
        h.matmul(self.beta)?.add(self.bias)
    }

    /// Negative log-likelihood; censored rows enter through `log S`.
    pub fn objective(
        &self,
        h: Var<'t>,
        y: &[f64],
        events: Option<&[bool]>,
        denominator: SurvivalDenominator,
    ) -> Result<Var<'t>> {
        let b = h.dims().0;
        if b == 0 || y.len() != b {
            return Err(Error::Shape {
                op: "linear_aft_objective",
                lhs: h.dims(),
                rhs: (y.len(), 1),
            });
        }
        let tape = h.tape();
        let yv = tape.constant(Tensor::column(y));
        let mu = self.mean(h)?;
        let terms = gaussian_loglik(yv.sub(mu)?.square()?, self.noise_var)?;
        let terms = match events {
            Some(ev) if ev.iter().any(|e| !e) => {
                if ev.len() != b {
                    return Err(Error::Shape {
                        op: "linear_aft_objective",
                        lhs: (b, 1),
                        rhs: (ev.len(), 1),
                    });
                }
                let zero = tape.constant(Tensor::zeros(b, 1));
                let scale = denominator.scale_var(zero, self.noise_var)?;
                let cens = log_survival(yv, mu, scale)?;
                mix_by_event(tape, ev, terms, cens)?
            }
            _ => terms,
        };
        terms.sum()?.neg()
    }
}

/// Point predictions of the linear head; function variance is zero.
pub fn linear_predict(store: &ParameterStore, h: &Tensor) -> Result<Vec<PredictiveDistribution>> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let head = LinearAftHead::bind(&bound)?;
    let mu = head.mean(tape.constant(h.clone()))?.value();
    let noise2 = head.noise_var.item();
    Ok(mu
        .data()
        .iter()
        .map(|&m| PredictiveDistribution::new(m, 0.0, noise2))
        .collect())
}
