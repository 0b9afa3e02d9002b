use rand::seq::index;

use super::kernel::{gram, Hyper, Kernel};
use super::survival::{log_survival, SurvivalDenominator};
use super::PredictiveDistribution;
use crate::autodiff::linalg::{self, Jitter};
use crate::autodiff::{Axis, Bound, ParameterStore, Tape, Tensor, Var};
use crate::data::PatientRecord;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::stats::{self, LN_2PI};
use crate::Prng;

pub const INDUCING: &str = "gp.inducing";
pub const Q_MEAN: &str = "gp.q_mean";
pub const Q_CHOL_RAW: &str = "gp.q_chol_raw";

pub const DEFAULT_NUM_INDUCING: usize = 64;

/// Which sparse objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseObjective {
    /// Variational lower bound on the marginal likelihood.
    Svgp,
    /// Likelihood of the sparse predictive distribution itself.
    Ppgp,
}

/// Inducing inputs `U` and the variational posterior `q(v) = N(m, L_S L_Sᵀ)`
/// bound to a tape. Unwhitened.
#[derive(Clone, Copy)]
pub struct SparseHead<'t> {
    pub kernel: Kernel<'t>,
    pub inducing: Var<'t>,
    pub q_mean: Var<'t>,
    /// Lower-triangular `L_S` with positive diagonal.
    pub q_chol: Var<'t>,
    pub noise_var: Var<'t>,
}

/// Quantities of the prior on inducing variables reused across a batch.
#[derive(Clone, Copy)]
pub struct InducingPrior<'t> {
    /// Cholesky factor of `K_vv` (with jitter).
    pub chol: Var<'t>,
}

impl<'t> SparseHead<'t> {
    pub fn bind(bound: &Bound<'t>) -> Result<Self> {
        Ok(SparseHead {
            kernel: Kernel::bind(bound)?,
            inducing: bound.get(INDUCING)?,
            q_mean: bound.get(Q_MEAN)?,
            q_chol: bound.get(Q_CHOL_RAW)?.lower_softplus_diag()?,
            noise_var: super::kernel::noise_var(bound)?,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.dims().0
    }

    pub fn prior(&self) -> Result<InducingPrior<'t>> {
        Ok(InducingPrior {
            chol: self.kernel.gram(self.inducing, self.inducing)?.cholesky()?,
        })
    }

    /// `(μ_f, σ_f²)` for each row of `h`, both `b x 1`:
    /// `μ_f = k_iᵀK⁻¹m`, `σ_f² = k_ii − k_iᵀK⁻¹k_i + k_iᵀK⁻¹SK⁻¹k_i`, clamped at 0.
    pub fn predictive(&self, prior: &InducingPrior<'t>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let k_vb = self.kernel.gram(self.inducing, h)?;
        let a = prior.chol.tri_solve(k_vb, false)?;
        let proj = prior.chol.tri_solve(a, true)?;
        let mu = proj.t()?.matmul(self.q_mean)?;
        let c = self.q_chol.t()?.matmul(proj)?;
        let explained = a.square()?.sum_axis(Axis::Rows)?;
        let added = c.square()?.sum_axis(Axis::Rows)?;
        let var_f = added
            .sub(explained)?
            .t()?
            .add(self.kernel.signal_var())?
            .relu()?;
        Ok((mu, var_f))
    }

    /// `KL(q(v) ‖ p(v))` between Gaussians.
    pub fn kl(&self, prior: &InducingPrior<'t>) -> Result<Var<'t>> {
        kl_from_factors(self.q_mean, self.q_chol, prior.chol)
    }

    /// Negative (ELBO or PPGP objective). Observed rows contribute their
    /// per-sample log-likelihood term, censored rows (`events[i] == false`)
    /// their log survival; both sums scale by `n_total / batch`.
    pub fn objective(
        &self,
        kind: SparseObjective,
        h: Var<'t>,
        y: &[f64],
        events: Option<&[bool]>,
        n_total: usize,
        denominator: SurvivalDenominator,
    ) -> Result<Var<'t>> {
        let b = h.dims().0;
        if b == 0 || y.len() != b {
            return Err(Error::Shape {
                op: "sparse_objective",
                lhs: h.dims(),
                rhs: (y.len(), 1),
            });
        }
        if n_total < b {
            return Err(Error::Contract(format!(
                "sparse objective: n_total {n_total} smaller than batch {b}"
            )));
        }
        let tape = h.tape();
        let prior = self.prior()?;
        let (mu, var_f) = self.predictive(&prior, h)?;
        let yv = tape.constant(Tensor::column(y));
        let terms = self.event_terms(kind, yv, mu, var_f)?;
        let terms = match events {
            Some(ev) if ev.iter().any(|e| !e) => {
                if ev.len() != b {
                    return Err(Error::Shape {
                        op: "sparse_objective",
                        lhs: (b, 1),
                        rhs: (ev.len(), 1),
                    });
                }
                let scale = denominator.scale_var(var_f, self.noise_var)?;
                let cens = log_survival(yv, mu, scale)?;
                mix_by_event(tape, ev, terms, cens)?
            }
            _ => terms,
        };
        let kl = self.kl(&prior)?;
        let scale = n_total as f64 / b as f64;
        kl.sub(terms.sum()?.scale(scale)?)
    }

    fn event_terms(
        &self,
        kind: SparseObjective,
        y: Var<'t>,
        mu: Var<'t>,
        var_f: Var<'t>,
    ) -> Result<Var<'t>> {
        let resid2 = y.sub(mu)?.square()?;
        match kind {
            SparseObjective::Svgp => {
                let s2 = self.noise_var;
                let loglik = gaussian_loglik(resid2, s2)?;
                loglik.sub(var_f.div(s2.scale(2.0)?)?)
            }
            SparseObjective::Ppgp => {
                let total = var_f.add(self.noise_var)?;
                gaussian_loglik(resid2, total)
            }
        }
    }
}

/// `log N` given squared residuals and variances (broadcastable).
pub(crate) fn gaussian_loglik<'t>(resid2: Var<'t>, var: Var<'t>) -> Result<Var<'t>> {
    resid2
        .div(var)?
        .add(var.log()?)?
        .offset(LN_2PI)?
        .scale(-0.5)
}

/// Rowwise `event ? observed : censored`.
pub(crate) fn mix_by_event<'t>(
    tape: &'t Tape,
    events: &[bool],
    observed: Var<'t>,
    censored: Var<'t>,
) -> Result<Var<'t>> {
    let keep: Vec<f64> = events.iter().map(|&e| f64::from(u8::from(e))).collect();
    let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    observed
        .mul(tape.constant(Tensor::column(&keep)))?
        .add(censored.mul(tape.constant(Tensor::column(&drop)))?)
}

/// `½[tr(K⁻¹S) + mᵀK⁻¹m − M + log|K| − log|S|]` from the factors of `S` and `K`.
pub(crate) fn kl_from_factors<'t>(q_mean: Var<'t>, q_chol: Var<'t>, k_chol: Var<'t>) -> Result<Var<'t>> {
    let m = q_mean.dims().0 as f64;
    let trace = k_chol.tri_solve(q_chol, false)?.square()?.sum()?;
    let maha = k_chol.tri_solve(q_mean, false)?.square()?.sum()?;
    trace
        .add(maha)?
        .add(k_chol.logdet_from_chol()?)?
        .sub(q_chol.logdet_from_chol()?)?
        .offset(-m)?
        .scale(0.5)
}

/// KL divergence of `N(m, S)` from `N(0, K)` for dense matrices. `K` is
/// factored with the default jitter schedule.
pub fn kl_gaussian(q_mean: &[f64], s: &Tensor, k_vv: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let (ls, _) = linalg::cholesky(s, Jitter::none())?;
    let (lk, _) = linalg::cholesky(k_vv, Jitter::default())?;
    let kl = kl_from_factors(
        tape.constant(Tensor::column(q_mean)),
        tape.constant(ls),
        tape.constant(lk),
    )?;
    Ok(kl.item())
}

/// Sparse predictive distribution for each row of `h` with frozen parameters.
pub fn svgp_predict(store: &ParameterStore, h: &Tensor) -> Result<Vec<PredictiveDistribution>> {
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let head = SparseHead::bind(&bound)?;
    let prior = head.prior()?;
    let (mu, var_f) = head.predictive(&prior, tape.constant(h.clone()))?;
    let noise2 = head.noise_var.item();
    let (mu, var_f) = (mu.value(), var_f.value());
    Ok(mu
        .data()
        .iter()
        .zip(var_f.data())
        .map(|(&m, &v)| PredictiveDistribution::new(m, v, noise2))
        .collect())
}

/// Insert inducing parameters for `m` inducing points of width `d`, with
/// placeholder values.
pub fn insert_params(store: &mut ParameterStore, m: usize, d: usize) -> Result<()> {
    store.insert(INDUCING, Tensor::zeros(m, d))?;
    store.insert(Q_MEAN, Tensor::zeros(m, 1))?;
    store.insert(Q_CHOL_RAW, Tensor::zeros(m, m))?;
    Ok(())
}

/// Set `U = h_init`, `m = 0` and `S = K_vv(U)` so that `q` equals the prior.
pub fn set_inducing_at_prior(store: &mut ParameterStore, h_init: Tensor) -> Result<()> {
    let hyper = Hyper::from_store(store)?;
    let k = gram(&h_init, &h_init, hyper.lengthscale, hyper.signal)?;
    let (l, _) = linalg::cholesky(&k, Jitter::default())?;
    let m = l.rows();
    let raw = Tensor::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => l.get(i, j),
        std::cmp::Ordering::Equal => stats::inv_softplus(l.get(i, i)),
        std::cmp::Ordering::Less => 0.0,
    });
    store.set(INDUCING, h_init)?;
    store.set(Q_MEAN, Tensor::zeros(m, 1))?;
    store.set(Q_CHOL_RAW, raw)?;
    Ok(())
}

/// Initialize inducing inputs with the latent vectors of `m` records drawn
/// uniformly without replacement from `pool`, encoded with the current
/// encoder weights.
pub fn init_inducing(
    pool: &[&PatientRecord],
    enc: &EncoderConfig,
    store: &mut ParameterStore,
    m: usize,
    rng: &mut Prng,
) -> Result<()> {
    if m == 0 || m > pool.len() {
        return Err(Error::Config(format!(
            "cannot draw {m} inducing points from {} training records",
            pool.len()
        )));
    }
    let picked: Vec<&PatientRecord> = index::sample(rng, pool.len(), m)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let h = encoder::encode(enc, store, &picked)?;
    set_inducing_at_prior(store, h)
}
