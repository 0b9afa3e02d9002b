use super::kernel::{gram, Hyper, Kernel};
use super::PredictiveDistribution;
use crate::autodiff::linalg::{self, Jitter};
use crate::autodiff::{Axis, Tensor, Var};
use crate::error::{Error, Result};
use crate::stats::LN_2PI;

/// Datasets larger than this are refused by the exact head (O(n³) cost).
pub const DEFAULT_MAX_EXACT_N: usize = 5000;

fn noisy_gram<'t>(h: Var<'t>, kernel: &Kernel<'t>, noise_var: Var<'t>) -> Result<Var<'t>> {
    let n = h.dims().0;
    let eye = h.tape().constant(Tensor::eye(n));
    kernel.gram(h, h)?.add(eye.mul(noise_var)?)
}

/// Negative log marginal likelihood
/// `½ yᵀ(K+σ²I)⁻¹y + ½ log|K+σ²I| + (n/2) log 2π` via Cholesky.
pub fn exact_gp_objective<'t>(
    h: Var<'t>,
    y: Var<'t>,
    kernel: &Kernel<'t>,
    noise_var: Var<'t>,
) -> Result<Var<'t>> {
    let n = h.dims().0;
    if n == 0 || y.dims() != (n, 1) {
        return Err(Error::Shape {
            op: "exact_gp_objective",
            lhs: h.dims(),
            rhs: y.dims(),
        });
    }
    let l = noisy_gram(h, kernel, noise_var)?.cholesky()?;
    let alpha = l.tri_solve(y, false)?;
    let quad = alpha.square()?.sum()?;
    let logdet = l.logdet_from_chol()?;
    quad.add(logdet)?.scale(0.5)?.offset(0.5 * n as f64 * LN_2PI)
}

/// Negative log marginal likelihood of the observed rows plus the log
/// survival of the censored rows under the posterior given the observed ones.
/// Returns `(objective, posterior mean, posterior function variance)` with
/// the last two over the censored rows.
pub(crate) fn exact_posterior_terms<'t>(
    h_obs: Var<'t>,
    y_obs: Var<'t>,
    h_cens: Var<'t>,
    kernel: &Kernel<'t>,
    noise_var: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let n = h_obs.dims().0;
    let l = noisy_gram(h_obs, kernel, noise_var)?.cholesky()?;
    let alpha = l.tri_solve(y_obs, false)?;
    let nll = alpha
        .square()?
        .sum()?
        .add(l.logdet_from_chol()?)?
        .scale(0.5)?
        .offset(0.5 * n as f64 * LN_2PI)?;
    let k_oc = kernel.gram(h_obs, h_cens)?;
    let v = l.tri_solve(k_oc, false)?;
    let mu = v.t()?.matmul(alpha)?;
    let var_f = v
        .square()?
        .sum_axis(Axis::Rows)?
        .t()?
        .neg()?
        .add(kernel.signal_var())?
        .relu()?;
    Ok((nll, mu, var_f))
}

/// Posterior predictive at each row of `h_star`, conditioned on training data.
pub fn exact_gp_predict(
    h_train: &Tensor,
    y_train: &[f64],
    h_star: &Tensor,
    hyper: &Hyper,
) -> Result<Vec<PredictiveDistribution>> {
    let n = h_train.rows();
    if y_train.len() != n {
        return Err(Error::Shape {
            op: "exact_gp_predict",
            lhs: h_train.dims(),
            rhs: (y_train.len(), 1),
        });
    }
    if h_star.cols() != h_train.cols() {
        return Err(Error::Shape {
            op: "exact_gp_predict",
            lhs: h_train.dims(),
            rhs: h_star.dims(),
        });
    }
    let noise2 = hyper.noise * hyper.noise;
    let mut kn = gram(h_train, h_train, hyper.lengthscale, hyper.signal)?;
    for i in 0..n {
        kn.set(i, i, kn.get(i, i) + noise2);
    }
    let (l, _) = linalg::cholesky(&kn, Jitter::default())?;
    let alpha = linalg::solve_lower(&l, &linalg::solve_lower(&l, &Tensor::column(y_train), false)?, true)?;
    let k_star = gram(h_train, h_star, hyper.lengthscale, hyper.signal)?;
    let v = linalg::solve_lower(&l, &k_star, false)?;
    let prior = hyper.signal * hyper.signal;
    Ok((0..h_star.rows())
        .map(|j| {
            let mu = (0..n).map(|i| k_star.get(i, j) * alpha.get(i, 0)).sum();
            let explained: f64 = (0..n).map(|i| v.get(i, j) * v.get(i, j)).sum();
            PredictiveDistribution::new(mu, (prior - explained).max(0.0), noise2)
        })
        .collect())
}
