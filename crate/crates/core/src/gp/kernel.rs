use crate::autodiff::{Bound, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::stats;

pub const RAW_LENGTHSCALE: &str = "gp.raw_lengthscale";
pub const RAW_SIGNAL: &str = "gp.raw_signal";
pub const RAW_NOISE: &str = "lik.raw_noise";

/// Squared-exponential kernel `σ_s² exp(-‖a-b‖² / (2ℓ²))`.
pub fn rbf(a: &[f64], b: &[f64], lengthscale: f64, signal: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "rbf",
            lhs: (a.len(), 1),
            rhs: (b.len(), 1),
        });
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(signal * signal * (-d2 / (2.0 * lengthscale * lengthscale)).exp())
}

/// Dense Gram matrix between the rows of `x` and `y`.
pub fn gram(x: &Tensor, y: &Tensor, lengthscale: f64, signal: f64) -> Result<Tensor> {
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "gram",
            lhs: x.dims(),
            rhs: y.dims(),
        });
    }
    Ok(Tensor::from_fn(x.rows(), y.rows(), |i, j| {
        rbf(x.row_slice(i), y.row_slice(j), lengthscale, signal).expect("equal widths")
    }))
}

/// Insert kernel and noise raws so that ℓ = √d, σ_s = 1, σ_obs = 1.
pub fn init_params(store: &mut ParameterStore, latent_dim: usize) -> Result<()> {
    let ell = (latent_dim as f64).sqrt();
    store.insert(RAW_LENGTHSCALE, Tensor::scalar(stats::inv_softplus(ell)))?;
    store.insert(RAW_SIGNAL, Tensor::scalar(stats::inv_softplus(1.0)))?;
    store.insert(RAW_NOISE, Tensor::scalar(stats::inv_softplus(1.0)))?;
    Ok(())
}

/// Constrained hyperparameter values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lengthscale: f64,
    pub signal: f64,
    pub noise: f64,
}

impl Hyper {
    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let sp = |n: &str| -> Result<f64> { Ok(stats::softplus(store.get(n)?.item())) };
        Ok(Hyper {
            lengthscale: sp(RAW_LENGTHSCALE)?,
            signal: sp(RAW_SIGNAL)?,
            noise: sp(RAW_NOISE)?,
        })
    }

    pub fn write_to(&self, store: &mut ParameterStore) -> Result<()> {
        store.set(RAW_LENGTHSCALE, Tensor::scalar(stats::inv_softplus(self.lengthscale)))?;
        store.set(RAW_SIGNAL, Tensor::scalar(stats::inv_softplus(self.signal)))?;
        store.set(RAW_NOISE, Tensor::scalar(stats::inv_softplus(self.noise)))?;
        Ok(())
    }
}

/// RBF kernel with softplus-constrained hyperparameters bound to a tape.
#[derive(Clone, Copy)]
pub struct Kernel<'t> {
    /// 1 / (2ℓ²)
    inv_two_ell2: Var<'t>,
    signal_var: Var<'t>,
}

impl<'t> Kernel<'t> {
    pub fn bind(bound: &Bound<'t>) -> Result<Self> {
        Kernel::from_raw(bound.get(RAW_LENGTHSCALE)?, bound.get(RAW_SIGNAL)?)
    }

    pub fn from_raw(raw_lengthscale: Var<'t>, raw_signal: Var<'t>) -> Result<Self> {
        let ell = raw_lengthscale.softplus()?;
        let inv_two_ell2 = ell.square()?.scale(2.0)?;
        let tape = ell.tape();
        Ok(Kernel {
            inv_two_ell2: tape.scalar(1.0).div(inv_two_ell2)?,
            signal_var: raw_signal.softplus()?.square()?,
        })
    }

    /// `k(x, x) = σ_s²` as a `1 x 1` node.
    pub fn signal_var(&self) -> Var<'t> {
        self.signal_var
    }

    pub fn gram(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        x.sq_dist(y)?
            .mul(self.inv_two_ell2)?
            .neg()?
            .exp()?
            .mul(self.signal_var)
    }
}

/// `σ_obs²` from the bound raw noise.
pub fn noise_var<'t>(bound: &Bound<'t>) -> Result<Var<'t>> {
    bound.get(RAW_NOISE)?.softplus()?.square()
}
