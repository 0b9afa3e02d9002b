//! Dense kernels behind the differentiable linear-algebra ops.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Diagonal jitter schedule for Cholesky factorization, relative to the
/// mean of the input diagonal. The first attempt already includes
/// `initial`; each failure multiplies it by `growth` until `max` is passed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            initial: 1e-8,
            growth: 10.0,
            max: 1e-3,
        }
    }
}

impl Jitter {
    /// No jitter and no retries.
    pub fn none() -> Self {
        Jitter {
            initial: 0.0,
            growth: 10.0,
            max: 0.0,
        }
    }

    fn schedule(&self) -> Vec<f64> {
        let mut out = vec![self.initial];
        if self.initial <= 0.0 {
            return out;
        }
        let mut j = self.initial * self.growth;
        while j <= self.max * (1.0 + 1e-12) {
            out.push(j);
            j *= self.growth;
        }
        out
    }
}

/// Unjittered Cholesky; on failure returns the offending pivot.
fn cholesky_raw(a: &Tensor, add: f64) -> std::result::Result<Tensor, f64> {
    let n = a.rows();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j) + add;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(d);
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(Tensor::new(n, n, l).expect("square"))
}

/// Factor `a + jitter * I = L L^T`. Returns `L` and the absolute jitter used.
pub fn cholesky(a: &Tensor, jitter: Jitter) -> Result<(Tensor, f64)> {
    let (r, c) = a.dims();
    if r != c {
        return Err(Error::Shape {
            op: "cholesky",
            lhs: (r, c),
            rhs: (c, r),
        });
    }
    let mean_diag = if r == 0 { 0.0 } else { a.diag().sum() / r as f64 };
    let scale = mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut last = (f64::NAN, 0.0);
    for rel in jitter.schedule() {
        let add = rel * scale;
        match cholesky_raw(a, add) {
            Ok(l) => return Ok((l, add)),
            Err(pivot) => last = (pivot, add),
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: last.0,
        jitter: last.1,
    })
}

/// Solve `L X = B` (or `L^T X = B` when `transpose`) for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    let n = l.rows();
    if l.cols() != n || b.rows() != n {
        return Err(Error::Shape {
            op: "tri_solve",
            lhs: l.dims(),
            rhs: b.dims(),
        });
    }
    for i in 0..n {
        if l.get(i, i) == 0.0 {
            return Err(Error::Singular { index: i });
        }
    }
    let m = b.cols();
    let mut x = b.clone();
    let xd = x.data_mut();
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let lik = l.get(i, k);
                if lik == 0.0 {
                    continue;
                }
                for j in 0..m {
                    xd[i * m + j] -= lik * xd[k * m + j];
                }
            }
            let d = l.get(i, i);
            for j in 0..m {
                xd[i * m + j] /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l.get(k, i);
                if lki == 0.0 {
                    continue;
                }
                for j in 0..m {
                    xd[i * m + j] -= lki * xd[k * m + j];
                }
            }
            let d = l.get(i, i);
            for j in 0..m {
                xd[i * m + j] /= d;
            }
        }
    }
    Ok(x)
}

/// Lower triangle with the diagonal halved.
pub(crate) fn phi(a: &Tensor) -> Tensor {
    let (r, c) = a.dims();
    Tensor::from_fn(r, c, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => a.get(i, j),
        std::cmp::Ordering::Equal => 0.5 * a.get(i, j),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Reverse-mode rule for `L = chol(A)`, returned symmetrized:
/// `S = L^{-T} Phi(L^T Lbar) L^{-1}`, `Abar = (S + S^T) / 2`.
pub(crate) fn cholesky_backward(l: &Tensor, lbar: &Tensor) -> Result<Tensor> {
    let mut lbar = lbar.clone();
    lbar.tril_mut();
    let p = phi(&l.transpose().matmul(&lbar)?);
    // L^{-T} P L^{-1} = L^{-T} (L^{-T} P^T)^T
    let left = solve_lower(l, &p, true)?;
    let s = solve_lower(l, &left.transpose(), true)?.transpose();
    Ok(s.zip_map(&s.transpose(), |a, b| 0.5 * (a + b)))
}

/// Dense inverse of a symmetric positive definite matrix via its Cholesky factor.
pub fn spd_inverse(l: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    let linv = solve_lower(l, &Tensor::eye(n), false)?;
    linv.transpose().matmul(&linv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_escalates_to_cap() {
        let s = Jitter::default().schedule();
        assert_eq!(s.len(), 6);
        assert!((s[5] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn cholesky_of_2x2() {
        let a = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let (l, _) = cholesky(&a, Jitter::none()).unwrap();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky(&a, Jitter::default()) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert!(pivot < 0.0),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_rank_deficient() {
        let a = Tensor::ones(3, 3);
        let (l, j) = cholesky(&a, Jitter::default()).unwrap();
        assert!(j > 0.0);
        let rec = l.matmul(&l.transpose()).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let want = 1.0 + if i == k { j } else { 0.0 };
                assert!((rec.get(i, k) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn solves_both_orientations() {
        let l = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let x = solve_lower(&l, &Tensor::column(&[2.0, 2.0]), false).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0]);
        let xt = solve_lower(&l, &Tensor::column(&[3.0, 1.0]), true).unwrap();
        // L^T = [[2,1],[0,1]] -> x2 = 1, x1 = 1
        assert_eq!(xt.data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_diagonal_is_singular() {
        let l = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            solve_lower(&l, &Tensor::column(&[1.0, 1.0]), false),
            Err(Error::Singular { index: 1 })
        ));
    }
}
