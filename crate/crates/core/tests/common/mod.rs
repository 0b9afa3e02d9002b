//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerics.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `log |det A|` by Gaussian elimination with partial pivoting.
pub fn lu_logdet(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / p;
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    acc
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Concordance by enumerating unordered pairs.
pub fn brute_c_index(times: &[f64], events: &[bool], pred: &[f64]) -> Option<f64> {
    let (mut score, mut count) = (0.0, 0usize);
    let n = times.len();
    for i in 0..n {
        for j in i + 1..n {
            let (short, long) = if times[i] < times[j] {
                (i, j)
            } else if times[j] < times[i] {
                (j, i)
            } else {
                continue;
            };
            if !events[short] {
                continue;
            }
            count += 1;
            if pred[short] < pred[long] {
                score += 1.0;
            } else if pred[short] == pred[long] {
                score += 0.5;
            }
        }
    }
    (count > 0).then(|| score / count as f64)
}

fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `P(X > y)` for `X ~ N(mu, s^2)` by quadrature of the density, accurate
/// in relative terms across unit panels.
pub fn normal_upper_tail(y: f64, mu: f64, s: f64) -> f64 {
    let u = (y - mu) / s;
    let start = u.max(-40.0);
    let mut total = 0.0;
    let mut a = start;
    while a < 40.0 {
        let b = a + 1.0;
        // panel tolerance relative to the panel's largest density value
        let nearest = if a < 0.0 && b > 0.0 { 0.0 } else { a.abs().min(b.abs()) };
        let scale = std_normal_pdf(nearest);
        total += integrate(std_normal_pdf, a, b, 1e-14 * scale);
        a = b;
    }
    total
}

/// Two-sided Student-t tail `P(|T| > |t|)` by quadrature of the density.
pub fn student_t_two_sided_quadrature(t: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let c = (ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df)).exp() / (df * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| c * (1.0 + x * x / df).powf(-0.5 * (df + 1.0));
    // x = |t| + s/(1-s) maps [0,1) onto [|t|, inf)
    let g = |s: f64| {
        if s >= 1.0 {
            0.0
        } else {
            let w = 1.0 - s;
            pdf(t.abs() + s / w) / (w * w)
        }
    };
    2.0 * integrate(g, 0.0, 1.0, 1e-13)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

/// Inverse standard normal CDF.
pub fn probit(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// CRPS of `N(mu, sigma^2)` at `y` from `n` draws: `E|X - y| - ½E|X - X'|`.
/// Draws are stratified (one uniform per probability stratum), and the
/// pairwise term is evaluated over all pairs of the sample via sorting.
pub fn crps_monte_carlo(y: f64, mu: f64, sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut x: Vec<f64> = (0..n)
        .map(|i| mu + sigma * probit((i as f64 + rng.random::<f64>()) / n as f64))
        .collect();
    let first = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n as f64;
    x.sort_by(f64::total_cmp);
    // sum_{i<j} (x_j - x_i) = sum_k x_k (2k - n + 1) with 0-based k
    let pair_sum: f64 = x
        .iter()
        .enumerate()
        .map(|(k, v)| v * (2.0 * k as f64 - n as f64 + 1.0))
        .sum();
    let mean_abs_diff = 2.0 * pair_sum / (n as f64 * (n as f64 - 1.0));
    first - 0.5 * mean_abs_diff
}
