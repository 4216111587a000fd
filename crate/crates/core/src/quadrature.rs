//! Gauss–Jacobi quadrature for weights `(1−x)^α (1+x)^β` on `[−1, 1]`.
//!
//! Nodes come from the Golub–Welsch eigenproblem, are polished by Newton
//! steps on the orthonormal recurrence, and the weights are recomputed from
//! the Christoffel function `1 / Σ_k p_k(x)²`, which is accurate even for
//! the small weights near the endpoints.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Nodes and weights of an interpolatory rule.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }

    /// Affine map from `[−1, 1]` to `[a, b]`, weights scaled by `(b − a)/2`.
    pub fn mapped(&self, a: f64, b: f64) -> GaussRule {
        let h = 0.5 * (b - a);
        let m = 0.5 * (b + a);
        GaussRule {
            nodes: self.nodes.iter().map(|&x| m + h * x).collect(),
            weights: self.weights.iter().map(|&w| w * h).collect(),
        }
    }
}

struct Recurrence {
    a: Vec<f64>,
    /// `sqrt(b_k)` for k = 0..n; entry 0 is unused.
    sb: Vec<f64>,
    mu0: f64,
}

#[allow(clippy::needless_range_loop)]
fn jacobi_recurrence(n: usize, alpha: f64, beta: f64) -> Recurrence {
    let ab = alpha + beta;
    let mut a = vec![0.0; n];
    let mut sb = vec![0.0; n + 1];
    for k in 0..n {
        let kf = k as f64;
        a[k] = if k == 0 {
            (beta - alpha) / (ab + 2.0)
        } else {
            let s = 2.0 * kf + ab;
            (beta * beta - alpha * alpha) / (s * (s + 2.0))
        };
    }
    for k in 1..=n {
        let kf = k as f64;
        let s = 2.0 * kf + ab;
        let num = 4.0 * kf * (kf + alpha) * (kf + beta) * (kf + ab);
        let den = s * s * (s + 1.0) * (s - 1.0);
        sb[k] = (num / den).sqrt();
    }
    let ln_mu0 =
        (ab + 1.0) * std::f64::consts::LN_2 + ln_gamma(alpha + 1.0) + ln_gamma(beta + 1.0) - ln_gamma(ab + 2.0);
    Recurrence { a, sb, mu0: ln_mu0.exp() }
}

impl Recurrence {
    /// Returns `(p_n(x), p_n'(x), Σ_{k<n} p_k(x)²)` for the orthonormal family.
    fn eval(&self, n: usize, x: f64) -> (f64, f64, f64) {
        let mut p_prev = 0.0;
        let mut dp_prev = 0.0;
        let mut p = 1.0 / self.mu0.sqrt();
        let mut dp = 0.0;
        let mut christoffel = 0.0;
        for k in 0..n {
            christoffel += p * p;
            let sb_prev = if k == 0 { 0.0 } else { self.sb[k] };
            let p_next = ((x - self.a[k]) * p - sb_prev * p_prev) / self.sb[k + 1];
            let dp_next = (p + (x - self.a[k]) * dp - sb_prev * dp_prev) / self.sb[k + 1];
            p_prev = p;
            dp_prev = dp;
            p = p_next;
            dp = dp_next;
        }
        (p, dp, christoffel)
    }
}

/// `n`-point Gauss–Jacobi rule, exact for polynomials of degree `2n − 1`.
pub fn gauss_jacobi(n: usize, alpha: f64, beta: f64) -> Result<GaussRule> {
    if n == 0 {
        return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
    }
    if !(alpha > -1.0 && beta > -1.0) {
        return Err(Error::Domain(format!("Jacobi exponents must exceed -1, got ({alpha}, {beta})")));
    }
    let rec = jacobi_recurrence(n, alpha, beta);
    let mut j = DMatrix::zeros(n, n);
    for k in 0..n {
        j[(k, k)] = rec.a[k];
        if k + 1 < n {
            j[(k, k + 1)] = rec.sb[k + 1];
            j[(k + 1, k)] = rec.sb[k + 1];
        }
    }
    let eig = SymmetricEigen::new(j);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dp, _) = rec.eval(n, *x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            let next = (*x - step).clamp(-1.0, 1.0);
            if !next.is_finite() {
                break;
            }
            *x = next;
            if step.abs() < 1e-17 {
                break;
            }
        }
        let (_, _, c) = rec.eval(n, *x);
        weights.push(1.0 / c);
    }
    Ok(GaussRule { nodes, weights })
}

/// `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre(n: usize) -> Result<GaussRule> {
    gauss_jacobi(n, 0.0, 0.0)
}
