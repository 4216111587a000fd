//! Exact target functions and the alternating step sum `psi_a`.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Chosen column plus a flag raised when the optimum was tied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    pub degenerate: bool,
}

/// Per-point additive bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasVector(DVector<f64>);

impl BiasVector {
    pub fn new(b: DVector<f64>) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("bias entries must be finite".into()));
        }
        Ok(Self(b))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

fn check_context(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.ncols() == 0 {
        return Err(Error::EmptyContext("X has no columns".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("X has {} rows, y has length {}", x.nrows(), y.len())));
    }
    Ok(())
}

fn arg_best(values: impl Iterator<Item = f64>, better: impl Fn(f64, f64) -> bool) -> Selection {
    let vals: Vec<f64> = values.collect();
    let mut best = 0;
    for i in 1..vals.len() {
        if better(vals[i], vals[best]) {
            best = i;
        }
    }
    let degenerate = vals.iter().enumerate().any(|(j, &v)| j != best && v == vals[best]);
    Selection { index: best, degenerate }
}

fn sq_dist(x: &DMatrix<f64>, i: usize, y: &DVector<f64>) -> f64 {
    x.column(i).iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Column of `X` closest to `y` in Euclidean distance.
pub fn nearest_index(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Selection> {
    check_context(x, y)?;
    Ok(arg_best((0..x.ncols()).map(|i| sq_dist(x, i, y)), |a, b| a < b))
}

pub fn nearest_neighbor(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(x.column(nearest_index(x, y)?.index).into_owned())
}

fn check_bias(x: &DMatrix<f64>, b: &BiasVector) -> Result<()> {
    if b.len() != x.ncols() {
        return Err(Error::InvalidConfig(format!("bias has length {} but X has {} columns", b.len(), x.ncols())));
    }
    Ok(())
}

/// `argmin_i ‖x_i − y‖² + b_i`.
pub fn biased_nearest_index(x: &DMatrix<f64>, y: &DVector<f64>, b: &BiasVector) -> Result<Selection> {
    check_context(x, y)?;
    check_bias(x, b)?;
    Ok(arg_best((0..x.ncols()).map(|i| sq_dist(x, i, y) + b.0[i]), |a, c| a < c))
}

pub fn biased_nearest_neighbor(x: &DMatrix<f64>, y: &DVector<f64>, b: &BiasVector) -> Result<DVector<f64>> {
    Ok(x.column(biased_nearest_index(x, y, b)?.index).into_owned())
}

/// `argmax_i ⟨x_i, y⟩ + b_i`, the inner-product form of the biased target.
///
/// On the unit sphere it agrees with [`biased_nearest_index`] after the
/// substitution `b ↦ −b/2`.
pub fn biased_argmax_index(x: &DMatrix<f64>, y: &DVector<f64>, b: &BiasVector) -> Result<Selection> {
    check_context(x, y)?;
    check_bias(x, b)?;
    Ok(arg_best((0..x.ncols()).map(|i| x.column(i).dot(y) + b.0[i]), |a, c| a > c))
}

/// For every column `i`, the index `j ≠ i` maximizing `‖x_j − x_i‖`.
pub fn farthest_indices(x: &DMatrix<f64>) -> Result<Vec<Selection>> {
    let n = x.ncols();
    if n < 2 {
        return Err(Error::EmptyContext("farthest neighbor needs at least two points".into()));
    }
    Ok((0..n)
        .map(|i| {
            let xi = x.column(i).into_owned();
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let s = arg_best(others.iter().map(|&j| sq_dist(x, j, &xi)), |a, b| a > b);
            Selection { index: others[s.index], degenerate: s.degenerate }
        })
        .collect())
}

pub fn farthest_neighbor_selfattn(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let idx = farthest_indices(x)?;
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, s) in idx.iter().enumerate() {
        out.set_column(i, &x.column(s.index));
    }
    Ok(out)
}

/// `sign(xᵀy)` with the convention `sign(0) = +1`; the flag marks that case.
pub fn surrogate_target(x: &DVector<f64>, y: &DVector<f64>) -> (f64, bool) {
    let s = x.dot(y);
    if s == 0.0 {
        (1.0, true)
    } else if s > 0.0 {
        (1.0, false)
    } else {
        (-1.0, false)
    }
}

/// Parameter of the step sum `psi_a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PsiParams {
    a: i64,
}

impl PsiParams {
    pub fn new(a: i64) -> Result<Self> {
        if a < 3 {
            return Err(Error::InvalidConfig(format!("psi needs a >= 3, got {a}")));
        }
        Ok(Self { a })
    }

    pub fn a(&self) -> i64 {
        self.a
    }

    pub fn is_odd(&self) -> bool {
        self.a % 2 != 0
    }
}

/// `psi_a(x) = H_a(x) + Σ_{n=1}^{2a} (−1)^n H_{a−n}(x) − ½` with `H_k(x) = 1(x + k ≥ 0)`.
///
/// For odd `a` this is a square wave of amplitude ½ and period 2 on `[−a, a]`,
/// equal to −½ on `[0, 1)` and +½ on `[−1, 0)`.
pub fn psi(p: PsiParams, x: f64) -> f64 {
    let step = |k: i64| if x + k as f64 >= 0.0 { 1i64 } else { 0 };
    let mut total = step(p.a);
    for n in 1..=2 * p.a {
        let sign = if n % 2 == 0 { 1 } else { -1 };
        total += sign * step(p.a - n);
    }
    total as f64 - 0.5
}
