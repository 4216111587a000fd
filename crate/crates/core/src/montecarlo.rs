//! Monte Carlo estimators with standard errors.
//!
//! Samples are split into fixed-size chunks; chunk `c` draws from stream
//! `c` of the seed. Chunks may run in parallel but are merged in index order,
//! so results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::constructions::{head_vote, mode_of_votes};
use crate::geometry::{
    sample_gaussian, sample_orthogonal, sample_orthonormal_sequence, sample_sphere, sample_sphere_columns,
    PointConfiguration, SeededRng, UnitVector,
};
use crate::spectral::{dim_n_f64, ultraspherical, SpectralTable};
use crate::targets::{nearest_index, psi, PsiParams};
use crate::{Error, Result};

/// Samples per RNG stream.
pub const CHUNK: usize = 4096;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if o.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Moments { n, mean: self.mean + delta * o.n / n, m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n }
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need n >= 2 samples for a standard error, got {n}")));
    }
    Ok(())
}

/// Estimates the mean of each of the `dim` outputs written by `f`.
pub fn mc_mean_vec<F>(n: usize, seed: u64, dim: usize, f: F) -> Result<Vec<McEstimate>>
where
    F: Fn(&mut SeededRng, &mut [f64]) -> Result<()> + Sync,
{
    check_n(n)?;
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Result<Vec<Moments>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = SeededRng::new(seed, c as u64);
            let count = CHUNK.min(n - c * CHUNK);
            let mut acc = vec![Moments::default(); dim];
            let mut buf = vec![0.0; dim];
            for _ in 0..count {
                f(&mut rng, &mut buf)?;
                for (m, &x) in acc.iter_mut().zip(&buf) {
                    m.push(x);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Moments::default(); dim];
    for part in parts {
        for (t, m) in total.iter_mut().zip(part?) {
            *t = t.merge(m);
        }
    }
    Ok(total
        .into_iter()
        .map(|m| {
            let var = if m.n > 1.0 { (m.m2 / (m.n - 1.0)).max(0.0) } else { 0.0 };
            McEstimate { mean: m.mean, stderr: (var / m.n).sqrt(), n, seed }
        })
        .collect())
}

/// Scalar version of [`mc_mean_vec`].
pub fn mc_mean<F>(n: usize, seed: u64, f: F) -> Result<McEstimate>
where
    F: Fn(&mut SeededRng) -> Result<f64> + Sync,
{
    Ok(mc_mean_vec(n, seed, 1, |rng, out| {
        out[0] = f(rng)?;
        Ok(())
    })?[0])
}

/// Acceptance band for an estimate at three standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Band {
    /// `|mean − v| ≤ 3σ` (or `≤ 1e−12` when σ = 0).
    Within(f64),
    /// `mean − 3σ ≥ v`.
    Above(f64),
    /// `mean + 3σ ≥ v`.
    NotBelow(f64),
    /// `mean − 3σ ≤ v`.
    NotAbove(f64),
}

impl Band {
    pub fn check(&self, e: &McEstimate) -> bool {
        let s = 3.0 * e.stderr;
        match *self {
            Band::Within(v) => (e.mean - v).abs() <= s.max(1e-12),
            Band::Above(v) => e.mean - s >= v,
            Band::NotBelow(v) => e.mean + s >= v,
            Band::NotAbove(v) => e.mean - s <= v,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Band::Within(v) => format!("|mean-{v:.6e}|<=3se"),
            Band::Above(v) => format!("mean-3se>={v:.6e}"),
            Band::NotBelow(v) => format!("mean+3se>={v:.6e}"),
            Band::NotAbove(v) => format!("mean-3se<={v:.6e}"),
        }
    }
}

/// Input distributions for point configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    /// Targets and source i.i.d. uniform on the unit sphere.
    SphereIid,
    /// Targets are `N` orthonormal Haar columns, source uniform on the sphere.
    OrthogonalDn,
    /// Targets are `scale` times orthonormal Haar columns, source standard Gaussian.
    GaussianSource,
    /// Targets i.i.d. uniform on the sphere of radius `scale`, source on the unit sphere.
    ScaledSphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct DistributionSpec {
    pub kind: DistKind,
    pub d: usize,
    pub n_points: usize,
    pub scale: f64,
}

impl DistributionSpec {
    pub fn new(kind: DistKind, d: usize, n_points: usize) -> Result<Self> {
        let s = Self { kind, d, n_points, scale: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_points == 0 {
            return Err(Error::InvalidDimension("d and N must be positive".into()));
        }
        if matches!(self.kind, DistKind::OrthogonalDn | DistKind::GaussianSource) && self.n_points > self.d {
            return Err(Error::InvalidConfig(format!(
                "orthogonal targets need N <= d (N={}, d={})",
                self.n_points, self.d
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidConfig("scale must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Result<PointConfiguration> {
        let (d, n) = (self.d, self.n_points);
        let (x, y) = match self.kind {
            DistKind::SphereIid => (sample_sphere_columns(d, n, rng)?, sample_sphere(d, rng)?.into_vector()),
            DistKind::OrthogonalDn => (sample_orthonormal_sequence(d, n, rng)?, sample_sphere(d, rng)?.into_vector()),
            DistKind::GaussianSource => {
                (sample_orthonormal_sequence(d, n, rng)? * self.scale, sample_gaussian(d, rng)?)
            }
            DistKind::ScaledSphere => {
                (sample_sphere_columns(d, n, rng)? * self.scale, sample_sphere(d, rng)?.into_vector())
            }
        };
        Ok(PointConfiguration { x, y, scale: self.scale })
    }
}

/// `E‖model(X, y) − target(X, y)‖²` over `dist`.
pub fn estimate_mse<M, T>(model: M, target: T, dist: &DistributionSpec, n: usize, seed: u64) -> Result<McEstimate>
where
    M: Fn(&PointConfiguration) -> Result<DMatrix<f64>> + Sync,
    T: Fn(&PointConfiguration) -> Result<DMatrix<f64>> + Sync,
{
    dist.validate()?;
    mc_mean(n, seed, |rng| {
        let pc = dist.sample(rng)?;
        let a = model(&pc)?;
        let b = target(&pc)?;
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("model output {:?} vs target {:?}", a.shape(), b.shape())));
        }
        Ok((a - b).norm_squared())
    })
}

/// Key/query pair `ω = (q, k)` of a rank-one head.
#[derive(Clone, Debug, PartialEq)]
pub struct Omega {
    pub q: UnitVector,
    pub k: UnitVector,
}

/// `E_z[ρ(z, ω) ρ(z, ω′)]` with `ρ = sign(xᵀk · qᵀy)` and `x, y` uniform on the sphere.
pub fn kernel_mc_check(d: usize, omega: &Omega, omega_p: &Omega, n: usize, seed: u64) -> Result<McEstimate> {
    for u in [&omega.q, &omega.k, &omega_p.q, &omega_p.k] {
        if u.dim() != d {
            return Err(Error::Shape(format!("omega components must have length {d}")));
        }
    }
    let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
    mc_mean(n, seed, |rng| {
        let x = sample_sphere(d, rng)?;
        let y = sample_sphere(d, rng)?;
        let r1 = sgn(x.dot(&omega.k) * omega.q.dot(&y));
        let r2 = sgn(x.dot(&omega_p.k) * omega_p.q.dot(&y));
        Ok(r1 * r2)
    })
}

/// Closed form of [`kernel_mc_check`].
pub fn kernel_closed_form(omega: &Omega, omega_p: &Omega) -> f64 {
    crate::spectral::kernel_arcsin(omega.q.as_slice(), omega_p.q.as_slice(), omega.k.as_slice(), omega_p.k.as_slice())
}

/// Probability over `q` that the rank-one head `q qᵀ` picks the nearest of `x₁, x₂` to `y`.
pub fn edge_probability(
    d: usize,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    y: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if x1.len() != d || x2.len() != d || y.len() != d {
        return Err(Error::Shape(format!("inputs must have length {d}")));
    }
    if (x1 - x2).dot(y) == 0.0 {
        return Err(Error::Degenerate("|<x1 - x2, y>| = 0".into()));
    }
    let mut x = DMatrix::zeros(d, 2);
    x.set_column(0, x1);
    x.set_column(1, x2);
    let target = if x1.dot(y) > x2.dot(y) { 0 } else { 1 };
    mc_mean(n, seed, |rng| {
        let q = sample_sphere(d, rng)?;
        Ok(if head_vote(&q, &x, y) == target { 1.0 } else { 0.0 })
    })
}

/// Random unit vectors `x₁, x₂, y` in general position with `⟨x₁ − x₂, y⟩ = a`.
pub fn edge_configuration(d: usize, a: f64, rng: &mut SeededRng) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if d < 3 || !(a > 0.0 && a < 2.0) {
        return Err(Error::InvalidConfig(format!("need d >= 3 and 0 < a < 2, got d={d}, a={a}")));
    }
    let frame = sample_orthogonal(d, rng)?;
    let y = frame.column(0).into_owned();
    let tail = |rng: &mut SeededRng| -> Result<DVector<f64>> {
        let u = sample_sphere(d - 1, rng)?;
        Ok(frame.columns(1, d - 1) * u.as_vector())
    };
    loop {
        let c1 = 2.0 * rng.uniform() - 1.0;
        let c2 = c1 - a;
        if c2.abs() >= 1.0 {
            continue;
        }
        let x1 = &y * c1 + tail(rng)? * (1.0 - c1 * c1).sqrt();
        let x2 = &y * c2 + tail(rng)? * (1.0 - c2 * c2).sqrt();
        return Ok((x1, x2, y));
    }
}

/// `P(|⟨x₁ − x₂, y⟩| ≤ eps)` for i.i.d. uniform unit vectors.
pub fn close_pair_probability(d: usize, eps: f64, n: usize, seed: u64) -> Result<McEstimate> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    mc_mean(n, seed, |rng| {
        let x1 = sample_sphere(d, rng)?;
        let x2 = sample_sphere(d, rng)?;
        let y = sample_sphere(d, rng)?;
        Ok(if (x1.dot(&y) - x2.dot(&y)).abs() <= eps { 1.0 } else { 0.0 })
    })
}

/// `E‖x_target − x_mode‖²` for `H` fresh random voters on orthonormal pairs.
pub fn majority_accuracy(d: usize, h: usize, n: usize, seed: u64) -> Result<McEstimate> {
    if h == 0 || d < 2 {
        return Err(Error::InvalidConfig("need H >= 1 and d >= 2".into()));
    }
    mc_mean(n, seed, |rng| {
        let x = sample_orthonormal_sequence(d, 2, rng)?;
        let y = sample_sphere(d, rng)?.into_vector();
        majority_trial(&x, &y, h, rng)
    })
}

/// [`majority_accuracy`] with fixed `(X, y)`; only the voters are random.
pub fn majority_accuracy_fixed(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    if h == 0 {
        return Err(Error::InvalidConfig("need H >= 1".into()));
    }
    mc_mean(n, seed, |rng| majority_trial(x, y, h, rng))
}

fn majority_trial(x: &DMatrix<f64>, y: &DVector<f64>, h: usize, rng: &mut SeededRng) -> Result<f64> {
    let d = x.nrows();
    let target = nearest_index(x, y)?.index;
    let mut votes = Vec::with_capacity(h);
    for _ in 0..h {
        let q = sample_sphere(d, rng)?;
        votes.push(head_vote(&q, x, y));
    }
    let pick = mode_of_votes(&votes, x.ncols(), rng);
    Ok((x.column(pick) - x.column(target)).norm_squared())
}

/// Result of [`psi_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PsiNorm {
    pub estimate: McEstimate,
    /// `‖w‖ ≥ d` and `a > ‖w‖`.
    pub precondition_ok: bool,
}

/// `E_{y∼N(0,I)} ψ_a(⟨w, y⟩)²`.
pub fn psi_norm(d: usize, w: &DVector<f64>, a: i64, n: usize, seed: u64) -> Result<PsiNorm> {
    if w.len() != d {
        return Err(Error::Shape(format!("w must have length {d}")));
    }
    let p = PsiParams::new(a)?;
    let norm = w.norm();
    let precondition_ok = norm >= d as f64 && (a as f64) > norm;
    let estimate = mc_mean(n, seed, |rng| {
        let y = sample_gaussian(d, rng)?;
        let v = psi(p, w.dot(&y));
        Ok(v * v)
    })?;
    Ok(PsiNorm { estimate, precondition_ok })
}

/// Bounded probe `g(w_1..w_r, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GSpec {
    Zero,
    One,
    /// `sign(w₁ y₁)`.
    SignW1Y1,
    /// `sign(Σ_{i ≤ r} w_i y_i)`.
    SignPartialDot,
}

impl GSpec {
    pub fn eval(&self, r: usize, w: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let sgn = |v: f64| if v >= 0.0 { 1.0 } else { -1.0 };
        match self {
            GSpec::Zero => 0.0,
            GSpec::One => 1.0,
            GSpec::SignW1Y1 => sgn(w[0] * y[0]),
            GSpec::SignPartialDot => sgn((0..r).map(|i| w[i] * y[i]).sum()),
        }
    }
}

/// Which absolute value the correlation statistic takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CorrelationForm {
    /// `E_{w,y} |ψ_a(⟨w, y⟩) g|`.
    AbsProduct,
    /// `E_w |E_y ψ_a(⟨w, y⟩) g|` with `inner` draws of `y` per `w`; the inner
    /// mean is a plug-in estimate and biased upward by about `1/√inner`.
    AbsInner { inner: usize },
}

/// Correlation between `ψ_a(⟨w, ·⟩)` and a probe depending only on `w_1..w_r`,
/// with `w ∼ U(d·S^{d−1})` and `y ∼ N(0, I)`.
pub fn correlation_decay(
    d: usize,
    r: usize,
    a: i64,
    n: usize,
    seed: u64,
    g: GSpec,
    form: CorrelationForm,
) -> Result<McEstimate> {
    if r == 0 || r > d {
        return Err(Error::InvalidConfig(format!("need 1 <= r <= d, got r={r}")));
    }
    let p = PsiParams::new(a)?;
    let scale = d as f64;
    mc_mean(n, seed, |rng| {
        let w = sample_sphere(d, rng)?.into_vector() * scale;
        match form {
            CorrelationForm::AbsProduct => {
                let y = sample_gaussian(d, rng)?;
                Ok((psi(p, w.dot(&y)) * g.eval(r, &w, &y)).abs())
            }
            CorrelationForm::AbsInner { inner } => {
                if inner == 0 {
                    return Err(Error::InvalidConfig("inner sample count must be positive".into()));
                }
                let mut acc = 0.0;
                for _ in 0..inner {
                    let y = sample_gaussian(d, rng)?;
                    acc += psi(p, w.dot(&y)) * g.eval(r, &w, &y);
                }
                Ok((acc / inner as f64).abs())
            }
        }
    })
}

/// Entry-wise estimate of `E_Q[Qᵀ X Q]` over Haar `Q`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrthoReport {
    /// Row-major `D x D` estimates.
    pub entries: Vec<McEstimate>,
    /// Fitted `s` in `s·I`: the average diagonal entry.
    pub fitted_scale: McEstimate,
    /// Largest `|mean| / stderr` over off-diagonal entries.
    pub max_offdiag_z: f64,
    /// Two-sided 3σ level (p = 0.0027) split over the distinct off-diagonal
    /// entries (Bonferroni).
    pub offdiag_z_threshold: f64,
    /// Largest `|mean|` over off-diagonal entries.
    pub max_offdiag_abs: f64,
    pub trace: f64,
    pub trace_over_dim: f64,
}

pub fn ortho_conjugation_check(dim: usize, x: &DMatrix<f64>, n: usize, seed: u64) -> Result<OrthoReport> {
    if dim < 2 || x.shape() != (dim, dim) {
        return Err(Error::InvalidConfig(format!("need D >= 2 and a D x D matrix, D={dim}")));
    }
    let all = mc_mean_vec(n, seed, dim * dim + 1, |rng, out| {
        let q = sample_orthogonal(dim, rng)?;
        let c = q.transpose() * x * &q;
        for i in 0..dim {
            for j in 0..dim {
                out[i * dim + j] = c[(i, j)];
            }
        }
        out[dim * dim] = (0..dim).map(|i| c[(i, i)]).sum::<f64>() / dim as f64;
        Ok(())
    })?;
    let entries = all[..dim * dim].to_vec();
    let mut max_z: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            if i != j {
                let e = entries[i * dim + j];
                max_abs = max_abs.max(e.mean.abs());
                if e.stderr > 0.0 {
                    max_z = max_z.max(e.mean.abs() / e.stderr);
                }
            }
        }
    }
    let trace = x.trace();
    let distinct = if x == &x.transpose() { dim * (dim - 1) / 2 } else { dim * (dim - 1) };
    let p = 2.0 * (1.0 - Normal::standard().cdf(3.0)) / distinct as f64;
    let offdiag_z_threshold = Normal::standard().inverse_cdf(1.0 - p / 2.0);
    Ok(OrthoReport {
        offdiag_z_threshold,
        entries,
        fitted_scale: all[dim * dim],
        max_offdiag_z: max_z,
        max_offdiag_abs: max_abs,
        trace,
        trace_over_dim: trace / dim as f64,
    })
}

/// Result of [`hecke_funk_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeckeFunk {
    pub estimate: McEstimate,
    /// `P_ℓ(xᵀx₀) η_ℓ ‖P_ℓ‖`.
    pub expected: f64,
}

/// `E_y[sign(xᵀy) P_ℓ(x₀ᵀy)]` against its spectral prediction.
pub fn hecke_funk_check(d: usize, l: usize, x: &UnitVector, x0: &UnitVector, n: usize, seed: u64) -> Result<HeckeFunk> {
    if x.dim() != d || x0.dim() != d {
        return Err(Error::Shape(format!("x and x0 must have length {d}")));
    }
    let table = SpectralTable::build(d, l)?;
    let expected = ultraspherical(d, l, x.dot(x0).clamp(-1.0, 1.0))? * table.records[l].eta / dim_n_f64(d, l).sqrt();
    let estimate = mc_mean(n, seed, |rng| {
        let y = sample_sphere(d, rng)?;
        let s = if x.dot(&y) >= 0.0 { 1.0 } else { -1.0 };
        Ok(s * ultraspherical(d, l, x0.dot(&y).clamp(-1.0, 1.0))?)
    })?;
    Ok(HeckeFunk { estimate, expected })
}
