//! Sampling on spheres, Haar-random orthonormal frames and a seeded RNG.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Deterministic random source keyed by `(seed, stream)`.
///
/// Distinct streams of the same seed are statistically independent, which is
/// what parallel Monte Carlo chunks rely on.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits.
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        rand::Rng::random_range(&mut self.inner, 0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// A point of the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(DVector<f64>);

impl UnitVector {
    /// Normalizes `v`; fails on the zero vector.
    pub fn normalize(v: DVector<f64>) -> Result<Self> {
        let n = v.norm();
        if v.is_empty() {
            return Err(Error::InvalidDimension("empty vector".into()));
        }
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(v / n))
    }

    /// Accepts `v` only if its norm is 1 within `1e-12`.
    pub fn try_new(v: DVector<f64>) -> Result<Self> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!("vector norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }
}

impl std::ops::Deref for UnitVector {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Target points `X` (columns, all of norm `scale`) together with a source point `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointConfiguration {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub scale: f64,
}

impl PointConfiguration {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("X has {} rows but y has length {}", x.nrows(), y.len())));
        }
        let scale = if x.ncols() > 0 { x.column(0).norm() } else { 1.0 };
        if let Some(j) = (0..x.ncols()).find(|&j| (x.column(j).norm() - scale).abs() > 1e-12 * scale.max(1.0)) {
            return Err(Error::InvalidConfig(format!(
                "column {j} has norm {} but column 0 has {scale}",
                x.column(j).norm()
            )));
        }
        Ok(Self { x, y, scale })
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 {
        Err(Error::InvalidDimension("d must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Standard normal vector of length `d`.
pub fn sample_gaussian(d: usize, rng: &mut SeededRng) -> Result<DVector<f64>> {
    check_dim(d)?;
    Ok(DVector::from_fn(d, |_, _| rng.normal()))
}

/// Uniform point on `S^{d-1}`: a Gaussian vector divided by its norm.
pub fn sample_sphere(d: usize, rng: &mut SeededRng) -> Result<UnitVector> {
    check_dim(d)?;
    loop {
        let g = DVector::from_fn(d, |_, _| rng.normal());
        let n = g.norm();
        if n > 0.0 {
            return Ok(UnitVector(g / n));
        }
    }
}

/// `d x n` matrix whose columns are i.i.d. uniform on the sphere.
pub fn sample_sphere_columns(d: usize, n: usize, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    check_dim(d)?;
    let mut x = DMatrix::zeros(d, n);
    for j in 0..n {
        x.set_column(j, sample_sphere(d, rng)?.as_vector());
    }
    Ok(x)
}

/// First `n` columns of a Haar-random `d x d` orthogonal matrix.
///
/// A Gaussian matrix is QR-factorized and the columns of `Q` are flipped so
/// that the triangular factor has a positive diagonal, which makes the
/// factorization unique and the law of `Q` exactly Haar.
pub fn sample_orthonormal_sequence(d: usize, n: usize, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    check_dim(d)?;
    if n == 0 || n > d {
        return Err(Error::InvalidConfig(format!("need 1 <= N <= d for orthonormal columns, got N={n}, d={d}")));
    }
    loop {
        let g = DMatrix::from_fn(d, n, |_, _| rng.normal());
        let qr = g.qr();
        let r = qr.r();
        if (0..n).any(|i| r[(i, i)] == 0.0) {
            continue;
        }
        let mut q = qr.q();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        return Ok(q);
    }
}

/// Haar-random `d x d` orthogonal matrix.
pub fn sample_orthogonal(d: usize, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
    sample_orthonormal_sequence(d, d, rng)
}

/// Deletes column `i`, returning a matrix with one fewer column.
pub fn remove_column(x: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    x.clone().remove_column(i)
}
