//! Ultraspherical expansions on the sphere and the quantities built from them.
//!
//! `P_ℓ` is the degree-ℓ polynomial orthogonal under
//! `u_d(t) = Γ(d/2)/(√π Γ((d−1)/2)) · (1−t²)^{(d−3)/2}` on `[−1, 1]`, with
//! `P_ℓ(1) = 1`. Inner products `⟨f, g⟩` below are taken against `u_d`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::quadrature::{gauss_jacobi, gauss_legendre, GaussRule};
use crate::{Error, Result};

fn check_d(d: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::InvalidDimension(format!("spectral quantities need d >= 3, got {d}")));
    }
    Ok(())
}

/// Values `P_0(t), …, P_lmax(t)` by the normalized three-term recurrence
/// `(ℓ+d−2) P_{ℓ+1} = (2ℓ+d−2) t P_ℓ − ℓ P_{ℓ−1}`.
pub fn ultraspherical_all(d: usize, l_max: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(l_max + 1);
    p.push(1.0);
    if l_max >= 1 {
        p.push(t);
    }
    let dd = d as f64;
    for l in 1..l_max {
        let lf = l as f64;
        let next = ((2.0 * lf + dd - 2.0) * t * p[l] - lf * p[l - 1]) / (lf + dd - 2.0);
        p.push(next);
    }
    p
}

/// `P_ℓ(t)` for dimension `d`.
pub fn ultraspherical(d: usize, l: usize, t: f64) -> Result<f64> {
    check_d(d)?;
    if !(t.abs() <= 1.0) {
        return Err(Error::Domain(format!("t = {t} lies outside [-1, 1]")));
    }
    Ok(ultraspherical_all(d, l, t)[l])
}

fn binomial_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

fn ln_binomial(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Exact `N(d, ℓ)`, the dimension of degree-ℓ spherical harmonics on `S^{d−1}`.
///
/// Returns `None` when the value does not fit in 128 bits.
pub fn dim_n_exact(d: usize, l: usize) -> Option<u128> {
    if l == 0 {
        return Some(1);
    }
    let (d, l) = (d as u64, l as u64);
    // N = (2ℓ+d−2)(ℓ+d−3)! / (ℓ! (d−2)!) = (2ℓ+d−2)/ℓ · C(ℓ+d−3, ℓ−1)
    let c = binomial_u128(l + d - 3, l - 1)?;
    let num = c.checked_mul((2 * l + d - 2) as u128)?;
    Some(num / l as u128)
}

/// `N(d, ℓ)`; errors for `d < 3` or when the exact value overflows 128 bits.
pub fn dim_n(d: usize, l: usize) -> Result<u128> {
    check_d(d)?;
    dim_n_exact(d, l).ok_or_else(|| Error::Domain(format!("N({d}, {l}) overflows 128-bit integers")))
}

/// `ln N(d, ℓ)` evaluated in log-space.
pub fn ln_dim_n(d: usize, l: usize) -> f64 {
    if l == 0 {
        return 0.0;
    }
    if let Some(n) = dim_n_exact(d, l) {
        if n < (1u128 << 100) {
            return (n as f64).ln();
        }
    }
    let (df, lf) = (d as f64, l as f64);
    ((2.0 * lf + df - 2.0) / lf).ln() + ln_binomial(lf + df - 3.0, lf - 1.0)
}

/// `N(d, ℓ)` as a float (exact when representable).
pub fn dim_n_f64(d: usize, l: usize) -> f64 {
    match dim_n_exact(d, l) {
        Some(n) => n as f64,
        None => ln_dim_n(d, l).exp(),
    }
}

/// Upper bound `C(r+ℓ, ℓ)` on `M(r, ℓ)`, with the exact value 1 at `r = 1`.
pub fn dim_m_upper(r: usize, l: usize) -> Result<u128> {
    if r == 0 {
        return Err(Error::InvalidDimension("r must be at least 1".into()));
    }
    if r == 1 {
        return Ok(1);
    }
    binomial_u128((r + l) as u64, l as u64)
        .ok_or_else(|| Error::Domain(format!("C({}, {l}) overflows 128-bit integers", r + l)))
}

/// `ln M(r, ℓ)` using the same convention as [`dim_m_upper`].
pub fn ln_dim_m_upper(r: usize, l: usize) -> f64 {
    if r <= 1 {
        return 0.0;
    }
    match binomial_u128((r + l) as u64, l as u64) {
        Some(m) if m < (1u128 << 100) => (m as f64).ln(),
        _ => ln_binomial((r + l) as f64, l as f64),
    }
}

/// Density normalizer `A_{d−2}/A_{d−1} = Γ(d/2) / (√π Γ((d−1)/2))`.
pub fn surface_ratio(d: usize) -> f64 {
    let df = d as f64;
    (ln_gamma(df / 2.0) - 0.5 * PI.ln() - ln_gamma((df - 1.0) / 2.0)).exp()
}

/// Closed form of `η_ℓ` obtained from the Rodrigues formula.
///
/// For odd ℓ with `m = ℓ + (d−3)/2` and `k = (ℓ−1)/2`:
/// `η_ℓ = 2√N · ρ_d · (−1)^k · C(m, k) (ℓ−1)! / (2^ℓ ((d−1)/2)_ℓ)`,
/// where `(x)_ℓ` is the rising factorial and `ρ_d` the surface ratio.
pub fn eta_closed_form(d: usize, l: usize) -> f64 {
    if l % 2 == 0 {
        return 0.0;
    }
    let (df, lf) = (d as f64, l as f64);
    let m = lf + (df - 3.0) / 2.0;
    let k = (lf - 1.0) / 2.0;
    let ln_rising = ln_gamma((df - 1.0) / 2.0 + lf) - ln_gamma((df - 1.0) / 2.0);
    let ln_abs =
        std::f64::consts::LN_2 + 0.5 * ln_dim_n(d, l) + surface_ratio(d).ln() + ln_binomial(m, k) + ln_gamma(lf)
            - lf * std::f64::consts::LN_2
            - ln_rising;
    let sign = if ((l - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    sign * ln_abs.exp()
}

const QUAD_RTOL: f64 = 1e-12;
const QUAD_ATOL: f64 = 1e-15;

/// Quadrature rules shared by every degree up to `l_max` at one dimension.
struct Rules {
    d: usize,
    norm: f64,
    /// Gauss–Jacobi `(a, a)` on `[−1, 1]`, exact for `P_ℓ²`.
    full: GaussRule,
    /// Two `[0, 1]` rules (coarse, fine) for the weight `(1−t²)^a`, as
    /// `(node, weight including the smooth factor and normalizer)`.
    half: [Vec<(f64, f64)>; 2],
    /// Two Gauss–Legendre rules on `θ ∈ [0, π/2]` for `t = sin θ`.
    theta: [GaussRule; 2],
}

impl Rules {
    fn new(d: usize, l_max: usize) -> Result<Self> {
        let a = (d as f64 - 3.0) / 2.0;
        let norm = surface_ratio(d);
        let full = gauss_jacobi(l_max + 2, a, a)?;
        let half_rule = |n: usize| -> Result<Vec<(f64, f64)>> {
            // t = (1+s)/2: (1−t)^a (1+t)^a dt = 2^{−a−1} ((3+s)/2)^a (1−s)^a ds
            let g = gauss_jacobi(n, a, 0.0)?;
            Ok(g.nodes
                .iter()
                .zip(&g.weights)
                .map(|(&s, &w)| {
                    let t = 0.5 * (1.0 + s);
                    let factor = (0.5 * (3.0 + s)).powf(a) * 0.5f64.powf(a + 1.0);
                    (t, w * factor * norm)
                })
                .collect())
        };
        let half = [half_rule(l_max / 2 + 40)?, half_rule(l_max / 2 + 64)?];
        let theta = [
            gauss_legendre(l_max + d + 40)?.mapped(0.0, FRAC_PI_2),
            gauss_legendre(l_max + d + 64)?.mapped(0.0, FRAC_PI_2),
        ];
        Ok(Self { d, norm, full, half, theta })
    }

    /// `‖P_ℓ‖²` for every ℓ (exact Gauss rule).
    fn pnorm2(&self, l_max: usize) -> Vec<f64> {
        let mut acc = vec![0.0; l_max + 1];
        for (&t, &w) in self.full.nodes.iter().zip(&self.full.weights) {
            let p = ultraspherical_all(self.d, l_max, t);
            for l in 0..=l_max {
                acc[l] += w * p[l] * p[l];
            }
        }
        acc.iter().map(|v| v * self.norm).collect()
    }

    /// `⟨sign, P_ℓ⟩` for every ℓ, split at the origin, with error estimates.
    fn sign_moments(&self, l_max: usize) -> (Vec<f64>, Vec<f64>) {
        let mut both = [vec![0.0; l_max + 1], vec![0.0; l_max + 1]];
        for (slot, rule) in self.half.iter().enumerate() {
            let mut right = vec![0.0; l_max + 1];
            let mut left = vec![0.0; l_max + 1];
            for &(t, w) in rule {
                let pr = ultraspherical_all(self.d, l_max, t);
                let pl = ultraspherical_all(self.d, l_max, -t);
                for l in 0..=l_max {
                    right[l] += w * pr[l];
                    left[l] += w * pl[l];
                }
            }
            for l in 0..=l_max {
                both[slot][l] = right[l] - left[l];
            }
        }
        let err = (0..=l_max).map(|l| (both[1][l] - both[0][l]).abs()).collect();
        let [_, fine] = both;
        (fine, err)
    }

    /// `⟨arcsin, P_ℓ⟩` for every ℓ through `t = sin θ`, with error estimates.
    fn arcsin_moments(&self, l_max: usize) -> (Vec<f64>, Vec<f64>) {
        let power = self.d as i32 - 2;
        let mut both = [vec![0.0; l_max + 1], vec![0.0; l_max + 1]];
        for (slot, rule) in self.theta.iter().enumerate() {
            for (&th, &w) in rule.nodes.iter().zip(&rule.weights) {
                let t = th.sin();
                let jac = th.cos().powi(power);
                let pr = ultraspherical_all(self.d, l_max, t);
                let pl = ultraspherical_all(self.d, l_max, -t);
                for l in 0..=l_max {
                    // arcsin(±t) = ±θ
                    both[slot][l] += w * jac * th * (pr[l] - pl[l]);
                }
            }
            for v in both[slot].iter_mut() {
                *v *= self.norm;
            }
        }
        let err = (0..=l_max).map(|l| (both[1][l] - both[0][l]).abs()).collect();
        let [_, fine] = both;
        (fine, err)
    }
}

fn check_quadrature(what: &str, value: f64, err: f64) -> Result<()> {
    let tol = QUAD_ATOL + QUAD_RTOL * value.abs();
    if err > tol || !value.is_finite() {
        return Err(Error::Quadrature { what: what.to_string(), tol, achieved: err });
    }
    Ok(())
}

/// Per-degree spectral record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralRecord {
    pub l: usize,
    /// `N(d, ℓ)` exactly, when it fits in 128 bits.
    pub n_exact: Option<u128>,
    pub n: f64,
    pub pnorm2: f64,
    pub eta: f64,
    pub alpha: f64,
    pub c: f64,
}

/// Spectral quantities for one dimension and degrees `0..=l_max`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralTable {
    pub d: usize,
    pub l_max: usize,
    pub records: Vec<SpectralRecord>,
}

impl SpectralTable {
    /// Builds the table by quadrature and cross-checks `η_ℓ` against its
    /// closed form (relative `1e−8`).
    pub fn build(d: usize, l_max: usize) -> Result<Self> {
        check_d(d)?;
        let rules = Rules::new(d, l_max)?;
        let pnorm2 = rules.pnorm2(l_max);
        let (sign_m, sign_err) = rules.sign_moments(l_max);
        let (asin_m, asin_err) = rules.arcsin_moments(l_max);
        let mut records = Vec::with_capacity(l_max + 1);
        for l in 0..=l_max {
            check_quadrature(&format!("<sign, P_{l}> at d={d}"), sign_m[l], sign_err[l])?;
            check_quadrature(&format!("<arcsin, P_{l}> at d={d}"), asin_m[l], asin_err[l])?;
            let pn = pnorm2[l].sqrt();
            let eta = sign_m[l] / pn;
            let alpha = asin_m[l] / pn;
            let closed = eta_closed_form(d, l);
            if (eta - closed).abs() > 1e-8 * closed.abs().max(1e-300) + 1e-14 {
                return Err(Error::Contract(format!(
                    "eta({d}, {l}): quadrature {eta:e} disagrees with closed form {closed:e}"
                )));
            }
            records.push(SpectralRecord {
                l,
                n_exact: dim_n_exact(d, l),
                n: dim_n_f64(d, l),
                pnorm2: pnorm2[l],
                eta,
                alpha,
                c: 2.0 / PI * eta * alpha,
            });
        }
        Ok(Self { d, l_max, records })
    }

    pub fn odd(&self) -> impl Iterator<Item = &SpectralRecord> {
        self.records.iter().filter(|r| r.l % 2 == 1)
    }

    /// `Σ_{ℓ odd} η_ℓ²`.
    pub fn sign_energy(&self) -> f64 {
        self.odd().map(|r| r.eta * r.eta).sum()
    }

    /// `α_ℓ √N(d,ℓ) / η_ℓ²` for each odd ℓ.
    pub fn alpha_constants(&self) -> Vec<(usize, f64)> {
        self.odd().map(|r| (r.l, r.alpha * r.n.sqrt() / (r.eta * r.eta))).collect()
    }

    /// `Σ_ℓ c_ℓ P_ℓ(s)`: correlation between the target and a rank-one head
    /// whose key/query directions have inner product `s`.
    pub fn target_head_correlation(&self, s: f64) -> Result<f64> {
        if !(s.abs() <= 1.0) {
            return Err(Error::Domain(format!("s = {s} lies outside [-1, 1]")));
        }
        let p = ultraspherical_all(self.d, self.l_max, s);
        Ok(self.records.iter().map(|r| r.c * p[r.l]).sum())
    }

    /// `u(t) = (π/2) Σ_{ℓ odd} (η_ℓ/α_ℓ) N(d,ℓ) P_ℓ(t)`.
    pub fn u_measure(&self, t: f64) -> Result<f64> {
        if !(t.abs() <= 1.0) {
            return Err(Error::Domain(format!("t = {t} lies outside [-1, 1]")));
        }
        let p = ultraspherical_all(self.d, self.l_max, t);
        let mut acc = 0.0;
        for r in self.odd() {
            if r.alpha == 0.0 {
                return Err(Error::Degenerate(format!("alpha_{} vanishes", r.l)));
            }
            acc += r.eta / r.alpha * r.n * p[r.l];
        }
        Ok(FRAC_PI_2 * acc)
    }

    /// `Σ_{ℓ odd} η_ℓ² (λN / ((2α_ℓ/π)² + λN))²`.
    pub fn ridge_error(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        Ok(self
            .odd()
            .map(|r| {
                let a = 2.0 / PI * r.alpha;
                let ln = lambda * r.n;
                let shrink = ln / (a * a + ln);
                r.eta * r.eta * shrink * shrink
            })
            .sum())
    }

    /// `Σ_{ℓ,ℓ′ odd} N N′ κ/(κ+λ)` with `κ = (4/π²) α α′ / √(N N′)`.
    pub fn degrees_of_freedom(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        let odd: Vec<&SpectralRecord> = self.odd().collect();
        let mut acc = 0.0;
        for a in &odd {
            for b in &odd {
                let kappa = 4.0 / (PI * PI) * a.alpha * b.alpha / (a.n * b.n).sqrt();
                acc += a.n * b.n * kappa / (kappa + lambda);
            }
        }
        Ok(acc)
    }
}

/// `⟨sign, P_ℓ/‖P_ℓ‖⟩` by quadrature, cross-checked against the closed form.
pub fn eta(d: usize, l: usize) -> Result<f64> {
    Ok(SpectralTable::build(d, l)?.records[l].eta)
}

/// `⟨arcsin, P_ℓ/‖P_ℓ‖⟩` by quadrature.
pub fn alpha(d: usize, l: usize) -> Result<f64> {
    Ok(SpectralTable::build(d, l)?.records[l].alpha)
}

/// `‖P_ℓ‖²` under `u_d` by quadrature.
pub fn pnorm2(d: usize, l: usize) -> Result<f64> {
    check_d(d)?;
    Ok(Rules::new(d, l)?.pnorm2(l)[l])
}

/// `(4/π²) arcsin(qᵀq′) arcsin(kᵀk′)`.
pub fn kernel_arcsin(q: &[f64], q_p: &[f64], k: &[f64], k_p: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    4.0 / (PI * PI) * dot(q, q_p).asin() * dot(k, k_p).asin()
}

/// Query for the spectral lower bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerBoundQuery {
    pub d: usize,
    pub r: usize,
    pub h: f64,
    pub l_max: usize,
    pub clamp_negative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundTerm {
    pub l: usize,
    pub n: f64,
    pub m: f64,
    pub weight: f64,
    pub eta2: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBound {
    pub value: f64,
    pub terms: Vec<LowerBoundTerm>,
    /// `1 − Σ_{ℓ odd ≤ l_max} η_ℓ²`: energy beyond the truncation.
    pub tail_upper: f64,
    /// `c″ Σ_{ℓ odd > l_max} ℓ⁻²` with `c″ = min_ℓ η_ℓ² ℓ²` over the table.
    pub tail_lower: f64,
}

fn validate_query(q: &LowerBoundQuery) -> Result<()> {
    check_d(q.d)?;
    if q.r == 0 || q.r > q.d {
        return Err(Error::InvalidConfig(format!("need 1 <= r <= d, got r={}, d={}", q.r, q.d)));
    }
    if !(q.h >= 0.0) {
        return Err(Error::InvalidConfig("H must be non-negative".into()));
    }
    Ok(())
}

/// `Σ_{ℓ odd ≤ l_max} (1 − H·M(r,ℓ)/N(d,ℓ)) η_ℓ²`, optionally clamping negative weights at 0.
pub fn lower_bound(table: &SpectralTable, q: &LowerBoundQuery) -> Result<LowerBound> {
    validate_query(q)?;
    if table.d != q.d || table.l_max < q.l_max {
        return Err(Error::InvalidConfig("spectral table does not cover the query".into()));
    }
    let mut terms = Vec::new();
    let mut value = 0.0;
    let mut energy = 0.0;
    let mut c2 = f64::INFINITY;
    for r in table.odd().filter(|r| r.l <= q.l_max) {
        let ratio = (ln_dim_m_upper(q.r, r.l) - ln_dim_n(q.d, r.l)).exp();
        let mut weight = 1.0 - q.h * ratio;
        if q.clamp_negative && weight < 0.0 {
            weight = 0.0;
        }
        let eta2 = r.eta * r.eta;
        let contribution = weight * eta2;
        value += contribution;
        energy += eta2;
        c2 = c2.min(eta2 * (r.l * r.l) as f64);
        terms.push(LowerBoundTerm { l: r.l, n: r.n, m: ln_dim_m_upper(q.r, r.l).exp(), weight, eta2, contribution });
    }
    let inv_sq_tail = PI * PI / 8.0 - (1..=q.l_max).step_by(2).map(|l| 1.0 / (l * l) as f64).sum::<f64>();
    let tail_lower = if c2.is_finite() { c2 * inv_sq_tail.max(0.0) } else { 0.0 };
    Ok(LowerBound { value, terms, tail_upper: 1.0 - energy, tail_lower })
}

/// Universal constants of the two regime statements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeConstants {
    pub c: f64,
    pub c_prime: f64,
    pub big_c: f64,
    pub big_c_prime: f64,
}

impl Default for RegimeConstants {
    fn default() -> Self {
        Self { c: 1.0, c_prime: 1.0, big_c: 1.0, big_c_prime: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegimeThresholds {
    pub h_high_accuracy: f64,
    pub h_high_dimensional: f64,
    pub high_accuracy_applies: bool,
    pub high_dimensional_applies: bool,
}

/// Head counts below which rank-`r` heads cannot reach error `eps`.
pub fn regime_thresholds(d: usize, r: usize, eps: f64, k: RegimeConstants) -> Result<RegimeThresholds> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig("eps must be positive".into()));
    }
    if r == 0 || d == 0 {
        return Err(Error::InvalidDimension("d and r must be positive".into()));
    }
    let (df, rf) = (d as f64, r as f64);
    let exponent = df - (rf + 1.0) * (2.0 * df / rf).log2();
    let h_high_accuracy = k.big_c * exponent.exp2();
    let p = k.big_c_prime / eps;
    let h_high_dimensional = 0.5 * (df / (2.0 * std::f64::consts::E * (rf + p))).powf(p);
    let high_accuracy_applies = r + 3 <= d && eps <= k.c / (df + 1.0);
    let gap = df - 2.0 * std::f64::consts::E.powi(2) * rf;
    let high_dimensional_applies = d >= 5 && gap > 0.0 && eps >= k.c_prime / gap;
    Ok(RegimeThresholds { h_high_accuracy, h_high_dimensional, high_accuracy_applies, high_dimensional_applies })
}
