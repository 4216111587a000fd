//! Explicit parameter sets: full-rank nearest/farthest heads, biased heads,
//! the two-layer majority transformer, random rank-one voters and the ReLU
//! network that outputs the mode of its votes.

use nalgebra::{DMatrix, DVector};

use crate::attention::{AttentionKind, Mode, SelfMaskedLayer, SoftmaxHead, TwoLayerPosTransformer};
use crate::geometry::{sample_sphere, SeededRng, UnitVector};
use crate::targets::BiasVector;
use crate::{Error, Result};

/// Default temperature standing in for hardmax inside constructions.
pub const DEFAULT_TEMPERATURE: f64 = 1e3;

/// `K = Q = V = O = I_d`, so `K Qᵀ = I`, `O Vᵀ = I`; scores are scaled by `temperature`.
pub fn full_rank_nearest(d: usize, temperature: f64) -> Result<SoftmaxHead> {
    let i = DMatrix::identity(d, d);
    SoftmaxHead::new(i.clone(), i.clone(), i.clone(), i, temperature)
}

/// `K Qᵀ = −I` with temperature `c`, `O Vᵀ = I`: each point attends to the
/// point least aligned with it (itself included in the context).
pub fn full_rank_farthest(d: usize, c: f64) -> Result<SoftmaxHead> {
    let i = DMatrix::<f64>::identity(d, d);
    SoftmaxHead::new(i.clone(), -i.clone(), i.clone(), i, c)
}

/// Full-rank head with an additive per-point score bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasedHead {
    pub base: SoftmaxHead,
    pub b: BiasVector,
}

impl BiasedHead {
    /// `c · (Xᵀ K Qᵀ y + b)`.
    pub fn scores(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        if self.b.len() != x.ncols() {
            return Err(Error::InvalidConfig(format!(
                "bias has length {} but X has {} columns",
                self.b.len(),
                x.ncols()
            )));
        }
        let kx = self.base.k.transpose() * x;
        let qy = self.base.q.transpose() * y;
        let c = self.base.temperature;
        Ok(DVector::from_fn(x.ncols(), |i, _| c * (kx.column(i).dot(&qy) + self.b.as_vector()[i])))
    }

    pub fn weights(&self, x: &DMatrix<f64>, y: &DVector<f64>, kind: AttentionKind) -> Result<DVector<f64>> {
        crate::attention::weights_from_scores(&self.scores(x, y)?, kind)
    }

    pub fn forward(&self, x: &DMatrix<f64>, y: &DVector<f64>, kind: AttentionKind) -> Result<DVector<f64>> {
        let w = self.weights(x, y, kind)?;
        Ok(self.base.ov() * (x * w))
    }

    /// Equivalent head on `[x; b_i]` / `[y; 1]` tokens with `K Qᵀ = I_{d+1}`
    /// and `O Vᵀ = diag(I_d, 0)`.
    pub fn concatenated(&self) -> Result<SoftmaxHead> {
        let d = self.base.d();
        let mut kq_aug = DMatrix::zeros(d + 1, d + 1);
        kq_aug.view_mut((0, 0), (d, d)).copy_from(&self.base.kq());
        kq_aug[(d, d)] = 1.0;
        let mut ov = DMatrix::zeros(d + 1, d + 1);
        ov.view_mut((0, 0), (d, d)).copy_from(&self.base.ov());
        SoftmaxHead::new(
            kq_aug,
            DMatrix::identity(d + 1, d + 1),
            ov.transpose(),
            DMatrix::identity(d + 1, d + 1),
            self.base.temperature,
        )
    }
}

/// Appends the bias as an extra coordinate of every target point.
pub fn augment_targets(x: &DMatrix<f64>, b: &BiasVector) -> DMatrix<f64> {
    let mut out = x.clone().insert_row(x.nrows(), 0.0);
    for (i, v) in b.as_vector().iter().enumerate() {
        out[(x.nrows(), i)] = *v;
    }
    out
}

/// Appends a constant 1 to the source point.
pub fn augment_source(y: &DVector<f64>) -> DVector<f64> {
    y.clone().insert_row(y.len(), 1.0)
}

/// Hardmax over `Xᵀy + b` selects `argmax_i ⟨x_i, y⟩ + b_i`.
pub fn biased_full_rank(d: usize, b: BiasVector) -> Result<BiasedHead> {
    Ok(BiasedHead { base: full_rank_nearest(d, 1.0)?, b })
}

/// Biased head for the squared-distance form `argmin_i ‖x_i − y‖² + b_i` on
/// the unit sphere, obtained with the bias `−b/2`.
pub fn biased_full_rank_sq_distance(d: usize, b: &BiasVector) -> Result<BiasedHead> {
    biased_full_rank(d, BiasVector::new(b.as_vector() * -0.5)?)
}

/// Parameters of the two-layer majority transformer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MajorityParams {
    /// Scale of the first-layer scores `α (x_jᵀq)(qᵀy)`.
    pub alpha: f64,
    /// Scale of the copied point; the read-out divides by it.
    pub beta: f64,
    /// Scale of the second-layer scores `γ · code_j · s_y`.
    pub gamma: f64,
    /// Use exact hardmax instead of large-temperature softmax.
    pub hardmax: bool,
}

impl MajorityParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta, gamma: alpha, hardmax: false }
    }
}

/// Two-layer transformer on tokens `(x₁, x₂, y)` whose output is
/// `(1/β) y + x_j`, where `x_j` wins the majority vote of the rank-one heads
/// `q_h` (each voting for `argmax_i ⟨x_i, q_h⟩⟨y, q_h⟩`).
///
/// Layout of the `d + 2` rows: data, position code (`+1`, `−1`, `0`), scratch.
/// Layer 1 writes each head's chosen position code into the scratch row of
/// `y`; layer 2 lets `y` attend by `code · scratch` and copies the winner.
pub fn majority_two_layer(
    d: usize,
    h: usize,
    q_list: &[DVector<f64>],
    alpha: f64,
    beta: f64,
) -> Result<TwoLayerPosTransformer> {
    majority_two_layer_with(d, h, q_list, MajorityParams::new(alpha, beta))
}

pub fn majority_two_layer_with(
    d: usize,
    h: usize,
    q_list: &[DVector<f64>],
    p: MajorityParams,
) -> Result<TwoLayerPosTransformer> {
    if q_list.len() != h || h == 0 {
        return Err(Error::InvalidConfig(format!("expected {h} >= 1 directions, got {}", q_list.len())));
    }
    for (i, q) in q_list.iter().enumerate() {
        if q.len() != d || (q.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidConfig(format!("q_{i} is not a unit vector of length {d}")));
        }
    }
    for (name, v) in [("alpha", p.alpha), ("beta", p.beta), ("gamma", p.gamma)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
    }
    let dim = d + 2;
    let (code, scratch) = (d, d + 1);
    let mode = if p.hardmax { Mode::Hardmax } else { Mode::Softmax };

    let mut e = DMatrix::zeros(2, 3);
    e[(0, 0)] = 1.0;
    e[(0, 1)] = -1.0;

    let mut write = DMatrix::zeros(dim, dim);
    write[(scratch, code)] = 1.0;
    let layer1 = q_list
        .iter()
        .map(|q| {
            let mut qp = DVector::zeros(dim);
            qp.rows_mut(0, d).copy_from(q);
            (&qp * qp.transpose() * p.alpha, write.clone())
        })
        .collect();

    let mut m2 = DMatrix::zeros(dim, dim);
    m2[(code, scratch)] = p.gamma;
    let layer2 = (0..d)
        .map(|i| {
            let mut v = DMatrix::zeros(dim, dim);
            v[(i, i)] = p.beta;
            (m2.clone(), v)
        })
        .collect();

    let mut a = DMatrix::zeros(d, dim);
    a.view_mut((0, 0), (d, d)).fill_with_identity();
    a /= p.beta;

    TwoLayerPosTransformer::new(
        e,
        SelfMaskedLayer::new(dim, layer1)?.with_mode(mode),
        SelfMaskedLayer::new(dim, layer2)?.with_mode(mode),
        a,
    )
}

/// Index chosen by the rank-one head `q`: `argmax_i ⟨x_i, q⟩⟨y, q⟩`, lowest index on ties.
pub fn head_vote(q: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> usize {
    let qy = q.dot(y);
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..x.ncols() {
        let s = x.column(i).dot(q) * qy;
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Most frequent index; ties are broken uniformly at random with `rng`.
pub fn mode_of_votes(votes: &[usize], n_points: usize, rng: &mut SeededRng) -> usize {
    let mut counts = vec![0usize; n_points];
    for &v in votes {
        counts[v] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&0);
    let winners: Vec<usize> = (0..n_points).filter(|&i| counts[i] == top).collect();
    if winners.len() == 1 {
        winners[0]
    } else {
        winners[rng.below(winners.len())]
    }
}

/// `H` random rank-one voters combined by an exact mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomHeadMajority {
    pub qs: Vec<DVector<f64>>,
}

impl RandomHeadMajority {
    pub fn from_q_list(qs: Vec<DVector<f64>>) -> Result<Self> {
        if qs.is_empty() {
            return Err(Error::InvalidConfig("need at least one head".into()));
        }
        Ok(Self { qs })
    }

    /// Rank-one heads with `K = Q = q` (so `K Qᵀ = q qᵀ`) and `V = O = q`.
    /// Their hardmax weights are the votes.
    pub fn heads(&self) -> Result<Vec<SoftmaxHead>> {
        self.qs
            .iter()
            .map(|q| {
                let m = DMatrix::from_column_slice(q.len(), 1, q.as_slice());
                SoftmaxHead::new(m.clone(), m.clone(), m.clone(), m, 1.0)
            })
            .collect()
    }

    pub fn votes(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Vec<usize> {
        self.qs.iter().map(|q| head_vote(q, x, y)).collect()
    }

    pub fn predict(&self, x: &DMatrix<f64>, y: &DVector<f64>, rng: &mut SeededRng) -> usize {
        mode_of_votes(&self.votes(x, y), x.ncols(), rng)
    }
}

/// Draws `q_1, …, q_H` uniformly from the sphere.
pub fn random_head_majority(d: usize, h: usize, rng: &mut SeededRng) -> Result<RandomHeadMajority> {
    let qs = (0..h).map(|_| sample_sphere(d, rng).map(UnitVector::into_vector)).collect::<Result<Vec<_>>>()?;
    RandomHeadMajority::from_q_list(qs)
}

/// Affine map `rows x cols` stored as a coordinate list, optionally followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayer {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f64)>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl SparseLayer {
    fn new(rows: usize, cols: usize, relu: bool) -> Self {
        Self { rows, cols, entries: Vec::new(), bias: vec![0.0; rows], relu }
    }

    fn push(&mut self, row: usize, col: usize, w: f64) {
        self.entries.push((row as u32, col as u32, w));
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for &(r, c, w) in &self.entries {
            out[r as usize] += w * input[c as usize];
        }
        if self.relu {
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        out
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.2.abs()).chain(self.bias.iter().map(|b| b.abs())).fold(0.0, f64::max)
    }
}

/// Knot count `⌈32 d / eps⌉` of each square-approximation unit.
pub fn square_unit_knots(d: usize, eps: f64) -> usize {
    ((32.0 * d as f64 / eps).ceil() as usize).max(2)
}

/// Piecewise-linear interpolant of `t²/2` on `[−2, 2]` written as a ReLU sum
/// `f(−2) + Σ_k c_k ReLU(t − t_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareUnit {
    pub knots: Vec<f64>,
    /// Coefficient of `ReLU(t − t_k)` for the knots `t_0, …, t_{K−2}`.
    pub coeffs: Vec<f64>,
    pub offset: f64,
}

impl SquareUnit {
    pub fn new(knot_count: usize) -> Self {
        let k = knot_count.max(2);
        let h = 4.0 / (k - 1) as f64;
        let knots: Vec<f64> = (0..k).map(|i| -2.0 + h * i as f64).collect();
        let mut coeffs = Vec::with_capacity(k - 1);
        // slope on the first segment, then the constant slope increments
        coeffs.push(-2.0 + 0.5 * h);
        coeffs.extend(std::iter::repeat_n(h, k - 2));
        Self { knots, coeffs, offset: 2.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.offset + self.coeffs.iter().zip(&self.knots).map(|(c, k)| c * (t - k).max(0.0)).sum::<f64>()
    }
}

/// Four-layer ReLU network returning the majority candidate among its vote inputs.
///
/// Input: `H` vote vectors followed by the two candidates, each of length `d`.
/// With `x` the last block and `x̂` the one before, the network forms
/// `D = Σ_h ⟨v_h, x⟩ − ⟨v_h, x̂⟩` from square units
/// (`⟨u, w⟩ = Σ_i (u_i + w_i)²/2 − 1` for unit vectors), gates
/// `s = ReLU(D + ½) − ReLU(D − ½)` and outputs `s·x + (1 − s)·x̂` through
/// `ReLU(±x_i − (1 − s))`, `ReLU(±x̂_i − s)`. When every vote is one of the
/// candidates, `D = (2m − H)(1 − ⟨x, x̂⟩)` with `m` votes for `x`, so for odd
/// `H` and `⟨x, x̂⟩ ≤ 0.1` the gate sees `|D| ≥ 0.9` and `s` saturates at 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeMlp {
    pub d: usize,
    pub h: usize,
    pub eps: f64,
    pub knots: usize,
    pub layers: Vec<SparseLayer>,
}

/// Output of [`ModeMlp::evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModeOutput {
    pub output: DVector<f64>,
    /// `⟨x₊, x₋⟩ ≤ 0.1`.
    pub precondition_ok: bool,
}

pub fn mode_mlp_construction(d: usize, h: usize, eps: f64) -> Result<ModeMlp> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidConfig(format!("eps must lie in (0, 1/2), got {eps}")));
    }
    if d == 0 || h == 0 {
        return Err(Error::InvalidDimension("d and H must be positive".into()));
    }
    let knots = square_unit_knots(d, eps);
    let unit = SquareUnit::new(knots);
    let per_unit = knots - 1;
    let input = d * (h + 2);
    let prev = d * h;
    let last = d * (h + 1);

    // layer 1: square-unit hinges for (vote, candidate, coordinate), then ± pass-through
    let hinge_count = 2 * h * d * per_unit;
    let mut l1 = SparseLayer::new(hinge_count + 4 * d, input, true);
    let hinge = |side: usize, vote: usize, i: usize, k: usize| ((side * h + vote) * d + i) * per_unit + k;
    for side in 0..2 {
        let cand = if side == 0 { last } else { prev };
        for vote in 0..h {
            for i in 0..d {
                for k in 0..per_unit {
                    let row = hinge(side, vote, i, k);
                    l1.push(row, vote * d + i, 1.0);
                    l1.push(row, cand + i, 1.0);
                    l1.bias[row] = -unit.knots[k];
                }
            }
        }
    }
    let pass = |block: usize, i: usize| hinge_count + block * d + i;
    for i in 0..d {
        l1.push(pass(0, i), last + i, 1.0);
        l1.push(pass(1, i), last + i, -1.0);
        l1.push(pass(2, i), prev + i, 1.0);
        l1.push(pass(3, i), prev + i, -1.0);
    }

    // layer 2: a = ReLU(D + ½), b = ReLU(D − ½), then the pass-through copies
    let mut l2 = SparseLayer::new(2 + 4 * d, l1.rows, true);
    for side in 0..2 {
        let sign = if side == 0 { 1.0 } else { -1.0 };
        for vote in 0..h {
            for i in 0..d {
                for k in 0..per_unit {
                    let col = hinge(side, vote, i, k);
                    l2.push(0, col, sign * unit.coeffs[k]);
                    l2.push(1, col, sign * unit.coeffs[k]);
                }
            }
        }
    }
    l2.bias[0] = 0.5;
    l2.bias[1] = -0.5;
    for b in 0..4 {
        for i in 0..d {
            l2.push(2 + b * d + i, pass(b, i), 1.0);
        }
    }

    // layer 3: gated copies of the two candidates
    let mut l3 = SparseLayer::new(4 * d, l2.rows, true);
    let p2 = |block: usize, i: usize| 2 + block * d + i;
    for i in 0..d {
        for (row, sign) in [(i, 1.0), (d + i, -1.0)] {
            l3.push(row, p2(0, i), sign);
            l3.push(row, p2(1, i), -sign);
            l3.push(row, 0, 1.0);
            l3.push(row, 1, -1.0);
            l3.bias[row] = -1.0;
        }
        for (row, sign) in [(2 * d + i, 1.0), (3 * d + i, -1.0)] {
            l3.push(row, p2(2, i), sign);
            l3.push(row, p2(3, i), -sign);
            l3.push(row, 0, -1.0);
            l3.push(row, 1, 1.0);
        }
    }

    // layer 4: linear read-out
    let mut l4 = SparseLayer::new(d, l3.rows, false);
    for i in 0..d {
        l4.push(i, i, 1.0);
        l4.push(i, d + i, -1.0);
        l4.push(i, 2 * d + i, 1.0);
        l4.push(i, 3 * d + i, -1.0);
    }

    Ok(ModeMlp { d, h, eps, knots, layers: vec![l1, l2, l3, l4] })
}

impl ModeMlp {
    /// Input width followed by the width of every layer.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].cols).chain(self.layers.iter().map(|l| l.rows)).collect()
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.layers.iter().map(SparseLayer::max_abs_weight).fold(0.0, f64::max)
    }

    pub fn forward(&self, input: &[f64]) -> Result<DVector<f64>> {
        if input.len() != self.d * (self.h + 2) {
            return Err(Error::Shape(format!("input has length {}, expected {}", input.len(), self.d * (self.h + 2))));
        }
        let mut z = input.to_vec();
        for layer in &self.layers {
            z = layer.apply(&z);
        }
        Ok(DVector::from_vec(z))
    }

    /// Runs the network on votes `v_1..v_H` with candidates `x₋` (second to last
    /// block) and `x₊` (last block).
    pub fn evaluate(
        &self,
        votes: &[DVector<f64>],
        x_minus: &DVector<f64>,
        x_plus: &DVector<f64>,
    ) -> Result<ModeOutput> {
        if votes.len() != self.h {
            return Err(Error::Shape(format!("expected {} votes, got {}", self.h, votes.len())));
        }
        let mut input = Vec::with_capacity(self.d * (self.h + 2));
        for v in votes.iter().chain([x_minus, x_plus]) {
            if v.len() != self.d {
                return Err(Error::Shape(format!("vectors must have length {}", self.d)));
            }
            input.extend(v.iter());
        }
        let output = self.forward(&input)?;
        Ok(ModeOutput { output, precondition_ok: x_plus.dot(x_minus) <= 0.1 })
    }
}
