//! Forward evaluation of attention heads and small transformer stacks.
//!
//! Orientation follows `O Vᵀ X softmax(c · Xᵀ K Qᵀ y)` with all four matrices
//! of shape `d x r`. Only the products `K Qᵀ` and `O Vᵀ` matter.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Softmax,
    Hardmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    LowestIndex,
    Error,
}

/// Softmax or hardmax, plus the hardmax tie policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionKind {
    pub mode: Mode,
    pub tie_rule: TieRule,
}

impl AttentionKind {
    pub const SOFTMAX: Self = Self { mode: Mode::Softmax, tie_rule: TieRule::LowestIndex };
    pub const HARDMAX: Self = Self { mode: Mode::Hardmax, tie_rule: TieRule::LowestIndex };
    pub const HARDMAX_STRICT: Self = Self { mode: Mode::Hardmax, tie_rule: TieRule::Error };
}

/// One rank-`r` head.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub temperature: f64,
}

impl SoftmaxHead {
    pub fn new(k: DMatrix<f64>, q: DMatrix<f64>, v: DMatrix<f64>, o: DMatrix<f64>, temperature: f64) -> Result<Self> {
        let (d, r) = k.shape();
        for (name, m) in [("Q", &q), ("V", &v), ("O", &o)] {
            if m.shape() != (d, r) {
                return Err(Error::Shape(format!("{name} is {:?} but K is {:?}", m.shape(), (d, r))));
            }
        }
        if r > d || d == 0 {
            return Err(Error::InvalidDimension(format!("need 1 <= d and r <= d, got d={d}, r={r}")));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { k, q, v, o, temperature })
    }

    pub fn d(&self) -> usize {
        self.k.nrows()
    }

    pub fn r(&self) -> usize {
        self.k.ncols()
    }

    /// `K Qᵀ` without the temperature.
    pub fn kq(&self) -> DMatrix<f64> {
        &self.k * self.q.transpose()
    }

    /// `O Vᵀ`.
    pub fn ov(&self) -> DMatrix<f64> {
        &self.o * self.v.transpose()
    }

    /// Score vector `c · Xᵀ K Qᵀ y`.
    pub fn scores(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let kx = self.k.transpose() * x;
        let qy = self.q.transpose() * y;
        projected_scores(&kx, &qy, self.temperature)
    }
}

/// `c · (KᵀX)ᵀ (Qᵀy)` computed column by column.
pub fn projected_scores(kx: &DMatrix<f64>, qy: &DVector<f64>, temperature: f64) -> DVector<f64> {
    DVector::from_fn(kx.ncols(), |i, _| temperature * kx.column(i).dot(qy))
}

/// Softmax with max subtraction. Non-finite maxima fall back to a uniform
/// split over the maximal entries.
pub fn softmax(scores: &DVector<f64>) -> DVector<f64> {
    let m = scores.max();
    if !m.is_finite() {
        let hits = scores.iter().filter(|&&s| s == m).count().max(1);
        return scores.map(|s| if s == m { 1.0 / hits as f64 } else { 0.0 });
    }
    let e = scores.map(|s| (s - m).exp());
    let z = e.sum();
    e / z
}

/// Index of the maximal score.
pub fn hardmax_index(scores: &DVector<f64>, tie_rule: TieRule) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::EmptyContext("no scores".into()));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    if tie_rule == TieRule::Error {
        if let Some(j) = (0..scores.len()).find(|&j| j != best && scores[j] == scores[best]) {
            return Err(Error::Tie(best.min(j), best.max(j)));
        }
    }
    Ok(best)
}

/// Probability vector produced by `kind` from raw scores.
pub fn weights_from_scores(scores: &DVector<f64>, kind: AttentionKind) -> Result<DVector<f64>> {
    match kind.mode {
        Mode::Softmax => Ok(softmax(scores)),
        Mode::Hardmax => {
            let i = hardmax_index(scores, kind.tie_rule)?;
            let mut w = DVector::zeros(scores.len());
            w[i] = 1.0;
            Ok(w)
        }
    }
}

/// Attention weights of `head` for source `y` over the columns of `x`.
pub fn attention_weights(
    head: &SoftmaxHead,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    kind: AttentionKind,
) -> Result<DVector<f64>> {
    if x.ncols() == 0 {
        return Err(Error::EmptyContext("X has no columns".into()));
    }
    weights_from_scores(&head.scores(x, y), kind)
}

fn check_shapes(d: usize, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != d || y.nrows() != d {
        return Err(Error::Shape(format!("head dimension {d}, X has {} rows, Y has {} rows", x.nrows(), y.nrows())));
    }
    if x.ncols() == 0 {
        return Err(Error::EmptyContext("X has no columns".into()));
    }
    Ok(())
}

/// Single-head attention; column `m` of the result answers source `Y[:, m]`.
pub fn attend(head: &SoftmaxHead, x: &DMatrix<f64>, y: &DMatrix<f64>, kind: AttentionKind) -> Result<DMatrix<f64>> {
    check_shapes(head.d(), x, y)?;
    let kx = head.k.transpose() * x;
    let ov = head.ov();
    let mut out = DMatrix::zeros(head.d(), y.ncols());
    for m in 0..y.ncols() {
        let qy = head.q.transpose() * y.column(m);
        let w = weights_from_scores(&projected_scores(&kx, &qy, head.temperature), kind)?;
        out.set_column(m, &(&ov * (x * w)));
    }
    Ok(out)
}

/// Sum of single-head outputs. An empty head list yields zeros of shape `d x M`
/// where `d` is taken from `Y`.
pub fn multihead(
    heads: &[SoftmaxHead],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    kind: AttentionKind,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(y.nrows(), y.ncols());
    for h in heads {
        out += attend(h, x, y, kind)?;
    }
    Ok(out)
}

/// Maps the rank-`r` projection `KᵀX` and a source `y` to attention weights.
pub type ScoreFn = dyn Fn(&DMatrix<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// Head whose attention distribution is any simplex-valued function of `KᵀX` and `y`.
#[derive(Clone)]
pub struct GeneralizedHead {
    pub k: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub score_rule: Arc<ScoreFn>,
}

impl fmt::Debug for GeneralizedHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralizedHead")
            .field("k", &self.k.shape())
            .field("v", &self.v.shape())
            .finish_non_exhaustive()
    }
}

impl GeneralizedHead {
    pub fn new(k: DMatrix<f64>, v: DMatrix<f64>, score_rule: Arc<ScoreFn>) -> Result<Self> {
        if v.nrows() != v.ncols() || v.nrows() != k.nrows() {
            return Err(Error::Shape(format!("V must be d x d with d = {}", k.nrows())));
        }
        Ok(Self { k, v, score_rule })
    }

    /// Embeds a standard head: `V ← O Vᵀ`, score rule `softmax(c · (KᵀX)ᵀ Qᵀ y)`.
    pub fn from_softmax_head(head: &SoftmaxHead) -> Self {
        let q = head.q.clone();
        let c = head.temperature;
        let rule = move |kx: &DMatrix<f64>, y: &DVector<f64>| {
            let qy = q.transpose() * y;
            softmax(&projected_scores(kx, &qy, c))
        };
        Self { k: head.k.clone(), v: head.ov(), score_rule: Arc::new(rule) }
    }
}

/// `V X φ(KᵀX, y)` for every column `y` of `Y`.
pub fn generalized_attend(head: &GeneralizedHead, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_shapes(head.k.nrows(), x, y)?;
    let kx = head.k.transpose() * x;
    let mut out = DMatrix::zeros(head.v.nrows(), y.ncols());
    for m in 0..y.ncols() {
        let w = (head.score_rule)(&kx, &y.column(m).into_owned());
        if w.len() != x.ncols() {
            return Err(Error::Contract(format!("score rule returned {} weights for {} points", w.len(), x.ncols())));
        }
        let total: f64 = w.sum();
        if w.iter().any(|&p| !(p >= -1e-9)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("score rule left the simplex (sum {total})")));
        }
        out.set_column(m, &(&head.v * (x * w)));
    }
    Ok(out)
}

/// Self-masked layer: token `i` attends to every token except itself.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfMaskedLayer {
    /// `(M_h, V_h)` pairs, each `D x D`.
    pub heads: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub dim: usize,
    pub mode: Mode,
}

impl SelfMaskedLayer {
    pub fn new(dim: usize, heads: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        for (m, v) in &heads {
            if m.shape() != (dim, dim) || v.shape() != (dim, dim) {
                return Err(Error::Shape(format!("all head matrices must be {dim} x {dim}")));
            }
        }
        Ok(Self { heads, dim, mode: Mode::Softmax })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Output column `i` given the full token matrix.
    pub fn column(&self, z: &DMatrix<f64>, i: usize) -> Result<DVector<f64>> {
        let n = z.ncols();
        if n < 2 {
            return Err(Error::EmptyContext("self-masked attention needs at least two tokens".into()));
        }
        if z.nrows() != self.dim {
            return Err(Error::Shape(format!("tokens have {} rows, layer expects {}", z.nrows(), self.dim)));
        }
        let zi = z.column(i).into_owned();
        let rest = z.clone().remove_column(i);
        let kind = AttentionKind { mode: self.mode, tie_rule: TieRule::LowestIndex };
        let mut out = zi.clone();
        for (m, v) in &self.heads {
            let mz = m * &zi;
            let scores = rest.transpose() * mz;
            let w = weights_from_scores(&scores, kind)?;
            out += v * (&rest * w);
        }
        Ok(out)
    }
}

/// `T_i(Z) = z_i + Σ_h V_h Z̃_i sm(Z̃_iᵀ M_h z_i)` for every token.
pub fn self_masked_forward(layer: &SelfMaskedLayer, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    for i in 0..z.ncols() {
        out.set_column(i, &layer.column(z, i)?);
    }
    Ok(out)
}

/// Two self-masked layers over `[X; E]` followed by a linear read-out of the last token.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerPosTransformer {
    pub e: DMatrix<f64>,
    pub t1: SelfMaskedLayer,
    pub t2: SelfMaskedLayer,
    pub a: DMatrix<f64>,
}

impl TwoLayerPosTransformer {
    pub fn new(e: DMatrix<f64>, t1: SelfMaskedLayer, t2: SelfMaskedLayer, a: DMatrix<f64>) -> Result<Self> {
        let dim = a.ncols();
        if t1.dim != dim || t2.dim != dim {
            return Err(Error::Shape(format!(
                "layer dimensions {} / {} differ from read-out width {dim}",
                t1.dim, t2.dim
            )));
        }
        if a.nrows() + e.nrows() != dim {
            return Err(Error::Shape("A must be d x (d + d_e)".into()));
        }
        Ok(Self { e, t1, t2, a })
    }

    pub fn d(&self) -> usize {
        self.a.nrows()
    }
}

/// `A · T2_N(T1([X; E]))`.
pub fn two_layer_forward(t: &TwoLayerPosTransformer, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = x.ncols();
    if n != t.e.ncols() {
        return Err(Error::InvalidConfig(format!("X has {n} columns but E has {}", t.e.ncols())));
    }
    if x.nrows() != t.d() {
        return Err(Error::Shape(format!("X has {} rows, model expects {}", x.nrows(), t.d())));
    }
    let de = t.e.nrows();
    let mut z = DMatrix::zeros(x.nrows() + de, n);
    z.rows_mut(0, x.nrows()).copy_from(x);
    z.rows_mut(x.nrows(), de).copy_from(&t.e);
    let z1 = self_masked_forward(&t.t1, &z)?;
    let last = t.t2.column(&z1, n - 1)?;
    Ok(&t.a * last)
}
