//! Gradient-descent training of rank-`r` multi-head attention on the
//! nearest and farthest point targets.
//!
//! Layers act on a `D x T` stream (`D = d`, or `d + d_e` with concatenated
//! positional codes). A layer computes `A = Σ_h O_h V_hᵀ Z_k softmax(Z_kᵀ K_h Q_hᵀ Z_q)`
//! column-wise, adds the skip path, and optionally applies RMSNorm with a
//! learnable gain. For the farthest target the stream attends to itself; for
//! the nearest target a single query token (the source) attends to the fixed
//! target set. Gradients are hand-written reverse mode.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{sample_sphere, sample_sphere_columns, PointConfiguration, SeededRng};
use crate::montecarlo::{mc_mean, McEstimate};
use crate::targets::{farthest_neighbor_selfattn, nearest_neighbor};
use crate::{Error, Result};

/// Version of the [`TrainConfig`] JSON schema.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

const RMS_EPS: f64 = 1e-8;
const ADAM_EPS: f64 = 1e-8;
const EVAL_SALT: u64 = 0x5eed_e7a1_0000_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// One query token (the source) attending to the targets.
    Nearest,
    /// Every target token outputs the target farthest from it.
    FarthestSelfattn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    CosineWithLinearWarmup { warmup_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw { beta1: f64, beta2: f64, weight_decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    None,
    /// Learnable `d x N` matrix added to the targets.
    Additive,
    /// Learnable `d_e x N` matrix stacked under the targets.
    Concatenated {
        d_e: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub d: usize,
    pub n_points: usize,
    pub r: usize,
    pub heads: usize,
    pub layers: usize,
    pub target: TargetKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub init_scale: f64,
    pub rmsnorm: bool,
    pub positional: Positional,
    pub skip: bool,
    /// Tokens may not attend to themselves (farthest target only).
    pub self_mask: bool,
    /// Monitor-loss interval in steps.
    pub log_every: usize,
    /// Size of the fixed batch whose loss forms the loss curve.
    pub monitor_batch: usize,
    pub eval_samples: usize,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            d: 16,
            n_points: 4,
            r: 16,
            heads: 1,
            layers: 1,
            target: TargetKind::FarthestSelfattn,
            steps: 20_000,
            batch: 64,
            lr: 0.01,
            schedule: Schedule::CosineWithLinearWarmup { warmup_steps: 1_000 },
            optimizer: OptimizerKind::Adamw { beta1: 0.9, beta2: 0.999, weight_decay: 0.0 },
            seed: 0,
            init_scale: 1.0,
            rmsnorm: true,
            positional: Positional::None,
            skip: true,
            self_mask: false,
            log_every: 100,
            monitor_batch: 256,
            eval_samples: 10_000,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    /// Width of the residual stream.
    pub fn dim(&self) -> usize {
        match self.positional {
            Positional::Concatenated { d_e } => self.d + d_e,
            _ => self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.d == 0 || self.n_points == 0 || self.r == 0 || self.heads == 0 || self.layers == 0 {
            return bad("d, n_points, r, heads and layers must be positive".into());
        }
        if self.r > self.d {
            return bad(format!("r = {} exceeds d = {}", self.r, self.d));
        }
        if self.batch == 0 || self.log_every == 0 || self.monitor_batch == 0 {
            return bad("batch, log_every and monitor_batch must be positive".into());
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative".into());
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative".into());
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive".into());
        }
        if let Schedule::CosineWithLinearWarmup { warmup_steps } = self.schedule {
            if warmup_steps > self.steps {
                return bad(format!("warmup_steps {warmup_steps} exceeds steps {}", self.steps));
            }
        }
        if let OptimizerKind::Adamw { beta1, beta2, weight_decay } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(weight_decay >= 0.0) {
                return bad("adamw needs beta1, beta2 in [0, 1) and weight_decay >= 0".into());
            }
        }
        if let Positional::Concatenated { d_e } = self.positional {
            if d_e == 0 {
                return bad("concatenated positional codes need d_e >= 1".into());
            }
        }
        if self.self_mask && (self.target != TargetKind::FarthestSelfattn || self.n_points < 2) {
            return bad("self_mask needs the farthest target and n_points >= 2".into());
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch {
            d: self.d,
            dim: self.dim(),
            n_points: self.n_points,
            target: self.target,
            skip: self.skip,
            rmsnorm: self.rmsnorm,
            self_mask: self.self_mask,
            positional: self.positional,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::CosineWithLinearWarmup { warmup_steps } => {
                if step < warmup_steps {
                    self.lr * (step + 1) as f64 / warmup_steps as f64
                } else {
                    let span = (self.steps - warmup_steps).max(1) as f64;
                    let t = ((step - warmup_steps) as f64 / span).min(1.0);
                    0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

/// Structural description of a model, independent of parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub d: usize,
    pub dim: usize,
    pub n_points: usize,
    pub target: TargetKind,
    pub skip: bool,
    pub rmsnorm: bool,
    pub self_mask: bool,
    pub positional: Positional,
}

/// Head matrices, each `D x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub o: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// RMSNorm gain, present iff the architecture normalizes.
    pub gain: Option<DVector<f64>>,
}

/// Trainable model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub layers: Vec<LayerParams>,
    /// Positional matrix: `d x N` (additive) or `d_e x N` (concatenated).
    pub pos: Option<DMatrix<f64>>,
}

struct HeadCache {
    kz: DMatrix<f64>,
    qz: DMatrix<f64>,
    vz: DMatrix<f64>,
    p: DMatrix<f64>,
    c: DMatrix<f64>,
}

struct LayerCache {
    zq: DMatrix<f64>,
    zk: DMatrix<f64>,
    heads: Vec<HeadCache>,
    u: DMatrix<f64>,
    inv_rms: Vec<f64>,
}

struct Forward {
    out: DMatrix<f64>,
    layers: Vec<LayerCache>,
}

fn softmax_columns(s: &DMatrix<f64>, mask_diag: bool) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(s.nrows(), s.ncols());
    for j in 0..s.ncols() {
        let allowed = |i: usize| !(mask_diag && i == j);
        let mut m = f64::NEG_INFINITY;
        for i in (0..s.nrows()).filter(|&i| allowed(i)) {
            m = m.max(s[(i, j)]);
        }
        let mut z = 0.0;
        for i in (0..s.nrows()).filter(|&i| allowed(i)) {
            let e = (s[(i, j)] - m).exp();
            p[(i, j)] = e;
            z += e;
        }
        for i in 0..s.nrows() {
            p[(i, j)] /= z;
        }
    }
    p
}

impl Model {
    pub fn new(arch: Arch, layers: Vec<LayerParams>, pos: Option<DMatrix<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for layer in &layers {
            if layer.heads.is_empty() {
                return Err(Error::InvalidConfig("every layer needs at least one head".into()));
            }
            for h in &layer.heads {
                let r = h.k.ncols();
                for m in [&h.k, &h.q, &h.v, &h.o] {
                    if m.nrows() != arch.dim || m.ncols() != r {
                        return Err(Error::Shape(format!("head matrices must be {} x {r}", arch.dim)));
                    }
                }
            }
            if layer.gain.as_ref().map(|g| g.len()) != arch.rmsnorm.then_some(arch.dim) {
                return Err(Error::Shape("gain must be present with length D iff rmsnorm".into()));
            }
        }
        let want = match arch.positional {
            Positional::None => None,
            Positional::Additive => Some((arch.d, arch.n_points)),
            Positional::Concatenated { d_e } => Some((d_e, arch.n_points)),
        };
        if pos.as_ref().map(|p| p.shape()) != want {
            return Err(Error::Shape(format!("positional matrix must have shape {want:?}")));
        }
        Ok(Self { arch, layers, pos })
    }

    /// Single full-rank head `K = Q = √c I`, `V = O = I`, no skip or norm,
    /// reading the nearest target: the identity construction in trainable form.
    pub fn full_rank_nearest(d: usize, n_points: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        let arch = Arch {
            d,
            dim: d,
            n_points,
            target: TargetKind::Nearest,
            skip: false,
            rmsnorm: false,
            self_mask: false,
            positional: Positional::None,
        };
        let s = DMatrix::identity(d, d) * temperature.sqrt();
        let i = DMatrix::identity(d, d);
        let head = HeadParams { k: s.clone(), q: s, v: i.clone(), o: i };
        Self::new(arch, vec![LayerParams { heads: vec![head], gain: None }], None)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &DMatrix<f64>| DMatrix::zeros(m.nrows(), m.ncols());
        Self {
            arch: self.arch,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams { k: z(&h.k), q: z(&h.q), v: z(&h.v), o: z(&h.o) })
                        .collect(),
                    gain: l.gain.as_ref().map(|g| DVector::zeros(g.len())),
                })
                .collect(),
            pos: self.pos.as_ref().map(z),
        }
    }

    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            for h in &l.heads {
                out.extend([h.k.as_slice(), h.q.as_slice(), h.v.as_slice(), h.o.as_slice()]);
            }
            if let Some(g) = &l.gain {
                out.push(g.as_slice());
            }
        }
        if let Some(p) = &self.pos {
            out.push(p.as_slice());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for h in &mut l.heads {
                out.push(h.k.as_mut_slice());
                out.push(h.q.as_mut_slice());
                out.push(h.v.as_mut_slice());
                out.push(h.o.as_mut_slice());
            }
            if let Some(g) = &mut l.gain {
                out.push(g.as_mut_slice());
            }
        }
        if let Some(p) = &mut self.pos {
            out.push(p.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Entries of `K, Q, V, O` in one layer.
    pub fn attention_params_per_layer(&self) -> usize {
        self.layers[0].heads.iter().map(|h| 4 * h.k.len()).sum()
    }

    /// Parameters in a fixed order: per layer the heads' `K, Q, V, O`
    /// (column-major) then the gain; the positional matrix last.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut at = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn check_input(&self, pc: &PointConfiguration) -> Result<()> {
        if pc.x.nrows() != self.arch.d || pc.x.ncols() != self.arch.n_points {
            return Err(Error::Shape(format!(
                "model expects {} x {} targets, got {} x {}",
                self.arch.d,
                self.arch.n_points,
                pc.x.nrows(),
                pc.x.ncols()
            )));
        }
        if self.arch.target == TargetKind::Nearest && pc.y.len() != self.arch.d {
            return Err(Error::Shape(format!("source must have length {}", self.arch.d)));
        }
        Ok(())
    }

    fn embed_targets(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match (&self.arch.positional, &self.pos) {
            (Positional::Additive, Some(e)) => x + e,
            (Positional::Concatenated { .. }, Some(e)) => {
                let mut z = DMatrix::zeros(self.arch.dim, x.ncols());
                z.rows_mut(0, self.arch.d).copy_from(x);
                z.rows_mut(self.arch.d, e.nrows()).copy_from(e);
                z
            }
            _ => x.clone(),
        }
    }

    fn target_of(&self, pc: &PointConfiguration) -> Result<DMatrix<f64>> {
        match self.arch.target {
            TargetKind::Nearest => {
                Ok(DMatrix::from_column_slice(self.arch.d, 1, nearest_neighbor(&pc.x, &pc.y)?.as_slice()))
            }
            TargetKind::FarthestSelfattn => farthest_neighbor_selfattn(&pc.x),
        }
    }

    fn run(&self, pc: &PointConfiguration) -> Forward {
        let a = &self.arch;
        let keys = self.embed_targets(&pc.x);
        let mut z = match a.target {
            TargetKind::FarthestSelfattn => keys.clone(),
            TargetKind::Nearest => {
                let mut q = DMatrix::zeros(a.dim, 1);
                q.rows_mut(0, a.d).copy_from(&pc.y);
                q
            }
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let zk = match a.target {
                TargetKind::FarthestSelfattn => z.clone(),
                TargetKind::Nearest => keys.clone(),
            };
            let mut u = if a.skip { z.clone() } else { DMatrix::zeros(a.dim, z.ncols()) };
            let mut heads = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let kz = h.k.tr_mul(&zk);
                let qz = h.q.tr_mul(&z);
                let vz = h.v.tr_mul(&zk);
                let p = softmax_columns(&kz.tr_mul(&qz), a.self_mask);
                let c = &vz * &p;
                u += &h.o * &c;
                heads.push(HeadCache { kz, qz, vz, p, c });
            }
            let mut next = u.clone();
            let mut inv_rms = Vec::new();
            if let Some(g) = &layer.gain {
                for j in 0..u.ncols() {
                    let s = 1.0 / (u.column(j).norm_squared() / a.dim as f64 + RMS_EPS).sqrt();
                    inv_rms.push(s);
                    for i in 0..a.dim {
                        next[(i, j)] = g[i] * u[(i, j)] * s;
                    }
                }
            }
            caches.push(LayerCache { zq: z, zk, heads, u, inv_rms });
            z = next;
        }
        Forward { out: z.rows(0, a.d).into_owned(), layers: caches }
    }

    /// Model output: `d x N` (farthest) or `d x 1` (nearest).
    pub fn forward(&self, pc: &PointConfiguration) -> Result<DMatrix<f64>> {
        self.check_input(pc)?;
        Ok(self.run(pc).out)
    }

    /// Mean over tokens of `‖output − target‖²` for one configuration.
    pub fn sample_loss(&self, pc: &PointConfiguration) -> Result<f64> {
        self.check_input(pc)?;
        let t = self.target_of(pc)?;
        let out = self.run(pc).out;
        Ok((out - &t).norm_squared() / t.ncols() as f64)
    }

    fn sample_loss_and_grad(&self, pc: &PointConfiguration) -> Result<(f64, Model)> {
        self.check_input(pc)?;
        let a = &self.arch;
        let tgt = self.target_of(pc)?;
        let fwd = self.run(pc);
        let diff = &fwd.out - &tgt;
        let tokens = tgt.ncols() as f64;
        let loss = diff.norm_squared() / tokens;

        let mut grads = self.zeros_like();
        let mut g = DMatrix::zeros(a.dim, diff.ncols());
        g.rows_mut(0, a.d).copy_from(&(diff * (2.0 / tokens)));
        let mut d_keys = DMatrix::zeros(a.dim, a.n_points);

        for (li, (layer, cache)) in self.layers.iter().zip(&fwd.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];
            let du = match (&layer.gain, &mut gl.gain) {
                (Some(gain), Some(dgain)) => {
                    let mut du = DMatrix::zeros(a.dim, g.ncols());
                    for j in 0..g.ncols() {
                        let s = cache.inv_rms[j];
                        let mut dot = 0.0;
                        for i in 0..a.dim {
                            dgain[i] += g[(i, j)] * cache.u[(i, j)] * s;
                            dot += gain[i] * g[(i, j)] * cache.u[(i, j)];
                        }
                        let k = s * s * s * dot / a.dim as f64;
                        for i in 0..a.dim {
                            du[(i, j)] = s * gain[i] * g[(i, j)] - k * cache.u[(i, j)];
                        }
                    }
                    du
                }
                _ => g.clone(),
            };
            let mut dzq = if a.skip { du.clone() } else { DMatrix::zeros(a.dim, du.ncols()) };
            let mut dzk = DMatrix::zeros(a.dim, cache.zk.ncols());
            for ((h, hc), hg) in layer.heads.iter().zip(&cache.heads).zip(&mut gl.heads) {
                hg.o += &du * hc.c.transpose();
                let dc = h.o.tr_mul(&du);
                let dvz = &dc * hc.p.transpose();
                let dp = hc.vz.tr_mul(&dc);
                let mut ds = dp;
                for j in 0..ds.ncols() {
                    let inner: f64 = hc.p.column(j).dot(&ds.column(j));
                    for i in 0..ds.nrows() {
                        ds[(i, j)] = hc.p[(i, j)] * (ds[(i, j)] - inner);
                    }
                }
                let dkz = &hc.qz * ds.transpose();
                let dqz = &hc.kz * &ds;
                hg.k += &cache.zk * dkz.transpose();
                hg.q += &cache.zq * dqz.transpose();
                hg.v += &cache.zk * dvz.transpose();
                dzk += &h.k * dkz + &h.v * dvz;
                dzq += &h.q * dqz;
            }
            match a.target {
                TargetKind::FarthestSelfattn => g = dzq + dzk,
                TargetKind::Nearest => {
                    d_keys += dzk;
                    g = dzq;
                }
            }
        }
        if a.target == TargetKind::FarthestSelfattn {
            d_keys = g;
        }
        match (a.positional, &mut grads.pos) {
            (Positional::Additive, Some(dp)) => *dp += &d_keys,
            (Positional::Concatenated { d_e }, Some(dp)) => *dp += d_keys.rows(a.d, d_e),
            _ => {}
        }
        Ok((loss, grads))
    }

    /// Mean loss over the batch and its gradient, as a flat vector in
    /// [`Model::to_flat`] order. Per-sample work runs in parallel; the sum
    /// is taken in batch order.
    pub fn loss_and_grad(&self, batch: &[PointConfiguration]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyContext("empty batch".into()));
        }
        let parts: Vec<Result<(f64, Vec<f64>)>> =
            batch.par_iter().map(|pc| self.sample_loss_and_grad(pc).map(|(l, g)| (l, g.to_flat()))).collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        for part in parts {
            let (l, g) = part?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|x| *x *= inv);
        Ok((loss * inv, grad))
    }
}

/// All matrices i.i.d. normal with standard deviation `init_scale / √d`;
/// RMSNorm gains start at `1/√D`.
pub fn init_model(cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Model> {
    cfg.validate()?;
    let arch = cfg.arch();
    let sd = cfg.init_scale / (cfg.d as f64).sqrt();
    let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| sd * rng.normal());
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let heads = (0..cfg.heads)
            .map(|_| HeadParams {
                k: mat(arch.dim, cfg.r),
                q: mat(arch.dim, cfg.r),
                v: mat(arch.dim, cfg.r),
                o: mat(arch.dim, cfg.r),
            })
            .collect();
        let gain = cfg.rmsnorm.then(|| DVector::from_element(arch.dim, 1.0 / (arch.dim as f64).sqrt()));
        layers.push(LayerParams { heads, gain });
    }
    let pos = match cfg.positional {
        Positional::None => None,
        Positional::Additive => Some(mat(cfg.d, cfg.n_points)),
        Positional::Concatenated { d_e } => Some(mat(d_e, cfg.n_points)),
    };
    Model::new(arch, layers, pos)
}

/// One configuration: `N` i.i.d. targets on the unit sphere and, for the
/// nearest target, an independent source on the sphere.
pub fn sample_configuration(arch: &Arch, rng: &mut SeededRng) -> Result<PointConfiguration> {
    let x = sample_sphere_columns(arch.d, arch.n_points, rng)?;
    let y = match arch.target {
        TargetKind::Nearest => sample_sphere(arch.d, rng)?.into_vector(),
        TargetKind::FarthestSelfattn => DVector::zeros(arch.d),
    };
    Ok(PointConfiguration { x, y, scale: 1.0 })
}

pub fn sample_batch(arch: &Arch, size: usize, rng: &mut SeededRng) -> Result<Vec<PointConfiguration>> {
    (0..size).map(|_| sample_configuration(arch, rng)).collect()
}

/// Mean over batch and tokens of the squared error.
pub fn forward_loss(model: &Model, batch: &[PointConfiguration]) -> Result<f64> {
    forward_loss_at(model, batch, 0)
}

/// [`forward_loss`] reporting `step` if the loss is not finite.
pub fn forward_loss_at(model: &Model, batch: &[PointConfiguration], step: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyContext("empty batch".into()));
    }
    let losses: Vec<Result<f64>> = batch.par_iter().map(|pc| model.sample_loss(pc)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step });
    }
    Ok(loss)
}

/// Gradient of [`forward_loss`], shaped like the model.
pub fn backward(model: &Model, batch: &[PointConfiguration]) -> Result<Model> {
    let (_, flat) = model.loss_and_grad(batch)?;
    let mut g = model.zeros_like();
    g.set_flat(&flat)?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst_index: usize,
}

/// Floor on the denominator of the relative error, so entries whose true
/// gradient is numerically zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences on `count` random
/// parameters. Relative error is `|a − f| / max(|a|, |f|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    model: &Model,
    batch: &[PointConfiguration],
    count: usize,
    h: f64,
    rng: &mut SeededRng,
) -> Result<GradCheck> {
    let (_, analytic) = model.loss_and_grad(batch)?;
    let base = model.to_flat();
    let total = base.len();
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..count.min(total) {
        let j = i + rng.below(total - i);
        idx.swap(i, j);
    }
    idx.truncate(count.min(total));
    let mut probe = model.clone();
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: idx.len(), worst_index: 0 };
    for &i in &idx {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat(&p)?;
        let up = forward_loss(&probe, batch)?;
        p[i] = base[i] - h;
        probe.set_flat(&p)?;
        let down = forward_loss(&probe, batch)?;
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Optimizer with its moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Self { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// AdamW uses decoupled decay: `p ← p(1 − lr·wd)` before the Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adamw { beta1, beta2, weight_decay } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    params[i] *= 1.0 - lr * weight_decay;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Frobenius angle of `K Qᵀ` with the identity and its norm, per head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KqDiagnostic {
    pub layer: usize,
    pub head: usize,
    /// `None` when `K Qᵀ = 0`.
    pub angle: Option<f64>,
    pub norm: f64,
}

pub fn kq_diagnostics(model: &Model) -> Vec<KqDiagnostic> {
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (hi, h) in layer.heads.iter().enumerate() {
            out.push(kq_angle(li, hi, &(&h.k * h.q.transpose())));
        }
    }
    out
}

fn kq_angle(layer: usize, head: usize, kq: &DMatrix<f64>) -> KqDiagnostic {
    let norm = kq.norm();
    let angle = (norm > 0.0).then(|| (kq.trace() / (norm * (kq.nrows() as f64).sqrt())).clamp(-1.0, 1.0).acos());
    KqDiagnostic { layer, head, angle, norm }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub artifact_version: String,
    /// Resolved configuration including every default.
    pub config: TrainConfig,
    pub param_count: usize,
    pub attention_params_per_layer: usize,
    pub rmsnorm_gain_init: Option<f64>,
    /// Loss on a fixed monitor batch, every `log_every` steps and at the end.
    pub loss_curve: Vec<LossPoint>,
    /// Mean loss on fresh samples; absent after divergence.
    pub final_eval: Option<McEstimate>,
    /// Present only when heads are full rank (`r = D`).
    pub kq: Vec<KqDiagnostic>,
    pub diverged: Option<Divergence>,
}

/// Trains from `cfg` and returns the final model with its report.
pub fn train_model(cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let arch = cfg.arch();
    let mut model = init_model(cfg, &mut SeededRng::new(cfg.seed, 0))?;
    let monitor = sample_batch(&arch, cfg.monitor_batch, &mut SeededRng::new(cfg.seed, 1))?;
    let mut data = SeededRng::new(cfg.seed, 2);
    let mut flat = model.to_flat();
    let mut opt = Optimizer::new(cfg.optimizer, flat.len());
    let mut curve = Vec::new();
    let mut diverged = None;

    let too_big = |l: f64| !l.is_finite() || l > cfg.divergence_threshold;
    let monitor_loss = |m: &Model| -> f64 { forward_loss(m, &monitor).unwrap_or(f64::INFINITY) };

    for step in 0..cfg.steps {
        if step % cfg.log_every == 0 {
            let l = monitor_loss(&model);
            curve.push(LossPoint { step, loss: l });
            if too_big(l) {
                diverged = Some(Divergence { step, loss: l });
                break;
            }
        }
        let batch = sample_batch(&arch, cfg.batch, &mut data)?;
        let (loss, grad) = model.loss_and_grad(&batch)?;
        if too_big(loss) {
            diverged = Some(Divergence { step, loss });
            break;
        }
        opt.step(&mut flat, &grad, cfg.lr_at(step));
        model.set_flat(&flat)?;
    }
    if diverged.is_none() {
        let l = monitor_loss(&model);
        curve.push(LossPoint { step: cfg.steps, loss: l });
        if too_big(l) {
            diverged = Some(Divergence { step: cfg.steps, loss: l });
        }
    }

    let final_eval = if diverged.is_none() {
        let m = &model;
        Some(mc_mean(cfg.eval_samples, cfg.seed ^ EVAL_SALT, |rng| m.sample_loss(&sample_configuration(&arch, rng)?))?)
    } else {
        None
    };
    let kq = if cfg.r == arch.dim { kq_diagnostics(&model) } else { Vec::new() };
    let report = TrainReport {
        artifact_version: crate::ARTIFACT_VERSION.to_string(),
        config: cfg.clone(),
        param_count: model.num_params(),
        attention_params_per_layer: model.attention_params_per_layer(),
        rmsnorm_gain_init: cfg.rmsnorm.then(|| 1.0 / (arch.dim as f64).sqrt()),
        loss_curve: curve,
        final_eval,
        kq,
        diverged,
    };
    Ok((model, report))
}

pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_model(cfg)?.1)
}
