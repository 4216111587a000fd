//! Command-line front end.
//!
//! Exit codes: 0 success, 1 estimate outside its band, 2 invalid parameters
//! or input, 3 quadrature tolerance failure, 4 training divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use crate::attention::{attend, AttentionKind};
use crate::constructions::{
    biased_full_rank, full_rank_nearest, majority_two_layer_with, mode_mlp_construction, random_head_majority,
    MajorityParams,
};
use crate::geometry::{sample_orthonormal_sequence, sample_sphere, SeededRng, UnitVector};
use crate::io::{
    estimate_csv, loss_curve_csv, lower_bound_csv, spectral_csv, symmetric_grid, u_measure_csv, write_text, Csv,
    ModelDocument, RunManifest, Status,
};
use crate::montecarlo::{
    close_pair_probability, correlation_decay, edge_configuration, edge_probability, estimate_mse, hecke_funk_check,
    kernel_closed_form, kernel_mc_check, majority_accuracy, ortho_conjugation_check, psi_norm, Band, CorrelationForm,
    DistKind, DistributionSpec, GSpec, McEstimate, Omega,
};
use crate::spectral::{lower_bound, LowerBoundQuery, SpectralTable};
use crate::targets::{biased_argmax_index, nearest_neighbor, BiasVector};
use crate::trainer::{train, TrainConfig};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OUT_OF_BAND: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_QUADRATURE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Stream used for drawing fixed inputs, kept clear of the Monte Carlo chunk streams.
const SETUP_STREAM: u64 = 1 << 48;

#[derive(Parser, Debug)]
#[command(
    name = "rankheads",
    version,
    about = "Rank versus heads in attention: spectra, constructions, Monte Carlo checks and training"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ultraspherical coefficients of sign and arcsin.
    Spectra {
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 41)]
        lmax: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lower bound on the error of H rank-r heads.
    LowerBound {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        #[arg(long = "H", alias = "h")]
        h: f64,
        #[arg(long, default_value_t = 41)]
        lmax: usize,
        /// Keep negative per-degree weights instead of clamping them at zero.
        #[arg(long)]
        no_clamp: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo check of one probabilistic statement.
    Verify(VerifyArgs),
    /// Evaluate an explicit construction against its target.
    ConstructEval(ConstructArgs),
    /// Train attention from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Truncated expansion of the measure u(t) for several dimensions.
    UMeasure {
        #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
        d_list: Vec<usize>,
        #[arg(long, default_value_t = 49)]
        lmax: usize,
        /// Number of grid points on [-1, 1].
        #[arg(long, default_value_t = 201)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Lemma {
    Kernel,
    Edge,
    ClosePair,
    Majority,
    Psi,
    Ortho,
    HeckeFunk,
    Correlation,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GArg {
    Zero,
    One,
    SignW1y1,
    SignPartialDot,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    AbsProduct,
    AbsInner,
}

#[derive(clap::Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub lemma: Lemma,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, env = "RANKHEADS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Gap `<x1 - x2, y>` for the edge check.
    #[arg(long, default_value_t = 0.5)]
    pub a: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    /// Voter counts compared by the majority check.
    #[arg(long = "H", alias = "h", default_value_t = 11)]
    pub h: usize,
    #[arg(long = "H2", alias = "h2", default_value_t = 1001)]
    pub h2: usize,
    /// `||w||` for the psi check.
    #[arg(long)]
    pub w_norm: Option<f64>,
    /// Step-sum half-width for psi/correlation (defaults: 11, 2d^2+1).
    #[arg(long = "psi-a")]
    pub psi_a: Option<i64>,
    #[arg(long, default_value_t = 2)]
    pub r: usize,
    #[arg(long, default_value_t = 1)]
    pub l: usize,
    #[arg(long, value_enum, default_value = "sign-w1y1")]
    pub g: GArg,
    #[arg(long, value_enum, default_value = "abs-product")]
    pub form: FormArg,
    #[arg(long, default_value_t = 64)]
    pub inner: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConstructionArg {
    Fact1,
    Fact3,
    Majority2layer,
    Modemlp,
    Randmajority,
}

#[derive(clap::Args, Debug)]
pub struct ConstructArgs {
    #[arg(long, value_enum)]
    pub construction: ConstructionArg,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long = "N", alias = "n-points", default_value_t = 4)]
    pub n_points: usize,
    #[arg(long = "H", alias = "h", default_value_t = 101)]
    pub h: usize,
    #[arg(long, default_value_t = 1e3)]
    pub temperature: f64,
    /// Exact hardmax instead of softmax at `temperature`.
    #[arg(long)]
    pub hardmax: bool,
    #[arg(long, default_value_t = 1e3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Comma-separated per-point bias for fact3 (default zeros).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bias: Option<Vec<f64>>,
    /// MSE threshold for non-exact constructions.
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, env = "RANKHEADS_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Write the model as JSON.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Quadrature { .. } => EXIT_QUADRATURE,
            Error::NonFinite { .. } => EXIT_DIVERGED,
            _ => EXIT_INVALID,
        };
        Failure { code, message: e.to_string() }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_INVALID, message: msg.into() }
}

type CliResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start thread pool: {e}");
            return EXIT_INVALID;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(&cli.command, &mut buf));
    let _ = out.write_all(&buf);
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Spectra { d, lmax, out: path } => cmd_spectra(*d, *lmax, path.as_deref(), out),
        Command::LowerBound { d, r, h, lmax, no_clamp, out: path } => {
            cmd_lower_bound(*d, *r, *h, *lmax, *no_clamp, path.as_deref(), out)
        }
        Command::Verify(a) => cmd_verify(a, out),
        Command::ConstructEval(a) => cmd_construct_eval(a, out),
        Command::Train { config, out: dir } => cmd_train(config, dir, out),
        Command::UMeasure { d_list, lmax, grid, out: path } => {
            cmd_u_measure(d_list, *lmax, *grid, path.as_deref(), out)
        }
    }
}

fn emit(
    csv: &Csv,
    path: Option<&Path>,
    manifest: RunManifest,
    out: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    match path {
        Some(p) => {
            manifest.output(p).write(&RunManifest::path_for(p))?;
            csv.write(p)?;
        }
        None => out.write_all(csv.render().as_bytes()).map_err(|e| invalid(format!("stdout: {e}")))?,
    }
    Ok(())
}

fn cmd_spectra(d: usize, lmax: usize, path: Option<&Path>, out: &mut dyn Write) -> CliResult {
    let table = SpectralTable::build(d, lmax)?;
    let m = RunManifest::new("spectra", None).param("d", d).param("lmax", lmax);
    emit(&spectral_csv(&table), path, m, out)?;
    Ok(EXIT_OK)
}

fn cmd_lower_bound(
    d: usize,
    r: usize,
    h: f64,
    lmax: usize,
    no_clamp: bool,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    if r > d {
        return Err(invalid(format!("r = {r} exceeds d = {d}")));
    }
    let q = LowerBoundQuery { d, r, h, l_max: lmax, clamp_negative: !no_clamp };
    let table = SpectralTable::build(d, lmax)?;
    let lb = lower_bound(&table, &q)?;
    let m = RunManifest::new("lower-bound", None)
        .param("d", d)
        .param("r", r)
        .param("H", h)
        .param("lmax", lmax)
        .param("clamp_negative", !no_clamp)
        .param("value", lb.value);
    emit(&lower_bound_csv(&lb), path, m, out)?;
    if path.is_some() {
        writeln!(
            out,
            "value,tail_lower,tail_upper\n{},{},{}",
            crate::io::fmt_f64(lb.value),
            crate::io::fmt_f64(lb.tail_lower),
            crate::io::fmt_f64(lb.tail_upper)
        )
        .map_err(|e| invalid(e.to_string()))?;
    }
    Ok(EXIT_OK)
}

fn cmd_u_measure(d_list: &[usize], lmax: usize, grid: usize, path: Option<&Path>, out: &mut dyn Write) -> CliResult {
    if d_list.is_empty() {
        return Err(invalid("--d-list is empty"));
    }
    let grid_pts = symmetric_grid(grid)?;
    let tables = d_list.iter().map(|&d| SpectralTable::build(d, lmax)).collect::<crate::Result<Vec<_>>>()?;
    let csv = u_measure_csv(&tables, &grid_pts)?;
    let m = RunManifest::new("u-measure", None).param("d_list", d_list).param("lmax", lmax).param("grid", grid);
    emit(&csv, path, m, out)?;
    Ok(EXIT_OK)
}

fn random_unit(d: usize, rng: &mut SeededRng) -> std::result::Result<UnitVector, Failure> {
    Ok(sample_sphere(d, rng)?)
}

struct Checked {
    estimate: McEstimate,
    status: Status,
    band: String,
    params: BTreeMap<String, String>,
}

fn check(estimate: McEstimate, band: Band, extra_ok: bool, asserted: bool) -> (McEstimate, Status, String) {
    let status = if !asserted {
        Status::Unasserted
    } else if band.check(&estimate) && extra_ok {
        Status::Pass
    } else {
        Status::Fail
    };
    (estimate, status, band.describe())
}

fn verify(a: &VerifyArgs) -> std::result::Result<Checked, Failure> {
    let mut params = BTreeMap::new();
    let mut setup = SeededRng::new(a.seed, SETUP_STREAM);
    let (n, seed) = (a.n, a.seed);
    if n < 2 {
        return Err(invalid(format!("--n must be at least 2, got {n}")));
    }
    let (estimate, status, band) = match a.lemma {
        Lemma::Kernel => {
            let d = a.d.unwrap_or(8);
            params.insert("d".into(), d.to_string());
            let omega = Omega { q: random_unit(d, &mut setup)?, k: random_unit(d, &mut setup)? };
            let omega_p = Omega { q: random_unit(d, &mut setup)?, k: random_unit(d, &mut setup)? };
            let e = kernel_mc_check(d, &omega, &omega_p, n, seed)?;
            check(e, Band::Within(kernel_closed_form(&omega, &omega_p)), true, true)
        }
        Lemma::Edge => {
            let d = a.d.unwrap_or(32);
            params.insert("d".into(), d.to_string());
            params.insert("a".into(), a.a.to_string());
            let (x1, x2, y) = edge_configuration(d, a.a, &mut setup)?;
            let e = edge_probability(d, &x1, &x2, &y, n, seed)?;
            check(e, Band::Above(0.5), true, d >= 8)
        }
        Lemma::ClosePair => {
            let d = a.d.unwrap_or(16);
            params.insert("d".into(), d.to_string());
            params.insert("eps".into(), a.eps.to_string());
            let e = close_pair_probability(d, a.eps, n, seed)?;
            check(e, Band::NotAbove(2.0 * a.eps * (d as f64).sqrt()), true, true)
        }
        Lemma::Majority => {
            let d = a.d.unwrap_or(16);
            params.insert("d".into(), d.to_string());
            params.insert("H".into(), a.h.to_string());
            params.insert("H2".into(), a.h2.to_string());
            if a.h2 <= a.h {
                return Err(invalid("--H2 must exceed --H"));
            }
            let lo = majority_accuracy(d, a.h, n, seed)?;
            let hi = majority_accuracy(d, a.h2, n, seed.wrapping_add(1))?;
            params.insert("error_H".into(), crate::io::fmt_f64(lo.mean));
            params.insert("error_H2".into(), crate::io::fmt_f64(hi.mean));
            let diff =
                McEstimate { mean: lo.mean - hi.mean, stderr: (lo.stderr.powi(2) + hi.stderr.powi(2)).sqrt(), n, seed };
            check(diff, Band::Above(0.0), true, true)
        }
        Lemma::Psi => {
            let d = a.d.unwrap_or(8);
            let w_norm = a.w_norm.unwrap_or(d as f64);
            let pa = a.psi_a.unwrap_or(11);
            params.insert("d".into(), d.to_string());
            params.insert("w_norm".into(), w_norm.to_string());
            params.insert("a".into(), pa.to_string());
            let w = random_unit(d, &mut setup)?.into_vector() * w_norm;
            let p = psi_norm(d, &w, pa, n, seed)?;
            params.insert("precondition".into(), if p.precondition_ok { "ok" } else { "violated" }.into());
            check(p.estimate, Band::NotBelow(1.0 / 40.0), true, p.precondition_ok)
        }
        Lemma::Ortho => {
            let dim = a.d.unwrap_or(6);
            params.insert("D".into(), dim.to_string());
            let x = DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| (i + 1) as f64));
            let rep = ortho_conjugation_check(dim, &x, n, seed)?;
            params.insert("trace".into(), crate::io::fmt_f64(rep.trace));
            params.insert("trace_over_D".into(), crate::io::fmt_f64(rep.trace_over_dim));
            params.insert("max_offdiag_z".into(), crate::io::fmt_f64(rep.max_offdiag_z));
            params.insert("offdiag_z_threshold".into(), crate::io::fmt_f64(rep.offdiag_z_threshold));
            let off_ok = rep.max_offdiag_z <= rep.offdiag_z_threshold;
            check(rep.fitted_scale, Band::Within(rep.trace_over_dim), off_ok, true)
        }
        Lemma::HeckeFunk => {
            let d = a.d.unwrap_or(6);
            params.insert("d".into(), d.to_string());
            params.insert("l".into(), a.l.to_string());
            let x = random_unit(d, &mut setup)?;
            let x0 = random_unit(d, &mut setup)?;
            let hf = hecke_funk_check(d, a.l, &x, &x0, n, seed)?;
            check(hf.estimate, Band::Within(hf.expected), true, true)
        }
        Lemma::Correlation => {
            let d = a.d.unwrap_or(16);
            let pa = a.psi_a.unwrap_or(2 * (d as i64) * (d as i64) + 1);
            let g = match a.g {
                GArg::Zero => GSpec::Zero,
                GArg::One => GSpec::One,
                GArg::SignW1y1 => GSpec::SignW1Y1,
                GArg::SignPartialDot => GSpec::SignPartialDot,
            };
            let form = match a.form {
                FormArg::AbsProduct => CorrelationForm::AbsProduct,
                FormArg::AbsInner => CorrelationForm::AbsInner { inner: a.inner },
            };
            params.insert("d".into(), d.to_string());
            params.insert("r".into(), a.r.to_string());
            params.insert("a".into(), pa.to_string());
            params.insert("g".into(), format!("{:?}", g));
            params.insert("form".into(), format!("{:?}", form));
            let e = correlation_decay(d, a.r, pa, n, seed, g, form)?;
            check(e, Band::NotAbove(0.5), true, true)
        }
    };
    Ok(Checked { estimate, status, band, params })
}

fn lemma_name(l: Lemma) -> &'static str {
    match l {
        Lemma::Kernel => "kernel",
        Lemma::Edge => "edge",
        Lemma::ClosePair => "close-pair",
        Lemma::Majority => "majority",
        Lemma::Psi => "psi",
        Lemma::Ortho => "ortho",
        Lemma::HeckeFunk => "hecke-funk",
        Lemma::Correlation => "correlation",
    }
}

fn finish_estimate(
    name: &str,
    sub: &str,
    c: Checked,
    seed: u64,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult {
    let csv = estimate_csv(name, &c.params, &c.estimate, c.status, &c.band);
    let mut m = RunManifest::new(sub, Some(seed)).param("name", name).param("n", c.estimate.n);
    for (k, v) in &c.params {
        m = m.param(k, v);
    }
    if path.is_some() {
        emit(&csv, path, m, out)?;
    }
    out.write_all(csv.render().as_bytes()).map_err(|e| invalid(e.to_string()))?;
    Ok(if c.status == Status::Fail { EXIT_OUT_OF_BAND } else { EXIT_OK })
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult {
    let c = verify(a)?;
    finish_estimate(lemma_name(a.lemma), "verify", c, a.seed, a.out.as_deref(), out)
}

fn construct(a: &ConstructArgs) -> std::result::Result<(Checked, ModelDocument), Failure> {
    let (d, n, seed) = (a.d, a.n, a.seed);
    if n < 2 {
        return Err(invalid(format!("--n must be at least 2, got {n}")));
    }
    let mut params = BTreeMap::new();
    params.insert("d".into(), d.to_string());
    let kind = if a.hardmax { AttentionKind::HARDMAX } else { AttentionKind::SOFTMAX };
    let mut setup = SeededRng::new(seed, SETUP_STREAM);
    let as_col = |v: DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    let (estimate, band, doc) = match a.construction {
        ConstructionArg::Fact1 => {
            params.insert("N".into(), a.n_points.to_string());
            params.insert("temperature".into(), a.temperature.to_string());
            params.insert("hardmax".into(), a.hardmax.to_string());
            let head = full_rank_nearest(d, a.temperature)?;
            let dist = DistributionSpec::new(DistKind::SphereIid, d, a.n_points)?;
            let e = estimate_mse(
                |pc| attend(&head, &pc.x, &as_col(pc.y.clone()), kind),
                |pc| Ok(as_col(nearest_neighbor(&pc.x, &pc.y)?)),
                &dist,
                n,
                seed,
            )?;
            let band = if a.hardmax { Band::Within(0.0) } else { Band::NotAbove(a.tol) };
            (e, band, ModelDocument::from_heads("fact1", std::slice::from_ref(&head))?)
        }
        ConstructionArg::Fact3 => {
            params.insert("N".into(), a.n_points.to_string());
            let b = match &a.bias {
                Some(b) if b.len() != a.n_points => return Err(invalid("--bias needs one entry per point")),
                Some(b) => DVector::from_column_slice(b),
                None => DVector::zeros(a.n_points),
            };
            params.insert("bias".into(), format!("{:?}", b.as_slice()));
            let bias = BiasVector::new(b)?;
            let head = biased_full_rank(d, bias.clone())?;
            let dist = DistributionSpec::new(DistKind::SphereIid, d, a.n_points)?;
            let e = estimate_mse(
                |pc| Ok(as_col(head.forward(&pc.x, &pc.y, AttentionKind::HARDMAX)?)),
                |pc| {
                    let i = biased_argmax_index(&pc.x, &pc.y, &bias)?.index;
                    Ok(as_col(pc.x.column(i).into_owned()))
                },
                &dist,
                n,
                seed,
            )?;
            (e, Band::Within(0.0), ModelDocument::from_biased("fact3", &head))
        }
        ConstructionArg::Majority2layer => {
            params.insert("H".into(), a.h.to_string());
            params.insert("alpha".into(), a.alpha.to_string());
            params.insert("beta".into(), a.beta.to_string());
            params.insert("hardmax".into(), a.hardmax.to_string());
            let qs = (0..a.h)
                .map(|_| Ok(random_unit(d, &mut setup)?.into_vector()))
                .collect::<std::result::Result<Vec<_>, Failure>>()?;
            let mut p = MajorityParams::new(a.alpha, a.beta);
            p.hardmax = a.hardmax;
            let t = majority_two_layer_with(d, a.h, &qs, p)?;
            let dist = DistributionSpec::new(DistKind::OrthogonalDn, d, 2)?;
            let e = estimate_mse(
                |pc| {
                    let mut z = DMatrix::zeros(d, 3);
                    z.columns_mut(0, 2).copy_from(&pc.x);
                    z.set_column(2, &pc.y);
                    Ok(as_col(crate::attention::two_layer_forward(&t, &z)?))
                },
                |pc| Ok(as_col(nearest_neighbor(&pc.x, &pc.y)?)),
                &dist,
                n,
                seed,
            )?;
            (e, Band::NotAbove(a.tol), ModelDocument::from_two_layer("majority2layer", &t))
        }
        ConstructionArg::Modemlp => {
            params.insert("H".into(), a.h.to_string());
            params.insert("eps".into(), a.eps.to_string());
            let mlp = mode_mlp_construction(d, a.h, a.eps)?;
            let e = crate::montecarlo::mc_mean(n, seed, |rng| {
                let pair = sample_orthonormal_sequence(d, 2, rng)?;
                let (xm, xp) = (pair.column(0).into_owned(), pair.column(1).into_owned());
                let votes_plus = (0..a.h).filter(|_| rng.below(2) == 1).count();
                let votes: Vec<DVector<f64>> =
                    (0..a.h).map(|i| if i < votes_plus { xp.clone() } else { xm.clone() }).collect();
                let want = if 2 * votes_plus > a.h { &xp } else { &xm };
                let got = mlp.evaluate(&votes, &xm, &xp)?.output;
                Ok((got - want).norm_squared())
            })?;
            if a.h % 2 == 0 {
                params.insert("note".into(), "even H: ties resolve to x_minus".into());
            }
            (e, Band::Within(0.0), ModelDocument::from_mode_mlp("modemlp", &mlp))
        }
        ConstructionArg::Randmajority => {
            params.insert("H".into(), a.h.to_string());
            let voters = random_head_majority(d, a.h, &mut setup)?;
            let dist = DistributionSpec::new(DistKind::OrthogonalDn, d, 2)?;
            let e = estimate_mse(
                |pc| {
                    let mut tie = SeededRng::new(seed, SETUP_STREAM + 1);
                    let i = voters.predict(&pc.x, &pc.y, &mut tie);
                    Ok(as_col(pc.x.column(i).into_owned()))
                },
                |pc| Ok(as_col(nearest_neighbor(&pc.x, &pc.y)?)),
                &dist,
                n,
                seed,
            )?;
            (e, Band::NotAbove(a.tol), ModelDocument::from_heads("randmajority", &voters.heads()?)?)
        }
    };
    let (estimate, status, band) = check(estimate, band, true, true);
    Ok((Checked { estimate, status, band, params }, doc))
}

fn construction_name(c: ConstructionArg) -> &'static str {
    match c {
        ConstructionArg::Fact1 => "fact1",
        ConstructionArg::Fact3 => "fact3",
        ConstructionArg::Majority2layer => "majority2layer",
        ConstructionArg::Modemlp => "modemlp",
        ConstructionArg::Randmajority => "randmajority",
    }
}

fn cmd_construct_eval(a: &ConstructArgs, out: &mut dyn Write) -> CliResult {
    let (c, doc) = construct(a)?;
    if let Some(p) = &a.save_model {
        RunManifest::new("construct-eval", Some(a.seed))
            .param("construction", construction_name(a.construction))
            .output(p)
            .write(&RunManifest::path_for(p))?;
        write_text(p, &doc.to_json())?;
    }
    finish_estimate(construction_name(a.construction), "construct-eval", c, a.seed, a.out.as_deref(), out)
}

fn cmd_train(config: &Path, dir: &Path, out: &mut dyn Write) -> CliResult {
    let text =
        std::fs::read_to_string(config).map_err(|e| invalid(format!("cannot read {}: {e}", config.display())))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("config {} line {} column {}: {e}", config.display(), e.line(), e.column())))?;
    cfg.validate()?;
    let report_path = dir.join("report.json");
    let curve_path = dir.join("loss.csv");
    RunManifest::new("train", Some(cfg.seed))
        .param("config", &cfg)
        .output(&report_path)
        .output(&curve_path)
        .write(&dir.join("manifest.json"))?;
    let report = train(&cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| invalid(e.to_string()))?;
    write_text(&report_path, &(json + "\n"))?;
    loss_curve_csv(&report).write(&curve_path)?;
    match (&report.diverged, &report.final_eval) {
        (Some(dv), _) => {
            writeln!(out, "diverged at step {} (loss {:e})", dv.step, dv.loss).map_err(|e| invalid(e.to_string()))?;
            Ok(EXIT_DIVERGED)
        }
        (None, Some(e)) => {
            writeln!(out, "final_mse,stderr\n{},{}", crate::io::fmt_f64(e.mean), crate::io::fmt_f64(e.stderr))
                .map_err(|e| invalid(e.to_string()))?;
            Ok(EXIT_OK)
        }
        (None, None) => Ok(EXIT_OK),
    }
}
