//! File formats: CSV tables, JSON model documents and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{Mode, SelfMaskedLayer, SoftmaxHead, TwoLayerPosTransformer};
use crate::constructions::{mode_mlp_construction, BiasedHead, ModeMlp};
use crate::montecarlo::McEstimate;
use crate::spectral::{LowerBound, SpectralTable};
use crate::targets::BiasVector;
use crate::trainer::TrainReport;
use crate::{Error, Result};

/// Version of the model document schema.
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// 17 significant digits: enough for an exact `f64` round trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// In-memory CSV table with a fixed header.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Shape(format!("row has {} fields, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::InvalidConfig(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))
}

/// Header `d,l,N,pnorm2,eta,alpha,c`; `N` is an exact integer when it fits.
pub fn spectral_csv(table: &SpectralTable) -> Csv {
    let mut csv = Csv::new(["d", "l", "N", "pnorm2", "eta", "alpha", "c"]);
    for r in &table.records {
        let n = r.n_exact.map(|n| n.to_string()).unwrap_or_else(|| fmt_f64(r.n));
        csv.rows.push(vec![
            table.d.to_string(),
            r.l.to_string(),
            n,
            fmt_f64(r.pnorm2),
            fmt_f64(r.eta),
            fmt_f64(r.alpha),
            fmt_f64(r.c),
        ]);
    }
    csv
}

/// Per-degree terms of the lower bound: `l,N,M,weight,contribution`.
pub fn lower_bound_csv(lb: &LowerBound) -> Csv {
    let mut csv = Csv::new(["l", "N", "M", "weight", "contribution"]);
    for t in &lb.terms {
        csv.rows.push(vec![t.l.to_string(), fmt_f64(t.n), fmt_f64(t.m), fmt_f64(t.weight), fmt_f64(t.contribution)]);
    }
    csv
}

/// Symmetric grid of `count` points on `[−1, 1]` with `t[count−1−k] = −t[k]` exactly.
pub fn symmetric_grid(count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidConfig("grid must contain at least one point".into()));
    }
    if count == 1 {
        return Ok(vec![0.0]);
    }
    let mut t = vec![0.0; count];
    for k in 0..count / 2 {
        let v = -1.0 + 2.0 * k as f64 / (count - 1) as f64;
        t[k] = v;
        t[count - 1 - k] = -v;
    }
    Ok(t)
}

/// Columns `angle,t,u_d<d>...` with `angle = arccos t`.
pub fn u_measure_csv(tables: &[SpectralTable], grid: &[f64]) -> Result<Csv> {
    let mut header = vec!["angle".to_string(), "t".to_string()];
    header.extend(tables.iter().map(|t| format!("u_d{}", t.d)));
    let mut csv = Csv::new(header);
    for &t in grid {
        let mut row = vec![fmt_f64(t.acos()), fmt_f64(t)];
        for table in tables {
            row.push(fmt_f64(table.u_measure(t)?));
        }
        csv.push(row)?;
    }
    Ok(csv)
}

/// Outcome of an estimate checked against a band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Preconditions did not hold; the band is not asserted.
    Unasserted,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Unasserted => "unasserted",
        }
    }
}

/// One-row estimate table: `name,params,mean,stderr,n,seed,status,band`.
/// `params` is `key=value` pairs joined by `;`.
pub fn estimate_csv(name: &str, params: &BTreeMap<String, String>, e: &McEstimate, status: Status, band: &str) -> Csv {
    let p = params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
    let mut csv = Csv::new(["name", "params", "mean", "stderr", "n", "seed", "status", "band"]);
    csv.rows.push(vec![
        name.to_string(),
        p,
        fmt_f64(e.mean),
        fmt_f64(e.stderr),
        e.n.to_string(),
        e.seed.to_string(),
        status.as_str().to_string(),
        band.to_string(),
    ]);
    csv
}

/// `step,loss` rows of a training run.
pub fn loss_curve_csv(report: &TrainReport) -> Csv {
    let mut csv = Csv::new(["step", "loss"]);
    for p in &report.loss_curve {
        csv.rows.push(vec![p.step.to_string(), fmt_f64(p.loss)]);
    }
    csv
}

/// Dense matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixDoc {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter());
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixDoc {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape(format!("matrix {}x{} has {} entries", self.rows, self.cols, self.data.len())));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDoc {
    pub k: MatrixDoc,
    pub q: MatrixDoc,
    pub v: MatrixDoc,
    pub o: MatrixDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedHeadDoc {
    pub m: MatrixDoc,
    pub v: MatrixDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedLayerDoc {
    pub mode: Mode,
    pub heads: Vec<MaskedHeadDoc>,
}

/// Serialized model. `construction` records which factory produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDocument {
    Multihead {
        schema_version: u32,
        construction: String,
        d: usize,
        r: usize,
        #[serde(rename = "H")]
        h: usize,
        temperature: f64,
        heads: Vec<HeadDoc>,
    },
    Biased {
        schema_version: u32,
        construction: String,
        d: usize,
        temperature: f64,
        head: HeadDoc,
        b: Vec<f64>,
    },
    TwoLayerPos {
        schema_version: u32,
        construction: String,
        d: usize,
        e: MatrixDoc,
        layer1: MaskedLayerDoc,
        layer2: MaskedLayerDoc,
        a: MatrixDoc,
    },
    /// Stored by its factory parameters; weights are rebuilt on load.
    ModeMlp {
        schema_version: u32,
        construction: String,
        d: usize,
        #[serde(rename = "H")]
        h: usize,
        eps: f64,
        knots: usize,
        widths: Vec<usize>,
    },
}

fn head_doc(h: &SoftmaxHead) -> HeadDoc {
    HeadDoc { k: (&h.k).into(), q: (&h.q).into(), v: (&h.v).into(), o: (&h.o).into() }
}

fn head_from_doc(h: &HeadDoc, temperature: f64) -> Result<SoftmaxHead> {
    SoftmaxHead::new(h.k.to_matrix()?, h.q.to_matrix()?, h.v.to_matrix()?, h.o.to_matrix()?, temperature)
}

fn masked_doc(l: &SelfMaskedLayer) -> MaskedLayerDoc {
    MaskedLayerDoc {
        mode: l.mode,
        heads: l.heads.iter().map(|(m, v)| MaskedHeadDoc { m: m.into(), v: v.into() }).collect(),
    }
}

fn masked_from_doc(l: &MaskedLayerDoc, dim: usize) -> Result<SelfMaskedLayer> {
    let heads = l.heads.iter().map(|h| Ok((h.m.to_matrix()?, h.v.to_matrix()?))).collect::<Result<Vec<_>>>()?;
    Ok(SelfMaskedLayer::new(dim, heads)?.with_mode(l.mode))
}

impl ModelDocument {
    /// Heads must share `d`, `r` and temperature.
    pub fn from_heads(construction: &str, heads: &[SoftmaxHead]) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::EmptyContext("no heads to serialize".into()))?;
        if heads.iter().any(|h| h.d() != first.d() || h.r() != first.r() || h.temperature != first.temperature) {
            return Err(Error::Shape("heads differ in d, r or temperature".into()));
        }
        Ok(Self::Multihead {
            schema_version: MODEL_SCHEMA_VERSION,
            construction: construction.into(),
            d: first.d(),
            r: first.r(),
            h: heads.len(),
            temperature: first.temperature,
            heads: heads.iter().map(head_doc).collect(),
        })
    }

    pub fn from_biased(construction: &str, b: &BiasedHead) -> Self {
        Self::Biased {
            schema_version: MODEL_SCHEMA_VERSION,
            construction: construction.into(),
            d: b.base.d(),
            temperature: b.base.temperature,
            head: head_doc(&b.base),
            b: b.b.as_vector().iter().copied().collect(),
        }
    }

    pub fn from_two_layer(construction: &str, t: &TwoLayerPosTransformer) -> Self {
        Self::TwoLayerPos {
            schema_version: MODEL_SCHEMA_VERSION,
            construction: construction.into(),
            d: t.d(),
            e: (&t.e).into(),
            layer1: masked_doc(&t.t1),
            layer2: masked_doc(&t.t2),
            a: (&t.a).into(),
        }
    }

    pub fn from_mode_mlp(construction: &str, m: &ModeMlp) -> Self {
        Self::ModeMlp {
            schema_version: MODEL_SCHEMA_VERSION,
            construction: construction.into(),
            d: m.d,
            h: m.h,
            eps: m.eps,
            knots: m.knots,
            widths: m.widths(),
        }
    }

    fn schema_version(&self) -> u32 {
        match self {
            Self::Multihead { schema_version, .. }
            | Self::Biased { schema_version, .. }
            | Self::TwoLayerPos { schema_version, .. }
            | Self::ModeMlp { schema_version, .. } => *schema_version,
        }
    }

    fn check_version(&self) -> Result<()> {
        if self.schema_version() != MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported model schema version {}", self.schema_version())));
        }
        Ok(())
    }

    pub fn to_heads(&self) -> Result<Vec<SoftmaxHead>> {
        self.check_version()?;
        match self {
            Self::Multihead { heads, temperature, h, .. } => {
                if heads.len() != *h {
                    return Err(Error::Shape(format!("H = {h} but {} heads stored", heads.len())));
                }
                heads.iter().map(|hd| head_from_doc(hd, *temperature)).collect()
            }
            _ => Err(Error::InvalidConfig("document is not a multihead model".into())),
        }
    }

    pub fn to_biased(&self) -> Result<BiasedHead> {
        self.check_version()?;
        match self {
            Self::Biased { head, temperature, b, .. } => Ok(BiasedHead {
                base: head_from_doc(head, *temperature)?,
                b: BiasVector::new(nalgebra::DVector::from_column_slice(b))?,
            }),
            _ => Err(Error::InvalidConfig("document is not a biased head".into())),
        }
    }

    pub fn to_two_layer(&self) -> Result<TwoLayerPosTransformer> {
        self.check_version()?;
        match self {
            Self::TwoLayerPos { e, layer1, layer2, a, .. } => {
                let a = a.to_matrix()?;
                let dim = a.ncols();
                TwoLayerPosTransformer::new(
                    e.to_matrix()?,
                    masked_from_doc(layer1, dim)?,
                    masked_from_doc(layer2, dim)?,
                    a,
                )
            }
            _ => Err(Error::InvalidConfig("document is not a two-layer transformer".into())),
        }
    }

    pub fn to_mode_mlp(&self) -> Result<ModeMlp> {
        self.check_version()?;
        match self {
            Self::ModeMlp { d, h, eps, .. } => mode_mlp_construction(*d, *h, *eps),
            _ => Err(Error::InvalidConfig("document is not a mode network".into())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model documents contain only serializable data")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::InvalidConfig(format!("model JSON at line {} column {}: {e}", e.line(), e.column())))
    }
}

/// Record of one CLI invocation, written before any other output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub artifact_version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: Option<u64>) -> Self {
        Self {
            subcommand: subcommand.into(),
            parameters: BTreeMap::new(),
            seed,
            outputs: Vec::new(),
            artifact_version: crate::ARTIFACT_VERSION.into(),
        }
    }

    pub fn param(mut self, key: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.into(), v);
        self
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    /// Manifest path for a single-file output: `<file>.manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        write_text(path, &(text + "\n"))
    }
}
