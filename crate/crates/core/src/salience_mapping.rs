//! CEM–DM salience interaction analysis and the salience-gated quality mapping.
//!
//! Every DM passes through a monotone piecewise-linear basis function that maps
//! its value to a degradation in MUSHRA points. Selected CEMs gate those
//! degradations per item; the predicted Basic Audio Quality is 100 minus the
//! gated sum.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cognitive_effects::{Cem, CemSummary};
use crate::config::{PipelineConfig, TOOL_VERSION};
use crate::distortion_metrics::{Dm, MovRecord};
use crate::error::{Error, Result};
use crate::stats::{fisher_ci, nnls, pearson};

pub const MODEL_FORMAT: &str = "paqm-salience-model";
pub const MODEL_VERSION: u32 = 1;

/// Quantiles of the training DM values used as basis knots.
const KNOT_QUANTILES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item_id: String,
    pub mov: MovRecord,
    pub cem_summary: CemSummary,
    /// MUSHRA mean, 0 to 100.
    pub subjective_score: f64,
}

/// DM value at which the signal is undistorted; the basis is pinned to 0 there.
pub fn no_distortion_value(dm: Dm, config: &PipelineConfig) -> f64 {
    match dm {
        Dm::RmsNoiseLoud | Dm::Ehs => 0.0,
        Dm::SegmentalNmr => config.metrics.nmr_floor_db,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn of(r: f64) -> Sign {
        if r < 0.0 {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Positive => "+",
            Sign::Negative => "-",
        })
    }
}

impl FromStr for Sign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "+" => Ok(Sign::Positive),
            "-" => Ok(Sign::Negative),
            other => Err(Error::Config(format!("invalid sign {other:?}, expected + or -"))),
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// One selected CEM–DM pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub cem: Cem,
    pub dm: Dm,
    pub sign: Sign,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionCell {
    pub cem: Cem,
    pub dm: Dm,
    /// Items with a defined salience for this DM.
    pub n: usize,
    /// `None` when fewer than the minimum number of pairs were available.
    pub r: Option<f64>,
    pub ci95: Option<(f64, f64)>,
}

/// CEM×DM correlation matrix, CEM-major in [`Cem::ALL`] × [`Dm::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTable {
    pub cells: Vec<InteractionCell>,
    pub selected: Vec<Interaction>,
}

impl InteractionTable {
    /// Table from a plain correlation matrix (rows CEM, columns DM).
    pub fn from_matrix(r: [[f64; 3]; 3]) -> Self {
        let mut cells = Vec::with_capacity(9);
        for cem in Cem::ALL {
            for dm in Dm::ALL {
                cells.push(InteractionCell {
                    cem,
                    dm,
                    n: 0,
                    r: Some(r[cem.index()][dm.index()]),
                    ci95: None,
                });
            }
        }
        Self {
            cells,
            selected: Vec::new(),
        }
    }

    pub fn get(&self, cem: Cem, dm: Dm) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.cem == cem && c.dm == dm)
            .and_then(|c| c.r)
    }

    pub fn with_selection(mut self, threshold: f64) -> Self {
        self.selected = select_interactions(&self, threshold);
        self
    }
}

pub const MIN_CELL_PAIRS: usize = 10;

/// Per-item, per-DM salience targets; `None` marks an undefined salience.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceTargets {
    pub values: Vec<[Option<f64>; 3]>,
    /// Fitted contribution of each DM per item, in MUSHRA points.
    pub contributions: Vec<[f64; 3]>,
    pub bases: Vec<BasisFunction>,
}

/// Splits an item's target degradation into per-DM salience factors.
pub trait Attribution {
    fn attribute(&self, target: f64, contributions: &[f64; 3]) -> [f64; 3];
}

/// Scales every DM's contribution by the same factor so they sum to the target.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProportionalAttribution;

impl Attribution for ProportionalAttribution {
    fn attribute(&self, target: f64, contributions: &[f64; 3]) -> [f64; 3] {
        let total: f64 = contributions.iter().sum();
        let c = if total > 0.0 { target / total } else { f64::NAN };
        [c; 3]
    }
}

pub fn compute_salience_targets(db: &[ItemFeatures], config: &PipelineConfig) -> Result<SalienceTargets> {
    compute_salience_targets_with(db, config, &ProportionalAttribution)
}

pub fn compute_salience_targets_with(
    db: &[ItemFeatures],
    config: &PipelineConfig,
    attribution: &dyn Attribution,
) -> Result<SalienceTargets> {
    check_items(db, 20)?;
    let varying = Dm::ALL
        .iter()
        .filter(|&&dm| {
            let first = db[0].mov.get(dm);
            db.iter().any(|it| it.mov.get(dm) != first)
        })
        .count();
    if varying < 2 {
        return Err(Error::Degenerate(format!(
            "salience analysis needs at least 2 varying distortion metrics, found {varying}"
        )));
    }
    let designs = basis_designs(db, config);
    let ramp_total: usize = designs.iter().map(|d| d.columns()).sum();
    if ramp_total > db.len() {
        return Err(Error::RankDeficient(format!(
            "{ramp_total} basis increments for {} items",
            db.len()
        )));
    }
    let ones = vec![[1.0; 3]; db.len()];
    let targets: Vec<f64> = db.iter().map(|it| 100.0 - it.subjective_score).collect();
    let bases = fit_bases(&designs, &ones, &targets)?;

    let mut values = Vec::with_capacity(db.len());
    let mut contributions = Vec::with_capacity(db.len());
    for (item, target) in db.iter().zip(&targets) {
        let f: [f64; 3] = std::array::from_fn(|d| bases[d].eval(item.mov.get(Dm::ALL[d])));
        let c = attribution.attribute(*target, &f);
        let s: [Option<f64>; 3] = std::array::from_fn(|d| {
            (f[d] >= config.salience.min_contribution && c[d].is_finite()).then_some(c[d])
        });
        values.push(s);
        contributions.push(f);
    }
    Ok(SalienceTargets {
        values,
        contributions,
        bases,
    })
}

pub fn correlate_interactions(
    salience: &[[Option<f64>; 3]],
    cem_summaries: &[CemSummary],
) -> Result<InteractionTable> {
    if salience.len() != cem_summaries.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} salience rows vs {} CEM summaries",
            salience.len(),
            cem_summaries.len()
        )));
    }
    for cem in Cem::ALL {
        let col: Vec<f64> = cem_summaries.iter().map(|s| s.get(cem)).collect();
        if col.len() >= 2 && col.iter().all(|v| *v == col[0]) {
            return Err(Error::ConstantVector(format!("{cem} column is constant")));
        }
    }
    let mut cells = Vec::with_capacity(9);
    for cem in Cem::ALL {
        for dm in Dm::ALL {
            let (x, y): (Vec<f64>, Vec<f64>) = salience
                .iter()
                .zip(cem_summaries)
                .filter_map(|(s, c)| s[dm.index()].map(|v| (c.get(cem), v)))
                .unzip();
            let n = x.len();
            let r = if n >= MIN_CELL_PAIRS {
                match pearson(&x, &y) {
                    Ok(r) => Some(r),
                    Err(Error::ConstantVector(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            cells.push(InteractionCell {
                cem,
                dm,
                n,
                r,
                ci95: r.map(|r| fisher_ci(r, n)),
            });
        }
    }
    Ok(InteractionTable {
        cells,
        selected: Vec::new(),
    })
}

/// Pairs with |r| ≥ threshold, in CEM-major order.
pub fn select_interactions(table: &InteractionTable, threshold: f64) -> Vec<Interaction> {
    let mut out: Vec<Interaction> = table
        .cells
        .iter()
        .filter_map(|c| {
            let r = c.r?;
            (r.abs() >= threshold).then_some(Interaction {
                cem: c.cem,
                dm: c.dm,
                sign: Sign::of(r),
                r,
            })
        })
        .collect();
    out.sort_by_key(|i| (i.cem.index(), i.dm.index()));
    out
}

/// Monotone piecewise-linear map from a DM value to degradation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub dm: Dm,
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

impl BasisFunction {
    /// Linear interpolation between knots, clamped to the end knots outside.
    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 || x <= k[0] {
            return self.values[0];
        }
        let last = k.len() - 1;
        if x >= k[last] {
            return self.values[last];
        }
        let j = k.partition_point(|&v| v <= x).clamp(1, last);
        let t = (x - k[j - 1]) / (k[j] - k[j - 1]);
        self.values[j - 1] + t * (self.values[j] - self.values[j - 1])
    }

    fn validate(&self) -> Result<()> {
        if self.knots.is_empty() || self.knots.len() != self.values.len() {
            return Err(Error::Config(format!("{}: knots and values differ in length", self.dm)));
        }
        let finite = self.knots.iter().chain(&self.values).all(|v| v.is_finite());
        let ordered = self.knots.windows(2).all(|w| w[0] < w[1]);
        let monotone = self.values.windows(2).all(|w| w[0] <= w[1]);
        if !(finite && ordered && monotone) {
            return Err(Error::Config(format!(
                "{}: basis must have increasing knots and non-decreasing finite values",
                self.dm
            )));
        }
        Ok(())
    }
}

/// Knot layout and ramp design for one DM over a training set.
#[derive(Debug, Clone)]
struct BasisDesign {
    dm: Dm,
    knots: Vec<f64>,
    /// n × (knots − 1) ramp features.
    ramps: DMatrix<f64>,
}

impl BasisDesign {
    fn columns(&self) -> usize {
        self.knots.len() - 1
    }

    fn basis(&self, increments: &[f64]) -> BasisFunction {
        let mut values = Vec::with_capacity(self.knots.len());
        let mut acc = 0.0;
        values.push(0.0);
        for d in increments {
            acc += d;
            values.push(acc);
        }
        BasisFunction {
            dm: self.dm,
            knots: self.knots.clone(),
            values,
        }
    }
}

fn basis_designs(db: &[ItemFeatures], config: &PipelineConfig) -> Vec<BasisDesign> {
    Dm::ALL
        .iter()
        .map(|&dm| {
            let xs: Vec<f64> = db.iter().map(|it| it.mov.get(dm)).collect();
            let knots = quantile_knots(no_distortion_value(dm, config), &xs);
            let ramps = DMatrix::from_fn(xs.len(), knots.len() - 1, |i, j| {
                ((xs[i] - knots[j]) / (knots[j + 1] - knots[j])).clamp(0.0, 1.0)
            });
            BasisDesign { dm, knots, ramps }
        })
        .collect()
}

/// Basis knots: the no-distortion `anchor`, then the 0/25/50/75/100% quantiles
/// of `xs` that lie above it (near-duplicates merged).
pub fn quantile_knots(anchor: f64, xs: &[f64]) -> Vec<f64> {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let span = (sorted[sorted.len() - 1] - anchor).abs().max(1.0);
    let mut knots = vec![anchor];
    for q in KNOT_QUANTILES {
        let v = quantile(&sorted, q);
        if v > knots[knots.len() - 1] + 1e-9 * span {
            knots.push(v);
        }
    }
    knots
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares increments under fixed per-item gates.
fn fit_bases(designs: &[BasisDesign], gates: &[[f64; 3]], targets: &[f64]) -> Result<Vec<BasisFunction>> {
    let n = targets.len();
    let cols: usize = designs.iter().map(|d| d.columns()).sum();
    let mut a = DMatrix::zeros(n, cols);
    let mut offset = 0;
    for (d, design) in designs.iter().enumerate() {
        for j in 0..design.columns() {
            for i in 0..n {
                a[(i, offset + j)] = gates[i][d] * design.ramps[(i, j)];
            }
        }
        offset += design.columns();
    }
    let b = DVector::from_column_slice(targets);
    let x = nnls(&a, &b, &vec![true; cols])?;
    let mut offset = 0;
    Ok(designs
        .iter()
        .map(|design| {
            let inc: Vec<f64> = x.rows(offset, design.columns()).iter().copied().collect();
            offset += design.columns();
            design.basis(&inc)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub dm: Dm,
    pub cem: Cem,
    pub sign: Sign,
    /// Weight on the standardized CEM; its sign never opposes `sign`.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemNormalization {
    pub cem: Cem,
    pub mean: f64,
    /// Zero when the CEM was constant over the training set; z is then 0.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub n_items: usize,
    pub rounds: usize,
    /// False when the round limit was hit before the tolerance was met.
    pub converged: bool,
    pub objective_mse: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SalienceMappingModel {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub bases: Vec<BasisFunction>,
    pub gates: Vec<Gate>,
    pub cem_norm: Vec<CemNormalization>,
    pub g_max: f64,
    pub training: TrainingStats,
    pub config: BTreeMap<String, String>,
}

impl SalienceMappingModel {
    /// Gate value per DM, in [`Dm::ALL`] order.
    pub fn gate_values(&self, cem: &CemSummary) -> [f64; 3] {
        gate_values(&self.gates, &self.cem_norm, self.g_max, cem)
    }

    pub fn basis(&self, dm: Dm) -> &BasisFunction {
        &self.bases[dm.index()]
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        let format = value.get("format").and_then(|v| v.as_str());
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != Some(MODEL_FORMAT) || version != Some(MODEL_VERSION as u64) {
            return Err(Error::ModelVersion {
                found: format!(
                    "{} v{}",
                    format.unwrap_or("<none>"),
                    version.map_or("?".into(), |v| v.to_string())
                ),
                expected: format!("{MODEL_FORMAT} v{MODEL_VERSION}"),
            });
        }
        let model: Self = serde_json::from_value(value).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bases.len() != Dm::ALL.len() {
            return Err(Error::Untrained);
        }
        for (b, dm) in self.bases.iter().zip(Dm::ALL) {
            if b.dm != dm {
                return Err(Error::Config(format!("basis for {dm} out of order")));
            }
            b.validate()?;
        }
        if !(self.g_max >= 0.0 && self.g_max.is_finite()) {
            return Err(Error::Config("g_max must be non-negative".into()));
        }
        for g in &self.gates {
            if !g.lambda.is_finite() || g.lambda * g.sign.factor() < 0.0 {
                return Err(Error::Config(format!(
                    "gate {}/{} has a weight against its sign",
                    g.cem, g.dm
                )));
            }
        }
        if self.cem_norm.len() != Cem::ALL.len()
            || self.cem_norm.iter().zip(Cem::ALL).any(|(n, c)| n.cem != c)
        {
            return Err(Error::Config("cem_norm must list PS, PDEV, BVAR in order".into()));
        }
        Ok(())
    }
}

fn standardize(norm: &[CemNormalization], cem: &CemSummary) -> [f64; 3] {
    std::array::from_fn(|c| {
        let n = &norm[c];
        if n.std > 0.0 {
            (cem.get(Cem::ALL[c]) - n.mean) / n.std
        } else {
            0.0
        }
    })
}

fn gate_values(gates: &[Gate], norm: &[CemNormalization], g_max: f64, cem: &CemSummary) -> [f64; 3] {
    let z = standardize(norm, cem);
    let mut raw = [1.0; 3];
    for g in gates {
        raw[g.dm.index()] += g.lambda * z[g.cem.index()];
    }
    raw.map(|v| v.clamp(0.0, g_max))
}

fn baq(bases: &[BasisFunction], gates: [f64; 3], mov: &MovRecord) -> f64 {
    let degradation: f64 = Dm::ALL
        .iter()
        .map(|&dm| gates[dm.index()] * bases[dm.index()].eval(mov.get(dm)))
        .sum();
    (100.0 - degradation).clamp(0.0, 100.0)
}

/// Basic Audio Quality prediction on the MUSHRA scale.
pub fn predict_baq(model: &SalienceMappingModel, mov: &MovRecord, cem: &CemSummary) -> Result<f64> {
    if model.bases.len() != Dm::ALL.len() || model.cem_norm.len() != Cem::ALL.len() {
        return Err(Error::Untrained);
    }
    Ok(baq(&model.bases, model.gate_values(cem), mov))
}

fn check_items(db: &[ItemFeatures], needed: usize) -> Result<()> {
    if db.len() < needed {
        return Err(Error::InsufficientData {
            what: "items",
            needed,
            got: db.len(),
        });
    }
    for it in db {
        if !(0.0..=100.0).contains(&it.subjective_score) {
            return Err(Error::InvalidParameter(format!(
                "item {}: score {} outside [0, 100]",
                it.item_id, it.subjective_score
            )));
        }
        let finite = Dm::ALL.iter().all(|&d| it.mov.get(d).is_finite())
            && Cem::ALL.iter().all(|&c| it.cem_summary.get(c).is_finite());
        if !finite {
            return Err(Error::InvalidParameter(format!("item {}: non-finite features", it.item_id)));
        }
    }
    let first = db[0].subjective_score;
    if db.iter().all(|it| it.subjective_score == first) {
        return Err(Error::Degenerate("all subjective scores are equal".into()));
    }
    Ok(())
}

struct Trainer<'a> {
    db: &'a [ItemFeatures],
    designs: Vec<BasisDesign>,
    norm: Vec<CemNormalization>,
    z: Vec<[f64; 3]>,
    g_max: f64,
}

impl Trainer<'_> {
    fn objective(&self, bases: &[BasisFunction], gates: &[Gate]) -> f64 {
        let sse: f64 = self
            .db
            .iter()
            .map(|it| {
                let g = gate_values(gates, &self.norm, self.g_max, &it.cem_summary);
                (baq(bases, g, &it.mov) - it.subjective_score).powi(2)
            })
            .sum();
        sse / self.db.len() as f64
    }

    fn gate_matrix(&self, gates: &[Gate]) -> Vec<[f64; 3]> {
        self.db
            .iter()
            .map(|it| gate_values(gates, &self.norm, self.g_max, &it.cem_summary))
            .collect()
    }

    /// Gate weights by least squares with the bases fixed. Gates that are
    /// clamped at the current weights are held at their clamp value.
    fn fit_gates(&self, bases: &[BasisFunction], gates: &[Gate]) -> Result<Vec<Gate>> {
        let n = self.db.len();
        let f: Vec<[f64; 3]> = self
            .db
            .iter()
            .map(|it| std::array::from_fn(|d| bases[d].eval(it.mov.get(Dm::ALL[d]))))
            .collect();
        let mut raw = vec![[1.0; 3]; n];
        for (i, r) in raw.iter_mut().enumerate() {
            for g in gates {
                r[g.dm.index()] += g.lambda * self.z[i][g.cem.index()];
            }
        }
        let free = |i: usize, d: usize| raw[i][d] > 0.0 && raw[i][d] < self.g_max;
        let a = DMatrix::from_fn(n, gates.len(), |i, k| {
            let g = &gates[k];
            let d = g.dm.index();
            if free(i, d) {
                g.sign.factor() * f[i][d] * self.z[i][g.cem.index()]
            } else {
                0.0
            }
        });
        let b = DVector::from_fn(n, |i, _| {
            let fixed: f64 = (0..3)
                .map(|d| {
                    if free(i, d) {
                        f[i][d]
                    } else {
                        f[i][d] * raw[i][d].clamp(0.0, self.g_max)
                    }
                })
                .sum();
            100.0 - self.db[i].subjective_score - fixed
        });
        let mu = nnls(&a, &b, &vec![true; gates.len()])?;
        Ok(gates
            .iter()
            .zip(mu.iter())
            .map(|(g, m)| Gate {
                lambda: g.sign.factor() * m,
                ..g.clone()
            })
            .collect())
    }
}

/// Backtracks from `new` toward `old` until the objective does not increase.
fn line_search<T: Clone>(
    old: &T,
    old_obj: f64,
    new: &T,
    blend: impl Fn(&T, &T, f64) -> T,
    objective: impl Fn(&T) -> f64,
) -> (T, f64) {
    let mut alpha = 1.0;
    for _ in 0..12 {
        let cand = blend(old, new, alpha);
        let obj = objective(&cand);
        if obj <= old_obj {
            return (cand, obj);
        }
        alpha *= 0.5;
    }
    (old.clone(), old_obj)
}

fn blend_bases(old: &Vec<BasisFunction>, new: &Vec<BasisFunction>, a: f64) -> Vec<BasisFunction> {
    old.iter()
        .zip(new)
        .map(|(o, n)| BasisFunction {
            dm: o.dm,
            knots: o.knots.clone(),
            values: o
                .values
                .iter()
                .zip(&n.values)
                .map(|(x, y)| if a == 1.0 { *y } else { x + a * (y - x) })
                .collect(),
        })
        .collect()
}

fn blend_gates(old: &Vec<Gate>, new: &Vec<Gate>, a: f64) -> Vec<Gate> {
    old.iter()
        .zip(new)
        .map(|(o, n)| Gate {
            lambda: if a == 1.0 { n.lambda } else { o.lambda + a * (n.lambda - o.lambda) },
            ..o.clone()
        })
        .collect()
}

/// Alternating least squares over basis increments and gate weights.
pub fn train_mapping(
    db: &[ItemFeatures],
    selected: &[Interaction],
    config: &PipelineConfig,
) -> Result<SalienceMappingModel> {
    config.validate()?;
    check_items(db, 30)?;
    let sc = &config.salience;
    let designs = basis_designs(db, config);
    let ramp_total: usize = designs.iter().map(|d| d.columns()).sum();
    if ramp_total > db.len() {
        return Err(Error::RankDeficient(format!(
            "{ramp_total} basis increments for {} items",
            db.len()
        )));
    }
    let norm: Vec<CemNormalization> = Cem::ALL
        .iter()
        .map(|&cem| {
            let v: Vec<f64> = db.iter().map(|it| it.cem_summary.get(cem)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            CemNormalization {
                cem,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    let z: Vec<[f64; 3]> = db.iter().map(|it| standardize(&norm, &it.cem_summary)).collect();
    let trainer = Trainer {
        db,
        designs,
        norm,
        z,
        g_max: sc.g_max,
    };

    let mut selected = selected.to_vec();
    selected.sort_by_key(|i| (i.dm.index(), i.cem.index()));
    selected.dedup_by_key(|i| (i.dm, i.cem));
    let mut gates: Vec<Gate> = selected
        .iter()
        .map(|i| Gate {
            dm: i.dm,
            cem: i.cem,
            sign: i.sign,
            lambda: 0.0,
        })
        .collect();
    let targets: Vec<f64> = db.iter().map(|it| 100.0 - it.subjective_score).collect();
    let mut bases: Vec<BasisFunction> = trainer.designs.iter().map(|d| d.basis(&vec![0.0; d.columns()])).collect();
    let mut obj = trainer.objective(&bases, &gates);

    let mut rounds = 0;
    let mut converged = false;
    while rounds < sc.max_rounds {
        rounds += 1;
        let prev = obj;
        let g = trainer.gate_matrix(&gates);
        let fitted = fit_bases(&trainer.designs, &g, &targets)?;
        (bases, obj) = line_search(&bases, obj, &fitted, blend_bases, |b| trainer.objective(b, &gates));
        if !gates.is_empty() {
            let fitted = trainer.fit_gates(&bases, &gates)?;
            (gates, obj) = line_search(&gates, obj, &fitted, blend_gates, |g| trainer.objective(&bases, g));
        }
        if prev - obj <= sc.tolerance * prev.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }

    let mut model = SalienceMappingModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        tool_version: TOOL_VERSION.into(),
        bases,
        gates,
        cem_norm: trainer.norm,
        g_max: sc.g_max,
        training: TrainingStats {
            n_items: db.len(),
            rounds,
            converged,
            objective_mse: 0.0,
            rmse: 0.0,
        },
        config: config.to_key_values().into_iter().collect(),
    };
    let mse = db
        .iter()
        .map(|it| {
            let p = predict_baq(&model, &it.mov, &it.cem_summary).expect("model is trained");
            (p - it.subjective_score).powi(2)
        })
        .sum::<f64>()
        / db.len() as f64;
    model.training.objective_mse = mse;
    model.training.rmse = mse.sqrt();
    Ok(model)
}
