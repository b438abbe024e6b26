//! Listening-test manifests, cubic pre-mapping and correlation reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cognitive_effects::CemSummary;
use crate::config::{PipelineConfig, TOOL_VERSION};
use crate::distortion_metrics::MovRecord;
use crate::error::{Error, Result};
use crate::pipeline::{analyze_files, PairSummary};
use crate::salience_mapping::{predict_baq, ItemFeatures, SalienceMappingModel};
use crate::stats::{least_squares_inequality, pearson, pearson_with_ci};

pub const REPORT_FORMAT: &str = "paqm-evaluation";

const HEADER: [&str; 5] = ["item_id", "condition", "ref_path", "sut_path", "mushra_mean"];
const CI_COLUMN: &str = "mushra_ci95";
/// Points at which the pre-map derivative is checked and constrained.
const MONOTONE_GRID: usize = 201;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub item_id: String,
    pub condition: String,
    /// Resolved against the manifest directory.
    pub ref_path: PathBuf,
    pub sut_path: PathBuf,
    pub mushra_mean: f64,
    pub mushra_ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbManifest {
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl DbManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Parses manifest text; relative audio paths are joined onto `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
        let names: Vec<&str> = header.iter().collect();
        let with_ci = names.len() == 6 && names[5] == CI_COLUMN;
        if names.len() < 5 || names[..5] != HEADER || (names.len() > 5 && !with_ci) {
            return Err(perr(
                1,
                format!("header must be {}[,{CI_COLUMN}]", HEADER.join(",")),
            ));
        }
        let mut rows = Vec::new();
        let mut seen = BTreeMap::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                perr(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let number = |idx: usize, what: &str| -> Result<f64> {
                record[idx]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(line, format!("{what} {:?} is not a number", &record[idx])))
            };
            let mushra_mean = number(4, "mushra_mean")?;
            if !(0.0..=100.0).contains(&mushra_mean) {
                return Err(perr(line, format!("mushra_mean {mushra_mean} outside [0, 100]")));
            }
            let mushra_ci95 = if with_ci && !record[5].is_empty() {
                Some(number(5, "mushra_ci95")?)
            } else {
                None
            };
            let (item_id, condition) = (record[0].to_string(), record[1].to_string());
            if item_id.is_empty() || record[2].is_empty() || record[3].is_empty() {
                return Err(perr(line, "item_id, ref_path and sut_path must be non-empty".into()));
            }
            if let Some(prev) = seen.insert((item_id.clone(), condition.clone()), line) {
                return Err(perr(
                    line,
                    format!("duplicate item {item_id}/{condition} (first on line {prev})"),
                ));
            }
            rows.push(ManifestRow {
                item_id,
                condition,
                ref_path: base.join(&record[2]),
                sut_path: base.join(&record[3]),
                mushra_mean,
                mushra_ci95,
            });
        }
        Ok(Self {
            path: origin.to_path_buf(),
            rows,
        })
    }
}

/// Pipeline output for one manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAnalysis {
    pub row: ManifestRow,
    pub summary: PairSummary,
}

impl RowAnalysis {
    pub fn features(&self) -> ItemFeatures {
        ItemFeatures {
            item_id: format!("{}/{}", self.row.item_id, self.row.condition),
            mov: self.summary.mov,
            cem_summary: self.summary.cem,
            subjective_score: self.row.mushra_mean,
        }
    }
}

/// Runs the pipeline on every row in parallel; results keep manifest order and
/// the first failing row (in manifest order) is reported.
pub fn analyze_manifest(manifest: &DbManifest, config: &PipelineConfig) -> Result<Vec<RowAnalysis>> {
    config.validate()?;
    let results: Vec<Result<RowAnalysis>> = manifest
        .rows
        .par_iter()
        .enumerate()
        .map(|(idx, row)| {
            analyze_files(&row.ref_path, &row.sut_path, config)
                .map(|a| RowAnalysis {
                    row: row.clone(),
                    summary: a.summary(),
                })
                .map_err(|e| Error::Row {
                    row: idx + 1,
                    item_id: row.item_id.clone(),
                    condition: row.condition.clone(),
                    source: Box::new(e),
                })
        })
        .collect();
    results.into_iter().collect()
}

/// Third-order polynomial `p(x) = c0 + c1 x + c2 x² + c3 x³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicPremap {
    pub coeffs: [f64; 4],
    /// True when the unconstrained fit was non-monotone and was refitted.
    pub constrained: bool,
}

impl CubicPremap {
    pub fn eval(&self, x: f64) -> f64 {
        let c = &self.coeffs;
        ((c[3] * x + c[2]) * x + c[1]) * x + c[0]
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let c = &self.coeffs;
        (3.0 * c[3] * x + 2.0 * c[2]) * x + c[1]
    }
}

/// Least-squares cubic from objective to subjective scores. With `monotone`,
/// a fit that changes direction over the observed objective range is refitted
/// with its derivative constrained to the sign of the linear trend.
pub fn fit_cubic_premap(objective: &[f64], subjective: &[f64], monotone: bool) -> Result<CubicPremap> {
    if objective.len() != subjective.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} objective vs {} subjective values",
            objective.len(),
            subjective.len()
        )));
    }
    let n = objective.len();
    if n < 4 {
        return Err(Error::InsufficientData {
            what: "points for the cubic pre-map",
            needed: 4,
            got: n,
        });
    }
    let m = objective.iter().sum::<f64>() / n as f64;
    let var = objective.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    let s = var.sqrt();
    if !(s > f64::EPSILON * m.abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::ConstantVector("objective scores".into()));
    }
    let t: Vec<f64> = objective.iter().map(|x| (x - m) / s).collect();
    let a = DMatrix::from_fn(n, 4, |i, k| t[i].powi(k as i32));
    let b = DVector::from_column_slice(subjective);
    let qr = a.clone().qr();
    let r = qr.r();
    let rmax = (0..4).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..4).any(|i| r[(i, i)].abs() <= 1e-10 * rmax) {
        return Err(Error::RankDeficient(
            "cubic pre-map needs at least 4 distinct objective values".into(),
        ));
    }
    let beta = r
        .solve_upper_triangular(&(qr.q().transpose() * &b))
        .ok_or_else(|| Error::RankDeficient("singular pre-map system".into()))?;

    let (tmin, tmax) = t.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let grid: Vec<f64> = (0..MONOTONE_GRID)
        .map(|k| tmin + (tmax - tmin) * k as f64 / (MONOTONE_GRID - 1) as f64)
        .collect();
    let direction = if pearson(objective, subjective).unwrap_or(0.0) < 0.0 { -1.0 } else { 1.0 };
    let slope = |c: &DVector<f64>, x: f64| c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x;
    let scale = beta.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let monotone_ok = grid.iter().all(|&x| direction * slope(&beta, x) >= -1e-12 * scale);

    let (beta, constrained) = if monotone && !monotone_ok {
        // the derivative is quadratic, so between grid points it can only dip
        // at its vertex; such vertices join the constraint set
        let mut points = grid.clone();
        let mut fit = beta;
        for _ in 0..8 {
            let g = DMatrix::from_fn(points.len(), 4, |i, k| {
                let x = points[i];
                direction * [0.0, 1.0, 2.0 * x, 3.0 * x * x][k]
            });
            let h = DVector::zeros(points.len());
            fit = least_squares_inequality(&a, &b, &g, &h)?;
            if fit[3].abs() <= f64::MIN_POSITIVE {
                break;
            }
            let vertex = -fit[2] / (3.0 * fit[3]);
            if vertex <= tmin || vertex >= tmax || direction * slope(&fit, vertex) >= 0.0 {
                break;
            }
            points.push(vertex);
        }
        (fit, true)
    } else {
        (beta, false)
    };

    // expand q((x − m)/s) into powers of x
    let mut coeffs = [0.0; 4];
    for k in 0..4 {
        let bk = beta[k] / s.powi(k as i32);
        for j in 0..=k {
            coeffs[j] += bk * binomial(k, j) * (-m).powi((k - j) as i32);
        }
    }
    Ok(CubicPremap { coeffs, constrained })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One scored manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub condition: String,
    pub mushra: f64,
    pub baq: f64,
    pub mov: MovRecord,
    pub cem: CemSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub n_items: usize,
    pub mushra_mean: f64,
    pub baq_mean: f64,
    pub premapped_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub tool_version: String,
    /// Pearson R between pre-mapped objective and subjective scores.
    #[serde(rename = "R")]
    pub r: f64,
    pub ci95: (f64, f64),
    pub r_raw: f64,
    pub poly_coeffs: [f64; 4],
    pub premap_constrained: bool,
    pub n_items: usize,
    /// Points entering the correlation: items, or conditions when pooled.
    pub n_points: usize,
    pub pooled_by_condition: bool,
    pub rmse_premapped: f64,
    pub conditions: Vec<ConditionRow>,
    pub items: Vec<ScoredItem>,
    pub config: BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    /// Human-readable summary and per-condition table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "R = {:.4}  CI95 [{:.4}, {:.4}]  raw R = {:.4}  n = {}{}\n",
            self.r,
            self.ci95.0,
            self.ci95.1,
            self.r_raw,
            self.n_points,
            if self.pooled_by_condition { " conditions" } else { " items" }
        );
        out.push_str(&format!(
            "pre-map: {:+.6e} {:+.6e}x {:+.6e}x^2 {:+.6e}x^3{}\n",
            self.poly_coeffs[0],
            self.poly_coeffs[1],
            self.poly_coeffs[2],
            self.poly_coeffs[3],
            if self.premap_constrained { " (monotone refit)" } else { "" }
        ));
        out.push_str(&format!(
            "{:<24} {:>5} {:>8} {:>8} {:>8}\n",
            "condition", "n", "MUSHRA", "BAQ", "mapped"
        ));
        for c in &self.conditions {
            out.push_str(&format!(
                "{:<24} {:>5} {:>8.2} {:>8.2} {:>8.2}\n",
                c.condition, c.n_items, c.mushra_mean, c.baq_mean, c.premapped_mean
            ));
        }
        out
    }
}

/// Pre-map fit and correlation on already-scored items.
pub fn evaluate_scores(items: Vec<ScoredItem>, config: &PipelineConfig) -> Result<EvaluationReport> {
    let pooled = config.evaluation.pool_conditions;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        if !groups.contains_key(it.condition.as_str()) {
            order.push(it.condition.clone());
        }
        groups.entry(it.condition.as_str()).or_default().push(i);
    }
    let mean = |idx: &[usize], f: &dyn Fn(&ScoredItem) -> f64| {
        idx.iter().map(|&i| f(&items[i])).sum::<f64>() / idx.len() as f64
    };
    let (x, y): (Vec<f64>, Vec<f64>) = if pooled {
        order
            .iter()
            .map(|c| {
                let idx = &groups[c.as_str()];
                (mean(idx, &|it| it.baq), mean(idx, &|it| it.mushra))
            })
            .unzip()
    } else {
        items.iter().map(|it| (it.baq, it.mushra)).unzip()
    };
    let premap = fit_cubic_premap(&x, &y, config.evaluation.monotone_premap)?;
    let mapped: Vec<f64> = x.iter().map(|v| premap.eval(*v)).collect();
    let (r, ci95) = pearson_with_ci(&mapped, &y)?;
    let r_raw = pearson(&x, &y)?;
    let rmse = (mapped.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    let conditions = order
        .iter()
        .map(|c| {
            let idx = &groups[c.as_str()];
            ConditionRow {
                condition: c.clone(),
                n_items: idx.len(),
                mushra_mean: mean(idx, &|it| it.mushra),
                baq_mean: mean(idx, &|it| it.baq),
                premapped_mean: mean(idx, &|it| premap.eval(it.baq)),
            }
        })
        .collect();
    Ok(EvaluationReport {
        format: REPORT_FORMAT.into(),
        tool_version: TOOL_VERSION.into(),
        r,
        ci95,
        r_raw,
        poly_coeffs: premap.coeffs,
        premap_constrained: premap.constrained,
        n_items: items.len(),
        n_points: x.len(),
        pooled_by_condition: pooled,
        rmse_premapped: rmse,
        conditions,
        items,
        config: config.to_key_values().into_iter().collect(),
    })
}

/// Full pipeline over a manifest, BAQ prediction, pre-map and correlation.
pub fn evaluate_db(
    manifest: &DbManifest,
    model: &SalienceMappingModel,
    config: &PipelineConfig,
) -> Result<EvaluationReport> {
    model.validate()?;
    if manifest.rows.len() < 4 {
        return Err(Error::InsufficientData {
            what: "manifest rows for the cubic pre-map",
            needed: 4,
            got: manifest.rows.len(),
        });
    }
    let rows = analyze_manifest(manifest, config)?;
    let items = rows
        .iter()
        .map(|a| {
            Ok(ScoredItem {
                item_id: a.row.item_id.clone(),
                condition: a.row.condition.clone(),
                mushra: a.row.mushra_mean,
                baq: predict_baq(model, &a.summary.mov, &a.summary.cem)?,
                mov: a.summary.mov,
                cem: a.summary.cem,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(items, config)
}
