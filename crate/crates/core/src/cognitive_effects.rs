//! Cognitive effect metrics: perceptual streaming (PS), power-deviation
//! informational masking (PDEV), near-threshold variance informational
//! masking (β-VAR), and the legacy IMPS-weighted disturbance loudness.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::distortion_metrics::PartialLoudnessSeries;
use crate::ear_model::ExcitationSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cem {
    #[serde(rename = "PS")]
    Ps,
    #[serde(rename = "PDEV")]
    Pdev,
    #[serde(rename = "BVAR")]
    BetaVar,
}

impl Cem {
    pub const ALL: [Cem; 3] = [Cem::Ps, Cem::Pdev, Cem::BetaVar];

    pub fn name(self) -> &'static str {
        match self {
            Cem::Ps => "PS",
            Cem::Pdev => "PDEV",
            Cem::BetaVar => "BVAR",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Cem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("beta-var") || s.eq_ignore_ascii_case("β-VAR") {
            return Ok(Cem::BetaVar);
        }
        Cem::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown cognitive effect metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub pdev_window_s: f64,
    /// Lower bound on the PDEV window length in frames.
    pub pdev_min_frames: usize,
    pub bvar_window_s: f64,
    pub pooling: Pooling,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            pdev_window_s: 0.02,
            pdev_min_frames: 2,
            bvar_window_s: 0.1,
            pooling: Pooling::Mean,
        }
    }
}

impl CemConfig {
    pub fn pdev_window_frames(&self, frame_duration: f64) -> usize {
        ((self.pdev_window_s / frame_duration).round() as usize).max(self.pdev_min_frames.max(1))
    }

    pub fn bvar_window_frames(&self, frame_duration: f64) -> usize {
        ((self.bvar_window_s / frame_duration).round() as usize).max(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpsConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for ImpsConstants {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            c: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemSeries {
    pub ps: Array2<f64>,
    pub pdev_band: Array2<f64>,
    pub pdev: Array1<f64>,
    pub bvar_band: Array2<f64>,
    pub bvar: Array1<f64>,
}

/// Per-item pooled CEM values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CemSummary {
    pub ps: f64,
    pub pdev: f64,
    pub bvar: f64,
}

impl CemSummary {
    pub fn get(&self, cem: Cem) -> f64 {
        match cem {
            Cem::Ps => self.ps,
            Cem::Pdev => self.pdev,
            Cem::BetaVar => self.bvar,
        }
    }

    pub fn set(&mut self, cem: Cem, value: f64) {
        match cem {
            Cem::Ps => self.ps = value,
            Cem::Pdev => self.pdev = value,
            Cem::BetaVar => self.bvar = value,
        }
    }
}

/// Inclusive bounds of the centered window of `width` frames around `n`, clipped to `0..len`.
pub fn centered_window(n: usize, width: usize, len: usize) -> (usize, usize) {
    let back = (width - 1) / 2;
    let forward = width - 1 - back;
    (n.saturating_sub(back), (n + forward).min(len - 1))
}

/// PS(n, k) = ½ PS0(n, k) + ½ PS0(n−1, k), PS0 = (E_T + 1) / (E_R + 1).
pub fn ps_streaming(e_ref: &ExcitationSequence, e_test: &ExcitationSequence) -> Result<Array2<f64>> {
    if e_ref.values.dim() != e_test.values.dim() {
        return Err(Error::DimensionMismatch(format!(
            "PS: {:?} vs {:?}",
            e_ref.values.dim(),
            e_test.values.dim()
        )));
    }
    let (frames, bands) = e_ref.values.dim();
    if frames == 0 {
        return Err(Error::InsufficientData {
            what: "frames",
            needed: 1,
            got: 0,
        });
    }
    let ps0 = Array2::from_shape_fn((frames, bands), |(n, k)| {
        (e_test.values[[n, k]] + 1.0) / (e_ref.values[[n, k]] + 1.0)
    });
    Ok(Array2::from_shape_fn((frames, bands), |(n, k)| {
        if n == 0 {
            ps0[[0, k]]
        } else {
            0.5 * ps0[[n, k]] + 0.5 * ps0[[n - 1, k]]
        }
    }))
}

/// Deviation of E_R from its centered moving mean over `window` frames.
pub fn pdev(e_ref: &ExcitationSequence, window: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let (frames, bands) = e_ref.values.dim();
    if frames == 0 || bands == 0 {
        return Err(Error::InsufficientData {
            what: "frames",
            needed: 1,
            got: frames,
        });
    }
    let window = window.max(1);
    let mut band = Array2::zeros((frames, bands));
    for k in 0..bands {
        let col = e_ref.values.column(k);
        for n in 0..frames {
            let (lo, hi) = centered_window(n, window, frames);
            let here = col[n];
            // Σ(E_j − E_n) / count is exactly zero on constant input.
            let offset: f64 = (lo..=hi).map(|j| col[j] - here).sum();
            band[[n, k]] = (offset / (hi - lo + 1) as f64).abs();
        }
    }
    let mean = band.rows().into_iter().map(|r| r.sum() / bands as f64).collect();
    Ok((band, mean))
}

/// Per-band centered moving sample variance of β (divisor count − 1), and its band mean.
pub fn beta_var(beta: &Array2<f64>, frame_duration: f64, window_s: f64) -> Result<(Array2<f64>, Array1<f64>)> {
    let window = ((window_s / frame_duration).round() as usize).max(2);
    beta_var_frames(beta, window)
}

/// Same as [`beta_var`] with the window given in frames.
pub fn beta_var_frames(beta: &Array2<f64>, window: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let (frames, bands) = beta.dim();
    if frames < 2 {
        return Err(Error::InsufficientData {
            what: "frames for the moving variance",
            needed: 2,
            got: frames,
        });
    }
    if window < 2 {
        return Err(Error::InvalidParameter("variance window must span 2 frames".into()));
    }
    let mut out = Array2::zeros((frames, bands));
    for k in 0..bands {
        let col: Vec<f64> = beta.column(k).to_vec();
        let mut mv = MovingVariance::new(&col);
        for n in 0..frames {
            let (lo, hi) = centered_window(n, window, frames);
            out[[n, k]] = mv.variance(lo, hi);
        }
    }
    let mean = out.rows().into_iter().map(|r| r.sum() / bands as f64).collect();
    Ok((out, mean))
}

/// Sliding-window variance over a series whose window bounds only move forward.
///
/// Running sums of x and x² are kept in double-double precision, so the
/// usual cancellation in Σx² − (Σx)²/n stays far below f64 resolution.
/// Windows whose values are all identical are detected exactly and yield 0.
struct MovingVariance<'a> {
    data: &'a [f64],
    lo: usize,
    hi: usize,
    sum: DoubleDouble,
    sum_sq: DoubleDouble,
    /// Number of i in (lo, hi] with data[i] != data[i - 1].
    changes: usize,
}

impl<'a> MovingVariance<'a> {
    fn new(data: &'a [f64]) -> Self {
        Self {
            data,
            lo: 0,
            hi: 0,
            sum: DoubleDouble::from(data[0]),
            sum_sq: DoubleDouble::square(data[0]),
            changes: 0,
        }
    }

    fn variance(&mut self, lo: usize, hi: usize) -> f64 {
        debug_assert!(lo >= self.lo && hi >= self.hi && lo <= hi);
        while self.hi < hi {
            self.hi += 1;
            let x = self.data[self.hi];
            self.sum = self.sum.add(DoubleDouble::from(x));
            self.sum_sq = self.sum_sq.add(DoubleDouble::square(x));
            if x != self.data[self.hi - 1] {
                self.changes += 1;
            }
        }
        while self.lo < lo {
            let x = self.data[self.lo];
            self.sum = self.sum.add(DoubleDouble::from(-x));
            self.sum_sq = self.sum_sq.add(DoubleDouble::square(x).neg());
            if self.data[self.lo + 1] != x {
                self.changes -= 1;
            }
            self.lo += 1;
        }
        let count = hi - lo + 1;
        if count < 2 || self.changes == 0 {
            return 0.0;
        }
        let n = count as f64;
        let centered = self.sum_sq.add(self.sum.mul(self.sum).div(n).neg());
        (centered.div(n - 1.0).to_f64()).max(0.0)
    }
}

/// Unevaluated sum of two f64 (about 106 bits of mantissa).
#[derive(Debug, Default, Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }
}

impl DoubleDouble {
    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        Self {
            hi: s,
            lo: (a - (s - bb)) + (b - bb),
        }
    }

    fn quick(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self {
            hi: s,
            lo: lo - (s - hi),
        }
    }

    fn square(x: f64) -> Self {
        let p = x * x;
        Self {
            hi: p,
            lo: x.mul_add(x, -p),
        }
    }

    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn add(self, other: Self) -> Self {
        let s = Self::two_sum(self.hi, other.hi);
        let t = Self::two_sum(self.lo, other.lo);
        let s = Self::quick(s.hi, s.lo + t.hi);
        Self::quick(s.hi, s.lo + t.lo)
    }

    fn mul(self, other: Self) -> Self {
        let p = self.hi * other.hi;
        let e = self.hi.mul_add(other.hi, -p) + (self.hi * other.lo + self.lo * other.hi);
        Self::quick(p, e)
    }

    fn div(self, d: f64) -> Self {
        let q1 = self.hi / d;
        let p = q1 * d;
        let perr = q1.mul_add(d, -p);
        let r = (self.hi - p - perr + self.lo) / d;
        Self::quick(q1, r)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// N'_IMPS(n, k) = C · PS(n, k)^a · N'(n, k) / (PDEV(n)^b + C).
pub fn imps_legacy(
    ps: &Array2<f64>,
    pdev: &Array1<f64>,
    noise_loud: &PartialLoudnessSeries,
    consts: &ImpsConstants,
) -> Result<Array2<f64>> {
    if !(consts.c > 0.0) {
        return Err(Error::InvalidParameter(format!("IMPS constant C = {} must be > 0", consts.c)));
    }
    if ps.dim() != noise_loud.values.dim() || pdev.len() != ps.nrows() {
        return Err(Error::DimensionMismatch("IMPS inputs".into()));
    }
    Ok(Array2::from_shape_fn(ps.dim(), |(n, k)| {
        consts.c * ps[[n, k]].powf(consts.a) * noise_loud.values[[n, k]]
            / (pdev[n].powf(consts.b) + consts.c)
    }))
}

/// Pools a per-frame series from `start_frame` on.
pub fn pool(series: &[f64], start_frame: usize, pooling: Pooling) -> Result<f64> {
    if start_frame >= series.len() {
        return Err(Error::InsufficientData {
            what: "frames after the settling interval",
            needed: start_frame + 1,
            got: series.len(),
        });
    }
    let active = &series[start_frame..];
    Ok(match pooling {
        Pooling::Mean => active.iter().sum::<f64>() / active.len() as f64,
        Pooling::Median => {
            let mut sorted = active.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mid = sorted.len() / 2;
            if sorted.len() % 2 == 0 {
                0.5 * (sorted[mid - 1] + sorted[mid])
            } else {
                sorted[mid]
            }
        }
    })
}

/// All CEM series for one pair.
pub fn compute_cems(
    e_ref: &ExcitationSequence,
    e_test: &ExcitationSequence,
    beta: &Array2<f64>,
    config: &CemConfig,
) -> Result<CemSeries> {
    let ps = ps_streaming(e_ref, e_test)?;
    let (pdev_band, pdev_mean) = pdev(e_ref, config.pdev_window_frames(e_ref.frame_duration))?;
    let (bvar_band, bvar) = beta_var_frames(beta, config.bvar_window_frames(e_ref.frame_duration))?;
    Ok(CemSeries {
        ps,
        pdev_band,
        pdev: pdev_mean,
        bvar_band,
        bvar,
    })
}

pub fn summarize(series: &CemSeries, start_frame: usize, pooling: Pooling) -> Result<CemSummary> {
    let bands = series.ps.ncols() as f64;
    let ps_frames: Vec<f64> = series.ps.rows().into_iter().map(|r| r.sum() / bands).collect();
    Ok(CemSummary {
        ps: pool(&ps_frames, start_frame, pooling)?,
        pdev: pool(&series.pdev.to_vec(), start_frame, pooling)?,
        bvar: pool(&series.bvar.to_vec(), start_frame, pooling)?,
    })
}
