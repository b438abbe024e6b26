//! Disturbance measures: the near-threshold β term, partial disturbance
//! loudness N'(n, k), and the three scalar distortion metrics RmsNoiseLoud,
//! SegmentalNMR and EHS.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Zip};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::ear_model::{BandLayout, ExcitationSequence, ModulationWeights, PowerSpectra};
use crate::error::{Error, Result};

/// Distortion metrics (model output variables) available to the mapping stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dm {
    #[serde(rename = "RmsNoiseLoud")]
    RmsNoiseLoud,
    #[serde(rename = "SegmentalNMR")]
    SegmentalNmr,
    #[serde(rename = "EHS")]
    Ehs,
}

impl Dm {
    pub const ALL: [Dm; 3] = [Dm::RmsNoiseLoud, Dm::SegmentalNmr, Dm::Ehs];

    pub fn name(self) -> &'static str {
        match self {
            Dm::RmsNoiseLoud => "RmsNoiseLoud",
            Dm::SegmentalNmr => "SegmentalNMR",
            Dm::Ehs => "EHS",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dm::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown distortion metric {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoudnessConstants {
    pub c0: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// E_0, the full-scale reference energy.
    pub e0: f64,
    /// E_th(k) = threshold_scale * internal noise of band k.
    pub threshold_scale: f64,
}

impl Default for LoudnessConstants {
    fn default() -> Self {
        Self {
            c0: 0.068,
            gamma: 0.23,
            alpha: 1.5,
            e0: 1e4,
            threshold_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Leading interval excluded from all time averages.
    pub settling_s: f64,
    pub nmr_offset_db: f64,
    /// Above this Bark value the masking offset grows by `nmr_offset_slope_db` per band.
    pub nmr_offset_break_bark: f64,
    pub nmr_offset_slope_db: f64,
    /// Lower clamp for the segmental NMR (zero noise would give -inf).
    pub nmr_floor_db: f64,
    pub ehs_max_lag: usize,
    /// Bin power added before taking logs in the EHS error spectrum.
    pub ehs_power_floor: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            settling_s: 0.5,
            nmr_offset_db: 3.0,
            nmr_offset_break_bark: 12.0,
            nmr_offset_slope_db: 0.25,
            nmr_floor_db: -100.0,
            ehs_max_lag: 256,
            ehs_power_floor: 1.0,
        }
    }
}

impl MetricsConfig {
    /// Number of leading frames inside the settling interval.
    pub fn settling_frames(&self, frame_duration: f64) -> usize {
        (self.settling_s / frame_duration).round().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialLoudnessSeries {
    pub values: Array2<f64>,
    pub beta: Array2<f64>,
}

/// Scalar distortion metrics of one REF/SUT pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MovRecord {
    pub rms_noise_loud: f64,
    pub segmental_nmr: f64,
    pub ehs: f64,
}

impl MovRecord {
    pub fn get(&self, dm: Dm) -> f64 {
        match dm {
            Dm::RmsNoiseLoud => self.rms_noise_loud,
            Dm::SegmentalNmr => self.segmental_nmr,
            Dm::Ehs => self.ehs,
        }
    }

    pub fn set(&mut self, dm: Dm, value: f64) {
        match dm {
            Dm::RmsNoiseLoud => self.rms_noise_loud = value,
            Dm::SegmentalNmr => self.segmental_nmr = value,
            Dm::Ehs => self.ehs = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhsResult {
    pub value: f64,
    pub per_frame: Array1<f64>,
    /// Frame EHS distributed over bands by band error energy (visualization only).
    pub band_series: Array2<f64>,
}

fn check_dims(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// β(n, k) = exp(-α (E_T - E_R) / E_R), with E_R floored at the internal noise.
pub fn beta_term(
    e_ref: &ExcitationSequence,
    e_test: &ExcitationSequence,
    alpha: f64,
) -> Result<Array2<f64>> {
    check_dims(&e_ref.values, &e_test.values, "beta term")?;
    if e_ref.noise_floor.len() != e_ref.bands() {
        return Err(Error::DimensionMismatch("noise floor length".into()));
    }
    let mut beta = Array2::zeros(e_ref.values.raw_dim());
    for ((n, k), out) in beta.indexed_iter_mut() {
        let er = e_ref.values[[n, k]].max(e_ref.noise_floor[k]).max(f64::MIN_POSITIVE);
        let et = e_test.values[[n, k]];
        // keep the result strictly positive
        let exponent = (-alpha * (et - er) / er).max(-700.0);
        *out = exponent.exp();
    }
    Ok(beta)
}

/// Partial disturbance loudness with the β near-threshold term.
pub fn partial_loudness(
    e_ref: &ExcitationSequence,
    e_test: &ExcitationSequence,
    s_ref: &ModulationWeights,
    s_test: &ModulationWeights,
    consts: &LoudnessConstants,
) -> Result<PartialLoudnessSeries> {
    check_dims(&e_ref.values, &s_ref.values, "reference weights")?;
    check_dims(&e_test.values, &s_test.values, "test weights")?;
    if s_ref.values.iter().chain(s_test.values.iter()).any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter("modulation weights must be positive".into()));
    }
    if !(consts.e0 > 0.0) || !(consts.threshold_scale > 0.0) {
        return Err(Error::InvalidParameter("E_0 and threshold scale must be positive".into()));
    }
    let beta = beta_term(e_ref, e_test, consts.alpha)?;
    let thresholds: Vec<f64> = e_ref
        .noise_floor
        .iter()
        .map(|f| f * consts.threshold_scale)
        .collect();

    let mut values = Array2::zeros(beta.raw_dim());
    for ((n, k), out) in values.indexed_iter_mut() {
        *out = partial_loudness_cell(
            e_ref.values[[n, k]],
            e_test.values[[n, k]],
            s_ref.values[[n, k]],
            s_test.values[[n, k]],
            beta[[n, k]],
            thresholds[k],
            consts,
        );
    }
    Ok(PartialLoudnessSeries { values, beta })
}

/// One cell of the partial loudness formula.
pub fn partial_loudness_cell(
    e_ref: f64,
    e_test: f64,
    s_ref: f64,
    s_test: f64,
    beta: f64,
    e_th: f64,
    consts: &LoudnessConstants,
) -> f64 {
    let excess = (s_test * e_test - s_ref * e_ref).max(0.0);
    if excess == 0.0 {
        return 0.0;
    }
    let scale = consts.c0 * ((1.0 / s_test) * (e_th / consts.e0)).powf(consts.gamma);
    let bracket = (1.0 + excess / (e_th + s_ref * e_ref * beta)).powf(consts.gamma) - 1.0;
    (scale * bracket).max(0.0)
}

/// RMS over frames (from `start_frame`) of the band-averaged partial loudness.
pub fn mov_rms_noise_loud(pl: &PartialLoudnessSeries, start_frame: usize) -> Result<f64> {
    let frames = pl.values.nrows();
    if start_frame >= frames {
        return Err(Error::InsufficientData {
            what: "frames after the settling interval",
            needed: start_frame + 1,
            got: frames,
        });
    }
    let bands = pl.values.ncols() as f64;
    let sum_sq: f64 = pl
        .values
        .outer_iter()
        .skip(start_frame)
        .map(|row| {
            let mean = row.sum() / bands;
            mean * mean
        })
        .sum();
    Ok((sum_sq / (frames - start_frame) as f64).sqrt())
}

/// Masking offsets in dB per band: flat below the break frequency, growing above it.
pub fn masking_offsets_db(centers_bark: &[f64], config: &MetricsConfig) -> Vec<f64> {
    let break_band = centers_bark
        .iter()
        .position(|&z| z >= config.nmr_offset_break_bark)
        .unwrap_or(centers_bark.len());
    (0..centers_bark.len())
        .map(|k| {
            if k < break_band {
                config.nmr_offset_db
            } else {
                config.nmr_offset_db + config.nmr_offset_slope_db * (k - break_band + 1) as f64
            }
        })
        .collect()
}

/// Band energies of the magnitude-difference error spectrum, |√P_T − √P_R|².
pub fn error_excitation(
    ref_spec: &PowerSpectra,
    test_spec: &PowerSpectra,
    layout: &BandLayout,
) -> Result<ExcitationSequence> {
    let error = error_power(ref_spec, test_spec)?;
    Ok(ExcitationSequence {
        values: layout.group(&error),
        band_centers: layout.centers.clone(),
        frame_duration: ref_spec.frame_duration(),
        noise_floor: layout.noise_floor.clone(),
    })
}

fn error_power(ref_spec: &PowerSpectra, test_spec: &PowerSpectra) -> Result<Array2<f64>> {
    check_dims(&ref_spec.values, &test_spec.values, "spectra")?;
    let mut error = Array2::zeros(ref_spec.values.raw_dim());
    Zip::from(&mut error)
        .and(&ref_spec.values)
        .and(&test_spec.values)
        .for_each(|e, &r, &t| {
            let d = t.sqrt() - r.sqrt();
            *e = d * d;
        });
    Ok(error)
}

/// Segmental noise-to-mask ratio in dB.
///
/// The mask is E_R attenuated by `offsets_db`; per frame the band ratios are
/// averaged, and the frame means are averaged before converting to dB.
pub fn mov_segmental_nmr(
    e_ref: &ExcitationSequence,
    error_exc: &ExcitationSequence,
    offsets_db: &[f64],
    start_frame: usize,
    floor_db: f64,
) -> Result<f64> {
    check_dims(&e_ref.values, &error_exc.values, "segmental NMR")?;
    let (frames, bands) = e_ref.values.dim();
    if frames == 0 || bands == 0 {
        return Err(Error::InsufficientData {
            what: "frames",
            needed: 1,
            got: 0,
        });
    }
    if offsets_db.len() != bands {
        return Err(Error::DimensionMismatch("masking offsets".into()));
    }
    if start_frame >= frames {
        return Err(Error::InsufficientData {
            what: "frames after the settling interval",
            needed: start_frame + 1,
            got: frames,
        });
    }
    let attenuation: Vec<f64> = offsets_db.iter().map(|o| 10f64.powf(-o / 10.0)).collect();
    let mut total = 0.0;
    for n in start_frame..frames {
        let mut frame_sum = 0.0;
        for k in 0..bands {
            let mask = (e_ref.values[[n, k]] * attenuation[k]).max(f64::MIN_POSITIVE);
            frame_sum += error_exc.values[[n, k]] / mask;
        }
        total += frame_sum / bands as f64;
    }
    let mean = total / (frames - start_frame) as f64;
    Ok((10.0 * mean.log10()).max(floor_db))
}

/// Error harmonic structure: periodicity of the log power spectrum of the
/// error signal (test minus reference).
pub fn mov_ehs(
    error_spec: &PowerSpectra,
    layout: &BandLayout,
    config: &MetricsConfig,
    start_frame: usize,
) -> Result<EhsResult> {
    let frames = error_spec.frames();
    if frames == 0 {
        return Err(Error::InsufficientData {
            what: "frames",
            needed: 1,
            got: 0,
        });
    }
    let n_bins = error_spec.values.ncols();
    let max_lag = config.ehs_max_lag.min((n_bins - 1) / 2);
    if max_lag < 8 {
        return Err(Error::InvalidParameter(format!(
            "EHS needs at least 8 lags, frame gives {max_lag}"
        )));
    }
    let analyzer = EhsAnalyzer::new(max_lag);
    let error = &error_spec.values;
    let band_error = layout.group(error);

    let floor = config.ehs_power_floor;
    let mut per_frame = Array1::zeros(frames);
    let mut log_spec = vec![0.0; 2 * max_lag];
    for n in 0..frames {
        for (i, slot) in log_spec.iter_mut().enumerate() {
            *slot = (error[[n, i + 1]] + floor).ln();
        }
        // only the shape of the log spectrum matters, not its level
        let mean = log_spec.iter().sum::<f64>() / log_spec.len() as f64;
        log_spec.iter_mut().for_each(|v| *v -= mean);
        per_frame[n] = analyzer.frame_value(&log_spec);
    }

    let mut weighted = 0.0;
    let mut weight_sum = 0.0;
    for n in start_frame.min(frames)..frames {
        let w: f64 = error.row(n).sum();
        weighted += w * per_frame[n];
        weight_sum += w;
    }
    let value = if weight_sum > 0.0 {
        weighted / weight_sum
    } else {
        0.0
    };

    let mut band_series = Array2::zeros(band_error.raw_dim());
    for (n, row) in band_error.outer_iter().enumerate() {
        let total: f64 = row.sum();
        if total > 0.0 {
            for (k, e) in row.iter().enumerate() {
                band_series[[n, k]] = per_frame[n] * e / total;
            }
        }
    }
    Ok(EhsResult {
        value,
        per_frame,
        band_series,
    })
}

/// Normalized autocorrelation followed by a windowed power spectrum.
pub struct EhsAnalyzer {
    max_lag: usize,
    window: Vec<f64>,
    normalization: f64,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl EhsAnalyzer {
    pub fn new(max_lag: usize) -> Self {
        let window: Vec<f64> = (0..max_lag)
            .map(|l| {
                0.5 * (1.0 - (2.0 * std::f64::consts::PI * l as f64 / (max_lag - 1) as f64).cos())
            })
            .collect();
        let wsum: f64 = window.iter().sum();
        // A windowed unit cosine has spectral peak (Σw / 2)^2.
        let normalization = wsum * wsum / 4.0;
        let fft = FftPlanner::new().plan_fft_forward(max_lag);
        Self {
            max_lag,
            window,
            normalization,
            fft,
        }
    }

    /// EHS of one frame from a zero-mean log spectrum over `2 * max_lag` bins.
    pub fn frame_value(&self, log_spec: &[f64]) -> f64 {
        let m = self.max_lag;
        debug_assert_eq!(log_spec.len(), 2 * m);
        let head_energy: f64 = log_spec[..m].iter().map(|d| d * d).sum();
        if head_energy == 0.0 {
            return 0.0;
        }
        let mut corr = vec![0.0; m];
        for (lag, c) in corr.iter_mut().enumerate() {
            let shifted = &log_spec[lag..lag + m];
            let cross: f64 = log_spec[..m].iter().zip(shifted).map(|(a, b)| a * b).sum();
            let shifted_energy: f64 = shifted.iter().map(|d| d * d).sum();
            let denom = (head_energy * shifted_energy).sqrt();
            *c = if denom > 0.0 { cross / denom } else { 0.0 };
        }
        let mut buf: Vec<Complex<f64>> = corr
            .iter()
            .zip(&self.window)
            .map(|(c, w)| Complex::new(c * w, 0.0))
            .collect();
        let mean = buf.iter().map(|c| c.re).sum::<f64>() / m as f64;
        for c in &mut buf {
            c.re -= mean;
        }
        self.fft.process(&mut buf);
        let power: Vec<f64> = buf[..=m / 2]
            .iter()
            .map(|c| c.norm_sqr() / self.normalization)
            .collect();

        // skip the DC lobe: start after the first local minimum
        let mut start = 1;
        while start + 1 < power.len() && power[start] > power[start + 1] {
            start += 1;
        }
        power[start..].iter().cloned().fold(0.0, f64::max)
    }
}
