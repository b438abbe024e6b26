//! REF/SUT pair → internal representation → distortion and cognitive effect metrics.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio_io::{load_audio, prepare_pair, AlignedPair, AudioSignal};
use crate::cognitive_effects::{compute_cems, imps_legacy, summarize, CemSeries, CemSummary};
use crate::config::PipelineConfig;
use crate::distortion_metrics::{
    error_excitation, masking_offsets_db, mov_ehs, mov_rms_noise_loud, mov_segmental_nmr,
    partial_loudness, MovRecord, PartialLoudnessSeries,
};
use crate::ear_model::{
    compute_excitation, compute_modulation_weights, compute_spectra, BandLayout,
};
use crate::error::Result;

/// Everything measured on one aligned pair.
#[derive(Debug, Clone)]
pub struct PairAnalysis {
    pub mov: MovRecord,
    pub cem: CemSummary,
    pub partial_loudness: PartialLoudnessSeries,
    pub cems: CemSeries,
    pub ehs_band: Array2<f64>,
    /// Present when `imps.enabled` is set.
    pub imps: Option<Array2<f64>>,
    pub band_centers: Vec<f64>,
    pub frame_duration: f64,
    /// First frame after the settling interval.
    pub start_frame: usize,
    pub lag_samples: i64,
    pub gain_applied_db: f64,
}

/// Scalar outputs of [`PairAnalysis`], for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub mov: MovRecord,
    pub cem: CemSummary,
    pub frames: usize,
    pub start_frame: usize,
    pub lag_samples: i64,
    pub gain_applied_db: f64,
}

impl PairAnalysis {
    pub fn summary(&self) -> PairSummary {
        PairSummary {
            mov: self.mov,
            cem: self.cem,
            frames: self.partial_loudness.values.nrows(),
            start_frame: self.start_frame,
            lag_samples: self.lag_samples,
            gain_applied_db: self.gain_applied_db,
        }
    }
}

/// Heatmap-capable series names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    Ehs,
    Pdev,
    BetaVar,
    Ps,
    NPrime,
}

impl std::str::FromStr for SeriesKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ehs" => Ok(SeriesKind::Ehs),
            "pdev" => Ok(SeriesKind::Pdev),
            "bvar" => Ok(SeriesKind::BetaVar),
            "ps" => Ok(SeriesKind::Ps),
            "nprime" => Ok(SeriesKind::NPrime),
            other => Err(crate::error::Error::Config(format!(
                "unknown metric {other:?} (expected ehs, pdev, bvar, ps or nprime)"
            ))),
        }
    }
}

impl PairAnalysis {
    /// N×K series for a heatmap.
    pub fn series(&self, kind: SeriesKind) -> &Array2<f64> {
        match kind {
            SeriesKind::Ehs => &self.ehs_band,
            SeriesKind::Pdev => &self.cems.pdev_band,
            SeriesKind::BetaVar => &self.cems.bvar_band,
            SeriesKind::Ps => &self.cems.ps,
            SeriesKind::NPrime => &self.partial_loudness.values,
        }
    }
}

pub fn analyze_pair(pair: &AlignedPair, config: &PipelineConfig) -> Result<PairAnalysis> {
    config.validate()?;
    let ear = &config.ear;
    let ref_spec = compute_spectra(&pair.reference, ear)?;
    let test_spec = compute_spectra(&pair.test, ear)?;
    let e_ref = compute_excitation(&ref_spec, ear)?;
    let e_test = compute_excitation(&test_spec, ear)?;
    let s_ref = compute_modulation_weights(&e_ref, ear)?;
    let s_test = compute_modulation_weights(&e_test, ear)?;
    let layout = BandLayout::new(ear, pair.reference.sample_rate)?;

    let frame_duration = e_ref.frame_duration;
    let start_frame = config.metrics.settling_frames(frame_duration);

    let pl = partial_loudness(&e_ref, &e_test, &s_ref, &s_test, &config.loudness)?;
    let rms_noise_loud = mov_rms_noise_loud(&pl, start_frame)?;
    let error_exc = error_excitation(&ref_spec, &test_spec, &layout)?;
    let offsets = masking_offsets_db(&layout.centers_bark, &config.metrics);
    let segmental_nmr = mov_segmental_nmr(
        &e_ref,
        &error_exc,
        &offsets,
        start_frame,
        config.metrics.nmr_floor_db,
    )?;
    let difference: Vec<f64> = pair
        .test
        .samples
        .iter()
        .zip(&pair.reference.samples)
        .map(|(t, r)| t - r)
        .collect();
    // the difference of two full-scale signals may exceed [-1, 1], so skip the constructor checks
    let error_signal = AudioSignal {
        samples: difference,
        sample_rate: pair.reference.sample_rate,
        channel_count: 1,
    };
    let error_spec = compute_spectra(&error_signal, ear)?;
    let ehs = mov_ehs(&error_spec, &layout, &config.metrics, start_frame)?;

    let cems = compute_cems(&e_ref, &e_test, &pl.beta, &config.cem)?;
    let cem = summarize(&cems, start_frame, config.cem.pooling)?;
    let imps = if config.imps.enabled {
        Some(imps_legacy(&cems.ps, &cems.pdev, &pl, &config.imps.constants)?)
    } else {
        None
    };

    Ok(PairAnalysis {
        mov: MovRecord {
            rms_noise_loud,
            segmental_nmr,
            ehs: ehs.value,
        },
        cem,
        partial_loudness: pl,
        cems,
        ehs_band: ehs.band_series,
        imps,
        band_centers: layout.centers,
        frame_duration,
        start_frame,
        lag_samples: pair.lag_samples,
        gain_applied_db: pair.gain_applied_db,
    })
}

/// Loads, aligns and analyzes a pair of WAV files.
pub fn analyze_files(
    reference: impl AsRef<Path>,
    test: impl AsRef<Path>,
    config: &PipelineConfig,
) -> Result<PairAnalysis> {
    let r = load_audio(reference)?;
    let t = load_audio(test)?;
    let pair = prepare_pair(&r, &t, &config.align)?;
    analyze_pair(&pair, config)
}
