//! Synthetic test signals and a synthetic listening-test database whose scores
//! come from a known salience-gated forward model.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_io::{write_wav16, AudioSignal};
use crate::cognitive_effects::Cem;
use crate::config::{PipelineConfig, TOOL_VERSION};
use crate::distortion_metrics::Dm;
use crate::error::{Error, Result};
use crate::evaluation::ManifestRow;
use crate::pipeline::{analyze_files, PairSummary};
use crate::salience_mapping::{
    no_distortion_value, predict_baq, quantile_knots, BasisFunction, CemNormalization, Gate,
    SalienceMappingModel, Sign, TrainingStats, MODEL_FORMAT, MODEL_VERSION,
};

pub const RATE: u32 = 48_000;

fn signal(samples: Vec<f64>, sample_rate: u32) -> AudioSignal {
    AudioSignal::new(samples, sample_rate).expect("synthetic samples stay within full scale")
}

pub fn sine(sample_rate: u32, seconds: f64, freq: f64, amp: f64) -> AudioSignal {
    let n = (seconds * sample_rate as f64).round() as usize;
    let w = 2.0 * PI * freq / sample_rate as f64;
    signal((0..n).map(|i| amp * (w * i as f64).sin()).collect(), sample_rate)
}

/// Sinusoidally amplitude-modulated tone.
pub fn am_tone(sample_rate: u32, seconds: f64, carrier: f64, rate: f64, depth: f64, amp: f64) -> AudioSignal {
    let n = (seconds * sample_rate as f64).round() as usize;
    let fs = sample_rate as f64;
    let peak = amp / (1.0 + depth);
    signal(
        (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                peak * (1.0 + depth * (2.0 * PI * rate * t).sin()) * (2.0 * PI * carrier * t).sin()
            })
            .collect(),
        sample_rate,
    )
}

/// Harmonic complex: partials of `f0` up to `max_freq` with 1/k^0.7 amplitudes
/// and random phases, scaled to `peak`.
#[derive(Debug, Clone)]
pub struct HarmonicTone {
    pub f0: f64,
    pub amps: Vec<f64>,
    pub phases: Vec<f64>,
}

impl HarmonicTone {
    pub fn new(f0: f64, max_freq: f64, rng: &mut impl Rng) -> Self {
        let count = (max_freq / f0).floor().max(1.0) as usize;
        let amps = (1..=count).map(|k| (k as f64).powf(-0.7)).collect();
        let phases = (0..count).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Self { f0, amps, phases }
    }

    pub fn freq(&self, k: usize) -> f64 {
        self.f0 * (k + 1) as f64
    }

    /// Renders the tone with a per-partial time-varying gain.
    pub fn render(&self, sample_rate: u32, n: usize, gain: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let fs = sample_rate as f64;
        let mut out = vec![0.0; n];
        for k in 0..self.amps.len() {
            let w = 2.0 * PI * self.freq(k) / fs;
            let (step_s, step_c) = w.sin_cos();
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for (i, o) in out.iter_mut().enumerate() {
                // exact restart every 1024 samples keeps the rotation from drifting
                if i % 1024 == 0 {
                    (s, c) = (w * i as f64 + self.phases[k]).sin_cos();
                }
                *o += self.amps[k] * gain(k, i) * s;
                (s, c) = (s * step_c + c * step_s, c * step_c - s * step_s);
            }
        }
        out
    }
}

/// Random gain trajectory linearly interpolated between breakpoints every `step` samples, values in [−1, 1].
fn smooth_random(n: usize, step: usize, rng: &mut impl Rng) -> Vec<f64> {
    let points: Vec<f64> = (0..n / step + 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|i| {
            let j = i / step;
            let t = (i % step) as f64 / step as f64;
            points[j] + t * (points[j + 1] - points[j])
        })
        .collect()
}

fn scale_peak(samples: &mut [f64], peak: f64) -> f64 {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if max > 0.0 { peak / max } else { 1.0 };
    samples.iter_mut().for_each(|v| *v *= g);
    g
}

/// Tonal reference and a copy whose partials above `cutoff_hz` carry small
/// random gain modulations, as left behind by parametric high-band coding.
pub fn bandwidth_extension_pair(
    sample_rate: u32,
    seconds: f64,
    f0: f64,
    cutoff_hz: f64,
    depth: f64,
    seed: u64,
) -> (AudioSignal, AudioSignal) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let tone = HarmonicTone::new(f0, 16_000.0, &mut rng);
    let step = (0.02 * sample_rate as f64) as usize;
    let mods: Vec<Vec<f64>> = (0..tone.amps.len())
        .map(|k| {
            if tone.freq(k) >= cutoff_hz {
                smooth_random(n, step, &mut rng)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut reference = tone.render(sample_rate, n, |_, _| 1.0);
    let mut test = tone.render(sample_rate, n, |k, i| {
        if mods[k].is_empty() {
            1.0
        } else {
            1.0 + depth * mods[k][i]
        }
    });
    let g = scale_peak(&mut reference, 0.5);
    test.iter_mut().for_each(|v| *v *= g);
    (signal(reference, sample_rate), signal(test, sample_rate))
}

/// `reference` plus white noise whose energy equals `error_energy` (sum of squares).
pub fn white_noise_pair(reference: &AudioSignal, error_energy: f64, seed: u64) -> (AudioSignal, AudioSignal) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut noise: Vec<f64> = (0..reference.len()).map(|_| normal.sample(&mut rng)).collect();
    let e: f64 = noise.iter().map(|v| v * v).sum();
    let g = (error_energy / e).sqrt();
    noise.iter_mut().for_each(|v| *v *= g);
    let test: Vec<f64> = reference.samples.iter().zip(&noise).map(|(a, b)| a + b).collect();
    (reference.clone(), signal(test, reference.sample_rate))
}

pub fn error_energy(reference: &AudioSignal, test: &AudioSignal) -> f64 {
    reference
        .samples
        .iter()
        .zip(&test.samples)
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Degradation knobs of one synthetic item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemKnobs {
    pub f0: f64,
    /// Partials above this frequency carry a static gain error.
    pub comb_cutoff_hz: f64,
    /// Static relative gain error above `comb_cutoff_hz`.
    pub harmonic_gain: f64,
    /// Depth of random gain modulation on partials above 8 kHz.
    pub modulation_depth: f64,
    /// Additive white noise level in dB relative to the reference RMS.
    pub noise_db: f64,
}

impl ItemKnobs {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            f0: rng.gen_range(150.0..350.0),
            comb_cutoff_hz: rng.gen_range(1_500.0..9_000.0),
            harmonic_gain: rng.gen_range(0.05..0.3),
            modulation_depth: rng.gen_range(0.0..0.5),
            noise_db: rng.gen_range(-75.0..-45.0),
        }
    }
}

pub fn render_item(knobs: &ItemKnobs, sample_rate: u32, seconds: f64, seed: u64) -> (AudioSignal, AudioSignal) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let tone = HarmonicTone::new(knobs.f0, 16_000.0, &mut rng);
    let step = (0.02 * sample_rate as f64) as usize;
    let mods: Vec<Vec<f64>> = (0..tone.amps.len())
        .map(|k| {
            if tone.freq(k) >= 8_000.0 {
                smooth_random(n, step, &mut rng)
            } else {
                Vec::new()
            }
        })
        .collect();
    let mut reference = tone.render(sample_rate, n, |_, _| 1.0);
    let mut test = tone.render(sample_rate, n, |k, i| {
        let mut g = 1.0;
        if tone.freq(k) >= knobs.comb_cutoff_hz {
            g *= 1.0 + knobs.harmonic_gain;
        }
        if !mods[k].is_empty() {
            g *= 1.0 + knobs.modulation_depth * mods[k][i];
        }
        g
    });
    let g = scale_peak(&mut reference, 0.3);
    let rms = (reference.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let normal = Normal::new(0.0, rms * 10f64.powf(knobs.noise_db / 20.0)).unwrap();
    for v in test.iter_mut() {
        *v = *v * g + normal.sample(&mut rng);
    }
    let peak = test.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        test.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    (signal(reference, sample_rate), signal(test, sample_rate))
}

/// Fraction of the full DM weight reached at each knot of a generating basis:
/// the no-distortion anchor, then the 0/25/50/75/100% quantiles.
const GENERATING_SHAPE: [f64; 6] = [0.0, 0.05, 0.25, 0.5, 0.75, 1.0];

/// Builds the generating mapping model: per-DM bases rising with the quantile
/// rank of the observed DM values up to `weights[d]` points, and one gate on
/// EHS driven by standardized β-VAR with weight `lambda`.
pub fn forward_model(
    features: &[PairSummary],
    weights: [f64; 3],
    lambda: f64,
    config: &PipelineConfig,
) -> SalienceMappingModel {
    let bases = Dm::ALL
        .iter()
        .map(|&dm| {
            let xs: Vec<f64> = features.iter().map(|f| f.mov.get(dm)).collect();
            let knots = quantile_knots(no_distortion_value(dm, config), &xs);
            // knots merged by quantile_knots drop their shape entries from the top
            let values = GENERATING_SHAPE[..knots.len()]
                .iter()
                .map(|v| v * weights[dm.index()])
                .collect();
            BasisFunction { dm, knots, values }
        })
        .collect();
    let cem_norm = Cem::ALL
        .iter()
        .map(|&cem| {
            let v: Vec<f64> = features.iter().map(|f| f.cem.get(cem)).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1).max(1) as f64;
            CemNormalization {
                cem,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    SalienceMappingModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        tool_version: TOOL_VERSION.into(),
        bases,
        gates: vec![Gate {
            dm: Dm::Ehs,
            cem: Cem::BetaVar,
            sign: Sign::of(lambda),
            lambda,
        }],
        cem_norm,
        g_max: config.salience.g_max,
        training: TrainingStats {
            n_items: features.len(),
            rounds: 0,
            converged: true,
            objective_mse: 0.0,
            rmse: 0.0,
        },
        config: config.to_key_values().into_iter().collect(),
    }
}

#[derive(Debug, Clone)]
pub struct SynthDbSpec {
    pub n_items: usize,
    pub seed: u64,
    pub seconds: f64,
    pub sample_rate: u32,
    pub score_noise_sd: f64,
    /// Full-scale degradation per DM in MUSHRA points.
    pub weights: [f64; 3],
    pub lambda: f64,
}

impl Default for SynthDbSpec {
    fn default() -> Self {
        Self {
            n_items: 200,
            seed: 2024,
            seconds: 3.0,
            sample_rate: RATE,
            score_noise_sd: 3.0,
            weights: [8.0, 8.0, 60.0],
            lambda: -0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthItem {
    pub row: ManifestRow,
    pub knobs: ItemKnobs,
    pub features: PairSummary,
    /// Forward-model score before listener noise.
    pub clean_score: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDb {
    pub items: Vec<SynthItem>,
    pub model: SalienceMappingModel,
}

/// Renders `spec.n_items` pairs as 16-bit WAVs under `dir`, measures them and
/// assigns scores from the generating model plus Gaussian noise.
pub fn generate_db(dir: &Path, spec: &SynthDbSpec, config: &PipelineConfig) -> Result<SynthDb> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let knobs: Vec<ItemKnobs> = (0..spec.n_items).map(|_| ItemKnobs::random(&mut rng)).collect();
    let measured: Vec<Result<(ManifestRow, PairSummary)>> = knobs
        .par_iter()
        .enumerate()
        .map(|(i, k)| {
            let item_seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let (r, t) = render_item(k, spec.sample_rate, spec.seconds, item_seed);
            let item_id = format!("item{i:03}");
            let ref_path = dir.join(format!("{item_id}_ref.wav"));
            let sut_path = dir.join(format!("{item_id}_sut.wav"));
            write_wav16(&ref_path, &r)?;
            write_wav16(&sut_path, &t)?;
            let a = analyze_files(&ref_path, &sut_path, config)?;
            let row = ManifestRow {
                item_id,
                condition: format!("sys{}", i % 4),
                ref_path,
                sut_path,
                mushra_mean: 0.0,
                mushra_ci95: None,
            };
            Ok((row, a.summary()))
        })
        .collect();
    let measured: Vec<(ManifestRow, PairSummary)> = measured.into_iter().collect::<Result<_>>()?;
    let features: Vec<PairSummary> = measured.iter().map(|m| m.1).collect();
    let model = forward_model(&features, spec.weights, spec.lambda, config);
    let normal = Normal::new(0.0, spec.score_noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let items = measured
        .into_iter()
        .zip(knobs)
        .map(|((mut row, features), knobs)| {
            let clean_score = predict_baq(&model, &features.mov, &features.cem)?;
            let noise = if spec.score_noise_sd > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            row.mushra_mean = (clean_score + noise).clamp(0.0, 100.0);
            Ok(SynthItem {
                row,
                knobs,
                features,
                clean_score,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SynthDb { items, model })
}

/// Writes a manifest CSV with paths relative to the manifest directory when possible.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<PathBuf> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::from("item_id,condition,ref_path,sut_path,mushra_mean\n");
    for r in rows {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.item_id,
            r.condition,
            rel(&r.ref_path),
            rel(&r.sut_path),
            r.mushra_mean
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_noise_pair_has_requested_energy() {
        let r = sine(RATE, 0.5, 440.0, 0.3);
        let (a, b) = white_noise_pair(&r, 2.5, 1);
        assert!((error_energy(&a, &b) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn artifact_pair_differs_only_above_cutoff() {
        let (r, t) = bandwidth_extension_pair(RATE, 0.5, 300.0, 6_000.0, 0.3, 4);
        assert_eq!(r.len(), t.len());
        assert!(error_energy(&r, &t) > 0.0);
        let (r0, t0) = bandwidth_extension_pair(RATE, 0.5, 300.0, 6_000.0, 0.0, 4);
        assert!(error_energy(&r0, &t0) < 1e-20);
    }

    #[test]
    fn items_are_reproducible() {
        let k = ItemKnobs {
            f0: 200.0,
            comb_cutoff_hz: 3_000.0,
            harmonic_gain: 0.3,
            modulation_depth: 0.2,
            noise_db: -50.0,
        };
        let (a, b) = render_item(&k, RATE, 0.3, 9);
        let (c, d) = render_item(&k, RATE, 0.3, 9);
        assert_eq!(a.samples, c.samples);
        assert_eq!(b.samples, d.samples);
    }
}
