//! WAV ingestion and REF/SUT pair preparation.
//!
//! Every signal is reduced to a single channel of `f64` samples in `[-1, 1]`.
//! Pairs are aligned in time by the lag that maximizes their cross-correlation
//! and, optionally, level-matched by RMS.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 2] = [44100, 48000];

/// Normalized cross-correlation peaks below this value are treated as "no match".
const MIN_CORRELATION_PEAK: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// Channel count of the source file; samples are always mono.
    pub channel_count: u16,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate) {
            return Err(Error::UnsupportedSampleRate(sample_rate));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sample value {bad} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            channel_count: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub reference: AudioSignal,
    pub test: AudioSignal,
    /// Positive when the test signal lags the reference.
    pub lag_samples: i64,
    pub gain_applied_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub align_lag: bool,
    pub match_gain: bool,
    pub max_lag_samples: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            align_lag: true,
            match_gain: false,
            max_lag_samples: 48000,
        }
    }
}

/// Reads a PCM WAV file (16/24/32-bit integer or 32-bit float, one or two channels)
/// and mixes it down to mono.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            message: format!("{} channels", spec.channels),
        });
    }
    let decode_err = |e: hound::Error| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(decode_err)?
        }
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(decode_err)?,
        (format, bits) => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                message: format!("{bits}-bit {format:?}"),
            })
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "non-finite sample".into(),
        });
    }

    let channels = spec.channels as usize;
    let samples: Vec<f64> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    if samples.is_empty() {
        return Err(Error::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    if !SUPPORTED_RATES.contains(&spec.sample_rate) {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    Ok(AudioSignal {
        samples,
        sample_rate: spec.sample_rate,
        channel_count: spec.channels,
    })
}

/// Writes a mono 16-bit PCM WAV. Samples are scaled by 32768 and clipped.
pub fn write_wav16(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &signal.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Aligns `test` to `reference` and truncates both to their common length.
///
/// The lag search covers `±max_lag` samples. With `config.match_gain` the test
/// signal is scaled to the reference RMS.
pub fn prepare_pair(
    reference: &AudioSignal,
    test: &AudioSignal,
    config: &AlignConfig,
) -> Result<AlignedPair> {
    if reference.sample_rate != test.sample_rate {
        return Err(Error::SampleRateMismatch {
            reference: reference.sample_rate,
            test: test.sample_rate,
        });
    }
    let rate = reference.sample_rate as f64;
    let len_diff = reference.len().abs_diff(test.len()) as f64 / rate;
    if len_diff >= 1.0 {
        return Err(Error::DurationMismatch { seconds: len_diff });
    }

    let lag = if config.align_lag {
        best_lag(&reference.samples, &test.samples, config.max_lag_samples)?
    } else {
        0
    };

    let (ref_start, test_start) = if lag >= 0 {
        (0, lag as usize)
    } else {
        ((-lag) as usize, 0)
    };
    let common = reference
        .len()
        .saturating_sub(ref_start)
        .min(test.len().saturating_sub(test_start));
    if common == 0 {
        return Err(Error::Degenerate("no overlap after alignment".into()));
    }
    let ref_samples = reference.samples[ref_start..ref_start + common].to_vec();
    let mut test_samples = test.samples[test_start..test_start + common].to_vec();

    let mut gain_db = 0.0;
    if config.match_gain {
        let (r, t) = (rms(&ref_samples), rms(&test_samples));
        if r > 0.0 && t > 0.0 {
            let gain = r / t;
            gain_db = 20.0 * gain.log10();
            for s in &mut test_samples {
                *s = (*s * gain).clamp(-1.0, 1.0);
            }
        }
    }

    Ok(AlignedPair {
        reference: AudioSignal {
            samples: ref_samples,
            sample_rate: reference.sample_rate,
            channel_count: reference.channel_count,
        },
        test: AudioSignal {
            samples: test_samples,
            sample_rate: test.sample_rate,
            channel_count: test.channel_count,
        },
        lag_samples: lag,
        gain_applied_db: gain_db,
    })
}

fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Lag (test relative to reference) maximizing the cross-correlation, found via FFT.
fn best_lag(reference: &[f64], test: &[f64], max_lag: usize) -> Result<i64> {
    let energy_ref: f64 = reference.iter().map(|s| s * s).sum();
    let energy_test: f64 = test.iter().map(|s| s * s).sum();
    if energy_ref == 0.0 || energy_test == 0.0 {
        // Nothing to correlate against; silence is aligned by definition.
        return Ok(0);
    }

    let n = (reference.len() + test.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(n);
    let inverse = planner.plan_fft_inverse(n);

    let mut a: Vec<Complex<f64>> = reference.iter().map(|&x| Complex::new(x, 0.0)).collect();
    a.resize(n, Complex::default());
    let mut b: Vec<Complex<f64>> = test.iter().map(|&x| Complex::new(x, 0.0)).collect();
    b.resize(n, Complex::default());
    forward.process(&mut a);
    forward.process(&mut b);
    // c[lag] = sum_t ref[t] * test[t + lag]
    let mut c: Vec<Complex<f64>> = a.iter().zip(&b).map(|(x, y)| x.conj() * y).collect();
    inverse.process(&mut c);

    let max_pos = max_lag.min(test.len().saturating_sub(1));
    let max_neg = max_lag.min(reference.len().saturating_sub(1));
    let at = |lag: i64| -> f64 {
        let idx = if lag >= 0 {
            lag as usize
        } else {
            n - (-lag) as usize
        };
        c[idx].re / n as f64
    };

    let mut best = (0i64, f64::NEG_INFINITY);
    for lag in -(max_neg as i64)..=(max_pos as i64) {
        let v = at(lag);
        // exact ties resolve to the smallest |lag|
        if v > best.1 || (v == best.1 && lag.abs() < best.0.abs()) {
            best = (lag, v);
        }
    }

    let normalized = best.1 / (energy_ref * energy_test).sqrt();
    if !(normalized >= MIN_CORRELATION_PEAK) {
        return Err(Error::AmbiguousAlignment { peak: normalized });
    }
    Ok(best.0)
}
