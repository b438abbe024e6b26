use paqm_core::audio_io::{load_audio, prepare_pair, write_wav16, AlignConfig, AudioSignal};
use paqm_core::error::Error;
use paqm_core::synth::{sine, RATE};

fn write_i16(path: &std::path::Path, channels: u16, samples: &[i16]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for s in samples {
        w.write_sample(*s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn full_scale_sample_maps_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fs.wav");
    write_i16(&p, 1, &[32767, -32768, 0]);
    let a = load_audio(&p).unwrap();
    assert_eq!(a.samples, vec![32767.0 / 32768.0, -1.0, 0.0]);
}

#[test]
fn opposite_stereo_channels_cancel() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("st.wav");
    let frames: Vec<i16> = (0..200).flat_map(|i| [i * 7, -(i * 7)]).collect();
    write_i16(&p, 2, &frames);
    let a = load_audio(&p).unwrap();
    assert_eq!(a.channel_count, 2);
    assert_eq!(a.len(), 200);
    assert!(a.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn sixteen_bit_round_trip_is_within_half_a_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.wav");
    let s = sine(RATE, 0.25, 440.0, 0.7);
    write_wav16(&p, &s).unwrap();
    let back = load_audio(&p).unwrap();
    assert_eq!(back.len(), s.len());
    let worst = s.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 32768.0 + 1e-12, "{worst}");
}

#[test]
fn ten_seconds_at_48k_is_480000_samples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ten.wav");
    write_wav16(&p, &AudioSignal::new(vec![0.0; 480_000], RATE).unwrap()).unwrap();
    assert_eq!(load_audio(&p).unwrap().len(), 480_000);
}

#[test]
fn missing_and_garbage_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    assert!(matches!(load_audio(&missing), Err(Error::Io { .. })));
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"definitely not RIFF").unwrap();
    let e = load_audio(&junk).unwrap_err();
    assert!(e.to_string().contains("junk.wav"), "{e}");
}

#[test]
fn delayed_and_attenuated_copy_is_realigned() {
    let dir = tempfile::tempdir().unwrap();
    let r = sine(RATE, 1.0, 313.0, 0.4);
    let mut delayed = vec![0.0; 100];
    delayed.extend(r.samples.iter().take(r.len() - 100).map(|v| 0.5 * v));
    let rp = dir.path().join("r.wav");
    let tp = dir.path().join("t.wav");
    write_wav16(&rp, &r).unwrap();
    write_wav16(&tp, &AudioSignal::new(delayed, RATE).unwrap()).unwrap();
    let pair = prepare_pair(&load_audio(&rp).unwrap(), &load_audio(&tp).unwrap(), &AlignConfig {
        match_gain: true,
        ..AlignConfig::default()
    })
    .unwrap();
    assert_eq!(pair.lag_samples, 100);
    assert!((pair.gain_applied_db - 6.02).abs() < 0.05, "{}", pair.gain_applied_db);
}
