//! Monte-Carlo and forward-construction checks of the signal layer.

use coexist::signal::*;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn cfg() -> OfdmConfig {
    OfdmConfig::default()
}

fn noise(n: usize, seed: u64) -> IqBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0.5f64).sqrt();
    let samples = (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re * s, im * s)
        })
        .collect();
    IqBuffer::new(samples, cfg().sample_period)
}

fn id_window(frame: &IqBuffer) -> IqBuffer {
    frame.window(cfg().id_field_offsets[0], cfg().id_field_len)
}

// Largest cross-eNB ID-window correlation over 1000 seed pairs, recorded once.
const MAX_CROSS_ID_CORR: f64 = 0.225_996_372_832_314_2;

#[test]
fn distinct_ids_stay_below_gamma_id() {
    let c = cfg();
    let a = synthesize_lte_frame(&c, 11, 3, 12).unwrap();
    let b = synthesize_lte_frame(&c, 12, 5, 12).unwrap();
    assert!(normalized_correlation(&id_window(&a), &id_window(&b)).unwrap() < 0.35);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for k in 0..1000u64 {
        // Same PSS group half the time: the harder case.
        let s1: u64 = rng.random_range(0..1 << 40);
        let s2 = if k % 2 == 0 { s1 + 3 * rng.random_range(1..1000) } else { s1 + 1 };
        let a = synthesize_lte_frame(&c, k, s1, 12).unwrap();
        let b = synthesize_lte_frame(&c, k + 7, s2, 12).unwrap();
        worst = worst.max(normalized_correlation(&id_window(&a), &id_window(&b)).unwrap());
    }
    assert!(worst < 0.35);
    assert!((worst - MAX_CROSS_ID_CORR).abs() < 1e-12, "max correlation moved to {worst:.16}");
}

#[test]
fn noise_power_adds_to_signal_power() {
    let c = cfg();
    let mut long = Vec::new();
    for k in 0..40 {
        long.extend(synthesize_lte_frame(&c, k, 1, 12).unwrap().samples);
    }
    let sig = IqBuffer::new(long, c.sample_period);
    assert!(sig.len() >= 100_000);
    let (gain, sigma2) = (0.7, 0.3);
    let ch = ChannelModel { gain, phase_offset: 0.4, noise_power: sigma2, rng_seed: 5 };
    let out = apply_channel(&sig, &ch);
    let p: Vec<f64> = out.samples.iter().map(|x| x.norm_sqr()).collect();
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = gain * gain * sig.mean_power() + sigma2;
    assert!((mean - expected).abs() < 3.0 * (var / n).sqrt(), "{mean} vs {expected}");
}

#[test]
fn lte_cp_peaks_survive_half_overlap() {
    let c = cfg();
    let duration = 12;
    let lte = synthesize_lte_frame(&c, 3, 4, duration).unwrap();
    let (sl, cp) = (80, 16);
    let wifi = synthesize_wifi_burst(sl, cp, lte.len() / (sl + cp) + 1, 9, c.sample_period).unwrap();
    let mixed = overlay(&lte, &wifi, lte.len() / 2);
    let rho = cp_correlation(&mixed, &c).unwrap();
    let peaks = local_peaks(&rho, 0.4, c.symbol_len / 2);
    assert!(peaks.len() >= duration / 2 - 1, "{} peaks", peaks.len());
}

#[test]
fn white_noise_cp_correlation_is_small() {
    let rho = cp_correlation_with(&noise(10_000 + 256, 1), 256, 64).unwrap();
    let mean = rho.iter().take(10_000).sum::<f64>() / 10_000.0;
    assert!(mean < 0.1, "{mean}");
}

#[test]
fn white_noise_windows_do_not_correlate() {
    let mut total = 0.0;
    for k in 0..2000 {
        total += normalized_correlation(&noise(640, 2 * k), &noise(640, 2 * k + 1)).unwrap();
    }
    assert!(total / 2000.0 < 0.05);
}

#[test]
fn clean_frame_found_at_its_offset() {
    let c = cfg();
    let frame = synthesize_lte_frame(&c, 1, 2, 12).unwrap();
    let buf = overlay(&IqBuffer::zeros(1000, c.sample_period), &frame, 1000);
    let det = detect_lte_frame(&buf, &c, 0.4).unwrap().expect("frame detected");
    assert!(det.start_sample().abs_diff(1000) <= 1, "{}", det.start_sample());
}

#[test]
fn overlapping_frames_split_on_their_grids() {
    let c = cfg();
    let dur = 12;
    let a = synthesize_lte_frame(&c, 1, 2, dur).unwrap();
    let b = synthesize_lte_frame(&c, 5, 6, dur).unwrap();
    // 40% overlap, off the symbol grid.
    let off = (a.len() as f64 * 0.6) as usize + 37;
    let buf = overlay(&a, &b, off);
    let det = detect_lte_frame(&buf, &c, 0.4).unwrap().expect("activity detected");
    let (first, second) = split_colliding_lte(&det).unwrap();
    // The outer edges are exact.
    assert!(first.start_sample() <= 1);
    assert!(second.end_sample().abs_diff(off + b.len()) <= 1);
    // Inside the overlap neither CP clears γ_LTE at equal power, so the inner edges
    // come back at the overlap boundary, on each frame's own symbol grid.
    let l = c.symbol_len;
    assert_eq!((second.start_sample() - off) % l, 0);
    assert!(second.start_sample() >= a.len() && second.start_sample() < a.len() + l);
    assert_eq!(first.end_sample() % l, 0);
    assert!(first.end_sample() <= off + l);
}

#[test]
fn symbol_aligned_overlap_is_flagged() {
    let c = cfg();
    let a = synthesize_lte_frame(&c, 1, 2, 12).unwrap();
    let b = synthesize_lte_frame(&c, 5, 6, 12).unwrap();
    let buf = overlay(&a, &b, 5 * c.symbol_len);
    let det = detect_lte_frame(&buf, &c, 0.4).unwrap().expect("activity detected");
    assert!(split_colliding_lte(&det).is_err());
}

#[test]
fn rotation_is_undone() {
    let reference = id_window(&synthesize_lte_frame(&cfg(), 1, 8, 12).unwrap());
    let rot = Complex64::from_polar(1.0, 0.3);
    let cand = IqBuffer::new(reference.samples.iter().map(|x| x * rot).collect(), reference.sample_period);
    let comp = phase_compensate(&cand, &reference).unwrap();
    assert!(normalized_correlation(&comp, &reference).unwrap() >= 0.99);
}

#[test]
fn compensation_does_not_create_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut above = 0;
    for _ in 0..1000 {
        let (s1, s2): (u64, u64) = (rng.random(), rng.random());
        if s1 == s2 {
            continue;
        }
        let a = id_window(&synthesize_lte_frame(&cfg(), s1, s1, 12).unwrap());
        let b = id_window(&synthesize_lte_frame(&cfg(), s2, s2, 12).unwrap());
        let ch = ChannelModel { gain: 1.0, phase_offset: rng.random_range(0.0..6.28), noise_power: 0.0, rng_seed: 0 };
        let comp = phase_compensate(&apply_channel(&a, &ch), &b).unwrap();
        if normalized_correlation(&comp, &b).unwrap() >= 0.35 {
            above += 1;
        }
    }
    assert!(above <= 10, "{above} false matches");
}
