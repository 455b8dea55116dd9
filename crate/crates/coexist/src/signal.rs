//! Baseband OFDM synthesis and the correlation detectors used by monitoring APs.
//!
//! Everything here is a pure function of its inputs. Randomness is always driven by
//! an explicit seed, so the same seed gives bit-identical samples.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default LTE detection threshold.
pub const GAMMA_LTE: f64 = 0.4;
/// Default frame attribution threshold.
pub const GAMMA_ID: f64 = 0.35;
/// Default retransmission matching threshold.
pub const GAMMA_RT: f64 = 0.2;

/// Peaks this many samples away from the expected symbol grid still count as periodic.
pub const PEAK_JITTER: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("frame duration must be at least one symbol")]
    EmptyFrame,
    #[error("buffer of {len} samples is shorter than the {need} required")]
    TooShort { len: usize, need: usize },
    #[error("buffer lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid OFDM configuration: {0}")]
    InvalidConfig(String),
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("ID windows fall outside the detected frame span")]
    CorruptedId,
    #[error("all peaks are mutually periodic; treating as a single frame")]
    SingleFrame,
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// Complex baseband samples plus their sample period in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBuffer {
    pub samples: Vec<Complex64>,
    pub sample_period: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, sample_period: f64) -> Self {
        assert!(sample_period > 0.0, "sample period must be positive");
        Self { samples, sample_period }
    }

    pub fn zeros(len: usize, sample_period: f64) -> Self {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_period)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.energy() / self.len() as f64
        }
    }

    /// Copy of `len` samples starting at `start`. Panics when out of range.
    pub fn window(&self, start: usize, len: usize) -> IqBuffer {
        IqBuffer::new(self.samples[start..start + len].to_vec(), self.sample_period)
    }

    /// Little-endian interleaved re/im `f32` layout used for fixtures.
    pub fn to_cf32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 8);
        for s in &self.samples {
            out.extend_from_slice(&(s.re as f32).to_le_bytes());
            out.extend_from_slice(&(s.im as f32).to_le_bytes());
        }
        out
    }

    pub fn from_cf32_bytes(bytes: &[u8], sample_period: f64) -> Result<IqBuffer> {
        if bytes.len() % 8 != 0 {
            return Err(SignalError::InvalidConfig(format!(
                "cf32 payload of {} bytes is not a whole number of samples",
                bytes.len()
            )));
        }
        let samples = bytes
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Ok(IqBuffer::new(samples, sample_period))
    }
}

/// Symbol layout of the monitored LTE waveform. Lengths are in samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub symbol_len: usize,
    pub cp_len: usize,
    pub id_field_len: usize,
    pub id_field_offsets: [usize; 2],
    pub frame_len: usize,
    /// Seconds per sample.
    pub sample_period: f64,
}

/// LTE symbol duration with extended CP (12 symbols per millisecond).
pub const LTE_SYMBOL_US: f64 = 1000.0 / 12.0;

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            symbol_len: 256,
            cp_len: 64,
            id_field_len: 640,
            id_field_offsets: [256, 7 * 256],
            frame_len: 38_400,
            sample_period: LTE_SYMBOL_US * 1e-6 / 256.0,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SignalError::InvalidConfig(m.to_string()));
        if self.cp_len == 0 || self.cp_len >= self.symbol_len {
            return bad("need 0 < cp_len < symbol_len");
        }
        if self.id_field_len == 0 {
            return bad("id_field_len must be positive");
        }
        for off in self.id_field_offsets {
            if off % self.symbol_len != 0 {
                return bad("id field offsets must sit on symbol boundaries");
            }
            if off + self.id_field_len > self.frame_len {
                return bad("id field exceeds frame_len");
            }
        }
        if self.id_field_offsets[0] + self.id_field_len > self.id_field_offsets[1] {
            return bad("id fields overlap or are out of order");
        }
        if !(self.sample_period > 0.0) {
            return bad("sample_period must be positive");
        }
        Ok(())
    }

    /// Number of whole symbols that carry one ID field.
    pub fn id_symbols(&self) -> usize {
        self.id_field_len.div_ceil(self.symbol_len)
    }

    /// Symbol duration in microseconds.
    pub fn symbol_us(&self) -> f64 {
        self.symbol_len as f64 * self.sample_period * 1e6
    }
}

/// Flat-fading channel: one complex gain per frame plus AWGN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub gain: f64,
    pub phase_offset: f64,
    pub noise_power: f64,
    pub rng_seed: u64,
}

impl ChannelModel {
    pub fn ideal() -> Self {
        Self { gain: 1.0, phase_offset: 0.0, noise_power: 0.0, rng_seed: 0 }
    }

    /// Draws a fresh per-frame phase from `rng`.
    pub fn with_random_phase<R: Rng>(gain: f64, noise_power: f64, rng: &mut R) -> Self {
        Self {
            gain,
            phase_offset: rng.random_range(0.0..2.0 * PI),
            noise_power,
            rng_seed: rng.random(),
        }
    }
}

struct Modulator {
    fft: Arc<dyn Fft<f64>>,
    n: usize,
    cp: usize,
    scratch: Vec<Complex64>,
}

impl Modulator {
    fn new(symbol_len: usize, cp_len: usize) -> Self {
        let n = symbol_len - cp_len;
        let fft = FftPlanner::new().plan_fft_inverse(n);
        let scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Self { fft, n, cp: cp_len, scratch }
    }

    /// Appends one QPSK OFDM symbol (CP first) drawn from `rng`, with unit mean power.
    fn push_symbol<R: Rng>(&mut self, rng: &mut R, out: &mut Vec<Complex64>) {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let mut bins: Vec<Complex64> = (0..self.n)
            .map(|_| {
                let re = if rng.random::<bool>() { a } else { -a };
                let im = if rng.random::<bool>() { a } else { -a };
                Complex64::new(re, im)
            })
            .collect();
        self.fft.process_with_scratch(&mut bins, &mut self.scratch);
        let scale = 1.0 / (self.n as f64).sqrt();
        for b in bins.iter_mut() {
            *b *= scale;
        }
        out.extend_from_slice(&bins[self.n - self.cp..]);
        out.extend_from_slice(&bins);
    }
}

fn mix_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthesizes a downlink LTE frame of `duration` symbols.
///
/// Two copies of the ID field sit at `cfg.id_field_offsets`. The first symbol of each
/// copy depends only on `id_seed % 3` (the PSS group), the remaining ones on the full
/// `id_seed`. Every other symbol is payload drawn from `payload_seed`.
pub fn synthesize_lte_frame(
    cfg: &OfdmConfig,
    payload_seed: u64,
    id_seed: u64,
    duration: usize,
) -> Result<IqBuffer> {
    cfg.validate()?;
    if duration == 0 {
        return Err(SignalError::EmptyFrame);
    }
    let mut m = Modulator::new(cfg.symbol_len, cfg.cp_len);
    let mut payload_rng = ChaCha8Rng::seed_from_u64(mix_seed(payload_seed, 0x7061_796c));
    let id_start = [
        cfg.id_field_offsets[0] / cfg.symbol_len,
        cfg.id_field_offsets[1] / cfg.symbol_len,
    ];
    let id_syms = cfg.id_symbols();
    let mut out = Vec::with_capacity(duration * cfg.symbol_len);
    for k in 0..duration {
        let id_pos = id_start.iter().find(|&&s| k >= s && k < s + id_syms).map(|&s| k - s);
        match id_pos {
            Some(0) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(id_seed % 3, 0x7073_73));
                m.push_symbol(&mut rng, &mut out);
            }
            Some(j) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(id_seed, 0x7373_7300 + j as u64));
                m.push_symbol(&mut rng, &mut out);
            }
            None => m.push_symbol(&mut payload_rng, &mut out),
        }
    }
    Ok(IqBuffer::new(out, cfg.sample_period))
}

/// Wi-Fi style OFDM burst with its own symbol/CP lengths.
pub fn synthesize_wifi_burst(
    symbol_len: usize,
    cp_len: usize,
    duration: usize,
    seed: u64,
    sample_period: f64,
) -> Result<IqBuffer> {
    if cp_len == 0 || cp_len >= symbol_len {
        return Err(SignalError::InvalidConfig("need 0 < cp_len < symbol_len".into()));
    }
    let mut out = Vec::with_capacity(duration * symbol_len);
    if duration > 0 {
        let mut m = Modulator::new(symbol_len, cp_len);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7769_6669));
        for _ in 0..duration {
            m.push_symbol(&mut rng, &mut out);
        }
    }
    Ok(IqBuffer::new(out, sample_period))
}

/// `out[k] = gain·e^{jφ}·sig[k] + n[k]` with circular Gaussian noise of power `noise_power`.
pub fn apply_channel(sig: &IqBuffer, ch: &ChannelModel) -> IqBuffer {
    let h = Complex64::from_polar(ch.gain, ch.phase_offset);
    let mut out: Vec<Complex64> = sig.samples.iter().map(|s| h * s).collect();
    if ch.noise_power > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(ch.rng_seed);
        let normal = Normal::new(0.0, (ch.noise_power / 2.0).sqrt()).expect("finite std dev");
        for s in out.iter_mut() {
            *s += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    IqBuffer::new(out, sig.sample_period)
}

/// Sample-wise sum with `b` delayed by `offset` samples.
pub fn overlay(a: &IqBuffer, b: &IqBuffer, offset: usize) -> IqBuffer {
    let len = a.len().max(offset + b.len());
    let mut out = a.samples.clone();
    out.resize(len, Complex64::new(0.0, 0.0));
    for (k, s) in b.samples.iter().enumerate() {
        out[offset + k] += s;
    }
    IqBuffer::new(out, a.sample_period)
}

fn max_norm_corr(a: &[Complex64], b: &[Complex64]) -> f64 {
    let mut acc = Complex64::new(0.0, 0.0);
    let (mut ea, mut eb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        acc += x.conj() * y;
        ea += x.norm_sqr();
        eb += y.norm_sqr();
    }
    let den = ea.max(eb);
    if den == 0.0 {
        return 0.0;
    }
    (acc.norm_sqr() / (den * den)).clamp(0.0, 1.0)
}

/// CP correlation ρ(n) between the window at `n` and the one `L_S − L_CP` samples later.
///
/// The output has `len − L_S + 1` entries, one per window start.
pub fn cp_correlation(sig: &IqBuffer, cfg: &OfdmConfig) -> Result<Vec<f64>> {
    cp_correlation_with(sig, cfg.symbol_len, cfg.cp_len)
}

pub fn cp_correlation_with(sig: &IqBuffer, symbol_len: usize, cp_len: usize) -> Result<Vec<f64>> {
    if cp_len == 0 || cp_len >= symbol_len {
        return Err(SignalError::InvalidConfig("need 0 < cp_len < symbol_len".into()));
    }
    let need = symbol_len + cp_len;
    if sig.len() < need {
        return Err(SignalError::TooShort { len: sig.len(), need });
    }
    let lag = symbol_len - cp_len;
    let s = &sig.samples;
    let n_out = s.len() - symbol_len + 1;
    let rho = (0..n_out)
        .map(|n| max_norm_corr(&s[n..n + cp_len], &s[n + lag..n + lag + cp_len]))
        .collect();
    Ok(rho)
}

/// Indices `n` with `rho[n] ≥ gamma` that strictly exceed every other value within
/// `±halfwidth` samples.
pub fn local_peaks(rho: &[f64], gamma: f64, halfwidth: usize) -> Vec<usize> {
    let mut peaks = Vec::new();
    for (n, &v) in rho.iter().enumerate() {
        if v < gamma {
            continue;
        }
        let lo = n.saturating_sub(halfwidth);
        let hi = (n + halfwidth).min(rho.len() - 1);
        if (lo..=hi).all(|m| m == n || rho[m] < v) {
            peaks.push(n);
        }
    }
    peaks
}

/// Start/end of one detected LTE frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Seconds from the start of the scanned buffer.
    pub t_s: f64,
    pub t_e: f64,
    pub peak_indices: Vec<usize>,
    pub symbol_len: usize,
    pub sample_period: f64,
}

impl DetectionResult {
    fn from_peaks(peaks: Vec<usize>, symbol_len: usize, sample_period: f64) -> Self {
        let first = peaks[0];
        let last = *peaks.last().expect("nonempty");
        Self {
            t_s: first as f64 * sample_period,
            t_e: (last + symbol_len) as f64 * sample_period,
            peak_indices: peaks,
            symbol_len,
            sample_period,
        }
    }

    pub fn start_sample(&self) -> usize {
        self.peak_indices[0]
    }

    /// One past the last sample of the frame.
    pub fn end_sample(&self) -> usize {
        self.peak_indices.last().expect("nonempty") + self.symbol_len
    }

    pub fn duration_samples(&self) -> usize {
        self.end_sample() - self.start_sample()
    }
}

fn check_gamma(g: f64) -> Result<()> {
    if g > 0.0 && g < 1.0 {
        Ok(())
    } else {
        Err(SignalError::InvalidThreshold(g))
    }
}

/// All qualifying CP peaks in `sig` as a single detection, or `None` if there are none.
pub fn detect_lte_frame(sig: &IqBuffer, cfg: &OfdmConfig, gamma_lte: f64) -> Result<Option<DetectionResult>> {
    check_gamma(gamma_lte)?;
    if sig.len() < cfg.symbol_len + cfg.cp_len {
        return Ok(None);
    }
    let rho = cp_correlation(sig, cfg)?;
    let peaks = local_peaks(&rho, gamma_lte, cfg.cp_len);
    if peaks.is_empty() {
        return Ok(None);
    }
    let peaks = snap_to_grids(&rho, &peaks, cfg.symbol_len, cfg.cp_len / 4);
    Ok(Some(DetectionResult::from_peaks(peaks, cfg.symbol_len, sig.sample_period)))
}

/// Moves each group of mutually periodic peaks onto the common symbol grid that
/// maximizes the summed ρ. Single-symbol argmaxes wander by a few samples at high
/// SNR; the sum over a frame's symbols does not.
fn snap_to_grids(rho: &[f64], peaks: &[usize], symbol_len: usize, tol: usize) -> Vec<usize> {
    let mut remaining = peaks.to_vec();
    let mut out = Vec::with_capacity(peaks.len());
    while let Some(&anchor) = remaining.first() {
        let (group, rest): (Vec<usize>, Vec<usize>) = remaining.iter().partition(|&&p| {
            let r = (p - anchor) % symbol_len;
            r <= tol || r >= symbol_len - tol
        });
        let slots: Vec<usize> = group.iter().map(|&p| (p - anchor + symbol_len / 2) / symbol_len).collect();
        let last = *slots.last().expect("anchor is in its group");
        let hi = (anchor + tol).min(rho.len() - 1 - last * symbol_len);
        let mut best = (anchor, f64::NEG_INFINITY);
        for s in anchor.saturating_sub(tol)..=hi {
            let score: f64 = slots.iter().map(|&m| rho[s + m * symbol_len]).sum();
            if score > best.1 {
                best = (s, score);
            }
        }
        out.extend(slots.iter().map(|&m| best.0 + m * symbol_len));
        remaining = rest;
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn periodic(p: usize, anchor: usize, symbol_len: usize) -> bool {
    let r = p.abs_diff(anchor) % symbol_len;
    r <= PEAK_JITTER || r >= symbol_len - PEAK_JITTER
}

/// Splits the peaks of two colliding frames into one detection per frame.
///
/// The first frame is the group periodic with the first peak. The second frame is the
/// first later group of at least two mutually periodic peaks; isolated peaks that fit
/// neither group are treated as noise.
pub fn split_colliding_lte(det: &DetectionResult) -> Result<(DetectionResult, DetectionResult)> {
    let l = det.symbol_len;
    let anchor = det.peak_indices[0];
    let (first, rest): (Vec<usize>, Vec<usize>) =
        det.peak_indices.iter().partition(|&&p| periodic(p, anchor, l));
    for (i, &cand) in rest.iter().enumerate() {
        let group: Vec<usize> = rest[i..].iter().copied().filter(|&p| periodic(p, cand, l)).collect();
        if group.len() >= 2 {
            return Ok((
                DetectionResult::from_peaks(first, l, det.sample_period),
                DetectionResult::from_peaks(group, l, det.sample_period),
            ));
        }
    }
    Err(SignalError::SingleFrame)
}

fn wrap_pi(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Rotates `candidate` toward `reference` by the mean absolute phase difference.
///
/// The rotation direction follows the sign of the circular mean difference; the shift
/// is taken modulo π. Magnitudes are untouched.
pub fn phase_compensate(candidate: &IqBuffer, reference: &IqBuffer) -> Result<IqBuffer> {
    if candidate.len() != reference.len() {
        return Err(SignalError::LengthMismatch(candidate.len(), reference.len()));
    }
    if candidate.is_empty() {
        return Ok(candidate.clone());
    }
    let mut abs_sum = 0.0;
    let mut circ = Complex64::new(0.0, 0.0);
    for (c, r) in candidate.samples.iter().zip(&reference.samples) {
        let d = wrap_pi(c.arg() - r.arg());
        abs_sum += d.abs();
        circ += Complex64::from_polar(1.0, d);
    }
    let theta = (abs_sum / candidate.len() as f64) % PI;
    let shift = if circ.arg() >= 0.0 { -theta } else { theta };
    let rot = Complex64::from_polar(1.0, shift);
    let samples = candidate.samples.iter().map(|c| c * rot).collect();
    Ok(IqBuffer::new(samples, candidate.sample_period))
}

/// `|Σ a*·b|² / max(E_a, E_b)²`, or 0 when both buffers are silent.
pub fn normalized_correlation(a: &IqBuffer, b: &IqBuffer) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SignalError::LengthMismatch(a.len(), b.len()));
    }
    Ok(max_norm_corr(&a.samples, &b.samples))
}

/// Opaque per-monitor eNB identifier.
pub type LocalId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSignature {
    pub id_samples: IqBuffer,
    pub enb_local_id: LocalId,
}

/// Stored ID fields, one per eNB the monitor has seen.
#[derive(Debug, Clone, Default)]
pub struct SignatureDb {
    pub entries: Vec<FrameSignature>,
    next_id: LocalId,
}

impl SignatureDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn register(&mut self, id_samples: IqBuffer) -> LocalId {
        self.next_id += 1;
        let id = self.next_id;
        self.entries.push(FrameSignature { id_samples, enb_local_id: id });
        id
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attribution {
    pub local_id: Option<LocalId>,
    pub is_downlink: bool,
    /// Correlation between the two ID windows of the frame.
    pub rho_dl: f64,
    /// Best correlation against a stored signature (0 when a new one was registered).
    pub rho_id: f64,
}

/// Attributes a detected frame to a stored signature or registers a new one.
///
/// The downlink test uses `gamma_id` as its threshold as well.
pub fn attribute_frame(
    frame: &IqBuffer,
    det: &DetectionResult,
    cfg: &OfdmConfig,
    db: &mut SignatureDb,
    gamma_id: f64,
) -> Result<Attribution> {
    check_gamma(gamma_id)?;
    let start = det.start_sample();
    let end = det.end_sample().min(frame.len());
    let [o1, o2] = cfg.id_field_offsets;
    if start + o2 + cfg.id_field_len > end {
        return Err(SignalError::CorruptedId);
    }
    let w1 = frame.window(start + o1, cfg.id_field_len);
    let w2 = frame.window(start + o2, cfg.id_field_len);
    let rho_dl = normalized_correlation(&w1, &w2)?;
    if rho_dl < gamma_id {
        return Ok(Attribution { local_id: None, is_downlink: false, rho_dl, rho_id: 0.0 });
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, sig) in db.entries.iter().enumerate() {
        let comp = phase_compensate(&w1, &sig.id_samples)?;
        let rho = normalized_correlation(&comp, &sig.id_samples)?;
        if rho >= gamma_id && best.is_none_or(|(_, b)| rho > b) {
            best = Some((k, rho));
        }
    }
    let (local_id, rho_id) = match best {
        Some((k, rho)) => {
            db.entries[k].id_samples = w1;
            (db.entries[k].enb_local_id, rho)
        }
        None => (db.register(w1), 0.0),
    };
    Ok(Attribution { local_id: Some(local_id), is_downlink: true, rho_dl, rho_id })
}

/// True iff `b` looks like a retransmission of `a`.
pub fn match_retransmission(a: &IqBuffer, b: &IqBuffer, gamma_rt: f64) -> Result<bool> {
    let comp = phase_compensate(a, b)?;
    Ok(normalized_correlation(&comp, b)? >= gamma_rt)
}
