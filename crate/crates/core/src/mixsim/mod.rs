//! Toy speech corpus synthesis and dynamic mixing.
//!
//! Speakers are harmonic-stack voices with distinct fundamentals; phones are
//! spectral envelopes over the harmonics; interference is either another
//! speaker's utterance or tilted pink noise, scaled to a drawn SNR.  Every
//! example is a pure function of (config, base seed, example index), so a
//! corpus regenerates bitwise and any single example can be rebuilt in
//! isolation.

mod manifest;

pub use manifest::{read_manifest, simulate_corpus, ManifestRecord};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::Waveform;
use crate::config::{CorpusConfig, FrontendConfig, MixtureType};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub f0: f64,
    pub harmonic_weights: Vec<f64>,
}

/// Deterministic speaker roster: fundamentals on an even grid (validation
/// guarantees at least 10 Hz spacing), timbre weights drawn per speaker.
pub fn speaker_table(cfg: &CorpusConfig, seed: u64) -> Vec<SpeakerProfile> {
    let n = cfg.n_speakers;
    let spacing = if n > 1 { (cfg.f0_max_hz - cfg.f0_min_hz) / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|id| {
            let mut rng = stream(seed, "corpus.speaker", &[id as u64]);
            let harmonic_weights = (0..cfg.n_harmonics).map(|_| rng.gen_range(0.2..=1.0)).collect();
            SpeakerProfile { speaker_id: id, f0: cfg.f0_min_hz + spacing * id as f64, harmonic_weights }
        })
        .collect()
}

/// Spectral envelope value for (phone, harmonic), in [0.25, 1.0]; a pure hash
/// so the phone alphabet needs no stored tables.
fn phone_shape(phone: usize, harmonic: usize) -> f64 {
    let u = derive_seed(phone as u64, "phone.shape", &[harmonic as u64]);
    0.25 + 0.75 * ((u >> 11) as f64 / (1u64 << 53) as f64)
}

/// One synthesized utterance plus the phone timing needed to label any sample
/// position, including positions past the end (looped interference wraps).
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub wave: Waveform,
    pub phone_seq: Vec<usize>,
    pub samples_per_phone: usize,
}

impl SynthUtterance {
    pub fn phone_at(&self, sample: usize) -> usize {
        let pos = sample % self.wave.len();
        self.phone_seq[pos / self.samples_per_phone]
    }

    /// Per-frame phone labels for this utterance cropped/looped to `out_len`
    /// samples, aligned to the frontend's frame centers.
    pub fn frame_labels(&self, out_len: usize, fe: &FrontendConfig) -> Result<Vec<usize>> {
        let t = fe
            .frame_count(out_len)
            .ok_or_else(|| Error::Audio(format!("waveform of {out_len} samples is shorter than one frame")))?;
        Ok((0..t).map(|i| self.phone_at(fe.frame_center(i))).collect())
    }
}

/// Render a phone sequence as a windowed harmonic stack: fundamental at the
/// speaker's f0, partial amplitudes from (phone envelope x speaker timbre),
/// phases continuous across phone boundaries, short raised-cosine fades at
/// segment edges.  The fundamental always dominates the spectrum.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    phone_seq: &[usize],
    dur_per_phone_s: f64,
    sample_rate: u32,
    alphabet: usize,
    seed: u64,
) -> Result<SynthUtterance> {
    if phone_seq.is_empty() {
        return Err(Error::Audio("empty phone sequence".into()));
    }
    if let Some(&bad) = phone_seq.iter().find(|&&p| p >= alphabet) {
        return Err(Error::Audio(format!("phone id {bad} outside alphabet of {alphabet}")));
    }
    if dur_per_phone_s < 0.04 {
        return Err(Error::Audio("phone duration below 40 ms".into()));
    }
    let spp = (dur_per_phone_s * sample_rate as f64).round() as usize;
    let len = spp * phone_seq.len();
    let sr = sample_rate as f64;

    // Harmonics that stay safely below Nyquist.
    let n_h = profile
        .harmonic_weights
        .len()
        .min(((0.45 * sr) / profile.f0).floor() as usize)
        .max(1);
    let mut rng = stream(seed, "synth.phase", &[]);
    let phases: Vec<f64> = (0..n_h).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    // Per-(segment, harmonic) amplitudes; h = 1 is pinned so the spectral peak
    // sits at f0 for every phone and speaker.
    let amps: Vec<Vec<f64>> = phone_seq
        .iter()
        .map(|&p| {
            (0..n_h)
                .map(|h| {
                    if h == 0 {
                        1.0
                    } else {
                        0.78f64.powi(h as i32) * phone_shape(p, h) * profile.harmonic_weights[h]
                    }
                })
                .collect()
        })
        .collect();

    let fade = (0.006 * sr) as usize;
    let fade = fade.min(spp / 4).max(1);
    let mut samples = vec![0.0f64; len];
    for (seg, amp) in amps.iter().enumerate() {
        let s0 = seg * spp;
        for i in 0..spp {
            let t = (s0 + i) as f64 / sr;
            let mut v = 0.0;
            for h in 0..n_h {
                let f = profile.f0 * (h + 1) as f64;
                v += amp[h] * (std::f64::consts::TAU * f * t + phases[h]).sin();
            }
            let env = segment_envelope(i, spp, fade);
            samples[s0 + i] = 0.25 * env * v;
        }
    }
    Ok(SynthUtterance {
        wave: Waveform::new(samples, sample_rate)?,
        phone_seq: phone_seq.to_vec(),
        samples_per_phone: spp,
    })
}

fn segment_envelope(i: usize, seg_len: usize, fade: usize) -> f64 {
    let ramp = |x: f64| 0.5 - 0.5 * (std::f64::consts::PI * x).cos();
    if i < fade {
        ramp((i + 1) as f64 / (fade + 1) as f64)
    } else if i >= seg_len - fade {
        ramp((seg_len - i) as f64 / (fade + 1) as f64)
    } else {
        1.0
    }
}

/// Pink noise (Kellet filter cascade) with a per-seed first-order spectral
/// tilt, normalized to unit RMS.
pub fn pink_noise(len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::Audio("zero-length noise requested".into()));
    }
    let mut rng = stream(seed, "noise", &[]);
    let tilt: f64 = rng.gen_range(-0.4..=0.8);
    let (mut b0, mut b1, mut b2, mut b3, mut b4, mut b5, mut b6) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let white: f64 = rng.gen_range(-1.0..1.0);
        b0 = 0.99886 * b0 + white * 0.0555179;
        b1 = 0.99332 * b1 + white * 0.0750759;
        b2 = 0.96900 * b2 + white * 0.1538520;
        b3 = 0.86650 * b3 + white * 0.3104856;
        b4 = 0.55000 * b4 + white * 0.5329522;
        b5 = -0.7616 * b5 - white * 0.0168980;
        let pink = b0 + b1 + b2 + b3 + b4 + b5 + b6 + white * 0.5362;
        b6 = white * 0.115926;
        out.push(pink - tilt * prev);
        prev = pink;
    }
    let rms = (out.iter().map(|&x| x * x).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        for x in &mut out {
            *x /= rms;
        }
    }
    Waveform::new(out, sample_rate)
}

/// Crop or cyclically extend `samples` to exactly `len`.
pub fn align_to(samples: &[f64], len: usize) -> Vec<f64> {
    (0..len).map(|i| samples[i % samples.len()]).collect()
}

/// Gain that places `interference` at `snr_db` below (or above) `signal`.
pub fn snr_gain(signal: &[f64], interference: &[f64], snr_db: f64) -> Result<f64> {
    let rms = |s: &[f64]| (s.iter().map(|&x| x * x).sum::<f64>() / s.len() as f64).sqrt();
    let ri = rms(interference);
    if ri == 0.0 {
        return Err(Error::Audio("silent interference".into()));
    }
    Ok(rms(signal) / ri * 10f64.powf(-snr_db / 20.0))
}

/// signal + g * interference, with the interference cropped/looped to the
/// signal's length first and g = RMS(signal)/RMS(interference) * 10^(-snr/20).
pub fn mix_at_snr(signal: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Waveform> {
    let aligned = align_to(&interference.samples, signal.len());
    let g = snr_gain(&signal.samples, &aligned, snr_db)?;
    let samples = signal.samples.iter().zip(&aligned).map(|(&s, &i)| s + g * i).collect();
    Waveform::new(samples, signal.sample_rate)
}

/// The speech interferer behind one view, exported so evaluation can label
/// both talkers and swap enrollments.
#[derive(Debug, Clone)]
pub struct ExportedInterferer {
    pub speaker: usize,
    /// Interferer source cropped/looped to the mixture length, peak-limited
    /// with its own gain.
    pub clean: Waveform,
    pub enrollment: Waveform,
    pub phone_labels: Vec<usize>,
    pub norm_gain: f64,
    pub enrollment_norm_gain: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub id: String,
    pub seed: u64,
    pub clean: Waveform,
    pub view_a: Waveform,
    pub view_b: Waveform,
    pub enrollment: Waveform,
    pub target_speaker: usize,
    /// View A's interference class; view B draws independently.
    pub mixture_type: MixtureType,
    pub view_b_type: MixtureType,
    pub phone_labels: Vec<usize>,
    pub clean_phone_seq: Vec<usize>,
    pub enrollment_phone_seq: Vec<usize>,
    pub view_a_sir_db: Option<f64>,
    pub view_a_snr_db: Option<f64>,
    pub view_b_sir_db: Option<f64>,
    pub view_b_snr_db: Option<f64>,
    /// Post-normalization additive interference of each view: the stored view
    /// is exactly clean + interference, elementwise.
    pub view_a_interference: Vec<f64>,
    pub view_b_interference: Vec<f64>,
    pub norm_gain: f64,
    pub enrollment_norm_gain: f64,
    /// View A's speech interferer, when view A contains one.
    pub interferer: Option<ExportedInterferer>,
}

/// The two interference classes an example will draw, one per view.  Split out
/// of [`sample_example`] so distributional checks need no audio synthesis.
pub fn view_kinds(cfg: &CorpusConfig, base_seed: u64, index: u64) -> (MixtureType, MixtureType) {
    let mut rng = stream(base_seed, "mixsim.kinds", &[index]);
    let a = cfg.mixture_types[rng.gen_range(0..cfg.mixture_types.len())];
    let b = cfg.mixture_types[rng.gen_range(0..cfg.mixture_types.len())];
    (a, b)
}

struct ViewDraw {
    wave_pre: Vec<f64>,
    interference_pre: Vec<f64>,
    sir_db: Option<f64>,
    snr_db: Option<f64>,
    speech: Option<(usize, SynthUtterance)>,
}

fn draw_view(
    kind: MixtureType,
    clean: &Waveform,
    cfg: &CorpusConfig,
    speakers: &[SpeakerProfile],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViewDraw> {
    let len = clean.len();
    let mut interference = vec![0.0f64; len];
    let mut sir_db = None;
    let mut snr_db = None;
    let mut speech = None;
    if kind.has_speech() {
        let mut sp = rng.gen_range(0..cfg.n_speakers);
        while sp == target {
            sp = rng.gen_range(0..cfg.n_speakers);
        }
        let utt = draw_utterance(&speakers[sp], cfg, rng)?;
        let sir = rng.gen_range(cfg.sir_db_min..=cfg.sir_db_max);
        let aligned = align_to(&utt.wave.samples, len);
        let g = snr_gain(&clean.samples, &aligned, sir)?;
        for (acc, &x) in interference.iter_mut().zip(&aligned) {
            *acc += g * x;
        }
        sir_db = Some(sir);
        speech = Some((sp, utt));
    }
    if kind.has_noise() {
        let noise = pink_noise(len, clean.sample_rate, rng.gen::<u64>())?;
        let snr = rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max);
        let g = snr_gain(&clean.samples, &noise.samples, snr)?;
        for (acc, &x) in interference.iter_mut().zip(&noise.samples) {
            *acc += g * x;
        }
        snr_db = Some(snr);
    }
    let wave_pre = clean.samples.iter().zip(&interference).map(|(&c, &i)| c + i).collect();
    Ok(ViewDraw { wave_pre, interference_pre: interference, sir_db, snr_db, speech })
}

fn draw_utterance(profile: &SpeakerProfile, cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<SynthUtterance> {
    let n = rng.gen_range(cfg.phones_per_utt_min..=cfg.phones_per_utt_max);
    let dur_ms = rng.gen_range(cfg.phone_ms_min..=cfg.phone_ms_max);
    let seq: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_phones)).collect();
    let seed = rng.gen::<u64>();
    synth_utterance(profile, &seq, dur_ms as f64 / 1000.0, cfg.sample_rate, cfg.n_phones, seed)
}

fn draw_enrollment(
    profile: &SpeakerProfile,
    avoid_seq: &[usize],
    cfg: &CorpusConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthUtterance> {
    const DUR_S: f64 = 0.1;
    let n = ((cfg.enrollment_s / DUR_S).round() as usize).max(1);
    loop {
        let seq: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_phones)).collect();
        if seq != avoid_seq {
            let seed = rng.gen::<u64>();
            return synth_utterance(profile, &seq, DUR_S, cfg.sample_rate, cfg.n_phones, seed);
        }
    }
}

/// Peak-limiting gain: identity unless the peak exceeds 1, with a hair of
/// headroom so rounding of the scaled samples cannot cross 1 again.
fn peak_gain(peak: f64) -> f64 {
    if peak <= 1.0 {
        1.0
    } else {
        1.0 / (peak * (1.0 + 1e-6))
    }
}

/// Generate one dual-view example.  Everything derives from
/// (config, base_seed, index); both views share the clean target but draw
/// interference class, content, and level independently.
pub fn sample_example(
    cfg: &CorpusConfig,
    fe: &FrontendConfig,
    base_seed: u64,
    index: u64,
) -> Result<MixtureExample> {
    let speakers = speaker_table(cfg, base_seed);
    let (kind_a, kind_b) = view_kinds(cfg, base_seed, index);
    let mut rng = stream(base_seed, "mixsim.example", &[index]);

    let target = rng.gen_range(0..cfg.n_speakers);
    let clean_utt = draw_utterance(&speakers[target], cfg, &mut rng)?;
    let enrollment_utt = draw_enrollment(&speakers[target], &clean_utt.phone_seq, cfg, &mut rng)?;

    let va = draw_view(kind_a, &clean_utt.wave, cfg, &speakers, target, &mut rng)?;
    let vb = draw_view(kind_b, &clean_utt.wave, cfg, &speakers, target, &mut rng)?;

    // The interferer enrollment draw is conditional, but the condition is a
    // pure function of (seed, index), so the draw sequence stays reproducible.
    let interferer = match &va.speech {
        Some((sp, utt)) => {
            let enr = draw_enrollment(&speakers[*sp], &utt.phone_seq, cfg, &mut rng)?;
            Some((*sp, utt.clone(), enr))
        }
        None => None,
    };

    // One gain for clean and both views keeps mixing additive after the peak
    // limit; each stored view is the elementwise sum of the stored clean and
    // the stored (scaled) interference.
    let peak_abs = |s: &[f64]| s.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let g = peak_gain(peak_abs(&va.wave_pre).max(peak_abs(&vb.wave_pre)).max(clean_utt.wave.peak()));
    let scale = |s: &[f64]| -> Vec<f64> { s.iter().map(|&x| x * g).collect() };
    let clean = Waveform::new(scale(&clean_utt.wave.samples), cfg.sample_rate)?;
    let ia: Vec<f64> = scale(&va.interference_pre);
    let ib: Vec<f64> = scale(&vb.interference_pre);
    let view_a = Waveform::new(clean.samples.iter().zip(&ia).map(|(&c, &i)| c + i).collect(), cfg.sample_rate)?;
    let view_b = Waveform::new(clean.samples.iter().zip(&ib).map(|(&c, &i)| c + i).collect(), cfg.sample_rate)?;

    let ge = peak_gain(enrollment_utt.wave.peak());
    let mut enrollment = enrollment_utt.wave.clone();
    enrollment.scale(ge);

    let phone_labels = clean_utt.frame_labels(clean.len(), fe)?;

    let interferer = match interferer {
        Some((sp, utt, enr)) => {
            let aligned = align_to(&utt.wave.samples, clean.len());
            let gi = peak_gain(peak_abs(&aligned));
            let gie = peak_gain(enr.wave.peak());
            let mut ienr = enr.wave.clone();
            ienr.scale(gie);
            Some(ExportedInterferer {
                speaker: sp,
                clean: Waveform::new(aligned.iter().map(|&x| x * gi).collect(), cfg.sample_rate)?,
                enrollment: ienr,
                phone_labels: utt.frame_labels(clean.len(), fe)?,
                norm_gain: gi,
                enrollment_norm_gain: gie,
            })
        }
        None => None,
    };

    Ok(MixtureExample {
        id: format!("ex{index:06}"),
        seed: derive_seed(base_seed, "mixsim.example", &[index]),
        clean,
        view_a,
        view_b,
        enrollment,
        target_speaker: target,
        mixture_type: kind_a,
        view_b_type: kind_b,
        phone_labels,
        clean_phone_seq: clean_utt.phone_seq.clone(),
        enrollment_phone_seq: enrollment_utt.phone_seq.clone(),
        view_a_sir_db: va.sir_db,
        view_a_snr_db: va.snr_db,
        view_b_sir_db: vb.sir_db,
        view_b_snr_db: vb.snr_db,
        view_a_interference: ia,
        view_b_interference: ib,
        norm_gain: g,
        enrollment_norm_gain: ge,
        interferer,
    })
}
