//! Run configuration: one TOML file covering every stage, with defaults that
//! match the desk-scale setup exercised by the acceptance tests.
//!
//! Precedence is defaults < file < command-line overrides; unknown keys are
//! rejected so typos fail loudly.  The model digest covers only sections that
//! change parameter shapes or semantics, so checkpoints stay loadable across
//! edits to, say, logging cadence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Base seed for every derived stream; no wall-clock seeding anywhere.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub frontend: FrontendConfig,
    pub masking: MaskingConfig,
    pub spkemb: SpkembConfig,
    pub sate: SateConfig,
    pub quantizer: QuantizerConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_examples: usize,
    pub n_speakers: usize,
    pub sample_rate: u32,
    /// Size of the toy phone alphabet.
    pub n_phones: usize,
    pub phones_per_utt_min: usize,
    pub phones_per_utt_max: usize,
    pub phone_ms_min: u32,
    pub phone_ms_max: u32,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub n_harmonics: usize,
    pub enrollment_s: f64,
    /// Interference classes a view may draw; each view draws independently.
    pub mixture_types: Vec<MixtureType>,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    pub sir_db_min: f64,
    pub sir_db_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum MixtureType {
    Noisy,
    TwoTalker,
    NoisyTwoTalker,
}

impl MixtureType {
    pub fn as_str(self) -> &'static str {
        match self {
            MixtureType::Noisy => "noisy",
            MixtureType::TwoTalker => "two_talker",
            MixtureType::NoisyTwoTalker => "noisy_two_talker",
        }
    }

    pub fn has_speech(self) -> bool {
        matches!(self, MixtureType::TwoTalker | MixtureType::NoisyTwoTalker)
    }

    pub fn has_noise(self) -> bool {
        matches!(self, MixtureType::Noisy | MixtureType::NoisyTwoTalker)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub d: usize,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl FrontendConfig {
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn receptive_field(&self) -> usize {
        // Walk back from a single output sample through each layer.
        let mut rf = 1usize;
        for (&k, &s) in self.kernels.iter().zip(&self.strides).rev() {
            rf = (rf - 1) * s + k;
        }
        rf
    }

    /// Frames produced for a waveform of `len` samples; None when too short.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let rf = self.receptive_field();
        if len < rf {
            None
        } else {
            Some((len - rf) / self.hop() + 1)
        }
    }

    /// Sample index at the center of frame `t`'s receptive field; phone labels
    /// are read off here so they align with what the encoder actually sees.
    pub fn frame_center(&self, t: usize) -> usize {
        t * self.hop() + self.receptive_field() / 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub p_start: f64,
    pub span: usize,
    /// One mask plan reused by both views (frame correspondence for the
    /// cross-correlation loss); set false for independent plans.
    pub shared_across_views: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpkembConfig {
    pub e_dim: usize,
    /// Frozen hash-based embeddings keyed by speaker id instead of the learned
    /// enrollment encoder; unit tests and ablations only.
    pub oracle: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SateConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub satl_index: usize,
    /// false = every layer uses plain layer norm (speaker-agnostic encoder).
    pub satl_enabled: bool,
    /// true = conditional norm replaces both norms of the adapted layer;
    /// false = pre-attention norm only.
    pub satl_both_norms: bool,
    pub ln_eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub k: usize,
    /// Number of encoder layers run when extracting clustering features
    /// (2 = output of the second layer).
    pub layer_index: usize,
    pub max_iters: usize,
    /// Frames subsampled for fitting; assignment always covers everything.
    pub fit_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Projection width shared by the prediction head and its codewords.
    pub head_dim: usize,
    /// Projection width of the block feeding the cross-correlation loss.
    pub lpb_dim: usize,
    pub temperature: f64,
    /// Weight of the off-diagonal (redundancy) term.
    pub lambda: f64,
    /// Frames sampled per example for the cross-correlation loss (clamped to T).
    pub cc_frames: usize,
    pub center_columns: bool,
    /// Cosine head (true) or plain affine logits (false).
    pub cosine_head: bool,
    pub norm_floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    /// Train on view A only with the cross-correlation loss disabled.
    pub one_path: bool,
    /// Training scalar width, "f32" or "f64"; gradient audits always run in
    /// f64 regardless.
    pub dtype: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            corpus: CorpusConfig::default(),
            frontend: FrontendConfig::default(),
            masking: MaskingConfig::default(),
            spkemb: SpkembConfig::default(),
            sate: SateConfig::default(),
            quantizer: QuantizerConfig::default(),
            objective: ObjectiveConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_examples: 512,
            n_speakers: 16,
            sample_rate: 16000,
            n_phones: 12,
            phones_per_utt_min: 8,
            phones_per_utt_max: 16,
            phone_ms_min: 60,
            phone_ms_max: 120,
            f0_min_hz: 120.0,
            f0_max_hz: 300.0,
            n_harmonics: 24,
            enrollment_s: 1.0,
            mixture_types: vec![MixtureType::Noisy, MixtureType::TwoTalker, MixtureType::NoisyTwoTalker],
            snr_db_min: -5.0,
            snr_db_max: 5.0,
            sir_db_min: -5.0,
            sir_db_max: 5.0,
        }
    }
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { d: 64, kernels: vec![16, 4, 5, 4], strides: vec![8, 4, 5, 2] }
    }
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { p_start: 0.08, span: 10, shared_across_views: true }
    }
}

impl Default for SpkembConfig {
    fn default() -> Self {
        SpkembConfig { e_dim: 32, oracle: false }
    }
}

impl Default for SateConfig {
    fn default() -> Self {
        SateConfig {
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            satl_index: 0,
            satl_enabled: true,
            satl_both_norms: true,
            ln_eps: 1e-5,
        }
    }
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { k: 32, layer_index: 2, max_iters: 50, fit_frames: 20000 }
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            head_dim: 32,
            lpb_dim: 32,
            temperature: 0.1,
            lambda: 5e-3,
            cc_frames: 64,
            center_columns: true,
            cosine_head: true,
            norm_floor: 1e-8,
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 2000,
            lr: 5e-4,
            warmup_steps: 200,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            checkpoint_every: 500,
            one_path: false,
            dtype: "f32".into(),
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_speakers < 2 {
            return Err(Error::Config("corpus.n_speakers must be at least 2".into()));
        }
        if c.n_phones < 2 {
            return Err(Error::Config("corpus.n_phones must be at least 2".into()));
        }
        if c.phones_per_utt_min < 1 || c.phones_per_utt_min > c.phones_per_utt_max {
            return Err(Error::Config("corpus.phones_per_utt range is empty".into()));
        }
        if c.phone_ms_min < 40 || c.phone_ms_min > c.phone_ms_max {
            return Err(Error::Config("corpus.phone_ms range must start at 40 ms or more".into()));
        }
        if !(c.f0_min_hz > 0.0 && c.f0_max_hz > c.f0_min_hz) {
            return Err(Error::Config("corpus.f0 range is empty or non-positive".into()));
        }
        if c.n_speakers > 1 {
            let spacing = (c.f0_max_hz - c.f0_min_hz) / (c.n_speakers - 1) as f64;
            if spacing < 10.0 {
                return Err(Error::Config(format!(
                    "f0 spacing {spacing:.1} Hz < 10 Hz; widen corpus.f0 range or reduce n_speakers"
                )));
            }
        }
        if c.mixture_types.is_empty() {
            return Err(Error::Config("corpus.mixture_types must not be empty".into()));
        }
        if c.snr_db_min > c.snr_db_max || c.sir_db_min > c.sir_db_max {
            return Err(Error::Config("corpus snr/sir ranges are empty".into()));
        }
        let enroll_samples = (c.enrollment_s * c.sample_rate as f64) as usize;
        if enroll_samples < self.frontend.receptive_field() {
            return Err(Error::Config("corpus.enrollment_s shorter than the frontend receptive field".into()));
        }

        let f = &self.frontend;
        if f.d == 0 {
            return Err(Error::Config("frontend.d must be positive".into()));
        }
        if f.kernels.len() != f.strides.len() || f.kernels.is_empty() {
            return Err(Error::Config("frontend.kernels and frontend.strides must be equal-length and non-empty".into()));
        }
        if f.kernels.iter().zip(&f.strides).any(|(&k, &s)| s == 0 || k < s) {
            return Err(Error::Config("each frontend kernel must be at least its stride".into()));
        }

        let m = &self.masking;
        if !(0.0..=1.0).contains(&m.p_start) {
            return Err(Error::Config("masking.p_start must lie in [0, 1]".into()));
        }
        if m.span == 0 {
            return Err(Error::Config("masking.span must be at least 1".into()));
        }

        if self.spkemb.e_dim == 0 {
            return Err(Error::Config("spkemb.e_dim must be positive".into()));
        }

        let s = &self.sate;
        if s.n_layers == 0 {
            return Err(Error::Config("sate.n_layers must be positive".into()));
        }
        if s.satl_index >= s.n_layers {
            return Err(Error::Config(format!(
                "sate.satl_index {} out of range for {} layers",
                s.satl_index, s.n_layers
            )));
        }
        if s.n_heads == 0 || f.d % s.n_heads != 0 {
            return Err(Error::Config("sate.n_heads must divide frontend.d".into()));
        }
        if s.ln_eps <= 0.0 {
            return Err(Error::Config("sate.ln_eps must be positive".into()));
        }

        let q = &self.quantizer;
        if q.k < 2 {
            return Err(Error::Config("quantizer.k must be at least 2".into()));
        }
        if q.layer_index > s.n_layers {
            return Err(Error::Config("quantizer.layer_index exceeds sate.n_layers".into()));
        }
        if q.fit_frames < q.k {
            return Err(Error::Config("quantizer.fit_frames must be at least quantizer.k".into()));
        }

        let o = &self.objective;
        if o.head_dim == 0 || o.lpb_dim == 0 {
            return Err(Error::Config("objective projection dims must be positive".into()));
        }
        if o.temperature <= 0.0 {
            return Err(Error::Config("objective.temperature must be positive".into()));
        }
        if o.lambda < 0.0 {
            return Err(Error::Config("objective.lambda must be non-negative".into()));
        }
        if o.cc_frames < 2 {
            return Err(Error::Config("objective.cc_frames must be at least 2".into()));
        }
        if o.norm_floor <= 0.0 {
            return Err(Error::Config("objective.norm_floor must be positive".into()));
        }

        let t = &self.trainer;
        if t.lr <= 0.0 {
            return Err(Error::Config("trainer.lr must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("trainer betas must lie in [0, 1)".into()));
        }
        if t.eps <= 0.0 {
            return Err(Error::Config("trainer.eps must be positive".into()));
        }
        if t.grad_clip <= 0.0 {
            return Err(Error::Config("trainer.grad_clip must be positive".into()));
        }
        if t.dtype != "f32" && t.dtype != "f64" {
            return Err(Error::Config(format!("trainer.dtype must be \"f32\" or \"f64\", got {:?}", t.dtype)));
        }
        Ok(())
    }

    /// Digest over the sections that determine parameter shapes and the
    /// meaning of stored tensors; checkpoints refuse to load across changes.
    pub fn model_digest(&self) -> String {
        #[derive(Serialize)]
        struct ModelScope<'a> {
            frontend: &'a FrontendConfig,
            spkemb: &'a SpkembConfig,
            sate: &'a SateConfig,
            quantizer_k: usize,
            objective_head_dim: usize,
            objective_lpb_dim: usize,
            objective_cosine_head: bool,
        }
        let scope = ModelScope {
            frontend: &self.frontend,
            spkemb: &self.spkemb,
            sate: &self.sate,
            quantizer_k: self.quantizer.k,
            objective_head_dim: self.objective.head_dim,
            objective_lpb_dim: self.objective.lpb_dim,
            objective_cosine_head: self.objective.cosine_head,
        };
        let json = serde_json::to_string(&scope).expect("digest scope serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
