//! Corpus on disk: raw f32 PCM files plus a JSON-lines manifest.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::config::{Config, MixtureType};
use crate::error::{Error, Result};
use crate::mixsim::{sample_example, MixtureExample};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: u64,
    pub sample_rate: u32,
    pub clean: String,
    pub view_a: String,
    pub view_b: String,
    pub enrollment: String,
    pub target_speaker: usize,
    /// View A's interference class; view B's is `view_b_type`.
    pub mixture_type: MixtureType,
    pub view_b_type: MixtureType,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_a_sir_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_a_snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_b_sir_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_b_snr_db: Option<f64>,
    pub norm_gain: f64,
    pub enrollment_norm_gain: f64,
    pub phone_labels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_speaker: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_clean: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_enrollment: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_phone_labels: Option<Vec<usize>>,
}

impl ManifestRecord {
    /// Load one of this record's audio files; `rel` is a path field of the
    /// record, resolved against the manifest's directory.
    pub fn load_audio(&self, manifest_dir: &Path, rel: &str) -> Result<Waveform> {
        Waveform::read_f32_le(&manifest_dir.join(rel), self.sample_rate)
    }
}

fn write_example(ex: &MixtureExample, out_dir: &Path) -> Result<ManifestRecord> {
    let audio_dir = out_dir.join("audio");
    let rel = |suffix: &str| format!("audio/{}.{suffix}.f32", ex.id);
    let write = |w: &Waveform, suffix: &str| -> Result<String> {
        let r = rel(suffix);
        w.write_f32_le(&out_dir.join(&r))?;
        Ok(r)
    };
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(audio_dir.display().to_string(), e))?;
    let clean = write(&ex.clean, "clean")?;
    let view_a = write(&ex.view_a, "view_a")?;
    let view_b = write(&ex.view_b, "view_b")?;
    let enrollment = write(&ex.enrollment, "enrollment")?;
    let (mut isp, mut iclean, mut ienr, mut ilabels) = (None, None, None, None);
    if let Some(inf) = &ex.interferer {
        isp = Some(inf.speaker);
        iclean = Some(write(&inf.clean, "interferer")?);
        ienr = Some(write(&inf.enrollment, "interferer_enrollment")?);
        ilabels = Some(inf.phone_labels.clone());
    }
    Ok(ManifestRecord {
        id: ex.id.clone(),
        seed: ex.seed,
        sample_rate: ex.clean.sample_rate,
        clean,
        view_a,
        view_b,
        enrollment,
        target_speaker: ex.target_speaker,
        mixture_type: ex.mixture_type,
        view_b_type: ex.view_b_type,
        view_a_sir_db: ex.view_a_sir_db,
        view_a_snr_db: ex.view_a_snr_db,
        view_b_sir_db: ex.view_b_sir_db,
        view_b_snr_db: ex.view_b_snr_db,
        norm_gain: ex.norm_gain,
        enrollment_norm_gain: ex.enrollment_norm_gain,
        phone_labels: ex.phone_labels.clone(),
        interferer_speaker: isp,
        interferer_clean: iclean,
        interferer_enrollment: ienr,
        interferer_phone_labels: ilabels,
    })
}

/// Synthesize the whole corpus under `out_dir` and return the manifest path.
pub fn simulate_corpus(cfg: &Config, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut lines = Vec::with_capacity(cfg.corpus.n_examples);
    for i in 0..cfg.corpus.n_examples {
        let ex = sample_example(&cfg.corpus, &cfg.frontend, cfg.seed, i as u64)?;
        let rec = write_example(&ex, out_dir)?;
        lines.push(serde_json::to_string(&rec)?);
    }
    let mut f =
        std::fs::File::create(&manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    for line in &lines {
        writeln!(f, "{line}").map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    }
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Manifest(format!("{}: no records", path.display())));
    }
    Ok(out)
}
