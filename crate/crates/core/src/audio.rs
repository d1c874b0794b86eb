//! Waveforms and their on-disk form: raw 32-bit little-endian float PCM.
//!
//! Synthesis runs in f64; files hold f32.  Reading widens exactly, so a
//! round-trip through disk is deterministic even though writing rounds.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
        if samples.is_empty() {
            return Err(Error::Audio("empty waveform".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()))
    }

    pub fn rms(&self) -> f64 {
        let ss: f64 = self.samples.iter().map(|&s| s * s).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    /// Scale every sample in place.
    pub fn scale(&mut self, gain: f64) {
        for s in &mut self.samples {
            *s *= gain;
        }
    }

    pub fn write_f32_le(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.samples.len() * 4);
        for &s in &self.samples {
            buf.extend_from_slice(&(s as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_f32_le(path: &Path, sample_rate: u32) -> Result<Waveform> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        if buf.len() % 4 != 0 {
            return Err(Error::Audio(format!("{}: length {} is not a multiple of 4", path.display(), buf.len())));
        }
        let samples: Vec<f64> =
            buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Waveform::new(samples, sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_and_peak_match_hand_values() {
        let w = Waveform::new(vec![1.0, -1.0, 1.0, -1.0], 16000).unwrap();
        assert_eq!(w.rms(), 1.0);
        assert_eq!(w.peak(), 1.0);
        let w = Waveform::new(vec![0.5, 0.5, 0.5, 0.5], 16000).unwrap();
        assert_eq!(w.rms(), 0.5);
    }

    #[test]
    fn disk_round_trip_is_exact_after_first_write() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.f32");
        let w = Waveform::new(vec![0.1, -0.25, 1.0 / 3.0], 16000).unwrap();
        w.write_f32_le(&p).unwrap();
        let r1 = Waveform::read_f32_le(&p, 16000).unwrap();
        r1.write_f32_le(&p).unwrap();
        let r2 = Waveform::read_f32_le(&p, 16000).unwrap();
        assert_eq!(r1, r2);
        assert!((r1.samples[2] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![f64::NAN], 16000).is_err());
    }
}
