//! Full model assembly: one parameter store holding the frontend, speaker
//! embedder, encoder, mask token, prediction head, and the projection feeding
//! the cross-correlation loss — in a fixed registration order that doubles as
//! the checkpoint layout.  Initialization draws from per-parameter-name
//! streams, so the f32 model is bitwise the cast of the f64 model.

use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::frontend::FrontendParams;
use crate::real::{r, Real};
use crate::rng::stream;
use crate::sate::SateParams;
use crate::spkemb::SpkembParams;
use crate::tensor::{ParamId, ParamStore};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub enum HeadParams {
    /// Cosine similarity between a projected frame and learned codewords,
    /// divided by the temperature.
    Cosine { proj_w: ParamId, proj_b: ParamId, codes: ParamId },
    /// Plain affine logits.
    Affine { w: ParamId, b: ParamId },
}

#[derive(Debug, Clone)]
pub struct Model<S: Real> {
    pub store: ParamStore<S>,
    pub frontend: FrontendParams,
    pub spkemb: SpkembParams,
    pub sate: SateParams,
    /// `[1, d]` learned embedding written over masked frames.
    pub mask_embed: ParamId,
    pub head: HeadParams,
    /// `[d, lpb_dim]` / `[1, lpb_dim]` projection whose outputs feed the
    /// cross-correlation loss.
    pub lpb_w: ParamId,
    pub lpb_b: ParamId,
    pub digest: String,
}

impl<S: Real> Model<S> {
    pub fn init(cfg: &Config) -> Result<Model<S>> {
        cfg.validate()?;
        let d = cfg.frontend.d;
        let seed = cfg.seed;
        let mut store = ParamStore::new();
        let frontend = FrontendParams::init(&mut store, &cfg.frontend, seed);
        let spkemb = SpkembParams::init(&mut store, d, &cfg.spkemb, seed);
        let sate = SateParams::init(&mut store, d, cfg.spkemb.e_dim, &cfg.sate, seed);

        let mask_embed = normal(&mut store, "mask.embed".into(), 1, d, 0.1, seed);

        let k = cfg.quantizer.k;
        let hd = cfg.objective.head_dim;
        let head = if cfg.objective.cosine_head {
            HeadParams::Cosine {
                proj_w: normal(&mut store, "head.proj.weight".into(), d, hd, (1.0 / d as f64).sqrt(), seed),
                proj_b: store.add("head.proj.bias", 1, hd, vec![S::zero(); hd]),
                codes: normal(&mut store, "head.codes".into(), k, hd, (1.0 / hd as f64).sqrt(), seed),
            }
        } else {
            HeadParams::Affine {
                w: normal(&mut store, "head.affine.weight".into(), d, k, (1.0 / d as f64).sqrt(), seed),
                b: store.add("head.affine.bias", 1, k, vec![S::zero(); k]),
            }
        };

        let lb = cfg.objective.lpb_dim;
        let lpb_w = normal(&mut store, "lpb.weight".into(), d, lb, (1.0 / d as f64).sqrt(), seed);
        let lpb_b = store.add("lpb.bias", 1, lb, vec![S::zero(); lb]);

        Ok(Model { store, frontend, spkemb, sate, mask_embed, head, lpb_w, lpb_b, digest: cfg.model_digest() })
    }

    /// Replace every parameter value with the snapshot's, keeping handles.
    pub fn load_values(&mut self, snap: &Snapshot<S>) -> Result<()> {
        if snap.digest != self.digest {
            return Err(Error::Checkpoint(format!(
                "model digest {} does not match checkpoint digest {}",
                self.digest, snap.digest
            )));
        }
        if snap.params.len() != self.store.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (pid, p) in snap.params.iter() {
            let own = self.store.get(pid);
            if own.name != p.name || own.rows != p.rows || own.cols != p.cols {
                return Err(Error::Checkpoint(format!("parameter layout mismatch at {}", p.name)));
            }
            self.store.set_data(pid, p.data.as_ref().clone());
        }
        Ok(())
    }
}

fn normal<S: Real>(store: &mut ParamStore<S>, name: String, rows: usize, cols: usize, std: f64, seed: u64) -> ParamId {
    let mut rng = stream(seed, &name, &[]);
    let data: Vec<S> = (0..rows * cols)
        .map(|_| r::<S>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std))
        .collect();
    store.add(name, rows, cols, data)
}

// ── snapshots ────────────────────────────────────────────────────────────────

/// On-disk training state: parameters plus (optionally) optimizer moments and
/// the step counter.  Format: one JSON header line, then raw little-endian
/// scalars — all parameters in registration order, then first moments, then
/// second moments.
#[derive(Debug, Clone)]
pub struct Snapshot<S: Real> {
    pub step: u64,
    pub digest: String,
    pub params: ParamStore<S>,
    pub moments: Option<(Vec<Vec<S>>, Vec<Vec<S>>)>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    version: u32,
    dtype: String,
    digest: String,
    step: u64,
    has_moments: bool,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_snapshot<S: Real>(path: &Path, snap: &Snapshot<S>) -> Result<()> {
    let header = SnapshotHeader {
        version: 1,
        dtype: S::DTYPE.into(),
        digest: snap.digest.clone(),
        step: snap.step,
        has_moments: snap.moments.is_some(),
        params: snap
            .params
            .iter()
            .map(|(_, p)| ParamMeta { name: p.name.clone(), rows: p.rows, cols: p.cols })
            .collect(),
    };
    let mut payload = Vec::with_capacity(snap.params.scalar_count() * S::BYTES * 3 + 4096);
    for (pid, _) in snap.params.iter() {
        for &v in snap.params.data(pid) {
            v.write_le(&mut payload);
        }
    }
    if let Some((m, v)) = &snap.moments {
        if m.len() != snap.params.len() || v.len() != snap.params.len() {
            return Err(Error::Checkpoint("moment vectors do not match the parameter count".into()));
        }
        for block in m.iter().chain(v.iter()) {
            for &x in block {
                x.write_le(&mut payload);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&payload).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Scalar width recorded in a snapshot's header, read without touching the
/// payload; callers dispatch f32/f64 loading on it.
pub fn snapshot_dtype(path: &Path) -> Result<String> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(f);
    let mut header_line = String::new();
    reader.read_line(&mut header_line).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: SnapshotHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok(header.dtype)
}

pub fn load_snapshot<S: Real>(path: &Path) -> Result<Snapshot<S>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(f);
    let mut header_line = String::new();
    reader.read_line(&mut header_line).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: SnapshotHeader =
        serde_json::from_str(&header_line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported snapshot version {}", header.version)));
    }
    if header.dtype != S::DTYPE {
        return Err(Error::Checkpoint(format!("snapshot holds {} values, expected {}", header.dtype, S::DTYPE)));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path.display().to_string(), e))?;

    let total: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    let blocks = if header.has_moments { 3 } else { 1 };
    if payload.len() != total * blocks * S::BYTES {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            total * blocks * S::BYTES
        )));
    }

    let mut off = 0usize;
    let mut take = |n: usize| -> Vec<S> {
        let out = (0..n)
            .map(|i| S::read_le(&payload[off + i * S::BYTES..]))
            .collect();
        off += n * S::BYTES;
        out
    };
    let mut params = ParamStore::new();
    for meta in &header.params {
        let data = take(meta.rows * meta.cols);
        params.add(meta.name.clone(), meta.rows, meta.cols, data);
    }
    let moments = if header.has_moments {
        let m: Vec<Vec<S>> = header.params.iter().map(|p| take(p.rows * p.cols)).collect();
        let v: Vec<Vec<S>> = header.params.iter().map(|p| take(p.rows * p.cols)).collect();
        Some((m, v))
    } else {
        None
    };
    Ok(Snapshot { step: header.step, digest: header.digest, params, moments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.frontend.d = 8;
        cfg.frontend.kernels = vec![4, 3];
        cfg.frontend.strides = vec![2, 2];
        cfg.corpus.enrollment_s = 0.05;
        cfg.corpus.sample_rate = 1000;
        cfg.sate.n_layers = 2;
        cfg.sate.n_heads = 2;
        cfg.sate.ffn_dim = 12;
        cfg.spkemb.e_dim = 4;
        cfg.quantizer.k = 5;
        cfg.quantizer.layer_index = 1;
        cfg.quantizer.fit_frames = 16;
        cfg.objective.head_dim = 6;
        cfg.objective.lpb_dim = 6;
        cfg
    }

    #[test]
    fn init_is_deterministic_with_unique_names() {
        let cfg = tiny_cfg();
        let a = Model::<f64>::init(&cfg).unwrap();
        let b = Model::<f64>::init(&cfg).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        let mut names = std::collections::HashSet::new();
        for (pid, p) in a.store.iter() {
            assert!(names.insert(p.name.clone()), "duplicate parameter name {}", p.name);
            assert_eq!(a.store.data(pid), b.store.data(pid), "{} differs across inits", p.name);
        }
    }

    #[test]
    fn f32_init_is_the_cast_of_f64_init() {
        let cfg = tiny_cfg();
        let big = Model::<f64>::init(&cfg).unwrap();
        let small = Model::<f32>::init(&cfg).unwrap();
        for (pid, p) in big.store.iter() {
            let casts: Vec<f32> = p.data.iter().map(|&v| v as f32).collect();
            assert_eq!(&casts, small.store.data(pid), "{}", p.name);
        }
    }

    #[test]
    fn head_variant_tracks_the_config() {
        let mut cfg = tiny_cfg();
        assert!(matches!(Model::<f64>::init(&cfg).unwrap().head, HeadParams::Cosine { .. }));
        cfg.objective.cosine_head = false;
        let m = Model::<f64>::init(&cfg).unwrap();
        match m.head {
            HeadParams::Affine { w, b } => {
                assert_eq!((m.store.get(w).rows, m.store.get(w).cols), (8, 5));
                assert_eq!((m.store.get(b).rows, m.store.get(b).cols), (1, 5));
            }
            _ => panic!("expected affine head"),
        }
    }

    #[test]
    fn snapshot_round_trips_bitwise() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::init(&cfg).unwrap();
        let moments = Some((
            (0..model.store.len()).map(|pid| model.store.data(pid).iter().map(|v| v * 0.5).collect()).collect(),
            (0..model.store.len()).map(|pid| model.store.data(pid).iter().map(|v| v * v).collect()).collect(),
        ));
        let snap = Snapshot { step: 77, digest: model.digest.clone(), params: model.store.clone(), moments };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        save_snapshot(&path, &snap).unwrap();
        let back: Snapshot<f32> = load_snapshot(&path).unwrap();
        assert_eq!(back.step, 77);
        assert_eq!(back.digest, snap.digest);
        for (pid, p) in snap.params.iter() {
            assert_eq!(p.data.as_ref(), back.params.data(pid));
        }
        let (m0, v0) = snap.moments.as_ref().unwrap();
        let (m1, v1) = back.moments.as_ref().unwrap();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn snapshot_rejects_wrong_dtype_and_digest() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::init(&cfg).unwrap();
        let snap = Snapshot { step: 0, digest: model.digest.clone(), params: model.store.clone(), moments: None };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        save_snapshot(&path, &snap).unwrap();
        assert_eq!(snapshot_dtype(&path).unwrap(), "f32");
        assert!(load_snapshot::<f64>(&path).is_err(), "dtype mismatch must fail");

        let mut other_cfg = tiny_cfg();
        other_cfg.frontend.d = 16;
        other_cfg.sate.n_heads = 4;
        let mut other = Model::<f32>::init(&other_cfg).unwrap();
        let loaded: Snapshot<f32> = load_snapshot(&path).unwrap();
        assert!(other.load_values(&loaded).is_err(), "digest mismatch must fail");
    }

    #[test]
    fn load_values_restores_a_trained_store() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::init(&cfg).unwrap();
        let mut trained = model.store.clone();
        for pid in 0..trained.len() {
            for v in trained.data_mut(pid).iter_mut() {
                *v += 0.25;
            }
        }
        let snap = Snapshot { step: 5, digest: model.digest.clone(), params: trained.clone(), moments: None };
        model.load_values(&snap).unwrap();
        for pid in 0..trained.len() {
            assert_eq!(model.store.data(pid), trained.data(pid));
        }
    }
}
