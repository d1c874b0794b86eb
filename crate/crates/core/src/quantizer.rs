//! Pseudo-label construction: k-means over encoder features of the clean
//! target utterances.  Fitting always runs in f64.  Labels are written once
//! per corpus and stay fixed for a whole training run; examples whose view
//! carries a speech interferer also get that talker's labels for evaluation.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mixsim::{read_manifest, ManifestRecord};
use crate::model::Model;
use crate::real::{r, Real};
use crate::rng::stream;
use crate::tensor::Tape;

// ── k-means ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// Row-major `[k, dim]`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct FitTrace {
    /// Objective (sum of squared distances to the nearest centroid) after
    /// initialization, then after every Lloyd iteration.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub reseeds: usize,
}

impl KMeans {
    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, point: &[f64]) -> usize {
        debug_assert_eq!(point.len(), self.dim);
        let mut best = (0usize, f64::INFINITY);
        for c in 0..self.k {
            let row = &self.centroids[c * self.dim..(c + 1) * self.dim];
            let d2: f64 = row.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.1 {
                best = (c, d2);
            }
        }
        best.0
    }

    pub fn assign_rows(&self, rows: &[f64], n: usize) -> Vec<usize> {
        (0..n).map(|i| self.assign(&rows[i * self.dim..(i + 1) * self.dim])).collect()
    }

    pub fn objective(&self, rows: &[f64], n: usize) -> f64 {
        (0..n)
            .map(|i| {
                let p = &rows[i * self.dim..(i + 1) * self.dim];
                let c = self.assign(p);
                let row = &self.centroids[c * self.dim..(c + 1) * self.dim];
                row.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum()
    }
}

/// Lloyd's algorithm with distance-weighted (k-means++) initialization.
/// Empty clusters are reseeded at the point farthest from its centroid.
/// Stops when the objective's relative improvement falls under 1e-6.
pub fn fit_kmeans(rows: &[f64], n: usize, dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<(KMeans, FitTrace)> {
    if n < k {
        return Err(Error::Clustering(format!("{n} points cannot seed {k} clusters")));
    }
    if rows.len() != n * dim {
        return Err(Error::Clustering("row buffer does not match n * dim".into()));
    }
    let mut rng = stream(seed, "kmeans.init", &[]);
    let point = |i: usize| &rows[i * dim..(i + 1) * dim];

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rand::Rng::gen_range(&mut rng, 0..n);
    centroids.extend_from_slice(point(first));
    let mut min_d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        let last = &centroids[(c - 1) * dim..c * dim];
        for i in 0..n {
            let d2: f64 = last.iter().zip(point(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rand::Rng::gen_range(&mut rng, 0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rand::Rng::gen_range(&mut rng, 0..n)
        };
        centroids.extend_from_slice(point(pick));
    }

    let mut km = KMeans { centroids, k, dim };
    let mut trace = FitTrace { objectives: vec![km.objective(rows, n)], iterations: 0, reseeds: 0 };

    let mut assignment = vec![0usize; n];
    for _ in 0..max_iters {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = km.assign(point(i));
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in km.centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // Move the empty centroid onto the worst-explained point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da: f64 = km.centroids[assignment[a] * dim..(assignment[a] + 1) * dim]
                            .iter()
                            .zip(point(a))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        let db: f64 = km.centroids[assignment[b] * dim..(assignment[b] + 1) * dim]
                            .iter()
                            .zip(point(b))
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                let src = point(far).to_vec();
                km.centroids[c * dim..(c + 1) * dim].copy_from_slice(&src);
                trace.reseeds += 1;
            }
        }
        trace.iterations += 1;
        let obj = km.objective(rows, n);
        let prev = *trace.objectives.last().unwrap();
        trace.objectives.push(obj);
        if prev - obj <= prev.max(1e-12) * 1e-6 {
            break;
        }
    }
    Ok((km, trace))
}

/// Shannon entropy (nats) of a label multiset.
pub fn label_entropy(labels: impl Iterator<Item = usize>, k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for l in labels {
        counts[l] += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

// ── codebook and label files ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Codebook {
    pub kmeans: KMeans,
    pub layer_index: usize,
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    version: u32,
    k: usize,
    dim: usize,
    layer_index: usize,
    digest: String,
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let header = CodebookHeader {
        version: 1,
        k: cb.kmeans.k,
        dim: cb.kmeans.dim,
        layer_index: cb.layer_index,
        digest: cb.digest.clone(),
    };
    let mut payload = Vec::with_capacity(cb.kmeans.centroids.len() * 8);
    for &v in &cb.kmeans.centroids {
        v.write_le(&mut payload);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{}", serde_json::to_string(&header)?).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&payload).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header: CodebookHeader =
        serde_json::from_str(&line).map_err(|e| Error::Labels(format!("bad codebook header: {e}")))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path.display().to_string(), e))?;
    if payload.len() != header.k * header.dim * 8 {
        return Err(Error::Labels("codebook payload size mismatch".into()));
    }
    let centroids: Vec<f64> = (0..header.k * header.dim).map(|i| f64::read_le(&payload[i * 8..])).collect();
    Ok(Codebook {
        kmeans: KMeans { centroids, k: header.k, dim: header.dim },
        layer_index: header.layer_index,
        digest: header.digest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: String,
    pub labels: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_labels: Option<Vec<usize>>,
}

pub fn write_labels(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for rec in records {
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Labels(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Labels(format!("{}: no records", path.display())));
    }
    Ok(out)
}

pub fn label_map(records: Vec<LabelRecord>) -> HashMap<String, LabelRecord> {
    records.into_iter().map(|r| (r.id.clone(), r)).collect()
}

// ── feature extraction and label building ──────────────────────────────────

/// Encoder features of a clean utterance conditioned on its own speaker's
/// enrollment, from the configured intermediate layer.  Returns row-major
/// `[t, d]` as f64 plus the frame count.
pub fn clean_features<S: Real>(
    model: &Model<S>,
    cfg: &Config,
    clean: &[S],
    enrollment: &[S],
) -> Result<(Vec<f64>, usize)> {
    let mut tape = Tape::new();
    let e = model.spkemb.embed(&mut tape, &model.store, &model.frontend, enrollment, r::<S>(cfg.objective.norm_floor))?;
    let z = model.frontend.encode(&mut tape, &model.store, clean)?;
    let cond = if model.sate.satl_enabled { Some(e) } else { None };
    let enc = model.sate.encode(&mut tape, &model.store, z, cond)?;
    let h = enc.hidden[cfg.quantizer.layer_index];
    let (t, _) = tape.dims(h);
    Ok((tape.data(h).iter().map(|v| v.as_f64()).collect(), t))
}

pub struct LabelsOutput {
    pub codebook_path: PathBuf,
    pub labels_path: PathBuf,
    pub entropy: f64,
    pub fit_frames_used: usize,
    pub trace: FitTrace,
}

/// Label a corpus with an already-fitted codebook (held-out evaluation sets
/// must live in the same cluster space as the training labels).  The encoder
/// must match the codebook's recorded architecture.
pub fn assign_labels<S: Real>(
    cfg: &Config,
    manifest_path: &Path,
    model: &Model<S>,
    codebook: &Codebook,
    out_dir: &Path,
) -> Result<PathBuf> {
    if codebook.digest != model.digest {
        return Err(Error::Labels(format!(
            "codebook was fitted on encoder {} but this encoder is {}",
            codebook.digest, model.digest
        )));
    }
    if codebook.layer_index != cfg.quantizer.layer_index {
        return Err(Error::Labels(format!(
            "codebook features come from layer {} but the configuration reads layer {}",
            codebook.layer_index, cfg.quantizer.layer_index
        )));
    }
    let records = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut label_records = Vec::with_capacity(records.len());
    for rec in &records {
        let clean = load_wave_as::<S>(rec, dir, &rec.clean)?;
        let enroll = load_wave_as::<S>(rec, dir, &rec.enrollment)?;
        let (rows, t) = clean_features(model, cfg, &clean, &enroll)?;
        let labels = codebook.kmeans.assign_rows(&rows, t);
        let interferer_labels = match (&rec.interferer_clean, &rec.interferer_enrollment) {
            (Some(iclean), Some(ienroll)) => {
                let cw = load_wave_as::<S>(rec, dir, iclean)?;
                let ew = load_wave_as::<S>(rec, dir, ienroll)?;
                let (irows, it) = clean_features(model, cfg, &cw, &ew)?;
                Some(codebook.kmeans.assign_rows(&irows, it))
            }
            _ => None,
        };
        label_records.push(LabelRecord { id: rec.id.clone(), labels, interferer_labels });
    }
    let labels_path = out_dir.join("labels.jsonl");
    write_labels(&labels_path, &label_records)?;
    Ok(labels_path)
}

fn load_wave_as<S: Real>(rec: &ManifestRecord, dir: &Path, rel: &str) -> Result<Vec<S>> {
    Ok(rec.load_audio(dir, rel)?.samples.iter().map(|&v| r::<S>(v)).collect())
}

/// Fit the codebook on clean-target features across the corpus and write
/// `codebook.bin` + `labels.jsonl` under `out_dir`.
pub fn build_labels<S: Real>(cfg: &Config, manifest_path: &Path, model: &Model<S>, out_dir: &Path) -> Result<LabelsOutput> {
    let records = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let mut feats: Vec<(Vec<f64>, usize)> = Vec::with_capacity(records.len());
    let mut dim = 0usize;
    for rec in &records {
        let clean = load_wave_as::<S>(rec, dir, &rec.clean)?;
        let enroll = load_wave_as::<S>(rec, dir, &rec.enrollment)?;
        let (rows, t) = clean_features(model, cfg, &clean, &enroll)?;
        dim = rows.len() / t;
        feats.push((rows, t));
    }

    let total: usize = feats.iter().map(|(_, t)| t).sum();
    let budget = cfg.quantizer.fit_frames.min(total);
    let mut fit_rows: Vec<f64>;
    if budget < total {
        let mut rng = stream(cfg.seed, "kmeans.fit.subsample", &[]);
        let mut picked = rand::seq::index::sample(&mut rng, total, budget).into_vec();
        picked.sort_unstable();
        fit_rows = Vec::with_capacity(budget * dim);
        let mut cursor = 0usize;
        let mut base = 0usize;
        for (rows, t) in &feats {
            while cursor < picked.len() && picked[cursor] < base + t {
                let local = picked[cursor] - base;
                fit_rows.extend_from_slice(&rows[local * dim..(local + 1) * dim]);
                cursor += 1;
            }
            base += t;
        }
    } else {
        fit_rows = Vec::with_capacity(total * dim);
        for (rows, _) in &feats {
            fit_rows.extend_from_slice(rows);
        }
    }

    let (kmeans, trace) = fit_kmeans(&fit_rows, budget, dim, cfg.quantizer.k, cfg.quantizer.max_iters, cfg.seed)?;
    let codebook = Codebook { kmeans, layer_index: cfg.quantizer.layer_index, digest: model.digest.clone() };

    let mut label_records = Vec::with_capacity(records.len());
    let mut all_labels: Vec<usize> = Vec::with_capacity(total);
    for (rec, (rows, t)) in records.iter().zip(&feats) {
        let labels = codebook.kmeans.assign_rows(rows, *t);
        all_labels.extend_from_slice(&labels);
        let interferer_labels = match (&rec.interferer_clean, &rec.interferer_enrollment) {
            (Some(iclean), Some(ienroll)) => {
                let cw = load_wave_as::<S>(rec, dir, iclean)?;
                let ew = load_wave_as::<S>(rec, dir, ienroll)?;
                let (irows, it) = clean_features(model, cfg, &cw, &ew)?;
                Some(codebook.kmeans.assign_rows(&irows, it))
            }
            _ => None,
        };
        label_records.push(LabelRecord { id: rec.id.clone(), labels, interferer_labels });
    }

    let codebook_path = out_dir.join("codebook.bin");
    let labels_path = out_dir.join("labels.jsonl");
    save_codebook(&codebook_path, &codebook)?;
    write_labels(&labels_path, &label_records)?;
    let entropy = label_entropy(all_labels.into_iter(), cfg.quantizer.k);
    Ok(LabelsOutput { codebook_path, labels_path, entropy, fit_frames_used: budget, trace })
}
