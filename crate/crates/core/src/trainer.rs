//! Optimization loop.  Every stochastic choice (batch membership, mask
//! plans, correlation-frame sampling) is a pure function of the run seed,
//! the step index, and the batch slot, so a run can be reproduced bitwise
//! and a resumed run continues exactly where the interrupted one left off.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::masking::plan_mask_nonempty;
use crate::mixsim::read_manifest;
use crate::model::{load_snapshot, save_snapshot, Model, Snapshot};
use crate::objective::{dual_view_losses, single_view_loss};
use crate::quantizer::{label_map, read_labels};
use crate::real::{r, Real};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tape;

const MASK_RETRIES: usize = 64;

// ── training data ───────────────────────────────────────────────────────────

pub struct TrainExample<S> {
    pub id: String,
    pub view_a: Vec<S>,
    pub view_b: Vec<S>,
    pub enrollment: Vec<S>,
    pub labels: Vec<usize>,
}

/// Load every example's views, enrollment, and frame labels into memory.
pub fn load_training_set<S: Real>(manifest_path: &Path, labels_path: &Path) -> Result<Vec<TrainExample<S>>> {
    let records = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?;
    let mut labels = label_map(read_labels(labels_path)?);
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let lab = labels
            .remove(&rec.id)
            .ok_or_else(|| Error::Labels(format!("{}: no labels for this example", rec.id)))?;
        let cast = |w: crate::audio::Waveform| w.samples.iter().map(|&v| r::<S>(v)).collect::<Vec<S>>();
        out.push(TrainExample {
            id: rec.id.clone(),
            view_a: cast(rec.load_audio(dir, &rec.view_a)?),
            view_b: cast(rec.load_audio(dir, &rec.view_b)?),
            enrollment: cast(rec.load_audio(dir, &rec.enrollment)?),
            labels: lab.labels,
        });
    }
    Ok(out)
}

// ── metrics ─────────────────────────────────────────────────────────────────

/// One line of `metrics.jsonl`.  `wall_ms` is the only field that is not a
/// pure function of (config, seed, step); reproducibility checks must strip
/// it before comparing lines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce_a: f64,
    pub ce_b: f64,
    pub cc: f64,
    pub invariance: f64,
    pub redundancy: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: usize,
    pub wall_ms: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(line)
            .map_err(|e| Error::Training(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(m);
    }
    Ok(out)
}

// ── trainer ─────────────────────────────────────────────────────────────────

pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Real> AdamState<S> {
    fn zeros(model: &Model<S>) -> Self {
        let m = model.store.iter().map(|(_, p)| vec![S::zero(); p.data.len()]).collect::<Vec<_>>();
        AdamState { v: m.clone(), m }
    }
}

pub struct Trainer<S: Real> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    /// Completed optimizer steps.
    pub step: u64,
    cfg: Config,
}

impl<S: Real> Trainer<S> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let model = Model::init(cfg)?;
        let adam = AdamState::zeros(&model);
        Ok(Trainer { model, adam, step: 0, cfg: cfg.clone() })
    }

    /// Resume training from a snapshot that carries optimizer state.
    pub fn from_snapshot_file(cfg: &Config, path: &Path) -> Result<Self> {
        let snap: Snapshot<S> = load_snapshot(path)?;
        let mut model = Model::init(cfg)?;
        model.load_values(&snap)?;
        let (m, v) = snap
            .moments
            .ok_or_else(|| Error::Checkpoint("snapshot has no optimizer state; cannot resume".into()))?;
        Ok(Trainer { model, adam: AdamState { m, v }, step: snap.step, cfg: cfg.clone() })
    }

    /// Linear warmup to the configured rate, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step + 1;
        let w = self.cfg.trainer.warmup_steps;
        if w > 0 && t <= w {
            self.cfg.trainer.lr * t as f64 / w as f64
        } else {
            self.cfg.trainer.lr
        }
    }

    fn snapshot(&self) -> Snapshot<S> {
        Snapshot {
            step: self.step,
            digest: self.model.digest.clone(),
            params: self.model.store.clone(),
            moments: Some((self.adam.m.clone(), self.adam.v.clone())),
        }
    }

    /// One optimizer step over a freshly drawn batch.
    pub fn train_step(&mut self, data: &[TrainExample<S>]) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step;
        let tcfg = &self.cfg.trainer;
        let seed = self.cfg.seed;
        let n_params = self.model.store.len();

        let mut accum: Vec<Vec<S>> =
            self.model.store.iter().map(|(_, p)| vec![S::zero(); p.data.len()]).collect();
        let mut sums = [0.0f64; 6]; // total, ce_a, ce_b, cc, invariance, redundancy
        let mut used = 0usize;
        let mut skipped = 0usize;

        for slot in 0..tcfg.batch_size as u64 {
            let mut rng = stream(seed, "train.batch", &[step, slot]);
            let ex = &data[rand::Rng::gen_range(&mut rng, 0..data.len())];
            let t = self
                .cfg
                .frontend
                .frame_count(ex.view_a.len())
                .ok_or_else(|| Error::Training(format!("{}: view shorter than the receptive field", ex.id)))?;

            let seed_a = derive_seed(seed, "train.mask", &[step, slot, 0]);
            let plan_a = plan_mask_nonempty(t, &self.cfg.masking, seed_a, MASK_RETRIES)?;
            let mut tape = Tape::new();
            let scalars: Vec<f64>;
            let loss_node;
            if tcfg.one_path {
                let ce = single_view_loss(
                    &mut tape,
                    &self.model,
                    &self.cfg,
                    &ex.view_a,
                    &ex.enrollment,
                    &ex.labels,
                    &plan_a,
                )?;
                scalars = vec![tape.scalar(ce).as_f64(), tape.scalar(ce).as_f64(), 0.0, 0.0, 0.0, 0.0];
                loss_node = ce;
            } else {
                let plan_b = if self.cfg.masking.shared_across_views {
                    plan_a.clone()
                } else {
                    let seed_b = derive_seed(seed, "train.mask", &[step, slot, 1]);
                    plan_mask_nonempty(t, &self.cfg.masking, seed_b, MASK_RETRIES)?
                };
                let cc_seed = derive_seed(seed, "train.cc", &[step, slot]);
                let losses = dual_view_losses(
                    &mut tape,
                    &self.model,
                    &self.cfg,
                    &ex.view_a,
                    &ex.view_b,
                    &ex.enrollment,
                    &ex.labels,
                    &plan_a,
                    &plan_b,
                    cc_seed,
                )?;
                scalars = [losses.total, losses.ce_a, losses.ce_b, losses.cc, losses.invariance, losses.redundancy]
                    .iter()
                    .map(|&n| tape.scalar(n).as_f64())
                    .collect();
                loss_node = losses.total;
            }

            if !scalars[0].is_finite() {
                skipped += 1;
                continue;
            }
            let grads = tape.backward(loss_node, n_params);
            for (pid, buf) in accum.iter_mut().enumerate() {
                if let Some(g) = grads.param(pid) {
                    for (a, &gv) in buf.iter_mut().zip(g) {
                        *a = *a + gv;
                    }
                }
            }
            for (s, v) in sums.iter_mut().zip(&scalars) {
                *s += v;
            }
            used += 1;
        }

        let lr = self.lr_at(step);
        let mut grad_norm = 0.0f64;
        let mut clipped = false;
        if used > 0 {
            let inv_used = r::<S>(1.0 / used as f64);
            for buf in accum.iter_mut() {
                for g in buf.iter_mut() {
                    *g = *g * inv_used;
                }
            }
            grad_norm = accum
                .iter()
                .flat_map(|b| b.iter())
                .map(|g| g.as_f64() * g.as_f64())
                .sum::<f64>()
                .sqrt();
            if !grad_norm.is_finite() {
                // Poisoned batch: leave the parameters untouched.
                used = 0;
                skipped = tcfg.batch_size;
            } else {
                if tcfg.grad_clip > 0.0 && grad_norm > tcfg.grad_clip {
                    let scale = r::<S>(tcfg.grad_clip / grad_norm);
                    for buf in accum.iter_mut() {
                        for g in buf.iter_mut() {
                            *g = *g * scale;
                        }
                    }
                    clipped = true;
                }
                self.apply_adam(&accum, lr);
            }
        }

        self.step += 1;
        let denom = used.max(1) as f64;
        Ok(StepMetrics {
            step: self.step,
            lr,
            loss: sums[0] / denom,
            ce_a: sums[1] / denom,
            ce_b: sums[2] / denom,
            cc: sums[3] / denom,
            invariance: sums[4] / denom,
            redundancy: sums[5] / denom,
            grad_norm,
            clipped,
            skipped,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn apply_adam(&mut self, grads: &[Vec<S>], lr: f64) {
        let tcfg = &self.cfg.trainer;
        let t = (self.step + 1) as i32;
        let b1 = tcfg.beta1;
        let b2 = tcfg.beta2;
        let bc1 = r::<S>(1.0 / (1.0 - b1.powi(t)));
        let bc2 = r::<S>(1.0 / (1.0 - b2.powi(t)));
        let (b1s, b2s) = (r::<S>(b1), r::<S>(b2));
        let (c1, c2) = (r::<S>(1.0 - b1), r::<S>(1.0 - b2));
        let eps = r::<S>(tcfg.eps);
        let lr_s = r::<S>(lr);
        let decay = r::<S>(lr * tcfg.weight_decay);
        for (pid, g) in grads.iter().enumerate() {
            let m = &mut self.adam.m[pid];
            let v = &mut self.adam.v[pid];
            let theta = self.model.store.data_mut(pid);
            for i in 0..g.len() {
                m[i] = b1s * m[i] + c1 * g[i];
                v[i] = b2s * v[i] + c2 * g[i] * g[i];
                let mhat = m[i] * bc1;
                let vhat = v[i] * bc2;
                theta[i] = theta[i] - lr_s * (mhat / (vhat.sqrt() + eps)) - decay * theta[i];
            }
        }
    }

    /// Train to `target_steps` total, appending metrics and snapshots under
    /// `out_dir`.  Returns the metrics written by this call.
    pub fn run(&mut self, data: &[TrainExample<S>], out_dir: &Path, target_steps: u64) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Training("training set is empty".into()));
        }
        let ckpt_dir = out_dir.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
        let metrics_path = out_dir.join("metrics.jsonl");
        let mut metrics_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

        let every = self.cfg.trainer.checkpoint_every;
        let mut written = Vec::new();
        while self.step < target_steps {
            let m = self.train_step(data)?;
            writeln!(metrics_file, "{}", serde_json::to_string(&m)?)
                .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
            if every > 0 && self.step % every == 0 {
                save_snapshot(&ckpt_dir.join(format!("step{:06}.bin", self.step)), &self.snapshot())?;
            }
            written.push(m);
        }
        save_snapshot(&ckpt_dir.join("final.bin"), &self.snapshot())?;
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixsim::simulate_corpus;
    use crate::quantizer::build_labels;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.seed = 17;
        cfg.corpus.n_examples = 6;
        cfg.corpus.n_speakers = 4;
        cfg.corpus.sample_rate = 2000;
        cfg.corpus.phones_per_utt_min = 4;
        cfg.corpus.phones_per_utt_max = 6;
        cfg.corpus.enrollment_s = 0.4;
        cfg.frontend.d = 8;
        cfg.frontend.kernels = vec![8, 4, 4];
        cfg.frontend.strides = vec![4, 2, 2];
        cfg.sate.n_layers = 2;
        cfg.sate.n_heads = 2;
        cfg.sate.ffn_dim = 12;
        cfg.spkemb.e_dim = 4;
        cfg.quantizer.k = 6;
        cfg.quantizer.layer_index = 1;
        cfg.quantizer.fit_frames = 300;
        cfg.objective.head_dim = 6;
        cfg.objective.lpb_dim = 6;
        cfg.objective.cc_frames = 12;
        cfg.trainer.batch_size = 2;
        cfg.trainer.warmup_steps = 4;
        cfg.trainer.checkpoint_every = 2;
        cfg
    }

    fn build_set(cfg: &Config, dir: &Path) -> Vec<TrainExample<f64>> {
        let manifest = simulate_corpus(cfg, &dir.join("corpus")).unwrap();
        let model = Model::<f64>::init(cfg).unwrap();
        let out = build_labels(cfg, &manifest, &model, &dir.join("labels")).unwrap();
        load_training_set(&manifest, &out.labels_path).unwrap()
    }

    #[test]
    fn warmup_schedule_is_linear_then_flat() {
        let mut cfg = tiny_cfg();
        cfg.trainer.lr = 0.1;
        cfg.trainer.warmup_steps = 4;
        let tr = Trainer::<f64>::new(&cfg).unwrap();
        assert!((tr.lr_at(0) - 0.025).abs() < 1e-15);
        assert!((tr.lr_at(1) - 0.05).abs() < 1e-15);
        assert!((tr.lr_at(3) - 0.1).abs() < 1e-15);
        assert!((tr.lr_at(100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_a_hand_step() {
        // Single parameter scalar, one step: m = (1-b1) g, v = (1-b2) g^2,
        // bias-corrected they recover g and g^2 exactly, so the update is
        // lr * g / (|g| + eps) plus decoupled decay.
        let mut cfg = tiny_cfg();
        cfg.trainer.lr = 0.01;
        cfg.trainer.weight_decay = 0.1;
        let mut tr = Trainer::<f64>::new(&cfg).unwrap();
        let theta0 = tr.model.store.data(0)[0];
        let g = 0.25f64;
        let mut grads: Vec<Vec<f64>> =
            tr.model.store.iter().map(|(_, p)| vec![0.0; p.data.len()]).collect();
        grads[0][0] = g;
        tr.apply_adam(&grads, cfg.trainer.lr);
        let want = theta0 - 0.01 * (g / (g + cfg.trainer.eps)) - 0.01 * 0.1 * theta0;
        let got = tr.model.store.data(0)[0];
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn loss_drops_on_a_tiny_run() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = build_set(&cfg, dir.path());
        let mut tr = Trainer::<f64>::new(&cfg).unwrap();
        let metrics = tr.run(&data, &dir.path().join("run"), 30).unwrap();
        assert_eq!(metrics.len(), 30);
        let first = metrics[0].loss;
        let last = metrics.last().unwrap().loss;
        assert!(last < first, "loss should drop: first {first}, last {last}");
        assert!(metrics.iter().all(|m| m.loss.is_finite() && m.skipped == 0));
    }

    #[test]
    fn reruns_are_bitwise_identical_and_resume_matches() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = build_set(&cfg, dir.path());

        let mut full = Trainer::<f64>::new(&cfg).unwrap();
        let full_metrics = full.run(&data, &dir.path().join("full"), 8).unwrap();

        let mut again = Trainer::<f64>::new(&cfg).unwrap();
        let again_metrics = again.run(&data, &dir.path().join("again"), 8).unwrap();
        for (a, b) in full_metrics.iter().zip(&again_metrics) {
            let (mut a, mut b) = (a.clone(), b.clone());
            a.wall_ms = 0.0;
            b.wall_ms = 0.0;
            assert_eq!(a, b);
        }

        // Interrupt at 4, resume to 8, compare the tail and final weights.
        let mut head = Trainer::<f64>::new(&cfg).unwrap();
        head.run(&data, &dir.path().join("head"), 4).unwrap();
        let ckpt = dir.path().join("head/checkpoints/step000004.bin");
        let mut resumed = Trainer::<f64>::from_snapshot_file(&cfg, &ckpt).unwrap();
        assert_eq!(resumed.step, 4);
        let tail = resumed.run(&data, &dir.path().join("tail"), 8).unwrap();
        for (a, b) in full_metrics[4..].iter().zip(&tail) {
            let (mut a, mut b) = (a.clone(), b.clone());
            a.wall_ms = 0.0;
            b.wall_ms = 0.0;
            assert_eq!(a, b);
        }
        for (pid, p) in full.model.store.iter() {
            assert_eq!(p.data[..], resumed.model.store.data(pid)[..], "{} diverged", p.name);
        }
    }

    #[test]
    fn zero_steps_still_writes_a_snapshot() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = build_set(&cfg, dir.path());
        let mut tr = Trainer::<f64>::new(&cfg).unwrap();
        let metrics = tr.run(&data, &dir.path().join("run"), 0).unwrap();
        assert!(metrics.is_empty());
        let snap = load_snapshot::<f64>(&dir.path().join("run/checkpoints/final.bin")).unwrap();
        assert_eq!(snap.step, 0);
        assert!(snap.moments.is_some());
    }

    #[test]
    fn one_path_mode_trains_without_the_second_view() {
        let mut cfg = tiny_cfg();
        cfg.trainer.one_path = true;
        let dir = tempfile::tempdir().unwrap();
        let data = build_set(&cfg, dir.path());
        let mut tr = Trainer::<f64>::new(&cfg).unwrap();
        let metrics = tr.run(&data, &dir.path().join("run"), 6).unwrap();
        assert!(metrics.iter().all(|m| m.ce_b == 0.0 && m.cc == 0.0));
        assert!(metrics.iter().all(|m| m.loss == m.ce_a && m.loss.is_finite()));
    }

    #[test]
    fn metrics_round_trip_through_jsonl() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let data = build_set(&cfg, dir.path());
        let mut tr = Trainer::<f64>::new(&cfg).unwrap();
        let written = tr.run(&data, &dir.path().join("run"), 3).unwrap();
        let back = read_metrics(&dir.path().join("run/metrics.jsonl")).unwrap();
        assert_eq!(written, back);
    }

    #[test]
    fn resume_requires_optimizer_state() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let tr = Trainer::<f64>::new(&cfg).unwrap();
        let snap = Snapshot {
            step: 3,
            digest: tr.model.digest.clone(),
            params: tr.model.store.clone(),
            moments: None,
        };
        let path = dir.path().join("bare.bin");
        save_snapshot(&path, &snap).unwrap();
        assert!(Trainer::<f64>::from_snapshot_file(&cfg, &path).is_err());
    }
}
