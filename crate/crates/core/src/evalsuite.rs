//! Checkpoint probes: does masked prediction follow the enrolled speaker
//! (and flip when the enrollment is swapped to the competing talker), and
//! how alike are the two views' frame representations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Config, MixtureType};
use crate::error::{Error, Result};
use crate::masking::plan_mask_nonempty;
use crate::mixsim::{read_manifest, ManifestRecord};
use crate::model::Model;
use crate::objective::{encode_view, predict_logits};
use crate::quantizer::{label_map, read_labels, LabelRecord};
use crate::real::{r, Real};
use crate::rng::derive_seed;
use crate::tensor::{NodeId, Tape};

const MASK_RETRIES: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    /// Fraction of masked frames whose predicted cluster matches the
    /// enrolled speaker's label, pooled over every evaluated example.
    pub target_masked_accuracy: f64,
    /// Same fraction measured against the competing talker's labels; absent
    /// when the manifest holds no two-talker examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interferer_masked_accuracy: Option<f64>,
    /// Fraction of two-talker examples where enrolling the competing talker
    /// makes that talker's labels win on the masked frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub swap_consistency: Option<f64>,
    /// Fraction of masked two-talker frames where both talkers share a
    /// cluster id (such frames count toward both accuracies).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub collision_rate: Option<f64>,
    /// Mean per-frame cosine between the two views' representations,
    /// computed without masking.
    pub mean_view_cosine: f64,
    pub n_examples: usize,
    pub n_two_talker: usize,
    /// Two-talker examples dropped because the label store carried no
    /// interferer labels for them.
    pub n_skipped: usize,
}

fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if v.as_f64() > row[best].as_f64() {
            best = i;
        }
    }
    best
}

/// Mean cosine between corresponding rows of two `[rows, cols]` matrices.
/// Bitwise-identical rows score exactly 1: when the two squared norms match
/// bit for bit the quotient is taken against the squared norm itself.
pub fn mean_frame_cosine(a: &[f64], b: &[f64], rows: usize, cols: usize, floor: f64) -> f64 {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(b.len(), rows * cols);
    let mut total = 0.0f64;
    for f in 0..rows {
        let ra = &a[f * cols..(f + 1) * cols];
        let rb = &b[f * cols..(f + 1) * cols];
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        let na: f64 = ra.iter().map(|x| x * x).sum();
        let nb: f64 = rb.iter().map(|x| x * x).sum();
        let denom = if na == nb { na.max(floor * floor) } else { na.sqrt().max(floor) * nb.sqrt().max(floor) };
        total += dot / denom;
    }
    total / rows as f64
}

fn embed_wave<S: Real>(tape: &mut Tape<S>, model: &Model<S>, cfg: &Config, wave: &[S]) -> Result<NodeId> {
    model.spkemb.embed(tape, &model.store, &model.frontend, wave, r::<S>(cfg.objective.norm_floor))
}

fn load_as<S: Real>(rec: &ManifestRecord, dir: &Path, rel: &str) -> Result<Vec<S>> {
    Ok(rec.load_audio(dir, rel)?.samples.iter().map(|&v| r::<S>(v)).collect())
}

/// Masked-frame predictions of `wave` under `enrollment`.
fn masked_predictions<S: Real>(
    model: &Model<S>,
    cfg: &Config,
    wave: &[S],
    enrollment: &[S],
    plan: &crate::masking::MaskPlan,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let e = embed_wave(&mut tape, model, cfg, enrollment)?;
    let out = encode_view(&mut tape, model, wave, e, Some(plan))?;
    let logits = predict_logits(&mut tape, model, out, cfg);
    let (_, k) = tape.dims(logits);
    let data = tape.data(logits);
    Ok(plan.masked.iter().map(|&f| argmax(&data[f * k..(f + 1) * k])).collect())
}

/// Mean per-frame cosine between the two views' unmasked representations,
/// pooled over frames of every example.
pub fn invariance_metric<S: Real>(model: &Model<S>, cfg: &Config, manifest_path: &Path) -> Result<f64> {
    let records = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?;
    let mut total = 0.0f64;
    for rec in &records {
        let va = load_as::<S>(rec, dir, &rec.view_a)?;
        let vb = load_as::<S>(rec, dir, &rec.view_b)?;
        let enroll = load_as::<S>(rec, dir, &rec.enrollment)?;
        let mut tape = Tape::new();
        let e = embed_wave(&mut tape, model, cfg, &enroll)?;
        let ca = encode_view(&mut tape, model, &va, e, None)?;
        let cb = encode_view(&mut tape, model, &vb, e, None)?;
        let (t, d) = tape.dims(ca);
        let a: Vec<f64> = tape.data(ca).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = tape.data(cb).iter().map(|v| v.as_f64()).collect();
        total += mean_frame_cosine(&a, &b, t, d, cfg.objective.norm_floor);
    }
    Ok(total / records.len() as f64)
}

/// Evaluate a checkpoint on a labeled corpus.  Only mixtures and enrollments
/// are encoded — clean audio never reaches the model here.  The mask plan
/// for each example is a pure function of `seed` and the example index, so
/// reports are comparable across checkpoints.
pub fn selectivity_probe<S: Real>(
    model: &Model<S>,
    cfg: &Config,
    manifest_path: &Path,
    labels_path: &Path,
    seed: u64,
) -> Result<ProbeReport> {
    let records = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::Manifest("manifest path has no parent directory".into()))?;
    let labels = label_map(read_labels(labels_path)?);

    let mut masked_total = 0usize;
    let mut target_hits = 0usize;
    let mut dual_masked = 0usize;
    let mut interferer_hits = 0usize;
    let mut collisions = 0usize;
    let mut two_talker = 0usize;
    let mut swap_wins = 0usize;
    let mut skipped = 0usize;

    for (i, rec) in records.iter().enumerate() {
        let lab: &LabelRecord = labels
            .get(&rec.id)
            .ok_or_else(|| Error::Labels(format!("{}: no labels for this example", rec.id)))?;
        let view = load_as::<S>(rec, dir, &rec.view_a)?;
        let enroll = load_as::<S>(rec, dir, &rec.enrollment)?;
        let t = cfg
            .frontend
            .frame_count(view.len())
            .ok_or_else(|| Error::Probe(format!("{}: view shorter than the receptive field", rec.id)))?;
        if lab.labels.len() != t {
            return Err(Error::Labels(format!("{}: {} labels for {t} frames", rec.id, lab.labels.len())));
        }
        let plan = plan_mask_nonempty(t, &cfg.masking, derive_seed(seed, "probe.mask", &[i as u64]), MASK_RETRIES)?;
        let preds = masked_predictions(model, cfg, &view, &enroll, &plan)?;
        masked_total += preds.len();
        target_hits += plan.masked.iter().zip(&preds).filter(|(&f, &p)| lab.labels[f] == p).count();

        let is_two_talker = rec.mixture_type != MixtureType::Noisy;
        if is_two_talker {
            let (ilab, ienroll_rel) = match (&lab.interferer_labels, &rec.interferer_enrollment) {
                (Some(il), Some(ie)) => (il, ie),
                _ => {
                    skipped += 1;
                    continue;
                }
            };
            two_talker += 1;
            dual_masked += preds.len();
            interferer_hits += plan.masked.iter().zip(&preds).filter(|(&f, &p)| ilab[f] == p).count();
            collisions += plan.masked.iter().filter(|&&f| lab.labels[f] == ilab[f]).count();

            let ienroll = load_as::<S>(rec, dir, ienroll_rel)?;
            let swapped = masked_predictions(model, cfg, &view, &ienroll, &plan)?;
            let b_hits = plan.masked.iter().zip(&swapped).filter(|(&f, &p)| ilab[f] == p).count();
            let a_hits = plan.masked.iter().zip(&swapped).filter(|(&f, &p)| lab.labels[f] == p).count();
            if b_hits > a_hits {
                swap_wins += 1;
            }
        }
    }

    let rate = |num: usize, den: usize| num as f64 / den as f64;
    Ok(ProbeReport {
        target_masked_accuracy: rate(target_hits, masked_total.max(1)),
        interferer_masked_accuracy: (dual_masked > 0).then(|| rate(interferer_hits, dual_masked)),
        swap_consistency: (two_talker > 0).then(|| rate(swap_wins, two_talker)),
        collision_rate: (dual_masked > 0).then(|| rate(collisions, dual_masked)),
        mean_view_cosine: invariance_metric(model, cfg, manifest_path)?,
        n_examples: records.len(),
        n_two_talker: two_talker,
        n_skipped: skipped,
    })
}

// ── numerical gradient audit ────────────────────────────────────────────────

/// Configuration for the full-loss gradient audit: a two-layer, 16-dim
/// encoder with an 8-way head and very short utterances, small enough that
/// central differences over every scalar finish in seconds.
pub fn gradcheck_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.corpus.n_examples = 1;
    cfg.corpus.phones_per_utt_min = 4;
    cfg.corpus.phones_per_utt_max = 6;
    cfg.corpus.phone_ms_min = 60;
    cfg.corpus.phone_ms_max = 80;
    cfg.corpus.enrollment_s = 0.25;
    cfg.frontend.d = 16;
    cfg.sate.n_layers = 2;
    cfg.sate.n_heads = 4;
    cfg.sate.ffn_dim = 32;
    cfg.spkemb.e_dim = 8;
    cfg.quantizer.k = 8;
    cfg.quantizer.layer_index = 1;
    cfg.objective.head_dim = 8;
    cfg.objective.lpb_dim = 8;
    cfg.objective.cc_frames = 8;
    cfg
}

/// Check every parameter's reverse-mode gradient of the complete two-view
/// objective against central differences, in 64-bit.
pub fn run_loss_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<crate::tensor::GradCheckReport> {
    use crate::objective::dual_view_losses;
    use crate::rng::{derive_seed, stream};

    let cfg = gradcheck_config(seed);
    let model = Model::<f64>::init(&cfg)?;
    let ex = crate::mixsim::sample_example(&cfg.corpus, &cfg.frontend, seed, 0)?;
    let t = cfg
        .frontend
        .frame_count(ex.view_a.len())
        .ok_or_else(|| Error::Probe("synthetic utterance shorter than the receptive field".into()))?;
    let plan = plan_mask_nonempty(t, &cfg.masking, derive_seed(seed, "gradcheck.mask", &[]), MASK_RETRIES)?;
    let mut rng = stream(seed, "gradcheck.labels", &[]);
    let labels: Vec<usize> = (0..t).map(|_| rand::Rng::gen_range(&mut rng, 0..cfg.quantizer.k)).collect();
    let cc_seed = derive_seed(seed, "gradcheck.cc", &[]);

    let va = &ex.view_a.samples;
    let vb = &ex.view_b.samples;
    let enroll = &ex.enrollment.samples;
    Ok(crate::tensor::grad_check(&model.store, eps, tolerance, |tape, store| {
        let m = Model { store: store.clone(), ..model.clone() };
        dual_view_losses(tape, &m, &cfg, va, vb, enroll, &labels, &plan, &plan, cc_seed)
            .expect("loss assembly on the audit model cannot fail")
            .total
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixsim::simulate_corpus;
    use crate::quantizer::build_labels;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.seed = 23;
        cfg.corpus.n_examples = 10;
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
        cfg
    }

    #[test]
    fn identical_rows_score_exactly_one() {
        let a = vec![0.3, -1.2, 0.7, 2.5, 0.01, -0.4];
        assert_eq!(mean_frame_cosine(&a, &a.clone(), 2, 3, 1e-8), 1.0);
    }

    #[test]
    fn orthogonal_rows_score_zero_and_scaling_does_not_matter() {
        let a = vec![1.0, 0.0, 0.0, 2.0];
        let b = vec![0.0, 3.0, 5.0, 0.0];
        assert_eq!(mean_frame_cosine(&a, &b, 2, 2, 1e-8), 0.0);
        let c = vec![2.0, 0.0, 0.0, 8.0];
        assert!((mean_frame_cosine(&a, &c, 2, 2, 1e-8) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rows_fall_back_to_the_floor() {
        let z = vec![0.0; 4];
        assert_eq!(mean_frame_cosine(&z, &z.clone(), 2, 2, 1e-8), 0.0);
    }

    fn probe_setup(cfg: &Config, dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, Model<f64>) {
        let manifest = simulate_corpus(cfg, &dir.join("corpus")).unwrap();
        let model = Model::<f64>::init(cfg).unwrap();
        let out = build_labels(cfg, &manifest, &model, &dir.join("labels")).unwrap();
        (manifest, out.labels_path, model)
    }

    #[test]
    fn untrained_probe_reports_chance_like_rates() {
        let mut cfg = tiny_cfg();
        cfg.corpus.mixture_types = vec![MixtureType::TwoTalker];
        let dir = tempfile::tempdir().unwrap();
        let (manifest, labels, model) = probe_setup(&cfg, dir.path());
        let report = selectivity_probe(&model, &cfg, &manifest, &labels, 99).unwrap();
        assert_eq!(report.n_examples, 10);
        assert_eq!(report.n_two_talker, 10);
        assert_eq!(report.n_skipped, 0);
        for rate in [
            report.target_masked_accuracy,
            report.interferer_masked_accuracy.unwrap(),
            report.swap_consistency.unwrap(),
            report.collision_rate.unwrap(),
        ] {
            assert!((0.0..=1.0).contains(&rate), "rate {rate} out of bounds");
        }
        // An untrained model scores both talkers with the same prediction
        // distribution, so the accuracies should sit close together.
        let gap = report.target_masked_accuracy - report.interferer_masked_accuracy.unwrap();
        assert!(gap.abs() < 0.2, "untrained gap {gap} suspiciously large");
        assert!(report.mean_view_cosine > -1.0 && report.mean_view_cosine < 1.0);
    }

    #[test]
    fn probe_is_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.corpus.mixture_types = vec![MixtureType::TwoTalker, MixtureType::Noisy];
        let dir = tempfile::tempdir().unwrap();
        let (manifest, labels, model) = probe_setup(&cfg, dir.path());
        let a = selectivity_probe(&model, &cfg, &manifest, &labels, 7).unwrap();
        let b = selectivity_probe(&model, &cfg, &manifest, &labels, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_examples, 10);
        assert_eq!(a.n_two_talker + a.n_skipped, 10 - count_noisy(&manifest));
    }

    fn count_noisy(manifest: &Path) -> usize {
        read_manifest(manifest)
            .unwrap()
            .iter()
            .filter(|r| r.mixture_type == MixtureType::Noisy)
            .count()
    }

    #[test]
    fn noisy_only_corpus_reports_no_interferer_rates() {
        let mut cfg = tiny_cfg();
        cfg.corpus.n_examples = 4;
        cfg.corpus.mixture_types = vec![MixtureType::Noisy];
        let dir = tempfile::tempdir().unwrap();
        let (manifest, labels, model) = probe_setup(&cfg, dir.path());
        let report = selectivity_probe(&model, &cfg, &manifest, &labels, 3).unwrap();
        assert!(report.interferer_masked_accuracy.is_none());
        assert!(report.swap_consistency.is_none());
        assert!(report.collision_rate.is_none());
        assert_eq!(report.n_two_talker, 0);
        assert!(report.target_masked_accuracy >= 0.0);
        let text = serde_json::to_string(&report).unwrap();
        assert!(!text.contains("interferer_masked_accuracy"));
    }

    #[test]
    fn full_loss_gradients_match_central_differences() {
        // eps balances central-difference truncation (~eps^2, bites the
        // high-curvature ffn weights) against cancellation noise
        // (~ulp(loss)/eps, bites near-zero gradients); 1e-4 clears both.
        let report = run_loss_gradcheck(5, 1e-4, 1e-4).unwrap();
        eprintln!(
            "max rel err {:.3e} at {:?}",
            report.max_rel_err, report.worst
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn invariance_metric_is_finite_and_bounded() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (manifest, _labels, model) = probe_setup(&cfg, dir.path());
        let c = invariance_metric(&model, &cfg, &manifest).unwrap();
        assert!((-1.0..=1.0).contains(&c), "cosine {c} out of range");
    }
}
