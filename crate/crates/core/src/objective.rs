//! Loss assembly: masked pseudo-label prediction on each corrupted view plus
//! a cross-correlation penalty tying the two views' frame projections.

use std::sync::Arc;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskPlan};
use crate::model::{HeadParams, Model};
use crate::real::{r, Real};
use crate::rng::stream;
use crate::tensor::{NodeId, Tape};

/// Run one waveform through the conditioned encoder, optionally writing the
/// mask embedding over the planned frames first.  Returns the final-layer
/// frame matrix `[t, d]`.
pub fn encode_view<S: Real>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    wave: &[S],
    embedding: NodeId,
    plan: Option<&MaskPlan>,
) -> Result<NodeId> {
    let mut z = model.frontend.encode(tape, &model.store, wave)?;
    if let Some(plan) = plan {
        let me = tape.param(&model.store, model.mask_embed);
        z = apply_mask(tape, z, plan, me);
    }
    let cond = model.sate.satl_enabled.then_some(embedding);
    Ok(model.sate.encode(tape, &model.store, z, cond)?.out)
}

/// Per-frame class logits `[t, k]` from encoder output.
pub fn predict_logits<S: Real>(tape: &mut Tape<S>, model: &Model<S>, frames: NodeId, cfg: &Config) -> NodeId {
    match &model.head {
        &HeadParams::Cosine { proj_w, proj_b, codes } => {
            let w = tape.param(&model.store, proj_w);
            let b = tape.param(&model.store, proj_b);
            let c = tape.param(&model.store, codes);
            let h = tape.matmul(frames, w, false, false);
            let h = tape.add_row(h, b);
            let hn = tape.l2_normalize_rows(h, r::<S>(cfg.objective.norm_floor));
            let cn = tape.l2_normalize_rows(c, r::<S>(cfg.objective.norm_floor));
            let sim = tape.matmul(hn, cn, false, true);
            tape.scale(sim, r::<S>(1.0 / cfg.objective.temperature))
        }
        &HeadParams::Affine { w, b } => {
            let w = tape.param(&model.store, w);
            let b = tape.param(&model.store, b);
            let l = tape.matmul(frames, w, false, false);
            tape.add_row(l, b)
        }
    }
}

/// Mean negative log-likelihood of the frame labels over the masked frames.
pub fn masked_ce<S: Real>(tape: &mut Tape<S>, logits: NodeId, plan: &MaskPlan, labels: &[usize]) -> Result<NodeId> {
    let (t, k) = tape.dims(logits);
    if labels.len() != t {
        return Err(Error::Labels(format!("{} labels for {t} frames", labels.len())));
    }
    if plan.is_empty() {
        return Err(Error::Masking("loss needs at least one masked frame".into()));
    }
    let masked_labels: Vec<usize> = plan.masked.iter().map(|&f| labels[f]).collect();
    if let Some(&bad) = masked_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Labels(format!("label {bad} out of range for {k} classes")));
    }
    let lsm = tape.log_softmax_rows(logits);
    let picked_rows = tape.gather_rows(lsm, plan.masked.clone());
    let ll = tape.pick_per_row(picked_rows, Arc::new(masked_labels));
    let mean = tape.mean_all(ll);
    Ok(tape.scale(mean, r::<S>(-1.0)))
}

/// Project frames through the low-dimensional block feeding the
/// cross-correlation loss: `[t, d] -> [t, p]`.
pub fn cc_projection<S: Real>(tape: &mut Tape<S>, model: &Model<S>, frames: NodeId) -> NodeId {
    let w = tape.param(&model.store, model.lpb_w);
    let b = tape.param(&model.store, model.lpb_b);
    let z = tape.matmul(frames, w, false, false);
    tape.add_row(z, b)
}

/// Frame indices both views contribute to the cross-correlation loss,
/// sampled without replacement and sorted.  `cc_frames` is clamped to `t`.
pub fn sample_cc_rows(t: usize, cc_frames: usize, seed: u64) -> Arc<Vec<usize>> {
    let n = cc_frames.min(t);
    let mut rng = stream(seed, "cc.sample", &[]);
    let mut idx = rand::seq::index::sample(&mut rng, t, n).into_vec();
    idx.sort_unstable();
    Arc::new(idx)
}

pub struct CcTerms {
    pub total: NodeId,
    pub invariance: NodeId,
    pub redundancy: NodeId,
}

/// Cross-correlation loss over two projection matrices `[n, p]`:
/// the diagonal of the normalized correlation is pushed to one and the
/// off-diagonal to zero, the latter weighted by `lambda`.
pub fn cc_loss<S: Real>(tape: &mut Tape<S>, za: NodeId, zb: NodeId, cfg: &Config) -> CcTerms {
    let p = tape.dims(za).1;
    let (mut za, mut zb) = (za, zb);
    if cfg.objective.center_columns {
        let ma = tape.mean_axis0(za);
        za = tape.sub_row(za, ma);
        let mb = tape.mean_axis0(zb);
        zb = tape.sub_row(zb, mb);
    }
    let s = tape.matmul(za, zb, true, false);
    let sa = tape.mul(za, za);
    let va = tape.sum_axis0(sa);
    let sb = tape.mul(zb, zb);
    let vb = tape.sum_axis0(sb);
    let corr = tape.normalize_correlation(s, va, vb, r::<S>(cfg.objective.norm_floor));

    let mut eye = vec![S::zero(); p * p];
    let mut off = vec![S::one(); p * p];
    for i in 0..p {
        eye[i * p + i] = S::one();
        off[i * p + i] = S::zero();
    }
    let eye = tape.constant(eye, p, p);
    let off = tape.constant(off, p, p);

    let diag = tape.mul(corr, eye);
    let miss = tape.sub(eye, diag);
    let miss2 = tape.mul(miss, miss);
    let invariance = tape.sum_all(miss2);

    let offc = tape.mul(corr, off);
    let offc2 = tape.mul(offc, offc);
    let redundancy = tape.sum_all(offc2);

    let scaled = tape.scale(redundancy, r::<S>(cfg.objective.lambda));
    let total = tape.add(invariance, scaled);
    CcTerms { total, invariance, redundancy }
}

pub struct ExampleLosses {
    pub total: NodeId,
    pub ce_a: NodeId,
    pub ce_b: NodeId,
    pub cc: NodeId,
    pub invariance: NodeId,
    pub redundancy: NodeId,
}

/// Full per-example objective over both views.
///
/// Both views share the target speaker's enrollment embedding and the clean
/// utterance's frame labels; the cross-correlation loss compares the same
/// sampled frame positions in each view's projection.
#[allow(clippy::too_many_arguments)]
pub fn dual_view_losses<S: Real>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    cfg: &Config,
    view_a: &[S],
    view_b: &[S],
    enrollment: &[S],
    labels: &[usize],
    plan_a: &MaskPlan,
    plan_b: &MaskPlan,
    cc_seed: u64,
) -> Result<ExampleLosses> {
    let e = model.spkemb.embed(tape, &model.store, &model.frontend, enrollment, r::<S>(cfg.objective.norm_floor))?;
    let out_a = encode_view(tape, model, view_a, e, Some(plan_a))?;
    let out_b = encode_view(tape, model, view_b, e, Some(plan_b))?;

    let logits_a = predict_logits(tape, model, out_a, cfg);
    let logits_b = predict_logits(tape, model, out_b, cfg);
    let ce_a = masked_ce(tape, logits_a, plan_a, labels)?;
    let ce_b = masked_ce(tape, logits_b, plan_b, labels)?;

    let t = tape.dims(out_a).0;
    let rows = sample_cc_rows(t, cfg.objective.cc_frames, cc_seed);
    let pa = cc_projection(tape, model, out_a);
    let pb = cc_projection(tape, model, out_b);
    let ga = tape.gather_rows(pa, rows.clone());
    let gb = tape.gather_rows(pb, rows);
    let cc = cc_loss(tape, ga, gb, cfg);

    let ce = tape.add(ce_a, ce_b);
    let total = tape.add(ce, cc.total);
    Ok(ExampleLosses {
        total,
        ce_a,
        ce_b,
        cc: cc.total,
        invariance: cc.invariance,
        redundancy: cc.redundancy,
    })
}

/// Ablation objective: one view, no cross-correlation term.
pub fn single_view_loss<S: Real>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    cfg: &Config,
    view: &[S],
    enrollment: &[S],
    labels: &[usize],
    plan: &MaskPlan,
) -> Result<NodeId> {
    let e = model.spkemb.embed(tape, &model.store, &model.frontend, enrollment, r::<S>(cfg.objective.norm_floor))?;
    let out = encode_view(tape, model, view, e, Some(plan))?;
    let logits = predict_logits(tape, model, out, cfg);
    masked_ce(tape, logits, plan, labels)
}
