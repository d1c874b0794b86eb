//! Span masking over frame sequences: every frame starts a fixed-length
//! masked span with probability `p_start`, spans may overlap, and masked
//! positions are replaced by a learned embedding row.  The prediction loss is
//! computed only at masked positions.

use std::sync::Arc;

use rand::Rng;

use crate::config::MaskingConfig;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{derive_seed, stream};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Frames where a span begins.
    pub starts: Vec<usize>,
    /// Union of all spans, sorted and deduplicated.
    pub masked: Arc<Vec<usize>>,
    pub t: usize,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn coverage(&self) -> f64 {
        self.masked.len() as f64 / self.t.max(1) as f64
    }
}

/// Draw one mask plan for a `t`-frame sequence.  May be empty for small `t`
/// or `p_start`; see [`plan_mask_nonempty`] for the retrying variant.
pub fn plan_mask(t: usize, cfg: &MaskingConfig, seed: u64) -> MaskPlan {
    let mut rng = stream(seed, "mask.plan", &[]);
    let mut starts = Vec::new();
    let mut covered = vec![false; t];
    for f in 0..t {
        if rng.gen_bool(cfg.p_start) {
            starts.push(f);
            for c in covered.iter_mut().take((f + cfg.span).min(t)).skip(f) {
                *c = true;
            }
        }
    }
    let masked: Vec<usize> = (0..t).filter(|&f| covered[f]).collect();
    MaskPlan { starts, masked: Arc::new(masked), t }
}

/// Like [`plan_mask`], but redraws from derived sub-seeds until at least one
/// frame is masked.  The sub-seed chain is pure, so retries stay reproducible.
pub fn plan_mask_nonempty(t: usize, cfg: &MaskingConfig, seed: u64, max_tries: usize) -> Result<MaskPlan> {
    for attempt in 0..max_tries as u64 {
        let plan = plan_mask(t, cfg, derive_seed(seed, "mask.retry", &[attempt]));
        if !plan.is_empty() {
            return Ok(plan);
        }
    }
    Err(Error::Masking(format!(
        "no frames masked in {max_tries} draws (t = {t}, p_start = {}, span = {})",
        cfg.p_start, cfg.span
    )))
}

/// Replace the plan's frames of `z` (shape `[t, d]`) with the learned mask
/// embedding row.
pub fn apply_mask<S: Real>(tape: &mut Tape<S>, z: NodeId, plan: &MaskPlan, mask_embed: NodeId) -> NodeId {
    assert_eq!(tape.dims(z).0, plan.t, "mask plan length does not match the frame count");
    tape.row_mask(z, plan.masked.clone(), mask_embed)
}
