//! Speaker embeddings from enrollment audio: the enrollment waveform runs
//! through the same convolutional frontend as the views, is mean-pooled over
//! frames, linearly projected, and L2-normalized.  An oracle variant hands out
//! frozen unit vectors keyed by speaker id for tests and ablations.

use crate::config::SpkembConfig;
use crate::error::Result;
use crate::frontend::FrontendParams;
use crate::real::{r, Real};
use crate::rng::stream;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct SpkembParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub e_dim: usize,
}

impl SpkembParams {
    pub fn init<S: Real>(store: &mut ParamStore<S>, d: usize, cfg: &SpkembConfig, seed: u64) -> Self {
        let name = "spkemb.proj.weight";
        let std = (1.0 / d as f64).sqrt();
        let mut rng = stream(seed, name, &[]);
        let data: Vec<S> = (0..d * cfg.e_dim)
            .map(|_| r::<S>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std))
            .collect();
        let proj_w = store.add(name, d, cfg.e_dim, data);
        let proj_b = store.add("spkemb.proj.bias", 1, cfg.e_dim, vec![S::zero(); cfg.e_dim]);
        SpkembParams { proj_w, proj_b, e_dim: cfg.e_dim }
    }

    /// Embed an enrollment waveform as a unit row vector `[1, e_dim]`.
    pub fn embed<S: Real>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        fe: &FrontendParams,
        wave: &[S],
        norm_floor: S,
    ) -> Result<NodeId> {
        let z = fe.encode(tape, store, wave)?;
        let pooled = tape.mean_axis0(z);
        let w = tape.param(store, self.proj_w);
        let b = tape.param(store, self.proj_b);
        let x = tape.matmul(pooled, w, false, false);
        let x = tape.add(x, b);
        Ok(tape.l2_normalize_rows(x, norm_floor))
    }
}

/// Frozen unit embedding for a speaker id; a pure function of
/// (e_dim, speaker, seed), never trained.
pub fn oracle_embedding<S: Real>(e_dim: usize, speaker: usize, seed: u64) -> Vec<S> {
    let mut rng = stream(seed, "spkemb.oracle", &[speaker as u64]);
    let raw: Vec<f64> = (0..e_dim).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|&v| r::<S>(v / norm)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FrontendConfig;

    fn setup(fe_cfg: &FrontendConfig, seed: u64) -> (ParamStore<f64>, FrontendParams, SpkembParams) {
        let mut store = ParamStore::new();
        let fe = FrontendParams::init(&mut store, fe_cfg, seed);
        let se = SpkembParams::init(&mut store, fe_cfg.d, &SpkembConfig { e_dim: 6, oracle: false }, seed);
        (store, fe, se)
    }

    fn rand_wave(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "test.wave", &[]);
        (0..len).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * 0.3).collect()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let cfg = FrontendConfig { d: 4, kernels: vec![4, 3], strides: vec![2, 2] };
        let (store, fe, se) = setup(&cfg, 3);
        let wave = rand_wave(60, 1);
        let mut t1 = Tape::new();
        let e1 = se.embed(&mut t1, &store, &fe, &wave, 1e-8).unwrap();
        assert_eq!(t1.dims(e1), (1, 6));
        let n: f64 = t1.data(e1).iter().map(|v| v * v).sum::<f64>();
        assert!((n - 1.0).abs() < 1e-12, "norm^2 = {n}");
        let mut t2 = Tape::new();
        let e2 = se.embed(&mut t2, &store, &fe, &wave, 1e-8).unwrap();
        assert_eq!(t1.data(e1), t2.data(e2));
    }

    #[test]
    fn pooled_embedding_ignores_frame_order() {
        // Kernel == stride makes frames disjoint 4-sample blocks, so swapping
        // blocks of the waveform permutes frames exactly.
        let cfg = FrontendConfig { d: 3, kernels: vec![4], strides: vec![4] };
        let (store, fe, se) = setup(&cfg, 5);
        let wave = rand_wave(32, 2);
        let blocks: Vec<&[f64]> = wave.chunks(4).collect();
        let permuted: Vec<f64> = [3usize, 1, 0, 2, 7, 5, 6, 4]
            .iter()
            .flat_map(|&i| blocks[i].iter().copied())
            .collect();

        let mut t1 = Tape::new();
        let e1 = se.embed(&mut t1, &store, &fe, &wave, 1e-8).unwrap();
        let mut t2 = Tape::new();
        let e2 = se.embed(&mut t2, &store, &fe, &permuted, 1e-8).unwrap();
        for (x, y) in t1.data(e1).iter().zip(t2.data(e2)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gradients_flow_into_projection_and_frontend() {
        let cfg = FrontendConfig { d: 4, kernels: vec![4, 3], strides: vec![2, 2] };
        let (store, fe, se) = setup(&cfg, 7);
        let mut tape = Tape::new();
        let e = se.embed(&mut tape, &store, &fe, &rand_wave(60, 3), 1e-8).unwrap();
        let probe = tape.constant((0..6).map(|i| 0.3 + 0.1 * i as f64).collect(), 1, 6);
        let dot = tape.mul(e, probe);
        let loss = tape.sum_all(dot);
        let grads = tape.backward(loss, store.len());
        for pid in [se.proj_w, se.proj_b, fe.layers[0].weight] {
            let g = grads.param(pid).expect("used in graph");
            assert!(g.iter().any(|&v| v != 0.0), "zero grad for {}", store.get(pid).name);
        }
    }

    #[test]
    fn oracle_embeddings_are_frozen_unit_vectors() {
        let a: Vec<f64> = oracle_embedding(8, 3, 11);
        let b: Vec<f64> = oracle_embedding(8, 3, 11);
        let c: Vec<f64> = oracle_embedding(8, 4, 11);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let n: f64 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
