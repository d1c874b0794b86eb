//! Speaker-adapted transformer encoder.  Pre-norm blocks with multi-head
//! self-attention and a GELU feed-forward; one designated layer swaps its
//! layer norms for a conditional variant whose scale is steered by the
//! enrollment embedding:
//!
//! ```text
//! xhat = (x - mean) / sqrt(var + eps)
//! out  = xhat * (w(e) * gamma + b(e)) + beta
//! ```
//!
//! `w(e)` and `b(e)` are affine maps of the embedding, initialized so that
//! `w(e) = 1` and `b(e) = 0` exactly: a freshly initialized adapted layer is
//! bitwise identical to a plain one, and conditioning is learned from zero.
//! One `(w, b)` projection pair serves both norms of the adapted layer; each
//! norm keeps its own `gamma`/`beta`.

use crate::config::SateConfig;
use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::rng::stream;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct SatlParams {
    /// `[e_dim, d]` / `[1, d]`: w(e) = e * gain_w + gain_b, init 0 / ones.
    pub gain_w: ParamId,
    pub gain_b: ParamId,
    /// `[e_dim, d]` / `[1, d]`: b(e) = e * bias_w + bias_b, init 0 / 0.
    pub bias_w: ParamId,
    pub bias_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: softmax is invariant to the per-row score shift a key
    /// bias induces, so such a parameter could never learn anything.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm1_gamma: ParamId,
    pub norm1_beta: ParamId,
    pub norm2_gamma: ParamId,
    pub norm2_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    /// Present on the adapted layer regardless of the enable flag, so the
    /// parameter layout does not depend on a runtime toggle.
    pub satl: Option<SatlParams>,
}

#[derive(Debug, Clone)]
pub struct SateParams {
    pub layers: Vec<LayerParams>,
    pub final_gamma: ParamId,
    pub final_beta: ParamId,
    pub d: usize,
    pub n_heads: usize,
    pub satl_index: usize,
    pub satl_enabled: bool,
    pub satl_both_norms: bool,
    pub ln_eps: f64,
}

/// Encoder activations: `hidden[0]` is the input plus positions, `hidden[i]`
/// the output of block `i`; `out` adds the final layer norm.
pub struct SateOutput {
    pub hidden: Vec<NodeId>,
    pub out: NodeId,
}

fn normal_param<S: Real>(
    store: &mut ParamStore<S>,
    name: String,
    rows: usize,
    cols: usize,
    std: f64,
    seed: u64,
) -> ParamId {
    let mut rng = stream(seed, &name, &[]);
    let data: Vec<S> = (0..rows * cols)
        .map(|_| r::<S>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std))
        .collect();
    store.add(name, rows, cols, data)
}

impl SateParams {
    pub fn init<S: Real>(store: &mut ParamStore<S>, d: usize, e_dim: usize, cfg: &SateConfig, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let attn_std = (1.0 / d as f64).sqrt();
        for i in 0..cfg.n_layers {
            let p = |suffix: &str| format!("sate.layer{i}.{suffix}");
            let ones = vec![S::one(); d];
            let zeros = vec![S::zero(); d];
            let layer = LayerParams {
                wq: normal_param(store, p("attn.q.weight"), d, d, attn_std, seed),
                bq: store.add(p("attn.q.bias"), 1, d, zeros.clone()),
                wk: normal_param(store, p("attn.k.weight"), d, d, attn_std, seed),
                wv: normal_param(store, p("attn.v.weight"), d, d, attn_std, seed),
                bv: store.add(p("attn.v.bias"), 1, d, zeros.clone()),
                wo: normal_param(store, p("attn.out.weight"), d, d, attn_std, seed),
                bo: store.add(p("attn.out.bias"), 1, d, zeros.clone()),
                norm1_gamma: store.add(p("norm1.gamma"), 1, d, ones.clone()),
                norm1_beta: store.add(p("norm1.beta"), 1, d, zeros.clone()),
                norm2_gamma: store.add(p("norm2.gamma"), 1, d, ones.clone()),
                norm2_beta: store.add(p("norm2.beta"), 1, d, zeros.clone()),
                ffn_w1: normal_param(store, p("ffn.in.weight"), d, cfg.ffn_dim, (2.0 / d as f64).sqrt(), seed),
                ffn_b1: store.add(p("ffn.in.bias"), 1, cfg.ffn_dim, vec![S::zero(); cfg.ffn_dim]),
                ffn_w2: normal_param(store, p("ffn.out.weight"), cfg.ffn_dim, d, (1.0 / cfg.ffn_dim as f64).sqrt(), seed),
                ffn_b2: store.add(p("ffn.out.bias"), 1, d, zeros.clone()),
                satl: (i == cfg.satl_index).then(|| SatlParams {
                    gain_w: store.add(p("satl.gain.weight"), e_dim, d, vec![S::zero(); e_dim * d]),
                    gain_b: store.add(p("satl.gain.bias"), 1, d, ones.clone()),
                    bias_w: store.add(p("satl.bias.weight"), e_dim, d, vec![S::zero(); e_dim * d]),
                    bias_b: store.add(p("satl.bias.bias"), 1, d, zeros.clone()),
                }),
            };
            layers.push(layer);
        }
        let final_gamma = store.add("sate.final.gamma", 1, d, vec![S::one(); d]);
        let final_beta = store.add("sate.final.beta", 1, d, vec![S::zero(); d]);
        SateParams {
            layers,
            final_gamma,
            final_beta,
            d,
            n_heads: cfg.n_heads,
            satl_index: cfg.satl_index,
            satl_enabled: cfg.satl_enabled,
            satl_both_norms: cfg.satl_both_norms,
            ln_eps: cfg.ln_eps,
        }
    }

    /// Run the encoder over masked frames `z` (`[T, d]`), conditioned on the
    /// enrollment embedding `cond` (`[1, e_dim]`) when adaptation is enabled.
    pub fn encode<S: Real>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        z: NodeId,
        cond: Option<NodeId>,
    ) -> Result<SateOutput> {
        let (t, d) = tape.dims(z);
        if d != self.d {
            return Err(Error::Shape(format!("encoder expects {} dims, got {d}", self.d)));
        }
        if self.satl_enabled && cond.is_none() {
            return Err(Error::Training("speaker adaptation is enabled but no embedding was given".into()));
        }
        let eps = r::<S>(self.ln_eps);
        let pos = tape.constant(sinusoidal_positions::<S>(t, d), t, d);
        let mut x = tape.add(z, pos);
        let mut hidden = vec![x];

        for l in &self.layers {
            // One shared (w(e), b(e)) pair per adapted layer.
            let cond_parts = match (&l.satl, self.satl_enabled, cond) {
                (Some(sp), true, Some(e)) => {
                    let gw = tape.param(store, sp.gain_w);
                    let gb = tape.param(store, sp.gain_b);
                    let bw = tape.param(store, sp.bias_w);
                    let bb = tape.param(store, sp.bias_b);
                    let we = tape.matmul(e, gw, false, false);
                    let we = tape.add(we, gb);
                    let be = tape.matmul(e, bw, false, false);
                    let be = tape.add(be, bb);
                    Some((we, be))
                }
                _ => None,
            };
            let scale_of = |tape: &mut Tape<S>, gamma: ParamId, use_cond: bool| -> NodeId {
                let g = tape.param(store, gamma);
                match (use_cond, cond_parts) {
                    (true, Some((we, be))) => {
                        let wg = tape.mul(we, g);
                        tape.add(wg, be)
                    }
                    _ => g,
                }
            };

            let scale1 = scale_of(tape, l.norm1_gamma, true);
            let beta1 = tape.param(store, l.norm1_beta);
            let n1 = scaled_layer_norm(tape, x, scale1, beta1, eps);

            let q = affine(tape, store, n1, l.wq, l.bq);
            let wk = tape.param(store, l.wk);
            let k = tape.matmul(n1, wk, false, false);
            let v = affine(tape, store, n1, l.wv, l.bv);
            let hd = d / self.n_heads;
            let inv_sqrt = r::<S>(1.0 / (hd as f64).sqrt());
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = tape.narrow_cols(q, h * hd, hd);
                let kh = tape.narrow_cols(k, h * hd, hd);
                let vh = tape.narrow_cols(v, h * hd, hd);
                let s = tape.matmul(qh, kh, false, true);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_rows(s);
                heads.push(tape.matmul(a, vh, false, false));
            }
            let cat = tape.concat_cols(&heads);
            let attn = affine(tape, store, cat, l.wo, l.bo);
            x = tape.add(x, attn);

            let scale2 = scale_of(tape, l.norm2_gamma, self.satl_both_norms);
            let beta2 = tape.param(store, l.norm2_beta);
            let n2 = scaled_layer_norm(tape, x, scale2, beta2, eps);
            let h1 = affine(tape, store, n2, l.ffn_w1, l.ffn_b1);
            let h1 = tape.gelu(h1);
            let h2 = affine(tape, store, h1, l.ffn_w2, l.ffn_b2);
            x = tape.add(x, h2);
            hidden.push(x);
        }

        let fg = tape.param(store, self.final_gamma);
        let fb = tape.param(store, self.final_beta);
        let out = scaled_layer_norm(tape, x, fg, fb, eps);
        Ok(SateOutput { hidden, out })
    }
}

fn affine<S: Real>(tape: &mut Tape<S>, store: &ParamStore<S>, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
    let wn = tape.param(store, w);
    let bn = tape.param(store, b);
    let y = tape.matmul(x, wn, false, false);
    tape.add_row(y, bn)
}

/// Standardize each row, then apply a `[1, d]` scale and shift.  Plain layer
/// norm passes `gamma` as the scale; the conditional variant passes
/// `w(e) * gamma + b(e)`.
pub fn scaled_layer_norm<S: Real>(tape: &mut Tape<S>, x: NodeId, scale: NodeId, beta: NodeId, eps: S) -> NodeId {
    let xhat = tape.row_normalize(x, eps);
    let scaled = tape.mul_row(xhat, scale);
    tape.add_row(scaled, beta)
}

/// Standard sinusoidal position table, row-major `[t, d]`.
pub fn sinusoidal_positions<S: Real>(t: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(t * d);
    for pos in 0..t {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out.push(r::<S>(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn small_cfg() -> SateConfig {
        SateConfig {
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            satl_index: 0,
            satl_enabled: true,
            satl_both_norms: true,
            ln_eps: 1e-5,
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "test.mat", &[]);
        (0..rows * cols).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
    }

    fn unit_row(n: usize, seed: u64) -> Vec<f64> {
        let raw = rand_mat(1, n, seed);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / norm).collect()
    }

    #[test]
    fn conditional_norm_matches_hand_example() {
        // Row [2, 4]: mean 3, variance 1, so xhat = [-1, 1]; a scale of
        // [2, 2] and zero shift gives [-2, 2].
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2.0, 4.0], 1, 2);
        let scale = tape.constant(vec![2.0, 2.0], 1, 2);
        let beta = tape.constant(vec![0.0, 0.0], 1, 2);
        let out = scaled_layer_norm(&mut tape, x, scale, beta, 1e-12);
        let got = tape.data(out);
        assert!((got[0] + 2.0).abs() < 1e-9 && (got[1] - 2.0).abs() < 1e-9, "{got:?}");
    }

    #[test]
    fn identity_conditioning_is_bitwise_vanilla() {
        let (d, e_dim, t) = (8, 4, 5);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 3);
        let mut plain = sate.clone();
        plain.satl_enabled = false;

        for seed in 0..10 {
            let zv = rand_mat(t, d, 100 + seed);
            let ev = unit_row(e_dim, 200 + seed);

            let mut t1 = Tape::new();
            let z1 = t1.constant(zv.clone(), t, d);
            let e1 = t1.constant(ev.clone(), 1, e_dim);
            let adapted = sate.encode(&mut t1, &store, z1, Some(e1)).unwrap();

            let mut t2 = Tape::new();
            let z2 = t2.constant(zv, t, d);
            let vanilla = plain.encode(&mut t2, &store, z2, None).unwrap();

            let a = t1.data(adapted.out);
            let b = t2.data(vanilla.out);
            for i in 0..t * d {
                assert_eq!(a[i].to_bits(), b[i].to_bits(), "seed {seed}, element {i}");
            }
        }
    }

    #[test]
    fn learned_conditioning_reacts_to_the_embedding() {
        let (d, e_dim, t) = (8, 4, 5);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 3);
        // Leave identity: perturb the adaptation weights so w(e) depends on e.
        let sp = sate.layers[0].satl.as_ref().unwrap();
        store.set_data(sp.gain_w, rand_mat(e_dim, d, 50).iter().map(|v| v * 0.3).collect());
        store.set_data(sp.bias_w, rand_mat(e_dim, d, 51).iter().map(|v| v * 0.3).collect());

        let zv = rand_mat(t, d, 9);
        let run = |ev: Vec<f64>| {
            let mut tape = Tape::new();
            let z = tape.constant(zv.clone(), t, d);
            let e = tape.constant(ev, 1, e_dim);
            let out = sate.encode(&mut tape, &store, z, Some(e)).unwrap();
            tape.data(out.out).to_vec()
        };
        let o1 = run(unit_row(e_dim, 60));
        let o2 = run(unit_row(e_dim, 61));
        let diff: f64 = o1.iter().zip(&o2).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "two embeddings produced the same encoding");
    }

    #[test]
    fn shapes_and_layer_outputs_are_exposed() {
        let (d, e_dim, t) = (8, 4, 7);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 1);
        let mut tape = Tape::new();
        let z = tape.constant(rand_mat(t, d, 2), t, d);
        let e = tape.constant(unit_row(e_dim, 3), 1, e_dim);
        let out = sate.encode(&mut tape, &store, z, Some(e)).unwrap();
        assert_eq!(out.hidden.len(), cfg.n_layers + 1);
        for &h in &out.hidden {
            assert_eq!(tape.dims(h), (t, d));
        }
        assert_eq!(tape.dims(out.out), (t, d));
        // Final norm at init (gamma 1, beta 0): every row standardized.
        let data = tape.data(out.out);
        for row in data.chunks(d) {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3, "mean {mean}, var {var}");
        }
    }

    #[test]
    fn single_frame_sequences_encode() {
        let (d, e_dim) = (8, 4);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 1);
        let mut tape = Tape::new();
        let z = tape.constant(rand_mat(1, d, 4), 1, d);
        let e = tape.constant(unit_row(e_dim, 5), 1, e_dim);
        let out = sate.encode(&mut tape, &store, z, Some(e)).unwrap();
        assert_eq!(tape.dims(out.out), (1, d));
        assert!(tape.data(out.out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn missing_embedding_is_rejected_when_adaptation_is_on() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, 8, 4, &cfg, 1);
        let mut tape = Tape::new();
        let z = tape.constant(rand_mat(3, 8, 6), 3, 8);
        assert!(sate.encode(&mut tape, &store, z, None).is_err());
    }

    #[test]
    fn encoder_is_order_sensitive_through_positions() {
        let (d, e_dim, t) = (8, 4, 6);
        let cfg = small_cfg();
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 7);
        let zv = rand_mat(t, d, 8);
        let mut swapped = zv.clone();
        for j in 0..d {
            swapped.swap(j, d + j);
        }
        let ev = unit_row(e_dim, 9);
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let z = tape.constant(data, t, d);
            let e = tape.constant(ev.clone(), 1, e_dim);
            let out = sate.encode(&mut tape, &store, z, Some(e)).unwrap();
            tape.data(out.out).to_vec()
        };
        let a = run(zv);
        let b = run(swapped);
        // Swapping frames 0 and 1 must not merely swap output rows: the
        // position table breaks the symmetry.
        let row0_matches_row1: bool = a[..d].iter().zip(&b[d..2 * d]).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(!row0_matches_row1, "encoder ignored positions");
    }

    #[test]
    fn one_layer_gradients_match_central_differences() {
        let (d, e_dim, t) = (6, 3, 4);
        let cfg = SateConfig {
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            satl_index: 0,
            satl_enabled: true,
            satl_both_norms: true,
            ln_eps: 1e-5,
        };
        let mut store = ParamStore::<f64>::new();
        let sate = SateParams::init(&mut store, d, e_dim, &cfg, 11);
        // Move the adaptation weights off identity so their gradients are
        // exercised at a generic point.
        let sp = sate.layers[0].satl.clone().unwrap();
        store.set_data(sp.gain_w, rand_mat(e_dim, d, 70).iter().map(|v| v * 0.2).collect());
        store.set_data(sp.bias_w, rand_mat(e_dim, d, 71).iter().map(|v| v * 0.2).collect());
        let zv = rand_mat(t, d, 12);
        let ev = unit_row(e_dim, 13);
        // eps = 1e-3: with the loss near 1, the f64 roundoff floor of the
        // central difference sits around 1e-13, two decades under tolerance
        // even for parameters whose true gradient is ~1e-8.
        let report = grad_check(&store, 1e-3, 1e-4, |tape, ps| {
            let z = tape.constant(zv.clone(), t, d);
            let e = tape.constant(ev.clone(), 1, e_dim);
            let out = sate.encode(tape, ps, z, Some(e)).unwrap();
            let sq = tape.mul(out.out, out.out);
            tape.mean_all(sq)
        });
        assert!(report.pass, "max rel err {}: {:?}", report.max_rel_err, report.failures.first());
    }
}
