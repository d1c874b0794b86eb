//! Strided convolutional waveform encoder: a stack of conv1d + GELU layers
//! turning a mono waveform into a frame sequence.  Both corrupted views of an
//! example run through the same parameters.

use crate::config::FrontendConfig;
use crate::error::{Error, Result};
use crate::real::{r, Real};
use crate::rng::stream;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

/// Parameter handles for the encoder; geometry is baked in at init time so a
/// stored checkpoint cannot silently run under a different layout.
#[derive(Debug, Clone)]
pub struct FrontendParams {
    pub layers: Vec<ConvLayer>,
    pub d: usize,
}

impl FrontendParams {
    /// Register freshly initialized encoder parameters: He-scaled weights from
    /// a stream keyed by the parameter name, zero biases.
    pub fn init<S: Real>(store: &mut ParamStore<S>, cfg: &FrontendConfig, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(cfg.kernels.len());
        for (i, (&k, &s)) in cfg.kernels.iter().zip(&cfg.strides).enumerate() {
            let c_in = if i == 0 { 1 } else { cfg.d };
            let name = format!("frontend.conv{i}.weight");
            let std = (2.0 / (c_in * k) as f64).sqrt();
            let mut rng = stream(seed, &name, &[]);
            let data: Vec<S> =
                (0..cfg.d * c_in * k).map(|_| r::<S>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * std)).collect();
            let weight = store.add(name, cfg.d, c_in * k, data);
            let bias = store.add(format!("frontend.conv{i}.bias"), 1, cfg.d, vec![S::zero(); cfg.d]);
            layers.push(ConvLayer { weight, bias, kernel: k, stride: s });
        }
        FrontendParams { layers, d: cfg.d }
    }

    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        for l in self.layers.iter().rev() {
            rf = (rf - 1) * l.stride + l.kernel;
        }
        rf
    }

    /// Encode a waveform into frames `[T, d]`.
    pub fn encode<S: Real>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, wave: &[S]) -> Result<NodeId> {
        let rf = self.receptive_field();
        if wave.len() < rf {
            return Err(Error::Shape(format!(
                "waveform of {} samples is shorter than the {rf}-sample receptive field",
                wave.len()
            )));
        }
        let mut x = tape.constant(wave.to_vec(), 1, wave.len());
        for l in &self.layers {
            let w = tape.param(store, l.weight);
            let b = tape.param(store, l.bias);
            x = tape.conv1d(x, w, b, l.kernel, l.stride);
            x = tape.gelu(x);
        }
        Ok(tape.transpose(x))
    }
}
