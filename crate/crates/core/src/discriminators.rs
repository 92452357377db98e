//! DCGAN-style convolutional discriminators over prediction maps.
//!
//! The spatial discriminator sees one probability map (`C` channels); the
//! spatial-temporal one sees two consecutive maps stacked along channels
//! (`2C`). Apart from the first layer's input width both share one layout,
//! so layers `2..=J` have identical shapes and can be compared weight for
//! weight.

use crate::error::{Error, Result};
use crate::nn::{self, ConvCache, ConvSpec};
use crate::params::{Grads, ParamSet};
use crate::segnet::two_mut;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the final score map is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscOutput {
    /// Mean of the final logit map, then one sigmoid.
    Global,
    /// One sigmoid score per final-map position.
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub input_channels: usize,
    /// Width of the first layer; each later layer doubles it, the last emits 1.
    pub base_channels: usize,
    pub num_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub output: DiscOutput,
}

impl DiscConfig {
    /// Discriminator over single-frame predictions.
    pub fn spatial(num_classes: usize, base_channels: usize) -> Self {
        DiscConfig {
            input_channels: num_classes,
            base_channels,
            num_layers: 4,
            kernel: 3,
            stride: 2,
            leaky_slope: 0.2,
            output: DiscOutput::Global,
        }
    }

    /// Discriminator over two stacked consecutive predictions.
    pub fn spatial_temporal(num_classes: usize, base_channels: usize) -> Self {
        DiscConfig {
            input_channels: 2 * num_classes,
            ..Self::spatial(num_classes, base_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 || self.input_channels == 0 || self.base_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(format!("invalid discriminator config {self:?}")));
        }
        Ok(())
    }

    /// Geometry of layer `j` (1-based).
    pub fn layer_spec(&self, j: usize) -> ConvSpec {
        let inc = if j == 1 {
            self.input_channels
        } else {
            self.base_channels << (j - 2)
        };
        let outc = if j == self.num_layers { 1 } else { self.base_channels << (j - 1) };
        ConvSpec::new(inc, outc, self.kernel, self.stride, self.kernel / 2)
    }

    /// Layers whose weight shapes do not depend on the input width.
    pub fn shared_layers(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.num_layers
    }
}

/// Discriminator parameters (`conv{j}.w`, `conv{j}.b` for `j = 1..=J`).
pub type DiscParams = ParamSet;

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn init_disc_params(cfg: &DiscConfig, seed: u64) -> Result<DiscParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for j in 1..=cfg.num_layers {
        let spec = cfg.layer_spec(j);
        ps.push_uniform(format!("conv{j}.w"), spec.weight_shape(), spec.fan_in(), false, &mut rng);
        ps.push_uniform(format!("conv{j}.b"), vec![spec.out_channels], spec.fan_in(), true, &mut rng);
    }
    Ok(ps)
}

/// Row-major flattening of layer `j`'s filter bank (biases excluded).
pub fn flatten_layer_weights(params: &DiscParams, j: usize) -> Result<Vec<f64>> {
    let n_layers = params.len() / 2;
    if j == 0 || j > n_layers {
        return Err(Error::InvalidArgument(format!("layer {j} outside 1..={n_layers}")));
    }
    Ok(params.params[2 * (j - 1)].data.clone())
}

/// Recorded forward pass.
#[derive(Debug)]
pub struct DiscForward {
    caches: Vec<ConvCache>,
    acts: Vec<Tensor>,
    /// Final logits (length 1 for [`DiscOutput::Global`]).
    pub logits: Vec<f64>,
    /// Sigmoid of `logits`.
    pub scores: Vec<f64>,
    map_len: usize,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
}

impl Discriminator {
    pub fn new(config: DiscConfig) -> Result<Self> {
        config.validate()?;
        Ok(Discriminator { config })
    }

    pub fn forward(&self, params: &DiscParams, input: &Tensor) -> Result<DiscForward> {
        let cfg = &self.config;
        if input.channels != cfg.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} channels, got {}",
                cfg.input_channels, input.channels
            )));
        }
        if params.len() != 2 * cfg.num_layers {
            return Err(Error::ShapeMismatch("discriminator parameter count".into()));
        }
        let mut caches = Vec::with_capacity(cfg.num_layers);
        let mut acts: Vec<Tensor> = Vec::with_capacity(cfg.num_layers);
        for j in 1..=cfg.num_layers {
            let spec = cfg.layer_spec(j);
            let x = if j == 1 { input } else { acts.last().unwrap() };
            let (mut y, cache) = nn::conv_forward(&spec, &params.params[2 * j - 2].data, &params.params[2 * j - 1].data, x);
            if j < cfg.num_layers {
                nn::leaky_relu_inplace(&mut y, cfg.leaky_slope);
            }
            if !y.is_finite() {
                return Err(Error::NonFinite(format!("discriminator layer conv{j}")));
            }
            caches.push(cache);
            acts.push(y);
        }
        let map = &acts.last().unwrap().data;
        let logits = match cfg.output {
            DiscOutput::Global => vec![map.iter().sum::<f64>() / map.len() as f64],
            DiscOutput::Patch => map.clone(),
        };
        let scores = logits.iter().map(|&z| nn::sigmoid(z)).collect();
        Ok(DiscForward {
            caches,
            map_len: map.len(),
            acts,
            logits,
            scores,
        })
    }

    /// Back-propagates `d_logits` (one entry per logit). Parameter gradients
    /// accumulate into `grads` when given; the input gradient is returned
    /// when `need_input` is set.
    pub fn backward(
        &self,
        params: &DiscParams,
        fwd: &DiscForward,
        d_logits: &[f64],
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        let cfg = &self.config;
        let last = fwd.acts.last().unwrap();
        let mut g = Tensor::zeros(last.channels, last.height, last.width);
        match cfg.output {
            DiscOutput::Global => g.data.fill(d_logits[0] / fwd.map_len as f64),
            DiscOutput::Patch => g.data.copy_from_slice(d_logits),
        }
        let mut scratch = params.zeros_like();
        for j in (1..=cfg.num_layers).rev() {
            if j < cfg.num_layers {
                nn::leaky_relu_backward(&mut g, &fwd.acts[j - 1], cfg.leaky_slope);
            }
            let spec = cfg.layer_spec(j);
            let target = match grads.as_deref_mut() {
                Some(gr) => gr,
                None => &mut scratch,
            };
            let (gw, gb) = two_mut(&mut target.0, 2 * j - 2, 2 * j - 1);
            let need = j > 1 || need_input;
            {
                let next = nn::conv_backward(&spec, &params.params[2 * j - 2].data, &fwd.caches[j - 1], &g, gw, gb, need)?;
                g = next
            }
        }
        Some(g)
    }

    /// Scores in `(0, 1)`: one value, or one per patch.
    pub fn scores(&self, params: &DiscParams, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(params, input)?.scores)
    }
}

/// Global score of `input` under `params`.
pub fn disc_forward(cfg: &DiscConfig, params: &DiscParams, input: &Tensor) -> Result<f64> {
    let d = Discriminator::new(DiscConfig {
        output: DiscOutput::Global,
        ..cfg.clone()
    })?;
    Ok(d.forward(params, input)?.scores[0])
}
