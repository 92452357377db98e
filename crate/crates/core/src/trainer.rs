//! Alternating adversarial training of the segmentation network against the
//! spatial and spatial-temporal discriminators, plus the ablation modes.
//!
//! Each step samples one source and one target clip (per batch item) and a
//! frame index `k`, evaluates the pairs `(k, k-1)` and `(k-1, k-2)` in both
//! domains, then
//!
//! 1. updates the discriminators on the detached predictions, and
//! 2. updates the segmentation network with the discriminators frozen.

use crate::checkpoint::Checkpoint;
use crate::discriminators::{init_disc_params, DiscConfig, DiscOutput, DiscParams, Discriminator};
use crate::error::{Error, Result};
use crate::evalkit::{self, ConfusionMatrix, EvalReport, FeatureStats};
use crate::flowwarp::{
    backward_warp, backward_warp_labels, compose_backward, estimate_backward_flow, estimate_flow, occlusion_mask,
    BlockMatchConfig, FlowField, ValidityMask,
};
use crate::losses::{self, LossBundle, LossWeights};
use crate::nn;
use crate::params::{Grads, ParamSet, Sgd, SgdConfig};
use crate::segnet::{init_params, PairSpec, SegModelConfig, SegNet, SeqForward};
use crate::synthdata::{Domain, VideoClip};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Training configuration; one of the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SourceOnly,
    Sa,
    Sta,
    Jt,
    Ctcr,
    Itcr,
    Davsn,
}

/// Loss terms switched on by a [`Mode`], besides the supervised loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub sa: bool,
    pub sta: bool,
    pub wd: bool,
    pub itcr: bool,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::SourceOnly,
        Mode::Sa,
        Mode::Sta,
        Mode::Jt,
        Mode::Ctcr,
        Mode::Itcr,
        Mode::Davsn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SourceOnly => "source_only",
            Mode::Sa => "sa",
            Mode::Sta => "sta",
            Mode::Jt => "jt",
            Mode::Ctcr => "ctcr",
            Mode::Itcr => "itcr",
            Mode::Davsn => "davsn",
        }
    }

    pub fn terms(self) -> ActiveTerms {
        let (sa, sta, wd, itcr) = match self {
            Mode::SourceOnly => (false, false, false, false),
            Mode::Sa => (true, false, false, false),
            Mode::Sta => (false, true, false, false),
            Mode::Jt => (true, true, false, false),
            Mode::Ctcr => (true, true, true, false),
            Mode::Itcr => (false, false, false, true),
            Mode::Davsn => (true, true, true, true),
        };
        ActiveTerms { sa, sta, wd, itcr }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase().replace('-', "_"))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

/// Where displacement fields come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Ground-truth fields and occlusion stored with the clips.
    Oracle,
    /// Block matching on the frames, with a forward-backward occlusion check.
    Estimated,
}

/// Surrogate the segmentation network minimises for the adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenAdversarial {
    /// `−ln D(target)`.
    NonSaturating,
    /// `ln(1 − D(target))`, the literal min-max form.
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lambda_sa: f64,
    pub lambda_wd: f64,
    pub lambda_u: f64,
    pub lr0: f64,
    /// Discriminator learning rate; `lr0` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_lr0: Option<f64>,
    pub total_steps: usize,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Clips per domain per step.
    pub batch_size: usize,
    /// Seeds parameter initialisation.
    pub seed: u64,
    /// Seeds clip and frame sampling.
    pub data_seed: u64,
    pub flow_source: FlowSource,
    /// Frame gap `l` between the current prediction and the propagated one
    /// in the consistency term.
    pub itcr_gap: usize,
    pub gen_adversarial: GenAdversarial,
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_down_levels: usize,
    pub shared_branches: bool,
    pub disc_base_channels: usize,
    pub disc_output: DiscOutput,
    pub patch_radius: usize,
    pub search_radius: usize,
    pub occlusion_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Davsn,
            lambda_sa: 1.0,
            lambda_wd: 1.0,
            lambda_u: 0.001,
            lr0: 1e-4,
            disc_lr0: None,
            total_steps: 3000,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 1,
            seed: 0,
            data_seed: 0,
            flow_source: FlowSource::Oracle,
            itcr_gap: 1,
            gen_adversarial: GenAdversarial::NonSaturating,
            num_classes: 5,
            base_channels: 8,
            num_down_levels: 2,
            shared_branches: true,
            disc_base_channels: 8,
            disc_output: DiscOutput::Global,
            patch_radius: 2,
            search_radius: 4,
            occlusion_tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("lambda_sa", self.lambda_sa),
            ("lambda_wd", self.lambda_wd),
            ("lambda_u", self.lambda_u),
            ("lr0", self.lr0),
            ("poly_power", self.poly_power),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("occlusion_tau", self.occlusion_tau),
            ("disc_lr0", self.disc_lr0.unwrap_or(0.0)),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.itcr_gap == 0 {
            return bad("itcr_gap must be at least 1".into());
        }
        self.model_config().validate()?;
        self.disc_config(false).validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_sa: self.lambda_sa,
            lambda_wd: self.lambda_wd,
            lambda_u: self.lambda_u,
        }
    }

    pub fn model_config(&self) -> SegModelConfig {
        SegModelConfig {
            num_classes: self.num_classes,
            base_channels: self.base_channels,
            num_down_levels: self.num_down_levels,
            shared_branches: self.shared_branches,
        }
    }

    pub fn disc_config(&self, temporal: bool) -> DiscConfig {
        let base = if temporal {
            DiscConfig::spatial_temporal(self.num_classes, self.disc_base_channels)
        } else {
            DiscConfig::spatial(self.num_classes, self.disc_base_channels)
        };
        DiscConfig {
            output: self.disc_output,
            ..base
        }
    }

    pub fn block_match(&self) -> BlockMatchConfig {
        BlockMatchConfig {
            patch_radius: self.patch_radius,
            search_radius: self.search_radius,
        }
    }

    /// Mode actually trained. With `λ_u = 0` the adversarial and
    /// consistency terms cannot reach the segmentation network, so the run
    /// reduces to source-only training.
    pub fn effective_mode(&self) -> Mode {
        if self.lambda_u == 0.0 {
            Mode::SourceOnly
        } else {
            self.mode
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Smallest clip length the sampler can work with.
    pub fn min_frames(&self) -> usize {
        3.max(self.itcr_gap + 2)
    }
}

/// `lr0 · (1 − step/total)^power`.
pub fn poly_lr(step: usize, lr0: f64, total_steps: usize, power: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub gen: ParamSet,
    pub disc_s: DiscParams,
    pub disc_st: DiscParams,
    pub opt_gen: Sgd,
    pub opt_s: Sgd,
    pub opt_st: Sgd,
}

/// Source, target and held-out target clips.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source: Vec<VideoClip>,
    pub target: Vec<VideoClip>,
    pub eval: Vec<VideoClip>,
}

impl TrainData {
    fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::InvalidArgument("training needs source and target clips".into()));
        }
        let (h, w) = (self.source[0].height(), self.source[0].width());
        let splits = [
            ("source", &self.source, Domain::Source),
            ("target", &self.target, Domain::Target),
            ("eval", &self.eval, Domain::Target),
        ];
        for (name, clips, domain) in splits {
            for (i, c) in clips.iter().enumerate() {
                if c.num_classes != cfg.num_classes {
                    return Err(Error::ShapeMismatch(format!(
                        "{name} clip {i} has {} classes, model has {}",
                        c.num_classes, cfg.num_classes
                    )));
                }
                if c.height() != h || c.width() != w {
                    return Err(Error::ShapeMismatch(format!(
                        "{name} clip {i} is {}x{}, expected {h}x{w}",
                        c.height(),
                        c.width()
                    )));
                }
                if c.num_frames() < cfg.min_frames() {
                    return Err(Error::InvalidArgument(format!(
                        "{name} clip {i} has {} frames, need {}",
                        c.num_frames(),
                        cfg.min_frames()
                    )));
                }
                if c.domain != domain {
                    return Err(Error::InvalidArgument(format!("{name} clip {i} is from the {:?} domain", c.domain)));
                }
            }
        }
        Ok(())
    }
}

/// Replaces a clip's stored fields and occlusion with block-matching
/// estimates.
pub fn with_estimated_flow(clip: &VideoClip, bm: &BlockMatchConfig, tau: f64) -> Result<VideoClip> {
    let mut out = clip.clone();
    for i in 0..clip.num_frames() - 1 {
        let (a, b) = (&clip.frames[i], &clip.frames[i + 1]);
        let fwd = estimate_flow(a, b, bm)?;
        let bwd = estimate_backward_flow(a, b, bm)?;
        let valid = occlusion_mask(&fwd, &bwd, tau)?;
        out.occlusion[i] = valid.data.iter().map(|&v| !v).collect();
        out.flows_fwd[i] = fwd;
        out.flows_bwd[i] = bwd;
    }
    Ok(out)
}

/// Clips and frame indices drawn for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSample {
    pub source: Vec<(usize, usize)>,
    pub target: Vec<(usize, usize)>,
}

/// Per-domain forward pass over the pairs needed by one batch item.
struct DomainForward<'a> {
    fwd: SeqForward<'a>,
    /// Index into `fwd.probs` of the prediction `k - itcr_gap`.
    gap_pair: usize,
}

/// A sampled clip, its frame index and the forward pass over it.
type Item<'a> = (&'a VideoClip, usize, DomainForward<'a>);

/// Input gradient returned by a discriminator backward pass in phase 1.
struct Leak {
    /// Source (`true`) or target prediction.
    real: bool,
    item: usize,
    stacked: bool,
    grad: Tensor,
}

/// Discriminator-side values from phase 1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscPhase {
    pub sa: Option<f64>,
    pub sta: Option<f64>,
    pub wd: Option<f64>,
}

/// Generator-side values from phase 2.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenPhase {
    pub ssl: f64,
    pub ctcr_gen: Option<f64>,
    pub itcr: Option<f64>,
    pub gate_fraction: Option<f64>,
    pub total: f64,
}

/// Centres each `c`-long half of `feat` and scales it to unit length.
///
/// Fused scores are only defined up to a per-pixel shift (the softmax
/// ignores it) and their length grows with confidence; removing both leaves
/// the direction of the class evidence, which is what the variance
/// statistics compare.
pub fn normalize_halves(feat: &mut [f64], c: usize) {
    for half in feat.chunks_mut(c) {
        let mean = half.iter().sum::<f64>() / c as f64;
        half.iter_mut().for_each(|v| *v -= mean);
        let norm = half.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            half.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Model, discriminators and configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: SegNet,
    pub d_s: Discriminator,
    pub d_st: Discriminator,
}

fn check_finite(name: &str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss term {name} at step {step}")))
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net: SegNet::new(&config.model_config())?,
            d_s: Discriminator::new(config.disc_config(false))?,
            d_st: Discriminator::new(config.disc_config(true))?,
            config,
        })
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let cfg = &self.config;
        let gen = init_params(&cfg.model_config(), cfg.seed)?;
        let disc_s = init_disc_params(&self.d_s.config, cfg.seed.wrapping_add(1))?;
        let disc_st = init_disc_params(&self.d_st.config, cfg.seed.wrapping_add(2))?;
        Ok(TrainState {
            step: 0,
            opt_gen: Sgd::new(cfg.sgd(), &gen),
            opt_s: Sgd::new(cfg.sgd(), &disc_s),
            opt_st: Sgd::new(cfg.sgd(), &disc_st),
            gen,
            disc_s,
            disc_st,
        })
    }

    /// Clips and frames for `step`. Depends only on `data_seed`, `step` and
    /// the split sizes, never on the mode.
    pub fn sample(&self, step: usize, data: &TrainData) -> StepSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.data_seed);
        rng.set_stream(step as u64);
        let lo = 2.max(self.config.itcr_gap + 1);
        let mut draw = |clips: &[VideoClip]| {
            let i = rng.random_range(0..clips.len());
            let k = rng.random_range(lo..clips[i].num_frames());
            (i, k)
        };
        let mut source = Vec::new();
        let mut target = Vec::new();
        for _ in 0..self.config.batch_size {
            source.push(draw(&data.source));
            target.push(draw(&data.target));
        }
        StepSample { source, target }
    }

    fn forward_domain<'a>(&self, params: &ParamSet, clip: &'a VideoClip, k: usize) -> Result<DomainForward<'a>> {
        let frames: Vec<&Tensor> = clip.frames.iter().collect();
        let pair = |cur: usize| PairSpec {
            cur,
            prev: cur - 1,
            flow: clip.flow_bwd_into(cur),
        };
        let gap = self.config.itcr_gap;
        let mut pairs = vec![pair(k), pair(k - 1)];
        let gap_pair = if gap == 1 {
            1
        } else {
            pairs.push(pair(k - gap));
            2
        };
        Ok(DomainForward {
            fwd: self.net.forward_seq(params, &frames, &pairs)?,
            gap_pair,
        })
    }

    /// Backward field `k → k-gap` and the pixels where propagation is
    /// trusted.
    fn propagation_field(&self, clip: &VideoClip, k: usize) -> Result<(FlowField, ValidityMask)> {
        let mut flow = clip.flow_bwd_into(k).clone();
        let mut valid = clip.visible_into(k);
        for j in 1..self.config.itcr_gap {
            let step_flow = clip.flow_bwd_into(k - j);
            let seen = clip.visible_into(k - j);
            let seen_u8: Vec<u8> = seen.data.iter().map(|&v| v as u8).collect();
            let carried = backward_warp_labels(&seen_u8, clip.height(), clip.width(), &flow)?;
            let (next, inside) = compose_backward(&flow, step_flow)?;
            for (i, v) in valid.data.iter_mut().enumerate() {
                *v = *v && inside.data[i] && carried[i] == Some(1);
            }
            flow = next;
        }
        Ok((flow, valid))
    }

    /// Phase 1: discriminator update on detached predictions. Generator
    /// parameters are not touched.
    ///
    /// Whatever input gradient the discriminator backward passes hand back
    /// is pushed onto `leaks`; with detached predictions there is none.
    fn disc_phase(&self, state: &mut TrainState, src: &[Item], tgt: &[Item], lr: f64, leaks: &mut Vec<Leak>) -> Result<DiscPhase> {
        let cfg = &self.config;
        let terms = cfg.effective_mode().terms();
        let mut out = DiscPhase::default();
        if !(terms.sa || terms.sta) {
            return Ok(out);
        }
        let inv_b = 1.0 / src.len() as f64;
        let mut g_s = state.disc_s.zeros_like();
        let mut g_st = state.disc_st.zeros_like();
        let mut sa = 0.0;
        let mut sta = 0.0;
        for (item, ((_, _, s), (_, _, t))) in src.iter().zip(tgt).enumerate() {
            if terms.sa {
                let scale = -cfg.lambda_sa * inv_b;
                for (fwd, real) in [(&s.fwd, true), (&t.fwd, false)] {
                    let f = self.d_s.forward(&state.disc_s, fwd.probs[0].tensor())?;
                    sa += inv_b * losses::mean_log_score(&f.scores, real);
                    let d = scaled(&losses::mean_log_score_grad(&f.scores, real), scale);
                    if let Some(grad) = self.d_s.backward(&state.disc_s, &f, &d, Some(&mut g_s), false) {
                        leaks.push(Leak { real, item, stacked: false, grad });
                    }
                }
            }
            if terms.sta {
                let scale = -inv_b;
                for (fwd, real) in [(&s.fwd, true), (&t.fwd, false)] {
                    let stack = Tensor::concat_channels(fwd.probs[1].tensor(), fwd.probs[0].tensor())?;
                    let f = self.d_st.forward(&state.disc_st, &stack)?;
                    sta += inv_b * losses::mean_log_score(&f.scores, real);
                    let d = scaled(&losses::mean_log_score_grad(&f.scores, real), scale);
                    if let Some(grad) = self.d_st.backward(&state.disc_st, &f, &d, Some(&mut g_st), false) {
                        leaks.push(Leak { real, item, stacked: true, grad });
                    }
                }
            }
        }
        let step = state.step;
        if terms.sa {
            out.sa = Some(check_finite("sa", sa, step)?);
        }
        if terms.sta {
            out.sta = Some(check_finite("sta", sta, step)?);
        }
        if terms.wd {
            let layers = self.d_s.config.shared_layers();
            let wd = losses::loss_wd_grad(&state.disc_st, &state.disc_s, layers, cfg.lambda_wd, &mut g_st, &mut g_s)?;
            out.wd = Some(check_finite("wd", wd, step)?);
        }
        if !g_s.is_finite() || !g_st.is_finite() {
            return Err(Error::NonFinite(format!("discriminator gradient at step {step}")));
        }
        let lr_d = match cfg.disc_lr0 {
            Some(d) => poly_lr(step, d, cfg.total_steps, cfg.poly_power)?,
            None => lr,
        };
        if terms.sa || terms.wd {
            state.opt_s.step(&mut state.disc_s, &g_s, lr_d);
        }
        if terms.sta || terms.wd {
            state.opt_st.step(&mut state.disc_st, &g_st, lr_d);
        }
        Ok(out)
    }

    /// Generator-side adversarial value and its gradient with respect to the
    /// discriminator logits.
    fn gen_adv(&self, scores: &[f64]) -> (f64, Vec<f64>) {
        match self.config.gen_adversarial {
            GenAdversarial::NonSaturating => (
                -losses::mean_log_score(scores, true),
                scaled(&losses::mean_log_score_grad(scores, true), -1.0),
            ),
            GenAdversarial::Saturating => (
                losses::mean_log_score(scores, false),
                losses::mean_log_score_grad(scores, false),
            ),
        }
    }

    /// Phase 2: generator update with the discriminators frozen.
    fn gen_phase(
        &self,
        state: &mut TrainState,
        src: &[Item],
        tgt: &[Item],
        lr: f64,
    ) -> Result<GenPhase> {
        let cfg = &self.config;
        let terms = cfg.effective_mode().terms();
        let step = state.step;
        let inv_b = 1.0 / src.len() as f64;
        let lu = cfg.lambda_u;
        let mut grads = state.gen.zeros_like();
        let mut out = GenPhase::default();
        let mut ctcr_gen = 0.0;
        let mut itcr = 0.0;
        let mut gate = 0.0;

        for (clip, k, dom) in src {
            let (ssl, mut d) = losses::loss_ssl_grad(&dom.fwd.probs[0], &clip.labels[*k].data)?;
            out.ssl += inv_b * ssl;
            d.scale(inv_b);
            let mut d_feat: Vec<Option<Tensor>> = vec![None; dom.fwd.probs.len()];
            d_feat[0] = Some(d);
            self.net.backward_seq(&state.gen, &dom.fwd, &d_feat, &mut grads)?;
        }

        for (clip, k, dom) in tgt {
            let probs = &dom.fwd.probs;
            // Gradients with respect to the probabilities of each pair.
            let mut d_prob: Vec<Option<Tensor>> = vec![None; probs.len()];
            if terms.sa {
                let f = self.d_s.forward(&state.disc_s, probs[0].tensor())?;
                let (v, d) = self.gen_adv(&f.scores);
                ctcr_gen += inv_b * cfg.lambda_sa * v;
                let d = scaled(&d, lu * cfg.lambda_sa * inv_b);
                let g = self.d_s.backward(&state.disc_s, &f, &d, None, true).unwrap();
                add_into(&mut d_prob[0], g);
            }
            if terms.sta {
                let stack = Tensor::concat_channels(probs[1].tensor(), probs[0].tensor())?;
                let f = self.d_st.forward(&state.disc_st, &stack)?;
                let (v, d) = self.gen_adv(&f.scores);
                ctcr_gen += inv_b * v;
                let d = scaled(&d, lu * inv_b);
                let g = self.d_st.backward(&state.disc_st, &f, &d, None, true).unwrap();
                let (g_prev, g_cur) = g.split_channels(cfg.num_classes);
                add_into(&mut d_prob[1], g_prev);
                add_into(&mut d_prob[0], g_cur);
            }
            if terms.itcr {
                let (flow, visible) = self.propagation_field(clip, *k)?;
                let (p_hat, inside) = backward_warp(probs[dom.gap_pair].tensor(), &flow)?;
                let p_hat = crate::segnet::ProbMap::new(p_hat)?;
                let valid = inside.and(&visible);
                let (v, mut g) = losses::loss_itcr_grad(&probs[0], &p_hat, &valid)?;
                itcr += inv_b * v.loss;
                gate += inv_b * v.gate_fraction;
                g.scale(lu * inv_b);
                add_into(&mut d_prob[0], g);
            }
            if d_prob.iter().all(Option::is_none) {
                continue;
            }
            let d_feat: Vec<Option<Tensor>> = d_prob
                .into_iter()
                .zip(probs)
                .map(|(d, p)| d.map(|d| nn::softmax_backward(p.tensor(), &d)))
                .collect();
            self.net.backward_seq(&state.gen, &dom.fwd, &d_feat, &mut grads)?;
        }

        out.ssl = check_finite("ssl", out.ssl, step)?;
        if terms.sa || terms.sta {
            out.ctcr_gen = Some(check_finite("ctcr_gen", ctcr_gen, step)?);
        }
        if terms.itcr {
            out.itcr = Some(check_finite("itcr", itcr, step)?);
            out.gate_fraction = Some(gate);
        }
        out.total = check_finite("total", out.ssl + lu * ctcr_gen + lu * itcr, step)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("generator gradient at step {step}")));
        }
        state.opt_gen.step(&mut state.gen, &grads, lr);
        Ok(out)
    }

    fn forward_items<'a>(&self, picks: &[(usize, usize)], pool: &'a [VideoClip], params: &ParamSet) -> Result<Vec<Item<'a>>> {
        picks
            .iter()
            .map(|&(i, k)| Ok((&pool[i], k, self.forward_domain(params, &pool[i], k)?)))
            .collect()
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&self, state: &mut TrainState, data: &TrainData) -> Result<LossBundle> {
        let cfg = &self.config;
        let lr = poly_lr(state.step, cfg.lr0, cfg.total_steps, cfg.poly_power)?;
        let sample = self.sample(state.step, data);
        let src = self.forward_items(&sample.source, &data.source, &state.gen)?;
        let tgt = self.forward_items(&sample.target, &data.target, &state.gen)?;

        let disc = self.disc_phase(state, &src, &tgt, lr, &mut Vec::new())?;
        let gen = self.gen_phase(state, &src, &tgt, lr)?;
        state.step += 1;

        let ctcr = match (disc.sa, disc.sta, disc.wd) {
            (Some(sa), Some(sta), Some(wd)) => Some(losses::loss_ctcr(sa, sta, wd, cfg.lambda_sa, cfg.lambda_wd)),
            _ => None,
        };
        let bundle = LossBundle {
            ssl: gen.ssl,
            sa: disc.sa,
            sta: disc.sta,
            wd: disc.wd,
            ctcr,
            itcr: gen.itcr,
            total: gen.total,
            gate_fraction: gen.gate_fraction,
        };
        if let Some(name) = bundle.first_non_finite() {
            return Err(Error::NonFinite(format!("loss term {name} at step {}", state.step - 1)));
        }
        Ok(bundle)
    }

    /// Runs only the discriminator phase of step `state.step` (the step
    /// counter is left alone).
    pub fn disc_phase_only(&self, state: &mut TrainState, data: &TrainData) -> Result<DiscPhase> {
        let lr = poly_lr(state.step, self.config.lr0, self.config.total_steps, self.config.poly_power)?;
        let sample = self.sample(state.step, data);
        let src = self.forward_items(&sample.source, &data.source, &state.gen)?;
        let tgt = self.forward_items(&sample.target, &data.target, &state.gen)?;
        self.disc_phase(state, &src, &tgt, lr, &mut Vec::new())
    }

    /// Runs only the generator phase of step `state.step`.
    pub fn gen_phase_only(&self, state: &mut TrainState, data: &TrainData) -> Result<GenPhase> {
        let lr = poly_lr(state.step, self.config.lr0, self.config.total_steps, self.config.poly_power)?;
        let sample = self.sample(state.step, data);
        let src = self.forward_items(&sample.source, &data.source, &state.gen)?;
        let tgt = self.forward_items(&sample.target, &data.target, &state.gen)?;
        self.gen_phase(state, &src, &tgt, lr)
    }

    /// Detachment check: the generator gradient produced by the
    /// discriminator phase of step `state.step`, obtained by feeding every
    /// input gradient that phase returns back through the network. `state`
    /// is not modified.
    pub fn disc_phase_generator_gradient(&self, state: &TrainState, data: &TrainData) -> Result<Grads> {
        let mut scratch = state.clone();
        let lr = poly_lr(state.step, self.config.lr0, self.config.total_steps, self.config.poly_power)?;
        let sample = self.sample(state.step, data);
        let src = self.forward_items(&sample.source, &data.source, &state.gen)?;
        let tgt = self.forward_items(&sample.target, &data.target, &state.gen)?;
        let mut leaks = Vec::new();
        self.disc_phase(&mut scratch, &src, &tgt, lr, &mut leaks)?;
        let mut grads = state.gen.zeros_like();
        for leak in leaks {
            let (_, _, dom) = if leak.real { &src[leak.item] } else { &tgt[leak.item] };
            let probs = &dom.fwd.probs;
            let mut d_prob: Vec<Option<Tensor>> = vec![None; probs.len()];
            if leak.stacked {
                let (prev, cur) = leak.grad.split_channels(self.config.num_classes);
                d_prob[1] = Some(prev);
                d_prob[0] = Some(cur);
            } else {
                d_prob[0] = Some(leak.grad);
            }
            let d_feat: Vec<Option<Tensor>> = d_prob
                .into_iter()
                .zip(probs)
                .map(|(d, p)| d.map(|d| nn::softmax_backward(p.tensor(), &d)))
                .collect();
            self.net.backward_seq(&state.gen, &dom.fwd, &d_feat, &mut grads)?;
        }
        Ok(grads)
    }

    /// Evaluates `params` on `clips`: every frame with a predecessor is
    /// scored against its labels, consecutive predictions give the temporal
    /// consistency, and stacked fused scores of consecutive frames (every
    /// `feature_stride`-th pixel, see [`normalize_halves`]) give the class
    /// variances.
    pub fn evaluate(&self, params: &ParamSet, clips: &[VideoClip], feature_stride: Option<usize>) -> Result<EvalReport> {
        let c = self.config.num_classes;
        let mut cm = ConfusionMatrix::new(c);
        let mut agree = 0u64;
        let mut total = 0u64;
        let mut stats = FeatureStats::new(c, 2 * c);
        let mut feat = vec![0.0; 2 * c];
        for clip in clips {
            let frames: Vec<&Tensor> = clip.frames.iter().collect();
            let pairs: Vec<PairSpec> = (1..clip.num_frames())
                .map(|k| PairSpec {
                    cur: k,
                    prev: k - 1,
                    flow: clip.flow_bwd_into(k),
                })
                .collect();
            let fwd = self.net.forward_seq(params, &frames, &pairs)?;
            for (i, p) in fwd.probs.iter().enumerate() {
                let k = i + 1;
                cm.add(&clip.labels[k].data, &p.argmax())?;
                if i == 0 {
                    continue;
                }
                let (a, t) = evalkit::temporal_agreement(p, &fwd.probs[i - 1], clip.flow_bwd_into(k), &clip.visible_into(k))?;
                agree += a;
                total += t;
                if let Some(stride) = feature_stride {
                    let (prev, cur) = (&fwd.features[i - 1], &fwd.features[i]);
                    let n = cur.plane_len();
                    for y in (0..cur.height).step_by(stride) {
                        for x in (0..cur.width).step_by(stride) {
                            let j = y * cur.width + x;
                            for ch in 0..c {
                                feat[ch] = prev.data[ch * n + j];
                                feat[c + ch] = cur.data[ch * n + j];
                            }
                            normalize_halves(&mut feat, c);
                            stats.add(clip.labels[k].data[j] as usize, &feat);
                        }
                    }
                }
            }
        }
        let (per_class_iou, miou) = evalkit::miou(&cm)?;
        if total == 0 {
            return Err(Error::InvalidArgument("no valid pixels for temporal consistency".into()));
        }
        let (inter, intra) = match feature_stride {
            Some(_) => {
                let (a, b) = stats.variances()?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Ok(EvalReport {
            miou,
            per_class_iou,
            temporal_consistency: agree as f64 / total as f64,
            confusion: cm,
            sigma2_inter: inter,
            sigma2_intra: intra,
        })
    }
}

/// Output locations and cadences for [`run_training`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Continue from this checkpoint.
    pub resume_from: Option<PathBuf>,
    /// Subsampling stride for the feature-variance statistics in
    /// evaluation records; `None` skips them.
    pub feature_stride: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            eval_every: 0,
            checkpoint_every: 0,
            resume_from: None,
            feature_stride: None,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Train {
        step: usize,
        lr: f64,
        #[serde(flatten)]
        losses: LossBundle,
    },
    Eval {
        step: usize,
        miou_target: f64,
        per_class_iou: Vec<Option<f64>>,
        temporal_consistency: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2_inter: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma2_intra: Option<f64>,
    },
}

impl MetricRecord {
    pub fn step(&self) -> usize {
        match self {
            MetricRecord::Train { step, .. } | MetricRecord::Eval { step, .. } => *step,
        }
    }

    fn eval(step: usize, r: &EvalReport) -> Self {
        MetricRecord::Eval {
            step,
            miou_target: r.miou,
            per_class_iou: r.per_class_iou.clone(),
            temporal_consistency: r.temporal_consistency,
            sigma2_inter: r.sigma2_inter,
            sigma2_intra: r.sigma2_intra,
        }
    }
}

/// Reads a metrics log written by [`run_training`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// What a finished run left behind.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last_eval: EvalReport,
    pub state: TrainState,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "train_config.json";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

/// Prepares clips for the configured flow source.
pub fn prepare_data(config: &TrainConfig, data: TrainData) -> Result<TrainData> {
    if config.flow_source == FlowSource::Oracle {
        return Ok(data);
    }
    let bm = config.block_match();
    let est = |clips: Vec<VideoClip>| {
        clips
            .iter()
            .map(|c| with_estimated_flow(c, &bm, config.occlusion_tau))
            .collect::<Result<Vec<_>>>()
    };
    Ok(TrainData {
        source: est(data.source)?,
        target: est(data.target)?,
        eval: est(data.eval)?,
    })
}

/// Runs `total_steps` training steps (or the remainder after a resumed
/// checkpoint), evaluating on `data.eval` at the configured cadence and at
/// the end, and writing checkpoints and a line-per-record metrics log into
/// `opts.out_dir`. `data` must already be prepared with [`prepare_data`].
pub fn run_training(config: &TrainConfig, data: &TrainData, opts: &RunOptions) -> Result<RunSummary> {
    let trainer = Trainer::new(config.clone())?;
    data.validate(config)?;
    if data.eval.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one held-out clip".into()));
    }
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let echo = serde_json::to_string_pretty(config).expect("config serialises");
    fs::write(dir.join(CONFIG_ECHO_FILE), echo).map_err(|e| Error::io(dir.join(CONFIG_ECHO_FILE), e))?;

    let mut state = match &opts.resume_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if &ck.config != config {
                return Err(Error::Config(format!("{} was written with a different configuration", p.display())));
            }
            ck.state
        }
        None => trainer.init_state()?,
    };
    if state.step > config.total_steps {
        return Err(Error::InvalidArgument("checkpoint is past total_steps".into()));
    }

    // Keep log records up to the resume point; drop anything later.
    let metrics = dir.join(METRICS_FILE);
    let mut kept = String::new();
    if opts.resume_from.is_some() && metrics.exists() {
        for r in read_metrics(&metrics)? {
            let keep = match r {
                MetricRecord::Train { step, .. } => step < state.step,
                MetricRecord::Eval { step, .. } => step <= state.step,
            };
            if keep {
                kept.push_str(&serde_json::to_string(&r).expect("record serialises"));
                kept.push('\n');
            }
        }
    }
    let mut log = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    log.write_all(kept.as_bytes()).map_err(|e| Error::io(&metrics, e))?;
    let mut write = |r: &MetricRecord| -> Result<()> {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(log, "{line}").map_err(|e| Error::io(&metrics, e))
    };
    let save = |state: &TrainState| -> Result<PathBuf> {
        let p = dir.join(checkpoint_name(state.step));
        Checkpoint {
            config: config.clone(),
            state: state.clone(),
        }
        .save(&p)?;
        Ok(p)
    };

    let mut last_eval = None;
    while state.step < config.total_steps {
        let step = state.step;
        let lr = poly_lr(step, config.lr0, config.total_steps, config.poly_power)?;
        let losses = trainer.train_step(&mut state, data)?;
        write(&MetricRecord::Train { step, lr, losses })?;
        if opts.eval_every > 0 && state.step % opts.eval_every == 0 {
            let r = trainer.evaluate(&state.gen, &data.eval, opts.feature_stride)?;
            write(&MetricRecord::eval(state.step, &r))?;
            last_eval = Some((state.step, r));
        }
        if opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0 && state.step < config.total_steps {
            save(&state)?;
        }
    }
    let last_eval = match last_eval {
        Some((s, r)) if s == state.step => r,
        _ => {
            let r = trainer.evaluate(&state.gen, &data.eval, opts.feature_stride)?;
            write(&MetricRecord::eval(state.step, &r))?;
            r
        }
    };
    let final_checkpoint = save(&state)?;
    Ok(RunSummary {
        final_checkpoint,
        metrics,
        last_eval,
        state,
    })
}
