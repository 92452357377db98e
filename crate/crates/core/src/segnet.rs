//! Two-branch video segmentation model with flow-propagated score fusion.
//!
//! Branch A segments the current frame. Branch B segments the previous frame;
//! its score map is backward-warped onto the current frame and a pointwise
//! (1×1) convolution fuses the two score maps. A single softmax at the end
//! produces the class probabilities.
//!
//! Each branch is a small encoder-decoder:
//!
//! ```text
//! s0 = relu(stem(x))                       b channels, full resolution
//! s_i = relu(down_i(s_{i-1}))              b·2^i channels, stride 2
//! t_L = s_L
//! t_{i-1} = up2(relu(up_i(t_i))) + s_{i-1}  3×3 conv at level i, then nearest ×2
//! score = head(t_0)                        C channels
//! ```

use crate::error::{Error, Result};
use crate::flowwarp::{backward_warp_adjoint, backward_warp_with_fill, FlowDirection, FlowField};
use crate::nn::{self, ConvCache, ConvSpec};
use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModelConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_down_levels: usize,
    /// When set, both branches use one parameter group.
    pub shared_branches: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            num_classes: 5,
            base_channels: 8,
            num_down_levels: 2,
            shared_branches: true,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be positive".into()));
        }
        if !(1..=4).contains(&self.num_down_levels) {
            return Err(Error::InvalidArgument("num_down_levels must be in 1..=4".into()));
        }
        Ok(())
    }
}

/// Per-pixel class probabilities; each pixel's channel vector lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    /// Validates the simplex invariant (tolerance 1e-5).
    pub fn new(t: Tensor) -> Result<Self> {
        let n = t.plane_len();
        for i in 0..n {
            let mut s = 0.0;
            for c in 0..t.channels {
                let v = t.data[c * n + i];
                if !(v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("negative or NaN probability at pixel {i}")));
                }
                s += v;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(ProbMap(t))
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        ProbMap(nn::softmax_channels(logits))
    }

    /// Uniform `1/C` everywhere.
    pub fn uniform(channels: usize, height: usize, width: usize) -> Self {
        ProbMap(Tensor::filled(channels, height, width, 1.0 / channels as f64))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0.argmax_channels()
    }
}

/// Pre-softmax fused scores.
pub type FeatureMap = Tensor;

#[derive(Clone, Debug)]
struct ConvLayer {
    name: String,
    spec: ConvSpec,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BranchLayout {
    stem: ConvLayer,
    downs: Vec<ConvLayer>,
    /// `ups[i-1]` maps level `i` to `i-1` channels.
    ups: Vec<ConvLayer>,
    head: ConvLayer,
}

/// Architecture bound to a parameter layout.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub config: SegModelConfig,
    branches: Vec<BranchLayout>,
    fusion: ConvLayer,
}

fn add_conv(ps: &mut ParamSet, name: String, spec: ConvSpec, rng: &mut ChaCha8Rng) -> ConvLayer {
    let fan_in = spec.fan_in();
    let w = ps.push_uniform(format!("{name}.w"), spec.weight_shape(), fan_in, false, rng);
    let b = ps.push_uniform(format!("{name}.b"), vec![spec.out_channels], fan_in, true, rng);
    ConvLayer { name, spec, w, b }
}

fn build(config: &SegModelConfig, seed: u64) -> (SegNet, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let b = config.base_channels;
    let levels = config.num_down_levels;
    let ch = |i: usize| b << i;
    let groups: &[&str] = if config.shared_branches {
        &["branch"]
    } else {
        &["branch_a", "branch_b"]
    };
    let mut branches = Vec::new();
    for g in groups {
        let stem = add_conv(&mut ps, format!("{g}.stem"), ConvSpec::new(3, b, 3, 1, 1), &mut rng);
        let downs = (1..=levels)
            .map(|i| add_conv(&mut ps, format!("{g}.down{i}"), ConvSpec::new(ch(i - 1), ch(i), 3, 2, 1), &mut rng))
            .collect();
        let ups = (1..=levels)
            .map(|i| add_conv(&mut ps, format!("{g}.up{i}"), ConvSpec::new(ch(i), ch(i - 1), 3, 1, 1), &mut rng))
            .collect();
        let head = add_conv(
            &mut ps,
            format!("{g}.head"),
            ConvSpec::new(b, config.num_classes, 3, 1, 1),
            &mut rng,
        );
        branches.push(BranchLayout { stem, downs, ups, head });
    }
    let c = config.num_classes;
    let fusion = add_conv(&mut ps, "fusion".into(), ConvSpec::new(2 * c, c, 1, 1, 0), &mut rng);
    (
        SegNet {
            config: config.clone(),
            branches,
            fusion,
        },
        ps,
    )
}

/// Initialises every weight and bias uniformly in `±1/sqrt(fan_in)` from a
/// seeded ChaCha stream.
pub fn init_params(config: &SegModelConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    Ok(build(config, seed).1)
}

#[derive(Debug)]
struct BranchTape {
    stem: ConvCache,
    downs: Vec<ConvCache>,
    ups: Vec<ConvCache>,
    head: ConvCache,
    /// Post-activation encoder outputs `s_0..=s_L`.
    enc: Vec<Tensor>,
    /// Post-activation decoder outputs `u_1..=u_L` (index `i-1`).
    dec: Vec<Tensor>,
    score: Tensor,
}

/// Which branch evaluated a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Current,
    Previous,
}

/// A frame pair to evaluate: `cur` and `prev` index into the frame list, and
/// `flow` is the backward field `cur → prev`.
#[derive(Clone, Copy, Debug)]
pub struct PairSpec<'a> {
    pub cur: usize,
    pub prev: usize,
    pub flow: &'a FlowField,
}

#[derive(Debug)]
struct BranchRun {
    group: usize,
    frame: usize,
    tape: BranchTape,
}

#[derive(Debug)]
struct PairTape<'a> {
    run_a: usize,
    run_b: usize,
    flow: &'a FlowField,
    fusion: ConvCache,
}

/// Recorded forward pass over a set of frame pairs sharing branch evaluations.
#[derive(Debug)]
pub struct SeqForward<'a> {
    runs: Vec<BranchRun>,
    pairs: Vec<PairTape<'a>>,
    /// Fused pre-softmax scores, one per pair.
    pub features: Vec<FeatureMap>,
    /// Softmax of `features`, one per pair.
    pub probs: Vec<ProbMap>,
}

fn check_finite(t: &Tensor, layer: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation of layer {layer}")))
    }
}

impl SegNet {
    /// Layout for `config`; parameters come from [`init_params`] or a checkpoint.
    pub fn new(config: &SegModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(build(config, 0).0)
    }

    fn conv(&self, params: &ParamSet, layer: &ConvLayer, x: &Tensor) -> (Tensor, ConvCache) {
        nn::conv_forward(&layer.spec, &params.params[layer.w].data, &params.params[layer.b].data, x)
    }

    fn branch_forward(&self, params: &ParamSet, group: usize, x: &Tensor) -> Result<BranchTape> {
        let lay = &self.branches[group];
        let (mut s0, stem) = self.conv(params, &lay.stem, x);
        nn::leaky_relu_inplace(&mut s0, 0.0);
        check_finite(&s0, &lay.stem.name)?;
        let mut enc = vec![s0];
        let mut downs = Vec::with_capacity(lay.downs.len());
        for l in &lay.downs {
            let (mut s, cache) = self.conv(params, l, enc.last().unwrap());
            nn::leaky_relu_inplace(&mut s, 0.0);
            check_finite(&s, &l.name)?;
            enc.push(s);
            downs.push(cache);
        }
        let levels = lay.downs.len();
        let mut ups: Vec<Option<ConvCache>> = (0..levels).map(|_| None).collect();
        let mut dec: Vec<Option<Tensor>> = (0..levels).map(|_| None).collect();
        let mut t = enc[levels].clone();
        for i in (1..=levels).rev() {
            let l = &lay.ups[i - 1];
            let (mut u, cache) = self.conv(params, l, &t);
            nn::leaky_relu_inplace(&mut u, 0.0);
            check_finite(&u, &l.name)?;
            let skip = &enc[i - 1];
            t = nn::upsample_nearest(&u, skip.height, skip.width);
            t.add_assign(skip);
            ups[i - 1] = Some(cache);
            dec[i - 1] = Some(u);
        }
        let (score, head) = self.conv(params, &lay.head, &t);
        check_finite(&score, &lay.head.name)?;
        Ok(BranchTape {
            stem,
            downs,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            head,
            enc,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            score,
        })
    }

    fn branch_backward(&self, params: &ParamSet, group: usize, tape: &BranchTape, d_score: &Tensor, grads: &mut Grads) {
        let lay = &self.branches[group];
        let levels = lay.downs.len();
        let mut back = |l: &ConvLayer, cache: &ConvCache, g: &Tensor, need: bool| -> Option<Tensor> {
            let (gw, gb) = two_mut(&mut grads.0, l.w, l.b);
            nn::conv_backward(&l.spec, &params.params[l.w].data, cache, g, gw, gb, need)
        };
        let mut d_enc: Vec<Option<Tensor>> = (0..=levels).map(|_| None).collect();
        let mut dt = back(&lay.head, &tape.head, d_score, true).unwrap();
        for i in 1..=levels {
            accumulate(&mut d_enc[i - 1], &dt);
            let u = &tape.dec[i - 1];
            let mut du = nn::upsample_nearest_backward(&dt, u.height, u.width);
            nn::leaky_relu_backward(&mut du, u, 0.0);
            dt = back(&lay.ups[i - 1], &tape.ups[i - 1], &du, true).unwrap();
        }
        accumulate(&mut d_enc[levels], &dt);
        for i in (1..=levels).rev() {
            let mut ds = d_enc[i].take().unwrap();
            nn::leaky_relu_backward(&mut ds, &tape.enc[i], 0.0);
            let dprev = back(&lay.downs[i - 1], &tape.downs[i - 1], &ds, true).unwrap();
            accumulate(&mut d_enc[i - 1], &dprev);
        }
        let mut d0 = d_enc[0].take().unwrap();
        nn::leaky_relu_backward(&mut d0, &tape.enc[0], 0.0);
        back(&lay.stem, &tape.stem, &d0, false);
    }

    fn group_of(&self, branch: Branch) -> usize {
        match branch {
            Branch::Previous if !self.config.shared_branches => 1,
            _ => 0,
        }
    }

    /// Single-branch score map for one frame (no fusion, no softmax).
    pub fn branch_scores(&self, params: &ParamSet, branch: Branch, frame: &Tensor) -> Result<Tensor> {
        self.check_frame(frame)?;
        Ok(self.branch_forward(params, self.group_of(branch), frame)?.score)
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        if frame.channels != 3 {
            return Err(Error::ShapeMismatch(format!("frames need 3 channels, got {}", frame.channels)));
        }
        Ok(())
    }

    /// Evaluates every pair, computing each (branch, frame) combination once.
    pub fn forward_seq<'a>(&self, params: &ParamSet, frames: &[&Tensor], pairs: &[PairSpec<'a>]) -> Result<SeqForward<'a>> {
        let mut runs: Vec<BranchRun> = Vec::new();
        let run_for = |group: usize, frame: usize, runs: &mut Vec<BranchRun>| -> Result<usize> {
            if let Some(i) = runs.iter().position(|r| r.group == group && r.frame == frame) {
                return Ok(i);
            }
            let tape = self.branch_forward(params, group, frames[frame])?;
            runs.push(BranchRun { group, frame, tape });
            Ok(runs.len() - 1)
        };
        let mut tapes = Vec::with_capacity(pairs.len());
        let mut features = Vec::with_capacity(pairs.len());
        let mut probs = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (fa, fb) = (frames[p.cur], frames[p.prev]);
            self.check_frame(fa)?;
            if !fa.same_shape(fb) {
                return Err(Error::ShapeMismatch(format!(
                    "frame pair {:?} vs {:?}",
                    fa.shape(),
                    fb.shape()
                )));
            }
            if p.flow.direction != FlowDirection::Backward {
                return Err(Error::FlowDirection("model input needs the backward field cur → prev".into()));
            }
            let run_a = run_for(self.group_of(Branch::Current), p.cur, &mut runs)?;
            let run_b = run_for(self.group_of(Branch::Previous), p.prev, &mut runs)?;
            let (warped, _) = backward_warp_with_fill(&runs[run_b].tape.score, p.flow, 0.0)?;
            let stacked = Tensor::concat_channels(&runs[run_a].tape.score, &warped)?;
            let (fused, fusion) = self.conv(params, &self.fusion, &stacked);
            check_finite(&fused, &self.fusion.name)?;
            probs.push(ProbMap::from_logits(&fused));
            features.push(fused);
            tapes.push(PairTape {
                run_a,
                run_b,
                flow: p.flow,
                fusion,
            });
        }
        Ok(SeqForward {
            runs,
            pairs: tapes,
            features,
            probs,
        })
    }

    /// Back-propagates gradients on the fused scores of each pair (`None`
    /// for pairs that do not reach the loss) into `grads`.
    pub fn backward_seq(&self, params: &ParamSet, fwd: &SeqForward<'_>, d_features: &[Option<Tensor>], grads: &mut Grads) -> Result<()> {
        assert_eq!(d_features.len(), fwd.pairs.len());
        let mut d_scores: Vec<Option<Tensor>> = (0..fwd.runs.len()).map(|_| None).collect();
        let c = self.config.num_classes;
        for (pair, d) in fwd.pairs.iter().zip(d_features) {
            let Some(d) = d else { continue };
            let (gw, gb) = two_mut(&mut grads.0, self.fusion.w, self.fusion.b);
            let d_stacked = nn::conv_backward(
                &self.fusion.spec,
                &params.params[self.fusion.w].data,
                &pair.fusion,
                d,
                gw,
                gb,
                true,
            )
            .unwrap();
            let (d_a, d_warped) = d_stacked.split_channels(c);
            let d_b = backward_warp_adjoint(&d_warped, pair.flow)?;
            accumulate(&mut d_scores[pair.run_a], &d_a);
            accumulate(&mut d_scores[pair.run_b], &d_b);
        }
        for (run, d) in fwd.runs.iter().zip(&d_scores) {
            if let Some(d) = d {
                self.branch_backward(params, run.group, &run.tape, d, grads);
            }
        }
        Ok(())
    }

    /// Prediction for frame `k` given frame `k-1` and the backward field `k → k-1`.
    pub fn forward_pair(
        &self,
        params: &ParamSet,
        frame_k: &Tensor,
        frame_km1: &Tensor,
        flow_bwd: &FlowField,
    ) -> Result<(ProbMap, FeatureMap)> {
        let fwd = self.forward_seq(
            params,
            &[frame_k, frame_km1],
            &[PairSpec {
                cur: 0,
                prev: 1,
                flow: flow_bwd,
            }],
        )?;
        let SeqForward { mut features, mut probs, .. } = fwd;
        Ok((probs.pop().unwrap(), features.pop().unwrap()))
    }

    /// Names of the fusion layer's weight and bias.
    pub fn fusion_param_names(&self) -> (&str, &str) {
        ("fusion.w", "fusion.b")
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

/// Two distinct mutable borrows into one vector.
pub(crate) fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, phase: f64) -> Tensor {
        Tensor::from_fn(3, h, w, |c, y, x| 0.5 + 0.5 * ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64) + phase).sin())
    }

    fn small() -> SegModelConfig {
        SegModelConfig {
            num_classes: 3,
            base_channels: 4,
            num_down_levels: 2,
            shared_branches: true,
        }
    }

    #[test]
    fn output_is_on_simplex_with_input_resolution() {
        for cfg in [
            small(),
            SegModelConfig {
                shared_branches: false,
                num_down_levels: 3,
                ..small()
            },
        ] {
            let net = SegNet::new(&cfg).unwrap();
            let params = init_params(&cfg, 1).unwrap();
            let (h, w) = (13, 18);
            let flow = FlowField::constant(h, w, FlowDirection::Backward, -1.0, 0.5);
            let (p, f) = net.forward_pair(&params, &frame(h, w, 0.0), &frame(h, w, 0.4), &flow).unwrap();
            assert_eq!(p.tensor().shape(), [3, h, w]);
            assert_eq!(f.shape(), [3, h, w]);
            assert!(ProbMap::new(p.into_tensor()).is_ok());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let net = SegNet::new(&cfg).unwrap();
        let params = init_params(&cfg, 2).unwrap();
        let fr = frame(16, 16, 0.0);
        let flow = FlowField::zeros(16, 16, FlowDirection::Backward);
        let a = net.forward_pair(&params, &fr, &fr, &flow).unwrap();
        let b = net.forward_pair(&params, &fr, &fr, &flow).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_previous_branch_reduces_to_branch_a() {
        let cfg = small();
        let net = SegNet::new(&cfg).unwrap();
        let mut params = init_params(&cfg, 3).unwrap();
        let c = cfg.num_classes;
        {
            let w = params.get_mut("fusion.w").unwrap();
            w.data.fill(0.0);
            for i in 0..c {
                w.data[i * 2 * c + i] = 1.0;
            }
            params.get_mut("fusion.b").unwrap().data.fill(0.0);
        }
        let (h, w) = (12, 20);
        let flow = FlowField::constant(h, w, FlowDirection::Backward, 0.3, -0.2);
        let fa = frame(h, w, 0.0);
        let (p, _) = net.forward_pair(&params, &fa, &frame(h, w, 1.0), &flow).unwrap();
        let oracle = ProbMap::from_logits(&net.branch_scores(&params, Branch::Current, &fa).unwrap());
        assert_eq!(p, oracle);
    }

    #[test]
    fn seeds_control_initialisation() {
        let cfg = small();
        assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
        assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
        assert!(init_params(
            &SegModelConfig {
                base_channels: 0,
                ..cfg
            },
            1
        )
        .is_err());
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let cfg = small();
        let net = SegNet::new(&cfg).unwrap();
        let mut params = init_params(&cfg, 1).unwrap();
        params.get_mut("branch.down1.b").unwrap().data[0] = f64::INFINITY;
        let fr = frame(8, 8, 0.0);
        let flow = FlowField::zeros(8, 8, FlowDirection::Backward);
        let err = net.forward_pair(&params, &fr, &fr, &flow).unwrap_err();
        assert!(err.to_string().contains("branch.down1"), "{err}");
    }

    #[test]
    fn permuting_fusion_outputs_permutes_classes() {
        let cfg = small();
        let net = SegNet::new(&cfg).unwrap();
        let params = init_params(&cfg, 4).unwrap();
        let c = cfg.num_classes;
        let perm = [2usize, 0, 1];
        let mut permuted = params.clone();
        {
            let src_w = params.get("fusion.w").unwrap().data.clone();
            let src_b = params.get("fusion.b").unwrap().data.clone();
            let w = permuted.get_mut("fusion.w").unwrap();
            for (new, &old) in perm.iter().enumerate() {
                w.data[new * 2 * c..(new + 1) * 2 * c].copy_from_slice(&src_w[old * 2 * c..(old + 1) * 2 * c]);
            }
            let b = permuted.get_mut("fusion.b").unwrap();
            for (new, &old) in perm.iter().enumerate() {
                b.data[new] = src_b[old];
            }
        }
        let fr = frame(10, 10, 0.2);
        let flow = FlowField::zeros(10, 10, FlowDirection::Backward);
        let (p, _) = net.forward_pair(&params, &fr, &fr, &flow).unwrap();
        let (q, _) = net.forward_pair(&permuted, &fr, &fr, &flow).unwrap();
        let n = 100;
        for (new, &old) in perm.iter().enumerate() {
            for i in 0..n {
                assert!((q.tensor().data[new * n + i] - p.tensor().data[old * n + i]).abs() < 1e-12);
            }
        }
        let am_p = p.argmax();
        let am_q = q.argmax();
        for i in 0..n {
            assert_eq!(perm[am_q[i]], am_p[i]);
        }
    }
}
