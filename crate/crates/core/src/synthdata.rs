//! Synthetic paired-domain videos: moving flat shapes over a static textured
//! background, with dense labels, exact flow and occlusion masks.
//!
//! Objects move at constant velocity and are drawn back to front in index
//! order. Frame values, object velocities and hence flows are rounded to
//! `f32` precision so that the on-disk format is lossless.

use crate::error::{Error, Result};
use crate::flowwarp::{FlowDirection, FlowField, ValidityMask};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which side of the adaptation problem a clip belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Static background patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Plain,
    Stripes,
    Checker,
    Blobs,
}

/// Appearance change applied on top of a rendered clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Hue rotation in turns (1.0 = full circle).
    pub hue_shift: f64,
    pub brightness_gain: f64,
    pub noise_std: f64,
    /// Replacement background pattern; `None` keeps the current one.
    pub texture: Option<Texture>,
    pub noise_seed: u64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            hue_shift: 0.0,
            brightness_gain: 1.0,
            noise_std: 0.0,
            texture: None,
            noise_seed: 0,
        }
    }

    /// Preset used for labelled source clips.
    pub fn source_preset() -> Self {
        DomainShift {
            texture: Some(Texture::Stripes),
            ..Self::identity()
        }
    }

    /// Preset used for unlabelled target clips.
    pub fn target_preset() -> Self {
        DomainShift {
            hue_shift: 0.12,
            brightness_gain: 0.75,
            noise_std: 0.12,
            texture: Some(Texture::Blobs),
            noise_seed: 0,
        }
    }
}

/// How object velocities are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// Each component uniform in `[-max_speed, max_speed]` pixels per frame.
    Random { max_speed: f64 },
    /// Velocities assigned to objects in order; must list one per object.
    Fixed(Vec<(f64, f64)>),
}

/// Recipe for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub num_classes: usize,
    pub num_objects: usize,
    pub motion: MotionModel,
    pub shift: DomainShift,
    pub domain: Domain,
    pub seed: u64,
}

impl ClipSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::InvalidArgument(format!(
                "clip size {}x{} is below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.num_frames < 3 {
            return Err(Error::InvalidArgument(format!(
                "clips need at least 3 frames, got {}",
                self.num_frames
            )));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be in [2, 255], got {}",
                self.num_classes
            )));
        }
        if let MotionModel::Fixed(v) = &self.motion {
            if v.len() != self.num_objects {
                return Err(Error::InvalidArgument(format!(
                    "{} fixed velocities for {} objects",
                    v.len(),
                    self.num_objects
                )));
            }
        }
        Ok(())
    }
}

/// Dense per-pixel class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// A rendered clip with ground truth.
///
/// `flows_fwd[i]`, `flows_bwd[i]` and `occlusion[i]` describe the frame pair
/// `(i, i+1)`; use [`VideoClip::flow_bwd_into`] and friends to index by the
/// later frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    pub flows_fwd: Vec<FlowField>,
    pub flows_bwd: Vec<FlowField>,
    /// `true` where the pixel of the later frame has no visible source in
    /// the earlier frame: the source point is out of frame, or some pixel
    /// under its bilinear footprint shows a different object.
    pub occlusion: Vec<Vec<bool>>,
    pub domain: Domain,
    pub num_classes: usize,
    pub background: Texture,
    pub seed: u64,
}

impl VideoClip {
    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Backward field `k → k-1` for `k ≥ 1`.
    pub fn flow_bwd_into(&self, k: usize) -> &FlowField {
        &self.flows_bwd[k - 1]
    }

    /// Forward field `k-1 → k` for `k ≥ 1`.
    pub fn flow_fwd_into(&self, k: usize) -> &FlowField {
        &self.flows_fwd[k - 1]
    }

    /// Non-occluded pixels of frame `k` (`k ≥ 1`).
    pub fn visible_into(&self, k: usize) -> ValidityMask {
        ValidityMask {
            height: self.height(),
            width: self.width(),
            data: self.occlusion[k - 1].iter().map(|&o| !o).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
    Diamond,
}

#[derive(Clone, Debug)]
struct Object {
    class: u8,
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    vx: f64,
    vy: f64,
    color: [f64; 3],
}

impl Object {
    fn contains(&self, t: usize, px: f64, py: f64) -> bool {
        let u = (px - (self.cx + self.vx * t as f64)) / self.rx;
        let v = (py - (self.cy + self.vy * t as f64)) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            // Upward-pointing isosceles triangle.
            ShapeKind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) * 0.5,
        }
    }
}

const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
    [0.75, 0.25, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.15],
    [0.55, 0.55, 0.55],
];

fn shape_for_class(class: u8) -> ShapeKind {
    match (class - 1) % 4 {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Diamond,
    }
}

fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn sample_objects(spec: &ClipSpec, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let scale = h.min(w);
    (0..spec.num_objects)
        .map(|i| {
            let class = rng.random_range(1..spec.num_classes) as u8;
            let base = CLASS_COLORS[(class as usize - 1) % CLASS_COLORS.len()];
            let color = base.map(|c| (c + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            let rx = scale * rng.random_range(0.10..0.22);
            let ry = scale * rng.random_range(0.10..0.22);
            let (vx, vy) = match &spec.motion {
                MotionModel::Random { max_speed } => {
                    let s = max_speed.abs();
                    if s > 0.0 {
                        (rng.random_range(-s..=s), rng.random_range(-s..=s))
                    } else {
                        (0.0, 0.0)
                    }
                }
                MotionModel::Fixed(v) => v[i],
            };
            Object {
                class,
                kind: shape_for_class(class),
                cx: rng.random_range(0.15 * w..0.85 * w),
                cy: rng.random_range(0.15 * h..0.85 * h),
                rx,
                ry,
                vx: q32(vx),
                vy: q32(vy),
                color,
            }
        })
        .collect()
}

/// Index of the front-most object covering `(px, py)` at frame `t`.
fn visible_at(objects: &[Object], t: usize, px: f64, py: f64) -> Option<usize> {
    objects.iter().rposition(|o| o.contains(t, px, py))
}

fn texture_value(texture: Texture, phase: f64, x: usize, y: usize) -> [f64; 3] {
    let (xf, yf) = (x as f64, y as f64);
    let v = match texture {
        Texture::Plain => 0.0,
        Texture::Stripes => ((xf + yf) * 0.45 + phase).sin(),
        Texture::Checker => {
            if ((x / 6) + (y / 6)).is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Blobs => {
            ((xf * 0.21 + phase).sin() + (yf * 0.17 - phase).cos() + ((xf + 2.0 * yf) * 0.09).sin()) / 3.0
        }
    };
    match texture {
        Texture::Plain => [0.45, 0.45, 0.45],
        Texture::Stripes => [0.45 + 0.12 * v, 0.45 + 0.12 * v, 0.42 + 0.12 * v],
        Texture::Checker => [0.40 + 0.10 * v, 0.44 + 0.10 * v, 0.40 + 0.10 * v],
        Texture::Blobs => [0.42 + 0.22 * v, 0.47 + 0.18 * v, 0.45 + 0.25 * v],
    }
}

/// True when the sub-pixel point `(sx, sy)` of the earlier frame lies inside
/// the frame and every pixel contributing to its bilinear sample shows `here`.
fn source_is_visible(prev: &[Option<usize>], w: usize, h: usize, sx: f64, sy: f64, here: Option<usize>) -> bool {
    if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
        return false;
    }
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let xs: &[usize] = if sx > x0 as f64 { &[x0, x0 + 1] } else { &[x0] };
    let ys: &[usize] = if sy > y0 as f64 { &[y0, y0 + 1] } else { &[y0] };
    ys.iter()
        .all(|&yy| xs.iter().all(|&xx| prev[yy.min(h - 1) * w + xx.min(w - 1)] == here))
}

/// Renders a clip and applies `spec.shift` to its appearance.
pub fn generate_clip(spec: &ClipSpec) -> Result<VideoClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let objects = sample_objects(spec, &mut rng);
    let (h, w, t_len) = (spec.height, spec.width, spec.num_frames);

    let mut visible: Vec<Vec<Option<usize>>> = Vec::with_capacity(t_len);
    let mut frames = Vec::with_capacity(t_len);
    let mut labels = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let vis: Vec<Option<usize>> = (0..h * w)
            .map(|i| visible_at(&objects, t, (i % w) as f64, (i / w) as f64))
            .collect();
        let mut frame = Tensor::zeros(3, h, w);
        let mut lab = vec![0u8; h * w];
        for (i, v) in vis.iter().enumerate() {
            let rgb = match v {
                Some(o) => {
                    lab[i] = objects[*o].class;
                    objects[*o].color
                }
                None => texture_value(Texture::Plain, 0.0, i % w, i / w),
            };
            for c in 0..3 {
                frame.data[c * h * w + i] = q32(rgb[c]);
            }
        }
        frames.push(frame);
        labels.push(LabelMap { height: h, width: w, data: lab });
        visible.push(vis);
    }

    let mut flows_fwd = Vec::with_capacity(t_len - 1);
    let mut flows_bwd = Vec::with_capacity(t_len - 1);
    let mut occlusion = Vec::with_capacity(t_len - 1);
    for k in 1..t_len {
        let mut fwd = FlowField::zeros(h, w, FlowDirection::Forward);
        let mut bwd = FlowField::zeros(h, w, FlowDirection::Backward);
        let mut occ = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if let Some(o) = visible[k - 1][i] {
                    fwd.set(y, x, objects[o].vx, objects[o].vy);
                }
                let here = visible[k][i];
                let (vx, vy) = here.map_or((0.0, 0.0), |o| (objects[o].vx, objects[o].vy));
                bwd.set(y, x, -vx, -vy);
                occ[i] = !source_is_visible(&visible[k - 1], w, h, x as f64 - vx, y as f64 - vy, here);
            }
        }
        flows_fwd.push(fwd);
        flows_bwd.push(bwd);
        occlusion.push(occ);
    }

    let clip = VideoClip {
        frames,
        labels,
        flows_fwd,
        flows_bwd,
        occlusion,
        domain: spec.domain,
        num_classes: spec.num_classes,
        background: Texture::Plain,
        seed: spec.seed,
    };
    let mut shift = spec.shift.clone();
    shift.noise_seed = shift.noise_seed.wrapping_add(spec.seed);
    Ok(apply_domain_shift(&clip, &shift))
}

/// Rotation about the grey axis by `turns` of a full circle.
fn hue_matrix(turns: f64) -> [[f64; 3]; 3] {
    let th = turns * std::f64::consts::TAU;
    let (s, c) = th.sin_cos();
    let a = c + (1.0 - c) / 3.0;
    let b = (1.0 - c) / 3.0 - s / 3f64.sqrt();
    let d = (1.0 - c) / 3.0 + s / 3f64.sqrt();
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Alters appearance only: background texture, hue, gain, additive noise,
/// then clamps to `[0, 1]`. Labels, flows and masks are copied unchanged.
pub fn apply_domain_shift(clip: &VideoClip, shift: &DomainShift) -> VideoClip {
    let mut out = clip.clone();
    let (h, w) = (clip.height(), clip.width());
    let n = h * w;

    if let Some(tex) = shift.texture {
        if tex != clip.background {
            let phase = (clip.seed % 628) as f64 * 0.01;
            for (frame, lab) in out.frames.iter_mut().zip(&clip.labels) {
                for i in 0..n {
                    if lab.data[i] == 0 {
                        let rgb = texture_value(tex, phase, i % w, i / w);
                        for c in 0..3 {
                            frame.data[c * n + i] = q32(rgb[c]);
                        }
                    }
                }
            }
            out.background = tex;
        }
    }

    let rotate = shift.hue_shift != 0.0;
    let gain = shift.brightness_gain != 1.0;
    if rotate || gain {
        let m = hue_matrix(shift.hue_shift);
        for frame in &mut out.frames {
            for i in 0..n {
                let px = [frame.data[i], frame.data[n + i], frame.data[2 * n + i]];
                for (c, row) in m.iter().enumerate() {
                    let v = if rotate {
                        row[0] * px[0] + row[1] * px[1] + row[2] * px[2]
                    } else {
                        px[c]
                    };
                    frame.data[c * n + i] = q32((v * shift.brightness_gain).clamp(0.0, 1.0));
                }
            }
        }
    }

    if shift.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(shift.noise_seed);
        let normal = Normal::new(0.0, shift.noise_std).expect("finite noise std");
        for frame in &mut out.frames {
            for v in &mut frame.data {
                *v = q32((*v + normal.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Fraction of non-occluded pixels of frame `k` whose label equals the
/// nearest-neighbour backward warp of frame `k-1`'s labels.
pub fn label_warp_agreement(clip: &VideoClip, k: usize) -> Result<f64> {
    let (h, w) = (clip.height(), clip.width());
    let warped = crate::flowwarp::backward_warp_labels(&clip.labels[k - 1].data, h, w, clip.flow_bwd_into(k))?;
    let occ = &clip.occlusion[k - 1];
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..h * w {
        if occ[i] {
            continue;
        }
        total += 1;
        if warped[i] == Some(clip.labels[k].data[i]) {
            agree += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { agree as f64 / total as f64 })
}

/// Size and composition of a paired-domain benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub num_classes: usize,
    pub num_objects: usize,
    pub max_speed: f64,
    pub num_source: usize,
    pub num_target: usize,
    pub num_eval: usize,
    pub seed: u64,
    pub source_shift: DomainShift,
    pub target_shift: DomainShift,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            height: 64,
            width: 128,
            num_frames: 4,
            num_classes: 5,
            num_objects: 4,
            max_speed: 2.5,
            num_source: 200,
            num_target: 200,
            num_eval: 24,
            seed: 0,
            source_shift: DomainShift::source_preset(),
            target_shift: DomainShift::target_preset(),
        }
    }
}

/// Source training clips, target training clips, and held-out target clips.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: Vec<VideoClip>,
    pub target: Vec<VideoClip>,
    pub target_eval: Vec<VideoClip>,
}

const SEED_BLOCK: u64 = 1 << 20;

impl BenchmarkSpec {
    /// Clip recipes for the three splits. Each split draws from its own seed
    /// range so that no clip is shared between them.
    pub fn clip_specs(&self) -> [Vec<ClipSpec>; 3] {
        let base = self.seed.wrapping_mul(4 * SEED_BLOCK);
        let make = |offset: u64, count: usize, domain: Domain, shift: &DomainShift| {
            (0..count)
                .map(|i| ClipSpec {
                    height: self.height,
                    width: self.width,
                    num_frames: self.num_frames,
                    num_classes: self.num_classes,
                    num_objects: self.num_objects,
                    motion: MotionModel::Random {
                        max_speed: self.max_speed,
                    },
                    shift: shift.clone(),
                    domain,
                    seed: base + offset * SEED_BLOCK + i as u64,
                })
                .collect::<Vec<_>>()
        };
        [
            make(0, self.num_source, Domain::Source, &self.source_shift),
            make(1, self.num_target, Domain::Target, &self.target_shift),
            make(2, self.num_eval, Domain::Target, &self.target_shift),
        ]
    }

    pub fn generate(&self) -> Result<Benchmark> {
        let [s, t, e] = self.clip_specs();
        let gen = |specs: Vec<ClipSpec>| specs.iter().map(generate_clip).collect::<Result<Vec<_>>>();
        Ok(Benchmark {
            source: gen(s)?,
            target: gen(t)?,
            target_eval: gen(e)?,
        })
    }
}
