//! Displacement fields, backward warping, block-matching flow, and
//! forward-backward occlusion checks.
//!
//! A [`FlowField`] always carries its direction. A `Backward` field is defined
//! on the grid of the later frame `k` and points at the matching location in
//! the earlier frame `k-1`; it is the field that [`backward_warp`] consumes to
//! pull a map from frame `k-1` onto frame `k`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which way a displacement field points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowDirection {
    /// Defined on the earlier frame, points into the later frame (`k-1 → k`).
    Forward,
    /// Defined on the later frame, points into the earlier frame (`k → k-1`).
    Backward,
}

impl FlowDirection {
    pub fn tag(self) -> u8 {
        match self {
            FlowDirection::Forward => 0,
            FlowDirection::Backward => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(FlowDirection::Forward),
            1 => Some(FlowDirection::Backward),
            _ => None,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            FlowDirection::Forward => FlowDirection::Backward,
            FlowDirection::Backward => FlowDirection::Forward,
        }
    }
}

/// Per-pixel `(dx, dy)` displacements stored row-major as `H×W×2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub direction: FlowDirection,
    pub data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize, direction: FlowDirection) -> Self {
        FlowField {
            height,
            width,
            direction,
            data: vec![0.0; height * width * 2],
        }
    }

    /// Every pixel displaced by the same `(dx, dy)`.
    pub fn constant(height: usize, width: usize, direction: FlowDirection, dx: f64, dy: f64) -> Self {
        let mut f = Self::zeros(height, width, direction);
        for v in f.data.chunks_exact_mut(2) {
            v[0] = dx;
            v[1] = dy;
        }
        f
    }

    pub fn from_vec(height: usize, width: usize, direction: FlowDirection, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::ShapeMismatch(format!(
                "flow buffer of {} values for {height}x{width}x2",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField {
            height,
            width,
            direction,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, dx: f64, dy: f64) {
        let i = (y * self.width + x) * 2;
        self.data[i] = dx;
        self.data[i + 1] = dy;
    }

    fn require(&self, dir: FlowDirection) -> Result<()> {
        if self.direction != dir {
            return Err(Error::FlowDirection(format!(
                "expected a {dir:?} field, got {:?}",
                self.direction
            )));
        }
        Ok(())
    }
}

/// Per-pixel trust flags; `true` marks a usable correspondence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn all(height: usize, width: usize, value: bool) -> Self {
        ValidityMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixel-wise logical AND.
    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        }
    }
}

/// Bilinear taps for sampling at `(sx, sy)`, or `None` when outside the frame.
#[inline]
fn bilinear_taps(sx: f64, sy: f64, w: usize, h: usize) -> Option<[(usize, f64); 4]> {
    if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
        return None;
    }
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some([
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ])
}

fn check_map_flow(map_h: usize, map_w: usize, flow: &FlowField) -> Result<()> {
    if map_h != flow.height || map_w != flow.width {
        return Err(Error::ShapeMismatch(format!(
            "map is {map_h}x{map_w}, flow is {}x{}",
            flow.height, flow.width
        )));
    }
    Ok(())
}

/// Pulls `map` (defined on frame `k-1`) onto the grid of frame `k` with
/// bilinear sampling at `(x + dx, y + dy)`. Out-of-frame samples are marked
/// invalid and filled with `1/C`.
pub fn backward_warp(map: &Tensor, flow: &FlowField) -> Result<(Tensor, ValidityMask)> {
    let fill = 1.0 / map.channels as f64;
    backward_warp_with_fill(map, flow, fill)
}

/// [`backward_warp`] with an explicit value for out-of-frame samples.
pub fn backward_warp_with_fill(map: &Tensor, flow: &FlowField, fill: f64) -> Result<(Tensor, ValidityMask)> {
    flow.require(FlowDirection::Backward)?;
    check_map_flow(map.height, map.width, flow)?;
    let (h, w) = (map.height, map.width);
    let n = h * w;
    let mut out = Tensor::zeros(map.channels, h, w);
    let mut mask = ValidityMask::all(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = flow.get(y, x);
            match bilinear_taps(x as f64 + dx, y as f64 + dy, w, h) {
                Some(taps) => {
                    for c in 0..map.channels {
                        let src = &map.data[c * n..(c + 1) * n];
                        out.data[c * n + i] = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
                    }
                }
                None => {
                    mask.data[i] = false;
                    for c in 0..map.channels {
                        out.data[c * n + i] = fill;
                    }
                }
            }
        }
    }
    Ok((out, mask))
}

/// Transpose of the linear part of [`backward_warp_with_fill`]: scatters
/// `grad` (on frame `k`) back onto frame `k-1`.
pub fn backward_warp_adjoint(grad: &Tensor, flow: &FlowField) -> Result<Tensor> {
    flow.require(FlowDirection::Backward)?;
    check_map_flow(grad.height, grad.width, flow)?;
    let (h, w) = (grad.height, grad.width);
    let n = h * w;
    let mut out = Tensor::zeros(grad.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = flow.get(y, x);
            if let Some(taps) = bilinear_taps(x as f64 + dx, y as f64 + dy, w, h) {
                for c in 0..grad.channels {
                    let g = grad.data[c * n + i];
                    for &(j, wt) in &taps {
                        out.data[c * n + j] += wt * g;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Chains two backward fields: `near` maps `k → k-1` and `far` maps
/// `k-1 → k-2`; the result maps `k → k-2`. Pixels whose intermediate point
/// leaves the frame are invalid and keep only the first displacement.
pub fn compose_backward(near: &FlowField, far: &FlowField) -> Result<(FlowField, ValidityMask)> {
    near.require(FlowDirection::Backward)?;
    far.require(FlowDirection::Backward)?;
    check_map_flow(near.height, near.width, far)?;
    let (h, w) = (near.height, near.width);
    let mut out = near.clone();
    let mut mask = ValidityMask::all(h, w, true);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = near.get(y, x);
            match bilinear_taps(x as f64 + dx, y as f64 + dy, w, h) {
                Some(taps) => {
                    let (mut fx, mut fy) = (0.0, 0.0);
                    for &(j, wt) in &taps {
                        fx += wt * far.data[2 * j];
                        fy += wt * far.data[2 * j + 1];
                    }
                    out.set(y, x, dx + fx, dy + fy);
                }
                None => mask.data[y * w + x] = false,
            }
        }
    }
    Ok((out, mask))
}

/// Nearest-neighbour backward warp of an integer label map. Out-of-frame
/// samples are `None`.
pub fn backward_warp_labels(labels: &[u8], height: usize, width: usize, flow: &FlowField) -> Result<Vec<Option<u8>>> {
    flow.require(FlowDirection::Backward)?;
    check_map_flow(height, width, flow)?;
    if labels.len() != height * width {
        return Err(Error::ShapeMismatch("label map size".into()));
    }
    let mut out = Vec::with_capacity(labels.len());
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = flow.get(y, x);
            let sx = (x as f64 + dx).round();
            let sy = (y as f64 + dy).round();
            if sx >= 0.0 && sy >= 0.0 && sx < width as f64 && sy < height as f64 {
                out.push(Some(labels[sy as usize * width + sx as usize]));
            } else {
                out.push(None);
            }
        }
    }
    Ok(out)
}

/// Block-matching parameters. The patch is `(2·patch_radius+1)²`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockMatchConfig {
    pub patch_radius: usize,
    pub search_radius: usize,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        BlockMatchConfig {
            patch_radius: 2,
            search_radius: 4,
        }
    }
}

/// Integer-displacement block matching from `frame_a` into `frame_b`.
///
/// The result is a `Forward` field on `frame_a`'s grid: `frame_a[y][x]`
/// best matches `frame_b[y + dy][x + dx]`. Costs are sums of absolute
/// differences over a border-clamped patch; among equal costs the candidate
/// closest to zero displacement wins.
pub fn estimate_flow(frame_a: &Tensor, frame_b: &Tensor, cfg: &BlockMatchConfig) -> Result<FlowField> {
    let data = block_match(frame_a, frame_b, cfg)?;
    FlowField::from_vec(frame_a.height, frame_a.width, FlowDirection::Forward, data)
}

/// Estimates the `Backward` field for the pair (`prev`, `next`), defined on
/// `next`'s grid.
pub fn estimate_backward_flow(prev: &Tensor, next: &Tensor, cfg: &BlockMatchConfig) -> Result<FlowField> {
    let data = block_match(next, prev, cfg)?;
    FlowField::from_vec(next.height, next.width, FlowDirection::Backward, data)
}

fn block_match(a: &Tensor, b: &Tensor, cfg: &BlockMatchConfig) -> Result<Vec<f64>> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("frames {:?} and {:?}", a.shape(), b.shape())));
    }
    let patch = 2 * cfg.patch_radius + 1;
    if a.height < patch || a.width < patch {
        return Err(Error::InvalidArgument(format!(
            "frame {}x{} is smaller than the {patch}x{patch} patch",
            a.height, a.width
        )));
    }
    let (h, w) = (a.height as isize, a.width as isize);
    let r = cfg.patch_radius as isize;
    let s = cfg.search_radius as isize;
    let mut candidates: Vec<(isize, isize)> = Vec::new();
    for dy in -s..=s {
        for dx in -s..=s {
            candidates.push((dx, dy));
        }
    }
    // Stable sort keeps (dy, dx) order among equal radii.
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);

    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut out = vec![0.0; (h * w * 2) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            let mut best_d = (0isize, 0isize);
            for &(dx, dy) in &candidates {
                let (tx, ty) = (x + dx, y + dy);
                if tx < 0 || ty < 0 || tx >= w || ty >= h {
                    continue;
                }
                let mut cost = 0.0;
                for py in -r..=r {
                    let ay = clamp(y + py, h);
                    let by = clamp(ty + py, h);
                    for px in -r..=r {
                        let ax = clamp(x + px, w);
                        let bx = clamp(tx + px, w);
                        for c in 0..a.channels {
                            cost += (a.at(c, ay, ax) - b.at(c, by, bx)).abs();
                        }
                    }
                }
                if cost < best {
                    best = cost;
                    best_d = (dx, dy);
                }
            }
            let i = ((y * w + x) * 2) as usize;
            out[i] = best_d.0 as f64;
            out[i + 1] = best_d.1 as f64;
        }
    }
    Ok(out)
}

/// Forward-backward consistency check on the grid where `flow_bwd` lives.
///
/// A pixel `x` of the later frame is valid when `x + b(x)` lies inside the
/// frame and `‖b(x) + f(x + b(x))‖ ≤ tau`, with `f` sampled bilinearly.
pub fn occlusion_mask(flow_fwd: &FlowField, flow_bwd: &FlowField, tau: f64) -> Result<ValidityMask> {
    if flow_fwd.direction == flow_bwd.direction {
        return Err(Error::FlowDirection(format!(
            "occlusion check needs opposite directions, both are {:?}",
            flow_fwd.direction
        )));
    }
    flow_fwd.require(FlowDirection::Forward)?;
    if flow_fwd.height != flow_bwd.height || flow_fwd.width != flow_bwd.width {
        return Err(Error::ShapeMismatch("forward and backward flows differ in size".into()));
    }
    let (h, w) = (flow_bwd.height, flow_bwd.width);
    let mut mask = ValidityMask::all(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let (bx, by) = flow_bwd.get(y, x);
            if let Some(taps) = bilinear_taps(x as f64 + bx, y as f64 + by, w, h) {
                let mut fx = 0.0;
                let mut fy = 0.0;
                for &(j, wt) in &taps {
                    fx += wt * flow_fwd.data[2 * j];
                    fy += wt * flow_fwd.data[2 * j + 1];
                }
                let rt = ((bx + fx).powi(2) + (by + fy).powi(2)).sqrt();
                mask.data[y * w + x] = rt <= tau;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |c, y, x| (c * 1000 + y * 37 + x * 3) as f64 * 0.001 + ((x * y) % 7) as f64)
    }

    #[test]
    fn zero_flow_is_identity() {
        let m = ramp(3, 6, 8);
        let f = FlowField::zeros(6, 8, FlowDirection::Backward);
        let (out, mask) = backward_warp(&m, &f).unwrap();
        assert_eq!(out, m);
        assert!(mask.data.iter().all(|&v| v));
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let m = ramp(2, 5, 9);
        let f = FlowField::constant(5, 9, FlowDirection::Backward, 3.0, 0.0);
        let (out, mask) = backward_warp(&m, &f).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..9 {
                    if x + 3 < 9 {
                        assert!(mask.data[y * 9 + x]);
                        assert_eq!(out.at(c, y, x), m.at(c, y, x + 3));
                    } else {
                        assert!(!mask.data[y * 9 + x]);
                        assert_eq!(out.at(c, y, x), 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_frame_flow_gives_uniform() {
        let m = ramp(4, 4, 4);
        let f = FlowField::constant(4, 4, FlowDirection::Backward, 100.0, -50.0);
        let (out, mask) = backward_warp(&m, &f).unwrap();
        assert_eq!(mask.count_valid(), 0);
        assert!(out.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn warp_rejects_forward_field_and_size_mismatch() {
        let m = ramp(2, 4, 4);
        let f = FlowField::zeros(4, 4, FlowDirection::Forward);
        assert!(matches!(backward_warp(&m, &f), Err(Error::FlowDirection(_))));
        let g = FlowField::zeros(4, 5, FlowDirection::Backward);
        assert!(matches!(backward_warp(&m, &g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn adjoint_identity() {
        let m = ramp(2, 7, 6);
        let mut f = FlowField::zeros(7, 6, FlowDirection::Backward);
        for y in 0..7 {
            for x in 0..6 {
                f.set(y, x, 0.3 * x as f64 - 1.1, 0.7 - 0.2 * y as f64);
            }
        }
        let (out, _) = backward_warp_with_fill(&m, &f, 0.0).unwrap();
        let g = ramp(2, 7, 6);
        let back = backward_warp_adjoint(&g, &f).unwrap();
        let lhs: f64 = out.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = m.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    fn textured(h: usize, w: usize, shift: isize) -> Tensor {
        Tensor::from_fn(3, h, w, |c, y, x| {
            let xs = (x as isize - shift) as u64;
            let mut z = xs.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ c as u64;
            z ^= z >> 29;
            z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z ^= z >> 32;
            (z % 1000) as f64 / 1000.0
        })
    }

    #[test]
    fn block_matching_recovers_shift() {
        let a = textured(20, 24, 0);
        let b = textured(20, 24, 2);
        let f = estimate_flow(&a, &b, &BlockMatchConfig::default()).unwrap();
        assert_eq!(f.direction, FlowDirection::Forward);
        let mut ok = 0;
        let mut total = 0;
        for y in 4..16 {
            for x in 4..18 {
                total += 1;
                if f.get(y, x) == (2.0, 0.0) {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.9 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn block_matching_identity_and_constant_frames() {
        let a = textured(16, 16, 0);
        let f = estimate_flow(&a, &a, &BlockMatchConfig::default()).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
        let flat = Tensor::filled(3, 16, 16, 0.4);
        let f = estimate_flow(&flat, &flat, &BlockMatchConfig::default()).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_matching_rejects_tiny_frames() {
        let a = Tensor::zeros(3, 4, 4);
        assert!(estimate_flow(&a, &a, &BlockMatchConfig::default()).is_err());
    }

    #[test]
    fn occlusion_checks() {
        let (h, w) = (6, 10);
        let fwd = FlowField::constant(h, w, FlowDirection::Forward, 2.0, 0.0);
        let bwd = FlowField::constant(h, w, FlowDirection::Backward, -2.0, 0.0);
        let m = occlusion_mask(&fwd, &bwd, 1.0).unwrap();
        // Columns 0 and 1 point out of frame.
        for y in 0..h {
            for x in 0..w {
                assert_eq!(m.data[y * w + x], x >= 2);
            }
        }

        let mut fwd5 = FlowField::zeros(h, w, FlowDirection::Forward);
        for y in 2..4 {
            for x in 3..6 {
                fwd5.set(y, x, 5.0, 0.0);
            }
        }
        let zero_b = FlowField::zeros(h, w, FlowDirection::Backward);
        let m = occlusion_mask(&fwd5, &zero_b, 1.0).unwrap();
        for y in 0..h {
            for x in 0..w {
                let object = (2..4).contains(&y) && (3..6).contains(&x);
                assert_eq!(m.data[y * w + x], !object);
            }
        }
        let m = occlusion_mask(&fwd5, &zero_b, f64::INFINITY).unwrap();
        assert_eq!(m.count_valid(), h * w);

        assert!(matches!(occlusion_mask(&zero_b, &zero_b, 1.0), Err(Error::FlowDirection(_))));
    }

    #[test]
    fn composing_constant_fields_adds_them() {
        let a = FlowField::constant(6, 7, FlowDirection::Backward, 1.0, 0.0);
        let b = FlowField::constant(6, 7, FlowDirection::Backward, 0.5, -1.0);
        let (c, m) = compose_backward(&a, &b).unwrap();
        assert_eq!(c.get(2, 2), (1.5, -1.0));
        assert!(!m.data[6]);
        assert!(m.data[0]);
        let map = ramp(2, 6, 7);
        let two = backward_warp(&backward_warp(&map, &b).unwrap().0, &a).unwrap().0;
        let one = backward_warp(&map, &c).unwrap().0;
        assert!((two.at(1, 3, 2) - one.at(1, 3, 2)).abs() < 1e-9);
        assert!(compose_backward(&a, &FlowField::zeros(6, 7, FlowDirection::Forward)).is_err());
    }
}
