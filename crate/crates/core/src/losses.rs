//! Objective terms: supervised cross-entropy, the two adversarial terms, the
//! discriminator weight discrepancy, the entropy-gated consistency term and
//! their combination.
//!
//! Functions ending in `_grad` return the value together with its gradient;
//! the plain versions only evaluate.

use crate::discriminators::{flatten_layer_weights, DiscParams};
use crate::error::{Error, Result};
use crate::flowwarp::ValidityMask;
use crate::nn;
use crate::params::Grads;
use crate::segnet::ProbMap;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Scores are clamped to `[ε, 1-ε]` inside logarithms.
pub const SCORE_EPS: f64 = 1e-7;

/// Balancing weights. Defaults: `λ_sa = 1`, `λ_wd = 1`, `λ_u = 0.001`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sa: f64,
    pub lambda_wd: f64,
    pub lambda_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sa: 1.0,
            lambda_wd: 1.0,
            lambda_u: 0.001,
        }
    }
}

/// Per-step loss record; inactive terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub ssl: f64,
    pub sa: Option<f64>,
    pub sta: Option<f64>,
    pub wd: Option<f64>,
    pub ctcr: Option<f64>,
    pub itcr: Option<f64>,
    pub total: f64,
    pub gate_fraction: Option<f64>,
}

impl LossBundle {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let terms = [
            ("ssl", Some(self.ssl)),
            ("sa", self.sa),
            ("sta", self.sta),
            ("wd", self.wd),
            ("ctcr", self.ctcr),
            ("itcr", self.itcr),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

fn check_labels(p: &ProbMap, labels: &[u8]) -> Result<()> {
    let t = p.tensor();
    if labels.len() != t.plane_len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a {}x{} map",
            labels.len(),
            t.height,
            t.width
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= t.channels) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            t.channels
        )));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy `−ln p[y]`.
pub fn loss_ssl(p: &ProbMap, labels: &[u8]) -> Result<f64> {
    check_labels(p, labels)?;
    let t = p.tensor();
    let n = t.plane_len();
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -t.data[y as usize * n + i].ln())
        .sum();
    Ok(s / n as f64)
}

/// [`loss_ssl`] and its gradient with respect to the logits that produced `p`
/// through a per-pixel softmax: `(p − onehot(y)) / N`.
pub fn loss_ssl_grad(p: &ProbMap, labels: &[u8]) -> Result<(f64, Tensor)> {
    let loss = loss_ssl(p, labels)?;
    let mut g = p.tensor().clone();
    let n = g.plane_len();
    for (i, &y) in labels.iter().enumerate() {
        g.data[y as usize * n + i] -= 1.0;
    }
    g.scale(1.0 / n as f64);
    Ok((loss, g))
}

/// Shannon entropy per pixel (natural log, `0·ln 0 = 0`).
pub fn entropy_map(p: &ProbMap) -> Vec<f64> {
    let t = p.tensor();
    let n = t.plane_len();
    (0..n)
        .map(|i| {
            -(0..t.channels)
                .map(|c| {
                    let v = t.data[c * n + i];
                    if v > 0.0 {
                        v * v.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .collect()
}

#[inline]
fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// `ln D(source) + ln(1 − D(target))` with clamped scores. The
/// discriminator ascends this quantity.
pub fn adversarial_value(score_src: f64, score_tgt: f64) -> f64 {
    clamp_score(score_src).ln() + (1.0 - clamp_score(score_tgt)).ln()
}

/// Spatial adversarial term over single-frame predictions.
pub fn loss_sa(score_src: f64, score_tgt: f64) -> f64 {
    adversarial_value(score_src, score_tgt)
}

/// Spatial-temporal adversarial term over stacked consecutive predictions.
pub fn loss_sta(score_src_stack: f64, score_tgt_stack: f64) -> f64 {
    adversarial_value(score_src_stack, score_tgt_stack)
}

/// Mean of `ln s` (`real = true`) or `ln(1 − s)` over a set of scores.
pub fn mean_log_score(scores: &[f64], real: bool) -> f64 {
    let s: f64 = scores
        .iter()
        .map(|&s| if real { clamp_score(s).ln() } else { (1.0 - clamp_score(s)).ln() })
        .sum();
    s / scores.len() as f64
}

/// Gradient of [`mean_log_score`] with respect to the logits `z` where
/// `s = σ(z)`. Zero wherever the clamp is active.
pub fn mean_log_score_grad(scores: &[f64], real: bool) -> Vec<f64> {
    let n = scores.len() as f64;
    scores
        .iter()
        .map(|&s| {
            if !(SCORE_EPS..=1.0 - SCORE_EPS).contains(&s) {
                0.0
            } else if real {
                (1.0 - s) / n
            } else {
                -s / n
            }
        })
        .collect()
}

fn cosine_parts(a: &[f64], b: &[f64], j: usize) -> Result<(f64, f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer {j}: flattened lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa = a.iter().map(|x| x * x).sum::<f64>();
    let sb = b.iter().map(|x| x * x).sum::<f64>();
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::InvalidArgument(format!("layer {j} has a zero-norm weight vector")));
    }
    // sqrt(x·x) is exact, so equal vectors give exactly 1; the clamp absorbs
    // rounding for nearly parallel ones.
    let cos = (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0);
    Ok((dot, sa.sqrt(), sb.sqrt(), cos))
}

/// Mean cosine similarity between the flattened filters of corresponding
/// layers, taken over `layers`.
pub fn loss_wd(params_st: &DiscParams, params_s: &DiscParams, layers: std::ops::RangeInclusive<usize>) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in layers {
        let a = flatten_layer_weights(params_st, j)?;
        let b = flatten_layer_weights(params_s, j)?;
        sum += cosine_parts(&a, &b, j)?.3;
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no layers to compare".into()));
    }
    Ok(sum / count as f64)
}

/// [`loss_wd`] with gradients for both parameter sets, each scaled by
/// `scale` and accumulated into `grads_st` / `grads_s`.
pub fn loss_wd_grad(
    params_st: &DiscParams,
    params_s: &DiscParams,
    layers: std::ops::RangeInclusive<usize>,
    scale: f64,
    grads_st: &mut Grads,
    grads_s: &mut Grads,
) -> Result<f64> {
    let js: Vec<usize> = layers.collect();
    if js.is_empty() {
        return Err(Error::InvalidArgument("no layers to compare".into()));
    }
    let inv_j = 1.0 / js.len() as f64;
    let mut sum = 0.0;
    for j in js {
        let a = flatten_layer_weights(params_st, j)?;
        let b = flatten_layer_weights(params_s, j)?;
        let (_, na, nb, cos) = cosine_parts(&a, &b, j)?;
        sum += cos;
        let k = scale * inv_j;
        let ga = &mut grads_st.0[2 * (j - 1)];
        for (g, (&x, &y)) in ga.iter_mut().zip(a.iter().zip(&b)) {
            *g += k * (y / (na * nb) - cos * x / (na * na));
        }
        let gb = &mut grads_s.0[2 * (j - 1)];
        for (g, (&x, &y)) in gb.iter_mut().zip(a.iter().zip(&b)) {
            *g += k * (x / (na * nb) - cos * y / (nb * nb));
        }
    }
    Ok(sum * inv_j)
}

/// `sta + λ_sa·sa + λ_wd·wd`.
pub fn loss_ctcr(sa: f64, sta: f64, wd: f64, lambda_sa: f64, lambda_wd: f64) -> f64 {
    sta + lambda_sa * sa + lambda_wd * wd
}

/// Entropy-gated consistency result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItcrValue {
    pub loss: f64,
    /// Share of valid pixels whose gate is open.
    pub gate_fraction: f64,
}

fn check_itcr(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask) -> Result<()> {
    let (a, b) = (p_k.tensor(), p_hat.tensor());
    if !a.same_shape(b) || valid.height != a.height || valid.width != a.width {
        return Err(Error::ShapeMismatch(format!(
            "itcr inputs {:?}, {:?}, mask {}x{}",
            a.shape(),
            b.shape(),
            valid.height,
            valid.width
        )));
    }
    Ok(())
}

/// Per-pixel gate: open where the current prediction is strictly less
/// confident (higher entropy) than the propagated one, on valid pixels only.
pub fn itcr_gate(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask) -> Result<Vec<bool>> {
    check_itcr(p_k, p_hat, valid)?;
    let ek = entropy_map(p_k);
    let eh = entropy_map(p_hat);
    Ok(ek
        .iter()
        .zip(&eh)
        .zip(&valid.data)
        .map(|((a, b), &v)| v && a - b > 0.0)
        .collect())
}

fn itcr_with_gate(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask, gate: &[bool], grad: Option<&mut Tensor>) -> ItcrValue {
    let (a, b) = (p_k.tensor(), p_hat.tensor());
    let n = a.plane_len();
    let n_valid = valid.count_valid();
    if n_valid == 0 {
        return ItcrValue {
            loss: 0.0,
            gate_fraction: 0.0,
        };
    }
    let inv = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut open = 0usize;
    let mut grad = grad;
    for i in 0..n {
        if !gate[i] {
            continue;
        }
        open += 1;
        for c in 0..a.channels {
            let d = a.data[c * n + i] - b.data[c * n + i];
            loss += d.abs();
            if let Some(g) = grad.as_deref_mut() {
                g.data[c * n + i] = inv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            }
        }
    }
    ItcrValue {
        loss: loss * inv,
        gate_fraction: open as f64 * inv,
    }
}

/// Mean over valid pixels of `gate · Σ_c |p_k,c − p̂_c|`.
pub fn loss_itcr(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask) -> Result<ItcrValue> {
    let gate = itcr_gate(p_k, p_hat, valid)?;
    Ok(itcr_with_gate(p_k, p_hat, valid, &gate, None))
}

/// [`loss_itcr`] with the gradient with respect to `p_k`; `p̂` and the gate
/// are treated as constants.
pub fn loss_itcr_grad(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask) -> Result<(ItcrValue, Tensor)> {
    let gate = itcr_gate(p_k, p_hat, valid)?;
    let t = p_k.tensor();
    let mut g = Tensor::zeros(t.channels, t.height, t.width);
    let v = itcr_with_gate(p_k, p_hat, valid, &gate, Some(&mut g));
    Ok((v, g))
}

/// [`loss_itcr_grad`] mapped through the softmax that produced `p_k`.
pub fn loss_itcr_grad_logits(p_k: &ProbMap, p_hat: &ProbMap, valid: &ValidityMask) -> Result<(ItcrValue, Tensor)> {
    let (v, g) = loss_itcr_grad(p_k, p_hat, valid)?;
    Ok((v, nn::softmax_backward(p_k.tensor(), &g)))
}

/// Inputs to [`assemble_objective`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveParts {
    pub ssl: f64,
    /// Generator-side adversarial terms, `sta_G + λ_sa·sa_G`.
    pub ctcr_gen: f64,
    pub itcr: f64,
    /// Discriminator-side values of the adversarial terms and discrepancy.
    pub sa: f64,
    pub sta: f64,
    pub wd: f64,
}

/// Returns `(generator loss, discriminator loss)`, both to be minimised:
/// `ssl + λ_u·ctcr_G + λ_u·itcr` and `−(sta + λ_sa·sa) + λ_wd·wd`.
pub fn assemble_objective(parts: &ObjectiveParts, w: &LossWeights) -> (f64, f64) {
    let gen = parts.ssl + w.lambda_u * parts.ctcr_gen + w.lambda_u * parts.itcr;
    let disc = -(parts.sta + w.lambda_sa * parts.sa) + w.lambda_wd * parts.wd;
    (gen, disc)
}
