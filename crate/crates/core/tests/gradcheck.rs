//! Analytic gradients against central finite differences (`h = 1e-4`).
//!
//! The error measure is `‖a − n‖ / max(‖a‖, ‖n‖)` over the whole gradient
//! vector, which must stay below `1e-4`.

use vsda::discriminators::{init_disc_params, DiscConfig, DiscOutput, DiscParams, Discriminator};
use vsda::flowwarp::{FlowDirection, FlowField, ValidityMask};
use vsda::losses::{self, entropy_map};
use vsda::nn;
use vsda::params::ParamSet;
use vsda::segnet::{init_params, PairSpec, ProbMap, SegModelConfig, SegNet};
use vsda::tensor::Tensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

fn numeric(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(x);
            x[i] = orig - H;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn flat(ps: &ParamSet) -> Vec<f64> {
    ps.values().collect()
}

fn unflat(template: &ParamSet, v: &[f64]) -> ParamSet {
    let mut p = template.clone();
    let mut i = 0;
    for q in &mut p.params {
        let n = q.data.len();
        q.data.copy_from_slice(&v[i..i + n]);
        i += n;
    }
    p
}

fn logits(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(c, h, w, |_, _, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % 10_000) as f64 / 2_500.0 - 2.0
    })
}

fn report(name: &str, e: f64) {
    println!("{name}: relative error {e:.3e}");
    assert!(e < TOL, "{name}: relative error {e:.3e}");
}

#[test]
fn ssl_gradient_wrt_logits() {
    let z = logits(4, 6, 7, 1);
    let labels: Vec<u8> = (0..42).map(|i| (i * 7 % 4) as u8).collect();
    let (_, g) = losses::loss_ssl_grad(&ProbMap::from_logits(&z), &labels).unwrap();
    let mut x = z.data.clone();
    let n = numeric(&mut x, |v| {
        let t = Tensor::from_vec(4, 6, 7, v.to_vec()).unwrap();
        losses::loss_ssl(&ProbMap::from_logits(&t), &labels).unwrap()
    });
    report("ssl", rel_err(&g.data, &n));
}

fn disc_value(d: &Discriminator, p: &DiscParams, src: &Tensor, tgt: &Tensor) -> f64 {
    let s = d.forward(p, src).unwrap().scores;
    let t = d.forward(p, tgt).unwrap().scores;
    losses::mean_log_score(&s, true) + losses::mean_log_score(&t, false)
}

fn check_adversarial(name: &str, cfg: DiscConfig, channels: usize) {
    let d = Discriminator::new(cfg.clone()).unwrap();
    let params = init_disc_params(&cfg, 5).unwrap();
    let src = ProbMap::from_logits(&logits(channels, 8, 8, 2)).into_tensor();
    let tgt = ProbMap::from_logits(&logits(channels, 8, 8, 3)).into_tensor();

    // Parameter gradient of the adversarial value.
    let mut g = params.zeros_like();
    let fs = d.forward(&params, &src).unwrap();
    d.backward(&params, &fs, &losses::mean_log_score_grad(&fs.scores, true), Some(&mut g), false);
    let ft = d.forward(&params, &tgt).unwrap();
    let d_in = d
        .backward(&params, &ft, &losses::mean_log_score_grad(&ft.scores, false), Some(&mut g), true)
        .unwrap();
    let analytic: Vec<f64> = g.values().collect();
    let mut x = flat(&params);
    let n = numeric(&mut x, |v| disc_value(&d, &unflat(&params, v), &src, &tgt));
    report(&format!("{name} (discriminator weights)"), rel_err(&analytic, &n));

    // Gradient with respect to the target prediction fed to the discriminator.
    let mut x = tgt.data.clone();
    let n = numeric(&mut x, |v| {
        let t = Tensor::from_vec(tgt.channels, 8, 8, v.to_vec()).unwrap();
        disc_value(&d, &params, &src, &t)
    });
    report(&format!("{name} (target input)"), rel_err(&d_in.data, &n));
}

#[test]
fn sa_gradient_through_discriminator() {
    check_adversarial("sa", DiscConfig::spatial(3, 2), 3);
}

#[test]
fn sta_gradient_through_discriminator() {
    check_adversarial("sta", DiscConfig::spatial_temporal(3, 2), 6);
}

#[test]
fn patch_output_gradient() {
    let cfg = DiscConfig {
        output: DiscOutput::Patch,
        num_layers: 3,
        ..DiscConfig::spatial(3, 2)
    };
    check_adversarial("sa patch", cfg, 3);
}

#[test]
fn wd_gradient_wrt_both_discriminators() {
    let cs = DiscConfig::spatial(3, 2);
    let cst = DiscConfig::spatial_temporal(3, 2);
    let ps = init_disc_params(&cs, 11).unwrap();
    let pst = init_disc_params(&cst, 12).unwrap();
    let layers = cs.shared_layers();
    let mut gs = ps.zeros_like();
    let mut gst = pst.zeros_like();
    losses::loss_wd_grad(&pst, &ps, layers.clone(), 1.0, &mut gst, &mut gs).unwrap();

    let mut x = flat(&pst);
    let n = numeric(&mut x, |v| losses::loss_wd(&unflat(&pst, v), &ps, layers.clone()).unwrap());
    report("wd (spatial-temporal)", rel_err(&gst.values().collect::<Vec<_>>(), &n));
    let mut x = flat(&ps);
    let n = numeric(&mut x, |v| losses::loss_wd(&pst, &unflat(&ps, v), layers.clone()).unwrap());
    report("wd (spatial)", rel_err(&gs.values().collect::<Vec<_>>(), &n));
}

#[test]
fn itcr_gradient_wrt_logits_with_fixed_gate() {
    let (c, h, w) = (3, 6, 6);
    let z = logits(c, h, w, 21);
    let p_hat = ProbMap::from_logits(&logits(c, h, w, 22));
    let mut valid = ValidityMask::all(h, w, true);
    valid.data[3] = false;
    valid.data[17] = false;
    let pk = ProbMap::from_logits(&z);

    // Every pixel must sit away from the gate boundary and from the L1 kinks.
    let ek = entropy_map(&pk);
    let eh = entropy_map(&p_hat);
    assert!(ek.iter().zip(&eh).all(|(a, b)| (a - b).abs() > 1e-3));
    let (v, _) = losses::loss_itcr_grad(&pk, &p_hat, &valid).unwrap();
    assert!(v.gate_fraction > 0.2 && v.gate_fraction < 1.0, "{}", v.gate_fraction);

    let (_, g) = losses::loss_itcr_grad_logits(&pk, &p_hat, &valid).unwrap();
    let gate = losses::itcr_gate(&pk, &p_hat, &valid).unwrap();
    let n_valid = valid.count_valid() as f64;
    let fixed_gate = |t: &Tensor| -> f64 {
        let p = ProbMap::from_logits(t);
        let (a, b) = (p.tensor(), p_hat.tensor());
        let n = a.plane_len();
        let mut s = 0.0;
        for i in 0..n {
            if gate[i] {
                for ch in 0..c {
                    s += (a.data[ch * n + i] - b.data[ch * n + i]).abs();
                }
            }
        }
        s / n_valid
    };
    let mut x = z.data.clone();
    let n = numeric(&mut x, |v| fixed_gate(&Tensor::from_vec(c, h, w, v.to_vec()).unwrap()));
    report("itcr", rel_err(&g.data, &n));
}

#[test]
fn segnet_parameter_gradient_shared() {
    check_segnet(2, true);
}

#[test]
fn segnet_parameter_gradient_separate_branches() {
    check_segnet(1, false);
}

fn check_segnet(base_channels: usize, shared_branches: bool) {
    let cfg = SegModelConfig {
        num_classes: 3,
        base_channels,
        num_down_levels: 1,
        shared_branches,
    };
    let net = SegNet::new(&cfg).unwrap();
    let params = init_params(&cfg, 4).unwrap();
    assert!(params.num_values() <= 500, "{}", params.num_values());
    let f0 = Tensor::from_fn(3, 8, 8, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 7.0);
    let f1 = Tensor::from_fn(3, 8, 8, |c, y, x| ((2 * c + y + 5 * x) % 9) as f64 / 9.0);
    let mut flow = FlowField::zeros(8, 8, FlowDirection::Backward);
    for y in 0..8 {
        for x in 0..8 {
            flow.set(y, x, 0.3 + 0.05 * x as f64, -0.4 + 0.07 * y as f64);
        }
    }
    let labels: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let pairs = [PairSpec {
        cur: 1,
        prev: 0,
        flow: &flow,
    }];
    let loss = |p: &ParamSet| {
        let fwd = net.forward_seq(p, &[&f0, &f1], &pairs).unwrap();
        losses::loss_ssl(&fwd.probs[0], &labels).unwrap()
    };
    let fwd = net.forward_seq(&params, &[&f0, &f1], &pairs).unwrap();
    let (_, d) = losses::loss_ssl_grad(&fwd.probs[0], &labels).unwrap();
    let mut g = params.zeros_like();
    net.backward_seq(&params, &fwd, &[Some(d)], &mut g).unwrap();
    let mut x = flat(&params);
    let n = numeric(&mut x, |v| loss(&unflat(&params, v)));
    report("segnet", rel_err(&g.values().collect::<Vec<_>>(), &n));
}

#[test]
fn softmax_backward_matches_differences() {
    let z = logits(4, 2, 3, 9);
    let w = logits(4, 2, 3, 10);
    let p = nn::softmax_channels(&z);
    let g = nn::softmax_backward(&p, &w);
    let mut x = z.data.clone();
    let n = numeric(&mut x, |v| {
        let t = nn::softmax_channels(&Tensor::from_vec(4, 2, 3, v.to_vec()).unwrap());
        t.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    });
    report("softmax", rel_err(&g.data, &n));
}
