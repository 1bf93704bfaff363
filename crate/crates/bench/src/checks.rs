//! Self-checks behind the `gradcheck` and `oracle-test` commands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidprop_core::attention::{compute_weights, global_attention, ila_forward, ila_reference, ila_vars, IlaConfig, IlaModule};
use vidprop_core::autodiff::gradcheck::{analytic_grad, finite_diff_check, finite_diff_check_store, numeric_grad, REL_FLOOR};
use vidprop_core::autodiff::{Graph, Var};
use vidprop_core::network::{
    build_schedule, Branch, EncoderConfig, NetworkConfig, ScheduleMode, SeBlock, SlowFastNet, Stage, TaskKind,
};
use vidprop_core::params::ParamStore;
use vidprop_core::training::{mimic_loss, task_loss, Discriminator, LossConfig, TaskTarget};
use vidprop_core::{Result, Tensor};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error.
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let r = g.constant(Tensor::randn(g.shape(v), 1.0, &mut rng(seed)));
    let p = g.mul(v, r)?;
    Ok(g.sum(p))
}

fn grad_check(name: &str, value: Result<f64>) -> Check {
    Check { name: name.into(), value: value.unwrap_or(f64::INFINITY), tolerance: GRAD_TOL }
}

fn conv_checks(out: &mut Vec<Check>) {
    let mut r = rng(1);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 4), (1, 0, 1)] {
        let leaves = [
            Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r),
            Tensor::randn(&[4, 3, k, k], 0.5, &mut r),
            Tensor::randn(&[4], 0.5, &mut r),
        ];
        let v = finite_diff_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(g, y, 2)
            },
            &leaves,
            GRAD_EPS,
        );
        out.push(grad_check(&format!("conv2d k{k} s{stride} p{pad}"), v));
    }
}

fn softmax_check(out: &mut Vec<Check>) {
    let x = Tensor::randn(&[2, 5, 3, 2], 2.0, &mut rng(3));
    let mask: Vec<bool> = (0..x.numel()).map(|i| i % 7 != 3).collect();
    let v = finite_diff_check(
        |g, v| {
            let y = g.softmax(v[0], 1, Some(&mask))?;
            project(g, y, 4)
        },
        std::slice::from_ref(&x),
        GRAD_EPS,
    );
    out.push(grad_check("masked softmax", v));
}

fn se_checks(out: &mut Vec<Check>) {
    let mut store = ParamStore::new();
    let se = SeBlock::new(&mut store, "se", 6, 3, &mut rng(5));
    let x = Tensor::randn(&[2, 6, 3, 4], 1.0, &mut rng(6));
    let v = finite_diff_check(
        |g, v| {
            let y = se.forward(g, &store, v[0])?;
            project(g, y, 7)
        },
        std::slice::from_ref(&x),
        GRAD_EPS,
    );
    out.push(grad_check("SE block input", v));
    let v = finite_diff_check_store(
        |g, s| {
            let x = g.constant(x.clone());
            let y = se.forward(g, s, x)?;
            project(g, y, 7)
        },
        &store,
        GRAD_EPS,
    );
    out.push(grad_check("SE block parameters", v));
}

fn ila_checks(out: &mut Vec<Check>) {
    let mut r = rng(8);
    for window in [1, 3, 5] {
        let c = 3;
        let cfg = IlaConfig::new(c, window).expect("valid window");
        let leaves = [
            Tensor::randn(&[2, c, 4, 5], 1.0, &mut r),
            Tensor::randn(&[2, c, 4, 5], 1.0, &mut r),
            Tensor::randn(&[c, c, 3, 3], 0.3, &mut r),
            Tensor::randn(&[c], 0.3, &mut r),
        ];
        let v = finite_diff_check(
            |g, v| {
                let y = ila_vars(g, v[2], Some(v[3]), v[0], v[1], &cfg)?;
                project(g, y, 9)
            },
            &leaves,
            GRAD_EPS,
        );
        out.push(grad_check(&format!("local attention L={window} (f_t, f_k, h)"), v));
    }
}

fn adversarial(g: &mut Graph, d: &Discriminator, store: &ParamStore, fast: Var, reversed: bool) -> Result<Var> {
    let x = if reversed { g.gradient_reversal(fast, 1.0) } else { fast };
    let p = d.forward_with(store, g, x)?;
    let neg = g.scale(p, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let l = g.ln(one_minus)?;
    Ok(g.sum(l))
}

fn discriminator_checks(out: &mut Vec<Check>) {
    let d = Discriminator::new(3, 4, &mut rng(10));
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng(11));
    let v = finite_diff_check_store(
        |g, s| {
            let x = g.constant(x.clone());
            adversarial(g, &d, s, x, false)
        },
        &d.store,
        GRAD_EPS,
    );
    out.push(grad_check("discriminator parameters", v));

    // the reversed analytic gradient must be the negated numeric one
    let leaves = std::slice::from_ref(&x);
    let plain = |g: &mut Graph, v: &[Var]| adversarial(g, &d, &d.store, v[0], false);
    let reversed = |g: &mut Graph, v: &[Var]| adversarial(g, &d, &d.store, v[0], true);
    let value = numeric_grad(&plain, leaves, GRAD_EPS).and_then(|n| {
        let a = analytic_grad(&reversed, leaves)?;
        Ok(a[0].iter().zip(&n[0]).map(|(a, n)| (a + n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)).fold(0.0, f64::max))
    });
    out.push(grad_check("discriminator path through gradient reversal", value));
}

/// Smallest network that still has every component.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 3,
        slow: EncoderConfig { branch: Branch::Slow, stages: vec![Stage::new(4, 2), Stage::new(5, 1), Stage::new(3, 2)] },
        fast: EncoderConfig { branch: Branch::Fast, stages: vec![Stage::new(2, 2), Stage::new(3, 2)] },
        se_reduction: 2,
        window: 3,
        decoder_widths: (4, 3),
        tasks: vec![TaskKind::Segmentation { num_classes: 3 }, TaskKind::Depth],
        ..NetworkConfig::default()
    }
}

fn sequence_check(out: &mut Vec<Check>) {
    let v = (|| -> Result<f64> {
        let mut net = SlowFastNet::new(tiny_config(), 15)?;
        let mut jitter = rng(18);
        for id in net.store.ids().collect::<Vec<_>>() {
            if net.store.name(id).contains(".h.weight") {
                net.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 3.0);
            }
            if net.store.name(id).ends_with(".bias") {
                for x in net.store.get_mut(id).data_mut() {
                    *x += 0.05 * jitter.gen_range(-1.0..1.0);
                }
            }
        }
        let disc = Discriminator::new(3, 2, &mut rng(16));
        let mut r = rng(17);
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut r)).collect();
        let targets: Vec<Vec<TaskTarget>> = (0..3)
            .map(|i| {
                vec![
                    TaskTarget::Segmentation((0..64).map(|p| (p + i) % 3).collect()),
                    TaskTarget::Depth { values: (0..64).map(|p| 0.1 + p as f64 / 640.0).collect(), mask: vec![true; 64] },
                ]
            })
            .collect();
        let slow_features = net.encode(&frames[0], Branch::Slow)?;
        let schedule = build_schedule(3, 2, ScheduleMode::Periodic)?;
        let mut loss = LossConfig::new(2);
        loss.beta = 0.0;
        let f = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
            let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
            let outs = net.forward_clip_with(store, g, &vars, &schedule)?;
            let mut total = None;
            for (o, t) in outs.iter().zip(&targets) {
                let (l, _) = task_loss(g, &o.predictions, t, &loss.task_weights)?;
                total = Some(match total {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let total = g.scale(total.expect("three frames"), 1.0 / 3.0);
            // the slow side of the mimicking loss is a stop-gradient
            // target, so it is held fixed under perturbation too
            let slow_target = g.constant(slow_features.clone());
            let fast = net.encode_var_with(store, g, vars[0], Branch::Fast)?;
            let m = mimic_loss(g, slow_target, fast, &disc, &loss)?;
            g.add(total, m.total)
        };
        finite_diff_check_store(f, &net.store, GRAD_EPS)
    })();
    out.push(grad_check("3-frame sequence loss", v));
}

/// Every finite-difference suite, in a fixed order.
pub fn gradient_checks() -> Vec<Check> {
    let mut out = Vec::new();
    conv_checks(&mut out);
    softmax_check(&mut out);
    se_checks(&mut out);
    ila_checks(&mut out);
    discriminator_checks(&mut out);
    sequence_check(&mut out);
    out
}

fn random_case(r: &mut ChaCha8Rng, max: (usize, usize, usize, usize), window: usize) -> (IlaModule, Tensor, Tensor) {
    let b = r.gen_range(1..=max.0);
    let c = r.gen_range(1..=max.1);
    let h = r.gen_range(window.div_ceil(2).max(1)..=max.2);
    let w = r.gen_range(window.div_ceil(2).max(1)..=max.3);
    let m = IlaModule::random(IlaConfig::new(c, window).expect("odd window"), r).expect("random module");
    (m, Tensor::randn(&[b, c, h, w], 1.0, r), Tensor::randn(&[b, c, h, w], 1.0, r))
}

/// Worst deviation from 1 of a per-pixel weight sum, over `cases` random
/// inputs; a wrong count of masked slots reports infinity.
pub fn normalization_check(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let window = [1, 3, 5, 7][i % 4];
        let (m, f_t, f_k) = random_case(&mut r, (2, 4, 9, 9), window);
        let a = match compute_weights(&m, &f_k, &f_t) {
            Ok(a) => a,
            Err(_) => return Check { name: "attention normalization".into(), value: f64::INFINITY, tolerance: ORACLE_TOL },
        };
        let (b, _, h, w) = f_t.dims4().expect("4-d");
        let half = window / 2;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let mut sum = 0.0;
                    let mut zeros = 0;
                    for s in 0..window * window {
                        if a.is_valid(bi, s, y, x) {
                            sum += a.at(bi, s, y, x);
                        } else if a.at(bi, s, y, x) == 0.0 {
                            zeros += 1;
                        }
                    }
                    let span = |p: usize, n: usize| (p + half).min(n - 1) - p.saturating_sub(half) + 1;
                    if window * window - zeros != span(y, h) * span(x, w) {
                        worst = f64::INFINITY;
                    }
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
    }
    Check { name: format!("attention normalization ({cases} cases)"), value: worst, tolerance: ORACLE_TOL }
}

/// Fast kernel against the direct-loop reference, and a whole-map window
/// against global attention.
pub fn oracle_checks(cases: usize, seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let window = [1, 3, 5, 7][i % 4];
        let (m, f_t, f_k) = random_case(&mut r, (2, 8, 10, 10), window);
        let d = ila_forward(&m, &f_t, &f_k)
            .and_then(|a| ila_reference(&m, &f_t, &f_k).and_then(|b| a.max_abs_diff(&b)))
            .unwrap_or(f64::INFINITY);
        worst = worst.max(d);
    }
    let mut global_worst: f64 = 0.0;
    for i in 0..cases.div_ceil(4) {
        // the window may not exceed 2*min(H, W) - 1, so only square maps
        // admit a window that covers the whole map from every pixel
        let h = r.gen_range(2..=6);
        let w = h;
        let window = 2 * h - 1;
        let c = 1 + i % 4;
        let m = IlaModule::random(IlaConfig::new(c, window).expect("odd window"), &mut r).expect("random module");
        let f_t = Tensor::randn(&[2, c, h, w], 1.0, &mut r);
        let f_k = Tensor::randn(&[2, c, h, w], 1.0, &mut r);
        let d = ila_forward(&m, &f_t, &f_k)
            .and_then(|a| global_attention(&m, &f_t, &f_k).and_then(|b| a.max_abs_diff(&b)))
            .unwrap_or(f64::INFINITY);
        global_worst = global_worst.max(d);
    }
    vec![
        Check { name: format!("local attention vs reference ({cases} cases)"), value: worst, tolerance: ORACLE_TOL },
        Check { name: "whole-map window vs global attention".into(), value: global_worst, tolerance: ORACLE_TOL },
    ]
}
