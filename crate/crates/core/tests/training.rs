use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidprop_core::autodiff::Graph;
use vidprop_core::network::{Branch, NetworkConfig, SlowFastNet};
use vidprop_core::training::{mimic_loss, task_loss, AdamConfig, Discriminator, LossConfig, TaskTarget, TrainClip, Trainer};
use vidprop_core::Tensor;

fn zero_disc(c: usize) -> Discriminator {
    let mut d = Discriminator::new(c, 4, &mut ChaCha8Rng::seed_from_u64(0));
    for id in d.store.ids().collect::<Vec<_>>() {
        d.store.get_mut(id).data_mut().fill(0.0);
    }
    d
}

#[test]
fn mimic_loss_at_the_symmetric_point() {
    let x = Tensor::randn(&[1, 16, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for (alpha, beta) in [(1.0, 1.0), (0.3, 2.0), (5.0, 0.0)] {
        let mut g = Graph::new();
        let (s, f) = (g.constant(x.clone()), g.constant(x.clone()));
        let cfg = LossConfig { alpha, beta, ..LossConfig::new(1) };
        let m = mimic_loss(&mut g, s, f, &zero_disc(16), &cfg).unwrap();
        let expected = alpha * 0.0 + beta * 2.0 * std::f64::consts::LN_2;
        assert!((g.value(m.total).data()[0] - expected).abs() < 1e-9);
    }
}

#[test]
fn slow_encoder_gets_no_discriminator_gradient() {
    let net = SlowFastNet::new(NetworkConfig::default(), 2).unwrap();
    let disc = Discriminator::new(16, 8, &mut ChaCha8Rng::seed_from_u64(3));
    let frame = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::new();
    let x = g.constant(frame);
    let slow = net.encode_var(&mut g, x, Branch::Slow).unwrap();
    let fast = net.encode_var(&mut g, x, Branch::Fast).unwrap();
    let cfg = LossConfig { alpha: 0.0, beta: 1.0, ..LossConfig::new(2) };
    let m = mimic_loss(&mut g, slow, fast, &disc, &cfg).unwrap();
    g.backward(m.total).unwrap();
    let mut fast_nonzero = false;
    for id in net.store.ids() {
        let name = net.store.name(id);
        let Some(v) = g.bound_param(&net.store, id) else { continue };
        let grad = g.grad(v).unwrap();
        if name.starts_with("slow.") {
            assert!(grad.iter().all(|&x| x == 0.0), "{name} received gradient");
        }
        if name.starts_with("fast.") {
            fast_nonzero |= grad.iter().any(|&x| x != 0.0);
        }
    }
    assert!(fast_nonzero, "fast encoder should be trained adversarially");
}

#[test]
fn scaling_task_weights_scales_loss_not_direction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seg = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
    let depth = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    let targets = [
        TaskTarget::Segmentation((0..16).map(|i| i % 3).collect()),
        TaskTarget::Depth { values: vec![0.5; 16], mask: (0..16).map(|i| i % 5 != 0).collect() },
    ];
    let run = |c: f64| {
        let mut g = Graph::new();
        let a = g.leaf(seg.clone().with_requires_grad());
        let b = g.leaf(depth.clone().with_requires_grad());
        let (t, _) = task_loss(&mut g, &[a, b], &targets, &[c, c]).unwrap();
        let value = g.value(t).data()[0];
        g.backward(t).unwrap();
        let grad: Vec<f64> = g.grad(a).unwrap().iter().chain(g.grad(b).unwrap()).copied().collect();
        let norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
        (value, grad.into_iter().map(|x| x / norm).collect::<Vec<_>>())
    };
    let (l1, d1) = run(1.0);
    let (l3, d3) = run(3.0);
    assert!((l3 - 3.0 * l1).abs() < 1e-12);
    for (x, y) in d1.iter().zip(&d3) {
        assert!((x - y).abs() < 1e-12);
    }
}

fn fixed_clip() -> TrainClip {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(&[1, 3, 12, 12], 0.0, 1.0, &mut rng)).collect();
    let targets = frames
        .iter()
        .map(|f| {
            let seg = f.data()[..144].iter().map(|&x| (x * 3.999) as usize).collect();
            let depth = f.data()[144..288].iter().map(|&x| 1.0 + x).collect();
            vec![TaskTarget::Segmentation(seg), TaskTarget::Depth { values: depth, mask: vec![true; 144] }]
        })
        .collect();
    TrainClip { frames, targets }
}

#[test]
fn two_hundred_steps_lower_the_loss() {
    let net = SlowFastNet::new(NetworkConfig::default(), 7).unwrap();
    let mut t = Trainer::new(net, 8, LossConfig::new(2), AdamConfig::default(), 2, 8).unwrap();
    let clip = fixed_clip();
    let start = t.evaluate(&clip).unwrap();
    assert!((start.weighted_sum(&t.loss) - start.total).abs() < 1e-9);
    for _ in 0..200 {
        let b = t.step(&clip).unwrap();
        assert!((b.weighted_sum(&t.loss) - b.total).abs() < 1e-9);
    }
    assert!(t.evaluate(&clip).unwrap().total < start.total);
}

#[test]
fn identical_trainers_are_bitwise_identical() {
    let make = || {
        let net = SlowFastNet::new(NetworkConfig::default(), 9).unwrap();
        Trainer::new(net, 8, LossConfig::new(2), AdamConfig { lr: 1e-3, ..AdamConfig::default() }, 2, 10).unwrap()
    };
    let (mut a, mut b) = (make(), make());
    let clip = fixed_clip();
    for _ in 0..3 {
        assert_eq!(a.step(&clip).unwrap(), b.step(&clip).unwrap());
    }
    for ((_, x), (_, y)) in a.net.store.named().zip(b.net.store.named()) {
        assert_eq!(x.data(), y.data());
    }
}
