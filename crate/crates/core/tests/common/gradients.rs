//! Finite-difference checks of every training objective, through the same code
//! paths the trainers use, on networks small enough to perturb exhaustively.
//! Each check panics on the first mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wildcascade::data::ClassVocab;
use wildcascade::detect::{build_default_boxes, detection_loss, match_anchors, MapSpec, BoundingBox, DetectionTargets, Detector, DetectorArch, Predictions};
use wildcascade::gan::{
    discriminator_loss, discriminator_loss_grad, discriminator_pass, enhancement_loss, generator_loss,
    generator_loss_grad, generator_objective, Discriminator, DiscriminatorArch, Generator, GeneratorArch,
    GeneratorLossVariant,
};
use wildcascade::image::from_batch;
use wildcascade::nn::{Grads, Init, LayerSpec, Mode, Sequential, Tensor};

const EPS: f64 = 1e-6;

fn close(numeric: f64, analytic: f64, rel: f64, abs: f64) -> bool {
    (numeric - analytic).abs() <= rel * numeric.abs().max(analytic.abs()) + abs
}

fn tensor(shape: [usize; 4], seed: u64, amp: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-amp..amp)).collect())
}

/// Central differences over every trainable parameter of `net`.
fn check_net(net: &mut Sequential<f64>, analytic: &Grads<f64>, loss: impl Fn(&Sequential<f64>) -> f64) {
    let mut checked = 0;
    for li in 0..net.layers.len() {
        for pi in 0..net.layers[li].params.len() {
            if !net.layers[li].params[pi].trainable {
                continue;
            }
            for j in 0..net.layers[li].params[pi].data.len() {
                let orig = net.layers[li].params[pi].data[j];
                net.layers[li].params[pi].data[j] = orig + EPS;
                let up = loss(net);
                net.layers[li].params[pi].data[j] = orig - EPS;
                let down = loss(net);
                net.layers[li].params[pi].data[j] = orig;
                let fd = (up - down) / (2.0 * EPS);
                let an = analytic.layers[li][pi][j];
                assert!(close(fd, an, 1e-5, 1e-8), "layer {li} param {pi}[{j}]: analytic {an} vs numeric {fd}");
                checked += 1;
            }
        }
    }
    assert!(checked > 0 && checked <= 500, "{checked} parameters");
}

fn tiny_discriminator(seed: u64) -> Discriminator<f64> {
    let arch = DiscriminatorArch { input_width: 4, input_height: 4, channels: 3, widths: vec![2, 3], slope: 0.2 };
    Discriminator::new(arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

pub fn confidence_gradients() {
    let real = [0.9, 0.35, 0.6];
    let fake = [0.2, 0.7];
    let (_, gr, gf) = discriminator_loss_grad(&real, &fake).unwrap();
    for i in 0..real.len() {
        let (mut up, mut down) = (real, real);
        up[i] += EPS;
        down[i] -= EPS;
        let fd = (discriminator_loss(&up, &fake).unwrap() - discriminator_loss(&down, &fake).unwrap()) / (2.0 * EPS);
        assert!(close(fd, gr[i], 1e-6, 1e-9));
    }
    for i in 0..fake.len() {
        let (mut up, mut down) = (fake, fake);
        up[i] += EPS;
        down[i] -= EPS;
        let fd = (discriminator_loss(&real, &up).unwrap() - discriminator_loss(&real, &down).unwrap()) / (2.0 * EPS);
        assert!(close(fd, gf[i], 1e-6, 1e-9));
    }
    for variant in [GeneratorLossVariant::Saturating, GeneratorLossVariant::NonSaturating] {
        let (_, g) = generator_loss_grad(&fake, variant).unwrap();
        for i in 0..fake.len() {
            let (mut up, mut down) = (fake, fake);
            up[i] += EPS;
            down[i] -= EPS;
            let fd = (generator_loss(&up, variant).unwrap() - generator_loss(&down, variant).unwrap()) / (2.0 * EPS);
            assert!(close(fd, g[i], 1e-6, 1e-9), "{variant:?}");
        }
    }
}

pub fn discriminator_objective_through_network() {
    let mut d = tiny_discriminator(1);
    let real = tensor([3, 3, 4, 4], 2, 1.0);
    let fake = tensor([2, 3, 4, 4], 3, 1.0);
    let pass = discriminator_pass(&d.net, &real, &fake).unwrap();
    check_net(&mut d.net, &pass.grads, |n| discriminator_pass(n, &real, &fake).unwrap().loss);
}

pub fn generator_objectives_through_both_networks() {
    let arch = GeneratorArch::Latent { noise_dim: 3, image_size: 4, channels: 3, widths: vec![4] };
    let d = tiny_discriminator(4);
    let z = tensor([3, 3, 1, 1], 5, 1.0);
    for variant in [GeneratorLossVariant::Saturating, GeneratorLossVariant::NonSaturating] {
        let mut g: Generator<f64> = Generator::new(arch.clone(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (fake, tape) = g.forward_train(&z).unwrap();
        let (_, dfake) = generator_objective(&d.net, &fake, None, variant, 0.0, 1.0).unwrap();
        let mut grads = g.net.zero_grads();
        g.backward(&tape, dfake, &mut grads);
        let loss = |n: &Sequential<f64>| {
            let (fake, _) = n.forward(&z, Mode::Train).unwrap();
            generator_objective(&d.net, &fake, None, variant, 0.0, 1.0).unwrap().0
        };
        check_net(&mut g.net, &grads, loss);
    }
}

pub fn enhancement_objective_through_refiner() {
    let arch = GeneratorArch::Conditional { channels: 3, hidden: vec![3], output_width: 4, output_height: 4 };
    let mut g: Generator<f64> = Generator::new(arch, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    // Undo the identity start so every layer receives gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let last = g.net.layers.len() - 2;
    for p in &mut g.net.layers[last].params {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let d = tiny_discriminator(9);
    let x = tensor([2, 3, 4, 4], 10, 0.5);
    let y = tensor([2, 3, 4, 4], 11, 0.9);
    let (fake, tape) = g.forward_train(&x).unwrap();
    let objective = |fake: &Tensor<f64>| generator_objective(&d.net, fake, Some(&y), GeneratorLossVariant::NonSaturating, 100.0, 1.0);
    let (value, dfake) = objective(&fake).unwrap();
    // The public scalar loss agrees with the objective being differentiated.
    let conf: Vec<f64> = d.net.forward(&fake, Mode::Train).unwrap().0.data;
    let public = enhancement_loss(&from_batch(&fake).unwrap(), &from_batch(&y).unwrap(), &conf, 100.0, 1.0).unwrap();
    assert!(close(public, value, 1e-5, 1e-6), "{public} vs {value}");
    let mut grads = g.net.zero_grads();
    g.backward(&tape, dfake, &mut grads);
    let arch = g.arch.clone();
    check_net(&mut g.net, &grads, |n| {
        let g = Generator::from_parts(arch.clone(), n.clone()).unwrap();
        objective(&g.forward_train(&x).unwrap().0).unwrap().0
    });
}

fn prediction_targets() -> (Predictions, DetectionTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 12;
    let pred = Predictions {
        loc: (0..n).map(|_| [(); 4].map(|_| rng.random_range(-2.0..2.0))).collect(),
        logits: (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
    };
    let mut labels = vec![0; n];
    labels[2] = 1;
    labels[7] = 2;
    let offsets = (0..n).map(|_| [(); 4].map(|_| rng.random_range(-1.0..1.0))).collect();
    (pred, DetectionTargets { labels, offsets })
}

pub fn detection_loss_gradient_on_predictions() {
    let (pred, targets) = prediction_targets();
    let out = detection_loss(&pred, &targets, 3).unwrap();
    let f = |p: &Predictions| detection_loss(p, &targets, 3).unwrap().loss;
    for i in 0..pred.loc.len() {
        for c in 0..4 {
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up.loc[i][c] += EPS;
            down.loc[i][c] -= EPS;
            let fd = (f(&up) - f(&down)) / (2.0 * EPS);
            assert!(close(fd, out.grad_loc[i][c], 1e-5, 1e-8), "loc {i},{c}");
        }
        for c in 0..3 {
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up.logits[i][c] += EPS;
            down.logits[i][c] -= EPS;
            let fd = (f(&up) - f(&down)) / (2.0 * EPS);
            assert!(close(fd, out.grad_logits[i][c], 1e-5, 1e-8), "logit {i},{c}");
        }
    }
}

/// A single 3x3 prediction head in f64 over one feature map, unpacked with the
/// detector's channel layout (`aspect * (4 + classes) + j`, anchors by row, column,
/// aspect).
pub fn detection_loss_through_f64_head() {
    let (aspects, classes, side) = (2, 3, 3);
    let per = 4 + classes;
    let spec = LayerSpec::Conv2d { in_channels: 2, out_channels: aspects * per, kernel: 3, stride: 1, padding: 1 };
    let mut head = Sequential::<f64>::new([2, side, side], &[spec], Init::He, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    let anchors = build_default_boxes(&[MapSpec::with_aspect_count(side, side, aspects).unwrap()], 0.3, 0.6).unwrap();
    let gts = [BoundingBox::new(0.05, 0.1, 0.4, 0.45).unwrap(), BoundingBox::new(0.5, 0.4, 0.95, 0.9).unwrap()];
    let targets = match_anchors(&gts, &anchors.boxes, 0.5).unwrap().targets(&[1, 2]);
    let x = tensor([1, 2, side, side], 16, 1.0);
    let hw = side * side;
    let at = |a: usize, cell: usize, j: usize| (a * per + j) * hw + cell;
    let unpack = |out: &Tensor<f64>| {
        let mut p = Predictions { loc: Vec::new(), logits: Vec::new() };
        for cell in 0..hw {
            for a in 0..aspects {
                p.loc.push([0, 1, 2, 3].map(|j| out.data[at(a, cell, j)]));
                p.logits.push((4..per).map(|j| out.data[at(a, cell, j)]).collect());
            }
        }
        p
    };
    let (out, tape) = head.forward(&x, Mode::Train).unwrap();
    let res = detection_loss(&unpack(&out), &targets, 3).unwrap();
    assert!(res.positives >= 2);
    let mut dy = Tensor::zeros(out.shape);
    for cell in 0..hw {
        for a in 0..aspects {
            let i = cell * aspects + a;
            for j in 0..4 {
                dy.data[at(a, cell, j)] = res.grad_loc[i][j];
            }
            for j in 0..classes {
                dy.data[at(a, cell, 4 + j)] = res.grad_logits[i][j];
            }
        }
    }
    let mut grads = head.zero_grads();
    head.backward(&tape, dy, Some(&mut grads));
    check_net(&mut head, &grads, |n| detection_loss(&unpack(&n.forward(&x, Mode::Train).unwrap().0), &targets, 3).unwrap().loss);
}

pub fn detection_loss_through_tiny_detector() {
    // The detector runs in f32, so this uses a coarse step and tolerance.
    let vocab = ClassVocab::new(vec!["disc".into(), "square".into()]).unwrap();
    let arch = DetectorArch { input_size: 16, backbone_widths: vec![2, 3], extra_widths: vec![3, 3], ..DetectorArch::default() };
    let mut det = Detector::new(arch, vocab, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let gts = [BoundingBox::new(0.1, 0.2, 0.6, 0.7).unwrap(), BoundingBox::new(0.5, 0.5, 0.9, 0.95).unwrap()];
    let targets = match_anchors(&gts, &det.anchors.boxes, 0.5).unwrap().targets(&[1, 2]);
    let x = tensor([1, 3, 16, 16], 14, 1.0).cast::<f32>();
    let loss = |d: &Detector| {
        let (p, _) = d.forward_train(&x).unwrap();
        detection_loss(&p[0], &targets, 3).unwrap().loss
    };
    let (p, tape) = det.forward_train(&x).unwrap();
    let out = detection_loss(&p[0], &targets, 3).unwrap();
    let mut grads = det.zero_grads();
    det.backward(&tape, &[out.grad_loc], &[out.grad_logits], &mut grads);

    let h = 1e-3f32;
    let mut checked = 0;
    for si in 0..det.stages.len() + det.heads.len() {
        let n_layers = if si < det.stages.len() { det.stages[si].layers.len() } else { det.heads[si - det.stages.len()].layers.len() };
        for li in 0..n_layers {
            let count = |d: &Detector| {
                let net = if si < d.stages.len() { &d.stages[si] } else { &d.heads[si - d.stages.len()] };
                net.layers[li].params.iter().map(|p| if p.trainable { p.data.len() } else { 0 }).collect::<Vec<_>>()
            };
            for (pi, len) in count(&det).into_iter().enumerate() {
                for j in (0..len).step_by(3) {
                    let nudge = |d: &mut Detector, v: f32| {
                        let ns = d.stages.len();
                        let net = if si < ns { &mut d.stages[si] } else { &mut d.heads[si - ns] };
                        net.layers[li].params[pi].data[j] += v;
                    };
                    nudge(&mut det, h);
                    let up = loss(&det);
                    nudge(&mut det, -2.0 * h);
                    let down = loss(&det);
                    nudge(&mut det, h);
                    let fd = (up - down) / (2.0 * h as f64);
                    let an = if si < det.stages.len() { grads.stages[si].layers[li][pi][j] } else { grads.heads[si - det.stages.len()].layers[li][pi][j] };
                    assert!(close(fd, an as f64, 5e-2, 5e-3), "net {si} layer {li} param {pi}[{j}]: analytic {an} vs numeric {fd}");
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 50);
}
