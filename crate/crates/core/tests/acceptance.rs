//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! The training experiments run at desk scale with fixed seeds. Expect roughly
//! half an hour on a single core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use common::oracles::{ap_by_curve, match_by_table, nms_by_enumeration, random_box, random_detections, random_ground_truth};
use wildcascade::checkpoint::Checkpointable;
use wildcascade::data::synth::{classification_corpus, detection_corpus, SHAPES};
use wildcascade::data::{degrade, ClassVocab, DegradationParams};
use wildcascade::detect::{
    build_default_boxes, decode_box, encode_box, match_anchors, nms, train_detector, Detector, DetectorArch,
    DetectorInit, DetectorTrainConfig, MapSpec,
};
use wildcascade::enhance::{enhance_frame, EnhanceSpec};
use wildcascade::eval::{average_precision, compare_pipelines, psnr, ImageDetection, Thresholds};
use wildcascade::gan::{
    discriminator_forward, gan_value, generator_forward, sample_noise, train_gan, Discriminator, GanRun,
    GanTrainConfig, GanTrainer, Generator, GeneratorArch, GeneratorInput,
};
use wildcascade::probe::{
    evaluate_probe, extract_features_batch, probe_predict, train_linear_probe, LinearProbe, ProbeVector,
};
use wildcascade::ImageTensor;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Suite {
    failed: usize,
    start: Instant,
}

impl Suite {
    fn run(&mut self, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn equilibrium_value() -> Outcome {
    let half = vec![0.5; 64];
    let v = gan_value(&half, &half).map_err(err)?;
    let expected = -2.0 * std::f64::consts::LN_2;
    ensure((v - expected).abs() <= 1e-9, || format!("V = {v}, expected {expected}"))?;
    Ok(format!("V = {v:.12}"))
}

fn gradient_fidelity() -> Outcome {
    use common::gradients::*;
    // Every check compares at relative tolerance 1e-5 in f64 and panics on a mismatch.
    confidence_gradients();
    discriminator_objective_through_network();
    generator_objectives_through_both_networks();
    enhancement_objective_through_refiner();
    detection_loss_gradient_on_predictions();
    detection_loss_through_f64_head();
    Ok("discriminator, generator (both variants), enhancement and detection objectives agree with central differences".into())
}

const GAN_CORPUS_SEED: u64 = 11;

fn default_gan_run(trained: &mut Option<Discriminator<f32>>) -> Outcome {
    let cfg = GanTrainConfig::default();
    ensure((cfg.image_size, cfg.batch_size, cfg.epochs) == (32, 72, 25), || "defaults drifted".into())?;
    let data: Vec<ImageTensor> = classification_corpus(1000, 32, GAN_CORPUS_SEED).into_iter().map(|(i, _)| i).collect();
    let probe_noise = sample_noise(16, cfg.noise_dim, 99).map_err(err)?;
    let mut out_of_range = Vec::new();
    let run: GanRun = train_gan(&cfg, &data, None, |s, t| {
        let samples = generator_forward(&t.generator, GeneratorInput::Noise(&probe_noise))?;
        if samples.iter().flat_map(|i| i.data()).any(|v| !(-1.0..=1.0).contains(v)) {
            out_of_range.push(s.epoch);
        }
        Ok(())
    })
    .map_err(err)?;
    ensure(out_of_range.is_empty(), || format!("generator outputs left [-1, 1] at epochs {out_of_range:?}"))?;
    let bad = run.log.iter().find(|r| ![r.d_loss, r.g_loss, r.v_estimate, r.d_real_mean, r.d_fake_mean].iter().all(|v| v.is_finite()));
    ensure(bad.is_none(), || format!("non-finite loss record {bad:?}"))?;
    let last = run.epochs.last().ok_or("no epochs")?;
    let real = last.d_real_mean;
    *trained = Some(run.discriminator);
    ensure(real > 0.45 && real < 1.0, || format!("final D(real) mean {real}"))?;
    Ok(format!("{} batches, final D(real) mean {real:.4}, d_loss {:.4}, g_loss {:.4}", run.log.len(), last.d_loss, last.g_loss))
}

fn probe_quality(trained: Option<&Discriminator<f32>>) -> Outcome {
    let trained = trained.ok_or("no trained discriminator from criterion 3")?;
    let untrained = GanTrainer::new(GanTrainConfig::default(), None).map_err(err)?.discriminator;
    // 100 labelled images (25 per class) for the probe, 400 held out.
    let set = classification_corpus(500, 32, GAN_CORPUS_SEED + 1);
    let images: Vec<ImageTensor> = set.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = set.iter().map(|(_, l)| *l).collect();
    let accuracy = |d: &Discriminator<f32>| -> Result<(usize, f64), String> {
        let f = extract_features_batch(d, &images).map_err(err)?;
        let p = train_linear_probe(&f[..100], &labels[..100], 1e-2, 0).map_err(err)?;
        Ok((f[0].values.len(), evaluate_probe(&p, &f[100..], &labels[100..]).map_err(err)?.accuracy))
    };
    let (dim, a_trained) = accuracy(trained)?;
    let (_, a_untrained) = accuracy(&untrained)?;
    ensure(dim == 7168, || format!("probe vector length {dim}"))?;
    ensure(a_trained > a_untrained, || format!("trained {a_trained:.4} <= untrained {a_untrained:.4}"))?;
    Ok(format!("dim {dim}; accuracy trained {a_trained:.4} vs untrained {a_untrained:.4}"))
}

fn oracle_equivalences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.random_range(0..=12);
        let dets = random_detections(&mut rng, n, 3);
        let thr = rng.random_range(0.1..0.9);
        ensure(nms(&dets, thr, usize::MAX) == nms_by_enumeration(&dets, thr), || format!("nms case {case}"))?;
    }
    for case in 0..100 {
        let n = rng.random_range(0..=20);
        let dets: Vec<ImageDetection> = random_detections(&mut rng, n, 2)
            .into_iter()
            .map(|detection| ImageDetection { image_id: format!("img{}", rng.random_range(0..3)), detection })
            .collect();
        let m = rng.random_range(1..=8);
        let gts = random_ground_truth(&mut rng, m, 2, 3);
        let thr = rng.random_range(0.3..0.7);
        let class = gts[0].class_id;
        let ap = average_precision(&dets, &gts, class, thr).map_err(err)?;
        let reference = ap_by_curve(&dets, &gts, class, thr);
        ensure((ap - reference).abs() <= 1e-9, || format!("AP case {case}: {ap} vs {reference}"))?;
    }
    let specs = [MapSpec::with_aspect_count(4, 4, 3).map_err(err)?, MapSpec::with_aspect_count(2, 2, 4).map_err(err)?, MapSpec::with_aspect_count(1, 1, 2).map_err(err)?];
    let anchors = build_default_boxes(&specs, 0.2, 0.8).map_err(err)?.boxes;
    for scene in 0..100 {
        let n = rng.random_range(0..8);
        let gts: Vec<_> = (0..n).map(|_| random_box(&mut rng)).collect();
        let thr = rng.random_range(0.2..0.7);
        let m = match_anchors(&gts, &anchors, thr).map_err(err)?;
        ensure(m.anchor_to_gt == match_by_table(&gts, &anchors, thr), || format!("matcher scene {scene}"))?;
    }
    Ok("200 NMS, 100 AP and 100 matcher instances agree with the references".into())
}

fn geometry_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (gt, anchor) = (random_box(&mut rng), random_box(&mut rng));
        let back = decode_box(&encode_box(&gt, &anchor).map_err(err)?, &anchor).map_err(err)?;
        worst = gt.to_array().iter().zip(back.to_array()).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    ensure(worst <= 1e-9, || format!("round-trip error {worst:e}"))?;
    for case in 0..50 {
        let maps: Vec<(usize, usize, usize)> = (0..rng.random_range(1..5)).map(|_| (rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..10))).collect();
        let specs = maps.iter().map(|&(r, c, a)| MapSpec::with_aspect_count(r, c, a)).collect::<wildcascade::Result<Vec<_>>>().map_err(err)?;
        let set = build_default_boxes(&specs, 0.1, 0.9).map_err(err)?;
        let expected: usize = maps.iter().map(|(r, c, a)| r * c * a).sum();
        ensure(set.len() == expected, || format!("anchor count case {case}: {} vs {expected}", set.len()))?;
    }
    // 62 anchors, so every scene has at least as many anchors as ground truths.
    let specs = [MapSpec::with_aspect_count(4, 4, 3).map_err(err)?, MapSpec::with_aspect_count(2, 2, 3).map_err(err)?, MapSpec::with_aspect_count(1, 1, 2).map_err(err)?];
    let anchors = build_default_boxes(&specs, 0.2, 0.8).map_err(err)?.boxes;
    for case in 0..500 {
        let gts: Vec<_> = (0..rng.random_range(1..30)).map(|_| random_box(&mut rng)).collect();
        let m = match_anchors(&gts, &anchors, rng.random_range(0.3..0.95)).map_err(err)?;
        for g in 0..gts.len() {
            ensure(m.anchor_to_gt.contains(&Some(g)), || format!("case {case}: gt {g} unmatched"))?;
        }
    }
    Ok(format!("max round-trip error {worst:.2e}; 50 anchor-count specs exact; all gts matched in 500 scenes"))
}

fn identity_refiner(width: usize, height: usize) -> Result<Generator<f32>, String> {
    let arch = GeneratorArch::Conditional { channels: 3, hidden: vec![8], output_width: width, output_height: height };
    let mut g = Generator::new(arch, &mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    g.zero_final_layer();
    Ok(g)
}

fn enhancement_contract() -> Outcome {
    let g = identity_refiner(32, 32)?;
    let frame = ImageTensor::from_fn(100, 320, 3, |y, x, c| (((x * 7 + y * 3 + c * 11) % 23) as f32 / 11.5 - 1.0).clamp(-1.0, 1.0));
    let big = enhance_frame(&g, &frame, &EnhanceSpec::new(1920, 1080)).map_err(err)?;
    ensure((big.width(), big.height()) == (1920, 1080), || format!("output {}x{}", big.width(), big.height()))?;
    let mut worst: f32 = 0.0;
    for tile_size in [0, 64] {
        let spec = EnhanceSpec { tile_size, ..EnhanceSpec::new(320, 100) };
        let same = enhance_frame(&g, &frame, &spec).map_err(err)?;
        worst = frame.data().iter().zip(same.data()).fold(worst, |w, (a, b)| w.max((a - b).abs()));
    }
    ensure(worst < 1e-6, || format!("identity deviation {worst:e}"))?;
    Ok(format!("320x100 -> 1920x1080; identity deviation {worst:.1e} (whole frame and tiled)"))
}

/// Degradation shared by the enhancement and cascade experiments: half resolution,
/// 40% brightness, light sensor noise.
fn degraded(img: &ImageTensor, seed: u64) -> Result<ImageTensor, String> {
    let p = DegradationParams { downscale_factor: 2.0, brightness_scale: 0.4, gaussian_noise_sigma: 0.02, seed };
    degrade(img, &p).map_err(err)
}

fn nearest_upscale(img: &ImageTensor, w: usize, h: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, img.channels(), |y, x, c| img.get(y * img.height() / h, x * img.width() / w, c))
}

fn enhancement_quality(refiner: &mut Option<Generator<f32>>) -> Outcome {
    let classes: Vec<&str> = SHAPES.to_vec();
    let clean: Vec<ImageTensor> = detection_corpus(600, 64, 21, &classes, 3).map_err(err)?.into_iter().map(|(i, _)| i).collect();
    let low = clean.iter().enumerate().map(|(i, c)| degraded(c, 1000 + i as u64)).collect::<Result<Vec<_>, _>>()?;
    let cfg = GanTrainConfig { seed: 3, ..GanTrainConfig::default() };
    let run = train_gan(&cfg, &low[..500], Some(&clean[..500]), |_, _| Ok(())).map_err(err)?;
    let spec = EnhanceSpec::new(64, 64);
    let (mut enhanced, mut nearest) = (0.0, 0.0);
    for (l, c) in low[500..].iter().zip(&clean[500..]) {
        enhanced += psnr(&enhance_frame(&run.generator, l, &spec).map_err(err)?, c).map_err(err)? / 100.0;
        nearest += psnr(&nearest_upscale(l, 64, 64), c).map_err(err)? / 100.0;
    }
    *refiner = Some(run.generator);
    ensure(enhanced >= nearest, || format!("enhanced {enhanced:.3} dB < nearest {nearest:.3} dB"))?;
    Ok(format!("held-out mean PSNR enhanced {enhanced:.3} dB vs nearest-neighbour {nearest:.3} dB"))
}

fn cascade_direction(refiner: Option<&Generator<f32>>) -> Outcome {
    let g = refiner.ok_or("no refiner from criterion 8")?;
    let classes: Vec<&str> = SHAPES.to_vec();
    let train = detection_corpus(400, 128, 31, &classes, 3).map_err(err)?;
    let run = train_detector(&DetectorTrainConfig::default(), &train, None, DetectorInit::Scratch, |_, _| Ok(())).map_err(err)?;
    let bench = detection_corpus(100, 128, 41, &classes, 3)
        .map_err(err)?
        .into_iter()
        .enumerate()
        .map(|(i, (img, ann))| Ok((degraded(&img, 5000 + i as u64)?, ann)))
        .collect::<Result<Vec<_>, String>>()?;
    let cmp = compare_pipelines(&run.detector, g, &bench, &EnhanceSpec::new(128, 128), Thresholds::default()).map_err(err)?;
    let (b, c) = (cmp.baseline.recall_at_iou, cmp.cascade.recall_at_iou);
    let detail = format!("recall@0.5 baseline {b:.4}, cascade {c:.4}, delta {:+.4} (mAP {:.4} -> {:.4})", cmp.delta_recall, cmp.baseline.map_score, cmp.cascade.map_score);
    ensure(c >= b, || detail.clone())?;
    Ok(detail)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn saved<M: Checkpointable>(m: &M, dir: &Path, name: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let path = dir.join(name);
    m.save(&path, Value::Null).map_err(err)?;
    Ok(files(&path))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = tmp.path();
    let shapes: Vec<ImageTensor> = classification_corpus(24, 16, 1).into_iter().map(|(i, _)| i).collect();
    let small = GanTrainConfig {
        batch_size: 8,
        epochs: 2,
        image_size: 16,
        noise_dim: 8,
        generator_widths: vec![8, 4],
        discriminator_widths: vec![4, 8],
        refiner_widths: vec![4],
        seed: 7,
        ..GanTrainConfig::default()
    };
    let latent = || train_gan(&small, &shapes, None, |_, _| Ok(()));
    let (a, b) = (latent().map_err(err)?, latent().map_err(err)?);
    ensure(saved(&a.generator, dir, "ga")? == saved(&b.generator, dir, "gb")?, || "latent generator differs".into())?;
    ensure(saved(&a.discriminator, dir, "da")? == saved(&b.discriminator, dir, "db")?, || "discriminator differs".into())?;
    ensure(format!("{:?}", a.log) == format!("{:?}", b.log), || "loss logs differ".into())?;

    let low = shapes.iter().enumerate().map(|(i, s)| degraded(s, i as u64)).collect::<Result<Vec<_>, _>>()?;
    let conditional = || train_gan(&small, &low, Some(&shapes), |_, _| Ok(()));
    let (ca, cb) = (conditional().map_err(err)?, conditional().map_err(err)?);
    ensure(saved(&ca.generator, dir, "ca")? == saved(&cb.generator, dir, "cb")?, || "refiner differs".into())?;

    let scenes = detection_corpus(8, 32, 2, &SHAPES, 2).map_err(err)?;
    let det_cfg = DetectorTrainConfig {
        arch: DetectorArch { input_size: 32, backbone_widths: vec![4, 8], extra_widths: vec![8], ..DetectorArch::default() },
        epochs: 2,
        batch_size: 4,
        seed: 8,
        ..DetectorTrainConfig::default()
    };
    let detector = || train_detector(&det_cfg, &scenes, None, DetectorInit::Scratch, |_, _| Ok(()));
    let (da, db) = (detector().map_err(err)?, detector().map_err(err)?);
    ensure(saved(&da.detector, dir, "deta")? == saved(&db.detector, dir, "detb")?, || "detector differs".into())?;

    let labelled = classification_corpus(24, 16, 3);
    let labels: Vec<usize> = labelled.iter().map(|(_, l)| *l).collect();
    let images: Vec<ImageTensor> = labelled.into_iter().map(|(i, _)| i).collect();
    let feats = extract_features_batch(&a.discriminator, &images).map_err(err)?;
    let probe = || train_linear_probe(&feats, &labels, 1e-2, 4);
    let (pa, pb) = (probe().map_err(err)?, probe().map_err(err)?);
    ensure(saved(&pa, dir, "pa")? == saved(&pb, dir, "pb")?, || "probe differs".into())?;

    let g = ca.generator.clone();
    let spec = EnhanceSpec::new(32, 32);
    let report = || compare_pipelines(&da.detector, &g, &scenes, &spec, Thresholds { conf: 0.05, iou: 0.5 }).map(|c| serde_json::to_string(&c).unwrap());
    ensure(report().map_err(err)? == report().map_err(err)?, || "comparison reports differ".into())?;

    round_trips(dir, &a.generator, &a.discriminator, &da.detector, &pa, &images, &feats)?;
    Ok("two seeded runs give byte-identical checkpoints and reports; reloaded models reproduce forward outputs exactly".into())
}

fn round_trips(
    dir: &Path,
    g: &Generator<f32>,
    d: &Discriminator<f32>,
    det: &Detector,
    probe: &LinearProbe,
    images: &[ImageTensor],
    feats: &[ProbeVector],
) -> Result<(), String> {
    let noise = sample_noise(4, 8, 1).map_err(err)?;
    let g2 = Generator::load(&dir.join("ga")).map_err(err)?;
    ensure(generator_forward(g, GeneratorInput::Noise(&noise)).map_err(err)? == generator_forward(&g2, GeneratorInput::Noise(&noise)).map_err(err)?, || "generator outputs changed".into())?;
    let d2 = Discriminator::load(&dir.join("da")).map_err(err)?;
    ensure(discriminator_forward(d, images).map_err(err)? == discriminator_forward(&d2, images).map_err(err)?, || "discriminator outputs changed".into())?;
    let det2 = Detector::load(&dir.join("deta")).map_err(err)?;
    ensure(det2.vocab == ClassVocab::new(det.vocab.labels.clone()).map_err(err)?, || "vocabulary changed".into())?;
    let frame = detection_corpus(1, 32, 9, &SHAPES, 2).map_err(err)?.remove(0).0;
    let x = det.prepare(&frame).map_err(err)?;
    let (p1, p2) = (det.predict(&x).map_err(err)?, det2.predict(&x).map_err(err)?);
    ensure(p1.iter().zip(&p2).all(|(a, b)| a.loc == b.loc && a.logits == b.logits), || "detector outputs changed".into())?;
    let probe2 = LinearProbe::load(&dir.join("pa")).map_err(err)?;
    for f in feats {
        ensure(probe_predict(probe, f).map_err(err)? == probe_predict(&probe2, f).map_err(err)?, || "probe outputs changed".into())?;
    }
    Ok(())
}

fn main() {
    let mut suite = Suite { failed: 0, start: Instant::now() };
    let mut trained_d = None;
    let mut refiner = None;
    suite.run(1, "equilibrium value", equilibrium_value);
    suite.run(2, "gradient fidelity", gradient_fidelity);
    suite.run(3, "default-config GAN run", || default_gan_run(&mut trained_d));
    suite.run(4, "probe dimensionality and quality", || probe_quality(trained_d.as_ref()));
    suite.run(5, "oracle equivalences", oracle_equivalences);
    suite.run(6, "geometry invariants", geometry_invariants);
    suite.run(7, "enhancement contract", enhancement_contract);
    suite.run(8, "enhancement quality", || enhancement_quality(&mut refiner));
    suite.run(9, "cascade recall", || cascade_direction(refiner.as_ref()));
    suite.run(10, "reproducibility", reproducibility);
    println!("{} of 10 criteria passed in {:.0}s", 10 - suite.failed, suite.start.elapsed().as_secs_f64());
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
