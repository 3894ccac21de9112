use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use wildcascade::checkpoint::Checkpointable;
use wildcascade::data::synth::{classification_annotations, classification_corpus, detection_corpus, write_corpus, SHAPES};
use wildcascade::data::{degrade, epoch_batches, Annotation, ClassVocab, DegradationParams};
use wildcascade::detect::{detect, detect_cascade, ground_truth, train_detector, Detection, Detector, DetectorInit, DetectorTrainConfig};
use wildcascade::enhance::{enhance_frame, EnhanceSpec};
use wildcascade::eval::{compare_pipelines, mean_average_precision, Fingerprint, GroundTruth, ImageDetection, Thresholds};
use wildcascade::gan::{train_gan as run_gan, write_loss_csv, Discriminator, GanTrainConfig, Generator};
use wildcascade::probe::{
    evaluate_probe, extract_features_batch, probe_report_csv, train_linear_probe_with, LinearProbe, ProbeTrainOptions,
};
use wildcascade::{Error, ImageTensor};

use crate::config::{echo, resolve, Overrides};
use crate::files::{list_pngs, load_annotated, load_frames, parse_size, render, require, write, write_json};
use crate::CliError;

type CmdResult = Result<(), CliError>;

/// Per-item seed so each image gets its own noise draw.
fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradeConfig {
    pub downscale_factor: f64,
    pub brightness_scale: f64,
    pub gaussian_noise_sigma: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        Self { downscale_factor: 1.0, brightness_scale: 1.0, gaussian_noise_sigma: 0.0 }
    }
}

impl DegradeConfig {
    fn params(&self, seed: u64) -> DegradationParams {
        DegradationParams {
            downscale_factor: self.downscale_factor,
            brightness_scale: self.brightness_scale,
            gaussian_noise_sigma: self.gaussian_noise_sigma,
            seed,
        }
    }

    fn is_identity(&self) -> bool {
        self.downscale_factor == 1.0 && self.brightness_scale == 1.0 && self.gaussian_noise_sigma == 0.0
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    /// One centred shape per image, labelled by shape.
    Shapes,
    /// Scenes with several annotated shapes.
    Scenes,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MakeCorpusConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub kind: CorpusKind,
    pub count: usize,
    pub size: usize,
    pub classes: Vec<String>,
    pub max_objects: usize,
    /// Applied to every written image; annotations keep clean-frame coordinates.
    pub degrade: DegradeConfig,
}

impl Default for MakeCorpusConfig {
    fn default() -> Self {
        Self {
            out: "corpus".into(),
            seed: 0,
            kind: CorpusKind::Shapes,
            count: 1000,
            size: 32,
            classes: SHAPES.iter().map(|s| s.to_string()).collect(),
            max_objects: 3,
            degrade: DegradeConfig::default(),
        }
    }
}

pub fn make_corpus(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (MakeCorpusConfig, _) = resolve(file, o)?;
    echo(&c.out, &flat)?;
    let mut items = match c.kind {
        CorpusKind::Shapes => classification_annotations(&classification_corpus(c.count, c.size, c.seed)),
        CorpusKind::Scenes => {
            let classes: Vec<&str> = c.classes.iter().map(String::as_str).collect();
            detection_corpus(c.count, c.size, c.seed, &classes, c.max_objects)?
        }
    };
    if !c.degrade.is_identity() {
        for (i, (img, _)) in items.iter_mut().enumerate() {
            *img = degrade(img, &c.degrade.params(item_seed(c.seed, i)))?;
        }
    }
    write_corpus(&c.out, &items)?;
    println!("wrote {} images to {}", items.len(), c.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GanMode {
    Latent,
    Conditional,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainGanConfig {
    pub out: PathBuf,
    pub data: PathBuf,
    pub mode: GanMode,
    pub gan: GanTrainConfig,
    /// Conditional mode: how training inputs are derived from the clean images.
    pub degrade: DegradeConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainGanConfig {
    fn default() -> Self {
        Self {
            out: "runs/gan".into(),
            data: "corpus".into(),
            mode: GanMode::Latent,
            gan: GanTrainConfig::default(),
            degrade: DegradeConfig { downscale_factor: 2.0, brightness_scale: 0.4, gaussian_noise_sigma: 0.02 },
            checkpoint_every: 1,
        }
    }
}

fn load_images(dir: &Path) -> Result<Vec<ImageTensor>, CliError> {
    require(dir, "dataset")?;
    let paths = list_pngs(dir)?;
    if paths.is_empty() {
        return Err(Error::Validation(format!("no PNG images in {}", dir.display())).into());
    }
    paths.iter().map(|p| ImageTensor::load_png(p).map_err(CliError::from)).collect()
}

pub fn train_gan(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (TrainGanConfig, _) = resolve(file, o)?;
    if c.checkpoint_every == 0 {
        return Err(CliError::Usage("checkpoint_every must be >= 1".into()));
    }
    let images = load_images(&c.data)?;
    echo(&c.out, &flat)?;
    let inputs: Option<Vec<ImageTensor>> = match c.mode {
        GanMode::Latent => None,
        GanMode::Conditional => Some(
            images
                .iter()
                .enumerate()
                .map(|(i, img)| degrade(img, &c.degrade.params(item_seed(c.gan.seed, i))))
                .collect::<wildcascade::Result<_>>()?,
        ),
    };
    let epochs = c.gan.epochs;
    let ckpt_dir = c.out.join("checkpoints");
    let observer = |s: &wildcascade::gan::EpochSummary, t: &wildcascade::gan::GanTrainer| {
        let e = s.epoch + 1;
        eprintln!(
            "epoch {e}/{epochs}: d_loss {:.4} g_loss {:.4} V {:.4} D(real) {:.3}",
            s.d_loss, s.g_loss, s.v_estimate, s.d_real_mean
        );
        if e.is_multiple_of(c.checkpoint_every) || e == epochs {
            let dir = ckpt_dir.join(format!("epoch_{e:03}"));
            let meta = json!({ "epoch": e });
            t.generator.save(&dir.join("generator"), meta.clone())?;
            t.discriminator.save(&dir.join("discriminator"), meta)?;
        }
        Ok(())
    };
    let run = match &inputs {
        None => run_gan(&c.gan, &images, None, observer)?,
        Some(degraded) => run_gan(&c.gan, degraded, Some(&images), observer)?,
    };
    let meta = json!({ "epoch": epochs });
    run.generator.save(&c.out.join("generator"), meta.clone())?;
    run.discriminator.save(&c.out.join("discriminator"), meta)?;
    write_loss_csv(&c.out.join("losses.csv"), &run.log)?;
    write_json(&c.out.join("summary.json"), &run.epochs)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSsdConfig {
    pub out: PathBuf,
    pub data: PathBuf,
    pub detector: DetectorTrainConfig,
    /// Discriminator checkpoint for the backbone.
    pub backbone: Option<PathBuf>,
    /// Detector checkpoint to continue from.
    pub init: Option<PathBuf>,
    /// Generator checkpoint; training frames are enhanced first when set.
    pub enhancer: Option<PathBuf>,
    /// Enhancement target `WxH`; empty means the detector input size.
    pub target: String,
    pub checkpoint_every: usize,
}

impl Default for TrainSsdConfig {
    fn default() -> Self {
        Self {
            out: "runs/ssd".into(),
            data: "corpus".into(),
            detector: DetectorTrainConfig::default(),
            backbone: None,
            init: None,
            enhancer: None,
            target: String::new(),
            checkpoint_every: 1,
        }
    }
}

fn enhance_spec(target: &str, input_size: usize, tile_size: usize, checkpoint: Option<&Path>) -> Result<EnhanceSpec, CliError> {
    let (w, h) = if target.is_empty() { (input_size, input_size) } else { parse_size(target)? };
    Ok(EnhanceSpec {
        tile_size,
        checkpoint_ref: checkpoint.map(|p| p.display().to_string()).unwrap_or_default(),
        ..EnhanceSpec::new(w, h)
    })
}

fn load_generator(path: &Path) -> Result<Generator<f32>, CliError> {
    require(path, "generator checkpoint")?;
    Ok(Generator::load(path)?)
}

fn load_detector(path: &Path) -> Result<Detector, CliError> {
    require(path, "detector checkpoint")?;
    Ok(Detector::load(path)?)
}

pub fn train_ssd(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (TrainSsdConfig, _) = resolve(file, o)?;
    if c.checkpoint_every == 0 {
        return Err(CliError::Usage("checkpoint_every must be >= 1".into()));
    }
    let data = load_annotated(&c.data)?;
    let backbone = match c.backbone.as_deref() {
        Some(p) => {
            require(p, "backbone checkpoint")?;
            Some(Discriminator::load(p)?)
        }
        None => None,
    };
    let start = c.init.as_deref().map(load_detector).transpose()?;
    let generator = c.enhancer.as_deref().map(load_generator).transpose()?;
    let spec = enhance_spec(&c.target, c.detector.arch.input_size, 0, c.enhancer.as_deref())?;
    let init = match (&start, &backbone) {
        (Some(d), _) => DetectorInit::Detector(d),
        (None, Some(b)) => DetectorInit::Backbone(b),
        (None, None) => DetectorInit::Scratch,
    };
    echo(&c.out, &flat)?;
    let epochs = c.detector.epochs;
    let ckpt_dir = c.out.join("checkpoints");
    let run = train_detector(&c.detector, &data, generator.as_ref().map(|g| (g, &spec)), init, |s, d| {
        let e = s.epoch + 1;
        eprintln!("epoch {e}/{epochs}: loss {:.4}", s.loss);
        if e.is_multiple_of(c.checkpoint_every) || e == epochs {
            d.save(&ckpt_dir.join(format!("epoch_{e:03}")).join("detector"), json!({ "epoch": e }))?;
        }
        Ok(())
    })?;
    run.detector.save(&c.out.join("detector"), json!({ "epoch": epochs }))?;
    let mut csv = String::from("epoch,batch,loss,positives\n");
    for r in &run.log {
        let _ = writeln!(csv, "{},{},{},{}", r.epoch, r.batch, r.loss, r.positives);
    }
    write(&c.out.join("losses.csv"), &csv)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub generator: PathBuf,
    pub input: PathBuf,
    pub target: String,
    /// 0 refines whole frames.
    pub tile_size: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            out: "enhanced".into(),
            seed: 0,
            generator: PathBuf::new(),
            input: PathBuf::new(),
            target: "1920x1080".into(),
            tile_size: 0,
        }
    }
}

pub fn enhance(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (EnhanceConfig, _) = resolve(file, o)?;
    let (w, h) = parse_size(&c.target)?;
    let g = load_generator(&c.generator)?;
    let frames = load_frames(&c.input)?;
    echo(&c.out, &flat)?;
    let spec = EnhanceSpec { tile_size: c.tile_size, checkpoint_ref: c.generator.display().to_string(), ..EnhanceSpec::new(w, h) };
    for (index, (name, frame)) in frames.iter().enumerate() {
        let out = enhance_frame(&g, frame, &spec).map_err(|e| Error::Frame { index, source: Box::new(e) })?;
        out.save_png(&c.out.join(format!("{name}_enh_{w}x{h}.png")))?;
    }
    println!("enhanced {} frame(s) into {}", frames.len(), c.out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub detector: PathBuf,
    pub generator: Option<PathBuf>,
    pub input: PathBuf,
    pub cascade: bool,
    pub conf: f64,
    /// Cascade enhancement target `WxH`; empty means the detector input size.
    pub target: String,
    pub tile_size: usize,
    pub render: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            out: "detections".into(),
            seed: 0,
            detector: PathBuf::new(),
            generator: None,
            input: PathBuf::new(),
            cascade: false,
            conf: 0.5,
            target: String::new(),
            tile_size: 0,
            render: false,
        }
    }
}

/// Baseline or cascade detection of one frame.
struct Pipeline {
    detector: Detector,
    cascade: Option<(Generator<f32>, EnhanceSpec)>,
}

impl Pipeline {
    fn new(detector: &Path, generator: Option<&Path>, cascade: bool, target: &str, tile_size: usize) -> Result<Self, CliError> {
        if cascade && generator.is_none() {
            return Err(CliError::Usage("--cascade needs a generator checkpoint".into()));
        }
        let detector = load_detector(detector)?;
        let cascade = match (cascade, generator) {
            (true, Some(p)) => Some((load_generator(p)?, enhance_spec(target, detector.arch.input_size, tile_size, Some(p))?)),
            _ => None,
        };
        Ok(Self { detector, cascade })
    }

    fn run(&self, frame: &ImageTensor, conf: f64) -> wildcascade::Result<Vec<Detection>> {
        match &self.cascade {
            Some((g, spec)) => detect_cascade(g, &self.detector, frame, spec, conf),
            None => detect(&self.detector, frame, conf),
        }
    }
}

fn check_conf(conf: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&conf) {
        return Err(CliError::Usage(format!("confidence threshold {conf} outside [0, 1]")));
    }
    Ok(())
}

pub fn detect_cmd(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (DetectConfig, _) = resolve(file, o)?;
    check_conf(c.conf)?;
    let p = Pipeline::new(&c.detector, c.generator.as_deref(), c.cascade, &c.target, c.tile_size)?;
    let frames = load_frames(&c.input)?;
    echo(&c.out, &flat)?;
    let mut lines = String::new();
    for (index, (name, frame)) in frames.iter().enumerate() {
        let dets = p.run(frame, c.conf).map_err(|e| Error::Frame { index, source: Box::new(e) })?;
        let list: Vec<_> = dets
            .iter()
            .map(|d| {
                json!({
                    "class": p.detector.vocab.label(d.class_id).unwrap_or("?"),
                    "confidence": d.confidence,
                    "bbox_norm": [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax],
                })
            })
            .collect();
        lines.push_str(&serde_json::to_string(&json!({ "frame": name, "detections": list })).map_err(Error::from)?);
        lines.push('\n');
        if c.render {
            render(frame, &dets).save_png(&c.out.join(format!("{name}_det.png")))?;
        }
    }
    write(&c.out.join("detections.jsonl"), &lines)?;
    println!("{} frame(s), detections in {}", frames.len(), c.out.join("detections.jsonl").display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub discriminator: PathBuf,
    pub data: PathBuf,
    pub l2: f64,
    pub max_iterations: usize,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            out: "runs/probe".into(),
            seed: 0,
            discriminator: PathBuf::new(),
            data: "corpus".into(),
            l2: 1e-2,
            max_iterations: ProbeTrainOptions::default().max_iterations,
            test_fraction: 0.2,
        }
    }
}

pub fn probe(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (ProbeConfig, _) = resolve(file, o)?;
    if !(c.test_fraction > 0.0 && c.test_fraction < 1.0) {
        return Err(CliError::Usage("test_fraction must lie in (0, 1)".into()));
    }
    require(&c.discriminator, "discriminator checkpoint")?;
    let d: Discriminator<f32> = Discriminator::load(&c.discriminator)?;
    let data = load_annotated(&c.data)?;
    let anns: Vec<Annotation> = data.iter().map(|(_, a)| a.clone()).collect();
    let vocab = ClassVocab::from_annotations(&anns)?;
    let [_, dh, dw] = d.arch.input_shape();
    let mut labels = Vec::with_capacity(data.len());
    for (img, a) in &data {
        if img.width() != dw || img.height() != dh {
            return Err(Error::Validation(format!("{}: {}x{} image, the discriminator takes {dw}x{dh}", a.image_id, img.width(), img.height())).into());
        }
        let [obj] = a.objects.as_slice() else {
            return Err(Error::Validation(format!("{}: probe images carry exactly one label", a.image_id)).into());
        };
        labels.push(vocab.class_id(&obj.class_label).expect("vocabulary built from these labels") - 1);
    }
    if data.len() < 2 {
        return Err(Error::Validation("probe corpus needs at least two images".into()).into());
    }
    echo(&c.out, &flat)?;
    let order = epoch_batches(data.len(), data.len(), c.seed, true, 0)?.remove(0);
    let n_test = ((data.len() as f64 * c.test_fraction).round() as usize).clamp(1, data.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let images: Vec<ImageTensor> = data.into_iter().map(|(i, _)| i).collect();
    let features = extract_features_batch(&d, &images)?;
    let pick = |idx: &[usize]| (idx.iter().map(|&i| features[i].clone()).collect::<Vec<_>>(), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>());
    let (train_x, train_y) = pick(train_idx);
    let (test_x, test_y) = pick(test_idx);
    let opts = ProbeTrainOptions { max_iterations: c.max_iterations, ..ProbeTrainOptions::default() };
    let fit = train_linear_probe_with(&train_x, &train_y, c.l2, c.seed, opts)?;
    let probe: &LinearProbe = &fit.probe;
    let train_m = evaluate_probe(probe, &train_x, &train_y)?;
    let test_m = evaluate_probe(probe, &test_x, &test_y)?;
    probe.save(&c.out.join("probe"), json!({ "labels": vocab.labels }))?;
    write(&c.out.join("probe_report.csv"), &probe_report_csv(&[("train", &train_m), ("test", &test_m)], &vocab.labels))?;
    let summary = json!({
        "feature_dim": probe.dim,
        "classes": vocab.labels,
        "train_size": train_idx.len(),
        "test_size": test_idx.len(),
        "train_accuracy": train_m.accuracy,
        "test_accuracy": test_m.accuracy,
        "iterations": fit.losses.len(),
    });
    write_json(&c.out.join("probe_summary.json"), &summary)?;
    println!("feature dim {}, test accuracy {:.4}", probe.dim, test_m.accuracy);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub detector: PathBuf,
    pub generator: Option<PathBuf>,
    pub data: PathBuf,
    pub cascade: bool,
    pub conf: f64,
    pub iou: f64,
    pub target: String,
    pub tile_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            out: "runs/eval".into(),
            seed: 0,
            detector: PathBuf::new(),
            generator: None,
            data: "corpus".into(),
            cascade: false,
            conf: Thresholds::default().conf,
            iou: Thresholds::default().iou,
            target: String::new(),
            tile_size: 0,
        }
    }
}

pub fn eval(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (EvalConfig, _) = resolve(file, o)?;
    check_conf(c.conf)?;
    let p = Pipeline::new(&c.detector, c.generator.as_deref(), c.cascade, &c.target, c.tile_size)?;
    let data = load_annotated(&c.data)?;
    echo(&c.out, &flat)?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (index, (frame, ann)) in data.iter().enumerate() {
        let wrap = |e| Error::Frame { index, source: Box::new(e) };
        let (boxes, classes) = ground_truth(ann, &p.detector.vocab).map_err(wrap)?;
        gts.extend(boxes.into_iter().zip(classes).map(|(bbox, class_id)| GroundTruth { image_id: ann.image_id.clone(), class_id, bbox }));
        let found = p.run(frame, c.conf).map_err(wrap)?;
        dets.extend(found.into_iter().map(|detection| ImageDetection { image_id: ann.image_id.clone(), detection }));
    }
    let mut report = mean_average_precision(&dets, &gts, c.iou, Some(&p.detector.vocab))?;
    report.fingerprint = Fingerprint {
        seed: Some(c.seed),
        iou_threshold: c.iou,
        conf_threshold: Some(c.conf),
        nms_threshold: Some(wildcascade::detect::NMS_IOU),
    };
    write_json(&c.out.join("report.json"), &report)?;
    let mut csv = String::from("class,ap\n");
    for (k, v) in &report.per_class_ap {
        let _ = writeln!(csv, "{k},{v}");
    }
    write(&c.out.join("per_class.csv"), &csv)?;
    println!("mAP {:.4}, recall {:.4}", report.map_score, report.recall_at_iou);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub detector: PathBuf,
    pub generator: PathBuf,
    pub data: PathBuf,
    pub conf: f64,
    pub iou: f64,
    pub target: String,
    pub tile_size: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            out: "runs/compare".into(),
            seed: 0,
            detector: PathBuf::new(),
            generator: PathBuf::new(),
            data: "corpus".into(),
            conf: Thresholds::default().conf,
            iou: Thresholds::default().iou,
            target: String::new(),
            tile_size: 0,
        }
    }
}

pub fn compare(file: Option<&Path>, o: Overrides) -> CmdResult {
    let (c, flat): (CompareConfig, _) = resolve(file, o)?;
    check_conf(c.conf)?;
    let p = Pipeline::new(&c.detector, Some(&c.generator), true, &c.target, c.tile_size)?;
    let data = load_annotated(&c.data)?;
    echo(&c.out, &flat)?;
    let (g, spec) = p.cascade.as_ref().expect("cascade requested");
    let mut cmp = compare_pipelines(&p.detector, g, &data, spec, Thresholds { conf: c.conf, iou: c.iou })?;
    cmp.baseline.fingerprint.seed = Some(c.seed);
    cmp.cascade.fingerprint.seed = Some(c.seed);
    write_json(&c.out.join("comparison.json"), &cmp)?;
    cmp.write_per_image_csv(&c.out.join("per_image.csv"))?;
    println!(
        "recall baseline {:.4} cascade {:.4} delta {:+.4}; mAP delta {:+.4}",
        cmp.baseline.recall_at_iou, cmp.cascade.recall_at_iou, cmp.delta_recall, cmp.delta_map
    );
    Ok(())
}
