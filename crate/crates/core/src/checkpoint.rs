//! On-disk model format: a directory holding `manifest.json` and one raw
//! little-endian `f32` blob per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::ClassVocab;
use crate::detect::{Detector, DetectorArch};
use crate::error::{Error, Result};
use crate::gan::{Discriminator, DiscriminatorArch, Generator, GeneratorArch};
use crate::nn::{LayerSpec, Sequential};
use crate::probe::LinearProbe;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Generator,
    Discriminator,
    Detector,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub architecture: Value,
    /// Layer list of every network in the model, keyed by network name.
    pub layer_spec: BTreeMap<String, Vec<LayerSpec>>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// Tensor values, aligned with `manifest.tensors`.
    pub blobs: Vec<Vec<f32>>,
}

fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl Checkpoint {
    pub fn new(kind: ModelKind, architecture: Value) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind,
                architecture,
                layer_spec: BTreeMap::new(),
                tensors: Vec::new(),
                metadata: Value::Null,
            },
            blobs: Vec::new(),
        }
    }

    pub fn push_tensor(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.manifest.tensors.push(TensorEntry {
            file: format!("{name}.bin"),
            byte_length: data.len() * 4,
            name,
            dtype: "f32".into(),
            shape,
        });
        self.blobs.push(data);
    }

    pub fn tensor(&self, name: &str) -> Result<(&TensorEntry, &[f32])> {
        self.manifest
            .tensors
            .iter()
            .zip(&self.blobs)
            .find(|(t, _)| t.name == name)
            .map(|(t, b)| (t, b.as_slice()))
            .ok_or_else(|| validation(format!("checkpoint lacks tensor '{name}'")))
    }

    fn push_net(&mut self, prefix: &str, net: &Sequential<f32>) {
        self.manifest.layer_spec.insert(prefix.to_string(), net.specs());
        for (name, p) in net.named_params() {
            self.push_tensor(format!("{prefix}.{name}"), p.shape.clone(), p.data.clone());
        }
    }

    /// Fills a freshly built network of the expected topology with stored tensors.
    fn fill_net(&self, prefix: &str, mut net: Sequential<f32>) -> Result<Sequential<f32>> {
        let stored = self
            .manifest
            .layer_spec
            .get(prefix)
            .ok_or_else(|| validation(format!("checkpoint lacks network '{prefix}'")))?;
        if *stored != net.specs() {
            return Err(Error::Shape(format!("network '{prefix}' layers differ from the architecture")));
        }
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for p in &mut layer.params {
                let (entry, data) = self.tensor(&format!("{prefix}.{li}.{}", p.name))?;
                if entry.shape != p.shape {
                    return Err(Error::Shape(format!("tensor '{}' has shape {:?}, expected {:?}", entry.name, entry.shape, p.shape)));
                }
                p.data.copy_from_slice(data);
            }
        }
        Ok(net)
    }

    fn architecture<T: for<'de> Deserialize<'de>>(&self, kind: ModelKind) -> Result<T> {
        if self.manifest.kind != kind {
            return Err(validation(format!("checkpoint holds a {:?}, expected a {kind:?}", self.manifest.kind)));
        }
        Ok(serde_json::from_value(self.manifest.architecture.clone())?)
    }

    /// Writes into a sibling temp directory, then renames it over `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| Error::Argument(format!("checkpoint path {} has no final component", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        }
        let pid = std::process::id();
        let tmp = parent.join(format!(".{name}.tmp-{pid}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (entry, data) in self.manifest.tensors.iter().zip(&self.blobs) {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = tmp.join(&entry.file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest)? + "\n";
        let mpath = tmp.join(MANIFEST);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let old = parent.join(format!(".{name}.old-{pid}"));
        let replaced = dir.exists();
        if replaced {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if replaced {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(validation(format!("unsupported checkpoint format {}", manifest.format_version)));
        }
        let mut blobs = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(validation(format!("tensor '{}' has dtype {}", t.name, t.dtype)));
            }
            let expected = t.shape.iter().product::<usize>() * 4;
            let path: PathBuf = dir.join(&t.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if t.byte_length != expected || bytes.len() != expected {
                return Err(validation(format!(
                    "tensor '{}': shape {:?} needs {expected} bytes, manifest says {}, file has {}",
                    t.name,
                    t.shape,
                    t.byte_length,
                    bytes.len()
                )));
            }
            blobs.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
        }
        Ok(Self { manifest, blobs })
    }
}

/// Models with a checkpoint representation.
pub trait Checkpointable: Sized {
    fn to_checkpoint(&self) -> Result<Checkpoint>;
    fn from_checkpoint(c: &Checkpoint) -> Result<Self>;

    fn save(&self, dir: &Path, metadata: Value) -> Result<()> {
        let mut c = self.to_checkpoint()?;
        c.manifest.metadata = metadata;
        c.save(dir)
    }

    fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(dir)?)
    }
}

fn arbitrary_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

impl Checkpointable for Generator<f32> {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(ModelKind::Generator, serde_json::to_value(&self.arch)?);
        c.push_net("net", &self.net);
        Ok(c)
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let arch: GeneratorArch = c.architecture(ModelKind::Generator)?;
        let fresh = Generator::new(arch.clone(), &mut arbitrary_rng())?;
        Generator::from_parts(arch, c.fill_net("net", fresh.net)?)
    }
}

impl Checkpointable for Discriminator<f32> {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(ModelKind::Discriminator, serde_json::to_value(&self.arch)?);
        c.push_net("net", &self.net);
        Ok(c)
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let arch: DiscriminatorArch = c.architecture(ModelKind::Discriminator)?;
        let fresh = Discriminator::new(arch.clone(), &mut arbitrary_rng())?;
        Discriminator::from_parts(arch, c.fill_net("net", fresh.net)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DetectorHeader {
    arch: DetectorArch,
    labels: Vec<String>,
}

impl Checkpointable for Detector {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = DetectorHeader { arch: self.arch.clone(), labels: self.vocab.labels.clone() };
        let mut c = Checkpoint::new(ModelKind::Detector, serde_json::to_value(&header)?);
        for (i, s) in self.stages.iter().enumerate() {
            c.push_net(&format!("stage{i}"), s);
        }
        for (i, h) in self.heads.iter().enumerate() {
            c.push_net(&format!("head{i}"), h);
        }
        Ok(c)
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let header: DetectorHeader = c.architecture(ModelKind::Detector)?;
        let vocab = ClassVocab::new(header.labels)?;
        let fresh = Detector::new(header.arch.clone(), vocab.clone(), &mut arbitrary_rng())?;
        let stages = fresh
            .stages
            .into_iter()
            .enumerate()
            .map(|(i, s)| c.fill_net(&format!("stage{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        let heads = fresh
            .heads
            .into_iter()
            .enumerate()
            .map(|(i, h)| c.fill_net(&format!("head{i}"), h))
            .collect::<Result<Vec<_>>>()?;
        Detector::from_parts(header.arch, vocab, stages, heads)
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeHeader {
    classes: usize,
    dim: usize,
    l2_strength: f64,
}

impl Checkpointable for LinearProbe {
    fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = ProbeHeader { classes: self.classes, dim: self.dim, l2_strength: self.l2_strength };
        let mut c = Checkpoint::new(ModelKind::Probe, serde_json::to_value(&header)?);
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        c.push_tensor("weights".into(), vec![self.classes, self.dim], f(&self.weights));
        c.push_tensor("bias".into(), vec![self.classes], f(&self.bias));
        c.push_tensor("mean".into(), vec![self.dim], f(&self.mean));
        c.push_tensor("scale".into(), vec![self.dim], f(&self.scale));
        Ok(c)
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let h: ProbeHeader = c.architecture(ModelKind::Probe)?;
        let get = |name: &str, shape: Vec<usize>| -> Result<Vec<f64>> {
            let (entry, data) = c.tensor(name)?;
            if entry.shape != shape {
                return Err(Error::Shape(format!("probe tensor '{name}' has shape {:?}", entry.shape)));
            }
            Ok(data.iter().map(|&v| v as f64).collect())
        };
        Ok(LinearProbe {
            classes: h.classes,
            dim: h.dim,
            weights: get("weights", vec![h.classes, h.dim])?,
            bias: get("bias", vec![h.classes])?,
            l2_strength: h.l2_strength,
            mean: get("mean", vec![h.dim])?,
            scale: get("scale", vec![h.dim])?,
        })
    }
}
