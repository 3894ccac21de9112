use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::BoundingBox;
use crate::error::{Error, Result};

/// One labelled object: pixel corner box `[xmin, ymin, xmax, ymax)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    #[serde(rename = "class")]
    pub class_label: String,
    pub bbox: [i64; 4],
}

/// Ground truth for one image, serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "image")]
    pub image_id: String,
    pub width: i64,
    pub height: i64,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.width <= 0 || self.height <= 0 {
            return Err(Error::Validation(format!(
                "{}: image size {}x{} is empty",
                self.image_id, self.width, self.height
            )));
        }
        for obj in &self.objects {
            let [x0, y0, x1, y1] = obj.bbox;
            if !(0 <= x0 && x0 < x1 && x1 <= self.width && 0 <= y0 && y0 < y1 && y1 <= self.height) {
                return Err(Error::Validation(format!(
                    "{}: box {:?} for '{}' is degenerate or outside {}x{}",
                    self.image_id, obj.bbox, obj.class_label, self.width, self.height
                )));
            }
            if obj.class_label.is_empty() {
                return Err(Error::Validation(format!("{}: empty class label", self.image_id)));
            }
        }
        Ok(())
    }

    /// Boxes in normalized `[0, 1]` coordinates, paired with their labels.
    pub fn normalized(&self) -> Vec<(&str, BoundingBox)> {
        let (w, h) = (self.width as f64, self.height as f64);
        self.objects
            .iter()
            .map(|o| {
                let [x0, y0, x1, y1] = o.bbox;
                let b = BoundingBox::new(x0 as f64 / w, y0 as f64 / h, x1 as f64 / w, y1 as f64 / h)
                    .expect("validated box");
                (o.class_label.as_str(), b)
            })
            .collect()
    }
}

/// Ordered class labels; detector class ids are `index + 1` (0 is background).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocab {
    pub labels: Vec<String>,
}

impl ClassVocab {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<_> = labels.iter().collect();
        if unique.len() != labels.len() || labels.is_empty() {
            return Err(Error::Validation("class vocabulary must be non-empty and unique".into()));
        }
        Ok(Self { labels })
    }

    /// Sorted set of labels appearing in `annotations`.
    pub fn from_annotations(annotations: &[Annotation]) -> Result<Self> {
        let set: BTreeSet<String> = annotations
            .iter()
            .flat_map(|a| a.objects.iter().map(|o| o.class_label.clone()))
            .collect();
        Self::new(set.into_iter().collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Detector class id (1-based) of a label.
    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label).map(|i| i + 1)
    }

    pub fn label(&self, class_id: usize) -> Option<&str> {
        class_id.checked_sub(1).and_then(|i| self.labels.get(i)).map(String::as_str)
    }

    pub fn check(&self, annotations: &[Annotation]) -> Result<()> {
        for a in annotations {
            for o in &a.objects {
                if self.class_id(&o.class_label).is_none() {
                    return Err(Error::Validation(format!(
                        "{}: class '{}' is not in the vocabulary",
                        a.image_id, o.class_label
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(BufReader::new(file))
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
