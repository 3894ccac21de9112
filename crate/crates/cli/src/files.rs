use std::path::{Path, PathBuf};

use wildcascade::data::{extract_frames, load_annotations, Annotation};
use wildcascade::detect::Detection;
use wildcascade::{Error, ImageTensor};

use crate::CliError;

pub const ANNOTATIONS: &str = "annotations.jsonl";

pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("{what} path is required")));
    }
    if !path.exists() {
        return Err(Error::Validation(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(())
}

/// Images of an annotated directory, in annotation order.
pub fn load_annotated(dir: &Path) -> Result<Vec<(ImageTensor, Annotation)>, CliError> {
    require(dir, "dataset")?;
    let anns = load_annotations(&dir.join(ANNOTATIONS))?;
    let mut out = Vec::with_capacity(anns.len());
    for a in anns {
        out.push((ImageTensor::load_png(&dir.join(&a.image_id))?, a));
    }
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of a directory sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_png(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Named frames from a PNG, a directory of PNGs, or a GIF (`<stem>_fNNNNN`).
pub fn load_frames(input: &Path) -> Result<Vec<(String, ImageTensor)>, CliError> {
    require(input, "input")?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_dir() {
        return list_pngs(input)?.into_iter().map(|p| Ok((stem(&p), ImageTensor::load_png(&p)?))).collect();
    }
    if is_png(input) {
        return Ok(vec![(stem(input), ImageTensor::load_png(input)?)]);
    }
    let s = stem(input);
    Ok(extract_frames(input, 1)?.into_iter().enumerate().map(|(i, f)| (format!("{s}_f{i:05}"), f)).collect())
}

/// `WIDTHxHEIGHT`.
pub fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("size '{s}' is not WIDTHxHEIGHT"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h): (usize, usize) = (w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

const PALETTE: [[f32; 3]; 6] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Two-pixel box outlines, one colour per class.
pub fn render(image: &ImageTensor, dets: &[Detection]) -> ImageTensor {
    let img = image.to_rgb();
    let (w, h) = (img.width(), img.height());
    let mut data = img.into_data();
    for d in dets {
        let color = PALETTE[d.class_id % PALETTE.len()];
        let px = |v: f64, n: usize| ((v * n as f64).round() as isize).clamp(0, n as isize - 1) as usize;
        let (x0, x1) = (px(d.bbox.xmin, w), px(d.bbox.xmax, w));
        let (y0, y1) = (px(d.bbox.ymin, h), px(d.bbox.ymax, h));
        let mut put = |x: usize, y: usize| {
            data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
        };
        for t in 0..2 {
            for x in x0..=x1 {
                put(x, (y0 + t).min(h - 1));
                put(x, y1.saturating_sub(t));
            }
            for y in y0..=y1 {
                put((x0 + t).min(w - 1), y);
                put(x1.saturating_sub(t), y);
            }
        }
    }
    ImageTensor::new(h, w, 3, data).expect("palette stays in range")
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    write(path, &text)
}
