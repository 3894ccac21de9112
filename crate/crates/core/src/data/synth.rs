//! Seeded synthetic corpora: bright geometric shapes on textured backgrounds.
//!
//! Every item is drawn from its own RNG stream, so a corpus of `n` items is a prefix
//! of any larger corpus with the same seed.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotations::{write_annotations, AnnotatedObject, Annotation};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const SHAPES: [&str; 4] = ["square", "disc", "triangle", "cross"];

#[derive(Clone, Copy, Debug)]
struct Placed {
    shape: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        1 => u * u + v * v <= 1.0,
        2 => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) * 0.5,
        _ => (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0),
    }
}

/// Linear-light background with a tinted gradient, two low-frequency waves and grain.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let base = rng.random_range(0.18..0.38);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            let mut v = base;
            for &(ky, kx, phase, amp) in &waves {
                v += amp * (std::f64::consts::TAU * (ky * fy + kx * fx) + phase).sin();
            }
            for t in tint {
                out.push(v + t + rng.random_range(-0.02..0.02));
            }
        }
    }
    out
}

fn bright_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
    // One weaker channel gives each object a hue without losing contrast.
    let dim = rng.random_range(0..3);
    c[dim] = rng.random_range(0.5..0.8);
    c
}

fn render(h: usize, w: usize, mut pixels: Vec<f64>, objects: &[Placed]) -> ImageTensor {
    const SS: usize = 3;
    for obj in objects {
        let (px0, px1) = (obj.x0.floor().max(0.0) as usize, (obj.x1.ceil() as usize).min(w));
        let (py0, py1) = (obj.y0.floor().max(0.0) as usize, (obj.y1.ceil() as usize).min(h));
        let (cx, cy) = ((obj.x0 + obj.x1) * 0.5, (obj.y0 + obj.y1) * 0.5);
        let (hw, hh) = ((obj.x1 - obj.x0) * 0.5, (obj.y1 - obj.y0) * 0.5);
        for y in py0..py1 {
            for x in px0..px1 {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (x as f64 + (sx as f64 + 0.5) / SS as f64 - cx) / hw;
                        let v = (y as f64 + (sy as f64 + 0.5) / SS as f64 - cy) / hh;
                        if inside(obj.shape, u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cover = hits as f64 / (SS * SS) as f64;
                let shade = 1.0 - 0.15 * ((y as f64 - obj.y0) / (obj.y1 - obj.y0));
                for c in 0..3 {
                    let p = &mut pixels[(y * w + x) * 3 + c];
                    *p = *p * (1.0 - cover) + obj.color[c] * shade * cover;
                }
            }
        }
    }
    let data = pixels.into_iter().map(|v| (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32).collect();
    ImageTensor::new(h, w, 3, data).expect("rendered image is in range")
}

/// `n` square images with one centred-ish shape each; labels cycle through [`SHAPES`].
pub fn classification_corpus(n: usize, size: usize, seed: u64) -> Vec<(ImageTensor, usize)> {
    (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i);
            let label = i % SHAPES.len();
            let bg = background(&mut rng, size, size);
            let s = size as f64;
            let side = s * rng.random_range(0.45..0.75);
            let cx = s * 0.5 + rng.random_range(-0.12..0.12) * s;
            let cy = s * 0.5 + rng.random_range(-0.12..0.12) * s;
            let obj = Placed {
                shape: label,
                x0: cx - side / 2.0,
                y0: cy - side / 2.0,
                x1: cx + side / 2.0,
                y1: cy + side / 2.0,
                color: bright_color(&mut rng),
            };
            (render(size, size, bg, &[obj]), label)
        })
        .collect()
}

fn overlaps(a: &Placed, b: &Placed, margin: f64) -> bool {
    a.x0 < b.x1 + margin && b.x0 < a.x1 + margin && a.y0 < b.y1 + margin && b.y0 < a.y1 + margin
}

/// `n` scenes of `size x size` pixels holding 1..=`max_objects` non-overlapping
/// shapes drawn from `classes` (names from [`SHAPES`]).
pub fn detection_corpus(
    n: usize,
    size: usize,
    seed: u64,
    classes: &[&str],
    max_objects: usize,
) -> Result<Vec<(ImageTensor, Annotation)>> {
    let shape_ids: Vec<usize> = classes
        .iter()
        .map(|c| {
            SHAPES
                .iter()
                .position(|s| s == c)
                .ok_or_else(|| Error::Argument(format!("unknown synthetic shape '{c}'")))
        })
        .collect::<Result<_>>()?;
    if shape_ids.is_empty() || max_objects == 0 || size < 16 {
        return Err(Error::Argument("need classes, objects and size >= 16".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = item_rng(seed, i);
            let bg = background(&mut rng, size, size);
            let s = size as f64;
            let want = rng.random_range(1..=max_objects);
            let mut placed: Vec<Placed> = Vec::new();
            for _ in 0..want * 20 {
                if placed.len() == want {
                    break;
                }
                let side = s * rng.random_range(0.22..0.42);
                let aspect: f64 = rng.random_range(0.8..1.25);
                let (bw, bh) = ((side * aspect.sqrt()).min(s - 2.0), (side / aspect.sqrt()).min(s - 2.0));
                let x0 = rng.random_range(1.0..s - bw - 1.0).round();
                let y0 = rng.random_range(1.0..s - bh - 1.0).round();
                let cand = Placed {
                    shape: shape_ids[rng.random_range(0..shape_ids.len())],
                    x0,
                    y0,
                    x1: (x0 + bw).round(),
                    y1: (y0 + bh).round(),
                    color: bright_color(&mut rng),
                };
                if placed.iter().all(|p| !overlaps(p, &cand, 2.0)) {
                    placed.push(cand);
                }
            }
            let image = render(size, size, bg, &placed);
            let ann = Annotation {
                image_id: format!("scene_{i:05}.png"),
                width: size as i64,
                height: size as i64,
                objects: placed
                    .iter()
                    .map(|p| AnnotatedObject {
                        class_label: SHAPES[p.shape].to_string(),
                        bbox: [p.x0 as i64, p.y0 as i64, p.x1 as i64, p.y1 as i64],
                    })
                    .collect(),
            };
            (image, ann)
        })
        .collect())
}

/// Writes images as PNG plus `annotations.jsonl` into `dir`.
pub fn write_corpus(dir: &Path, items: &[(ImageTensor, Annotation)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (img, ann) in items {
        img.save_png(&dir.join(&ann.image_id))?;
    }
    let anns: Vec<_> = items.iter().map(|(_, a)| a.clone()).collect();
    write_annotations(&dir.join("annotations.jsonl"), &anns)
}

/// Classification items as single-object annotations whose box spans the image.
pub fn classification_annotations(items: &[(ImageTensor, usize)]) -> Vec<(ImageTensor, Annotation)> {
    items
        .iter()
        .enumerate()
        .map(|(i, (img, label))| {
            let (w, h) = (img.width() as i64, img.height() as i64);
            let ann = Annotation {
                image_id: format!("img_{i:05}.png"),
                width: w,
                height: h,
                objects: vec![AnnotatedObject {
                    class_label: SHAPES[*label].to_string(),
                    bbox: [0, 0, w, h],
                }],
            };
            (img.clone(), ann)
        })
        .collect()
}
