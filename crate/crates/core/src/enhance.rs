//! Frame enhancement: bilinear resize to the target resolution followed by the
//! conditional generator's refinement pass, optionally in overlapping tiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::image::ImageTensor;

/// Overlap between neighbouring tiles, blended with linear ramps.
pub const TILE_OVERLAP: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceSpec {
    pub target_width: usize,
    pub target_height: usize,
    /// Tile edge in pixels; 0 processes the whole frame at once.
    #[serde(default)]
    pub tile_size: usize,
    /// Where the generator came from; informational.
    #[serde(default)]
    pub checkpoint_ref: String,
}

impl EnhanceSpec {
    pub fn new(target_width: usize, target_height: usize) -> Self {
        Self { target_width, target_height, tile_size: 0, checkpoint_ref: String::new() }
    }
}

pub fn enhance_frame(g: &Generator<f32>, frame: &ImageTensor, spec: &EnhanceSpec) -> Result<ImageTensor> {
    if !g.arch.is_conditional() {
        return Err(Error::Argument("enhancement needs a conditional generator".into()));
    }
    let [c, _, _] = g.arch.input_shape();
    if frame.channels() != c {
        return Err(Error::Shape(format!(
            "generator expects {c} channels, frame has {}",
            frame.channels()
        )));
    }
    let (tw, th) = (spec.target_width, spec.target_height);
    if tw < frame.width() || th < frame.height() {
        return Err(Error::Argument(format!(
            "target {tw}x{th} is smaller than the {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let up = frame.resize_bilinear(tw, th)?;
    if spec.tile_size == 0 || (spec.tile_size >= tw && spec.tile_size >= th) {
        return g.refine(&up);
    }
    if spec.tile_size <= 2 * TILE_OVERLAP {
        return Err(Error::Argument(format!(
            "tile size {} must exceed twice the {TILE_OVERLAP}-pixel overlap",
            spec.tile_size
        )));
    }
    refine_tiled(g, &up, spec.tile_size)
}

/// Tile origins along one axis: stride `tile - overlap`, last tile flush with the edge.
fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    if tile >= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * (tile - TILE_OVERLAP)).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Blend weight of position `i` in a tile of length `len` covering `[start, start+len)`
/// of an axis of length `total`. Ramps only on edges shared with another tile.
fn ramp(i: usize, len: usize, start: usize, total: usize) -> f32 {
    let step = 1.0 / (TILE_OVERLAP + 1) as f32;
    let lo = if start == 0 { 1.0 } else { (i + 1) as f32 * step };
    let hi = if start + len == total { 1.0 } else { (len - i) as f32 * step };
    lo.min(hi).min(1.0)
}

fn refine_tiled(g: &Generator<f32>, up: &ImageTensor, tile: usize) -> Result<ImageTensor> {
    let (w, h, c) = (up.width(), up.height(), up.channels());
    let mut acc = vec![0.0f32; w * h * c];
    let mut weight = vec![0.0f32; w * h];
    for &y0 in &tile_starts(h, tile) {
        for &x0 in &tile_starts(w, tile) {
            let (tw, th) = (tile.min(w), tile.min(h));
            let crop = ImageTensor::from_fn(th, tw, c, |y, x, ch| up.get(y0 + y, x0 + x, ch));
            let out = g.refine(&crop)?;
            for y in 0..th {
                let wy = ramp(y, th, y0, h);
                for x in 0..tw {
                    let wt = wy * ramp(x, tw, x0, w);
                    let p = (y0 + y) * w + x0 + x;
                    weight[p] += wt;
                    for ch in 0..c {
                        acc[p * c + ch] += wt * out.get(y, x, ch);
                    }
                }
            }
        }
    }
    for (p, px) in acc.chunks_mut(c).enumerate() {
        px.iter_mut().for_each(|v| *v /= weight[p]);
    }
    ImageTensor::from_clamped(h, w, c, acc)
}

pub fn enhance_stream(g: &Generator<f32>, frames: &[ImageTensor], spec: &EnhanceSpec) -> Result<Vec<ImageTensor>> {
    frames
        .iter()
        .enumerate()
        .map(|(index, f)| enhance_frame(g, f, spec).map_err(|e| Error::Frame { index, source: Box::new(e) }))
        .collect()
}
