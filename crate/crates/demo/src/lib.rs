//! wasm-bindgen bindings for the static page in `www/`.

use wasm_bindgen::prelude::*;
use wildcascade::data::synth::{detection_corpus, SHAPES};
use wildcascade::data::{degrade, DegradationParams};
use wildcascade::detect::{build_default_boxes, nms, BoundingBox, Detection, MapSpec};
use wildcascade::ImageTensor;

fn js(e: wildcascade::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA pixels ready for `ImageData`.
#[wasm_bindgen]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl Picture {
    fn from_image(img: &ImageTensor) -> Self {
        let rgb = img.to_rgb().to_u8();
        let rgba = rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Picture { width: img.width(), height: img.height(), rgba }
    }

    fn to_image(&self) -> Result<ImageTensor, JsError> {
        if self.rgba.len() != self.width * self.height * 4 {
            return Err(JsError::new("pixel buffer does not match the picture size"));
        }
        let rgb: Vec<u8> = self.rgba.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        ImageTensor::from_u8(self.height, self.width, 3, &rgb).map_err(js)
    }
}

/// A seeded synthetic scene of shapes on a textured background.
#[wasm_bindgen]
pub fn scene(size: usize, seed: u64) -> Result<Picture, JsError> {
    let (img, _) = detection_corpus(1, size, seed, &SHAPES, 3).map_err(js)?.remove(0);
    Ok(Picture::from_image(&img))
}

/// Downscales, darkens and adds noise to a picture.
#[wasm_bindgen]
pub fn degrade_picture(p: &Picture, factor: f64, brightness: f64, sigma: f64, seed: u64) -> Result<Picture, JsError> {
    let params = DegradationParams { downscale_factor: factor, brightness_scale: brightness, gaussian_noise_sigma: sigma, seed };
    Ok(Picture::from_image(&degrade(&p.to_image()?, &params).map_err(js)?))
}

/// Default boxes for square maps of the given sizes, flattened as
/// `[map, xmin, ymin, xmax, ymax]` per box.
#[wasm_bindgen]
pub fn default_boxes(grids: &[u32], aspects: usize, s_min: f64, s_max: f64) -> Result<Vec<f64>, JsError> {
    let specs = grids
        .iter()
        .map(|&g| MapSpec::with_aspect_count(g as usize, g as usize, aspects))
        .collect::<wildcascade::Result<Vec<_>>>()
        .map_err(js)?;
    let set = build_default_boxes(&specs, s_min, s_max).map_err(js)?;
    Ok(set
        .boxes
        .iter()
        .zip(&set.origins)
        .flat_map(|(b, o)| [o.map as f64, b.xmin, b.ymin, b.xmax, b.ymax])
        .collect())
}

/// Indices of the boxes kept by greedy NMS; `boxes` holds `[xmin, ymin, xmax, ymax]` per box.
#[wasm_bindgen]
pub fn suppress(boxes: &[f64], scores: &[f64], iou_threshold: f64) -> Result<Vec<u32>, JsError> {
    if boxes.len() != scores.len() * 4 {
        return Err(JsError::new("need four coordinates per score"));
    }
    let dets = boxes
        .chunks(4)
        .zip(scores)
        .map(|(b, &confidence)| Ok(Detection { bbox: BoundingBox::new(b[0], b[1], b[2], b[3])?, class_id: 1, confidence }))
        .collect::<wildcascade::Result<Vec<_>>>()
        .map_err(js)?;
    let kept = nms(&dets, iou_threshold, usize::MAX);
    Ok(kept
        .iter()
        .map(|k| dets.iter().position(|d| d == k).expect("kept boxes come from the input") as u32)
        .collect())
}
