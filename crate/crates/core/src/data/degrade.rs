use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Synthetic "wild condition" model: area downscale, then darkening and sensor noise
/// in linear `[0, 1]` light, then clamping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub downscale_factor: f64,
    pub brightness_scale: f64,
    /// Standard deviation in linear `[0, 1]` intensity units.
    pub gaussian_noise_sigma: f64,
    pub seed: u64,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            downscale_factor: 1.0,
            brightness_scale: 1.0,
            gaussian_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.downscale_factor >= 1.0 && self.downscale_factor.is_finite()) {
            return Err(Error::Argument(format!("downscale_factor {} < 1", self.downscale_factor)));
        }
        if !(self.brightness_scale > 0.0 && self.brightness_scale <= 1.0) {
            return Err(Error::Argument(format!(
                "brightness_scale {} outside (0, 1]",
                self.brightness_scale
            )));
        }
        if !(self.gaussian_noise_sigma >= 0.0 && self.gaussian_noise_sigma.is_finite()) {
            return Err(Error::Argument(format!("noise sigma {} < 0", self.gaussian_noise_sigma)));
        }
        Ok(())
    }
}

pub fn degrade(image: &ImageTensor, params: &DegradationParams) -> Result<ImageTensor> {
    params.validate()?;
    let small = image.downscale_area(params.downscale_factor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (h, w, c) = (small.height(), small.width(), small.channels());
    let scale = params.brightness_scale;
    let sigma = params.gaussian_noise_sigma;
    let data = small
        .into_data()
        .into_iter()
        .map(|v| {
            let mut linear = (v as f64 + 1.0) * 0.5 * scale;
            if sigma > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                linear += sigma * n;
            }
            (linear * 2.0 - 1.0) as f32
        })
        .collect();
    ImageTensor::from_clamped(h, w, c, data)
}
