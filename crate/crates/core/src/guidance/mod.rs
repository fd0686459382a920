//! Image-space guidance: anything that maps a rendered image to a scalar loss
//! and a per-pixel gradient.
//!
//! Two scorers are provided. [`photometric_guidance`] is a plain MSE against a
//! target view, used for self-contained reconstruction runs. [`RemoteGuidance`]
//! speaks the HTTP guidance protocol to an external text-image similarity
//! service; only `(loss, gradient)` pairs cross that boundary.

pub mod fixture;
mod remote;

pub use remote::{RemoteConfig, RemoteGuidance};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::Camera;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceResult {
    pub loss: f64,
    /// Same layout as the scored image.
    pub grad: Vec<f64>,
}

impl GuidanceResult {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// Mean squared error over all pixels and channels.
pub fn photometric_guidance(image: &Image, target: &Image) -> Result<GuidanceResult> {
    if !image.same_shape(target) {
        return Err(Error::param(format!(
            "image is {}x{} but target is {}x{}",
            image.width(),
            image.height(),
            target.width(),
            target.height()
        )));
    }
    let n = image.data().len() as f64;
    let mut loss = 0.0;
    let grad = image
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(GuidanceResult { loss: loss / n, grad })
}

/// 64-bit FNV-1a over the image's `f32` little-endian byte stream.
pub fn image_hash(image: &Image) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for v in image.data() {
        for b in (*v as f32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Target views for photometric guidance.
#[derive(Clone, Debug)]
pub struct PhotometricViews {
    views: Vec<(Camera, Image)>,
}

impl PhotometricViews {
    pub fn new(views: Vec<(Camera, Image)>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::param("photometric guidance needs at least one view"));
        }
        for (cam, img) in &views {
            cam.validate()?;
            if cam.width != img.width() || cam.height != img.height() {
                return Err(Error::param(format!(
                    "target image {}x{} does not match camera resolution {}x{}",
                    img.width(),
                    img.height(),
                    cam.width,
                    cam.height
                )));
            }
        }
        Ok(Self { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, i: usize) -> (&Camera, &Image) {
        let (c, i) = &self.views[i];
        (c, i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Camera, &Image)> {
        self.views.iter().map(|(c, i)| (c, i))
    }
}

pub enum GuidanceHandle {
    Photometric(PhotometricViews),
    Remote { client: RemoteGuidance, prompt: String },
}
