//! Differentiable volume rendering of a [`VoxelField`].
//!
//! Each ray takes `K` samples at the starts of `K` equal strata of
//! `[near, far]` (optionally jittered inside each stratum) and composites
//!
//! ```text
//! C = Σᵢ Tᵢ αᵢ cᵢ + T_{K+1} c_bg,   αᵢ = 1 − exp(−σᵢ δ),   Tᵢ = Πⱼ<ᵢ (1 − αⱼ)
//! ```
//!
//! [`render_backward`] is the exact reverse-mode derivative of that map with
//! respect to the raw density grid and the color-MLP parameters.

mod augment;
mod camera;

pub use augment::{augment_backward, background_augment, AugmentMode, AugmentedImage};
pub use camera::{sample_camera_pose, Camera, PoseSampler, Ray};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{softplus, softplus_grad};
use crate::error::{Error, Result};
use crate::grid::Lattice;
use crate::image::Image;
use crate::rng::{RngStreams, Stream};
use crate::voxel_field::{FieldGrad, VoxelField};

/// Fixed ray partition; gradient reduction order depends only on this.
const RAY_CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub near: f64,
    pub far: f64,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    /// Jitter each sample uniformly inside its stratum.
    pub jitter: bool,
    pub jitter_seed: u64,
    /// Samples whose compositing weight `Tᵢαᵢ` does not exceed this skip the
    /// color query and contribute no color. 0 keeps every sample.
    pub weight_threshold: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: 4.0 - 3f64.sqrt(),
            far: 4.0 + 3f64.sqrt(),
            samples_per_ray: 192,
            background: [1.0; 3],
            jitter: false,
            jitter_seed: 0,
            weight_threshold: 0.0,
        }
    }
}

impl RenderSettings {
    /// Near/far planes bracketing the lattice's bounding sphere for a camera
    /// at `camera_distance` from its center.
    pub fn bracketing(lattice: &Lattice, camera_distance: f64, samples_per_ray: usize) -> Self {
        let (_, r) = lattice.bounding_sphere();
        Self {
            near: (camera_distance - r).max(1e-3),
            far: camera_distance + r,
            samples_per_ray,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::param("samples_per_ray must be >= 2"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::param("background color must lie in [0, 1]"));
        }
        if !(self.weight_threshold >= 0.0) {
            return Err(Error::param("weight_threshold must be non-negative"));
        }
        Ok(())
    }

    /// Segment length δ.
    pub fn step(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Sample {
    pos: [f64; 3],
    raw: f64,
    sigma: f64,
    color: [f64; 3],
    shaded: bool,
}

/// Everything the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct RenderTape {
    width: usize,
    height: usize,
    samples_per_ray: usize,
    step: f64,
    background: [f64; 3],
    lattice: Lattice,
    mlp_params: usize,
    /// `samples_per_ray` records per ray, ray-major.
    samples: Vec<Sample>,
}

impl RenderTape {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    /// Per-sample compositing weights `Tᵢαᵢ` of one ray.
    pub fn ray_weights(&self, ray: usize) -> Vec<f64> {
        let k = self.samples_per_ray;
        let mut t = 1.0;
        self.samples[ray * k..(ray + 1) * k]
            .iter()
            .map(|s| {
                let a = -(-s.sigma * self.step).exp_m1();
                let w = t * a;
                t *= 1.0 - a;
                w
            })
            .collect()
    }

    /// Sample positions and activated densities of one ray.
    pub fn ray_samples(&self, ray: usize) -> Vec<([f64; 3], f64)> {
        let k = self.samples_per_ray;
        self.samples[ray * k..(ray + 1) * k]
            .iter()
            .map(|s| (s.pos, s.sigma))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Image,
    /// Background transmittance `T_{K+1}` per pixel.
    pub transmittance: Vec<f64>,
    pub tape: RenderTape,
}

impl RenderOutput {
    /// Composite with a zero background.
    pub fn foreground(&self) -> Image {
        let bg = self.tape.background;
        let mut fg = self.rgb.clone();
        for (px, t) in fg.data_mut().chunks_exact_mut(3).zip(&self.transmittance) {
            for c in 0..3 {
                px[c] -= t * bg[c];
            }
        }
        fg
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let size = n.div_ceil(RAY_CHUNKS).max(1);
    (0..n)
        .step_by(size)
        .map(|start| (start, (start + size).min(n)))
        .collect()
}

pub fn render(field: &VoxelField, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    camera.validate()?;
    settings.validate()?;
    let rays = camera.generate_rays();
    let k = settings.samples_per_ray;
    let step = settings.step();
    let color_eval = field.color_evaluator();
    let bias = field.bias();
    let density = field.density();
    let lattice = *field.lattice();
    let streams = RngStreams::new(settings.jitter_seed);

    let chunks: Vec<_> = chunk_ranges(rays.len())
        .into_par_iter()
        .map(|(start, end)| {
            let mut scratch = color_eval.scratch();
            let mut rgb = Vec::with_capacity((end - start) * 3);
            let mut trans = Vec::with_capacity(end - start);
            let mut samples = Vec::with_capacity((end - start) * k);
            let mut jitter_rng = streams.at_step(Stream::Jitter, start as u64);
            for ray in &rays[start..end] {
                let mut t_acc = 1.0f64;
                let mut c = [0.0f64; 3];
                for i in 0..k {
                    let offset = if settings.jitter {
                        jitter_rng.gen::<f64>()
                    } else {
                        0.0
                    };
                    let pos = ray.at(settings.near + (i as f64 + offset) * step);
                    let raw = lattice.stencil(pos).interpolate(density);
                    let sigma = softplus(raw + bias);
                    let alpha = -(-sigma * step).exp_m1();
                    let w = t_acc * alpha;
                    let mut s = Sample {
                        pos,
                        raw,
                        sigma,
                        ..Sample::default()
                    };
                    if w > settings.weight_threshold || settings.weight_threshold == 0.0 {
                        s.color = color_eval.color(pos, &mut scratch);
                        s.shaded = true;
                        for ch in 0..3 {
                            c[ch] += w * s.color[ch];
                        }
                    }
                    t_acc *= 1.0 - alpha;
                    samples.push(s);
                }
                for ch in 0..3 {
                    rgb.push(c[ch] + t_acc * settings.background[ch]);
                }
                trans.push(t_acc);
            }
            (rgb, trans, samples)
        })
        .collect();

    let mut rgb = Vec::with_capacity(rays.len() * 3);
    let mut transmittance = Vec::with_capacity(rays.len());
    let mut samples = Vec::with_capacity(rays.len() * k);
    for (c, t, s) in chunks {
        rgb.extend(c);
        transmittance.extend(t);
        samples.extend(s);
    }
    Ok(RenderOutput {
        rgb: Image::new(camera.width, camera.height, rgb)?,
        transmittance,
        tape: RenderTape {
            width: camera.width,
            height: camera.height,
            samples_per_ray: k,
            step,
            background: settings.background,
            lattice,
            mlp_params: field.color_mlp().num_params(),
            samples,
        },
    })
}

/// Gradients of `Σ dL_dpixels · rgb + Σ dL_dtransmittance · T_{K+1}` with
/// respect to the field's raw density grid and color-MLP parameters.
pub fn render_backward(
    field: &VoxelField,
    tape: &RenderTape,
    dl_dpixels: &[f64],
    dl_dtransmittance: &[f64],
) -> Result<FieldGrad> {
    let n = tape.width * tape.height;
    if dl_dpixels.len() != n * 3 || dl_dtransmittance.len() != n {
        return Err(Error::param(format!(
            "adjoint shapes ({}, {}) do not match a {}x{} render",
            dl_dpixels.len(),
            dl_dtransmittance.len(),
            tape.width,
            tape.height
        )));
    }
    if !field.lattice().same_as(&tape.lattice) || field.color_mlp().num_params() != tape.mlp_params {
        return Err(Error::param("render tape was recorded for a different field"));
    }
    let k = tape.samples_per_ray;
    let step = tape.step;
    let bias = field.bias();
    let color_eval = field.color_evaluator();
    let lattice = tape.lattice;

    let partials: Vec<FieldGrad> = chunk_ranges(n)
        .into_par_iter()
        .map(|(start, end)| {
            let mut grad = FieldGrad::zeros(field);
            let mut scratch = color_eval.scratch();
            let mut trans = vec![0.0f64; k + 1];
            for ray in start..end {
                let gc = [
                    dl_dpixels[3 * ray],
                    dl_dpixels[3 * ray + 1],
                    dl_dpixels[3 * ray + 2],
                ];
                let gt = dl_dtransmittance[ray];
                if gc == [0.0; 3] && gt == 0.0 {
                    continue;
                }
                let samples = &tape.samples[ray * k..(ray + 1) * k];
                trans[0] = 1.0;
                for (i, s) in samples.iter().enumerate() {
                    trans[i + 1] = trans[i] * (-s.sigma * step).exp();
                }
                let t_final = trans[k];
                // suffix = Σ_{j>i} Tⱼ αⱼ cⱼ + T_{K+1} c_bg
                let mut suffix = tape.background.map(|b| t_final * b);
                for i in (0..k).rev() {
                    let s = &samples[i];
                    let alpha = -(-s.sigma * step).exp_m1();
                    let c = if s.shaded { s.color } else { [0.0; 3] };
                    let mut d_sigma = -gt * t_final;
                    for ch in 0..3 {
                        d_sigma += gc[ch] * (trans[i + 1] * c[ch] - suffix[ch]);
                    }
                    d_sigma *= step;
                    let d_raw = d_sigma * softplus_grad(s.raw + bias);
                    if d_raw != 0.0 {
                        for (node, w) in lattice.stencil(s.pos).iter() {
                            grad.density[node] += w * d_raw;
                        }
                    }
                    let w = trans[i] * alpha;
                    if s.shaded && w != 0.0 {
                        let g_color = gc.map(|g| g * w);
                        color_eval.color(s.pos, &mut scratch);
                        color_eval.backward(&mut scratch, g_color, &mut grad.mlp);
                    }
                    for ch in 0..3 {
                        suffix[ch] += w * c[ch];
                    }
                }
            }
            grad
        })
        .collect();

    let mut total = FieldGrad::zeros(field);
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel_field::FieldConfig;

    fn small_field(n: usize) -> VoxelField {
        let lattice = Lattice::centered_cube(n, 1.0).unwrap();
        let cfg = FieldConfig {
            hidden_widths: vec![8],
            encoding_levels: 1,
            seed: 3,
        };
        VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap()
    }

    #[test]
    fn empty_scene_shows_background() {
        let field = small_field(8);
        let cam = Camera::orbit(20.0, 25.0, 4.0, 40.0, 6, 5).unwrap();
        let settings = RenderSettings {
            samples_per_ray: 64,
            background: [0.2, 0.4, 0.9],
            ..RenderSettings::bracketing(field.lattice(), 4.0, 64)
        };
        let out = render(&field, &cam, &settings).unwrap();
        // Each sample inside the grid attenuates by at most α_init per voxel length.
        let bound = 64.0 * 1e-6 * settings.step() / field.lattice().voxel_size();
        for (p, t) in out.rgb.data().chunks(3).zip(&out.transmittance) {
            assert!(1.0 - t <= bound && *t <= 1.0);
            for c in 0..3 {
                assert!((p[c] - settings.background[c]).abs() <= bound);
            }
        }
    }

    #[test]
    fn single_segment_alpha() {
        let alpha = -(-1.0f64 * 1.0).exp_m1();
        assert!((alpha - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn zero_adjoints_give_zero_gradients() {
        let mut field = small_field(6);
        field.density_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 5) as f32 * 3.0);
        let cam = Camera::orbit(0.0, 20.0, 4.0, 40.0, 4, 4).unwrap();
        let settings = RenderSettings::bracketing(field.lattice(), 4.0, 16);
        let out = render(&field, &cam, &settings).unwrap();
        let g = render_backward(&field, &out.tape, &[0.0; 48], &[0.0; 16]).unwrap();
        assert!(g.density.iter().chain(&g.mlp).all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let field = small_field(4);
        let cam = Camera::orbit(0.0, 20.0, 4.0, 40.0, 4, 4).unwrap();
        let out = render(&field, &cam, &RenderSettings::bracketing(field.lattice(), 4.0, 8)).unwrap();
        assert!(matches!(
            render_backward(&field, &out.tape, &[0.0; 47], &[0.0; 16]),
            Err(Error::Parameter(_))
        ));
        let other = small_field(5);
        assert!(render_backward(&other, &out.tape, &[0.0; 48], &[0.0; 16]).is_err());
    }

    #[test]
    fn render_is_deterministic() {
        let mut field = small_field(8);
        field.density_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7) % 13) as f32);
        let cam = Camera::orbit(40.0, 25.0, 4.0, 40.0, 8, 8).unwrap();
        let settings = RenderSettings {
            jitter: true,
            jitter_seed: 17,
            ..RenderSettings::bracketing(field.lattice(), 4.0, 24)
        };
        let a = render(&field, &cam, &settings).unwrap();
        let b = render(&field, &cam, &settings).unwrap();
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.transmittance, b.transmittance);
    }
}
