use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RenderOutput;
use crate::error::{Error, Result};
use crate::image::Image;

const CHECKER_CELL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    SolidRandom,
    White,
    /// 8-pixel cells in two random colors.
    Checkerboard,
    /// Per-pixel `N(0.5, 0.25²)` clamped to `[0, 1]`.
    GaussianNoise,
}

impl AugmentMode {
    pub const ALL: [AugmentMode; 4] = [
        AugmentMode::SolidRandom,
        AugmentMode::White,
        AugmentMode::Checkerboard,
        AugmentMode::GaussianNoise,
    ];
}

#[derive(Clone, Debug)]
pub struct AugmentedImage {
    pub image: Image,
    pub background: Image,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn background_image<R: Rng + ?Sized>(rng: &mut R, mode: AugmentMode, w: usize, h: usize) -> Image {
    match mode {
        AugmentMode::White => Image::filled(w, h, [1.0; 3]),
        AugmentMode::SolidRandom => Image::filled(w, h, random_color(rng)),
        AugmentMode::Checkerboard => {
            let a = random_color(rng);
            let b = random_color(rng);
            let mut img = Image::filled(w, h, a);
            for y in 0..h {
                for x in 0..w {
                    if (x / CHECKER_CELL + y / CHECKER_CELL) % 2 == 1 {
                        let o = 3 * (y * w + x);
                        img.data_mut()[o..o + 3].copy_from_slice(&b);
                    }
                }
            }
            img
        }
        AugmentMode::GaussianNoise => {
            let normal = Normal::new(0.5f64, 0.25).expect("valid normal");
            let data = (0..w * h * 3)
                .map(|_| normal.sample(rng).clamp(0.0, 1.0))
                .collect();
            Image::new(w, h, data).expect("sized to the render")
        }
    }
}

/// Replaces the render's background with a freshly drawn one:
/// `rgb − T·c_bg + T·bg_image`.
pub fn background_augment<R: Rng + ?Sized>(
    output: &RenderOutput,
    rng: &mut R,
    mode: AugmentMode,
) -> AugmentedImage {
    let (w, h) = (output.rgb.width(), output.rgb.height());
    let background = background_image(rng, mode, w, h);
    let mut image = output.foreground();
    for ((px, bg), t) in image
        .data_mut()
        .chunks_exact_mut(3)
        .zip(background.data().chunks_exact(3))
        .zip(&output.transmittance)
    {
        for c in 0..3 {
            px[c] += t * bg[c];
        }
    }
    AugmentedImage { image, background }
}

/// Pulls an image adjoint back through [`background_augment`], returning
/// `(dL_drgb, dL_dtransmittance)` ready for `render_backward`.
pub fn augment_backward(
    output: &RenderOutput,
    augmented: &AugmentedImage,
    dl_dimage: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dl_dimage.len() != output.rgb.data().len() || !augmented.background.same_shape(&output.rgb) {
        return Err(Error::param("augmentation adjoint does not match the render"));
    }
    let c_bg = output.tape.background();
    let dl_dt = dl_dimage
        .chunks_exact(3)
        .zip(augmented.background.data().chunks_exact(3))
        .map(|(g, bg)| (0..3).map(|c| g[c] * (bg[c] - c_bg[c])).sum())
        .collect();
    Ok((dl_dimage.to_vec(), dl_dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;
    use crate::renderer::{render, Camera, RenderSettings};
    use crate::voxel_field::{FieldConfig, VoxelField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn output(raw: f32) -> RenderOutput {
        let lattice = Lattice::centered_cube(6, 1.0).unwrap();
        let cfg = FieldConfig {
            hidden_widths: vec![4],
            encoding_levels: 1,
            seed: 1,
        };
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap();
        field.density_mut().fill(raw);
        let cam = Camera::orbit(0.0, 0.0, 4.0, 10.0, 16, 16).unwrap();
        render(&field, &cam, &RenderSettings::bracketing(field.lattice(), 4.0, 32)).unwrap()
    }

    #[test]
    fn opaque_render_ignores_mode() {
        let out = output(1e4);
        assert!(out.transmittance.iter().all(|&t| t == 0.0));
        let images: Vec<_> = AugmentMode::ALL
            .iter()
            .map(|&m| background_augment(&out, &mut ChaCha8Rng::seed_from_u64(2), m).image)
            .collect();
        for img in &images[1..] {
            assert_eq!(img, &images[0]);
        }
    }

    #[test]
    fn clear_render_on_white_is_white() {
        let mut out = output(0.0);
        out.transmittance.fill(1.0);
        out.rgb = Image::filled(16, 16, out.tape.background());
        let img = background_augment(&out, &mut ChaCha8Rng::seed_from_u64(0), AugmentMode::White).image;
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backgrounds_are_seeded() {
        let out = output(0.0);
        for mode in AugmentMode::ALL {
            let a = background_augment(&out, &mut ChaCha8Rng::seed_from_u64(9), mode);
            let b = background_augment(&out, &mut ChaCha8Rng::seed_from_u64(9), mode);
            assert_eq!(a.background, b.background);
            assert!(a.background.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn checkerboard_cells() {
        let out = output(0.0);
        let bg = background_augment(&out, &mut ChaCha8Rng::seed_from_u64(4), AugmentMode::Checkerboard)
            .background;
        assert_eq!(bg.pixel(0, 0), bg.pixel(7, 7));
        assert_eq!(bg.pixel(8, 8), bg.pixel(0, 0));
        assert_ne!(bg.pixel(8, 0), bg.pixel(0, 0));
        assert_eq!(bg.pixel(8, 0), bg.pixel(0, 8));
    }

    #[test]
    fn backward_matches_linear_map() {
        let out = output(0.3);
        let aug = background_augment(&out, &mut ChaCha8Rng::seed_from_u64(3), AugmentMode::GaussianNoise);
        let g: Vec<f64> = (0..out.rgb.data().len()).map(|i| (i % 7) as f64 - 3.0).collect();
        let (drgb, dt) = augment_backward(&out, &aug, &g).unwrap();
        assert_eq!(drgb, g);
        // image is affine in T: check against a perturbed transmittance.
        let mut bumped = out.clone();
        let h = 1e-3;
        bumped.transmittance[5] += h;
        let aug2 = AugmentedImage {
            image: {
                let mut img = bumped.foreground();
                for ((px, bg), t) in img
                    .data_mut()
                    .chunks_exact_mut(3)
                    .zip(aug.background.data().chunks_exact(3))
                    .zip(&bumped.transmittance)
                {
                    for c in 0..3 {
                        px[c] += t * bg[c];
                    }
                }
                img
            },
            background: aug.background.clone(),
        };
        let dl: f64 = aug2
            .image
            .data()
            .iter()
            .zip(aug.image.data())
            .zip(&g)
            .map(|((a, b), g)| g * (a - b))
            .sum();
        assert!((dl / h - dt[5]).abs() < 1e-9);
    }
}
