use priorfield::renderer::{render, render_backward, Camera, RenderSettings};
use priorfield::{FieldConfig, Lattice, VoxelField};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(n: usize, seed: u64) -> VoxelField {
    let lattice = Lattice::centered_cube(n, 1.0).unwrap();
    let cfg = FieldConfig {
        hidden_widths: vec![8, 8],
        encoding_levels: 2,
        seed,
    };
    let mut field = VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap();
    let shift = -field.bias();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in field.density_mut() {
        *v = (shift + rng.gen_range(-1.0..2.5)) as f32;
    }
    for p in field.color_mlp_mut().params_mut() {
        *p += rng.gen_range(-0.2..0.2);
    }
    field
}

fn set_constant_color(field: &mut VoxelField, c: [f64; 3]) {
    let mlp = field.color_mlp_mut();
    let last = mlp.shapes().len() - 1;
    let (out, inp) = mlp.shapes()[last];
    let bias_at = mlp.layer_offset(last) + out * inp;
    let params = mlp.params_mut();
    params.fill(0.0);
    for ch in 0..3 {
        params[bias_at + ch] = (c[ch] / (1.0 - c[ch])).ln() as f32;
    }
}

struct Adjoint {
    pixels: Vec<f64>,
    trans: Vec<f64>,
}

impl Adjoint {
    fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            pixels: (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            trans: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn loss(&self, field: &VoxelField, cam: &Camera, s: &RenderSettings) -> f64 {
        let out = render(field, cam, s).unwrap();
        let a: f64 = out.rgb.data().iter().zip(&self.pixels).map(|(x, g)| x * g).sum();
        let b: f64 = out.transmittance.iter().zip(&self.trans).map(|(x, g)| x * g).sum();
        a + b
    }
}

fn check(analytic: f64, numeric: f64, what: &str) {
    if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
        return;
    }
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
    assert!(rel < 1e-4, "{what}: analytic {analytic} vs numeric {numeric} (rel {rel})");
}

fn fd_setup() -> (VoxelField, Camera, RenderSettings, Adjoint) {
    let field = random_field(16, 11);
    let cam = Camera::orbit(35.0, 25.0, 4.0, 40.0, 8, 8).unwrap();
    let settings = RenderSettings {
        background: [0.3, 0.6, 0.9],
        ..RenderSettings::bracketing(field.lattice(), 4.0, 48)
    };
    let adj = Adjoint::random(64, 5);
    (field, cam, settings, adj)
}

#[test]
fn density_gradients_match_finite_differences() {
    let (mut field, cam, settings, adj) = fd_setup();
    let out = render(&field, &cam, &settings).unwrap();
    let grad = render_backward(&field, &out.tape, &adj.pixels, &adj.trans).unwrap();
    let mut nonzero = 0;
    for node in 0..field.density().len() {
        let p = field.density()[node];
        let plus = p + 1e-3;
        let minus = p - 1e-3;
        field.density_mut()[node] = plus;
        let lp = adj.loss(&field, &cam, &settings);
        field.density_mut()[node] = minus;
        let lm = adj.loss(&field, &cam, &settings);
        field.density_mut()[node] = p;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        check(grad.density[node], numeric, &format!("node {node}"));
        if grad.density[node] != 0.0 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 200, "only {nonzero} nodes were reached by rays");
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let (mut field, cam, settings, adj) = fd_setup();
    let out = render(&field, &cam, &settings).unwrap();
    let grad = render_backward(&field, &out.tape, &adj.pixels, &adj.trans).unwrap();
    let mlp = field.color_mlp();
    let output_layer = mlp.layer_offset(mlp.shapes().len() - 1);
    for i in 0..mlp.num_params() {
        // Parameters feeding a ReLU take a step small enough that no sample's
        // activation pattern flips inside the stencil.
        let h = if i >= output_layer { 1e-3 } else { 1e-6 };
        let p = field.color_mlp().params()[i];
        let plus = p + h;
        let minus = p - h;
        field.color_mlp_mut().params_mut()[i] = plus;
        let lp = adj.loss(&field, &cam, &settings);
        field.color_mlp_mut().params_mut()[i] = minus;
        let lm = adj.loss(&field, &cam, &settings);
        field.color_mlp_mut().params_mut()[i] = p;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        check(grad.mlp[i], numeric, &format!("mlp param {i}"));
    }
}

#[test]
fn opaque_slab_shows_its_color() {
    let lattice = Lattice::centered_cube(16, 1.0).unwrap();
    let cfg = FieldConfig::default();
    let mut field = VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap();
    let c = [0.8, 0.25, 0.4];
    set_constant_color(&mut field, c);
    let lat = *field.lattice();
    for idx in 0..lat.len() {
        if lat.center_of(idx)[0].abs() < 0.2 {
            field.density_mut()[idx] = 1e4;
        }
    }
    let cam = Camera::new([4.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 8.0, 6, 6).unwrap();
    let settings = RenderSettings {
        background: [0.0, 1.0, 0.0],
        ..RenderSettings::bracketing(field.lattice(), 4.0, 96)
    };
    let out = render(&field, &cam, &settings).unwrap();
    for (ray, (px, t)) in out.rgb.data().chunks(3).zip(&out.transmittance).enumerate() {
        assert!(*t < 1e-4);
        for ch in 0..3 {
            assert!((px[ch] - c[ch]).abs() < 1e-4, "pixel {ray}: {px:?}");
        }
        // Brute-force compositing of the recorded samples.
        let step = settings.step();
        let mut trans = 1.0;
        let mut acc = [0.0; 3];
        for (pos, sigma) in out.tape.ray_samples(ray) {
            let alpha = 1.0 - (-sigma * step).exp();
            let col = field.query_color(pos);
            for ch in 0..3 {
                acc[ch] += trans * alpha * col[ch];
            }
            trans *= 1.0 - alpha;
        }
        for ch in 0..3 {
            acc[ch] += trans * settings.background[ch];
            assert!((acc[ch] - px[ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn transparent_field_is_background() {
    let lattice = Lattice::centered_cube(12, 1.0).unwrap();
    let field = VoxelField::init_transparent(lattice, 1e-6, &FieldConfig::default()).unwrap();
    let cam = Camera::orbit(0.0, 25.0, 4.0, 40.0, 10, 10).unwrap();
    let settings = RenderSettings {
        background: [0.1, 0.5, 0.7],
        ..RenderSettings::bracketing(field.lattice(), 4.0, 128)
    };
    let out = render(&field, &cam, &settings).unwrap();
    let bound = 128.0 * 1e-6;
    for (px, t) in out.rgb.data().chunks(3).zip(&out.transmittance) {
        assert!(*t <= 1.0 && 1.0 - t < bound);
        for ch in 0..3 {
            assert!((px[ch] - settings.background[ch]).abs() < bound);
        }
    }
}

/// Smooth blob of density centered off-axis.
fn blob_field() -> VoxelField {
    let lattice = Lattice::centered_cube(24, 1.0).unwrap();
    let cfg = FieldConfig {
        hidden_widths: vec![16],
        encoding_levels: 2,
        seed: 2,
    };
    let mut field = VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap();
    let lat = *field.lattice();
    let bias = field.bias();
    for idx in 0..lat.len() {
        let p = lat.center_of(idx);
        let r2 = (p[0] - 0.1).powi(2) + (p[1] + 0.2).powi(2) + p[2].powi(2);
        // σ ≈ 3·exp(−r²/0.2)
        let sigma = 3.0 * (-r2 / 0.2).exp() + 1e-9;
        field.density_mut()[idx] = (priorfield::activation::softplus_inv(sigma) - bias) as f32;
    }
    field
}

#[test]
fn doubling_samples_halves_the_error() {
    let field = blob_field();
    let cam = Camera::orbit(20.0, 25.0, 4.0, 20.0, 12, 12).unwrap();
    // Clipping planes cut through the blob so the integrand is non-zero at
    // both ends of every ray; otherwise the left rule's leading error term
    // cancels and the sweep measures a second-order rate instead.
    let base = RenderSettings {
        near: 3.7,
        far: 4.3,
        ..RenderSettings::default()
    };
    let at = |k: usize| {
        render(&field, &cam, &RenderSettings { samples_per_ray: k, ..base.clone() })
            .unwrap()
            .rgb
    };
    let reference = at(16384);
    let err = |k: usize| {
        let img = at(k);
        img.data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / img.data().len() as f64
    };
    let errs: Vec<f64> = [48, 96, 192, 384].iter().map(|&k| err(k)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.4..=2.6).contains(&ratio), "errors {errs:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_is_conserved_and_transmittance_decays(seed in 0u64..1000, k in 2usize..40, az in -90.0f64..90.0) {
        let field = random_field(6, seed);
        let cam = Camera::orbit(az, 25.0, 4.0, 40.0, 5, 4).unwrap();
        let settings = RenderSettings::bracketing(field.lattice(), 4.0, k);
        let out = render(&field, &cam, &settings).unwrap();
        for ray in 0..20 {
            let w = out.tape.ray_weights(ray);
            let total: f64 = w.iter().sum::<f64>() + out.transmittance[ray];
            prop_assert!((total - 1.0).abs() < 1e-10);
            let mut t = 1.0;
            for wi in &w {
                let next = t - wi;
                prop_assert!(next <= t);
                t = next;
            }
        }
        prop_assert!(out.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(out.transmittance.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
