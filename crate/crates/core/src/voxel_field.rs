//! The optimizable scene: a raw density grid queried with post-activation
//! (trilinear interpolation, then shifted softplus) and a shallow color MLP
//! on positionally encoded coordinates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::activation::{softplus, softplus_grad};
use crate::binio;
use crate::error::{Error, Result};
use crate::grid::{Lattice, Stencil};
use crate::mlp::{Activation, Mlp, MlpEval, MlpScratch};
use crate::rng::{RngStreams, Stream};
use crate::sdf_prior::{sdf_to_density, SdfGrid};

/// Opacity at which a voxel-length step through an empty field terminates.
pub const DEFAULT_ALPHA_INIT: f64 = 1e-6;

/// Shape of the color network and its input encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub hidden_widths: Vec<usize>,
    pub encoding_levels: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 64],
            encoding_levels: 4,
            seed: 0,
        }
    }
}

pub fn encoding_width(levels: usize) -> usize {
    3 + 6 * levels
}

/// `x ⊕ [sin(2ᵏπx), cos(2ᵏπx)]ₖ` for `k = 0..levels`, written into `out`.
/// `x` is expected in normalized `[-1, 1]` coordinates.
pub fn positional_encoding_into(x: [f64; 3], levels: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoding_width(levels));
    out[..3].copy_from_slice(&x);
    let mut freq = std::f64::consts::PI;
    for k in 0..levels {
        let base = 3 + 6 * k;
        for a in 0..3 {
            let (s, c) = (freq * x[a]).sin_cos();
            out[base + a] = s;
            out[base + 3 + a] = c;
        }
        freq *= 2.0;
    }
}

pub fn positional_encoding(x: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoding_width(levels)];
    positional_encoding_into(x, levels, &mut out);
    out
}

/// Shift `b` that makes a zero raw density transmit `1 - alpha_init` over a
/// path of length `s`: `b = ln((1 - alpha_init)^(-1/s) - 1)`.
pub fn transparent_bias(alpha_init: f64, s: f64) -> Result<f64> {
    if !(alpha_init > 0.0 && alpha_init < 1.0) {
        return Err(Error::param(format!(
            "alpha_init must lie in (0, 1), got {alpha_init}"
        )));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::param(format!("step length must be positive, got {s}")));
    }
    // (1 - a)^(-1/s) - 1 = expm1(-ln(1 - a) / s)
    let b = (-(-alpha_init).ln_1p() / s).exp_m1().ln();
    if !b.is_finite() {
        return Err(Error::Numerical(format!(
            "density bias overflowed for alpha_init={alpha_init}, s={s}"
        )));
    }
    Ok(b)
}

/// Gradients with respect to every field parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub density: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(field: &VoxelField) -> Self {
        Self {
            density: vec![0.0; field.density.len()],
            mlp: vec![0.0; field.color_mlp.num_params()],
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.density.iter_mut().for_each(|g| *g *= k);
        self.mlp.iter_mut().for_each(|g| *g *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(&self.mlp).all(|g| g.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    lattice: Lattice,
    /// Raw (pre-activation) density at each lattice node.
    density: Vec<f32>,
    color_mlp: Mlp,
    bias: f64,
    encoding_levels: usize,
    seed: u64,
}

impl VoxelField {
    pub fn new(
        lattice: Lattice,
        density: Vec<f32>,
        color_mlp: Mlp,
        bias: f64,
        encoding_levels: usize,
        seed: u64,
    ) -> Result<Self> {
        if density.len() != lattice.len() {
            return Err(Error::param(format!(
                "density grid has {} values, lattice needs {}",
                density.len(),
                lattice.len()
            )));
        }
        if density.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::param("density grid and bias must be finite"));
        }
        if color_mlp.input_width() != encoding_width(encoding_levels)
            || color_mlp.output_width() != 3
        {
            return Err(Error::param(format!(
                "color MLP must map {} inputs to 3 outputs, has {} -> {}",
                encoding_width(encoding_levels),
                color_mlp.input_width(),
                color_mlp.output_width()
            )));
        }
        Ok(Self {
            lattice,
            density,
            color_mlp,
            bias,
            encoding_levels,
            seed,
        })
    }

    /// Color network with the configured widths and seeded Glorot init.
    pub fn color_network(config: &FieldConfig) -> Result<Mlp> {
        let mut widths = vec![encoding_width(config.encoding_levels)];
        widths.extend(&config.hidden_widths);
        widths.push(3);
        let mut rng = RngStreams::new(config.seed).stream(Stream::MlpInit);
        Mlp::glorot(&widths, Activation::Relu, Activation::Sigmoid, &mut rng)
    }

    /// Empty scene: raw grid of zeros and the bias that makes it transparent.
    pub fn init_transparent(lattice: Lattice, alpha_init: f64, config: &FieldConfig) -> Result<Self> {
        let bias = transparent_bias(alpha_init, lattice.voxel_size())?;
        Self::new(
            lattice,
            vec![0.0; lattice.len()],
            Self::color_network(config)?,
            bias,
            config.encoding_levels,
            config.seed,
        )
    }

    /// Scene whose density reproduces the prior's surface.
    pub fn init_from_prior(
        sdf: &SdfGrid,
        beta: f64,
        alpha_init: f64,
        config: &FieldConfig,
    ) -> Result<Self> {
        let lattice = *sdf.lattice();
        let bias = transparent_bias(alpha_init, lattice.voxel_size())?;
        let raw = sdf_to_density(sdf, beta, bias)?;
        Self::new(
            lattice,
            raw.into_iter().map(|v| v as f32).collect(),
            Self::color_network(config)?,
            bias,
            config.encoding_levels,
            config.seed,
        )
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn density(&self) -> &[f32] {
        &self.density
    }

    pub fn density_mut(&mut self) -> &mut [f32] {
        &mut self.density
    }

    pub fn color_mlp(&self) -> &Mlp {
        &self.color_mlp
    }

    pub fn color_mlp_mut(&mut self) -> &mut Mlp {
        &mut self.color_mlp
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn encoding_levels(&self) -> usize {
        self.encoding_levels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Both parameter buffers, for the optimizer.
    pub fn params_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (&mut self.density, self.color_mlp.params_mut())
    }

    pub fn stencil(&self, x: [f64; 3]) -> Stencil {
        self.lattice.stencil(x)
    }

    /// Trilinearly interpolated raw density (0 outside the lattice).
    pub fn raw_density(&self, x: [f64; 3]) -> f64 {
        self.stencil(x).interpolate(&self.density)
    }

    /// `σ = softplus(interp(raw) + b)`.
    pub fn query_density(&self, x: [f64; 3]) -> f64 {
        softplus(self.raw_density(x) + self.bias)
    }

    /// Spatial gradient of σ.
    pub fn density_gradient(&self, x: [f64; 3]) -> [f64; 3] {
        let st = self.stencil(x);
        let k = softplus_grad(st.interpolate(&self.density) + self.bias);
        st.gradient(&self.density).map(|g| g * k)
    }

    pub fn query_color(&self, x: [f64; 3]) -> [f64; 3] {
        let enc = positional_encoding(self.lattice.normalize(x), self.encoding_levels);
        let c = self.color_mlp.forward(&enc);
        [c[0], c[1], c[2]]
    }

    /// Per-voxel opacity `1 - exp(-softplus(raw + b) * s)` for a raw value.
    pub fn opacity_of_raw(&self, raw: f64) -> f64 {
        let sigma = softplus(raw + self.bias);
        -(-sigma * self.lattice.voxel_size()).exp_m1()
    }

    pub(crate) fn color_evaluator(&self) -> ColorEval {
        ColorEval {
            mlp: self.color_mlp.evaluator(),
            lattice: self.lattice,
            levels: self.encoding_levels,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, VFLD_MAGIC, VFLD_VERSION)?;
        binio::write_sdfg(w, &self.lattice, &self.density)?;
        let shapes = self.color_mlp.shapes();
        w.write_u32::<LittleEndian>(shapes.len() as u32)?;
        for &(o, i) in shapes {
            w.write_u32::<LittleEndian>(o as u32)?;
            w.write_u32::<LittleEndian>(i as u32)?;
        }
        binio::write_f32s(w, self.color_mlp.params())?;
        w.write_f64::<LittleEndian>(self.bias)?;
        w.write_u32::<LittleEndian>(self.encoding_levels as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        const KIND: &str = "VFLD";
        binio::read_header(r, KIND, VFLD_MAGIC, VFLD_VERSION)?;
        let (lattice, density) = binio::read_sdfg(r)?;
        let layers = binio::read_u32(r, KIND)? as usize;
        if layers == 0 || layers > 64 {
            return Err(Error::format(KIND, format!("implausible layer count {layers}")));
        }
        let mut shapes = Vec::with_capacity(layers);
        let mut n = 0u64;
        for _ in 0..layers {
            let o = binio::read_u32(r, KIND)? as usize;
            let i = binio::read_u32(r, KIND)? as usize;
            n += (o * i + o) as u64;
            shapes.push((o, i));
        }
        let params = binio::read_f32s(r, binio::checked_count(n, KIND)?, KIND)?;
        let bias = binio::read_f64(r, KIND)?;
        let levels = binio::read_u32(r, KIND)? as usize;
        let seed = binio::read_u64(r, KIND)?;
        let mlp = Mlp::from_parts(shapes, params, Activation::Relu, Activation::Sigmoid)
            .map_err(|e| Error::format(KIND, e.to_string()))?;
        Self::new(lattice, density, mlp, bias, levels, seed)
            .map_err(|e| Error::format(KIND, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

const VFLD_MAGIC: &[u8; 4] = b"VFLD";
const VFLD_VERSION: u32 = 1;

/// Color network prepared for many evaluations.
pub(crate) struct ColorEval {
    pub mlp: MlpEval,
    lattice: Lattice,
    levels: usize,
}

pub(crate) struct ColorScratch {
    pub mlp: MlpScratch,
    enc: Vec<f64>,
}

impl ColorEval {
    pub fn scratch(&self) -> ColorScratch {
        ColorScratch {
            mlp: self.mlp.scratch(),
            enc: vec![0.0; encoding_width(self.levels)],
        }
    }

    pub fn color(&self, x: [f64; 3], scratch: &mut ColorScratch) -> [f64; 3] {
        positional_encoding_into(self.lattice.normalize(x), self.levels, &mut scratch.enc);
        let ColorScratch { mlp, enc } = scratch;
        let c = self.mlp.forward(enc, mlp);
        [c[0], c[1], c[2]]
    }

    /// Accumulates `grad_color · dc/dθ` for the last evaluated position.
    pub fn backward(&self, scratch: &mut ColorScratch, grad_color: [f64; 3], grad: &mut [f64]) {
        self.mlp.backward(&mut scratch.mlp, &grad_color, grad, None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf_prior::{make_primitive_sdf, PrimitiveSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            hidden_widths: vec![16, 16],
            encoding_levels: 2,
            seed: 9,
        }
    }

    #[test]
    fn encoding_shapes_and_values() {
        assert_eq!(positional_encoding([0.3, -0.2, 0.9], 0), vec![0.3, -0.2, 0.9]);
        assert_eq!(positional_encoding([0.1; 3], 4).len(), 27);
        let e = positional_encoding([0.0; 3], 3);
        for k in 0..3 {
            assert_eq!(&e[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&e[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
    }

    #[test]
    fn transparent_bias_matches_direct_evaluation() {
        let b = transparent_bias(1e-6, 1.0).unwrap();
        let direct = ((1.0f64 - 1e-6).powf(-1.0) - 1.0).ln();
        assert!((b - direct).abs() < 1e-6);
        assert!((b + 13.8155).abs() < 1e-4);
        assert!(transparent_bias(0.0, 1.0).is_err());
        assert!(transparent_bias(1.0, 1.0).is_err());
    }

    #[test]
    fn bias_increases_with_alpha_init() {
        let mut prev = f64::NEG_INFINITY;
        for k in 1..200 {
            let a = k as f64 / 200.0;
            let b = transparent_bias(a, 0.1).unwrap();
            assert!(b > prev);
            prev = b;
        }
    }

    proptest! {
        #[test]
        fn transparent_identity(alpha in 1e-9f64..0.9, s in 1e-3f64..10.0) {
            let b = transparent_bias(alpha, s).unwrap();
            let recovered = -(-softplus(b) * s).exp_m1();
            prop_assert!((recovered - alpha).abs() < 1e-10 * alpha.max(1e-3));
        }
    }

    #[test]
    fn density_at_node_is_stored_value_and_all_zero_gives_unit_sigma() {
        let lattice = Lattice::centered_cube(6, 1.0).unwrap();
        let cfg = small_config();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &cfg).unwrap();
        let bias_one = (1f64.exp() - 1.0).ln();
        field.bias = bias_one;
        for p in [[0.0, 0.0, 0.0], [0.7, -0.3, 0.2]] {
            assert!((field.query_density(p) - 1.0).abs() < 1e-12);
        }
        for (n, v) in field.density_mut().iter_mut().enumerate() {
            *v = (n % 7) as f32 * 0.5;
        }
        for idx in [0, 17, 100, 215] {
            let x = lattice.center_of(idx);
            assert_eq!(field.raw_density(x), field.density()[idx] as f64);
        }
    }

    #[test]
    fn edge_midpoint_interpolates_linearly() {
        let lattice = Lattice::new([4, 4, 4], [0.0; 3], 1.0).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        let a = lattice.index(1, 1, 1);
        let b = lattice.index(2, 1, 1);
        field.density_mut()[b] = 4.0;
        let mid = [2.0, 1.5, 1.5];
        assert_eq!(field.density()[a], 0.0);
        assert!((field.raw_density(mid) - 2.0).abs() < 1e-12);
        let expect = softplus(2.0 + field.bias());
        assert!((field.query_density(mid) - expect).abs() < 1e-12);
    }

    #[test]
    fn spatial_gradient_matches_central_differences() {
        let lattice = Lattice::centered_cube(8, 1.0).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in field.density_mut() {
            *v = rng.gen_range(0.0..20.0);
        }
        let s = lattice.voxel_size();
        let h = 1e-4 * s;
        let mut checked = 0;
        while checked < 200 {
            let x = [0, 1, 2].map(|_| rng.gen_range(-0.9..0.9));
            // Skip points too close to a cell boundary where the derivative jumps.
            let near_boundary = x.iter().any(|&c| {
                let u = (c + 1.0) / s - 0.5;
                (u - u.round()).abs() < 1e-2
            });
            if near_boundary {
                continue;
            }
            let g = field.density_gradient(x);
            for a in 0..3 {
                let mut xp = x;
                xp[a] += h;
                let mut xm = x;
                xm[a] -= h;
                let fd = (field.query_density(xp) - field.query_density(xm)) / (2.0 * h);
                let rel = (fd - g[a]).abs() / fd.abs().max(g[a].abs()).max(1e-12);
                assert!(rel < 1e-3 || (fd - g[a]).abs() < 1e-9, "fd {fd} vs {}", g[a]);
            }
            checked += 1;
        }
    }

    #[test]
    fn node_gradient_is_weight_times_softplus_slope() {
        let lattice = Lattice::centered_cube(5, 1.0).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in field.density_mut() {
            *v = rng.gen_range(5.0..15.0);
        }
        let x = [0.13, -0.27, 0.31];
        let st = field.stencil(x);
        let slope = softplus_grad(field.raw_density(x) + field.bias());
        for (node, w) in st.iter() {
            let mut plus = field.clone();
            plus.density_mut()[node] += 1e-3;
            let mut minus = field.clone();
            minus.density_mut()[node] -= 1e-3;
            let step = plus.density()[node] as f64 - minus.density()[node] as f64;
            let fd = (plus.query_density(x) - minus.query_density(x)) / step;
            let analytic = w * slope;
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs() + 1e-12);
        }
    }

    #[test]
    fn color_is_bounded_and_half_for_zero_network() {
        let lattice = Lattice::centered_cube(4, 1.0).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &FieldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x = [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0));
            let c = field.query_color(x);
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        field.color_mlp_mut().params_mut().fill(0.0);
        assert_eq!(field.query_color([0.2, 0.1, -0.4]), [0.5; 3]);
    }

    #[test]
    fn density_is_strictly_positive() {
        let lattice = Lattice::centered_cube(4, 1.0).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        field.density_mut().fill(-50.0);
        assert!(field.query_density([0.0; 3]) > 0.0);
        assert!(field.query_density([10.0, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn prior_initialization_preserves_surface_density() {
        let sdf = make_primitive_sdf(
            &PrimitiveSpec::Sphere {
                center: [0.0; 3],
                radius: 0.5,
            },
            [32; 3],
            [-1.0; 3],
            2.0 / 32.0,
        )
        .unwrap();
        let field = VoxelField::init_from_prior(&sdf, 0.05, 1e-6, &small_config()).unwrap();
        let node = field.lattice().index(24, 16, 16);
        let at_node = softplus(field.density()[node] as f64 + field.bias());
        let sdf_node = sdf.values()[node] as f64;
        assert!((at_node - crate::sdf_prior::sdf_density(sdf_node, 0.05)).abs() < 1e-3);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let lattice = Lattice::new([5, 4, 3], [-0.3, 0.2, 0.1], 0.17).unwrap();
        let mut field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in field.density_mut() {
            *v = rng.gen_range(-3.0..30.0);
        }
        let mut buf = Vec::new();
        field.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VFLD");
        assert_eq!(&buf[8..12], b"SDFG");
        let back = VoxelField::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, field);
        assert_eq!(back.bias().to_bits(), field.bias().to_bits());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let lattice = Lattice::centered_cube(3, 1.0).unwrap();
        let field = VoxelField::init_transparent(lattice, 1e-6, &small_config()).unwrap();
        let mut buf = Vec::new();
        field.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(VoxelField::read_from(&mut buf.as_slice()).is_err());
    }
}
