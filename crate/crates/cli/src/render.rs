use std::path::PathBuf;

use clap::Args;
use priorfield::sdf_prior::DEFAULT_BETA;
use priorfield::{render, Camera, FieldConfig, RenderSettings, VoxelField};

use crate::error::CliResult;
use crate::files::{load_scene, parse_vec3, write_png, Scene};

#[derive(Args)]
pub struct RenderArgs {
    /// VFLD checkpoint or SDFG prior.
    #[arg(long, alias = "checkpoint")]
    input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 25.0, allow_negative_numbers = true)]
    elevation: f64,
    /// Distance from the camera to the origin.
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 40.0)]
    fov: f64,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Samples per ray.
    #[arg(long, default_value_t = 192)]
    samples: usize,
    /// Background color, as r,g,b in [0, 1].
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    background: [f64; 3],
    /// Surface sharpness used when the input is an SDFG prior.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Empty-space opacity used when the input is an SDFG prior.
    #[arg(long, default_value_t = 1e-6)]
    alpha_init: f64,
    /// Color network seed used when the input is an SDFG prior.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A scene as a field; priors get a freshly initialized color network.
pub fn scene_field(scene: Scene, beta: f64, alpha_init: f64, seed: u64) -> CliResult<VoxelField> {
    Ok(match scene {
        Scene::Field(f) => f,
        Scene::Prior(sdf) => {
            let cfg = FieldConfig {
                seed,
                ..FieldConfig::default()
            };
            VoxelField::init_from_prior(&sdf, beta, alpha_init, &cfg)?
        }
    })
}

pub fn run(args: RenderArgs) -> CliResult {
    let field = scene_field(load_scene(&args.input)?, args.beta, args.alpha_init, args.seed)?;
    let cam = Camera::orbit(args.azimuth, args.elevation, args.radius, args.fov, args.width, args.height)?;
    let settings = RenderSettings {
        background: args.background,
        ..RenderSettings::bracketing(field.lattice(), args.radius, args.samples)
    };
    let out = render(&field, &cam, &settings)?;
    write_png(&args.out, &out.rgb)?;
    Ok(())
}
