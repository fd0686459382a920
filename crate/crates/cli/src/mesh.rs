use std::path::PathBuf;

use clap::Args;
use priorfield::mesh_extract::OPACITY_ISO;
use priorfield::{field_to_opacity_grid, marching_cubes, resample_grid};

use crate::error::CliResult;
use crate::files::{load_scene, Scene};

#[derive(Args)]
pub struct ExtractMeshArgs {
    /// SDFG prior or VFLD checkpoint.
    #[arg(long)]
    input: PathBuf,
    /// Output OBJ.
    #[arg(long)]
    out: PathBuf,
    /// Samples per axis of the extraction grid.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Iso level; defaults to 0 for SDF grids and 0.5 opacity for fields.
    #[arg(long, allow_negative_numbers = true)]
    iso: Option<f64>,
}

pub fn run(args: ExtractMeshArgs) -> CliResult {
    let dims = [args.resolution; 3];
    let (grid, iso) = match load_scene(&args.input)? {
        Scene::Prior(sdf) => (resample_grid(&sdf, dims)?, args.iso.unwrap_or(0.0)),
        Scene::Field(field) => (field_to_opacity_grid(&field, dims)?, args.iso.unwrap_or(OPACITY_ISO)),
    };
    let mesh = marching_cubes(&grid, iso)?;
    mesh.save_obj(&args.out)?;
    if mesh.is_empty() {
        eprintln!("warning: no surface at iso {iso}; wrote an empty mesh to {}", args.out.display());
    } else {
        println!(
            "wrote {}: {} vertices, {} triangles, watertight: {}",
            args.out.display(),
            mesh.vertices.len(),
            mesh.triangles.len(),
            mesh.is_watertight()
        );
    }
    Ok(())
}
