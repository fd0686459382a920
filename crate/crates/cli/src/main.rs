//! `priorfield` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 guidance transport
//! failure, 4 numerical failure.

mod diffusion;
mod error;
mod files;
mod mesh;
mod optimize;
mod prior;
mod render;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "priorfield", version, about = "Voxel radiance fields seeded by signed-distance shape priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a primitive or combine two SDFG files into a prior grid.
    MakePrior(prior::MakePriorArgs),
    /// Optimize a voxel field under photometric or remote guidance.
    Optimize(optimize::OptimizeArgs),
    /// Render a VFLD checkpoint or SDFG prior to a PNG.
    Render(render::RenderArgs),
    /// Extract an OBJ isosurface from an SDFG or VFLD file.
    ExtractMesh(mesh::ExtractMeshArgs),
    /// Train or sample the conditional embedding diffusion model.
    #[command(subcommand)]
    Diffusion(diffusion::DiffusionCommand),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakePrior(a) => prior::run(a),
        Command::Optimize(a) => optimize::run(a),
        Command::Render(a) => render::run(a),
        Command::ExtractMesh(a) => mesh::run(a),
        Command::Diffusion(c) => diffusion::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
