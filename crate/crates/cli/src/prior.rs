use std::path::PathBuf;

use clap::{ArgGroup, Args, ValueEnum};
use priorfield::{csg_combine, make_primitive_sdf, CsgOp, Lattice, PrimitiveSpec, SdfGrid};

use crate::error::{usage, CliResult};
use crate::files::parse_vec3;

#[derive(Clone, Copy, ValueEnum)]
pub enum Shape {
    Sphere,
    Box,
    Capsule,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Op {
    Union,
    Intersection,
    /// First input minus the second.
    Difference,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["shape", "op"])))]
pub struct MakePriorArgs {
    /// Output SDFG file.
    #[arg(long)]
    out: PathBuf,
    /// Primitive to sample.
    #[arg(long, value_enum)]
    shape: Option<Shape>,
    /// Combine the two --inputs grids instead of sampling a primitive.
    #[arg(long, value_enum, requires = "inputs")]
    op: Option<Op>,
    /// SDFG operands for --op.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    inputs: Vec<PathBuf>,
    /// Sphere or capsule radius.
    #[arg(long, default_value_t = 0.5)]
    radius: f64,
    /// Sphere or box center, as x,y,z.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0")]
    center: [f64; 3],
    /// Box half extents, as x,y,z.
    #[arg(long, value_parser = parse_vec3, default_value = "0.5,0.5,0.5")]
    half_extents: [f64; 3],
    /// Capsule endpoint.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,-0.4")]
    a: [f64; 3],
    /// Capsule endpoint.
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0.4")]
    b: [f64; 3],
    /// Voxels per axis.
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// The grid spans [-extent, extent] on every axis.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
}

pub fn run(args: MakePriorArgs) -> CliResult {
    let grid = match (args.shape, args.op) {
        (Some(shape), _) => {
            let spec = match shape {
                Shape::Sphere => PrimitiveSpec::Sphere {
                    center: args.center,
                    radius: args.radius,
                },
                Shape::Box => PrimitiveSpec::Box {
                    center: args.center,
                    half_extents: args.half_extents,
                },
                Shape::Capsule => PrimitiveSpec::Capsule {
                    a: args.a,
                    b: args.b,
                    radius: args.radius,
                },
            };
            let lat = Lattice::centered_cube(args.dims, args.extent)?;
            make_primitive_sdf(&spec, lat.dims(), lat.origin(), lat.voxel_size())?
        }
        (None, Some(op)) => {
            let [a, b] = [&args.inputs[0], &args.inputs[1]].map(SdfGrid::load);
            let op = match op {
                Op::Union => CsgOp::Union,
                Op::Intersection => CsgOp::Intersection,
                Op::Difference => CsgOp::Difference,
            };
            csg_combine(&a?, &b?, op)?
        }
        (None, None) => return Err(usage("one of --shape or --op is required")),
    };
    grid.save(&args.out)?;
    let [nx, ny, nz] = grid.lattice().dims();
    println!(
        "wrote {}: {nx}x{ny}x{nz}, voxel {}, {} interior samples",
        args.out.display(),
        grid.lattice().voxel_size(),
        grid.interior_count()
    );
    Ok(())
}
