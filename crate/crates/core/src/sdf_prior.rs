//! Signed-distance shape priors: analytic primitives, CSG, the SDFG file
//! format, and conversion of distances into an initial raw density grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::activation::{sigmoid, softplus_inv};
use crate::binio;
use crate::error::{Error, Result};
use crate::grid::Lattice;

/// Sharpness used for the SDF → density conversion unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.05;

/// Signed distances (world units, negative inside) sampled at voxel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    lattice: Lattice,
    values: Vec<f32>,
}

impl SdfGrid {
    pub fn new(lattice: Lattice, values: Vec<f32>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::param(format!(
                "expected {} SDF values, got {}",
                lattice.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("SDF values must be finite"));
        }
        Ok(Self { lattice, values })
    }

    /// Samples an arbitrary distance function at every voxel center.
    pub fn from_fn(lattice: Lattice, f: impl Fn([f64; 3]) -> f64) -> Result<Self> {
        let values = (0..lattice.len())
            .map(|n| f(lattice.center_of(n)) as f32)
            .collect();
        Self::new(lattice, values)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_inside(&self, index: usize) -> bool {
        self.values[index] < 0.0
    }

    pub fn interior_count(&self) -> usize {
        self.values.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_sdfg(w, &self.lattice, &self.values)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (lattice, values) = binio::read_sdfg(r)?;
        Self::new(lattice, values).map_err(|e| Error::format("SDFG", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// Analytic primitive used as a stand-in shape generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Segment `a`–`b` swept by a ball of `radius`.
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
}

impl PrimitiveSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            PrimitiveSpec::Sphere { radius, .. } | PrimitiveSpec::Capsule { radius, .. } => {
                *radius > 0.0 && radius.is_finite()
            }
            PrimitiveSpec::Box { half_extents, .. } => {
                half_extents.iter().all(|h| *h > 0.0 && h.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("non-positive primitive size in {self:?}")))
        }
    }

    /// Exact signed Euclidean distance to the primitive's surface.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            PrimitiveSpec::Sphere { center, radius } => norm(sub(p, center)) - radius,
            PrimitiveSpec::Box {
                center,
                half_extents,
            } => {
                let q = [0, 1, 2].map(|a| (p[a] - center[a]).abs() - half_extents[a]);
                let outside = norm(q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            PrimitiveSpec::Capsule { a, b, radius } => {
                let pa = sub(p, a);
                let ba = sub(b, a);
                let len2 = dot(ba, ba);
                let h = if len2 > 0.0 {
                    (dot(pa, ba) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                norm([0, 1, 2].map(|i| pa[i] - ba[i] * h)) - radius
            }
        }
    }
}

/// Samples `spec`'s exact signed distance at the voxel centers of the lattice.
pub fn make_primitive_sdf(
    spec: &PrimitiveSpec,
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
) -> Result<SdfGrid> {
    spec.validate()?;
    let lattice = Lattice::new(dims, origin, voxel_size)?;
    SdfGrid::from_fn(lattice, |p| spec.distance(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsgOp {
    Union,
    Intersection,
    /// `a` minus `b`.
    Difference,
}

pub fn csg_combine(a: &SdfGrid, b: &SdfGrid, op: CsgOp) -> Result<SdfGrid> {
    if !a.lattice.same_as(&b.lattice) {
        return Err(Error::param(format!(
            "CSG operands live on different lattices: {:?} vs {:?}",
            a.lattice, b.lattice
        )));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| match op {
            CsgOp::Union => x.min(y),
            CsgOp::Intersection => x.max(y),
            CsgOp::Difference => x.max(-y),
        })
        .collect();
    SdfGrid::new(a.lattice, values)
}

/// Activated density `(1/β)·sigmoid(-sdf/β)` for one signed distance.
#[inline]
pub fn sdf_density(sdf: f64, beta: f64) -> f64 {
    sigmoid(-sdf / beta) / beta
}

/// Raw density for one SDF sample.
///
/// The stored value is `max(0, softplus⁻¹(Σ) − bias)` so that the shifted
/// softplus used at query time, `softplus(raw + bias)`, reproduces `Σ` on and
/// inside the surface while far-field voxels keep the transparent value 0.
#[inline]
pub fn raw_density_from_sdf(sdf: f64, beta: f64, bias: f64) -> f64 {
    let raw = softplus_inv(sdf_density(sdf, beta)) - bias;
    // -inf (Σ underflowed to 0) and NaN both clamp to the transparent baseline.
    if raw > 0.0 {
        raw
    } else {
        0.0
    }
}

/// Converts an SDF grid into raw density values on the same lattice.
pub fn sdf_to_density(sdf: &SdfGrid, beta: f64, bias: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param(format!("beta must be positive, got {beta}")));
    }
    if !bias.is_finite() {
        return Err(Error::param("density bias must be finite"));
    }
    Ok(sdf
        .values
        .iter()
        .map(|&s| raw_density_from_sdf(s as f64, beta, bias))
        .collect())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
