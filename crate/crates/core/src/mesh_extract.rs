//! Isosurface extraction and OBJ export.
//!
//! Marching cubes over scalar lattices sampled at voxel centers. A point is inside when
//! its value is below the iso level, and triangles wind counterclockwise seen
//! from the outside. The 256-case triangle table is built on first use by
//! walking the six cube faces: every face contributes oriented segments
//! between its sign-changing edges, the segments chain into closed loops and
//! each loop is fanned into triangles. Faces with two diagonal inside corners
//! always separate those corners, and since neighbouring cells see the same
//! four face values they agree on it, which keeps the surface closed.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Lattice;
use crate::sdf_prior::SdfGrid;
use crate::voxel_field::VoxelField;

/// Iso level used for opacity grids derived from density fields.
pub const OPACITY_ISO: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::param("triangle index out of range"));
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("non-finite vertex"));
        }
        Ok(())
    }

    /// Undirected edges used by a number of triangles other than two.
    pub fn non_manifold_edges(&self) -> usize {
        let mut uses: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        uses.values().filter(|&&c| c != 2).count()
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.non_manifold_edges() == 0
    }

    /// Enclosed volume by the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let cross = [
                    b[1] * c[2] - b[2] * c[1],
                    b[2] * c[0] - b[0] * c[2],
                    b[0] * c[1] - b[1] * c[0],
                ];
                (a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2]) / 6.0
            })
            .sum()
    }

    /// `(min, max)` corners, or `None` when there are no vertices.
    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [0, 1, 2].map(|i| lo[i].min(v[i])),
                [0, 1, 2].map(|i| hi[i].max(v[i])),
            )
        }))
    }

    /// ASCII OBJ: `v x y z` lines, then 1-based `f i j k` lines, LF endings,
    /// coordinates to 6 significant digits.
    pub fn write_obj<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", sig6(v[0]), sig6(v[1]), sig6(v[2]))?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_obj(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// `%g`-style formatting with 6 significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..6).contains(&exp) {
        trim(&format!("{x:.*}", (5 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

/// Corner `c` of the unit cell has offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Edge `e` runs along axis `e / 4`; its other two corner bits are `e % 4`.
fn edge_corners(e: usize) -> (usize, usize) {
    let (axis, rest) = (e / 4, e % 4);
    let (b, c) = other_axes(axis);
    let low = ((rest & 1) << b) | (((rest >> 1) & 1) << c);
    (low, low | (1 << axis))
}

fn edge_between(c0: usize, c1: usize) -> usize {
    let axis = (c0 ^ c1).trailing_zeros() as usize;
    let low = c0 & c1;
    let (b, c) = other_axes(axis);
    axis * 4 + (((low >> b) & 1) | (((low >> c) & 1) << 1))
}

fn position(c: usize) -> [f64; 3] {
    corner_offset(c).map(|v| v as f64)
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (a, b) = edge_corners(e);
    let (pa, pb) = (position(a), position(b));
    [0, 1, 2].map(|i| 0.5 * (pa[i] + pb[i]))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn centroid(points: impl Iterator<Item = [f64; 3]>) -> [f64; 3] {
    let (mut s, mut n) = ([0.0; 3], 0.0);
    for p in points {
        s = [s[0] + p[0], s[1] + p[1], s[2] + p[2]];
        n += 1.0;
    }
    s.map(|v| v / n)
}

/// Segment from `e1` to `e2` oriented so the surface normal, which points
/// from the inside corners toward `outward` within the face, and the face
/// normal `n` wind it as part of a counterclockwise boundary.
fn oriented(e1: usize, e2: usize, outward: [f64; 3], n: [f64; 3]) -> (usize, usize) {
    let t = sub(edge_midpoint(e2), edge_midpoint(e1));
    if dot(t, cross(outward, n)) > 0.0 {
        (e1, e2)
    } else {
        (e2, e1)
    }
}

fn case_triangles(mask: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| mask & (1 << c) != 0;
    let mut next = [usize::MAX; 12];
    for axis in 0..3 {
        let (b, c) = other_axes(axis);
        for side in 0..2 {
            let base = side << axis;
            let cyc = [base, base | 1 << b, base | 1 << b | 1 << c, base | 1 << c];
            let mut n = [0.0; 3];
            n[axis] = if side == 1 { 1.0 } else { -1.0 };
            let crossings: Vec<usize> = (0..4)
                .filter(|&k| inside(cyc[k]) != inside(cyc[(k + 1) % 4]))
                .collect();
            let mut add = |(from, to): (usize, usize)| {
                debug_assert_eq!(next[from], usize::MAX);
                next[from] = to;
            };
            match crossings.len() {
                0 => {}
                2 => {
                    let e1 = edge_between(cyc[crossings[0]], cyc[(crossings[0] + 1) % 4]);
                    let e2 = edge_between(cyc[crossings[1]], cyc[(crossings[1] + 1) % 4]);
                    let out = centroid(cyc.iter().filter(|&&c| !inside(c)).map(|&c| position(c)));
                    let inn = centroid(cyc.iter().filter(|&&c| inside(c)).map(|&c| position(c)));
                    add(oriented(e1, e2, sub(out, inn), n));
                }
                4 => {
                    for k in (0..4).filter(|&k| inside(cyc[k])) {
                        let e1 = edge_between(cyc[(k + 3) % 4], cyc[k]);
                        let e2 = edge_between(cyc[k], cyc[(k + 1) % 4]);
                        let (m1, m2) = (edge_midpoint(e1), edge_midpoint(e2));
                        let mid = [0, 1, 2].map(|i| 0.5 * (m1[i] + m2[i]));
                        add(oriented(e1, e2, sub(mid, position(cyc[k])), n));
                    }
                }
                _ => unreachable!("a square face changes sign an even number of times"),
            }
        }
    }
    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut e = next[start];
        while e != start {
            used[e] = true;
            lp.push(e);
            e = next[e];
        }
        for k in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[k] as u8, lp[k + 1] as u8]);
        }
    }
    tris
}

fn table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(case_triangles).collect())
}

/// Triangulates the level set `value = iso` of a sampled grid, treating the
/// voxel centers as the corners of the marching cells.
/// Vertices are linearly interpolated along cell edges, in world units, and
/// shared between neighbouring cells.
pub fn marching_cubes(grid: &SdfGrid, iso: f64) -> Result<TriangleMesh> {
    let lat = *grid.lattice();
    let [nx, ny, nz] = lat.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::param("marching cubes needs at least 2 samples per axis"));
    }
    if !iso.is_finite() {
        return Err(Error::param("iso level must be finite"));
    }
    let values = grid.values();
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::param("grid contains NaN"));
    }
    let table = table();
    // Edge key: 3 · (index of the lower sample) + axis.
    let slabs: Vec<Vec<[u64; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut mask = 0;
                    for c in 0..8 {
                        let o = corner_offset(c);
                        if (values[lat.index(i + o[0], j + o[1], k + o[2])] as f64) < iso {
                            mask |= 1 << c;
                        }
                    }
                    for tri in &table[mask] {
                        out.push(tri.map(|e| {
                            let (c0, _) = edge_corners(e as usize);
                            let o = corner_offset(c0);
                            3 * lat.index(i + o[0], j + o[1], k + o[2]) as u64 + (e as u64 / 4)
                        }));
                    }
                }
            }
            out
        })
        .collect();

    let mut mesh = TriangleMesh::default();
    let mut ids: HashMap<u64, u32> = HashMap::new();
    for key in slabs.into_iter().flatten() {
        let tri = key.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                mesh.vertices.push(edge_vertex(&lat, values, key, iso));
                (mesh.vertices.len() - 1) as u32
            })
        });
        mesh.triangles.push(tri);
    }
    Ok(mesh)
}

fn edge_vertex(lat: &Lattice, values: &[f32], key: u64, iso: f64) -> [f64; 3] {
    let (node, axis) = ((key / 3) as usize, (key % 3) as usize);
    let [i, j, k] = lat.coords(node);
    let mut o = [i, j, k];
    o[axis] += 1;
    let other = lat.index(o[0], o[1], o[2]);
    let (va, vb) = (values[node] as f64, values[other] as f64);
    let t = (iso - va) / (vb - va);
    let (pa, pb) = (lat.center(i, j, k), lat.center(o[0], o[1], o[2]));
    [0, 1, 2].map(|d| pa[d] + t * (pb[d] - pa[d]))
}

/// Spacing of a `dims` lattice covering `src`'s bounds; the longest axis
/// decides.
fn covering_spacing(src: &Lattice, dims: [usize; 3]) -> Result<f64> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::param("resampled grid needs at least 2 samples per axis"));
    }
    Ok((0..3)
        .map(|a| src.dims()[a] as f64 * src.voxel_size() / dims[a] as f64)
        .fold(0.0, f64::max))
}

/// Trilinear resampling of a scalar grid onto a `dims` lattice covering the
/// same bounds. Queries are clamped to the hull of the source samples, so the
/// border extends the outermost values instead of fading to zero.
pub fn resample_grid(grid: &SdfGrid, dims: [usize; 3]) -> Result<SdfGrid> {
    let src = *grid.lattice();
    if src.dims() == dims {
        return Ok(grid.clone());
    }
    let lattice = Lattice::new(dims, src.origin(), covering_spacing(&src, dims)?)?;
    let s = src.voxel_size();
    let values: Vec<f32> = (0..lattice.len())
        .into_par_iter()
        .map(|n| {
            let p = lattice.center_of(n);
            let q = [0, 1, 2].map(|a| {
                let lo = src.origin()[a] + 0.5 * s;
                let hi = src.origin()[a] + (src.dims()[a] as f64 - 0.5) * s;
                p[a].clamp(lo, hi)
            });
            src.stencil(q).interpolate(grid.values()) as f32
        })
        .collect();
    SdfGrid::new(lattice, values)
}

/// Resamples `field` at the voxel centers of a `dims` lattice covering the
/// field's bounds (the longest axis sets the spacing) and stores the per-voxel opacity `1 − exp(−σ·s)` of the field's own voxel
/// size `s`.
pub fn field_to_opacity_grid(field: &VoxelField, dims: [usize; 3]) -> Result<SdfGrid> {
    let src = field.lattice();
    let s = src.voxel_size();
    let lattice = Lattice::new(dims, src.origin(), covering_spacing(src, dims)?)?;
    let values: Vec<f32> = (0..lattice.len())
        .into_par_iter()
        .map(|n| {
            let sigma = field.query_density(lattice.center_of(n));
            (-(-sigma * s).exp_m1()) as f32
        })
        .collect();
    SdfGrid::new(lattice, values)
}
