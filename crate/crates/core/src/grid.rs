//! Regular lattice geometry shared by SDF grids, density grids and opacity grids.
//!
//! Samples live at voxel centers: node `(i, j, k)` sits at
//! `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size`. Values are stored
//! x-fastest, `index = i + nx * (j + ny * k)`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
}

impl Lattice {
    /// Origin and voxel size are rounded to f32 precision so the lattice
    /// survives a round trip through the binary formats unchanged.
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::param(format!(
                "lattice dims must be >= 2 per axis, got {dims:?}"
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::param("lattice dims exceed u32 range"));
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::param(format!(
                "voxel_size must be positive and finite, got {voxel_size}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::param("lattice origin must be finite"));
        }
        let voxel_size = voxel_size as f32 as f64;
        if voxel_size <= 0.0 {
            return Err(Error::param("voxel_size underflows f32"));
        }
        Ok(Self {
            dims,
            origin: origin.map(|o| o as f32 as f64),
            voxel_size,
        })
    }

    /// A cube of `n` voxels per side spanning `[-half_extent, half_extent]^3`.
    pub fn centered_cube(n: usize, half_extent: f64) -> Result<Self> {
        Self::new(
            [n, n, n],
            [-half_extent; 3],
            2.0 * half_extent / n as f64,
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let s = self.voxel_size;
        [
            self.origin[0] + (i as f64 + 0.5) * s,
            self.origin[1] + (j as f64 + 0.5) * s,
            self.origin[2] + (k as f64 + 0.5) * s,
        ]
    }

    pub fn center_of(&self, index: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(index);
        self.center(i, j, k)
    }

    /// Axis-aligned bounding box `[origin, origin + dims * voxel_size]`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let max = [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size);
        (self.origin, max)
    }

    pub fn bounding_sphere(&self) -> ([f64; 3], f64) {
        let (lo, hi) = self.bounds();
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]));
        let radius = (0..3)
            .map(|a| (0.5 * (hi[a] - lo[a])).powi(2))
            .sum::<f64>()
            .sqrt();
        (center, radius)
    }

    /// Maps a world position into `[-1, 1]^3` over the bounding box.
    pub fn normalize(&self, x: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        [0, 1, 2].map(|a| 2.0 * (x[a] - lo[a]) / (hi[a] - lo[a]) - 1.0)
    }

    pub fn same_as(&self, other: &Lattice) -> bool {
        self == other
    }

    /// Trilinear stencil of `x`. Nodes that fall outside the lattice are
    /// dropped, which is equivalent to zero padding; the stencil is empty
    /// more than one cell outside the node hull.
    pub fn stencil(&self, x: [f64; 3]) -> Stencil {
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (x[a] - self.origin[a]) / self.voxel_size - 0.5;
            if !(u > -1.0 && u < self.dims[a] as f64) {
                return Stencil::default();
            }
            let f = u.floor();
            base[a] = f as i64;
            frac[a] = u - f;
        }
        let mut st = Stencil::default();
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut dw = [1.0f64; 3];
            let mut node = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let n = base[a] + off[a] as i64;
                if n < 0 || n >= self.dims[a] as i64 {
                    inside = false;
                }
                node[a] = n.max(0) as usize;
                let (wa, da) = if off[a] == 1 {
                    (frac[a], 1.0)
                } else {
                    (1.0 - frac[a], -1.0)
                };
                w *= wa;
                for (b, d) in dw.iter_mut().enumerate() {
                    *d *= if b == a { da } else { wa };
                }
            }
            if !inside {
                continue;
            }
            let inv = 1.0 / self.voxel_size;
            st.push(
                self.index(node[0], node[1], node[2]),
                w,
                dw.map(|d| d * inv),
            );
        }
        st
    }
}

/// Up to eight `(node index, weight)` pairs plus the spatial derivatives of
/// each weight.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stencil {
    nodes: [usize; 8],
    weights: [f64; 8],
    dweights: [[f64; 3]; 8],
    len: usize,
}

impl Stencil {
    fn push(&mut self, node: usize, w: f64, dw: [f64; 3]) {
        self.nodes[self.len] = node;
        self.weights[self.len] = w;
        self.dweights[self.len] = dw;
        self.len += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |n| (self.nodes[n], self.weights[n]))
    }

    pub fn interpolate<T: Copy + Into<f64>>(&self, values: &[T]) -> f64 {
        self.iter().map(|(n, w)| w * values[n].into()).sum()
    }

    /// Spatial gradient of the interpolated value.
    pub fn gradient<T: Copy + Into<f64>>(&self, values: &[T]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for n in 0..self.len {
            let v: f64 = values[self.nodes[n]].into();
            for (a, ga) in g.iter_mut().enumerate() {
                *ga += self.dweights[n][a] * v;
            }
        }
        g
    }
}
