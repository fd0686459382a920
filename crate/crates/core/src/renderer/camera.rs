use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|v| v / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit length.
    pub direction: [f64; 3],
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// Pinhole camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: [f64; 3],
        look_at: [f64; 3],
        up: [f64; 3],
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            position,
            look_at,
            up,
            fov_y_deg,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around the origin, looking at it with `+z` up.
    /// Azimuth 0 sits on `+x`; positive elevation is above the `xy` plane.
    pub fn orbit(
        azimuth_deg: f64,
        elevation_deg: f64,
        radius: f64,
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let position = [
            radius * el.cos() * az.cos(),
            radius * el.cos() * az.sin(),
            radius * el.sin(),
        ];
        Self::new(position, [0.0; 3], [0.0, 0.0, 1.0], fov_y_deg, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("camera resolution must be positive"));
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::param(format!(
                "fov_y must lie in (0, 180) degrees, got {}",
                self.fov_y_deg
            )));
        }
        let view = sub(self.look_at, self.position);
        let vn = dot(view, view).sqrt();
        let un = dot(self.up, self.up).sqrt();
        if !(vn > 0.0) || !(un > 0.0) {
            return Err(Error::param("camera view direction and up must be non-zero"));
        }
        let c = cross(view, self.up);
        if dot(c, c).sqrt() <= 1e-9 * vn * un {
            return Err(Error::param("camera up vector is parallel to the view direction"));
        }
        Ok(())
    }

    /// `(forward, right, true_up)` orthonormal frame.
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let f = normalize(sub(self.look_at, self.position));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        (f, r, u)
    }

    /// Ray through continuous image coordinates `(u, v)`: `(0, 0)` is the
    /// top-left image corner, `(width, height)` the bottom-right one.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray {
        let (f, r, up) = self.basis();
        let tan_half = (0.5 * self.fov_y_deg.to_radians()).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = (2.0 * u / self.width as f64 - 1.0) * tan_half * aspect;
        let y = (1.0 - 2.0 * v / self.height as f64) * tan_half;
        let d = [0, 1, 2].map(|a| f[a] + x * r[a] + y * up[a]);
        Ray {
            origin: self.position,
            direction: normalize(d),
        }
    }

    /// One ray per pixel through the pixel center, row-major.
    pub fn generate_rays(&self) -> Vec<Ray> {
        let mut rays = Vec::with_capacity(self.width * self.height);
        for py in 0..self.height {
            for px in 0..self.width {
                rays.push(self.ray_through(px as f64 + 0.5, py as f64 + 0.5));
            }
        }
        rays
    }
}

/// Distribution of viewpoints used while optimizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseSampler {
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub radius: f64,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Offset the look-at point uniformly within `±0.05·radius` per axis.
    pub jitter_look_at: bool,
    /// Scale the orbit radius uniformly within `±10%`.
    pub jitter_radius: bool,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            azimuth_deg: [-90.0, 90.0],
            elevation_deg: [20.0, 30.0],
            radius: 4.0,
            fov_y_deg: 40.0,
            width: 168,
            height: 168,
            jitter_look_at: false,
            jitter_radius: false,
        }
    }
}

impl PoseSampler {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r.iter().all(|v| v.is_finite());
        if !ordered(self.azimuth_deg) || !ordered(self.elevation_deg) {
            return Err(Error::param("pose ranges must be finite with lo <= hi"));
        }
        if self.elevation_deg[0] <= -90.0 || self.elevation_deg[1] >= 90.0 {
            return Err(Error::param("elevation must stay strictly inside (-90, 90)"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::param("camera radius must be positive"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Draws a viewpoint: azimuth and elevation uniform in their ranges, camera on
/// the orbit sphere looking at the origin with `+z` up.
pub fn sample_camera_pose<R: Rng + ?Sized>(rng: &mut R, sampler: &PoseSampler) -> Result<Camera> {
    sampler.validate()?;
    let az = uniform(rng, sampler.azimuth_deg);
    let el = uniform(rng, sampler.elevation_deg);
    let radius = if sampler.jitter_radius {
        sampler.radius * rng.gen_range(0.9..1.1)
    } else {
        sampler.radius
    };
    let mut cam = Camera::orbit(az, el, radius, sampler.fov_y_deg, sampler.width, sampler.height)?;
    if sampler.jitter_look_at {
        let a = 0.05 * sampler.radius;
        cam.look_at = [0, 1, 2].map(|_| rng.gen_range(-a..a));
        cam.validate()?;
    }
    Ok(cam)
}
