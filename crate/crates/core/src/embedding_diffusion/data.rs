//! Synthetic conditional datasets, the EPRS container and a sliced
//! Wasserstein distance for comparing sample sets.

use std::io::{Read, Write};

use byteorder::{LittleEndian, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};

/// A condition vector and the embedding it should map to.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub condition: Vec<f64>,
    pub target: Vec<f64>,
}

/// Equal-weight isotropic Gaussian mixture for one label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMixture {
    pub means: Vec<[f64; 2]>,
    pub std: f64,
}

/// Built-in 2-D toy distributions with one-hot conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Each of two labels selects its own equal-weight pair of Gaussians
    /// (std 0.2) on opposite diagonals.
    GaussianMixture,
    /// Label `k` selects a ring of radius `0.5·(k + 1)` with radial std 0.05.
    Rings,
}

impl Generator {
    pub const ALL: [Generator; 2] = [Generator::GaussianMixture, Generator::Rings];

    pub fn name(self) -> &'static str {
        match self {
            Generator::GaussianMixture => "gaussian_mixture",
            Generator::Rings => "rings",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn labels(self) -> usize {
        2
    }

    pub fn data_dim(self) -> usize {
        2
    }

    pub fn cond_dim(self) -> usize {
        self.labels()
    }

    pub fn condition(self, label: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.labels()];
        c[label] = 1.0;
        c
    }

    pub fn mixture(self, label: usize) -> Option<LabelMixture> {
        match self {
            Generator::GaussianMixture => Some(LabelMixture {
                means: if label == 0 {
                    vec![[-0.8, -0.8], [0.8, 0.8]]
                } else {
                    vec![[-0.8, 0.8], [0.8, -0.8]]
                },
                std: 0.2,
            }),
            Generator::Rings => None,
        }
    }

    /// One draw from the ground-truth distribution for `label`.
    pub fn sample_target<R: Rng + ?Sized>(self, label: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Generator::GaussianMixture => {
                let mix = self.mixture(label).unwrap();
                let m = mix.means[rng.gen_range(0..mix.means.len())];
                let n = Normal::new(0.0, mix.std).unwrap();
                vec![m[0] + n.sample(rng), m[1] + n.sample(rng)]
            }
            Generator::Rings => {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = 0.5 * (label + 1) as f64 + 0.05 * rng.sample::<f64, _>(StandardNormal);
                vec![r * theta.cos(), r * theta.sin()]
            }
        }
    }

    /// `n` pairs with labels drawn uniformly.
    pub fn sample_pairs<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<EmbeddingPair> {
        (0..n)
            .map(|_| {
                let label = rng.gen_range(0..self.labels());
                EmbeddingPair {
                    condition: self.condition(label),
                    target: self.sample_target(label, rng),
                }
            })
            .collect()
    }
}

pub fn gaussian_mixture_pairs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<EmbeddingPair> {
    Generator::GaussianMixture.sample_pairs(n, rng)
}

pub fn ring_pairs<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<EmbeddingPair> {
    Generator::Rings.sample_pairs(n, rng)
}

/// Exact 1-Wasserstein distance between two empirical distributions on the
/// line: `∫ |F_a − F_b|`.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut dist = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        dist += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        prev = next;
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
    }
    dist
}

/// Sliced 1-Wasserstein distance: the mean over `projections` random unit
/// directions of the 1-D distance between the projected sample sets.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() || projections == 0 {
        return Err(Error::param("sliced Wasserstein needs samples and projections"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::param("sample sets mix dimensions"));
    }
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |s: &[Vec<f64>]| -> Vec<f64> {
            s.iter().map(|x| x.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect()
        };
        total += wasserstein_1d(project(a), project(b));
    }
    Ok(total / projections as f64)
}

const EPRS_MAGIC: &[u8; 4] = b"EPRS";
const EPRS_VERSION: u32 = 1;

/// `EPRS`, u32 version, u32 `d`, u32 `d_c`, u64 count, then per pair
/// `d_c` condition and `d` target values as f32.
pub fn write_pairs<W: Write>(w: &mut W, pairs: &[EmbeddingPair]) -> Result<()> {
    let (d, dc) = pairs.first().map_or((0, 0), |p| (p.target.len(), p.condition.len()));
    if pairs.iter().any(|p| p.target.len() != d || p.condition.len() != dc) {
        return Err(Error::param("pairs disagree on dimensions"));
    }
    binio::write_header(w, EPRS_MAGIC, EPRS_VERSION)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    w.write_u32::<LittleEndian>(dc as u32)?;
    w.write_u64::<LittleEndian>(pairs.len() as u64)?;
    for p in pairs {
        let row: Vec<f32> = p.condition.iter().chain(&p.target).map(|&v| v as f32).collect();
        binio::write_f32s(w, &row)?;
    }
    Ok(())
}

pub fn read_pairs<R: Read>(r: &mut R) -> Result<Vec<EmbeddingPair>> {
    const KIND: &str = "EPRS";
    binio::read_header(r, KIND, EPRS_MAGIC, EPRS_VERSION)?;
    let d = binio::read_u32(r, KIND)? as usize;
    let dc = binio::read_u32(r, KIND)? as usize;
    let n = binio::checked_count(binio::read_u64(r, KIND)?, KIND)?;
    if d == 0 {
        return Err(Error::format(KIND, "zero target dimension"));
    }
    binio::checked_count((n as u64).saturating_mul((d + dc) as u64), KIND)?;
    let flat = binio::read_f32s(r, n * (d + dc), KIND)?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(KIND, "non-finite value"));
    }
    Ok(flat
        .chunks_exact(d + dc)
        .map(|row| EmbeddingPair {
            condition: row[..dc].iter().map(|&v| v as f64).collect(),
            target: row[dc..].iter().map(|&v| v as f64).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_dimensional_distance_by_hand() {
        assert!((wasserstein_1d(vec![0.0, 1.0], vec![0.5, 1.5]) - 0.5).abs() < 1e-12);
        assert!((wasserstein_1d(vec![0.0], vec![0.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(wasserstein_1d(vec![3.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn translation_shows_up_in_the_sliced_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Generator::Rings.sample_pairs(500, &mut rng);
        let pts: Vec<Vec<f64>> = a.iter().map(|p| p.target.clone()).collect();
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + 1.0, p[1]]).collect();
        let same = sliced_wasserstein(&pts, &pts, 64, &mut rng).unwrap();
        let moved = sliced_wasserstein(&pts, &shifted, 64, &mut rng).unwrap();
        assert_eq!(same, 0.0);
        // E|cos θ| over uniform directions in the plane.
        assert!((moved - 2.0 / std::f64::consts::PI).abs() < 0.08, "{moved}");
    }

    #[test]
    fn generator_names_round_trip() {
        for g in Generator::ALL {
            assert_eq!(Generator::from_name(g.name()), Some(g));
        }
        assert_eq!(Generator::from_name("moons"), None);
    }

    #[test]
    fn pairs_round_trip_and_reject_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pairs = gaussian_mixture_pairs(20, &mut rng);
        let mut buf = Vec::new();
        write_pairs(&mut buf, &pairs).unwrap();
        let back = read_pairs(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 20);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.condition, b.condition);
            for (x, y) in a.target.iter().zip(&b.target) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_pairs(&mut bad.as_slice()), Err(Error::Format { .. })));
        assert!(read_pairs(&mut &buf[..buf.len() - 3]).is_err());
    }
}
