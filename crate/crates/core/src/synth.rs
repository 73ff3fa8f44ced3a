//! Synthetic component stacks with a known, learnable signal.
//!
//! Every non-noise class owns a lattice point on the grid. A subject's map for
//! a component of that class is a unit-peak Gaussian blob at the class
//! centroid, shifted by at most one voxel, plus white noise. Noise-class
//! components are white noise only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::nifti::{ComponentStack, Volume3D};
use crate::seed;
use crate::taxonomy::{Taxonomy, NOISE};

/// Minimum standard deviation of noise-class maps.
pub const MIN_NOISE_CLASS_SIGMA: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("GridTooSmall: grid {grid:?} holds {capacity} centroids at spacing {spacing}, need {needed}")]
    GridTooSmall {
        grid: [usize; 3],
        spacing: usize,
        capacity: usize,
        needed: usize,
    },
    #[error("BadParameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub grid: [usize; 3],
    pub subjects: usize,
    pub blob_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid: [24, 24, 24],
            subjects: 20,
            blob_sigma: 2.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Lattice spacing in voxels: the smallest integer ≥ 3·sigma.
pub fn lattice_spacing(blob_sigma: f64) -> usize {
    ((3.0 * blob_sigma).ceil() as usize).max(1)
}

fn axis_positions(n: usize, spacing: usize) -> Vec<usize> {
    // keep one voxel of margin on both sides for the jitter
    if n < 3 {
        return Vec::new();
    }
    let count = (n - 3) / spacing + 1;
    let offset = (n - 1 - (count - 1) * spacing) / 2;
    (0..count).map(|i| offset + i * spacing).collect()
}

/// Centroid of every class; `None` for the noise class.
pub fn class_centroids(taxonomy: &Taxonomy, grid: [usize; 3], blob_sigma: f64) -> Result<Vec<Option<[usize; 3]>>, SynthError> {
    let spacing = lattice_spacing(blob_sigma);
    let axes: Vec<Vec<usize>> = grid.iter().map(|&n| axis_positions(n, spacing)).collect();
    let capacity = axes.iter().map(Vec::len).product::<usize>();
    let needed = taxonomy.classes().iter().filter(|c| *c != NOISE).count();
    if capacity < needed {
        return Err(SynthError::GridTooSmall {
            grid,
            spacing,
            capacity,
            needed,
        });
    }
    let mut next = 0;
    Ok(taxonomy
        .classes()
        .iter()
        .map(|c| {
            if c == NOISE {
                return None;
            }
            let i = next;
            next += 1;
            let ix = i % axes[0].len();
            let iy = (i / axes[0].len()) % axes[1].len();
            let iz = i / (axes[0].len() * axes[1].len());
            Some([axes[0][ix], axes[1][iy], axes[2][iz]])
        })
        .collect())
}

const JITTER: [[i64; 3]; 7] = [
    [0, 0, 0],
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn blob(grid: [usize; 3], center: [i64; 3], sigma: f64, noise: Option<&Normal<f64>>, rng: &mut impl Rng) -> Volume3D {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gauss: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            (0..grid[a])
                .map(|i| {
                    let d = i as f64 - center[a] as f64;
                    (-d * d * inv).exp()
                })
                .collect()
        })
        .collect();
    Volume3D::from_fn(grid, |x, y, z| {
        let g = gauss[0][x] * gauss[1][y] * gauss[2][z];
        let n = noise.map_or(0.0, |d| d.sample(rng));
        (g + n) as f32
    })
    .expect("finite by construction")
}

/// Generate one stack of `taxonomy.num_components()` volumes per subject.
pub fn synth_generate(taxonomy: &Taxonomy, spec: &SynthSpec) -> Result<Vec<ComponentStack>, SynthError> {
    if !(spec.blob_sigma > 0.0) || !(spec.noise_sigma >= 0.0) {
        return Err(SynthError::BadParameter(format!(
            "blob_sigma={} noise_sigma={}",
            spec.blob_sigma, spec.noise_sigma
        )));
    }
    let centroids = class_centroids(taxonomy, spec.grid, spec.blob_sigma)?;
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let noise_class = Normal::new(0.0, spec.noise_sigma.max(MIN_NOISE_CLASS_SIGMA)).unwrap();

    let width = spec.subjects.max(1).to_string().len().max(3);
    Ok((0..spec.subjects)
        .map(|s| {
            let mut rng = seed::rng(spec.seed, &[s as u64]);
            let volumes = taxonomy
                .entries()
                .iter()
                .map(|entry| match centroids[entry.class_id] {
                    None => Volume3D::from_fn(spec.grid, |_, _, _| noise_class.sample(&mut rng) as f32).unwrap(),
                    Some(c) => {
                        let j = JITTER[rng.random_range(0..JITTER.len())];
                        let center = [c[0] as i64 + j[0], c[1] as i64 + j[1], c[2] as i64 + j[2]];
                        blob(spec.grid, center, spec.blob_sigma, noise.as_ref(), &mut rng)
                    }
                })
                .collect();
            ComponentStack::new(format!("sub-{s:0width$}"), volumes).expect("uniform grid")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_taxonomy_fits_24_cubed() {
        let tax = Taxonomy::bundled();
        let spec = SynthSpec {
            subjects: 2,
            ..SynthSpec::default()
        };
        let stacks = synth_generate(&tax, &spec).unwrap();
        assert_eq!(stacks.len(), 2);
        assert!(stacks.iter().all(|s| s.volumes.len() == 100 && s.dims() == Some([24, 24, 24])));
        assert_ne!(stacks[0].subject_id, stacks[1].subject_id);
    }

    #[test]
    fn centroids_are_far_apart() {
        let tax = Taxonomy::bundled();
        for sigma in [1.0, 1.5, 2.0] {
            let cs: Vec<[usize; 3]> = class_centroids(&tax, [24, 24, 24], sigma).unwrap().into_iter().flatten().collect();
            assert_eq!(cs.len(), 57);
            for (i, a) in cs.iter().enumerate() {
                for b in &cs[i + 1..] {
                    let d2: f64 = (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum();
                    assert!(d2.sqrt() >= 3.0 * sigma);
                }
            }
        }
    }

    #[test]
    fn argmax_near_centroid_without_noise() {
        let tax = Taxonomy::bundled();
        let spec = SynthSpec {
            subjects: 3,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let centroids = class_centroids(&tax, spec.grid, spec.blob_sigma).unwrap();
        for stack in synth_generate(&tax, &spec).unwrap() {
            for (entry, vol) in tax.entries().iter().zip(&stack.volumes) {
                let Some(c) = centroids[entry.class_id] else { continue };
                let (imax, _) = vol
                    .voxels()
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                let p = [imax % 24, (imax / 24) % 24, imax / 576];
                let d2: f64 = (0..3).map(|k| (p[k] as f64 - c[k] as f64).powi(2)).sum();
                assert!(d2.sqrt() <= 1.0, "argmax {p:?} vs centroid {c:?}");
                assert!((vol.voxels()[imax] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn deterministic_and_rejects_small_grids() {
        let tax = Taxonomy::bundled();
        let spec = SynthSpec {
            subjects: 1,
            seed: 5,
            ..SynthSpec::default()
        };
        assert_eq!(synth_generate(&tax, &spec).unwrap(), synth_generate(&tax, &spec).unwrap());
        let other = synth_generate(&tax, &SynthSpec { seed: 6, ..spec.clone() }).unwrap();
        assert_ne!(synth_generate(&tax, &spec).unwrap(), other);
        let small = SynthSpec {
            grid: [8, 8, 8],
            ..spec
        };
        assert!(matches!(synth_generate(&tax, &small), Err(SynthError::GridTooSmall { .. })));
    }
}
