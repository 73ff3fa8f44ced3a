//! Turning component volumes into model inputs and projection images.

use std::fs;
use std::io;
use std::path::Path;

use crate::nifti::{NiftiError, Volume3D};

const STANDARDIZE_EPS: f64 = 1e-8;

/// Flattened component map plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub subject_id: String,
    pub component_index: usize,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Self {
        FeatureVector {
            values,
            subject_id: String::new(),
            component_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Copy voxels out in x-fastest order.
pub fn flatten(v: &Volume3D) -> FeatureVector {
    FeatureVector::new(v.voxels().to_vec())
}

/// Inverse of [`flatten`].
pub fn reshape(f: &FeatureVector, dims: [usize; 3]) -> Result<Volume3D, NiftiError> {
    Volume3D::new(dims, f.values.clone())
}

/// Z-score in place using the population standard deviation.
/// Constant input becomes all zeros.
pub fn standardize_in_place(values: &mut [f32]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let scale = 1.0 / (var.sqrt() + STANDARDIZE_EPS);
    for v in values.iter_mut() {
        *v = ((*v as f64 - mean) * scale) as f32;
    }
}

pub fn standardize(f: &FeatureVector) -> FeatureVector {
    let mut out = f.clone();
    standardize_in_place(&mut out.values);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Sagittal: collapse left-right.
    X,
    /// Coronal: collapse posterior-anterior.
    Y,
    /// Axial: collapse inferior-superior.
    Z,
}

/// Row-major single-channel image, `pixels[row * width + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image2D {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image2D {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Maximum intensity projection along `axis`.
///
/// * `Z`: width = nx, height = ny, pixel (x, y)
/// * `X`: width = ny, height = nz, pixel (y, z)
/// * `Y`: width = nx, height = nz, pixel (x, z)
pub fn mip(v: &Volume3D, axis: Axis) -> Image2D {
    let [nx, ny, nz] = v.dims();
    let vox = v.voxels();
    match axis {
        Axis::Z => {
            let mut img = Image2D {
                width: nx,
                height: ny,
                pixels: vox[..nx * ny].to_vec(),
            };
            for slab in vox.chunks_exact(nx * ny).skip(1) {
                for (p, &s) in img.pixels.iter_mut().zip(slab) {
                    *p = p.max(s);
                }
            }
            img
        }
        Axis::Y => {
            let mut img = Image2D {
                width: nx,
                height: nz,
                pixels: vec![f32::NEG_INFINITY; nx * nz],
            };
            for (z, slab) in vox.chunks_exact(nx * ny).enumerate() {
                let out = &mut img.pixels[z * nx..(z + 1) * nx];
                for row in slab.chunks_exact(nx) {
                    for (p, &s) in out.iter_mut().zip(row) {
                        *p = p.max(s);
                    }
                }
            }
            img
        }
        Axis::X => {
            let mut img = Image2D::zeros(ny, nz);
            for (i, row) in vox.chunks_exact(nx).enumerate() {
                img.pixels[i] = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            }
            img
        }
    }
}

/// Three-channel image, each channel shaped like an [`Image2D`] with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub red: Vec<f32>,
    pub green: Vec<f32>,
    pub blue: Vec<f32>,
}

fn normalize_and_pad(img: &Image2D, width: usize, height: usize) -> Vec<f32> {
    let max = img.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let dx = (width - img.width) / 2;
    let dy = (height - img.height) / 2;
    let mut out = vec![0.0f32; width * height];
    for row in 0..img.height {
        for col in 0..img.width {
            out[(row + dy) * width + col + dx] = (img.get(col, row) * scale).clamp(0.0, 1.0);
        }
    }
    out
}

/// Axial MIP in red, sagittal in green, coronal in blue; each projection is
/// max-normalized and centered on a canvas large enough for all three.
pub fn rgb_composite(v: &Volume3D) -> RgbImage {
    let axial = mip(v, Axis::Z);
    let sagittal = mip(v, Axis::X);
    let coronal = mip(v, Axis::Y);
    let width = axial.width.max(sagittal.width).max(coronal.width);
    let height = axial.height.max(sagittal.height).max(coronal.height);
    RgbImage {
        width,
        height,
        red: normalize_and_pad(&axial, width, height),
        green: normalize_and_pad(&sagittal, width, height),
        blue: normalize_and_pad(&coronal, width, height),
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    // round half up
    (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8
}

/// Binary P6 encoding, top row first.
pub fn ppm_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.red.len() * 3);
    for i in 0..img.red.len() {
        out.push(quantize(img.red[i]));
        out.push(quantize(img.green[i]));
        out.push(quantize(img.blue[i]));
    }
    out
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, ppm_bytes(img))
}

/// Gray image as P6 with equal channels; `intensity` is already in 0..=255.
pub fn gray_ppm_bytes(width: usize, height: usize, intensity: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &g in intensity {
        out.extend_from_slice(&[g, g, g]);
    }
    out
}
