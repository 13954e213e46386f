//! Shape-indexed appearance features: a gradient-orientation-histogram
//! descriptor on a fixed-size patch around each landmark, concatenated in
//! landmark order.
//!
//! The descriptor is deliberately minimal — dense 4x4-cell, 8-bin orientation
//! histograms with magnitude weighting and soft bin assignment, L2 normalized
//! per patch. No keypoint detection, no scale or rotation handling: patches
//! are extracted at a fixed size in face-box-normalized images, and the
//! regressor on top absorbs the remaining descriptor details.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::shape::Shape;

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive (got {width}x{height})"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image intensities must be finite and within [0, 1]".into(),
            ));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Intensity at integer coordinates, clamping reads outside the image to
    /// the nearest edge pixel.
    pub fn get_clamped(&self, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.height as i64 - 1) as usize;
        let c = col.clamp(0, self.width as i64 - 1) as usize;
        self.pixels[r * self.width + c]
    }

    /// Bilinear sample at fractional coordinates, edge-clamped.
    pub fn bilinear(&self, row: f64, col: f64) -> f64 {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        let (r0, c0) = (r0 as i64, c0 as i64);
        let v00 = self.get_clamped(r0, c0);
        let v01 = self.get_clamped(r0, c0 + 1);
        let v10 = self.get_clamped(r0 + 1, c0);
        let v11 = self.get_clamped(r0 + 1, c0 + 1);
        v00 * (1.0 - fr) * (1.0 - fc)
            + v01 * (1.0 - fr) * fc
            + v10 * fr * (1.0 - fc)
            + v11 * fr * fc
    }

    /// Bilinear resample to a new size (pixel centers aligned).
    pub fn resized(&self, width: usize, height: usize) -> Result<GrayImage> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(
                "resize target must be positive".into(),
            ));
        }
        let sr = self.height as f64 / height as f64;
        let sc = self.width as f64 / width as f64;
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            let src_r = (r as f64 + 0.5) * sr - 0.5;
            for c in 0..width {
                let src_c = (c as f64 + 0.5) * sc - 0.5;
                // Interpolation of in-range values stays in range.
                pixels.push(self.bilinear(src_r, src_c).clamp(0.0, 1.0));
            }
        }
        GrayImage::new(width, height, pixels)
    }
}

/// Parameters of the per-landmark patch descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DescriptorConfig {
    /// Side length of the square patch around each landmark, pixels.
    pub patch_size: usize,
    /// Cells per patch side; the patch divides into grid x grid cells.
    pub grid: usize,
    /// Orientation bins per cell.
    pub bins: usize,
}

impl DescriptorConfig {
    pub fn new(patch_size: usize, grid: usize, bins: usize) -> Result<Self> {
        if patch_size == 0 || grid == 0 {
            return Err(Error::InvalidArgument(
                "patch size and grid must be positive".into(),
            ));
        }
        if patch_size % grid != 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} not divisible by grid {grid}"
            )));
        }
        if bins < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 orientation bins (got {bins})"
            )));
        }
        Ok(DescriptorConfig {
            patch_size,
            grid,
            bins,
        })
    }

    /// Length of one landmark's descriptor (grid^2 * bins; 128 at defaults).
    pub fn descriptor_len(&self) -> usize {
        self.grid * self.grid * self.bins
    }

    /// Length of the concatenated feature vector for `landmarks` landmarks.
    pub fn feature_len(&self, landmarks: usize) -> usize {
        landmarks * self.descriptor_len()
    }
}

impl Default for DescriptorConfig {
    /// 32x32 patches, 4x4 cells, 8 orientation bins: 128 values per landmark.
    fn default() -> Self {
        DescriptorConfig {
            patch_size: 32,
            grid: 4,
            bins: 8,
        }
    }
}

/// Square block of intensities cut out around a landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    size: usize,
    values: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch size must be at least 2 (got {size})"
            )));
        }
        if values.len() != size * size {
            return Err(Error::DimensionMismatch(format!(
                "patch of size {size} needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Patch { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    /// Value with patch-internal clamped indexing (used by the gradient
    /// stencil at patch borders).
    fn get_clamped(&self, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.size as i64 - 1) as usize;
        let c = col.clamp(0, self.size as i64 - 1) as usize;
        self.values[r * self.size + c]
    }
}

/// Cuts a `size` x `size` patch centered at the rounded landmark position.
/// Reads outside the image clamp to the nearest edge pixel, so every center
/// is valid.
pub fn extract_patch(img: &GrayImage, center: (f64, f64), size: usize) -> Result<Patch> {
    if size < 2 {
        return Err(Error::InvalidArgument(format!(
            "patch size must be at least 2 (got {size})"
        )));
    }
    let cr = center.0.round() as i64;
    let cc = center.1.round() as i64;
    let half = size as i64 / 2;
    let mut values = Vec::with_capacity(size * size);
    for dr in -half..size as i64 - half {
        for dc in -half..size as i64 - half {
            values.push(img.get_clamped(cr + dr, cc + dc));
        }
    }
    Patch::new(size, values)
}

/// Gradient-orientation-histogram descriptor of one patch.
///
/// Central-difference gradients (clamped at patch borders), per-cell
/// histograms over gradient orientation with magnitude weighting and linear
/// interpolation between the two nearest bins, concatenated cell-major and
/// L2-normalized with epsilon 1e-8. A constant patch yields the zero vector;
/// anything with gradient energy comes out with norm just under 1.
pub fn patch_descriptor(patch: &Patch, cfg: &DescriptorConfig) -> Result<DVector<f64>> {
    if patch.size() != cfg.patch_size {
        return Err(Error::DimensionMismatch(format!(
            "patch size {} does not match descriptor config {}",
            patch.size(),
            cfg.patch_size
        )));
    }
    let cell = cfg.patch_size / cfg.grid;
    let bins = cfg.bins as f64;
    let mut hist: DVector<f64> = DVector::zeros(cfg.descriptor_len());
    for r in 0..cfg.patch_size {
        for c in 0..cfg.patch_size {
            let (ri, ci) = (r as i64, c as i64);
            let gr = (patch.get_clamped(ri + 1, ci) - patch.get_clamped(ri - 1, ci)) / 2.0;
            let gc = (patch.get_clamped(ri, ci + 1) - patch.get_clamped(ri, ci - 1)) / 2.0;
            let mag = gr.hypot(gc);
            if mag == 0.0 {
                continue;
            }
            // Orientation in [0, 2pi), then a soft vote split linearly
            // between the two bins whose centers straddle it.
            let theta = gr.atan2(gc).rem_euclid(2.0 * PI);
            let pos = theta / (2.0 * PI) * bins - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo_bin = (lo as i64).rem_euclid(cfg.bins as i64) as usize;
            let hi_bin = (lo_bin + 1) % cfg.bins;
            let cell_index = (r / cell) * cfg.grid + (c / cell);
            let base = cell_index * cfg.bins;
            hist[base + lo_bin] += mag * (1.0 - frac);
            hist[base + hi_bin] += mag * frac;
        }
    }
    let norm = hist.norm();
    Ok(hist / (norm + 1e-8))
}

/// Concatenation of per-landmark patch descriptors in landmark order; the
/// appearance representation indexed by the current shape estimate.
pub fn shape_indexed_features(
    img: &GrayImage,
    shape: &Shape,
    cfg: &DescriptorConfig,
) -> Result<DVector<f64>> {
    let d = cfg.descriptor_len();
    let mut out = DVector::zeros(cfg.feature_len(shape.landmarks()));
    for l in 0..shape.landmarks() {
        let patch = extract_patch(img, shape.point(l), cfg.patch_size)?;
        let desc = patch_descriptor(&patch, cfg)?;
        out.rows_mut(l * d, d).copy_from(&desc);
    }
    Ok(out)
}

/// Pluggable appearance-feature extractor, so experiments can swap the
/// descriptor pipeline for cheaper analytic features.
pub trait FeatureSource: Send + Sync {
    /// Feature vector length for a given landmark count.
    fn dimension(&self, landmarks: usize) -> usize;
    /// Feature vector of `img` indexed by the landmark positions of `shape`.
    fn extract(&self, img: &GrayImage, shape: &Shape) -> Result<DVector<f64>>;
}

/// The standard source: concatenated gradient-orientation descriptors.
#[derive(Clone, Debug, Default)]
pub struct DescriptorFeatures {
    pub cfg: DescriptorConfig,
}

impl DescriptorFeatures {
    pub fn new(cfg: DescriptorConfig) -> Self {
        DescriptorFeatures { cfg }
    }
}

impl FeatureSource for DescriptorFeatures {
    fn dimension(&self, landmarks: usize) -> usize {
        self.cfg.feature_len(landmarks)
    }

    fn extract(&self, img: &GrayImage, shape: &Shape) -> Result<DVector<f64>> {
        shape_indexed_features(img, shape, &self.cfg)
    }
}

/// Lightweight analytic source: per landmark, the image sampled bilinearly
/// at a fixed set of offsets around it. Useful in tests and synthetic
/// experiments where full descriptors are overkill.
#[derive(Clone, Debug)]
pub struct ProbeFeatures {
    /// (row, col) offsets probed around each landmark.
    pub offsets: Vec<(f64, f64)>,
}

impl ProbeFeatures {
    /// `radius` controls how far the probes reach; 9 probes per landmark
    /// (center plus two rings of four).
    pub fn with_radius(radius: f64) -> Self {
        let r = radius;
        ProbeFeatures {
            offsets: vec![
                (0.0, 0.0),
                (-r, 0.0),
                (r, 0.0),
                (0.0, -r),
                (0.0, r),
                (-r / 2.0, -r / 2.0),
                (-r / 2.0, r / 2.0),
                (r / 2.0, -r / 2.0),
                (r / 2.0, r / 2.0),
            ],
        }
    }
}

impl FeatureSource for ProbeFeatures {
    fn dimension(&self, landmarks: usize) -> usize {
        landmarks * self.offsets.len()
    }

    fn extract(&self, img: &GrayImage, shape: &Shape) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dimension(shape.landmarks()));
        let mut i = 0;
        for l in 0..shape.landmarks() {
            let (r, c) = shape.point(l);
            for &(dr, dc) in &self.offsets {
                out[i] = img.bilinear(r + dr, c + dc);
                i += 1;
            }
        }
        Ok(out)
    }
}
