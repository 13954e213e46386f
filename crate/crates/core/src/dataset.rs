//! Dataset ingestion (images + pts annotations + bounding boxes) and the
//! synthetic benchmark generator.
//!
//! Loaded samples are normalized so the face box is 200 px wide; the patch
//! descriptor then sees faces at a consistent scale regardless of source
//! resolution. The applied factor is kept on each sample so predictions can
//! be mapped back to source-image coordinates.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::ImageEncoder as _;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::GrayImage;
use crate::shape::{BoundingBox, EvalConfig, EvalPreset, Shape};

/// Width every face box is scaled to at load time, pixels.
pub const NORMALIZED_BOX_WIDTH: f64 = 200.0;

/// One annotated image: the unit of training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSample {
    pub image: GrayImage,
    pub truth: Shape,
    pub bbox: BoundingBox,
    pub id: String,
    /// Rescale factor applied at load time; divide coordinates by this to
    /// return to the source image frame.
    pub scale: f64,
}

/// A consistent collection of samples plus the evaluation convention that
/// fits its annotation scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<AlignmentSample>,
    landmarks: usize,
    eval_preset: EvalPreset,
}

impl Dataset {
    pub fn new(samples: Vec<AlignmentSample>, eval_preset: EvalPreset) -> Result<Self> {
        let landmarks = samples
            .first()
            .map(|s| s.truth.landmarks())
            .ok_or_else(|| Error::InvalidArgument("dataset has no samples".into()))?;
        for s in &samples {
            if s.truth.landmarks() != landmarks {
                return Err(Error::DimensionMismatch(format!(
                    "sample '{}' has {} landmarks, dataset has {}",
                    s.id,
                    s.truth.landmarks(),
                    landmarks
                )));
            }
        }
        Ok(Dataset {
            samples,
            landmarks,
            eval_preset,
        })
    }

    pub fn samples(&self) -> &[AlignmentSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<AlignmentSample> {
        self.samples
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn eval_preset(&self) -> EvalPreset {
        self.eval_preset
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        self.eval_preset.config(self.landmarks)
    }
}

/// Parses a pts annotation file:
///
/// ```text
/// version: 1
/// n_points: 2
/// {
/// 1.0 2.0
/// 3.0 4.0
/// }
/// ```
///
/// Points are stored in the file as `x y` (column before row) and converted
/// to the internal (row, col) layout here.
pub fn load_pts(path: &Path) -> Result<Shape> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pts(&text, &path.display().to_string())
}

fn parse_pts(text: &str, path: &str) -> Result<Shape> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    let (line, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file".into()))?;
    if !header.starts_with("version:") {
        return Err(err(line, format!("expected 'version:' header, found '{header}'")));
    }

    let (line, count_line) = lines
        .next()
        .ok_or_else(|| err(line, "missing 'n_points:' header".into()))?;
    let n_points: usize = count_line
        .strip_prefix("n_points:")
        .ok_or_else(|| err(line, format!("expected 'n_points:' header, found '{count_line}'")))?
        .trim()
        .parse()
        .map_err(|_| err(line, format!("invalid point count in '{count_line}'")))?;
    if n_points == 0 {
        return Err(err(line, "point count must be positive".into()));
    }

    let (line, brace) = lines
        .next()
        .ok_or_else(|| err(line, "missing '{'".into()))?;
    if brace != "{" {
        return Err(err(line, format!("expected '{{', found '{brace}'")));
    }

    let mut points = Vec::with_capacity(n_points);
    let mut last_line = line;
    for _ in 0..n_points {
        let (line, text) = lines.next().ok_or_else(|| {
            err(
                last_line,
                format!("expected {n_points} points, file ended after {}", points.len()),
            )
        })?;
        last_line = line;
        if text == "}" {
            return Err(err(
                line,
                format!("expected {n_points} points, found only {}", points.len()),
            ));
        }
        let mut tokens = text.split_whitespace();
        let (x, y) = match (tokens.next(), tokens.next(), tokens.next()) {
            (Some(x), Some(y), None) => (x, y),
            _ => return Err(err(line, format!("expected '<x> <y>', found '{text}'"))),
        };
        let x: f64 = x
            .parse()
            .map_err(|_| err(line, format!("non-numeric coordinate '{x}'")))?;
        let y: f64 = y
            .parse()
            .map_err(|_| err(line, format!("non-numeric coordinate '{y}'")))?;
        points.push((y, x)); // (row, col)
    }

    let (line, brace) = lines
        .next()
        .ok_or_else(|| err(last_line, "missing closing '}'".into()))?;
    if brace != "}" {
        return Err(err(line, format!("expected '}}', found '{brace}'")));
    }
    for (line, rest) in lines {
        if !rest.is_empty() {
            return Err(err(line, format!("unexpected content after '}}': '{rest}'")));
        }
    }

    Shape::from_points(&points).map_err(|e| err(last_line, e.to_string()))
}

/// Writes a shape in the pts format parsed by [`load_pts`] (six decimal
/// places, enough for sub-micro-pixel round trips).
pub fn save_pts(path: &Path, shape: &Shape) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "version: 1");
    let _ = writeln!(out, "n_points: {}", shape.landmarks());
    let _ = writeln!(out, "{{");
    for l in 0..shape.landmarks() {
        let (r, c) = shape.point(l);
        let _ = writeln!(out, "{c:.6} {r:.6}");
    }
    let _ = writeln!(out, "}}");
    write_atomic(path, out.as_bytes())
}

/// Writes bytes to a temporary sibling then renames into place, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads an image file (PNG or JPEG) as grayscale, weighting color channels
/// as 0.299 R + 0.587 G + 0.114 B.
pub fn load_gray_image(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let pixels = rgb
        .pixels()
        .map(|p| {
            let v = 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
            (v / 255.0).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::new(rgb.width() as usize, rgb.height() as usize, pixels)
}

/// Parses the bounding-box table: a CSV with the exact header
/// `id,top,left,height,width`.
fn parse_bbox_csv(path: &Path) -> Result<BTreeMap<String, BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "id,top,left,height,width")) => {}
        Some((line, other)) => {
            return Err(err(
                line,
                format!("expected header 'id,top,left,height,width', found '{other}'"),
            ))
        }
        None => return Err(err(1, "empty file".into())),
    }
    let mut boxes = BTreeMap::new();
    for (line, row) in lines {
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let mut nums = [0.0f64; 4];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f
                .parse()
                .map_err(|_| err(line, format!("non-numeric field '{f}'")))?;
        }
        let bbox = BoundingBox::new(nums[0], nums[1], nums[2], nums[3])
            .map_err(|e| err(line, e.to_string()))?;
        if boxes.insert(fields[0].to_string(), bbox).is_some() {
            return Err(err(line, format!("duplicate id '{}'", fields[0])));
        }
    }
    Ok(boxes)
}

/// Rescales a sample so its face box is exactly `target` px wide. A sample
/// already at the target width passes through untouched.
pub fn normalize_box_width(sample: AlignmentSample, target: f64) -> Result<AlignmentSample> {
    let scale = target / sample.bbox.width;
    if (scale - 1.0).abs() < 1e-9 {
        return Ok(sample);
    }
    let width = ((sample.image.width() as f64 * scale).round() as usize).max(1);
    let height = ((sample.image.height() as f64 * scale).round() as usize).max(1);
    let image = sample.image.resized(width, height)?;
    let truth = Shape::from_coords(sample.truth.coords() * scale)?;
    // The width is the quantity being normalized; write it exactly.
    let bbox = BoundingBox::new(
        sample.bbox.top * scale,
        sample.bbox.left * scale,
        sample.bbox.height * scale,
        target,
    )?;
    Ok(AlignmentSample {
        image,
        truth,
        bbox,
        id: sample.id,
        scale: sample.scale * scale,
    })
}

/// Loads a dataset laid out as an image directory plus a pts directory with
/// matching file stems, and an optional bounding-box CSV.
///
/// Samples come back sorted by id. A sample missing from the box table falls
/// back to its tight landmark box expanded 20% (logged). Every sample is
/// scale-normalized via [`normalize_box_width`].
pub fn load_dataset(
    images_dir: &Path,
    annotations_dir: &Path,
    bbox_file: Option<&Path>,
) -> Result<Dataset> {
    let mut image_paths: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries =
        fs::read_dir(images_dir).map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    for entry in entries {
        let path = entry
            .map_err(|e| Error::io(images_dir.display().to_string(), e))?
            .path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| {
                e.eq_ignore_ascii_case("png")
                    || e.eq_ignore_ascii_case("jpg")
                    || e.eq_ignore_ascii_case("jpeg")
            });
        if !is_image {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        image_paths.insert(stem, path);
    }
    if image_paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images found in {}",
            images_dir.display()
        )));
    }

    let boxes = match bbox_file {
        Some(path) => Some(parse_bbox_csv(path)?),
        None => None,
    };

    let mut samples = Vec::with_capacity(image_paths.len());
    for (id, img_path) in &image_paths {
        let pts_path = annotations_dir.join(format!("{id}.pts"));
        if !pts_path.exists() {
            return Err(Error::InvalidArgument(format!(
                "image '{id}' has no annotation file (expected {})",
                pts_path.display()
            )));
        }
        let truth = load_pts(&pts_path)?;
        let image = load_gray_image(img_path)?;
        let bbox = match boxes.as_ref().and_then(|b| b.get(id)) {
            Some(b) => *b,
            None => {
                log::warn!("no bounding box for '{id}'; using expanded tight landmark box");
                truth.tight_box()?.expanded(0.2)?
            }
        };
        samples.push(normalize_box_width(
            AlignmentSample {
                image,
                truth,
                bbox,
                id: id.clone(),
                scale: 1.0,
            },
            NORMALIZED_BOX_WIDTH,
        )?);
    }

    let landmarks = samples[0].truth.landmarks();
    let offenders: Vec<String> = samples
        .iter()
        .filter(|s| s.truth.landmarks() != landmarks)
        .map(|s| format!("{} ({} landmarks)", s.id, s.truth.landmarks()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "inconsistent landmark counts: expected {landmarks} as in '{}', but got {}",
            samples[0].id,
            offenders.join(", ")
        )));
    }

    Dataset::new(samples, EvalPreset::for_landmarks(landmarks))
}

/// Writes a dataset to `dir` in the layout read by [`load_dataset`]:
/// `images/*.png`, `annotations/*.pts`, and `bboxes.csv`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    let annotations_dir = dir.join("annotations");
    for d in [&images_dir, &annotations_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }

    let mut csv = String::from("id,top,left,height,width\n");
    for sample in dataset.samples() {
        save_pts(&annotations_dir.join(format!("{}.pts", sample.id)), &sample.truth)?;

        let raw: Vec<u8> = sample
            .image
            .pixels()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png)
            .write_image(
                &raw,
                sample.image.width() as u32,
                sample.image.height() as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(|e| Error::Decode {
                path: format!("{}.png", sample.id),
                msg: e.to_string(),
            })?;
        write_atomic(&images_dir.join(format!("{}.png", sample.id)), &png)?;

        let b = sample.bbox;
        let _ = writeln!(csv, "{},{},{},{},{}", sample.id, b.top, b.left, b.height, b.width);
    }
    write_atomic(&dir.join("bboxes.csv"), csv.as_bytes())
}

/// Generates a deterministic synthetic alignment benchmark.
///
/// Ground truth is an ellipse of L landmarks, randomly rotated and jittered
/// per sample. The image renders a Gaussian intensity blob at each landmark
/// over a smooth background, so the gradient field around a landmark encodes
/// its offset — shape-indexed descriptors carry a recoverable signal. Boxes
/// are the tight landmark boxes, and samples are produced already at the
/// normalized 200 px box width.
pub fn generate_synthetic(
    n_samples: usize,
    landmarks: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 samples (got {n_samples})"
        )));
    }
    if landmarks < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs at least 2 landmarks (got {landmarks})"
        )));
    }
    if !(noise_level.is_finite() && noise_level >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be finite and non-negative (got {noise_level})"
        )));
    }

    // Scene constants: ellipse radii (rows x cols), landmark jitter, blob
    // width, the margin around the face box, all in pre-normalization pixels.
    const RADIUS_R: f64 = 70.0;
    const RADIUS_C: f64 = 84.0;
    const JITTER: f64 = 5.0;
    const ROTATION: f64 = 0.1;
    const BLOB_SIGMA: f64 = 8.0;
    const MARGIN: f64 = 44.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let alpha = rng.random_range(-ROTATION..=ROTATION);
        let (sin_a, cos_a) = alpha.sin_cos();
        let mut points = Vec::with_capacity(landmarks);
        for l in 0..landmarks {
            let theta = 2.0 * PI * l as f64 / landmarks as f64;
            let dr = RADIUS_R * theta.sin();
            let dc = RADIUS_C * theta.cos();
            let jr: f64 = rng.sample::<f64, _>(StandardNormal) * JITTER;
            let jc: f64 = rng.sample::<f64, _>(StandardNormal) * JITTER;
            points.push((
                dr * cos_a - dc * sin_a + jr,
                dr * sin_a + dc * cos_a + jc,
            ));
        }

        // Normalize the scene so the tight landmark box is 200 px wide and
        // sits MARGIN px from the canvas edge.
        let min_r = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_r = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_c = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_c = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let k = NORMALIZED_BOX_WIDTH / (max_c - min_c);
        let points: Vec<(f64, f64)> = points
            .iter()
            .map(|p| ((p.0 - min_r) * k + MARGIN, (p.1 - min_c) * k + MARGIN))
            .collect();
        let box_height = (max_r - min_r) * k;
        let bbox = BoundingBox::new(MARGIN, MARGIN, box_height, NORMALIZED_BOX_WIDTH)?;

        let width = (NORMALIZED_BOX_WIDTH + 2.0 * MARGIN).ceil() as usize;
        let height = (box_height + 2.0 * MARGIN).ceil() as usize;

        let amplitudes: Vec<f64> = (0..landmarks)
            .map(|_| rng.random_range(0.45..0.65))
            .collect();
        let phase_r = rng.random_range(0.0..2.0 * PI);
        let phase_c = rng.random_range(0.0..2.0 * PI);

        // Smooth background plus per-pixel noise, then the landmark blobs.
        let row_wave: Vec<f64> = (0..height)
            .map(|r| 0.06 * (r as f64 / 23.0 + phase_r).sin())
            .collect();
        let col_wave: Vec<f64> = (0..width)
            .map(|c| (c as f64 / 29.0 + phase_c).cos())
            .collect();
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                let noise = (rng.random::<f64>() * 2.0 - 1.0) * noise_level;
                pixels.push(0.25 + row_wave[r] * col_wave[c] + noise);
            }
        }

        let sigma = BLOB_SIGMA * k;
        let window = (3.2 * sigma).ceil();
        for (l, &(pr, pc)) in points.iter().enumerate() {
            let r_lo = ((pr - window).floor().max(0.0)) as usize;
            let r_hi = ((pr + window).ceil().min(height as f64 - 1.0)) as usize;
            let c_lo = ((pc - window).floor().max(0.0)) as usize;
            let c_hi = ((pc + window).ceil().min(width as f64 - 1.0)) as usize;
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let d2 = (r as f64 - pr).powi(2) + (c as f64 - pc).powi(2);
                    if d2 <= window * window {
                        pixels[r * width + c] += amplitudes[l] * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }

        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }

        samples.push(AlignmentSample {
            image: GrayImage::new(width, height, pixels)?,
            truth: Shape::from_points(&points)?,
            bbox,
            id: format!("synth_{i:05}"),
            scale: 1.0,
        });
    }

    Dataset::new(samples, EvalPreset::Antipodal)
}
