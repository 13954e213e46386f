//! Binary model container.
//!
//! Fixed little-endian layout, magic `ICR1`, version 1:
//!
//! ```text
//! magic [4]  version u32  stages u32  landmarks u32  nodes u32  features u32
//! activation u32  patch_size u32  grid u32  bins u32  ridge f64
//! reference shape coords [2L f64]
//! per stage: weights [K*f], biases [K], beta [K*2L], kmat [K*K],
//!            mu [2L], sigma [2L*2L], samples_seen u64
//! ```
//!
//! Matrices are row-major. The Gram matrix and per-stage sample counts are
//! stored so a reloaded model keeps accepting incremental updates exactly
//! where the saved one left off; saving and reloading is bitwise lossless,
//! so a round-tripped model file is byte-identical to the original.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::cascade::{CascadeModel, StageRegressor, StageStatistics};
use crate::dataset::write_atomic;
use crate::elm::{Activation, ElmModel, HiddenLayer};
use crate::error::{Error, Result};
use crate::features::DescriptorConfig;
use crate::shape::Shape;

pub const MAGIC: [u8; 4] = *b"ICR1";
pub const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            push_f64(out, m[(r, c)]);
        }
    }
}

fn as_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::Container(format!("{what} ({value}) exceeds the u32 header field")))
}

/// Serializes a model to the container byte layout.
///
/// All stages must share hidden-node count, ridge, and activation (models
/// produced by training and updating always do), and the stage feature
/// dimension must match what the recorded descriptor produces — models
/// trained with a custom feature source cannot be serialized.
pub fn model_to_bytes(model: &CascadeModel) -> Result<Vec<u8>> {
    let landmarks = model.landmarks();
    let dim2l = 2 * landmarks;
    let descriptor = *model.descriptor();
    let (nodes, feature_dim, activation, ridge) = match model.stages().first() {
        Some(first) => {
            let nodes = first.elm.layer().nodes();
            let feature_dim = first.elm.layer().features();
            let activation = first.elm.layer().activation();
            let ridge = first.elm.ridge();
            for stage in model.stages() {
                if stage.elm.layer().nodes() != nodes
                    || stage.elm.ridge() != ridge
                    || stage.elm.layer().activation() != activation
                {
                    return Err(Error::Container(format!(
                        "stage {} disagrees with stage 0 on nodes, ridge, or activation",
                        stage.stage_index
                    )));
                }
            }
            (nodes, feature_dim, activation, ridge)
        }
        None => (0, descriptor.feature_len(landmarks), Activation::Sigmoid, 0.0),
    };
    if feature_dim != descriptor.feature_len(landmarks) {
        return Err(Error::Container(format!(
            "stages expect {feature_dim} features but the recorded descriptor produces {} \
             for {landmarks} landmarks; only descriptor-based models serialize",
            descriptor.feature_len(landmarks)
        )));
    }

    let stage_doubles = nodes * feature_dim + nodes + nodes * dim2l + nodes * nodes
        + dim2l + dim2l * dim2l;
    let mut out = Vec::with_capacity(
        48 + dim2l * 8 + model.stages().len() * (stage_doubles * 8 + 8),
    );
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, as_u32(model.stages().len(), "stage count")?);
    push_u32(&mut out, as_u32(landmarks, "landmark count")?);
    push_u32(&mut out, as_u32(nodes, "hidden node count")?);
    push_u32(&mut out, as_u32(feature_dim, "feature dimension")?);
    push_u32(&mut out, activation.id());
    push_u32(&mut out, as_u32(descriptor.patch_size, "patch size")?);
    push_u32(&mut out, as_u32(descriptor.grid, "descriptor grid")?);
    push_u32(&mut out, as_u32(descriptor.bins, "descriptor bins")?);
    push_f64(&mut out, ridge);
    for &v in model.reference_shape().coords().iter() {
        push_f64(&mut out, v);
    }
    for stage in model.stages() {
        push_row_major(&mut out, stage.elm.layer().weights());
        for &v in stage.elm.layer().biases().iter() {
            push_f64(&mut out, v);
        }
        push_row_major(&mut out, stage.elm.beta());
        push_row_major(&mut out, stage.elm.kmat());
        let stats = &model.stats()[stage.stage_index];
        for &v in stats.mu().iter() {
            push_f64(&mut out, v);
        }
        push_row_major(&mut out, stats.sigma());
        push_u64(&mut out, stage.elm.samples_seen());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::Container(format!(
                "truncated: wanted {n} bytes at offset {}, only {remaining} left",
                self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `n` doubles; `n` is computed from header fields, so it is
    /// bounds-checked against the remaining bytes before any allocation.
    fn f64_vec(&mut self, n: u64) -> Result<Vec<f64>> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining / 8 {
            return Err(Error::Container(format!(
                "truncated: wanted {n} doubles at offset {}, only {remaining} bytes left",
                self.pos
            )));
        }
        Ok(self
            .take(n as usize * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Deserializes a model from container bytes, re-validating every structural
/// invariant (dimensions, finiteness, Gram symmetry) on the way in.
pub fn model_from_bytes(bytes: &[u8]) -> Result<CascadeModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Container("bad magic, not a model container".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let stages_n = r.u32()? as u64;
    let landmarks = r.u32()? as u64;
    let nodes = r.u32()? as u64;
    let feature_dim = r.u32()? as u64;
    let activation = Activation::from_id(r.u32()?)?;
    let patch_size = r.u32()? as usize;
    let grid = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let ridge = r.f64()?;
    if landmarks == 0 {
        return Err(Error::Container("zero landmarks in header".into()));
    }
    let descriptor = DescriptorConfig::new(patch_size, grid, bins)?;
    let dim2l = 2 * landmarks;
    if stages_n > 0 && feature_dim != descriptor.feature_len(landmarks as usize) as u64 {
        return Err(Error::Container(format!(
            "header feature dimension {feature_dim} does not match the descriptor ({})",
            descriptor.feature_len(landmarks as usize)
        )));
    }

    let reference = Shape::from_coords(DVector::from_vec(r.f64_vec(dim2l)?))?;
    let mut stages = Vec::with_capacity(stages_n as usize);
    let mut stats = Vec::with_capacity(stages_n as usize);
    for stage_index in 0..stages_n as usize {
        let weights = DMatrix::from_row_slice(
            nodes as usize,
            feature_dim as usize,
            &r.f64_vec(nodes * feature_dim)?,
        );
        let biases = DVector::from_vec(r.f64_vec(nodes)?);
        let beta =
            DMatrix::from_row_slice(nodes as usize, dim2l as usize, &r.f64_vec(nodes * dim2l)?);
        let kmat =
            DMatrix::from_row_slice(nodes as usize, nodes as usize, &r.f64_vec(nodes * nodes)?);
        let mu = DVector::from_vec(r.f64_vec(dim2l)?);
        let sigma =
            DMatrix::from_row_slice(dim2l as usize, dim2l as usize, &r.f64_vec(dim2l * dim2l)?);
        let samples_seen = r.u64()?;

        let layer = HiddenLayer::from_parts(weights, biases, activation)?;
        let elm = ElmModel::from_parts(layer, beta, kmat, ridge, samples_seen)?;
        stages.push(StageRegressor { elm, stage_index });
        stats.push(StageStatistics::from_moments(mu, sigma)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Container(format!(
            "{} trailing bytes after the last stage",
            bytes.len() - r.pos
        )));
    }
    CascadeModel::from_parts(stages, stats, reference, descriptor)
}

/// Writes a model container atomically (temp file + rename).
pub fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    write_atomic(path, &bytes)
}

/// Reads a model container, prefixing parse errors with the file path.
pub fn load_model(path: &Path) -> Result<CascadeModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Container(msg) => Error::Container(format!("{}: {msg}", path.display())),
        other => other,
    })
}
