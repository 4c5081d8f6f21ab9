//! Dense tensors, validated map wrappers and the U2TN binary container.
//!
//! U2TN v1 layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `55 32 54 4E` ("U2TN") |
//! | 4     | version, always 1 |
//! | 5     | dtype code: 0=f32, 1=f64, 2=i32, 3=u8 |
//! | 6     | ndim, at most 8 |
//! | 7     | reserved, 0 |
//! | 8..   | ndim x u64 extents, then the row-major payload |
//!
//! There is no padding and no checksum.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Label value marking a pixel excluded from supervision.
pub const IGNORE: i32 = -1;

pub const MAGIC: [u8; 4] = *b"U2TN";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 8;

/// Tolerance on the per-pixel probability sum.
pub const SIMPLEX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    I32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::I32),
            3 => Ok(DType::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Flat row-major payload.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::U8(_) => DType::U8,
        }
    }
}

/// Dense n-dimensional array. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("extent product of {shape:?} overflows")))
    })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > MAX_NDIM {
            return Err(Error::Shape(format!(
                "ndim {} exceeds maximum {MAX_NDIM}",
                shape.len()
            )));
        }
        let numel = checked_numel(&shape)?;
        // payload size in bytes must also be representable
        numel
            .checked_mul(data.dtype().size())
            .ok_or_else(|| Error::Shape(format!("byte size of {shape:?} overflows")))?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, TensorData::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, TensorData::I32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    /// Floating payload promoted to f64. Integer tensors yield `None`.
    pub fn to_f64_vec(&self) -> Option<Vec<f64>> {
        match &self.data {
            TensorData::F64(v) => Some(v.clone()),
            TensorData::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = [0u8; 8];
        header[..4].copy_from_slice(&MAGIC);
        header[4] = VERSION;
        header[5] = self.dtype().code();
        header[6] = self.shape.len() as u8;
        w.write_all(&header)?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match &self.data {
            TensorData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::I32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            TensorData::U8(v) => w.write_all(v)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 8];
        read_exact(&mut r, &mut header, "header")?;
        if header[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &header[..4])));
        }
        if header[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", header[4])));
        }
        let dtype = DType::from_code(header[5])?;
        let ndim = header[6] as usize;
        if ndim > MAX_NDIM {
            return Err(Error::Format(format!("ndim {ndim} exceeds {MAX_NDIM}")));
        }
        if header[7] != 0 {
            return Err(Error::Format("reserved byte is not zero".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "extents")?;
            let d = u64::from_le_bytes(b);
            let d = usize::try_from(d)
                .map_err(|_| Error::Format(format!("extent {d} does not fit in memory")))?;
            shape.push(d);
        }
        let numel = checked_numel(&shape).map_err(|e| Error::Format(e.to_string()))?;
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;

        // Read through `take` so a corrupt header cannot trigger a huge allocation.
        let mut payload = Vec::new();
        r.by_ref().take(nbytes as u64).read_to_end(&mut payload)?;
        if payload.len() != nbytes {
            return Err(Error::Format(format!(
                "truncated payload: expected {nbytes} bytes, got {}",
                payload.len()
            )));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I32 => TensorData::I32(
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(payload),
        };
        Tensor::new(shape, data)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated {what}"))
        } else {
            Error::Stream(e)
        }
    })
}

/// Spatial extents shared by every per-pixel map: images x rows x cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub images: usize,
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(images: usize, height: usize, width: usize) -> Self {
        Self {
            images,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.images * self.height * self.width
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    fn from_shape(shape: &[usize], what: &str) -> Result<Self> {
        if shape.len() < 3 {
            return Err(Error::Shape(format!(
                "{what} needs at least 3 dims, got {shape:?}"
            )));
        }
        Ok(Self::new(shape[0], shape[1], shape[2]))
    }
}

/// Per-pixel softmax distributions, shape `[B, H, W, C]`, stored as f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    dims: GridDims,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbBatch {
    /// Validates the simplex constraint pixel by pixel.
    pub fn new(dims: GridDims, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if probs.len() != dims.pixels() * classes {
            return Err(Error::Shape(format!(
                "expected {} probabilities, got {}",
                dims.pixels() * classes,
                probs.len()
            )));
        }
        for (pixel, row) in probs.chunks_exact(classes).enumerate() {
            if let Some(c) = row.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "pixel {pixel}: entry {c} = {} is negative or not finite",
                    row[c]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Validation(format!(
                    "pixel {pixel}: probabilities sum to {sum}"
                )));
            }
        }
        Ok(Self {
            dims,
            classes,
            probs,
        })
    }

    /// Softmax of raw logits laid out as `[pixels, C]`.
    pub fn from_logits(dims: GridDims, classes: usize, logits: &[f64]) -> Result<Self> {
        let mut probs = logits.to_vec();
        for row in probs.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        Self::new(dims, classes, probs)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.dims.pixels()
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    pub fn iter_pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.classes)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims;
        Tensor::from_f64(vec![d.images, d.height, d.width, self.classes], self.probs.clone())
            .expect("validated shape")
    }
}

/// Checks a `[B, H, W, C]` floating tensor against the probability simplex.
pub fn validate_prob_batch(t: &Tensor) -> Result<ProbBatch> {
    if t.ndim() != 4 {
        return Err(Error::Shape(format!(
            "probability batch needs 4 dims, got {:?}",
            t.shape()
        )));
    }
    let probs = t
        .to_f64_vec()
        .ok_or_else(|| Error::Validation(format!("dtype {:?} is not floating", t.dtype())))?;
    let dims = GridDims::from_shape(t.shape(), "probability batch")?;
    ProbBatch::new(dims, t.shape()[3], probs)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-pixel class ids in `[0, C)` or [`IGNORE`], shape `[B, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: GridDims,
    classes: usize,
    labels: Vec<i32>,
}

impl LabelMap {
    pub fn new(dims: GridDims, classes: usize, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != dims.pixels() {
            return Err(Error::Shape(format!(
                "expected {} labels, got {}",
                dims.pixels(),
                labels.len()
            )));
        }
        if let Some(i) = labels
            .iter()
            .position(|&l| l != IGNORE && (l < 0 || l as usize >= classes))
        {
            return Err(Error::Validation(format!(
                "pixel {i}: label {} outside [0, {classes}) and not IGNORE",
                labels[i]
            )));
        }
        Ok(Self {
            dims,
            classes,
            labels,
        })
    }

    pub fn from_tensor(t: &Tensor, classes: usize) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Shape(format!(
                "label map needs 3 dims, got {:?}",
                t.shape()
            )));
        }
        let labels = t
            .as_i32()
            .ok_or_else(|| Error::Validation("label map must be i32".into()))?;
        Self::new(GridDims::from_shape(t.shape(), "label map")?, classes, labels.to_vec())
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[i32] {
        &self.labels
    }

    pub fn get(&self, pixel: usize) -> Option<usize> {
        match self.labels[pixel] {
            IGNORE => None,
            l => Some(l as usize),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims;
        Tensor::from_i32(vec![d.images, d.height, d.width], self.labels.clone())
            .expect("validated shape")
    }
}

/// Per-pixel representation vectors, shape `[B, H, W, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprBatch {
    dims: GridDims,
    dim: usize,
    data: Vec<f64>,
}

impl ReprBatch {
    pub fn new(dims: GridDims, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Validation(format!(
                "representation dimension must be >= 2, got {dim}"
            )));
        }
        if data.len() != dims.pixels() * dim {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                dims.pixels() * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite representation entry at pixel {}",
                i / dim
            )));
        }
        Ok(Self { dims, dim, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 4 {
            return Err(Error::Shape(format!(
                "representation batch needs 4 dims, got {:?}",
                t.shape()
            )));
        }
        let data = t
            .to_f64_vec()
            .ok_or_else(|| Error::Validation("representations must be floating".into()))?;
        Self::new(GridDims::from_shape(t.shape(), "representation batch")?, t.shape()[3], data)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        let d = self.dims;
        Tensor::from_f64(vec![d.images, d.height, d.width, self.dim], self.data.clone())
            .expect("validated shape")
    }
}
