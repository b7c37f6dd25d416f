//! Bags of per-pixel feature vectors sampled from a response field.

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gabor::GaborResponseField;

const BINARY_MAGIC: &[u8; 4] = b"OBSV";
pub const OBSERVATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("observation dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("observation set is empty")]
    Empty,
    #[error("malformed observation data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Row-major matrix of `len() × dim()` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    dim: usize,
    stride: usize,
    data: Vec<f64>,
}

impl ObservationSet {
    pub fn new(dim: usize, stride: usize, data: Vec<f64>) -> Result<Self, ObservationError> {
        if dim == 0 {
            return Err(ObservationError::Malformed(
                "dimension must be nonzero".into(),
            ));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(ObservationError::Malformed(format!(
                "{} values do not form rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, stride, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ObservationError> {
        let dim = rows.first().ok_or(ObservationError::Empty)?.as_ref().len();
        let mut data = Vec::with_capacity(dim * rows.len());
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(ObservationError::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, 1, data)
    }

    /// Scalar samples as one-dimensional observations.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self::new(1, 1, values.to_vec()).expect("dim 1 always divides")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &ObservationSet) -> Result<(), ObservationError> {
        if other.dim != self.dim {
            return Err(ObservationError::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn concat<'a, I>(sets: I) -> Result<ObservationSet, ObservationError>
    where
        I: IntoIterator<Item = &'a ObservationSet>,
    {
        let mut iter = sets.into_iter();
        let mut out = iter.next().ok_or(ObservationError::Empty)?.clone();
        for set in iter {
            out.extend(set)?;
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        w.flush()
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ObservationError> {
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ObservationError::Malformed(format!("line {}: {e}", n + 1)))?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Versioned little-endian binary form:
    /// `"OBSV" | version u32 | dim u32 | stride u32 | count u64 | f64 * dim * count`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&OBSERVATION_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.stride as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, ObservationError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(ObservationError::Malformed("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> io::Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != OBSERVATION_FORMAT_VERSION {
            return Err(ObservationError::Malformed(format!(
                "unsupported format version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let stride = read_u32(&mut r)? as usize;
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let total = dim
            .checked_mul(count)
            .ok_or_else(|| ObservationError::Malformed("size overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 8 {
            return Err(ObservationError::Malformed(format!(
                "expected {} payload bytes, found {}",
                total * 8,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(dim, stride, data)
    }
}

/// Samples the channel vector at grid points `(i·stride, j·stride)`, row-major.
pub fn downsample(field: &GaborResponseField, stride: usize) -> ObservationSet {
    assert!(stride >= 1, "stride must be at least 1");
    let dim = field.num_channels();
    let mut data = Vec::new();
    for y in (0..field.height()).step_by(stride) {
        for x in (0..field.width()).step_by(stride) {
            data.extend((0..dim).map(|c| field.at(c, x, y)));
        }
    }
    ObservationSet::new(dim, stride, data).expect("rows of field width")
}

/// Per-dimension affine standardization to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `data`; dimensions with zero spread keep
    /// unit scale.
    pub fn fit(data: &ObservationSet) -> Result<Self, ObservationError> {
        if data.is_empty() {
            return Err(ObservationError::Empty);
        }
        let n = data.len() as f64;
        let dim = data.dim();
        let mut mean = vec![0.0; dim];
        for row in data.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &ObservationSet) -> Result<ObservationSet, ObservationError> {
        if data.dim() != self.mean.len() {
            return Err(ObservationError::DimensionMismatch {
                expected: self.mean.len(),
                actual: data.dim(),
            });
        }
        let mut out = Vec::with_capacity(data.as_flat().len());
        for row in data.rows() {
            out.extend(
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s),
            );
        }
        ObservationSet::new(data.dim(), data.stride(), out)
    }
}
