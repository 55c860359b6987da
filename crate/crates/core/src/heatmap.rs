//! Single-channel 2-D target distribution maps and their on-disk forms
//! (`CTHM` binary and an 8-bit PGM preview).

use std::fs;
use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Matrix;

pub const HEATMAP_MAGIC: [u8; 4] = *b"CTHM";
pub const HEATMAP_VERSION: u32 = 1;

/// Row-major `height × width` grid of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, normalized: bool) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "heatmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite heatmap value at {i}")));
        }
        if normalized && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("normalized heatmap outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            values,
            normalized,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            normalized: true,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Flattened `L×1` column, inverse of `reshape_to_2d`.
    pub fn flatten(&self) -> Matrix {
        Matrix::column(self.values.clone())
    }

    /// Index of the first maximal value (row-major).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// `(row, col)` of [`Heatmap::argmax`].
    pub fn argmax_cell(&self) -> (usize, usize) {
        let i = self.argmax();
        (i / self.width, i % self.width)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min-max rescaling to `[0, 1]`. A constant map becomes all zeros.
    pub fn normalize(&self) -> Heatmap {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Heatmap {
            width: self.width,
            height: self.height,
            values,
            normalized: true,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&HEATMAP_MAGIC);
        w.u32(HEATMAP_VERSION as usize);
        w.u32(self.width);
        w.u32(self.height);
        w.u8(u8::from(self.normalized));
        w.f32s(&self.values);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Heatmap> {
        let mut r = Reader::new(bytes);
        r.magic(HEATMAP_MAGIC)?;
        r.version(HEATMAP_VERSION)?;
        let width = r.dim("width", 1)?;
        let height = r.dim("height", 1)?;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(FormatError::Header(format!("normalized flag {f}")).into()),
        };
        let n = width
            .checked_mul(height)
            .ok_or_else(|| FormatError::Header("heatmap size overflows".into()))?;
        let values = r.f32s(n, 0)?;
        r.finish()?;
        if normalized && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FormatError::Layout("normalized flag set but values outside [0, 1]".into()).into());
        }
        Ok(Heatmap {
            width,
            height,
            values,
            normalized,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Heatmap> {
        Heatmap::from_bytes(&fs::read(path)?)
    }

    /// Binary PGM (P5) of the normalized map, `round(255·v)` per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let norm = if self.normalized {
            self.clone()
        } else {
            self.normalize()
        };
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(norm.values.iter().map(|v| (255.0 * v).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_pgm())
    }

    /// Rounds every value to `f32` precision.
    pub fn quantized(&self) -> Heatmap {
        Heatmap {
            values: self.values.iter().map(|&v| codec::quantize_f32(v)).collect(),
            ..self.clone()
        }
    }
}
