//! Feature interchange formats: grounding bundles (`CTFB`) and tracker token
//! grids (`CTTG`).
//!
//! All integers are little-endian `u32`, all tensors 32-bit reals row-major.
//!
//! ```text
//! CTFB: "CTFB" ver D' L_gl valid_text K (w_k h_k)×K  text[L_gl×D']  image[L_gx×D']
//! CTTG: "CTTG" ver D L_tx w_tx h_tx  tokens[L_tx×D]
//! ```

use std::fs;
use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{FeatureMap3D, Matrix};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CTFB";
pub const GRID_MAGIC: [u8; 4] = *b"CTTG";
pub const FORMAT_VERSION: u32 = 1;

/// Multi-scale token arrangement, shallow scale first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleLayout {
    dims: Vec<(usize, usize)>,
}

impl ScaleLayout {
    pub fn new(dims: Vec<(usize, usize)>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("layout needs at least one scale"));
        }
        if dims.iter().any(|&(w, h)| w == 0 || h == 0) {
            return Err(Error::shape("scale dimensions must be >= 1"));
        }
        Ok(Self { dims })
    }

    pub fn num_scales(&self) -> usize {
        self.dims.len()
    }

    /// `(w_k, h_k)` for 1-based scale `k`.
    pub fn dims(&self, k: usize) -> Result<(usize, usize)> {
        self.check(k)?;
        Ok(self.dims[k - 1])
    }

    pub fn all_dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    /// Cumulative `(S_k, E_k)` token indices for 1-based scale `k`.
    pub fn span(&self, k: usize) -> Result<(usize, usize)> {
        self.check(k)?;
        let start: usize = self.dims[..k - 1].iter().map(|(w, h)| w * h).sum();
        let (w, h) = self.dims[k - 1];
        Ok((start, start + w * h))
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        (1..=self.dims.len()).map(|k| self.span(k).expect("in range")).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.dims.iter().map(|(w, h)| w * h).sum()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.dims.len() {
            return Err(Error::Range {
                index: k,
                len: self.dims.len(),
            });
        }
        Ok(())
    }
}

/// Aligned text and multi-scale image features from a grounding encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    text_tokens: Matrix,
    valid_text: usize,
    layout: ScaleLayout,
    image_tokens: Matrix,
}

impl FeatureBundle {
    pub fn new(text_tokens: Matrix, valid_text: usize, layout: ScaleLayout, image_tokens: Matrix) -> Result<Self> {
        if text_tokens.cols() != image_tokens.cols() {
            return Err(Error::shape(format!(
                "text dim {} != image dim {}",
                text_tokens.cols(),
                image_tokens.cols()
            )));
        }
        if text_tokens.cols() == 0 {
            return Err(Error::shape("feature dimension must be >= 1"));
        }
        if valid_text == 0 {
            return Err(Error::EmptyText);
        }
        if valid_text > text_tokens.rows() {
            return Err(Error::shape(format!(
                "valid_text {valid_text} exceeds {} text rows",
                text_tokens.rows()
            )));
        }
        if layout.total_tokens() != image_tokens.rows() {
            return Err(FormatError::Layout(format!(
                "layout covers {} tokens but {} image tokens present",
                layout.total_tokens(),
                image_tokens.rows()
            ))
            .into());
        }
        let padding = &text_tokens.data()[valid_text * text_tokens.cols()..];
        if padding.iter().any(|&v| v != 0.0) {
            return Err(FormatError::Layout("text padding rows must be zero".into()).into());
        }
        if !text_tokens.is_finite() || !image_tokens.is_finite() {
            return Err(Error::Numeric("non-finite bundle values".into()));
        }
        Ok(Self {
            text_tokens,
            valid_text,
            layout,
            image_tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_tokens.cols()
    }

    pub fn text_tokens(&self) -> &Matrix {
        &self.text_tokens
    }

    pub fn valid_text(&self) -> usize {
        self.valid_text
    }

    pub fn layout(&self) -> &ScaleLayout {
        &self.layout
    }

    pub fn image_tokens(&self) -> &Matrix {
        &self.image_tokens
    }

    /// Replaces the text tokens, keeping the image side.
    pub fn with_text(&self, text_tokens: Matrix, valid_text: usize) -> Result<FeatureBundle> {
        FeatureBundle::new(text_tokens, valid_text, self.layout.clone(), self.image_tokens.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&BUNDLE_MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.u32(self.dim());
        w.u32(self.text_tokens.rows());
        w.u32(self.valid_text);
        w.u32(self.layout.num_scales());
        for &(sw, sh) in self.layout.all_dims() {
            w.u32(sw);
            w.u32(sh);
        }
        w.f32s(self.text_tokens.data());
        w.f32s(self.image_tokens.data());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FeatureBundle> {
        let mut r = Reader::new(bytes);
        r.magic(BUNDLE_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let dim = r.dim("D'", 1)?;
        let text_rows = r.dim("L_gl", 1)?;
        let valid_text = r.dim("valid_text", 1)?;
        if valid_text > text_rows {
            return Err(FormatError::Header(format!("valid_text {valid_text} exceeds L_gl {text_rows}")).into());
        }
        let k = r.dim("K", 1)?;
        // Each scale needs 8 header bytes; reject absurd K before allocating.
        if k > bytes.len() / 8 {
            return Err(FormatError::Truncated {
                needed: k * 8,
                available: bytes.len(),
            }
            .into());
        }
        let mut dims = Vec::with_capacity(k);
        for _ in 0..k {
            let sw = r.dim("w_k", 1)?;
            let sh = r.dim("h_k", 1)?;
            dims.push((sw, sh));
        }
        let total = dims
            .iter()
            .try_fold(0usize, |acc, &(sw, sh)| {
                sw.checked_mul(sh).and_then(|n| acc.checked_add(n))
            })
            .ok_or_else(|| FormatError::Header("layout size overflows".into()))?;
        let text_n = text_rows
            .checked_mul(dim)
            .ok_or_else(|| FormatError::Header("text size overflows".into()))?;
        let image_n = total
            .checked_mul(dim)
            .ok_or_else(|| FormatError::Header("image size overflows".into()))?;
        let text = r.f32s(text_n, 0)?;
        let image = r.f32s(image_n, text_n)?;
        r.finish()?;
        FeatureBundle::new(
            Matrix::new(text_rows, dim, text)?,
            valid_text,
            ScaleLayout::new(dims)?,
            Matrix::new(total, dim, image)?,
        )
    }
}

pub fn write_bundle(b: &FeatureBundle, path: &Path) -> Result<()> {
    codec::write_file(path, &b.to_bytes())
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle> {
    FeatureBundle::from_bytes(&fs::read(path)?)
}

/// Image tokens of 1-based scale `k` (rows `S_k..E_k`).
pub fn slice_scale(b: &FeatureBundle, k: usize) -> Result<Matrix> {
    let (start, end) = b.layout.span(k)?;
    b.image_tokens.row_range(start, end)
}

/// Tracker search tokens laid out on a `w_tx × h_tx` grid. Token `i` sits at
/// row `i / w_tx`, column `i % w_tx`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    width: usize,
    height: usize,
    tokens: Matrix,
}

impl TokenGrid {
    pub fn new(width: usize, height: usize, tokens: Matrix) -> Result<Self> {
        if width == 0 || height == 0 || tokens.cols() == 0 {
            return Err(Error::shape("token grid dimensions must be >= 1"));
        }
        if tokens.rows() != width * height {
            return Err(Error::shape(format!(
                "{} tokens cannot fill a {width}x{height} grid",
                tokens.rows()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::Numeric("non-finite token values".into()));
        }
        Ok(Self { width, height, tokens })
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    /// `(L_tx, D, w_tx, h_tx)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.len(), self.dim(), self.width, self.height)
    }

    /// Sequence → `D × h_tx × w_tx` feature map.
    pub fn to_feature_map(&self) -> FeatureMap3D {
        let (d, n) = (self.dim(), self.len());
        let mut data = vec![0.0; d * n];
        for i in 0..n {
            for (c, &v) in self.tokens.row(i).iter().enumerate() {
                data[c * n + i] = v;
            }
        }
        FeatureMap3D::new(d, self.height, self.width, data).expect("consistent shape")
    }

    /// Inverse of [`TokenGrid::to_feature_map`].
    pub fn from_feature_map(f: &FeatureMap3D) -> Result<TokenGrid> {
        let (d, h, w) = (f.channels(), f.height(), f.width());
        let n = h * w;
        let mut data = vec![0.0; d * n];
        for c in 0..d {
            for (i, &v) in f.plane(c).iter().enumerate() {
                data[i * d + c] = v;
            }
        }
        TokenGrid::new(w, h, Matrix::new(n, d, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&GRID_MAGIC);
        w.u32(FORMAT_VERSION as usize);
        w.u32(self.dim());
        w.u32(self.len());
        w.u32(self.width);
        w.u32(self.height);
        w.f32s(self.tokens.data());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TokenGrid> {
        let mut r = Reader::new(bytes);
        r.magic(GRID_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let dim = r.dim("D", 1)?;
        let len = r.dim("L_tx", 1)?;
        let width = r.dim("w_tx", 1)?;
        let height = r.dim("h_tx", 1)?;
        if width.checked_mul(height) != Some(len) {
            return Err(Error::shape(format!(
                "header L_tx = {len} but grid is {width}x{height}"
            )));
        }
        let n = len
            .checked_mul(dim)
            .ok_or_else(|| FormatError::Header("payload size overflows".into()))?;
        let tokens = r.f32s(n, 0)?;
        r.finish()?;
        TokenGrid::new(width, height, Matrix::new(len, dim, tokens)?)
    }
}

pub fn write_token_grid(g: &TokenGrid, path: &Path) -> Result<()> {
    codec::write_file(path, &g.to_bytes())
}

pub fn read_token_grid(path: &Path) -> Result<TokenGrid> {
    TokenGrid::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_bundle() -> FeatureBundle {
        let layout = ScaleLayout::new(vec![(2, 1), (1, 1)]).unwrap();
        let text = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let image = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        FeatureBundle::new(text, 1, layout, image).unwrap()
    }

    #[test]
    fn spans_are_cumulative() {
        let layout = ScaleLayout::new(vec![(32, 32), (16, 16), (8, 8), (4, 4)]).unwrap();
        assert_eq!(
            layout.spans(),
            vec![(0, 1024), (1024, 1280), (1280, 1344), (1344, 1360)]
        );
        assert_eq!(layout.total_tokens(), 1360);
        assert!(matches!(layout.span(5), Err(Error::Range { index: 5, len: 4 })));
        assert!(matches!(layout.span(0), Err(Error::Range { .. })));
    }

    #[test]
    fn bundle_rejects_layout_mismatch() {
        let layout = ScaleLayout::new(vec![(2, 2)]).unwrap();
        let err = FeatureBundle::new(Matrix::zeros(1, 2), 1, layout, Matrix::zeros(3, 2));
        assert!(matches!(err, Err(Error::Format(FormatError::Layout(_)))));
    }

    #[test]
    fn bundle_rejects_dirty_padding() {
        let layout = ScaleLayout::new(vec![(1, 1)]).unwrap();
        let text = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let err = FeatureBundle::new(text, 1, layout, Matrix::zeros(1, 1));
        assert!(matches!(err, Err(Error::Format(FormatError::Layout(_)))));
    }

    #[test]
    fn bundle_bytes_round_trip() {
        let b = tiny_bundle();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 * 5 + 2 * 8 + (4 + 6) * 4);
        assert_eq!(FeatureBundle::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn slice_scale_rows() {
        let b = tiny_bundle();
        assert_eq!(slice_scale(&b, 1).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(slice_scale(&b, 2).unwrap().data(), &[5.0, 6.0]);
        assert!(matches!(slice_scale(&b, 3), Err(Error::Range { .. })));
    }

    #[test]
    fn grid_feature_map_layout() {
        // 3 wide, 2 high, D = 2; token i carries (i, 10 i).
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 10.0 * i as f64]).collect();
        let g = TokenGrid::new(3, 2, Matrix::from_rows(&rows).unwrap()).unwrap();
        let f = g.to_feature_map();
        assert_eq!((f.channels(), f.height(), f.width()), (2, 2, 3));
        assert_eq!(f.get(0, 1, 2), 5.0);
        assert_eq!(f.get(1, 0, 1), 10.0);
        assert_eq!(TokenGrid::from_feature_map(&f).unwrap(), g);
    }

    #[test]
    fn grid_header_shape_error() {
        let g = TokenGrid::new(2, 2, Matrix::zeros(4, 3)).unwrap();
        let mut bytes = g.to_bytes();
        bytes[12..16].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(TokenGrid::from_bytes(&bytes), Err(Error::Shape(_))));
    }

    #[test]
    fn grid_payload_size() {
        let g = TokenGrid::new(16, 16, Matrix::zeros(256, 256)).unwrap();
        assert_eq!(g.to_bytes().len() - 24, 16 * 16 * 256 * 4);
    }
}
