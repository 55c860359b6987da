//! Dense tensor substrate: row-major matrices, channel-major feature maps,
//! fixed 3×3 convolutions with exact backward passes, and a central
//! finite-difference gradient checker.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible on a
//! given machine.

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::shape(format!(
                "row range {start}..{end} outside 0..{}",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::shape("vstack column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Matrix::new(rows, cols, data)
    }
}

/// Standard matrix product. Each output element accumulates its inner
/// products strictly left to right over the shared dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let dst = &mut out.data[i * m..(i + 1) * m];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let src = &b.data[k * m..(k + 1) * m];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += aik * s;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_transposed {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Per-row mean over the first `valid_cols` columns.
pub fn mean_last_dim(a: &Matrix, valid_cols: usize) -> Result<Matrix> {
    if valid_cols == 0 {
        return Err(Error::EmptyText);
    }
    if valid_cols > a.cols {
        return Err(Error::shape(format!(
            "valid_cols {valid_cols} exceeds {} columns",
            a.cols
        )));
    }
    let inv = valid_cols as f64;
    let data = (0..a.rows)
        .map(|r| a.row(r)[..valid_cols].iter().sum::<f64>() / inv)
        .collect();
    Ok(Matrix::column(data))
}

/// Row-major unflattening of an `L×1` column into a `w×h` map:
/// element `(r, c)` is `v[r·w + c]`.
pub fn reshape_to_2d(v: &Matrix, w: usize, h: usize) -> Result<Heatmap> {
    if v.cols != 1 || v.rows != w * h {
        return Err(Error::shape(format!(
            "cannot reshape {}x{} into {w}x{h}",
            v.rows, v.cols
        )));
    }
    Heatmap::new(w, h, v.data.clone(), false)
}

/// Bilinear resampling with the half-pixel (align-corners = false)
/// convention, sampling coordinates clamped to the border.
pub fn bilinear_resize(h: &Heatmap, out_w: usize, out_h: usize) -> Result<Heatmap> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::shape("zero output dimension"));
    }
    if h.width() == 0 || h.height() == 0 {
        return Err(Error::shape("empty input heatmap"));
    }
    if out_w == h.width() && out_h == h.height() {
        return Ok(h.clone());
    }
    let xs = sample_axis(h.width(), out_w);
    let ys = sample_axis(h.height(), out_h);
    let src = h.values();
    let iw = h.width();
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
            let bottom = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Heatmap::new(out_w, out_h, out, h.is_normalized())
}

fn sample_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Channel-major feature map; each channel is a row-major `height×width` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap3D {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap3D {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Stacks `a` on top of `b` along the channel axis.
    pub fn concat_channels(a: &FeatureMap3D, b: &FeatureMap3D) -> Result<FeatureMap3D> {
        if a.height != b.height || a.width != b.width {
            return Err(Error::shape(format!(
                "cannot concat {}x{} with {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        FeatureMap3D::new(a.channels + b.channels, a.height, a.width, data)
    }

    /// Splits off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(FeatureMap3D, FeatureMap3D)> {
        if first > self.channels {
            return Err(Error::shape("split beyond channel count"));
        }
        let n = first * self.height * self.width;
        Ok((
            FeatureMap3D::new(first, self.height, self.width, self.data[..n].to_vec())?,
            FeatureMap3D::new(self.channels - first, self.height, self.width, self.data[n..].to_vec())?,
        ))
    }

    /// Lifts a heatmap into a one-channel feature map.
    pub fn from_heatmap(h: &Heatmap) -> FeatureMap3D {
        FeatureMap3D {
            channels: 1,
            height: h.height(),
            width: h.width(),
            data: h.values().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Rectify,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Rectify => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative with `rectify'(0) = 0`.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Rectify => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub const KERNEL_TAPS: usize = 9;

/// 3×3 convolution, stride 1, zero padding 1.
///
/// `kernel` is laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_input: FeatureMap3D,
    pub grad_kernel: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if kernel.len() != out_channels * in_channels * KERNEL_TAPS || bias.len() != out_channels {
            return Err(Error::shape(format!(
                "conv {in_channels}->{out_channels}: kernel {} / bias {}",
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            bias,
            activation,
        })
    }

    pub fn zeros(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: vec![0.0; out_channels * in_channels * KERNEL_TAPS],
            bias: vec![0.0; out_channels],
            activation,
        }
    }

    pub fn weight(&self, o: usize, c: usize, ky: usize, kx: usize) -> f64 {
        self.kernel[((o * self.in_channels + c) * 3 + ky) * 3 + kx]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    fn check_input(&self, x: &FeatureMap3D) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    /// Pre-activation output (bias plus correlation).
    pub fn preactivation(&self, x: &FeatureMap3D) -> Result<FeatureMap3D> {
        self.check_input(x)?;
        let plane = x.height * x.width;
        let cols = im2col(x);
        let mut out = vec![0.0; self.out_channels * plane];
        for (o, dst) in out.chunks_exact_mut(plane).enumerate() {
            dst.fill(self.bias[o]);
        }
        let k = self.in_channels * KERNEL_TAPS;
        gemm(
            (self.out_channels, k, plane),
            (&self.kernel, k, 1),
            (&cols, plane, 1),
            (&mut out, plane),
        );
        FeatureMap3D::new(self.out_channels, x.height, x.width, out)
    }

    pub fn activate(&self, pre: &FeatureMap3D) -> FeatureMap3D {
        FeatureMap3D {
            channels: pre.channels,
            height: pre.height,
            width: pre.width,
            data: pre.data.iter().map(|&v| self.activation.apply(v)).collect(),
        }
    }

    pub fn forward(&self, x: &FeatureMap3D) -> Result<FeatureMap3D> {
        Ok(self.activate(&self.preactivation(x)?))
    }

    /// Backward pass given the cached pre-activation of the forward call.
    pub fn backward_with_preactivation(
        &self,
        x: &FeatureMap3D,
        pre: &FeatureMap3D,
        grad_out: &FeatureMap3D,
    ) -> Result<ConvGrads> {
        self.check_input(x)?;
        let (h, w) = (x.height, x.width);
        if grad_out.channels != self.out_channels
            || grad_out.height != h
            || grad_out.width != w
            || pre.data.len() != grad_out.data.len()
        {
            return Err(Error::shape(format!(
                "grad_out {}x{}x{} does not match conv output {}x{h}x{w}",
                grad_out.channels, grad_out.height, grad_out.width, self.out_channels
            )));
        }
        let plane = h * w;
        let grad_pre: Vec<f64> = grad_out
            .data
            .iter()
            .zip(&pre.data)
            .map(|(g, p)| g * self.activation.derivative(*p))
            .collect();

        let grad_bias: Vec<f64> = grad_pre.chunks_exact(plane).map(|g| g.iter().sum()).collect();

        let cols = im2col(x);
        let k = self.in_channels * KERNEL_TAPS;
        let mut grad_kernel = vec![0.0; self.kernel.len()];
        gemm(
            (self.out_channels, plane, k),
            (&grad_pre, plane, 1),
            (&cols, 1, plane),
            (&mut grad_kernel, k),
        );
        let mut grad_cols = vec![0.0; k * plane];
        gemm(
            (k, self.out_channels, plane),
            (&self.kernel, 1, k),
            (&grad_pre, plane, 1),
            (&mut grad_cols, plane),
        );
        let grad_input = col2im(&grad_cols, self.in_channels, h, w);

        Ok(ConvGrads {
            grad_input,
            grad_kernel,
            grad_bias,
        })
    }
}

/// Patch matrix of a 3×3 same-padded conv: row `c·9 + tap`, column `y·w + x`.
fn im2col(x: &FeatureMap3D) -> Vec<f64> {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut cols = vec![0.0; x.channels * KERNEL_TAPS * plane];
    for c in 0..x.channels {
        let src = x.plane(c);
        for tap in 0..KERNEL_TAPS {
            let row = &mut cols[(c * KERNEL_TAPS + tap) * plane..][..plane];
            let (dy, dx) = (tap / 3, tap % 3);
            for y in 0..h {
                let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for xx in 0..w {
                    if let Some(sx) = (xx + dx).checked_sub(1).filter(|&v| v < w) {
                        row[y * w + xx] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> FeatureMap3D {
    let plane = h * w;
    let mut out = vec![0.0; channels * plane];
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for tap in 0..KERNEL_TAPS {
            let row = &cols[(c * KERNEL_TAPS + tap) * plane..][..plane];
            let (dy, dx) = (tap / 3, tap % 3);
            for y in 0..h {
                let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for xx in 0..w {
                    if let Some(sx) = (xx + dx).checked_sub(1).filter(|&v| v < w) {
                        dst[sy * w + sx] += row[y * w + xx];
                    }
                }
            }
        }
    }
    FeatureMap3D {
        channels,
        height: h,
        width: w,
        data: out,
    }
}

/// `c += a·b` for an `m×k` by `k×n` product with arbitrary strides on `a`
/// and `b` and a row-major `c`. Single-threaded, so results are
/// deterministic run to run.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    (c, rsc): (&mut [f64], usize),
) {
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, 1));
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn conv_forward(layer: &ConvLayer, x: &FeatureMap3D) -> Result<FeatureMap3D> {
    layer.forward(x)
}

/// Exact gradients of [`conv_forward`] with respect to input, kernel and bias.
pub fn conv_backward(layer: &ConvLayer, x: &FeatureMap3D, grad_out: &FeatureMap3D) -> Result<ConvGrads> {
    let pre = layer.preactivation(x)?;
    layer.backward_with_preactivation(x, &pre, grad_out)
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central finite-difference estimate of `∂f/∂p_i` for every parameter.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Input(format!("finite-difference step {eps} must be > 0")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p);
        p[i] = orig - eps;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss perturbing parameter {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares an analytic gradient with central differences and returns the
/// largest relative error. An empty parameter vector yields `0`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = finite_diff_gradient(f, params, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap3D {
        FeatureMap3D::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, i: usize, o: usize, act: Activation) -> ConvLayer {
        ConvLayer::new(
            i,
            o,
            (0..o * i * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..o).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            act,
        )
        .unwrap()
    }

    #[test]
    fn matmul_examples() {
        let col = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &col).unwrap(), col);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
        let x = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_transposed_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::new(5, 4, (0..20).map(|_| rng.gen()).collect()).unwrap();
        let b = Matrix::new(3, 4, (0..12).map(|_| rng.gen()).collect()).unwrap();
        assert_eq!(matmul_transposed(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
    }

    #[test]
    fn mean_last_dim_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap();
        assert_eq!(mean_last_dim(&a, 2).unwrap().data(), &[2.0]);
        assert_eq!(mean_last_dim(&a, 1).unwrap().data(), &[1.0]);
        let b = Matrix::from_rows(&[vec![2.0, 4.0], vec![6.0, 8.0]]).unwrap();
        assert_eq!(mean_last_dim(&b, 2).unwrap().data(), &[3.0, 7.0]);
        assert!(matches!(mean_last_dim(&a, 0), Err(Error::EmptyText)));
        assert!(matches!(mean_last_dim(&a, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_examples() {
        let h = reshape_to_2d(&Matrix::column(vec![1.0, 2.0, 3.0, 4.0]), 2, 2).unwrap();
        assert_eq!(h.get(0, 1), 2.0);
        assert_eq!(h.get(1, 0), 3.0);
        let s = reshape_to_2d(&Matrix::column(vec![5.0]), 1, 1).unwrap();
        assert_eq!(s.values(), &[5.0]);
        let v: Vec<f64> = (1..=6).map(f64::from).collect();
        let r = reshape_to_2d(&Matrix::column(v.clone()), 3, 2).unwrap();
        for row in 0..2 {
            for col in 0..3 {
                assert_eq!(r.get(row, col), v[row * 3 + col]);
            }
        }
        assert!(reshape_to_2d(&Matrix::column(v), 4, 2).is_err());
    }

    #[test]
    fn bilinear_resize_examples() {
        let c = Heatmap::new(3, 2, vec![0.7; 6], false).unwrap();
        let r = bilinear_resize(&c, 5, 4).unwrap();
        assert!(r.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Heatmap::new(4, 3, (0..12).map(|_| rng.gen()).collect(), false).unwrap();
        assert_eq!(bilinear_resize(&h, 4, 3).unwrap(), h);

        let h = Heatmap::new(2, 2, vec![0.0, 1.0, 0.0, 1.0], false).unwrap();
        let r = bilinear_resize(&h, 4, 4).unwrap();
        for row in 0..4 {
            let got: Vec<f64> = (0..4).map(|c| r.get(row, c)).collect();
            assert_eq!(got, vec![0.0, 0.25, 0.75, 1.0]);
        }
        assert!(bilinear_resize(&h, 0, 4).is_err());
    }

    #[test]
    fn conv_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = ConvLayer::zeros(3, 4, Activation::Rectify);
        let out = conv_forward(&layer, &random_map(&mut rng, 3, 5, 4)).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (4, 5, 4));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_center_tap_on_single_pixel() {
        let mut layer = ConvLayer::zeros(3, 2, Activation::Identity);
        let w = [[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]];
        for o in 0..2 {
            for c in 0..3 {
                layer.kernel[(o * 3 + c) * 9 + 4] = w[o][c];
            }
        }
        let x = FeatureMap3D::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = conv_forward(&layer, &x).unwrap();
        assert_eq!(out.data(), &[0.5 - 2.0 + 6.0, 6.0]);
    }

    fn naive_conv(layer: &ConvLayer, x: &FeatureMap3D) -> Vec<f64> {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let mut out = Vec::new();
        for o in 0..layer.out_channels {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = layer.bias[o];
                    for c in 0..layer.in_channels {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                    acc += layer.weight(o, c, ky as usize, kx as usize)
                                        * x.get(c, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.push(match layer.activation {
                        Activation::Rectify => acc.max(0.0),
                        Activation::Identity => acc,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Identity, Activation::Rectify] {
            let layer = random_layer(&mut rng, 2, 3, act);
            let x = random_map(&mut rng, 2, 3, 3);
            let fast = conv_forward(&layer, &x).unwrap();
            for (a, b) in fast.data().iter().zip(naive_conv(&layer, &x)) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let layer = ConvLayer::zeros(2, 2, Activation::Identity);
        assert!(conv_forward(&layer, &FeatureMap3D::zeros(3, 2, 2)).is_err());
        let bad_grad = FeatureMap3D::zeros(3, 2, 2);
        assert!(conv_backward(&layer, &FeatureMap3D::zeros(2, 2, 2), &bad_grad).is_err());
    }

    #[test]
    fn conv_backward_zero_and_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_layer(&mut rng, 2, 3, Activation::Identity);
        let x = random_map(&mut rng, 2, 4, 4);
        let g = conv_backward(&layer, &x, &FeatureMap3D::zeros(3, 4, 4)).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_kernel.iter().all(|&v| v == 0.0));
        assert!(g.grad_bias.iter().all(|&v| v == 0.0));

        let mut single = FeatureMap3D::zeros(3, 4, 4);
        single.data_mut()[16 + 2 * 4 + 1] = 1.0;
        let g = conv_backward(&layer, &x, &single).unwrap();
        assert_eq!(g.grad_bias, vec![0.0, 1.0, 0.0]);
    }

    fn conv_loss(layer: &ConvLayer, x: &FeatureMap3D, proj: &[f64]) -> f64 {
        dot(conv_forward(layer, x).unwrap().data(), proj)
    }

    fn nudged_case(seed: u64) -> (ConvLayer, FeatureMap3D, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let layer = random_layer(&mut rng, 2, 3, Activation::Rectify);
            let x = random_map(&mut rng, 2, 4, 3);
            let pre = layer.preactivation(&x).unwrap();
            if pre.data().iter().all(|v| v.abs() >= 1e-3) {
                let proj = (0..pre.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                return (layer, x, proj);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for seed in 0..20 {
            let (layer, x, proj) = nudged_case(seed);
            let grad_out = FeatureMap3D::new(3, 4, 3, proj.clone()).unwrap();
            let g = conv_backward(&layer, &x, &grad_out).unwrap();

            let err_x = finite_diff_check(
                |p| conv_loss(&layer, &FeatureMap3D::new(2, 4, 3, p.to_vec()).unwrap(), &proj),
                x.data(),
                g.grad_input.data(),
                1e-5,
            )
            .unwrap();
            let err_w = finite_diff_check(
                |p| {
                    let mut l = layer.clone();
                    l.kernel.copy_from_slice(p);
                    conv_loss(&l, &x, &proj)
                },
                &layer.kernel,
                &g.grad_kernel,
                1e-5,
            )
            .unwrap();
            let err_b = finite_diff_check(
                |p| {
                    let mut l = layer.clone();
                    l.bias.copy_from_slice(p);
                    conv_loss(&l, &x, &proj)
                },
                &layer.bias,
                &g.grad_bias,
                1e-5,
            )
            .unwrap();
            let worst = err_x.max(err_w).max(err_b);
            assert!(worst < 1e-6, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn finite_diff_check_examples() {
        let p = vec![0.5, -1.25, 2.0, 1.5];
        let quadratic = |q: &[f64]| 0.5 * q.iter().map(|v| v * v).sum::<f64>();
        assert!(finite_diff_check(quadratic, &p, &p, 1e-5).unwrap() < 1e-9);
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(quadratic, &p, &doubled, 1e-5).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
        assert_eq!(finite_diff_check(quadratic, &[], &[], 1e-5).unwrap(), 0.0);
        assert!(finite_diff_check(|_| f64::NAN, &p, &p, 1e-5).is_err());
        assert!(finite_diff_check(quadratic, &p, &p, 0.0).is_err());
    }
}
