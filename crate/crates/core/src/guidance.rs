//! Heatmap guidance: a three-layer convolution stack encodes the heatmap into
//! 64 channels, which are concatenated with the tracker's search tokens and
//! fused back down to the token dimensionality by a second three-layer stack.
//! The output grid has exactly the input grid's shape, so it drops in between
//! a tracker's encoder and prediction head unchanged.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::TokenGrid;
use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::numerics::{bilinear_resize, Activation, ConvLayer, FeatureMap3D, KERNEL_TAPS};

/// Output channels of the heatmap encoder.
pub const HEATMAP_CHANNELS: usize = 64;
const ENCODER_SCHEDULE: [usize; 4] = [1, 16, 32, HEATMAP_CHANNELS];

pub const WEIGHTS_MAGIC: [u8; 4] = *b"CTGW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Parameters of both convolution stacks. The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceWeights {
    pub dim_t: usize,
    /// Heatmap encoder, `1 → 16 → 32 → 64`.
    pub cnn1: [ConvLayer; 3],
    /// Fusion stack, `(D + 64) → D → D → D`.
    pub cnn2: [ConvLayer; 3],
    pub init_seed: Option<u64>,
}

fn layer_schedule(dim_t: usize) -> [(usize, usize); 6] {
    let e = ENCODER_SCHEDULE;
    [
        (e[0], e[1]),
        (e[1], e[2]),
        (e[2], e[3]),
        (dim_t + HEATMAP_CHANNELS, dim_t),
        (dim_t, dim_t),
        (dim_t, dim_t),
    ]
}

fn stack_activation(i: usize) -> Activation {
    if i == 2 {
        Activation::Identity
    } else {
        Activation::Rectify
    }
}

impl GuidanceWeights {
    pub fn zeros(dim_t: usize) -> Self {
        let s = layer_schedule(dim_t);
        let mk = |i: usize| ConvLayer::zeros(s[i].0, s[i].1, stack_activation(i % 3));
        Self {
            dim_t,
            cnn1: [mk(0), mk(1), mk(2)],
            cnn2: [mk(3), mk(4), mk(5)],
            init_seed: None,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.cnn1.iter().chain(self.cnn2.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.cnn1.iter_mut().chain(self.cnn2.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(ConvLayer::param_count).sum()
    }

    /// All kernels and biases in declaration order (per layer: kernel, bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers() {
            out.extend_from_slice(&l.kernel);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        for l in self.layers_mut() {
            let k = l.kernel.len();
            l.kernel.copy_from_slice(&flat[pos..pos + k]);
            pos += k;
            let b = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + b]);
            pos += b;
        }
        Ok(())
    }

    fn check_grid(&self, g: &TokenGrid) -> Result<()> {
        if self.cnn2[0].in_channels != g.dim() + HEATMAP_CHANNELS || self.dim_t != g.dim() {
            return Err(Error::config(format!(
                "weights built for D = {} cannot fuse a D = {} grid",
                self.dim_t,
                g.dim()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&WEIGHTS_MAGIC);
        w.u32(WEIGHTS_VERSION as usize);
        w.u32(self.dim_t);
        w.u32(6);
        for l in self.layers() {
            w.u32(l.in_channels);
            w.u32(l.out_channels);
        }
        for l in self.layers() {
            w.f64s(&l.kernel);
            w.f64s(&l.bias);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let w = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(w)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(WEIGHTS_MAGIC)?;
        r.version(WEIGHTS_VERSION)?;
        let dim_t = r.dim("dim_t", 1)?;
        let n_layers = r.u32()?;
        if n_layers != 6 {
            return Err(Error::config(format!("expected 6 layers, file declares {n_layers}")));
        }
        let expected = layer_schedule(dim_t);
        for (i, &(ei, eo)) in expected.iter().enumerate() {
            let (fi, fo) = (r.u32()? as usize, r.u32()? as usize);
            if (fi, fo) != (ei, eo) {
                return Err(Error::config(format!(
                    "layer {i} is {fi}->{fo}, schedule for D = {dim_t} needs {ei}->{eo}"
                )));
            }
        }
        let mut out = Self::zeros(dim_t);
        for l in out.layers_mut() {
            let k = r.f64s(l.kernel.len())?;
            let b = r.f64s(l.bias.len())?;
            l.kernel = k;
            l.bias = b;
        }
        Ok(out)
    }
}

/// Fan-in scaled uniform kernels (`|w| ≤ sqrt(1 / (9·in))`), zero biases.
pub fn init_weights(dim_t: usize, seed: u64) -> Result<GuidanceWeights> {
    if dim_t == 0 {
        return Err(Error::config("dim_t must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = GuidanceWeights::zeros(dim_t);
    for l in w.layers_mut() {
        let bound = (1.0 / (l.in_channels * KERNEL_TAPS) as f64).sqrt();
        for v in &mut l.kernel {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    w.init_seed = Some(seed);
    Ok(w)
}

pub fn save_weights(w: &GuidanceWeights, path: &Path) -> Result<()> {
    codec::write_file(path, &w.to_bytes())
}

pub fn load_weights(path: &Path) -> Result<GuidanceWeights> {
    GuidanceWeights::from_bytes(&fs::read(path)?)
}

/// Activations kept from a forward pass for the backward pass.
struct StackTrace {
    inputs: Vec<FeatureMap3D>,
    pres: Vec<FeatureMap3D>,
}

fn run_stack(layers: &[ConvLayer; 3], x: FeatureMap3D) -> Result<(FeatureMap3D, StackTrace)> {
    let mut inputs = Vec::with_capacity(3);
    let mut pres = Vec::with_capacity(3);
    let mut cur = x;
    for l in layers {
        let pre = l.preactivation(&cur)?;
        let next = l.activate(&pre);
        inputs.push(cur);
        pres.push(pre);
        cur = next;
    }
    Ok((cur, StackTrace { inputs, pres }))
}

fn back_stack(
    layers: &[ConvLayer; 3],
    trace: &StackTrace,
    grad: FeatureMap3D,
    grads: &mut [ConvLayer; 3],
) -> Result<FeatureMap3D> {
    let mut g = grad;
    for i in (0..3).rev() {
        let cg = layers[i].backward_with_preactivation(&trace.inputs[i], &trace.pres[i], &g)?;
        grads[i].kernel = cg.grad_kernel;
        grads[i].bias = cg.grad_bias;
        g = cg.grad_input;
    }
    Ok(g)
}

/// Resizes a normalized heatmap to the target grid and encodes it with the
/// first stack. Output is `64 × target_h × target_w`.
pub fn encode_heatmap(w: &GuidanceWeights, h: &Heatmap, target_w: usize, target_h: usize) -> Result<FeatureMap3D> {
    Ok(encode(w, h, target_w, target_h)?.0)
}

fn encode(w: &GuidanceWeights, h: &Heatmap, target_w: usize, target_h: usize) -> Result<(FeatureMap3D, StackTrace)> {
    if !h.is_normalized() {
        return Err(Error::Input("heatmap guidance expects a normalized heatmap".into()));
    }
    let resized = bilinear_resize(h, target_w, target_h)?;
    run_stack(&w.cnn1, FeatureMap3D::from_heatmap(&resized))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FuseOptions {
    /// Adds the input tokens to the fused output.
    pub residual: bool,
}

/// Fuses the heatmap into the token grid; output shape equals input shape.
pub fn fuse(w: &GuidanceWeights, h: &Heatmap, g: &TokenGrid) -> Result<TokenGrid> {
    fuse_with(w, h, g, FuseOptions::default())
}

pub fn fuse_with(w: &GuidanceWeights, h: &Heatmap, g: &TokenGrid, opts: FuseOptions) -> Result<TokenGrid> {
    TokenGrid::from_feature_map(&forward(w, h, g, opts)?.0)
}

struct FuseTrace {
    cnn1: StackTrace,
    cnn2: StackTrace,
}

fn forward(w: &GuidanceWeights, h: &Heatmap, g: &TokenGrid, opts: FuseOptions) -> Result<(FeatureMap3D, FuseTrace)> {
    w.check_grid(g)?;
    let (fh, cnn1) = encode(w, h, g.width(), g.height())?;
    let tokens = g.to_feature_map();
    let fhx = FeatureMap3D::concat_channels(&fh, &tokens)?;
    let (mut out, cnn2) = run_stack(&w.cnn2, fhx)?;
    if opts.residual {
        for (o, t) in out.data_mut().iter_mut().zip(tokens.data()) {
            *o += t;
        }
    }
    Ok((out, FuseTrace { cnn1, cnn2 }))
}

/// Exact gradients of [`fuse`] with respect to every weight and every input
/// token. The heatmap is treated as a constant.
pub fn fuse_backward(
    w: &GuidanceWeights,
    h: &Heatmap,
    g: &TokenGrid,
    grad_out: &TokenGrid,
) -> Result<(GuidanceWeights, TokenGrid)> {
    fuse_backward_with(w, h, g, grad_out, FuseOptions::default())
}

pub fn fuse_backward_with(
    w: &GuidanceWeights,
    h: &Heatmap,
    g: &TokenGrid,
    grad_out: &TokenGrid,
    opts: FuseOptions,
) -> Result<(GuidanceWeights, TokenGrid)> {
    let (_, gw, gt) = fuse_with_backward(w, h, g, opts, |_| Ok(grad_out.clone()))?;
    Ok((gw, gt))
}

/// One forward pass followed by the backward pass. `upstream` receives the
/// fused grid and returns the gradient of the loss with respect to it.
pub fn fuse_with_backward<F>(
    w: &GuidanceWeights,
    h: &Heatmap,
    g: &TokenGrid,
    opts: FuseOptions,
    upstream: F,
) -> Result<(TokenGrid, GuidanceWeights, TokenGrid)>
where
    F: FnOnce(&TokenGrid) -> Result<TokenGrid>,
{
    let (out, trace) = forward(w, h, g, opts)?;
    let out = TokenGrid::from_feature_map(&out)?;
    let grad_out = upstream(&out)?;
    if grad_out.shape() != g.shape() {
        return Err(Error::shape(format!(
            "grad_out shape {:?} != grid shape {:?}",
            grad_out.shape(),
            g.shape()
        )));
    }
    let mut grads = GuidanceWeights::zeros(w.dim_t);
    let go = grad_out.to_feature_map();
    let g_fhx = back_stack(&w.cnn2, &trace.cnn2, go.clone(), &mut grads.cnn2)?;
    let (g_fh, mut g_tokens) = g_fhx.split_channels(HEATMAP_CHANNELS)?;
    back_stack(&w.cnn1, &trace.cnn1, g_fh, &mut grads.cnn1)?;
    if opts.residual {
        for (t, o) in g_tokens.data_mut().iter_mut().zip(go.data()) {
            *t += o;
        }
    }
    Ok((out, grads, TokenGrid::from_feature_map(&g_tokens)?))
}

/// Smallest absolute rectifier pre-activation across both stacks; used to
/// keep finite-difference probes away from kinks.
pub fn min_rectifier_margin(w: &GuidanceWeights, h: &Heatmap, g: &TokenGrid) -> Result<f64> {
    let (_, trace) = forward(w, h, g, FuseOptions::default())?;
    let mut m = f64::INFINITY;
    for stack in [&trace.cnn1, &trace.cnn2] {
        for pre in &stack.pres[..2] {
            for &v in pre.data() {
                m = m.min(v.abs());
            }
        }
    }
    Ok(m)
}

/// Loads weights and checks them against a grid's dimensionality.
pub fn load_weights_for(path: &Path, dim_t: usize) -> Result<GuidanceWeights> {
    let w = load_weights(path)?;
    if w.dim_t != dim_t {
        return Err(Error::config(format!(
            "weights stored for D = {}, grid has D = {dim_t}",
            w.dim_t
        )));
    }
    Ok(w)
}
