//! Finite-difference verification of the guidance module's backward pass.
//!
//! The loss is a fixed random projection `Σ r·fuse(w, h, g)`, so `r` is the
//! upstream gradient handed to [`fuse_backward`]. Central differences are
//! taken for every kernel weight, every bias and every input token.
//!
//! Re-running the whole network for each of the ~30k probes is too slow, so
//! the numeric side uses [`ProbeNet`]: a forward evaluator that caches every
//! layer's pre-activations and pushes only the change caused by a probe
//! through the layers after it. It never touches the backward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bundle::TokenGrid;
use crate::error::Result;
use crate::guidance::{fuse_backward, init_weights, min_rectifier_margin, GuidanceWeights, HEATMAP_CHANNELS};
use crate::heatmap::Heatmap;
use crate::numerics::{bilinear_resize, relative_error, Activation, ConvLayer, FeatureMap3D, Matrix, KERNEL_TAPS};

/// Probes are discarded and redrawn when any rectifier pre-activation is
/// closer to its kink than this.
pub const KINK_MARGIN: f64 = 1e-4;
pub const DEFAULT_EPS: f64 = 1e-5;

/// One randomized gradient-check setup.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub weights: GuidanceWeights,
    pub heatmap: Heatmap,
    pub grid: TokenGrid,
    pub projection: TokenGrid,
    /// Redraws needed to clear [`KINK_MARGIN`].
    pub redraws: usize,
}

impl GradCase {
    /// Draws weights (with non-zero biases), a normalized heatmap on a grid
    /// twice the token resolution, tokens and the loss projection.
    pub fn random(seed: u64, width: usize, height: usize, dim: usize) -> Result<GradCase> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut redraws = 0;
        loop {
            let mut weights = init_weights(dim, rng.gen())?;
            for l in weights.layers_mut() {
                for b in &mut l.bias {
                    *b = rng.gen_range(-0.1..0.1);
                }
            }
            let hv: Vec<f64> = (0..4 * width * height).map(|_| rng.gen::<f64>()).collect();
            let heatmap = Heatmap::new(2 * width, 2 * height, hv, false)?.normalize();
            let n = width * height;
            let tokens: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let proj: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grid = TokenGrid::new(width, height, Matrix::new(n, dim, tokens)?)?;
            let projection = TokenGrid::new(width, height, Matrix::new(n, dim, proj)?)?;
            if min_rectifier_margin(&weights, &heatmap, &grid)? >= KINK_MARGIN {
                return Ok(GradCase {
                    weights,
                    heatmap,
                    grid,
                    projection,
                    redraws,
                });
            }
            redraws += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub weight_error: f64,
    pub token_error: f64,
    pub checked: usize,
}

/// Compares [`fuse_backward`] with central differences on every parameter
/// and input token of the case.
pub fn check_case(case: &GradCase, eps: f64) -> Result<GradReport> {
    let (gw, gt) = fuse_backward(&case.weights, &case.heatmap, &case.grid, &case.projection)?;
    let net = ProbeNet::new(case)?;

    let analytic_w = gw.to_flat();
    let mut weight_error: f64 = 0.0;
    let mut idx = 0;
    for layer in 0..6 {
        let l = net.layer(layer);
        for o in 0..l.out_channels {
            for c in 0..l.in_channels {
                for tap in 0..KERNEL_TAPS {
                    let num = net.central(Probe::Weight { layer, o, c, tap }, eps)?;
                    weight_error = weight_error.max(relative_error(analytic_w[idx], num));
                    idx += 1;
                }
            }
        }
        for o in 0..l.out_channels {
            let num = net.central(Probe::Bias { layer, o }, eps)?;
            weight_error = weight_error.max(relative_error(analytic_w[idx], num));
            idx += 1;
        }
    }

    let mut token_error: f64 = 0.0;
    let dim = case.grid.dim();
    for i in 0..case.grid.len() {
        for c in 0..dim {
            let num = net.central(Probe::Token { index: i, channel: c }, eps)?;
            token_error = token_error.max(relative_error(gt.tokens().get(i, c), num));
        }
    }

    Ok(GradReport {
        max_rel_error: weight_error.max(token_error),
        weight_error,
        token_error,
        checked: idx + case.grid.len() * dim,
    })
}

#[derive(Debug, Clone, Copy)]
enum Probe {
    Weight {
        layer: usize,
        o: usize,
        c: usize,
        tap: usize,
    },
    Bias {
        layer: usize,
        o: usize,
    },
    Token {
        index: usize,
        channel: usize,
    },
}

/// Cached forward evaluator used as the numeric oracle.
///
/// A probe returns `loss(θ + δ) − loss(θ)` evaluated in difference form:
/// only the change of each layer is carried forward, and a rectifier maps a
/// change `d` at pre-activation `p` to `max(p + d, 0) − max(p, 0)`. This is
/// the same quantity as subtracting two full forward passes but without the
/// cancellation that would otherwise swamp gradients near `1e-7`.
struct ProbeNet {
    layers: Vec<ConvLayer>,
    /// `inputs[ℓ]` feeds layer `ℓ`; layer 3's input is the concatenation.
    inputs: Vec<FeatureMap3D>,
    pres: Vec<FeatureMap3D>,
    projection: Vec<f64>,
    /// Valid `(tap, dst, src)` pixel triples of a 3×3 same-padded conv.
    taps: Vec<(usize, usize, usize)>,
    plane: usize,
}

fn act_diff(a: Activation, p: f64, d: f64) -> f64 {
    match a {
        Activation::Identity => d,
        Activation::Rectify => {
            let q = p + d;
            if p > 0.0 && q > 0.0 {
                d
            } else if p <= 0.0 && q <= 0.0 {
                0.0
            } else {
                q.max(0.0) - p.max(0.0)
            }
        }
    }
}

impl ProbeNet {
    fn new(case: &GradCase) -> Result<ProbeNet> {
        let w = &case.weights;
        let layers: Vec<ConvLayer> = w.layers().cloned().collect();
        let (gw, gh) = (case.grid.width(), case.grid.height());
        let resized = bilinear_resize(&case.heatmap, gw, gh)?;
        let mut inputs = Vec::with_capacity(6);
        let mut pres = Vec::with_capacity(6);
        let mut cur = FeatureMap3D::from_heatmap(&resized);
        for (i, l) in layers.iter().enumerate() {
            if i == 3 {
                cur = FeatureMap3D::concat_channels(&cur, &case.grid.to_feature_map())?;
            }
            let pre = l.preactivation(&cur)?;
            let next = l.activate(&pre);
            inputs.push(cur);
            pres.push(pre);
            cur = next;
        }
        let mut taps = Vec::new();
        for tap in 0..KERNEL_TAPS {
            for y in 0..gh {
                for x in 0..gw {
                    let sy = y as isize + (tap / 3) as isize - 1;
                    let sx = x as isize + (tap % 3) as isize - 1;
                    if sy >= 0 && sy < gh as isize && sx >= 0 && sx < gw as isize {
                        taps.push((tap, y * gw + x, sy as usize * gw + sx as usize));
                    }
                }
            }
        }
        Ok(ProbeNet {
            layers,
            inputs,
            pres,
            projection: case.projection.to_feature_map().into_data(),
            taps,
            plane: gw * gh,
        })
    }

    fn layer(&self, i: usize) -> &ConvLayer {
        &self.layers[i]
    }

    fn central(&self, probe: Probe, eps: f64) -> Result<f64> {
        let plus = self.loss_change(probe, eps);
        let minus = self.loss_change(probe, -eps);
        Ok((plus - minus) / (2.0 * eps))
    }

    /// Loss change when one quantity is shifted by `delta`.
    fn loss_change(&self, probe: Probe, delta: f64) -> f64 {
        let n = self.plane;
        match probe {
            Probe::Weight { layer, o, c, tap } => {
                let src = self.inputs[layer].plane(c);
                let mut d = vec![0.0; n];
                for &(_, dst, s) in self.taps.iter().filter(|t| t.0 == tap) {
                    d[dst] += delta * src[s];
                }
                self.resume_from_pre(layer, o, &d)
            }
            Probe::Bias { layer, o } => self.resume_from_pre(layer, o, &vec![delta; n]),
            Probe::Token { index, channel } => {
                let mut d = vec![0.0; n];
                d[index] = delta;
                self.resume_from_input(3, HEATMAP_CHANNELS + channel, 1, d)
            }
        }
    }

    /// Layer `layer`'s pre-activation channel `o` changes by `dpre`.
    fn resume_from_pre(&self, layer: usize, o: usize, dpre: &[f64]) -> f64 {
        let n = self.plane;
        let l = &self.layers[layer];
        let pre = self.pres[layer].plane(o);
        let dact: Vec<f64> = pre
            .iter()
            .zip(dpre)
            .map(|(&p, &d)| act_diff(l.activation, p, d))
            .collect();
        if layer == 5 {
            return dot(&dact, &self.projection[o * n..(o + 1) * n]);
        }
        self.resume_from_input(layer + 1, o, 1, dact)
    }

    /// Input channels `first..first + count` of `layer` change by `dx`; every
    /// other channel is unchanged.
    fn resume_from_input(&self, layer: usize, first: usize, count: usize, dx: Vec<f64>) -> f64 {
        let n = self.plane;
        let mut layer = layer;
        let (mut first, mut count, mut dx) = (first, count, dx);
        loop {
            let l = &self.layers[layer];
            let mut dpre = vec![0.0; l.out_channels * n];
            for o in 0..l.out_channels {
                let acc = &mut dpre[o * n..(o + 1) * n];
                for k in 0..count {
                    let base = (o * l.in_channels + first + k) * KERNEL_TAPS;
                    let kern = &l.kernel[base..base + KERNEL_TAPS];
                    let src = &dx[k * n..(k + 1) * n];
                    for &(tap, dst, s) in &self.taps {
                        acc[dst] += kern[tap] * src[s];
                    }
                }
            }
            if layer == 5 {
                return dot(&dpre, &self.projection);
            }
            let pre = self.pres[layer].data();
            for (d, &p) in dpre.iter_mut().zip(pre) {
                *d = act_diff(l.activation, p, *d);
            }
            first = 0;
            count = l.out_channels;
            dx = dpre;
            layer += 1;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
