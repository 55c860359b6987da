//! Mock tracker: frozen toy encoder output, optional text cross-attention,
//! heatmap guidance and a soft-argmax center head.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, SyntheticSpec};
use crate::bundle::{FeatureBundle, TokenGrid};
use crate::codec::{self, Reader, Writer};
use crate::cue_mapping::{map_textual_cue, MapOptions};
use crate::error::{Error, FormatError, Result};
use crate::guidance::{fuse, fuse_with_backward, init_weights, FuseOptions, GuidanceWeights};
use crate::heatmap::Heatmap;
use crate::metrics::{BBox, TrackRecord};
use crate::numerics::{matmul, matmul_transposed, Matrix};

pub const MODEL_MAGIC: [u8; 4] = *b"CTMT";
pub const MODEL_VERSION: u32 = 1;
/// Key/query width of the direct-text cross-attention.
pub const ATTENTION_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NoText,
    DirectText,
    NaiveMap,
    RefinedHeatmap,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NoText,
        Strategy::DirectText,
        Strategy::NaiveMap,
        Strategy::RefinedHeatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoText => "no_text",
            Strategy::DirectText => "direct_text",
            Strategy::NaiveMap => "naive_map",
            Strategy::RefinedHeatmap => "refined_heatmap",
        }
    }

    fn code(self) -> u8 {
        match self {
            Strategy::NoText => 0,
            Strategy::DirectText => 1,
            Strategy::NaiveMap => 2,
            Strategy::RefinedHeatmap => 3,
        }
    }

    fn from_code(c: u8) -> std::result::Result<Strategy, FormatError> {
        Strategy::ALL
            .into_iter()
            .find(|s| s.code() == c)
            .ok_or_else(|| FormatError::Header(format!("unknown strategy code {c}")))
    }

    pub fn uses_heatmap(self) -> bool {
        matches!(self, Strategy::NaiveMap | Strategy::RefinedHeatmap)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// The heatmap a strategy feeds into guidance. Strategies without a map get
/// an all-zero one on the scale-1 grid.
pub fn cue_heatmap(strategy: Strategy, bundle: &FeatureBundle) -> Result<Heatmap> {
    let opts = |refine| MapOptions {
        refine,
        ..MapOptions::default()
    };
    match strategy {
        Strategy::NaiveMap => map_textual_cue(bundle, opts(false)),
        Strategy::RefinedHeatmap => map_textual_cue(bundle, opts(true)),
        Strategy::NoText | Strategy::DirectText => {
            let (w, h) = bundle.layout().dims(1)?;
            Ok(Heatmap::zeros(w, h).normalize())
        }
    }
}

/// Single cross-attention read of the valid text tokens by every grid token,
/// added back onto the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    /// `d_k × D`.
    pub wq: Matrix,
    /// `d_k × D'`.
    pub wk: Matrix,
    /// `D × D'`.
    pub wv: Matrix,
}

struct AttentionTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    alpha: Matrix,
    text: Matrix,
}

impl CrossAttention {
    pub fn init(dim_t: usize, dim_g: usize, rng: &mut ChaCha8Rng) -> CrossAttention {
        let mut draw = |rows: usize, cols: usize| {
            let b = (1.0 / cols as f64).sqrt();
            let v = (0..rows * cols).map(|_| rng.gen_range(-b..=b)).collect();
            Matrix::new(rows, cols, v).expect("shape")
        };
        CrossAttention {
            wq: draw(ATTENTION_DIM, dim_t),
            wk: draw(ATTENTION_DIM, dim_g),
            wv: draw(dim_t, dim_g),
        }
    }

    fn param_count(&self) -> usize {
        self.wq.data().len() + self.wk.data().len() + self.wv.data().len()
    }

    fn flat_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.wq.data());
        out.extend_from_slice(self.wk.data());
        out.extend_from_slice(self.wv.data());
    }

    fn set_flat(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for m in [&mut self.wq, &mut self.wk, &mut self.wv] {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        pos
    }

    fn forward(&self, grid: &TokenGrid, text: &Matrix) -> Result<(TokenGrid, AttentionTrace)> {
        let x = grid.tokens();
        let text = text.clone();
        let q = matmul_transposed(x, &self.wq)?;
        let k = matmul_transposed(&text, &self.wk)?;
        let v = matmul_transposed(&text, &self.wv)?;
        let scale = 1.0 / (self.wq.rows() as f64).sqrt();
        let mut alpha = matmul_transposed(&q, &k)?.scale(scale);
        let m = alpha.cols();
        for row in alpha.data_mut().chunks_exact_mut(m) {
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for a in row.iter_mut() {
                *a = (*a - top).exp();
                sum += *a;
            }
            for a in row.iter_mut() {
                *a /= sum;
            }
        }
        let mut out = matmul(&alpha, &v)?;
        for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
            *o += xv;
        }
        let out = TokenGrid::new(grid.width(), grid.height(), out)?;
        Ok((out, AttentionTrace { q, k, v, alpha, text }))
    }

    fn backward(&self, grid: &TokenGrid, t: &AttentionTrace, grad: &Matrix) -> Result<CrossAttention> {
        let dv = matmul(&t.alpha.transpose(), grad)?;
        let dalpha = matmul_transposed(grad, &t.v)?;
        let m = t.alpha.cols();
        let scale = 1.0 / (self.wq.rows() as f64).sqrt();
        let mut ds = dalpha;
        for (drow, arow) in ds.data_mut().chunks_exact_mut(m).zip(t.alpha.data().chunks_exact(m)) {
            let inner: f64 = drow.iter().zip(arow).map(|(d, a)| d * a).sum();
            for (d, a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - inner) * scale;
            }
        }
        let dq = matmul(&ds, &t.k)?;
        let dk = matmul(&ds.transpose(), &t.q)?;
        Ok(CrossAttention {
            wq: matmul(&dq.transpose(), grid.tokens())?,
            wk: matmul(&dk.transpose(), &t.text)?,
            wv: matmul(&dv.transpose(), &t.text)?,
        })
    }
}

/// Trainable part of the mock tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct MockTracker {
    pub strategy: Strategy,
    pub dim_g: usize,
    pub guidance: GuidanceWeights,
    /// Score projection of the fused tokens, length `D`.
    pub head: Vec<f64>,
    /// Present only for [`Strategy::DirectText`].
    pub attention: Option<CrossAttention>,
}

/// Flat gradient in [`MockTracker::to_flat`] order.
pub type TrackerGrads = Vec<f64>;

fn huber(r: f64) -> (f64, f64) {
    if r.abs() < 1.0 {
        (0.5 * r * r, r)
    } else {
        (r.abs() - 0.5, r.signum())
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

impl MockTracker {
    pub fn new(strategy: Strategy, dim_g: usize, dim_t: usize, seed: u64) -> Result<MockTracker> {
        if dim_g == 0 {
            return Err(Error::Config("dim_g must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let guidance = init_weights(dim_t, rng.gen())?;
        let b = (1.0 / dim_t as f64).sqrt();
        let head = (0..dim_t).map(|_| rng.gen_range(-b..=b)).collect();
        let attention = (strategy == Strategy::DirectText).then(|| CrossAttention::init(dim_t, dim_g, &mut rng));
        Ok(MockTracker {
            strategy,
            dim_g,
            guidance,
            head,
            attention,
        })
    }

    pub fn dim_t(&self) -> usize {
        self.guidance.dim_t
    }

    pub fn param_count(&self) -> usize {
        self.guidance.param_count() + self.head.len() + self.attention.as_ref().map_or(0, CrossAttention::param_count)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.guidance.to_flat();
        out.extend_from_slice(&self.head);
        if let Some(a) = &self.attention {
            a.flat_into(&mut out);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let g = self.guidance.param_count();
        self.guidance.set_flat(&flat[..g])?;
        let h = self.head.len();
        self.head.copy_from_slice(&flat[g..g + h]);
        if let Some(a) = &mut self.attention {
            a.set_flat(&flat[g + h..]);
        }
        Ok(())
    }

    fn check(&self, text: &Matrix, tokens: &TokenGrid) -> Result<()> {
        if text.rows() == 0 {
            return Err(Error::EmptyText);
        }
        if tokens.dim() != self.dim_t() || text.cols() != self.dim_g {
            return Err(Error::Config(format!(
                "{} model is built for D = {}, D' = {}; got D = {}, D' = {}",
                self.strategy,
                self.dim_t(),
                self.dim_g,
                tokens.dim(),
                text.cols()
            )));
        }
        Ok(())
    }

    fn attended(&self, text: &Matrix, tokens: &TokenGrid) -> Result<Option<(TokenGrid, AttentionTrace)>> {
        match (&self.attention, self.strategy) {
            (Some(a), Strategy::DirectText) => Ok(Some(a.forward(tokens, text)?)),
            (None, Strategy::DirectText) => Err(Error::Config("direct_text model has no attention weights".into())),
            _ => Ok(None),
        }
    }

    fn soft_argmax(&self, fused: &TokenGrid) -> (Vec<f64>, (f64, f64)) {
        let scores: Vec<f64> = (0..fused.len())
            .map(|i| fused.tokens().row(i).iter().zip(&self.head).map(|(a, b)| a * b).sum())
            .collect();
        let p = softmax(&scores);
        let w = fused.width();
        let (mut cx, mut cy) = (0.0, 0.0);
        for (i, &pi) in p.iter().enumerate() {
            cx += pi * ((i % w) as f64 + 0.5);
            cy += pi * ((i / w) as f64 + 0.5);
        }
        (p, (cx, cy))
    }

    /// Predicted target center in token cells. `text` holds the valid text
    /// tokens only.
    pub fn predict_center(&self, heatmap: &Heatmap, text: &Matrix, tokens: &TokenGrid) -> Result<(f64, f64)> {
        self.check(text, tokens)?;
        let fused = match self.attended(text, tokens)? {
            Some((x, _)) => fuse(&self.guidance, heatmap, &x)?,
            None => fuse(&self.guidance, heatmap, tokens)?,
        };
        Ok(self.soft_argmax(&fused).1)
    }

    /// Smooth-L1 center loss (token cells) and its gradient.
    pub fn loss_and_grad(
        &self,
        heatmap: &Heatmap,
        text: &Matrix,
        tokens: &TokenGrid,
        target: (f64, f64),
    ) -> Result<(f64, TrackerGrads)> {
        self.check(text, tokens)?;
        let att = self.attended(text, tokens)?;
        let input = att.as_ref().map_or(tokens, |(x, _)| x);
        let mut loss = 0.0;
        let mut head_grad = vec![0.0; self.head.len()];
        let (_, gw, g_input) = fuse_with_backward(&self.guidance, heatmap, input, FuseOptions::default(), |fused| {
            let (p, (cx, cy)) = self.soft_argmax(fused);
            let (lx, gx) = huber(cx - target.0);
            let (ly, gy) = huber(cy - target.1);
            loss = lx + ly;
            let w = fused.width();
            let d = fused.dim();
            let mut grad = vec![0.0; fused.len() * d];
            for (i, &pi) in p.iter().enumerate() {
                let ds = pi * (((i % w) as f64 + 0.5 - cx) * gx + ((i / w) as f64 + 0.5 - cy) * gy);
                let z = fused.tokens().row(i);
                for c in 0..d {
                    head_grad[c] += ds * z[c];
                    grad[i * d + c] = ds * self.head[c];
                }
            }
            TokenGrid::new(w, fused.height(), Matrix::new(fused.len(), d, grad)?)
        })?;
        let mut flat = gw.to_flat();
        flat.extend_from_slice(&head_grad);
        if let (Some(a), Some((_, trace))) = (&self.attention, &att) {
            a.backward(tokens, trace, g_input.tokens())?.flat_into(&mut flat);
        }
        Ok((loss, flat))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&MODEL_MAGIC);
        w.u32(MODEL_VERSION as usize);
        w.u8(self.strategy.code());
        w.u32(self.dim_g);
        w.raw(&self.guidance.to_bytes());
        w.f64s(&self.head);
        match &self.attention {
            Some(a) => {
                w.u8(1);
                w.u32(a.wq.rows());
                w.f64s(a.wq.data());
                w.f64s(a.wk.data());
                w.f64s(a.wv.data());
            }
            None => w.u8(0),
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MockTracker> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        r.version(MODEL_VERSION)?;
        let strategy = Strategy::from_code(r.u8()?)?;
        let dim_g = r.dim("dim_g", 1)?;
        let guidance = GuidanceWeights::read_from(&mut r)?;
        let dim_t = guidance.dim_t;
        let head = r.f64s(dim_t)?;
        let attention = match r.u8()? {
            0 => None,
            1 => {
                let dk = r.dim("d_k", 1)?;
                let wq = Matrix::new(dk, dim_t, r.f64s(dk * dim_t)?)?;
                let wk = Matrix::new(dk, dim_g, r.f64s(dk * dim_g)?)?;
                let wv = Matrix::new(dim_t, dim_g, r.f64s(dim_t * dim_g)?)?;
                Some(CrossAttention { wq, wk, wv })
            }
            f => return Err(FormatError::Header(format!("attention flag {f}")).into()),
        };
        r.finish()?;
        if attention.is_some() != (strategy == Strategy::DirectText) {
            return Err(Error::Config(format!(
                "{strategy} model {} attention weights",
                if attention.is_some() { "must not carry" } else { "needs" }
            )));
        }
        Ok(MockTracker {
            strategy,
            dim_g,
            guidance,
            head,
            attention,
        })
    }
}

pub fn save_model(m: &MockTracker, path: &Path) -> Result<()> {
    codec::write_file(path, &m.to_bytes())
}

pub fn load_model(path: &Path) -> Result<MockTracker> {
    MockTracker::from_bytes(&fs::read(path)?)
}

/// The valid text rows of a bundle.
pub fn valid_text(b: &FeatureBundle) -> Result<Matrix> {
    b.text_tokens().row_range(0, b.valid_text())
}

/// Box of the target size centered on a predicted token-grid position.
pub fn predicted_box(spec: &SyntheticSpec, center: (f64, f64)) -> BBox {
    let (tx, ty) = spec.token_px();
    let (cx, cy) = spec.cell_px();
    BBox::from_center(
        center.0 * tx,
        center.1 * ty,
        spec.target.w as f64 * cx,
        spec.target.h as f64 * cy,
    )
}

fn check_cadence(cadence: usize) -> Result<()> {
    if cadence == 0 {
        return Err(Error::Config("cadence must be >= 1".into()));
    }
    Ok(())
}

/// Tracks pre-generated frames, recomputing the heatmap every `cadence`
/// frames and reusing the last one in between.
pub fn run_tracker_on<I>(spec: &SyntheticSpec, model: &MockTracker, frames: I, cadence: usize) -> Result<TrackRecord>
where
    I: IntoIterator<Item = Result<(FeatureBundle, TokenGrid, BBox)>>,
{
    check_cadence(cadence)?;
    let mut record = TrackRecord::default();
    let mut cached: Option<Heatmap> = None;
    for (i, frame) in frames.into_iter().enumerate() {
        let (bundle, tokens, truth) = frame?;
        if i % cadence == 0 || cached.is_none() {
            cached = Some(cue_heatmap(model.strategy, &bundle)?);
        }
        let heatmap = cached.as_ref().expect("set above");
        let center = model.predict_center(heatmap, &valid_text(&bundle)?, &tokens)?;
        record.push(predicted_box(spec, center), truth);
    }
    Ok(record)
}

/// Runs a model over a generated sequence.
pub fn run_tracker(spec: &SyntheticSpec, model: &MockTracker, cadence: usize) -> Result<TrackRecord> {
    check_cadence(cadence)?;
    let scene = Scene::new(spec)?;
    let frames = (0..spec.frames).map(|f| {
        let fr = scene.frame(f)?;
        Ok((fr.bundle, fr.tokens, fr.truth))
    });
    run_tracker_on(spec, model, frames, cadence)
}

/// Reference path: every frame is generated, mapped and tracked on its own.
pub fn run_tracker_per_frame(spec: &SyntheticSpec, model: &MockTracker) -> Result<TrackRecord> {
    let mut record = TrackRecord::default();
    for f in 0..spec.frames {
        let (bundle, tokens, truth) = super::generate_bundle(spec, f)?;
        let heatmap = cue_heatmap(model.strategy, &bundle)?;
        let center = model.predict_center(&heatmap, &valid_text(&bundle)?, &tokens)?;
        record.push(predicted_box(spec, center), truth);
    }
    Ok(record)
}
