//! Planted-target synthetic data and a desk-scale tracking rig.
//!
//! Each sequence has a unit text direction `t`. Scale-1 image tokens inside
//! the target rectangle carry `μ·t` plus noise; tokens outside are noise with
//! the `t` component removed, and deeper scales are pure noise. The tracker
//! sees a separately rendered frame in which the target and a few equally
//! sized distractors are drawn as colored boxes; only the target's color is
//! tied to `t`, so the tracker needs the text to tell them apart.

mod dataset;
mod tracker;
mod train;

pub use dataset::{read_dataset, write_dataset, DatasetSequence, Manifest};
pub use tracker::{
    cue_heatmap, load_model, predicted_box, run_tracker, run_tracker_on, run_tracker_per_frame, save_model, valid_text,
    CrossAttention, MockTracker, Strategy, TrackerGrads,
};
pub use train::{train_guidance, AdamW, TrainConfig, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureBundle, ScaleLayout, TokenGrid};
use crate::codec::quantize_f32;
use crate::cue_mapping::{map_textual_cue, MapOptions};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::numerics::Matrix;

/// Side of the nominal square frame in pixels; all boxes are reported in it.
pub const NOMINAL_FRAME_PX: f64 = 256.0;
/// Rendered pixels per tracker token along each axis.
pub const PATCH: usize = 4;
const CHANNELS: usize = 3;
const WORLD_SEED: u64 = 0x5eed_c0de;

/// First seed and size of the frozen held-out evaluation suite.
pub const SUITE_SEED: u64 = 1000;
pub const SUITE_SEQUENCES: usize = 200;

/// Axis-aligned rectangle in scale-1 cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// `(w_k, h_k)` per scale, shallow first.
    pub scales: Vec<(usize, usize)>,
    pub dim_g: usize,
    pub dim_t: usize,
    /// `(w_tx, h_tx)`.
    pub tracker_grid: (usize, usize),
    pub n_text: usize,
    /// Padded text length `L_gl`.
    pub text_capacity: usize,
    /// Target position at frame 0.
    pub target: Rect,
    /// Cells per frame; the target bounces off the grid borders.
    pub velocity: (i64, i64),
    pub mu: f64,
    pub sigma: f64,
    pub frames: usize,
    pub distractors: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scales: vec![(32, 32), (16, 16), (8, 8), (4, 4)],
            dim_g: 64,
            dim_t: 64,
            tracker_grid: (16, 16),
            n_text: 4,
            text_capacity: 8,
            target: Rect {
                x: 11,
                y: 11,
                w: 10,
                h: 10,
            },
            velocity: (1, 0),
            mu: 4.0,
            sigma: 1.0,
            frames: 8,
            distractors: 2,
        }
    }
}

/// Triangle wave on `0..=span`.
fn reflect(u: i64, span: i64) -> i64 {
    if span == 0 {
        return 0;
    }
    let m = u.rem_euclid(2 * span);
    if m <= span {
        m
    } else {
        2 * span - m
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales.is_empty() || self.scales.iter().any(|&(w, h)| w == 0 || h == 0) {
            return bad("every scale needs positive dims".into());
        }
        let (w1, h1) = self.scales[0];
        let (tw, th) = self.tracker_grid;
        if tw == 0 || th == 0 || !(tw * PATCH).is_multiple_of(w1) || !(th * PATCH).is_multiple_of(h1) {
            return bad(format!(
                "tracker grid {tw}x{th} renders {}x{} px, not a multiple of scale-1 grid {w1}x{h1}",
                tw * PATCH,
                th * PATCH
            ));
        }
        if self.dim_g == 0 || self.dim_t == 0 {
            return bad("feature dims must be >= 1".into());
        }
        if self.n_text == 0 || self.n_text > self.text_capacity {
            return bad(format!("n_text {} must be in 1..={}", self.n_text, self.text_capacity));
        }
        let r = self.target;
        if r.w == 0 || r.h == 0 || r.x + r.w > w1 || r.y + r.h > h1 {
            return bad(format!("target {r:?} not inside the {w1}x{h1} grid"));
        }
        if self.velocity.0.abs() > w1 as i64 || self.velocity.1.abs() > h1 as i64 {
            return bad("velocity exceeds grid size".into());
        }
        if !(self.mu > 0.0) || !(self.sigma >= 0.0) || !self.mu.is_finite() || !self.sigma.is_finite() {
            return bad(format!(
                "need mu > 0 and sigma >= 0, got {} and {}",
                self.mu, self.sigma
            ));
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        Ok(())
    }

    /// Same spec with the given seed and a start position and velocity drawn
    /// from it.
    pub fn sequence(&self, seed: u64) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let (w1, h1) = self.scales[0];
        let mut s = self.clone();
        s.seed = seed;
        s.target.x = rng.gen_range(0..=w1 - self.target.w);
        s.target.y = rng.gen_range(0..=h1 - self.target.h);
        s.velocity = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
        s
    }

    /// Target rectangle at `frame`.
    pub fn target_at(&self, frame: usize) -> Rect {
        moved(self.target, self.velocity, frame, self.scales[0])
    }

    /// Nominal pixels per scale-1 cell along x and y.
    pub fn cell_px(&self) -> (f64, f64) {
        let (w1, h1) = self.scales[0];
        (NOMINAL_FRAME_PX / w1 as f64, NOMINAL_FRAME_PX / h1 as f64)
    }

    /// Nominal pixels per tracker token along x and y.
    pub fn token_px(&self) -> (f64, f64) {
        let (tw, th) = self.tracker_grid;
        (NOMINAL_FRAME_PX / tw as f64, NOMINAL_FRAME_PX / th as f64)
    }

    pub fn rect_to_box(&self, r: Rect) -> BBox {
        let (cx, cy) = self.cell_px();
        BBox::new(r.x as f64 * cx, r.y as f64 * cy, r.w as f64 * cx, r.h as f64 * cy)
    }

    pub fn truth_at(&self, frame: usize) -> BBox {
        self.rect_to_box(self.target_at(frame))
    }
}

fn moved(r: Rect, v: (i64, i64), frame: usize, (w1, h1): (usize, usize)) -> Rect {
    let f = frame as i64;
    Rect {
        x: reflect(r.x as i64 + v.0 * f, (w1 - r.w) as i64) as usize,
        y: reflect(r.y as i64 + v.1 * f, (h1 - r.h) as i64) as usize,
        ..r
    }
}

/// Seeded constants shared by every sequence: the text-to-color map and the
/// toy patch embedder.
struct World {
    color_proj: Matrix,
    embedder: Matrix,
}

impl World {
    fn new(dim_g: usize, dim_t: usize) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
        let color_proj = (0..CHANNELS * dim_g).map(|_| normal(&mut rng)).collect();
        let patch = PATCH * PATCH * CHANNELS;
        let scale = 1.0 / (patch as f64).sqrt();
        let embedder = (0..dim_t * patch).map(|_| normal(&mut rng) * scale).collect();
        World {
            color_proj: Matrix::new(CHANNELS, dim_g, color_proj).expect("shape"),
            embedder: Matrix::new(dim_t, patch, embedder).expect("shape"),
        }
    }
}

struct Distractor {
    rect: Rect,
    velocity: (i64, i64),
    color: [f64; 3],
}

/// Per-sequence state: text direction, text tokens, colors and distractors.
pub struct Scene {
    spec: SyntheticSpec,
    world: World,
    direction: Vec<f64>,
    text: Matrix,
    target_color: [f64; 3],
    distractors: Vec<Distractor>,
}

/// One generated frame.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub bundle: FeatureBundle,
    pub tokens: TokenGrid,
    pub truth: BBox,
    pub rect: Rect,
}

fn color3(v: &[f64]) -> [f64; 3] {
    let u = unit(v.to_vec());
    [u[0], u[1], u[2]]
}

impl Scene {
    pub fn new(spec: &SyntheticSpec) -> Result<Scene> {
        spec.validate()?;
        let world = World::new(spec.dim_g, spec.dim_t);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.dim_g;
        let direction = unit((0..d).map(|_| normal(&mut rng)).collect());
        let mut text = vec![0.0; spec.text_capacity * d];
        for j in 0..spec.n_text {
            for (c, &t) in direction.iter().enumerate() {
                text[j * d + c] = quantize_f32(t + normal(&mut rng) * spec.sigma / 4.0);
            }
        }
        let projected: Vec<f64> = (0..CHANNELS)
            .map(|r| world.color_proj.row(r).iter().zip(&direction).map(|(a, b)| a * b).sum())
            .collect();
        let target_color = color3(&projected);
        let (w1, h1) = spec.scales[0];
        let distractors = (0..spec.distractors)
            .map(|_| {
                let rect = Rect {
                    x: rng.gen_range(0..=w1 - spec.target.w),
                    y: rng.gen_range(0..=h1 - spec.target.h),
                    ..spec.target
                };
                let velocity = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
                let c: Vec<f64> = (0..CHANNELS).map(|_| normal(&mut rng)).collect();
                Distractor {
                    rect,
                    velocity,
                    color: color3(&c),
                }
            })
            .collect();
        Ok(Scene {
            spec: spec.clone(),
            world,
            direction,
            text: Matrix::new(spec.text_capacity, d, text)?,
            target_color,
            distractors,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    pub fn target_color(&self) -> [f64; 3] {
        self.target_color
    }

    fn frame_rng(&self, frame: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(frame as u64 + 1);
        rng
    }

    pub fn frame(&self, frame: usize) -> Result<SyntheticFrame> {
        let spec = &self.spec;
        let rect = spec.target_at(frame);
        let mut rng = self.frame_rng(frame);
        let bundle = self.bundle(rect, &mut rng)?;
        let tokens = self.render_tokens(frame, rect, &mut rng)?;
        Ok(SyntheticFrame {
            bundle,
            tokens,
            truth: spec.rect_to_box(rect),
            rect,
        })
    }

    fn bundle(&self, rect: Rect, rng: &mut ChaCha8Rng) -> Result<FeatureBundle> {
        let spec = &self.spec;
        let d = spec.dim_g;
        let layout = ScaleLayout::new(spec.scales.clone())?;
        let mut image = Vec::with_capacity(layout.total_tokens() * d);
        let (w1, h1) = spec.scales[0];
        let t = &self.direction;
        for i in 0..w1 * h1 {
            let mut n: Vec<f64> = (0..d).map(|_| normal(rng) * spec.sigma).collect();
            if rect.contains(i % w1, i / w1) {
                for (v, tc) in n.iter_mut().zip(t) {
                    *v += spec.mu * tc;
                }
            } else {
                let along: f64 = n.iter().zip(t).map(|(a, b)| a * b).sum();
                for (v, tc) in n.iter_mut().zip(t) {
                    *v -= along * tc;
                }
            }
            image.extend(n);
        }
        for &(w, h) in &spec.scales[1..] {
            for _ in 0..w * h * d {
                image.push(normal(rng) * spec.sigma);
            }
        }
        let image: Vec<f64> = image.into_iter().map(quantize_f32).collect();
        FeatureBundle::new(
            self.text.clone(),
            spec.n_text,
            layout,
            Matrix::new(layout_rows(spec), d, image)?,
        )
    }

    fn render_tokens(&self, frame: usize, rect: Rect, rng: &mut ChaCha8Rng) -> Result<TokenGrid> {
        let spec = &self.spec;
        let (tw, th) = spec.tracker_grid;
        let (pw, ph) = (tw * PATCH, th * PATCH);
        let (w1, h1) = spec.scales[0];
        let (sx, sy) = (pw / w1, ph / h1);
        let noise = 0.3 * spec.sigma;
        let mut px: Vec<f64> = (0..CHANNELS * pw * ph).map(|_| normal(rng) * noise).collect();
        let mut paint = |r: Rect, color: [f64; 3]| {
            for y in r.y * sy..(r.y + r.h) * sy {
                for x in r.x * sx..(r.x + r.w) * sx {
                    for (c, &col) in color.iter().enumerate() {
                        px[(c * ph + y) * pw + x] += col;
                    }
                }
            }
        };
        for dis in &self.distractors {
            paint(moved(dis.rect, dis.velocity, frame, (w1, h1)), dis.color);
        }
        paint(rect, self.target_color);

        let patch = PATCH * PATCH * CHANNELS;
        let e = &self.world.embedder;
        let mut tokens = Vec::with_capacity(tw * th * spec.dim_t);
        let mut buf = vec![0.0; patch];
        for gy in 0..th {
            for gx in 0..tw {
                for c in 0..CHANNELS {
                    for py in 0..PATCH {
                        for pxx in 0..PATCH {
                            let (y, x) = (gy * PATCH + py, gx * PATCH + pxx);
                            buf[(c * PATCH + py) * PATCH + pxx] = px[(c * ph + y) * pw + x];
                        }
                    }
                }
                for r in 0..spec.dim_t {
                    let v: f64 = e.row(r).iter().zip(&buf).map(|(a, b)| a * b).sum();
                    tokens.push(quantize_f32(v));
                }
            }
        }
        TokenGrid::new(tw, th, Matrix::new(tw * th, spec.dim_t, tokens)?)
    }
}

fn layout_rows(spec: &SyntheticSpec) -> usize {
    spec.scales.iter().map(|(w, h)| w * h).sum()
}

/// Bundle, tracker tokens and ground-truth box of one frame.
pub fn generate_bundle(spec: &SyntheticSpec, frame: usize) -> Result<(FeatureBundle, TokenGrid, BBox)> {
    let f = Scene::new(spec)?.frame(frame)?;
    Ok((f.bundle, f.tokens, f.truth))
}

/// All frames of one sequence.
pub fn generate_sequence(spec: &SyntheticSpec) -> Result<Vec<SyntheticFrame>> {
    let scene = Scene::new(spec)?;
    (0..spec.frames).map(|f| scene.frame(f)).collect()
}

/// Sequence specs `first_seed..first_seed + count` derived from `base`.
pub fn suite_specs(base: &SyntheticSpec, first_seed: u64, count: usize) -> Vec<SyntheticSpec> {
    (0..count as u64).map(|i| base.sequence(first_seed + i)).collect()
}

/// The frozen held-out evaluation suite.
pub fn evaluation_suite(base: &SyntheticSpec) -> Vec<SyntheticSpec> {
    suite_specs(base, SUITE_SEED, SUITE_SEQUENCES)
}

/// Fraction of frames whose scale-1 map argmax falls inside the target.
pub fn localization_rate(suite: &[SyntheticSpec], refine: bool) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for spec in suite {
        for f in generate_sequence(spec)? {
            let opts = MapOptions {
                refine,
                ..MapOptions::default()
            };
            let (row, col) = map_textual_cue(&f.bundle, opts)?.argmax_cell();
            hits += usize::from(f.rect.contains(col, row));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("empty suite".into()));
    }
    Ok(hits as f64 / total as f64)
}
