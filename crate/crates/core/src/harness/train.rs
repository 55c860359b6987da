//! Desk-scale training of the mock tracker with AdamW.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tracker::{cue_heatmap, valid_text, MockTracker, Strategy};
use super::{Scene, SyntheticSpec};
use crate::bundle::TokenGrid;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::numerics::Matrix;

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(params: usize, lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * (self.weight_decay * params[i] + mh / (vh.sqrt() + self.eps));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub batch: usize,
    /// Each training frame is paired with the heatmap of a frame up to this
    /// many frames earlier, drawn uniformly.
    pub heatmap_lag: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 5e-4,
            weight_decay: 1e-4,
            seed: 0,
            train_sequences: 96,
            val_sequences: 16,
            batch: 8,
            heatmap_lag: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss, the initial ones included.
    pub model: MockTracker,
    /// Mean minibatch loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training and after each epoch.
    pub val_loss: Vec<f64>,
    /// 0 means the initial weights were never beaten.
    pub best_epoch: usize,
}

struct Sample {
    heatmap: Heatmap,
    text: Matrix,
    tokens: TokenGrid,
    center: (f64, f64),
}

/// Training and validation sequence seeds. The top bit is set so they never
/// collide with the evaluation suite.
fn sequence_seeds(seed: u64, n: usize, stream: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| rng.gen::<u64>() | 1 << 63).collect()
}

fn samples(
    base: &SyntheticSpec,
    strategy: Strategy,
    seeds: &[u64],
    lag: Option<(usize, &mut ChaCha8Rng)>,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let (max_lag, mut rng) = match lag {
        Some((l, r)) => (l, Some(r)),
        None => (0, None),
    };
    for &s in seeds {
        let spec = base.sequence(s);
        let scene = Scene::new(&spec)?;
        let (tx, ty) = spec.token_px();
        let frames: Vec<_> = (0..spec.frames).map(|f| scene.frame(f)).collect::<Result<_>>()?;
        let maps: Vec<Heatmap> = frames
            .iter()
            .map(|fr| cue_heatmap(strategy, &fr.bundle))
            .collect::<Result<_>>()?;
        for (f, fr) in frames.into_iter().enumerate() {
            let back = match rng.as_mut() {
                Some(r) if max_lag > 0 => r.gen_range(0..=max_lag).min(f),
                _ => 0,
            };
            let (cx, cy) = fr.truth.center();
            out.push(Sample {
                heatmap: maps[f - back].clone(),
                text: valid_text(&fr.bundle)?,
                tokens: fr.tokens,
                center: (cx / tx, cy / ty),
            });
        }
    }
    Ok(out)
}

fn mean_loss(model: &MockTracker, set: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in set {
        let (px, py) = model.predict_center(&s.heatmap, &s.text, &s.tokens)?;
        let r = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        total += r(px - s.center.0) + r(py - s.center.1);
    }
    Ok(total / set.len() as f64)
}

/// Trains one strategy's tracker on sequences drawn from `base`.
pub fn train_guidance(base: &SyntheticSpec, strategy: Strategy, cfg: &TrainConfig) -> Result<TrainOutcome> {
    base.validate()?;
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.train_sequences == 0 || cfg.val_sequences == 0 {
        return Err(Error::Config("epochs, batch and sequence counts must be >= 1".into()));
    }
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "bad lr {} or weight decay {}",
            cfg.lr, cfg.weight_decay
        )));
    }
    let mut lag_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lag_rng.set_stream(4);
    let train = samples(
        base,
        strategy,
        &sequence_seeds(cfg.seed, cfg.train_sequences, 1),
        Some((cfg.heatmap_lag, &mut lag_rng)),
    )?;
    let val = samples(base, strategy, &sequence_seeds(cfg.seed, cfg.val_sequences, 2), None)?;

    let mut model = MockTracker::new(strategy, base.dim_g, base.dim_t, cfg.seed)?;
    let mut params = model.to_flat();
    let mut opt = AdamW::new(params.len(), cfg.lr, cfg.weight_decay);
    let mut best = (mean_loss(&model, &val)?, 0, model.clone());
    let mut val_loss = vec![best.0];
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = cfg.epochs * train.len().div_ceil(cfg.batch);
    let mut step = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &train[i];
                let (l, g) = model.loss_and_grad(&s.heatmap, &s.text, &s.tokens, s.center)?;
                batch_loss += l;
                for (a, v) in grad.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            let n = chunk.len() as f64;
            batch_loss /= n;
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "{strategy}: non-finite loss {batch_loss} at epoch {epoch}, batch {b}"
                )));
            }
            for g in &mut grad {
                *g /= n;
            }
            // Cosine decay from lr to 0 over the whole run.
            opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            step += 1;
            opt.step(&mut params, &grad);
            model.set_flat(&params)?;
            epoch_total += batch_loss * n;
        }
        train_loss.push(epoch_total / train.len() as f64);
        let v = mean_loss(&model, &val)?;
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "{strategy}: validation loss {v} after epoch {epoch}"
            )));
        }
        val_loss.push(v);
        if v < best.0 {
            best = (v, epoch, model.clone());
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        train_loss,
        val_loss,
        best_epoch: best.1,
    })
}
