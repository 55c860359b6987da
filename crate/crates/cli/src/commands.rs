use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cuetrack::bundle::{read_bundle, read_token_grid, write_token_grid};
use cuetrack::cue_mapping::{map_textual_cue, scale_survey, MapOptions};
use cuetrack::gradcheck::{check_case, GradCase};
use cuetrack::guidance::{fuse_with, init_weights, load_weights, save_weights, FuseOptions, GuidanceWeights};
use cuetrack::harness::{
    cue_heatmap, load_model, predicted_box, read_dataset, run_tracker_on, save_model, suite_specs, train_guidance,
    valid_text, write_dataset, MockTracker, SyntheticSpec, TrainConfig,
};
use cuetrack::metrics::{emit_comparison, evaluate, pair_records, read_boxes, write_boxes, TrackRecord};
use cuetrack::{quantize_f32, Heatmap, Matrix, TokenGrid};

use crate::args::*;
use crate::exit::CliError;

type Outcome = Result<(), CliError>;

struct Ctx<'a> {
    global: &'a Global,
}

impl Ctx<'_> {
    fn f32(&self) -> bool {
        self.global.precision == Precision::F32
    }

    fn banner(&self, command: &str, fields: &[(&str, String)]) {
        if self.global.quiet {
            return;
        }
        let mut s = format!(
            "cuetrack {command}: precision={} seed={}",
            self.global.precision, self.global.seed
        );
        for (k, v) in fields {
            let _ = write!(s, " {k}={v}");
        }
        eprintln!("{s}");
    }

    fn info(&self, msg: impl AsRef<str>) {
        if !self.global.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn heatmap(&self, h: Heatmap) -> Heatmap {
        if self.f32() {
            h.quantized()
        } else {
            h
        }
    }

    fn grid(&self, g: TokenGrid) -> cuetrack::Result<TokenGrid> {
        if !self.f32() {
            return Ok(g);
        }
        let data = g.tokens().data().iter().map(|&v| quantize_f32(v)).collect();
        TokenGrid::new(g.width(), g.height(), Matrix::new(g.len(), g.dim(), data)?)
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let ctx = Ctx { global: &cli.global };
    match &cli.command {
        Command::Map(a) => map(&ctx, a),
        Command::Fuse(a) => fuse(&ctx, a),
        Command::InitWeights(a) => init(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Track(a) => track(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::CheckGrad(a) => check_grad(&ctx, a),
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn show_opt(p: &Option<std::path::PathBuf>) -> String {
    p.as_deref().map_or_else(|| "-".into(), show)
}

fn map(ctx: &Ctx, a: &MapArgs) -> Outcome {
    ctx.banner(
        "map",
        &[
            ("bundle", show(&a.bundle)),
            ("out", show(&a.out)),
            ("scale", a.scale.to_string()),
            ("refine", (!a.no_refine).to_string()),
            ("normalize", (!a.no_normalize).to_string()),
            ("pgm", show_opt(&a.pgm)),
            ("survey", show_opt(&a.survey)),
        ],
    );
    let bundle = read_bundle(&a.bundle)?;
    let opts = MapOptions {
        scale: a.scale,
        refine: !a.no_refine,
        normalize: !a.no_normalize,
    };
    let map = ctx.heatmap(map_textual_cue(&bundle, opts)?);
    map.write(&a.out)?;
    if let Some(p) = &a.pgm {
        map.write_pgm(p)?;
    }
    if let Some(dir) = &a.survey {
        fs::create_dir_all(dir)?;
        for (k, m) in scale_survey(&bundle)? {
            let m = ctx.heatmap(m);
            m.write(&dir.join(format!("scale_{k}.cthm")))?;
            m.write_pgm(&dir.join(format!("scale_{k}.pgm")))?;
        }
    }
    ctx.info(format!("wrote {}x{} heatmap", map.width(), map.height()));
    Ok(())
}

fn fuse(ctx: &Ctx, a: &FuseArgs) -> Outcome {
    ctx.banner(
        "fuse",
        &[
            ("heatmap", show(&a.heatmap)),
            ("tokens", show(&a.tokens)),
            ("weights", show(&a.weights)),
            ("out", show(&a.out)),
            ("residual", a.residual.to_string()),
        ],
    );
    let heatmap = ctx.heatmap(Heatmap::read(&a.heatmap)?);
    let grid = read_token_grid(&a.tokens)?;
    let weights = load_weights(&a.weights)?;
    let out = fuse_with(&weights, &heatmap, &grid, FuseOptions { residual: a.residual })?;
    write_token_grid(&ctx.grid(out)?, &a.out)?;
    Ok(())
}

fn init(ctx: &Ctx, a: &InitWeightsArgs) -> Outcome {
    ctx.banner("init-weights", &[("dim", a.dim.to_string()), ("out", show(&a.out))]);
    save_weights(&init_weights(a.dim, ctx.global.seed)?, &a.out)?;
    Ok(())
}

fn load_spec(path: &Option<std::path::PathBuf>) -> Result<SyntheticSpec, CliError> {
    let spec = match path {
        None => SyntheticSpec::default(),
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| CliError::Validation(format!("bad spec {}: {e}", p.display())))?,
    };
    spec.validate()?;
    Ok(spec)
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Outcome {
    let base = load_spec(&a.spec)?;
    ctx.banner(
        "synth",
        &[
            ("out", show(&a.out)),
            ("sequences", a.sequences.to_string()),
            ("first_seed", a.first_seed.to_string()),
            ("spec", spec_json(&base)),
        ],
    );
    let m = write_dataset(&a.out, &suite_specs(&base, a.first_seed, a.sequences))?;
    ctx.info(format!("wrote {} sequences", m.sequences.len()));
    Ok(())
}

fn spec_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let base = load_spec(&a.spec)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        seed: ctx.global.seed,
        train_sequences: a.train_sequences.unwrap_or(d.train_sequences),
        val_sequences: a.val_sequences.unwrap_or(d.val_sequences),
        batch: a.batch.unwrap_or(d.batch),
        heatmap_lag: a.heatmap_lag.unwrap_or(d.heatmap_lag),
    };
    ctx.banner(
        "train",
        &[
            ("strategy", a.strategy.to_string()),
            ("out", show(&a.out)),
            ("config", spec_json(&cfg)),
            ("spec", spec_json(&base)),
        ],
    );
    let outcome = train_guidance(&base, a.strategy, &cfg)?;
    save_model(&outcome.model, &a.out)?;
    if let Some(p) = &a.weights_out {
        save_weights(&outcome.model.guidance, p)?;
    }
    let mut curve = String::from("# epoch train_loss val_loss\n");
    for (e, v) in outcome.val_loss.iter().enumerate() {
        let t = match e {
            0 => "-".to_string(),
            _ => outcome.train_loss[e - 1].to_string(),
        };
        let _ = writeln!(curve, "{e} {t} {v}");
    }
    if let Some(p) = &a.loss_curve {
        fs::write(p, &curve)?;
    }
    ctx.info(curve.trim_end());
    ctx.info(format!("best epoch {}", outcome.best_epoch));
    Ok(())
}

fn quantized_model(ctx: &Ctx, m: MockTracker) -> cuetrack::Result<MockTracker> {
    if !ctx.f32() {
        return Ok(m);
    }
    let mut m = m;
    let flat: Vec<f64> = m.to_flat().into_iter().map(quantize_f32).collect();
    m.set_flat(&flat)?;
    Ok(m)
}

fn track(ctx: &Ctx, a: &TrackArgs) -> Outcome {
    ctx.banner(
        "track",
        &[
            ("data", show(&a.data)),
            ("model", show(&a.model)),
            ("out", show(&a.out)),
            ("cadence", a.cadence.to_string()),
            ("per_frame", a.per_frame.to_string()),
        ],
    );
    let model = quantized_model(ctx, load_model(&a.model)?)?;
    let manifest = read_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    for seq in &manifest.sequences {
        let frames = seq.frames(&a.data)?;
        let indices: Vec<usize> = seq.truth(&a.data)?.into_iter().map(|(i, _)| i).collect();
        let record = if a.per_frame {
            per_frame(ctx, &seq.spec, &model, frames)?
        } else {
            let frames = frames.into_iter().map(|f| {
                let (b, t, gt) = f?;
                Ok((b, ctx.grid(t)?, gt))
            });
            run_tracker_on(&seq.spec, &model, frames, a.cadence)?
        };
        let boxes: Vec<_> = indices
            .into_iter()
            .zip(record.frames.iter().map(|f| f.predicted))
            .collect();
        write_boxes(&boxes, &a.out.join(format!("{}.txt", seq.name)))?;
    }
    ctx.info(format!("tracked {} sequences", manifest.sequences.len()));
    Ok(())
}

type Frame = cuetrack::Result<(cuetrack::FeatureBundle, TokenGrid, cuetrack::metrics::BBox)>;

fn per_frame(
    ctx: &Ctx,
    spec: &SyntheticSpec,
    model: &MockTracker,
    frames: Vec<Frame>,
) -> cuetrack::Result<TrackRecord> {
    let mut rec = TrackRecord::default();
    for f in frames {
        let (bundle, tokens, truth) = f?;
        let heatmap = cue_heatmap(model.strategy, &bundle)?;
        let center = model.predict_center(&heatmap, &valid_text(&bundle)?, &ctx.grid(tokens)?)?;
        rec.push(predicted_box(spec, center), truth);
    }
    Ok(rec)
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Outcome {
    if !a.label.is_empty() && a.label.len() != a.pred.len() {
        return Err(CliError::Usage(format!(
            "{} labels for {} prediction directories",
            a.label.len(),
            a.pred.len()
        )));
    }
    let labels: Vec<String> = a
        .pred
        .iter()
        .enumerate()
        .map(|(i, p)| match a.label.get(i) {
            Some(l) => l.clone(),
            None => p
                .file_name()
                .map_or_else(|| show(p), |n| n.to_string_lossy().into_owned()),
        })
        .collect();
    ctx.banner(
        "eval",
        &[
            ("data", show(&a.data)),
            ("pred", a.pred.iter().map(|p| show(p)).collect::<Vec<_>>().join(",")),
            ("label", labels.join(",")),
            ("out", show(&a.out)),
        ],
    );
    let manifest = read_dataset(&a.data)?;
    let mut truths = Vec::with_capacity(manifest.sequences.len());
    for seq in &manifest.sequences {
        truths.push((seq.name.clone(), seq.truth(&a.data)?));
    }
    let mut reports = Vec::new();
    for (label, dir) in labels.into_iter().zip(&a.pred) {
        let mut records = Vec::with_capacity(truths.len());
        for (name, truth) in &truths {
            let pred = read_boxes(&dir.join(format!("{name}.txt")))?;
            records.push(pair_records(&pred, truth)?);
        }
        let r = evaluate(&records)?;
        ctx.info(format!(
            "{label}: auc {:.4} precision {:.4} norm_precision {:.4} frames {}",
            r.auc, r.precision, r.norm_precision, r.frames
        ));
        reports.push((label, r));
    }
    emit_comparison(&reports, &a.out)?;
    Ok(())
}

fn quantized_case(case: GradCase) -> cuetrack::Result<GradCase> {
    let q = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| quantize_f32(x)).collect() };
    let mut weights: GuidanceWeights = case.weights.clone();
    weights.set_flat(&q(&weights.to_flat()))?;
    let grid = |g: &TokenGrid| -> cuetrack::Result<TokenGrid> {
        TokenGrid::new(
            g.width(),
            g.height(),
            Matrix::new(g.len(), g.dim(), q(g.tokens().data()))?,
        )
    };
    Ok(GradCase {
        weights,
        heatmap: case.heatmap.quantized(),
        grid: grid(&case.grid)?,
        projection: grid(&case.projection)?,
        redraws: case.redraws,
    })
}

fn check_grad(ctx: &Ctx, a: &CheckGradArgs) -> Outcome {
    ctx.banner(
        "check-grad",
        &[
            ("seeds", a.seeds.to_string()),
            ("grid", format!("{}x{}", a.width, a.height)),
            ("dim", a.dim.to_string()),
            ("eps", a.eps.to_string()),
            ("tolerance", a.tolerance.to_string()),
        ],
    );
    if !(a.eps > 0.0) || !(a.tolerance > 0.0) {
        return Err(CliError::Validation("eps and tolerance must be positive".into()));
    }
    let mut worst: f64 = 0.0;
    for s in 0..a.seeds {
        let seed = ctx.global.seed.wrapping_add(s);
        let mut case = GradCase::random(seed, a.width, a.height, a.dim)?;
        if ctx.f32() {
            case = quantized_case(case)?;
        }
        let r = check_case(&case, a.eps)?;
        println!(
            "seed {seed} max_rel_error {:e} weights {:e} tokens {:e} checked {}",
            r.max_rel_error, r.weight_error, r.token_error, r.checked
        );
        worst = worst.max(r.max_rel_error);
    }
    println!("worst {worst:e}");
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {worst:e} >= tolerance {:e}",
            a.tolerance
        )))
    }
}
