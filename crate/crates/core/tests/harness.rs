use cuetrack::bundle::slice_scale;
use cuetrack::harness::{
    generate_sequence, run_tracker, suite_specs, train_guidance, Rect, Scene, Strategy, SyntheticSpec, TrainConfig,
};

/// Steps the target one frame at a time, flipping velocity at the borders.
fn simulate(spec: &SyntheticSpec, frames: usize) -> Vec<Rect> {
    let (w1, h1) = spec.scales[0];
    let (max_x, max_y) = ((w1 - spec.target.w) as i64, (h1 - spec.target.h) as i64);
    let (mut x, mut y) = (spec.target.x as i64, spec.target.y as i64);
    let (mut vx, mut vy) = spec.velocity;
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(Rect {
            x: x as usize,
            y: y as usize,
            ..spec.target
        });
        for (p, v, max) in [(&mut x, &mut vx, max_x), (&mut y, &mut vy, max_y)] {
            if max == 0 {
                continue;
            }
            if *p + *v > max || *p + *v < 0 {
                *v = -*v;
            }
            *p += *v;
        }
    }
    out
}

#[test]
fn motion_matches_step_simulation() {
    let base = SyntheticSpec {
        target: Rect {
            x: 0,
            y: 0,
            w: 10,
            h: 7,
        },
        ..SyntheticSpec::default()
    };
    for spec in suite_specs(&base, 77, 40) {
        let expected = simulate(&spec, 120);
        for (f, r) in expected.iter().enumerate() {
            assert_eq!(spec.target_at(f), *r, "seed {} frame {f}", spec.seed);
            let b = spec.truth_at(f);
            assert_eq!((b.x, b.y, b.w, b.h), (r.x as f64 * 8.0, r.y as f64 * 8.0, 80.0, 56.0));
        }
    }
    let fixed = SyntheticSpec {
        velocity: (1, -1),
        ..SyntheticSpec::default()
    };
    assert_eq!(
        fixed.target_at(0),
        Rect {
            x: 11,
            y: 11,
            w: 10,
            h: 10
        }
    );
    assert_eq!(
        fixed.target_at(11),
        Rect {
            x: 22,
            y: 0,
            w: 10,
            h: 10
        }
    );
    assert_eq!(
        fixed.target_at(12),
        Rect {
            x: 21,
            y: 1,
            w: 10,
            h: 10
        }
    );
}

#[test]
fn deeper_scales_carry_no_text_direction() {
    let base = SyntheticSpec {
        frames: 1,
        ..SyntheticSpec::default()
    };
    let layout_tokens: Vec<usize> = base.scales.iter().map(|(w, h)| w * h).collect();
    for (k, &n_k) in layout_tokens.iter().enumerate().skip(1) {
        let mut sum = 0.0;
        let mut n = 0usize;
        for spec in suite_specs(&base, 50_000, 1000) {
            let scene = Scene::new(&spec).unwrap();
            let bundle = scene.frame(0).unwrap().bundle;
            let t = scene.direction();
            let f = slice_scale(&bundle, k + 1).unwrap();
            for r in 0..f.rows() {
                sum += f.row(r).iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
            }
            n += n_k;
        }
        let mean = sum / n as f64;
        let bound = 3.0 * base.sigma / (n as f64).sqrt();
        assert!(mean.abs() < bound, "scale {}: mean {mean} vs {bound}", k + 1);
    }
}

#[test]
fn noiseless_refined_tracking_lands_inside_target() {
    let base = SyntheticSpec {
        sigma: 0.0,
        ..SyntheticSpec::default()
    };
    let cfg = TrainConfig {
        epochs: 4,
        train_sequences: 24,
        val_sequences: 8,
        ..TrainConfig::default()
    };
    let model = train_guidance(&base, Strategy::RefinedHeatmap, &cfg).unwrap().model;
    for spec in suite_specs(&base, 1000, 20) {
        let record = run_tracker(&spec, &model, 1).unwrap();
        let frames = generate_sequence(&spec).unwrap();
        for (f, (fr, gt)) in record.frames.iter().zip(&frames).enumerate() {
            let (cx, cy) = fr.predicted.center();
            let b = gt.truth;
            assert!(
                cx > b.x && cx < b.x + b.w && cy > b.y && cy < b.y + b.h,
                "seed {} frame {f}: center ({cx}, {cy}) outside {b:?}",
                spec.seed
            );
        }
    }
}
