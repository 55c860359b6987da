//! One-pass-evaluation metrics: success curve over 21 IoU thresholds, its
//! area, center-error precision at 20 px and size-normalized precision at
//! 0.2.
//!
//! Success counts frames with IoU strictly greater than the threshold, so a
//! perfect track scores 0 at threshold 1.0 and its AUC is 20/21.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codec;
use crate::error::{Error, Result};

pub const CURVE_SAMPLES: usize = 21;
pub const PRECISION_RADIUS_PX: f64 = 20.0;
pub const NORM_PRECISION_RADIUS: f64 = 0.2;

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::Input(format!("box {self:?} must be finite with positive size")));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Predicted and ground-truth boxes of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    pub predicted: BBox,
    pub ground_truth: BBox,
}

/// Per-frame results of one sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackRecord {
    pub frames: Vec<FrameRecord>,
}

impl TrackRecord {
    pub fn push(&mut self, predicted: BBox, ground_truth: BBox) {
        self.frames.push(FrameRecord {
            predicted,
            ground_truth,
        });
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub success_curve: [f64; CURVE_SAMPLES],
    pub frames: usize,
}

pub fn curve_thresholds() -> [f64; CURVE_SAMPLES] {
    std::array::from_fn(|i| i as f64 / (CURVE_SAMPLES - 1) as f64)
}

/// Pools all frames of all records.
pub fn evaluate(records: &[TrackRecord]) -> Result<MetricsReport> {
    let frames: Vec<&FrameRecord> = records.iter().flat_map(|r| &r.frames).collect();
    if frames.is_empty() {
        return Err(Error::Input("no frames to evaluate".into()));
    }
    let thresholds = curve_thresholds();
    let mut hits = [0usize; CURVE_SAMPLES];
    let (mut precise, mut norm_precise) = (0usize, 0usize);
    for f in &frames {
        let overlap = iou(&f.predicted, &f.ground_truth)?;
        for (h, t) in hits.iter_mut().zip(&thresholds) {
            if overlap > *t {
                *h += 1;
            }
        }
        let (pcx, pcy) = f.predicted.center();
        let (gcx, gcy) = f.ground_truth.center();
        let (dx, dy) = (pcx - gcx, pcy - gcy);
        if dx.hypot(dy) <= PRECISION_RADIUS_PX {
            precise += 1;
        }
        if (dx / f.ground_truth.w).hypot(dy / f.ground_truth.h) <= NORM_PRECISION_RADIUS {
            norm_precise += 1;
        }
    }
    let n = frames.len() as f64;
    let success_curve = hits.map(|h| h as f64 / n);
    let auc = success_curve.iter().sum::<f64>() / CURVE_SAMPLES as f64;
    Ok(MetricsReport {
        auc,
        precision: precise as f64 / n,
        norm_precision: norm_precise as f64 / n,
        success_curve,
        frames: frames.len(),
    })
}

impl MetricsReport {
    fn write_block(&self, out: &mut String) {
        let _ = writeln!(out, "frames {}", self.frames);
        let _ = writeln!(out, "auc {}", self.auc);
        let _ = writeln!(out, "precision {}", self.precision);
        let _ = writeln!(out, "norm_precision {}", self.norm_precision);
        for (t, v) in curve_thresholds().iter().zip(&self.success_curve) {
            let _ = writeln!(out, "success {t:.2} {v}");
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.write_block(&mut s);
        s
    }
}

/// Single-report text form: key-value lines followed by the curve samples.
pub fn emit_report(r: &MetricsReport, path: &Path) -> Result<()> {
    codec::write_file(path, r.to_text().as_bytes())
}

/// Several labelled reports, each introduced by a `[label]` line.
pub fn format_comparison(reports: &[(String, MetricsReport)]) -> String {
    let mut s = String::new();
    for (label, r) in reports {
        let _ = writeln!(s, "[{label}]");
        r.write_block(&mut s);
    }
    s
}

pub fn emit_comparison(reports: &[(String, MetricsReport)], path: &Path) -> Result<()> {
    codec::write_file(path, format_comparison(reports).as_bytes())
}

/// Parses the output of [`emit_report`] or [`emit_comparison`]. Unlabelled
/// reports get an empty label.
pub fn parse_reports(text: &str) -> Result<Vec<(String, MetricsReport)>> {
    let bad = |line: &str| Error::Input(format!("malformed report line: {line:?}"));
    let mut out: Vec<(String, MetricsReport)> = Vec::new();
    let mut label = String::new();
    let mut current: Option<(MetricsReport, usize)> = None;
    let flush =
        |out: &mut Vec<(String, MetricsReport)>, label: &str, cur: Option<(MetricsReport, usize)>| -> Result<()> {
            if let Some((r, n)) = cur {
                if n != CURVE_SAMPLES {
                    return Err(Error::Input(format!("report has {n} curve samples")));
                }
                out.push((label.to_string(), r));
            }
            Ok(())
        };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(l) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            flush(&mut out, &label, current.take())?;
            label = l.to_string();
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| bad(line))?;
        let num =
            |s: Option<&str>| -> Result<f64> { s.ok_or_else(|| bad(line))?.parse::<f64>().map_err(|_| bad(line)) };
        if key == "frames" {
            flush(&mut out, &label, current.take())?;
            let frames = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
            current = Some((
                MetricsReport {
                    auc: 0.0,
                    precision: 0.0,
                    norm_precision: 0.0,
                    success_curve: [0.0; CURVE_SAMPLES],
                    frames,
                },
                0,
            ));
            continue;
        }
        let (r, n) = current.as_mut().ok_or_else(|| bad(line))?;
        match key {
            "auc" => r.auc = num(parts.next())?,
            "precision" => r.precision = num(parts.next())?,
            "norm_precision" => r.norm_precision = num(parts.next())?,
            "success" => {
                parts.next();
                if *n >= CURVE_SAMPLES {
                    return Err(bad(line));
                }
                r.success_curve[*n] = num(parts.next())?;
                *n += 1;
            }
            _ => return Err(bad(line)),
        }
    }
    flush(&mut out, &label, current)?;
    Ok(out)
}

pub fn read_reports(path: &Path) -> Result<Vec<(String, MetricsReport)>> {
    parse_reports(&fs::read_to_string(path)?)
}

/// Writes `frame_index x y w h` lines.
pub fn write_boxes(boxes: &[(usize, BBox)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (i, b) in boxes {
        let _ = writeln!(s, "{i} {} {} {} {}", b.x, b.y, b.w, b.h);
    }
    codec::write_file(path, s.as_bytes())
}

pub fn parse_boxes(text: &str) -> Result<Vec<(usize, BBox)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let bad = || Error::Input(format!("malformed box line: {line:?}"));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad());
            }
            let idx = fields[0].parse::<usize>().map_err(|_| bad())?;
            let v: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let b = BBox::new(v[0], v[1], v[2], v[3]);
            b.validate()?;
            Ok((idx, b))
        })
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<(usize, BBox)>> {
    parse_boxes(&fs::read_to_string(path)?)
}

/// Pairs predictions with ground truth by frame index.
pub fn pair_records(predicted: &[(usize, BBox)], truth: &[(usize, BBox)]) -> Result<TrackRecord> {
    let mut rec = TrackRecord::default();
    for (i, gt) in truth {
        let pred = predicted
            .iter()
            .find(|(j, _)| j == i)
            .ok_or_else(|| Error::Input(format!("no prediction for frame {i}")))?;
        rec.push(pred.1, *gt);
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(pairs: &[(BBox, BBox)]) -> TrackRecord {
        let mut r = TrackRecord::default();
        for (p, g) in pairs {
            r.push(*p, *g);
        }
        r
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)).unwrap(), 0.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(iou(&a, &BBox::new(0.0, 0.0, 1.0, -1.0)).is_err());
    }

    #[test]
    fn perfect_tracking_auc_is_twenty_over_twenty_one() {
        let g = BBox::new(10.0, 20.0, 30.0, 40.0);
        let r = evaluate(&[record(&[(g, g), (g, g)])]).unwrap();
        assert_eq!(r.auc, 20.0 / 21.0);
        assert_eq!(r.success_curve[20], 0.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.norm_precision, 1.0);
    }

    #[test]
    fn far_predictions_have_zero_precision() {
        let g = BBox::new(100.0, 100.0, 30.0, 30.0);
        let p = BBox::new(0.0, 0.0, 5.0, 5.0);
        let r = evaluate(&[record(&[(p, g)])]).unwrap();
        assert_eq!(r.precision, 0.0);
        assert_eq!(r.norm_precision, 0.0);
        assert_eq!(r.auc, 0.0);
    }

    #[test]
    fn two_frame_curve_steps() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU exactly 0.3 and 0.7: strict comparison drops each at its own
        // threshold, giving 6 full, 8 half and 7 empty samples.
        let exact = record(&[(BBox::new(0.0, 0.0, 3.0, 10.0), g), (BBox::new(0.0, 0.0, 7.0, 10.0), g)]);
        let r = evaluate(&[exact]).unwrap();
        assert_eq!(r.auc, (6.0 + 8.0 * 0.5) / 21.0);
        // IoU 0.31 and 0.71 sit just above the steps: 7 full, 8 half, 6 empty.
        let above = record(&[(BBox::new(0.0, 0.0, 3.1, 10.0), g), (BBox::new(0.0, 0.0, 7.1, 10.0), g)]);
        let r = evaluate(&[above]).unwrap();
        assert!((r.auc - (7.0 * 1.0 + 8.0 * 0.5 + 6.0 * 0.0) / 21.0).abs() < 1e-15);
        assert_eq!(r.success_curve[6], 1.0);
        assert_eq!(r.success_curve[7], 0.5);
        assert_eq!(r.success_curve[14], 0.5);
        assert_eq!(r.success_curve[15], 0.0);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(evaluate(&[]).is_err());
        assert!(evaluate(&[TrackRecord::default()]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = evaluate(&[record(&[(BBox::new(1.0, 2.0, 9.0, 7.0), g), (g, g)])]).unwrap();
        let parsed = parse_reports(&r.to_text()).unwrap();
        assert_eq!(parsed, vec![(String::new(), r.clone())]);
        let cmp = vec![
            ("direct_text".to_string(), r.clone()),
            ("naive_map".to_string(), r.clone()),
            ("refined_heatmap".to_string(), r.clone()),
        ];
        let text = format_comparison(&cmp);
        for (label, _) in &cmp {
            assert!(text.contains(&format!("[{label}]")));
        }
        assert_eq!(parse_reports(&text).unwrap(), cmp);
    }

    #[test]
    fn box_lines_round_trip() {
        let boxes = vec![(0, BBox::new(1.5, 2.0, 3.0, 4.25)), (1, BBox::new(0.0, 0.0, 8.0, 8.0))];
        let text: String = boxes
            .iter()
            .map(|(i, b)| format!("{i} {} {} {} {}\n", b.x, b.y, b.w, b.h))
            .collect();
        assert_eq!(parse_boxes(&text).unwrap(), boxes);
        assert!(parse_boxes("0 1 2 3").is_err());
        assert!(parse_boxes("0 1 2 0 3").is_err());
    }
}
