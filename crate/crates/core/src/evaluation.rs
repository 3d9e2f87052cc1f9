//! COCO-style average precision and sweep reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{iou, BoundingBox, Corners, Detection};
use crate::model::Detector;
use crate::sampling::{detect_scenes, SamplerConfig, Solver};
use crate::scenes::Scene;

pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const RECALL_POINTS: usize = 101;
/// Area cut points (fractions of the image) between small, medium and large.
pub const DEFAULT_AREA_CUTS: [f64; 2] = [1.0 / 64.0, 1.0 / 16.0];

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BoundingBox>,
    pub classes: Vec<usize>,
}

impl From<&Scene> for GroundTruth {
    fn from(s: &Scene) -> Self {
        Self { boxes: s.gt_boxes.clone(), classes: s.gt_classes.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    scene: usize,
    index: usize,
    score: f64,
}

/// Matching of one class at one threshold: the true/false-positive flags in
/// rank order and the number of non-ignored ground truths.
fn match_class(
    dets: &[Vec<Detection>],
    gts: &[GroundTruth],
    class: usize,
    thr: f64,
    area: Option<(f64, f64)>,
) -> (Vec<bool>, usize) {
    let in_range = |b: &BoundingBox| area.is_none_or(|(lo, hi)| b.area() >= lo && b.area() < hi);
    let mut ranked: Vec<Ranked> = dets
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| {
            ds.iter()
                .enumerate()
                .filter(|(_, d)| d.class_id == class)
                .map(move |(i, d)| Ranked { scene: s, index: i, score: d.score })
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.scene.cmp(&b.scene)).then(a.index.cmp(&b.index)));

    let gt_corners: Vec<Vec<(usize, Corners, bool)>> = gts
        .iter()
        .map(|g| {
            g.boxes
                .iter()
                .zip(&g.classes)
                .enumerate()
                .filter(|(_, (_, &c))| c == class)
                .map(|(j, (b, _))| (j, b.corners(), !in_range(b)))
                .collect()
        })
        .collect();
    let n_gt = gt_corners.iter().flatten().filter(|(_, _, ignored)| !ignored).count();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();

    let mut flags = Vec::with_capacity(ranked.len());
    for r in ranked {
        let d = &dets[r.scene][r.index];
        let dc = d.bbox.corners();
        // Best free ground truth, preferring non-ignored ones.
        let mut best: Option<(usize, f64, bool)> = None;
        for &(j, gc, ignored) in &gt_corners[r.scene] {
            if taken[r.scene][j] {
                continue;
            }
            let v = iou(&dc, &gc);
            if v < thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv, bi)) => (bi && !ignored) || (bi == ignored && v > bv),
            };
            if better {
                best = Some((j, v, ignored));
            }
        }
        match best {
            Some((j, _, ignored)) => {
                taken[r.scene][j] = true;
                if !ignored {
                    flags.push(true);
                }
            }
            None => {
                if in_range(&d.bbox) {
                    flags.push(false);
                }
            }
        }
    }
    (flags, n_gt)
}

/// 101-point interpolated precision at recall `0, 0.01, ..., 1`.
fn interpolated_precision(flags: &[bool], n_gt: usize) -> Vec<f64> {
    let mut tp = 0usize;
    let mut rec = Vec::with_capacity(flags.len());
    let mut prec = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        rec.push(tp as f64 / n_gt as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    (0..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            let pos = rec.partition_point(|&x| x < r);
            if pos < prec.len() {
                prec[pos]
            } else {
                0.0
            }
        })
        .collect()
}

fn classes_with_gt(gts: &[GroundTruth]) -> Vec<usize> {
    let mut cs: Vec<usize> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
    cs.sort_unstable();
    cs.dedup();
    cs
}

/// Mean over classes of the interpolated precision curves, or `None` when
/// no class has ground truth in range.
fn mean_curve(dets: &[Vec<Detection>], gts: &[GroundTruth], thr: f64, area: Option<(f64, f64)>) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; RECALL_POINTS];
    let mut n = 0usize;
    for c in classes_with_gt(gts) {
        let (flags, n_gt) = match_class(dets, gts, c, thr, area);
        if n_gt == 0 {
            continue;
        }
        for (s, p) in sum.iter_mut().zip(interpolated_precision(&flags, n_gt)) {
            *s += p;
        }
        n += 1;
    }
    (n > 0).then(|| sum.into_iter().map(|s| s / n as f64).collect())
}

fn curve_ap(curve: &[f64]) -> f64 {
    curve.iter().sum::<f64>() / curve.len() as f64
}

/// AP at one IoU threshold. NaN when no scene has ground truth.
pub fn ap_at_iou(dets: &[Vec<Detection>], gts: &[GroundTruth], iou_thr: f64) -> f64 {
    mean_curve(dets, gts, iou_thr, None).map_or(f64::NAN, |c| curve_ap(&c))
}

fn ap_range(dets: &[Vec<Detection>], gts: &[GroundTruth], area: Option<(f64, f64)>) -> f64 {
    let aps: Vec<f64> =
        IOU_THRESHOLDS.iter().filter_map(|&t| mean_curve(dets, gts, t, area).map(|c| curve_ap(&c))).collect();
    if aps.is_empty() {
        f64::NAN
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// Fraction of ground truths matched at IoU 0.5 by any detection.
    pub recall: f64,
    pub per_threshold: Vec<f64>,
    /// Class-averaged 101-point precision curve per threshold.
    pub pr_curves: Vec<Vec<f64>>,
    pub n_gt: usize,
    pub n_dets: usize,
}

pub fn coco_style_ap(dets: &[Vec<Detection>], gts: &[GroundTruth]) -> EvalResult {
    coco_style_ap_with_cuts(dets, gts, DEFAULT_AREA_CUTS)
}

pub fn coco_style_ap_with_cuts(dets: &[Vec<Detection>], gts: &[GroundTruth], cuts: [f64; 2]) -> EvalResult {
    let curves: Vec<Option<Vec<f64>>> = IOU_THRESHOLDS.iter().map(|&t| mean_curve(dets, gts, t, None)).collect();
    let per_threshold: Vec<f64> = curves.iter().map(|c| c.as_ref().map_or(f64::NAN, |c| curve_ap(c))).collect();
    let ap = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    let n_gt: usize = gts.iter().map(|g| g.boxes.len()).sum();
    let matched: usize = classes_with_gt(gts).into_iter().map(|c| match_class(dets, gts, c, 0.5, None).0.iter().filter(|&&f| f).count()).sum();
    EvalResult {
        ap,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ap_small: ap_range(dets, gts, Some((0.0, cuts[0]))),
        ap_medium: ap_range(dets, gts, Some((cuts[0], cuts[1]))),
        ap_large: ap_range(dets, gts, Some((cuts[1], f64::INFINITY))),
        recall: if n_gt == 0 { f64::NAN } else { matched as f64 / n_gt as f64 },
        per_threshold,
        pr_curves: curves.into_iter().map(Option::unwrap_or_default).collect(),
        n_gt,
        n_dets: dets.iter().map(Vec::len).sum(),
    }
}

/// Sample and score a model on `scenes`.
pub fn evaluate(det: &Detector, scenes: &[Scene], sampler: &SamplerConfig, seed: u64) -> Result<(EvalResult, f64, f64)> {
    let start = Instant::now();
    let outs = detect_scenes(det, scenes, sampler, seed)?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / scenes.len().max(1) as f64;
    let nfe = outs.iter().map(|o| o.nfe).sum::<usize>() as f64 / scenes.len().max(1) as f64;
    let dets: Vec<Vec<Detection>> = outs.into_iter().map(|o| o.detections).collect();
    let gts: Vec<GroundTruth> = scenes.iter().map(GroundTruth::from).collect();
    Ok((coco_style_ap(&dets, &gts), nfe, ms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_eval: usize,
    pub steps: usize,
    pub solver: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall: f64,
    /// Mean field evaluations per scene.
    pub nfe: f64,
    pub ms_per_scene: f64,
    pub pr_curves: Vec<Vec<f64>>,
}

pub const SWEEP_CSV_HEADER: &str = "n_eval,steps,solver,ap,ap50,ap75,recall,nfe,ms_per_scene";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.2},{:.3}",
            self.n_eval, self.steps, self.solver, self.ap, self.ap50, self.ap75, self.recall, self.nfe, self.ms_per_scene
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Evaluate every `(n_eval, steps, solver)` cell of a grid.
pub fn sweep_report(
    det: &Detector,
    scenes: &[Scene],
    run: &RunConfig,
    n_evals: &[usize],
    steps: &[usize],
    solvers: &[Solver],
) -> Result<Vec<SweepRow>> {
    let base = SamplerConfig::from_run(run);
    let mut rows = Vec::new();
    for &n_eval in n_evals {
        for &s in steps {
            for &solver in solvers {
                let cfg = SamplerConfig { n_eval, steps: s, solver, ..base };
                let (res, nfe, ms) = evaluate(det, scenes, &cfg, run.seed)?;
                rows.push(SweepRow {
                    n_eval,
                    steps: s,
                    solver: solver.name().to_string(),
                    ap: res.ap,
                    ap50: res.ap50,
                    ap75: res.ap75,
                    recall: res.recall,
                    nfe,
                    ms_per_scene: ms,
                    pr_curves: res.pr_curves,
                });
            }
        }
    }
    Ok(rows)
}
