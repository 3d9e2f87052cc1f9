//! Set-prediction losses with one-to-many top-k assignment.

use serde::{Deserialize, Serialize};

use crate::decoder::StageOutput;
use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub top_k: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Leave predictions chosen by no ground truth out of the
    /// classification loss instead of treating them as negatives.
    pub ignore_unselected: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            top_k: 4,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            ignore_unselected: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_l1", self.lambda_l1), ("lambda_giou", self.lambda_giou)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a non-negative number"));
            }
        }
        if self.top_k == 0 {
            errs.push("top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            errs.push("focal alpha must lie in [0, 1] and gamma be non-negative".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::nnet::sigmoid(x)
}

/// Sigmoid focal loss summed over classes, with its gradient with respect to
/// the logits. `None` is the background target.
pub fn focal_loss_with_grad(logits: &[f64], target: Option<usize>, alpha: f64, gamma: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (c, &z) in logits.iter().enumerate() {
        let p = sigmoid(z);
        if target == Some(c) {
            // -alpha (1-p)^gamma log p
            let log_p = -softplus(-z);
            let q = (1.0 - p).powf(gamma);
            loss += -alpha * q * log_p;
            grad[c] = alpha * q * (gamma * p * log_p - (1.0 - p));
        } else {
            // -(1-alpha) p^gamma log(1-p)
            let log_q = -softplus(z);
            let pg = p.powf(gamma);
            loss += -(1.0 - alpha) * pg * log_q;
            grad[c] = (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q);
        }
    }
    (loss, grad)
}

pub fn focal_loss(logits: &[f64], target: Option<usize>, alpha: f64, gamma: f64) -> f64 {
    focal_loss_with_grad(logits, target, alpha, gamma).0
}

/// Focal-style classification cost of labelling a prediction as `class`.
pub fn class_cost(logits: &[f64], class: usize, alpha: f64, gamma: f64) -> f64 {
    let z = logits[class];
    let p = sigmoid(z);
    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-z);
    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(z);
    pos - neg
}

fn l1(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `cost[i][j]` between prediction `i` and ground truth `j`.
pub fn match_cost_matrix(
    boxes: &[BoundingBox],
    logits: &[f64],
    gt_boxes: &[BoundingBox],
    gt_classes: &[usize],
    w: &LossWeights,
) -> Vec<Vec<f64>> {
    let k = if boxes.is_empty() { 0 } else { logits.len() / boxes.len() };
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let row = &logits[i * k..(i + 1) * k];
            gt_boxes
                .iter()
                .zip(gt_classes)
                .map(|(g, &c)| {
                    let mut cost = 0.0;
                    if w.lambda_cls != 0.0 {
                        cost += w.lambda_cls * class_cost(row, c, w.focal_alpha, w.focal_gamma);
                    }
                    if w.lambda_l1 != 0.0 {
                        cost += w.lambda_l1 * l1(b, g);
                    }
                    if w.lambda_giou != 0.0 {
                        cost += w.lambda_giou * (1.0 - giou_with_grad(b, g).0);
                    }
                    cost
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentResult {
    /// For every ground truth, its selected prediction rows in order of cost.
    pub per_gt: Vec<Vec<usize>>,
    /// Predictions selected by no ground truth.
    pub unassigned: Vec<usize>,
}

/// The `k` cheapest predictions per ground-truth column (ties to the lower
/// row). With `k` above the number of predictions every prediction is used.
pub fn topk_assign(cost: &[Vec<f64>], n_gt: usize, k: usize) -> Result<AssignmentResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("top_k must be at least 1".into()));
    }
    let n_pred = cost.len();
    let mut selected = vec![false; n_pred];
    let per_gt = (0..n_gt)
        .map(|j| {
            let mut rows: Vec<usize> = (0..n_pred).collect();
            rows.sort_by(|&a, &b| cost[a][j].total_cmp(&cost[b][j]).then(a.cmp(&b)));
            rows.truncate(k);
            rows.iter().for_each(|&r| selected[r] = true);
            rows
        })
        .collect();
    let unassigned = (0..n_pred).filter(|&i| !selected[i]).collect();
    Ok(AssignmentResult { per_gt, unassigned })
}

/// Per-stage unweighted sums before normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub num_pos: usize,
    /// Weighted, normalised stage loss.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub total: f64,
    pub stages: Vec<LossComponents>,
    pub d_boxes: Vec<Vec<[f64; 4]>>,
    pub d_logits: Vec<Vec<f64>>,
}

/// Deep-supervised set loss summed over stages, with gradients with
/// respect to every stage's boxes and logits.
pub fn set_loss(
    stages: &[StageOutput],
    gt_boxes: &[BoundingBox],
    gt_classes: &[usize],
    w: &LossWeights,
) -> Result<SetLoss> {
    if stages.is_empty() {
        return Err(Error::InvalidParameter("set loss needs at least one stage".into()));
    }
    if gt_boxes.len() != gt_classes.len() {
        return Err(Error::SizeMismatch { left: gt_boxes.len(), right: gt_classes.len() });
    }
    let mut out = SetLoss { total: 0.0, stages: Vec::new(), d_boxes: Vec::new(), d_logits: Vec::new() };
    for stage in stages {
        let n = stage.boxes.len();
        let k = if n == 0 { 0 } else { stage.class_logits.len() / n };
        let cost = match_cost_matrix(&stage.boxes, &stage.class_logits, gt_boxes, gt_classes, w);
        let assign = topk_assign(&cost, gt_boxes.len(), w.top_k)?;

        // Classification target: the cheapest ground truth that picked the
        // prediction.
        let mut target: Vec<Option<(usize, f64)>> = vec![None; n];
        for (j, rows) in assign.per_gt.iter().enumerate() {
            for &i in rows {
                let c = cost[i][j];
                if target[i].is_none_or(|(jj, cc)| c < cc || (c == cc && j < jj)) {
                    target[i] = Some((j, c));
                }
            }
        }

        let mut comp = LossComponents::default();
        let mut d_box = vec![[0.0; 4]; n];
        let mut d_logit = vec![0.0; n * k];
        for i in 0..n {
            let cls_target = target[i].map(|(j, _)| gt_classes[j]);
            if cls_target.is_none() && w.ignore_unselected && !gt_boxes.is_empty() {
                continue;
            }
            let (l, g) = focal_loss_with_grad(
                &stage.class_logits[i * k..(i + 1) * k],
                cls_target,
                w.focal_alpha,
                w.focal_gamma,
            );
            comp.cls += l;
            d_logit[i * k..(i + 1) * k].iter_mut().zip(g).for_each(|(d, g)| *d = w.lambda_cls * g);
        }
        for (j, rows) in assign.per_gt.iter().enumerate() {
            let g = &gt_boxes[j];
            for &i in rows {
                comp.num_pos += 1;
                let b = stage.boxes[i].to_array();
                let ga = g.to_array();
                for c in 0..4 {
                    let diff = b[c] - ga[c];
                    comp.l1 += diff.abs();
                    d_box[i][c] += w.lambda_l1 * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                }
                let (gi, grad) = giou_with_grad(&stage.boxes[i], g);
                comp.giou += 1.0 - gi;
                for c in 0..4 {
                    d_box[i][c] -= w.lambda_giou * grad[c];
                }
            }
        }
        let norm = comp.num_pos.max(1) as f64;
        comp.total = (w.lambda_cls * comp.cls + w.lambda_l1 * comp.l1 + w.lambda_giou * comp.giou) / norm;
        d_box.iter_mut().flatten().for_each(|v| *v /= norm);
        d_logit.iter_mut().for_each(|v| *v /= norm);
        out.total += comp.total;
        out.stages.push(comp);
        out.d_boxes.push(d_box);
        out.d_logits.push(d_logit);
    }
    if !out.total.is_finite() {
        return Err(Error::NumericalDivergence("set loss is not finite".into()));
    }
    Ok(out)
}
