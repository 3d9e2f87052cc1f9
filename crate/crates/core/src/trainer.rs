//! Optimisation loop for both objectives.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Objective, PriorKind, RunConfig};
use crate::coupling::{build_interpolants, pad_ground_truth, pair_sources};
use crate::decoder::{backward_head, run_head};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::losses::{set_loss, LossWeights};
use crate::model::Detector;
use crate::nnet::{adam_step, Grads};
use crate::priors::{
    fit_derived_stats, fit_size_buckets, prior_loss, prior_target, sample_prior, stats_head_backward,
    stats_head_forward, GaussianStats, PriorSpec,
};
use crate::rng;
use crate::scenes::{global_average_pool, Scene};

pub const TAG_TRAIN: u64 = 2;
pub const TAG_BATCH: u64 = 4;

/// Prior for the configured kind, fitted on the training boxes when needed.
pub fn build_prior(cfg: &RunConfig, train: &[Scene]) -> Result<PriorSpec> {
    let boxes: Vec<BoundingBox> = train.iter().flat_map(|s| s.gt_boxes.iter().copied()).collect();
    Ok(match cfg.prior_kind {
        PriorKind::Gauss => PriorSpec::GaussN,
        PriorKind::Derived => PriorSpec::Derived(fit_derived_stats(&boxes)?),
        PriorKind::Bucketed => PriorSpec::DerivedSizeBucketed { buckets: fit_size_buckets(&boxes, cfg.prior_n_buckets)? },
        PriorKind::Dependent => PriorSpec::Dependent { hidden: cfg.prior_hidden },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    /// Mean over the batch of set loss plus prior loss.
    pub loss: f64,
    pub set_loss: f64,
    pub prior_loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub num_pos: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

struct ImageResult {
    grads: Grads,
    set_loss: f64,
    prior_loss: f64,
    cls: f64,
    l1: f64,
    giou: f64,
    num_pos: usize,
}

/// Scenes drawn for optimiser step `step`, without replacement.
pub fn batch_indices(cfg: &RunConfig, step: u64, n_scenes: usize) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, &[TAG_BATCH, step]);
    sample_indices(&mut r, n_scenes, cfg.batch_size.min(n_scenes)).into_vec()
}

fn image_pass<R: Rng>(
    det: &Detector,
    scene: &Scene,
    cfg: &RunConfig,
    weights: &LossWeights,
    fallback: Option<&GaussianStats>,
    r: &mut R,
) -> Result<ImageResult> {
    let mut grads = det.store.zero_grads();
    let grid = &scene.raster;
    let head_ctx = match &det.stats_head {
        Some(h) => Some(stats_head_forward(&det.store, h, &global_average_pool(grid))?),
        None => None,
    };
    let ctx = head_ctx.as_ref().map(|(s, _)| s);
    let targets = pad_ground_truth(&scene.gt_boxes, &scene.gt_classes, cfg.n_train, &det.prior, r, ctx)?;
    let head = match det.objective {
        Objective::Cfm => {
            let x0 = sample_prior(&det.prior, cfg.n_train, r, ctx)?;
            let x0 = pair_sources(&x0, &targets.x1, cfg.match_strategy, r)?;
            let batch = build_interpolants(x0, targets, r)?;
            run_head(&det.decoder, &det.store, grid, &batch.xt, batch.t)?
        }
        Objective::Ddpm => {
            let sched = &det.schedule;
            let tau = r.random_range(1..=sched.timesteps);
            let z = sched.corrupt(&targets.x1, tau, r)?;
            let boxes: Vec<BoundingBox> = z.iter().map(|v| sched.to_box(v)).collect();
            run_head(&det.decoder, &det.store, grid, &boxes, sched.decoder_time(tau))?
        }
    };
    let loss = set_loss(&head.stages, &scene.gt_boxes, &scene.gt_classes, weights)?;
    backward_head(&det.decoder, &det.store, &head, &loss.d_boxes, &loss.d_logits, &mut grads);
    let mut p_loss = 0.0;
    if let (Some(h), Some((stats, cache))) = (&det.stats_head, &head_ctx) {
        let target = prior_target(&scene.gt_boxes, fallback);
        let pl = prior_loss(stats, target.as_ref());
        stats_head_backward(&det.store, h, cache, &pl.d_mu, &pl.d_sigma, &mut grads);
        p_loss = pl.value;
    }
    Ok(ImageResult {
        grads,
        set_loss: loss.total,
        prior_loss: p_loss,
        cls: loss.stages.iter().map(|s| s.cls).sum(),
        l1: loss.stages.iter().map(|s| s.l1).sum(),
        giou: loss.stages.iter().map(|s| s.giou).sum(),
        num_pos: loss.stages.iter().map(|s| s.num_pos).sum(),
    })
}

/// One optimiser step on a batch drawn from `train`. The step index and all
/// randomness come from the detector's optimiser counter and the config
/// seed, so a resumed run continues exactly where it stopped.
pub fn train_step(det: &mut Detector, train: &[Scene], cfg: &RunConfig) -> Result<StepMetrics> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training scenes".into()));
    }
    let step = det.store.step();
    let weights = cfg.loss_weights();
    let picks = batch_indices(cfg, step, train.len());
    let batch: Vec<&Scene> = picks.iter().map(|&i| &train[i]).collect();
    let batch_boxes: Vec<BoundingBox> = batch.iter().flat_map(|s| s.gt_boxes.iter().copied()).collect();
    let fallback = fit_derived_stats(&batch_boxes).ok();
    let diverged = |what: &str| {
        Error::NumericalDivergence(format!("{what} at step {step} (batch seed {} / {step})", cfg.seed))
    };

    let det_ref: &Detector = det;
    let results: Vec<ImageResult> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, scene)| {
            let mut r = rng::stream(cfg.seed, &[TAG_TRAIN, step, slot as u64]);
            image_pass(det_ref, scene, cfg, &weights, fallback.as_ref(), &mut r)
        })
        .collect::<Result<_>>()
        .map_err(|e| match e {
            Error::NumericalDivergence(_) => diverged("non-finite loss"),
            other => other,
        })?;

    let n = results.len() as f64;
    let mut grads = det.store.zero_grads();
    let mut m = StepMetrics { step, lr: cfg.lr_at(step), ..StepMetrics::default() };
    for r in &results {
        grads.add_assign(&r.grads);
        m.set_loss += r.set_loss / n;
        m.prior_loss += r.prior_loss / n;
        m.cls += r.cls / n;
        m.l1 += r.l1 / n;
        m.giou += r.giou / n;
        m.num_pos += r.num_pos;
    }
    m.loss = m.set_loss + m.prior_loss;
    grads.scale(1.0 / n);
    m.grad_norm = grads.norm();
    if !m.loss.is_finite() {
        return Err(diverged("non-finite loss"));
    }
    if !m.grad_norm.is_finite() {
        return Err(diverged("non-finite gradient"));
    }
    if cfg.clip_norm > 0.0 && m.grad_norm > cfg.clip_norm {
        grads.scale(cfg.clip_norm / m.grad_norm);
    }
    det.store.set_grads(grads)?;
    let mut adam = cfg.adam_config();
    adam.lr = m.lr;
    adam_step(&mut det.store, &adam)?;
    Ok(m)
}

/// Run until the optimiser counter reaches `cfg.train_steps`, calling
/// `on_step` after every step.
pub fn train(
    det: &mut Detector,
    train: &[Scene],
    cfg: &RunConfig,
    mut on_step: impl FnMut(&Detector, &StepMetrics) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let mut history = Vec::new();
    while det.store.step() < cfg.train_steps {
        let m = train_step(det, train, cfg)?;
        on_step(det, &m)?;
        history.push(m);
    }
    Ok(history)
}
