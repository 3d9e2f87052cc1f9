//! Inference: ODE solvers over box space, box renewal, ensembling and the
//! diffusion baseline sampler.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Objective, RunConfig, SolverKind};
use crate::decoder::{run_head, VELOCITY_EPS};
use crate::error::{Error, Result};
use crate::geometry::{class_wise_nms, clip_to_unit, BoundingBox, Detection};
use crate::model::Detector;
use crate::nnet::sigmoid;
use crate::priors::{sample_prior, PriorSpec, PriorStats};
use crate::rng;
use crate::scenes::{FeatureGrid, Scene};

pub const TAG_SAMPLE: u64 = 3;

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// `x + u * dt`.
pub fn euler_step(x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(u).map(|(a, b)| a + b * dt).collect()
}

/// `x + h * (c * k1 + sum_j w_j (k_j - k1) / div)`, which equals the
/// weighted slope sum whenever `c` is the total weight. Written against `k1`
/// so that a constant field reduces to one exact Euler step.
fn combine(x: &[f64], h: f64, k1: &[f64], c: f64, div: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let delta: f64 = terms.iter().map(|(w, k)| w * (k[i] - k1[i])).sum();
            xi + h * (c * k1[i] + delta / div)
        })
        .collect()
}

/// A velocity field evaluated at `(x, t)`, counting evaluations.
pub struct Field<F> {
    f: F,
    pub nfe: usize,
}

impl<F: FnMut(&[f64], f64) -> Result<Vec<f64>>> Field<F> {
    pub fn new(f: F) -> Self {
        Self { f, nfe: 0 }
    }

    pub fn eval(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.nfe += 1;
        let u = (self.f)(x, t)?;
        if u.len() != x.len() {
            return Err(Error::SizeMismatch { left: u.len(), right: x.len() });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence(format!("non-finite velocity at t = {t}")));
        }
        Ok(u)
    }
}

pub fn euler_solver_step<F>(field: &mut Field<F>, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let u = field.eval(x, t)?;
    Ok(euler_step(x, &u, dt))
}

/// Explicit trapezoid (Heun's method).
pub fn heun_step<F>(field: &mut Field<F>, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let k1 = field.eval(x, t)?;
    let k2 = field.eval(&combine(x, dt, &k1, 1.0, 1.0, &[]), t + dt)?;
    Ok(combine(x, dt, &k1, 1.0, 2.0, &[(1.0, &k2)]))
}

/// Classical fourth-order Runge-Kutta.
pub fn rk4_step<F>(field: &mut Field<F>, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    let k1 = field.eval(x, t)?;
    let k2 = field.eval(&combine(x, dt, &k1, 0.5, 1.0, &[]), t + dt / 2.0)?;
    let k3 = field.eval(&combine(x, dt, &k1, 0.5, 2.0, &[(1.0, &k2)]), t + dt / 2.0)?;
    let k4 = field.eval(&combine(x, dt, &k1, 1.0, 1.0, &[(1.0, &k3)]), t + dt)?;
    Ok(combine(x, dt, &k1, 1.0, 6.0, &[(2.0, &k2), (2.0, &k3), (1.0, &k4)]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dopri5Output {
    pub x: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
    /// True when `max_steps` ran out before reaching `t1`.
    pub truncated: bool,
    pub t_reached: f64,
}

impl Dopri5Output {
    pub fn steps_used(&self) -> usize {
        self.accepted + self.rejected
    }
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `DP_A`).
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive Dormand-Prince 5(4) integration from `t0` to `t1` with a
/// proportional-integral step controller. The first trial step spans the
/// whole interval.
pub fn dopri5_integrate<F>(
    field: &mut Field<F>,
    x0: &[f64],
    t0: f64,
    t1: f64,
    atol: f64,
    max_steps: usize,
) -> Result<Dopri5Output>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if !(atol > 0.0) || max_steps < 1 {
        return Err(Error::InvalidParameter("dopri5 needs atol > 0 and max_steps >= 1".into()));
    }
    let span = t1 - t0;
    let mut out = Dopri5Output { x: x0.to_vec(), accepted: 0, rejected: 0, truncated: false, t_reached: t0 };
    if span == 0.0 {
        return Ok(out);
    }
    let mut t = t0;
    let mut h = span;
    let mut err_prev: f64 = 1.0;
    let mut k1 = field.eval(&out.x, t)?;
    while (t1 - t) * span.signum() > 0.0 {
        if out.steps_used() >= max_steps {
            out.truncated = true;
            break;
        }
        if h.abs() < 1e-12 * span.abs() {
            return Err(Error::StepSizeUnderflow { t });
        }
        if (t + h - t1) * span.signum() > 0.0 {
            h = t1 - t;
        }
        let mut k: Vec<Vec<f64>> = vec![k1.clone()];
        for s in 1..7 {
            let terms: Vec<(f64, &[f64])> = (1..s).map(|j| (DP_A[s][j], k[j].as_slice())).collect();
            let xs = combine(&out.x, h, &k[0], DP_C[s], 1.0, &terms);
            k.push(field.eval(&xs, t + DP_C[s] * h)?);
        }
        let x5 = combine(&out.x, h, &k[0], 1.0, 1.0, &(1..7).map(|j| (DP_B[j], k[j].as_slice())).collect::<Vec<_>>());
        let x4 = combine(&out.x, h, &k[0], 1.0, 1.0, &(1..7).map(|j| (DP_B4[j], k[j].as_slice())).collect::<Vec<_>>());
        let err = x5.iter().zip(&x4).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / atol;
        if err <= 1.0 {
            t = if (t + h - t1).abs() <= 1e-15 * span.abs() { t1 } else { t + h };
            out.x = x5;
            out.accepted += 1;
            k1 = k.pop().expect("seven stages");
            let factor = if err == 0.0 { 10.0 } else { 0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0) };
            h *= factor.clamp(0.2, 10.0);
            err_prev = err.max(1e-4);
        } else {
            out.rejected += 1;
            h *= (0.9 * err.powf(-1.0 / 5.0)).clamp(0.2, 1.0);
        }
    }
    out.t_reached = t;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Detection pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Solver {
    Euler,
    Heun,
    Rk4,
    Dopri5 { atol: f64, max_steps: usize },
    Ddim,
}

impl Solver {
    pub fn name(&self) -> &'static str {
        match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
            Solver::Rk4 => "rk4",
            Solver::Dopri5 { .. } => "dopri5",
            Solver::Ddim => "ddim",
        }
    }

    /// Field evaluations per step for fixed-step solvers.
    pub fn nfe_per_step(&self) -> Option<usize> {
        match self {
            Solver::Euler | Solver::Ddim => Some(1),
            Solver::Heun => Some(2),
            Solver::Rk4 => Some(4),
            Solver::Dopri5 { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_eval: usize,
    pub steps: usize,
    pub solver: Solver,
    pub renewal_threshold: f64,
    pub nms_iou: f64,
    pub ensemble: bool,
}

impl SamplerConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        let solver = match cfg.solver_kind {
            SolverKind::Euler => Solver::Euler,
            SolverKind::Heun => Solver::Heun,
            SolverKind::Rk4 => Solver::Rk4,
            SolverKind::Dopri5 => Solver::Dopri5 { atol: cfg.solver_atol, max_steps: cfg.solver_max_steps },
            SolverKind::Ddim => Solver::Ddim,
        };
        Self {
            n_eval: cfg.n_eval,
            steps: cfg.steps,
            solver,
            renewal_threshold: cfg.renewal_threshold,
            nms_iou: cfg.nms_iou,
            ensemble: cfg.ensemble,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.steps < 1 {
            errs.push("steps must be at least 1".to_string());
        }
        if self.n_eval < 1 {
            errs.push("n_eval must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.renewal_threshold) {
            errs.push("renewal_threshold must lie in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            errs.push("nms_iou must lie in [0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Highest class probability and its class per box.
pub fn box_scores(logits: &[f64], n: usize) -> Vec<(usize, f64)> {
    let k = if n == 0 { 0 } else { logits.len() / n };
    (0..n)
        .map(|i| {
            let row = &logits[i * k..(i + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            (best, sigmoid(row[best]))
        })
        .collect()
}

/// Indices of boxes whose best class probability is below `threshold`.
pub fn weak_indices(logits: &[f64], n: usize, threshold: f64) -> Vec<usize> {
    box_scores(logits, n).iter().enumerate().filter(|(_, (_, s))| *s < threshold).map(|(i, _)| i).collect()
}

/// Replace weak boxes with fresh prior samples. Returns the new boxes and
/// the replaced indices.
pub fn box_renewal<R: Rng>(
    boxes: &[BoundingBox],
    logits: &[f64],
    prior: &PriorSpec,
    threshold: f64,
    rng: &mut R,
    context: Option<&PriorStats>,
) -> Result<(Vec<BoundingBox>, Vec<usize>)> {
    let weak = weak_indices(logits, boxes.len(), threshold);
    let fresh = sample_prior(prior, weak.len(), rng, context)?;
    let mut out = boxes.to_vec();
    for (&i, b) in weak.iter().zip(fresh) {
        out[i] = b;
    }
    Ok((out, weak))
}

fn detections_from(boxes: &[BoundingBox], logits: &[f64]) -> Vec<Detection> {
    boxes
        .iter()
        .zip(box_scores(logits, boxes.len()))
        .map(|(b, (class_id, score))| Detection { bbox: *b, class_id, score })
        .collect()
}

fn flatten(boxes: &[BoundingBox]) -> Vec<f64> {
    boxes.iter().flat_map(|b| b.to_array()).collect()
}

fn unflatten(x: &[f64]) -> Vec<BoundingBox> {
    x.chunks_exact(4).map(|c| BoundingBox::new(c[0], c[1], c[2], c[3])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub detections: Vec<Detection>,
    /// Detections produced at each step before NMS.
    pub per_step_counts: Vec<usize>,
    pub nfe: usize,
    /// DOPRI5 only: some interval hit its step cap.
    pub truncated: bool,
}

/// Sample detections for one image.
///
/// Steps follow the grid `t_i = i / S`. Intermediate steps contribute the
/// head's endpoint prediction; the final step contributes the integrated
/// state at `t = 1`, which for Euler is the same thing.
pub fn sample_detections<R: Rng>(
    det: &Detector,
    grid: &FeatureGrid,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    cfg.validate()?;
    match (det.objective, cfg.solver) {
        (Objective::Ddpm, Solver::Ddim) => return ddim_sample(det, grid, cfg, rng),
        (Objective::Ddpm, _) | (Objective::Cfm, Solver::Ddim) => {
            return Err(Error::Config(vec![format!(
                "solver {} does not apply to a {} model",
                cfg.solver.name(),
                det.objective
            )]))
        }
        _ => {}
    }
    let context = det.context(grid)?;
    let n = cfg.n_eval;
    let s = cfg.steps;
    let dt = 1.0 / s as f64;
    let mut boxes = sample_prior(&det.prior, n, rng, context.as_ref())?;
    let mut per_step: Vec<Vec<Detection>> = Vec::with_capacity(s);
    let mut nfe = 0;
    let mut truncated = false;
    for i in 0..s {
        let t = i as f64 * dt;
        let last = i + 1 == s;
        let mut first: Option<(Vec<BoundingBox>, Vec<f64>)> = None;
        let mut field = Field::new(|x: &[f64], tt: f64| {
            let xt = unflatten(x);
            let clipped: Vec<BoundingBox> = xt.iter().map(clip_to_unit).collect();
            let head = run_head(&det.decoder, &det.store, grid, &clipped, tt)?;
            let x1 = head.x1_hat();
            let denom = (1.0 - tt).max(VELOCITY_EPS);
            let u = x1
                .iter()
                .zip(&xt)
                .flat_map(|(a, b)| {
                    let (a, b) = (a.to_array(), b.to_array());
                    [0, 1, 2, 3].map(|c| (a[c] - b[c]) / denom)
                })
                .collect();
            if first.is_none() {
                first = Some((x1.to_vec(), head.final_logits().to_vec()));
            }
            Ok(u)
        });
        let x = flatten(&boxes);
        let x_next = match cfg.solver {
            Solver::Euler => euler_solver_step(&mut field, &x, t, dt),
            Solver::Heun => heun_step(&mut field, &x, t, dt),
            Solver::Rk4 => rk4_step(&mut field, &x, t, dt),
            Solver::Dopri5 { atol, max_steps } => dopri5_integrate(&mut field, &x, t, t + dt, atol, max_steps).map(|o| {
                truncated |= o.truncated;
                o.x
            }),
            Solver::Ddim => unreachable!("handled above"),
        }
        .map_err(|e| match e {
            Error::NumericalDivergence(m) => Error::NumericalDivergence(format!("sampling step {i}: {m}")),
            other => other,
        })?;
        nfe += field.nfe;
        let (x1_hat, logits) = first.expect("every solver evaluates the field");
        boxes = unflatten(&x_next).iter().map(clip_to_unit).collect();
        if boxes.iter().any(|b| !b.is_finite()) {
            return Err(Error::NumericalDivergence(format!("sampling step {i}: non-finite boxes")));
        }
        if last {
            per_step.push(detections_from(&boxes, &logits));
        } else {
            per_step.push(detections_from(&x1_hat, &logits));
            boxes = box_renewal(&boxes, &logits, &det.prior, cfg.renewal_threshold, rng, context.as_ref())?.0;
        }
    }
    Ok(finish(per_step, cfg, nfe, truncated))
}

fn finish(per_step: Vec<Vec<Detection>>, cfg: &SamplerConfig, nfe: usize, truncated: bool) -> SampleOutput {
    let per_step_counts = per_step.iter().map(Vec::len).collect();
    let pool: Vec<Detection> = if cfg.ensemble {
        per_step.into_iter().flatten().collect()
    } else {
        per_step.into_iter().last().unwrap_or_default()
    };
    SampleOutput { detections: class_wise_nms(&pool, cfg.nms_iou), per_step_counts, nfe, truncated }
}

/// Deterministic few-step sampler for a diffusion-trained detector.
pub fn ddim_sample<R: Rng>(
    det: &Detector,
    grid: &FeatureGrid,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampleOutput> {
    let sched = &det.schedule;
    let taus = sched.sub_schedule(cfg.steps)?;
    let mut z = sched.noise(cfg.n_eval, rng);
    let mut per_step = Vec::with_capacity(cfg.steps);
    for i in 0..cfg.steps {
        let (tau, tau_next) = (taus[i], taus[i + 1]);
        let boxes: Vec<BoundingBox> = z.iter().map(|v| sched.to_box(v)).collect();
        let head = run_head(&det.decoder, &det.store, grid, &boxes, sched.decoder_time(tau))?;
        let x_hat = head.x1_hat();
        for (zi, xb) in z.iter_mut().zip(x_hat) {
            *zi = sched.ddim_update(zi, &sched.to_signal(xb), tau, tau_next)?;
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence(format!("sampling step {i}: non-finite state")));
        }
        let logits = head.final_logits();
        per_step.push(detections_from(x_hat, logits));
        if i + 1 < cfg.steps {
            let weak = weak_indices(logits, z.len(), cfg.renewal_threshold);
            let fresh = sched.noise(weak.len(), rng);
            for (&j, f) in weak.iter().zip(fresh) {
                z[j] = f;
            }
        }
    }
    Ok(finish(per_step, cfg, cfg.steps, false))
}

/// Sample every scene in parallel. Each scene draws from its own stream so
/// the result does not depend on scheduling.
pub fn detect_scenes(det: &Detector, scenes: &[Scene], cfg: &SamplerConfig, seed: u64) -> Result<Vec<SampleOutput>> {
    scenes
        .par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, &[TAG_SAMPLE, s.scene_id]);
            sample_detections(det, &s.raster, cfg, &mut r)
        })
        .collect()
}

/// Machine-readable record of an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: String,
    pub sampler: SamplerConfig,
    pub per_step_counts: Vec<Vec<usize>>,
    pub nfe: usize,
    pub wall_ms: f64,
    pub scene_ids: Vec<u64>,
    pub detections: Vec<Vec<Detection>>,
}

pub fn run_record(det: &Detector, scenes: &[Scene], run: &RunConfig, cfg: &SamplerConfig) -> Result<RunRecord> {
    let start = Instant::now();
    let outs = detect_scenes(det, scenes, cfg, run.seed)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(RunRecord {
        config_hash: run.hash(),
        config: run.to_text(),
        sampler: *cfg,
        per_step_counts: outs.iter().map(|o| o.per_step_counts.clone()).collect(),
        nfe: outs.iter().map(|o| o.nfe).sum(),
        wall_ms,
        scene_ids: scenes.iter().map(|s| s.scene_id).collect(),
        detections: outs.into_iter().map(|o| o.detections).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::GaussianStats;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(c: Vec<f64>) -> impl FnMut(&[f64], f64) -> Result<Vec<f64>> {
        move |_x, _t| Ok(c.clone())
    }

    #[test]
    fn euler_reference_values() {
        assert_eq!(euler_step(&[0.2], &[1.0], 0.5), vec![0.7]);
        assert_eq!(euler_step(&[0.2, -1.0], &[3.0, 4.0], 0.0), vec![0.2, -1.0]);
    }

    #[test]
    fn constant_fields_are_integrated_exactly() {
        let u = vec![0.25, -0.5, 1.0, 0.0];
        let x0 = vec![0.5, 0.5, 0.25, 0.75];
        let expected: Vec<f64> = x0.iter().zip(&u).map(|(a, b)| a + b).collect();
        for s in [1usize, 2, 4, 8] {
            let dt = 1.0 / s as f64;
            type Step = fn(&mut Field<Box<dyn FnMut(&[f64], f64) -> Result<Vec<f64>>>>, &[f64], f64, f64) -> Result<Vec<f64>>;
            let steps: [Step; 3] = [euler_solver_step, heun_step, rk4_step];
            for step in steps {
                let mut f: Field<Box<dyn FnMut(&[f64], f64) -> Result<Vec<f64>>>> = Field::new(Box::new(constant(u.clone())));
                let mut x = x0.clone();
                for i in 0..s {
                    x = step(&mut f, &x, i as f64 * dt, dt).unwrap();
                }
                for (a, b) in x.iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
        let mut f = Field::new(constant(u.clone()));
        let out = dopri5_integrate(&mut f, &x0, 0.0, 1.0, 1e-6, 10).unwrap();
        assert_eq!(out.accepted, 1);
        assert!(!out.truncated);
        for (a, b) in out.x.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn higher_order_steps_are_exact_on_linear_time() {
        let lin = |_x: &[f64], t: f64| Ok(vec![t]);
        let mut f = Field::new(lin);
        assert_eq!(heun_step(&mut f, &[0.0], 0.0, 1.0).unwrap(), vec![0.5]);
        assert_eq!(rk4_step(&mut f, &[0.0], 0.0, 1.0).unwrap(), vec![0.5]);
        assert_eq!(f.nfe, 6);
        let mut f = Field::new(lin);
        assert_eq!(euler_solver_step(&mut f, &[0.0], 0.0, 1.0).unwrap(), vec![0.0]);
        let mut f = Field::new(lin);
        let out = dopri5_integrate(&mut f, &[0.0], 0.0, 1.0, 1e-8, 100).unwrap();
        assert!((out.x[0] - 0.5).abs() <= 1e-8);
    }

    #[test]
    fn nfe_accounting() {
        for s in [1usize, 2, 3] {
            let mut counts = Vec::new();
            type Step = fn(&mut Field<fn(&[f64], f64) -> Result<Vec<f64>>>, &[f64], f64, f64) -> Result<Vec<f64>>;
            let steps: [Step; 3] = [euler_solver_step, heun_step, rk4_step];
            for step in steps {
                let mut f: Field<fn(&[f64], f64) -> Result<Vec<f64>>> = Field::new(|x, _| Ok(x.to_vec()));
                let mut x = vec![1.0];
                for i in 0..s {
                    x = step(&mut f, &x, i as f64 / s as f64, 1.0 / s as f64).unwrap();
                }
                counts.push(f.nfe);
            }
            assert_eq!(counts, vec![s, 2 * s, 4 * s]);
        }
    }

    #[test]
    fn dopri5_truncates_and_rejects_bad_arguments() {
        let mut f = Field::new(|x: &[f64], _t: f64| Ok(x.iter().map(|v| -500.0 * v).collect()));
        let out = dopri5_integrate(&mut f, &[1.0], 0.0, 1.0, 1e-8, 1).unwrap();
        assert!(out.truncated);
        assert!(out.t_reached < 1.0);
        let mut f = Field::new(constant(vec![1.0]));
        assert!(dopri5_integrate(&mut f, &[0.0], 0.0, 1.0, 0.0, 5).is_err());
        let mut f = Field::new(|_x: &[f64], _t: f64| Ok(vec![f64::NAN]));
        assert!(matches!(dopri5_integrate(&mut f, &[0.0], 0.0, 1.0, 1e-3, 5), Err(Error::NumericalDivergence(_))));
    }

    #[test]
    fn dopri5_matches_exponential_decay() {
        let mut f = Field::new(|x: &[f64], _t: f64| Ok(x.iter().map(|v| -v).collect()));
        let out = dopri5_integrate(&mut f, &[1.0], 0.0, 2.0, 1e-9, 1000).unwrap();
        assert!((out.x[0] - (-2f64).exp()).abs() < 1e-7);
        assert!(out.accepted > 1);
    }

    #[test]
    fn renewal_replaces_exactly_the_weak_boxes() {
        let boxes: Vec<BoundingBox> = (0..4).map(|i| BoundingBox::new(0.2 + 0.1 * i as f64, 0.5, 0.1, 0.1)).collect();
        let prior = PriorSpec::Derived(GaussianStats { mu: [0.9, 0.9, 0.05, 0.05], sigma: [0.01; 4] });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let strong = vec![3.0; 8];
        assert_eq!(box_renewal(&boxes, &strong, &prior, 0.5, &mut rng, None).unwrap().0, boxes);
        let weak = vec![-3.0; 8];
        let (all, idx) = box_renewal(&boxes, &weak, &prior, 0.5, &mut rng, None).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(all.iter().zip(&boxes).all(|(a, b)| a != b));
        let mixed = vec![3.0, -3.0, -3.0, -3.0, -3.0, 0.1, -3.0, -3.0];
        let (out, idx) = box_renewal(&boxes, &mixed, &prior, 0.5, &mut rng, None).unwrap();
        assert_eq!(idx, vec![1, 3]);
        for i in 0..4 {
            assert_eq!(out[i] == boxes[i], !idx.contains(&i));
        }
    }

    fn tiny_detector(extra: &[&str]) -> (Detector, Vec<Scene>) {
        let mut o = vec![
            "data.size=16",
            "model.pooled=2",
            "model.hidden=8",
            "model.ffn=8",
            "model.time_dim=4",
            "prior.kind=derived",
        ];
        o.extend_from_slice(extra);
        let cfg = RunConfig::default().with_overrides(o).unwrap();
        let scenes = crate::scenes::generate_scenes(0, 3, &cfg.scene_config()).unwrap();
        let det = Detector::init(&cfg, crate::trainer::build_prior(&cfg, &scenes).unwrap()).unwrap();
        (det, scenes)
    }

    fn zero_offsets(det: &mut Detector) {
        for st in det.decoder.stages.clone() {
            for id in [st.reg2_w, st.reg2_b] {
                det.store.tensor_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn sampler(n_eval: usize, steps: usize, solver: Solver) -> SamplerConfig {
        SamplerConfig { n_eval, steps, solver, renewal_threshold: 0.5, nms_iou: 1.0, ensemble: true }
    }

    #[test]
    fn zero_offset_head_returns_prior_samples() {
        let (mut det, scenes) = tiny_detector(&[]);
        zero_offsets(&mut det);
        let grid = &scenes[0].raster;
        let out = sample_detections(&det, grid, &sampler(12, 1, Solver::Euler), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let prior = sample_prior(&det.prior, 12, &mut ChaCha8Rng::seed_from_u64(5), None).unwrap();
        assert_eq!(out.nfe, 1);
        assert_eq!(out.per_step_counts, vec![12]);
        assert!(!out.detections.is_empty());
        for d in &out.detections {
            assert!(prior.contains(&d.bbox), "{:?}", d.bbox);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let (det, scenes) = tiny_detector(&[]);
        let grid = &scenes[1].raster;
        for (solver, per) in [(Solver::Euler, 1), (Solver::Heun, 2), (Solver::Rk4, 4)] {
            for s in 1..=3 {
                let cfg = SamplerConfig { nms_iou: 0.6, ..sampler(8, s, solver) };
                let a = sample_detections(&det, grid, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
                let b = sample_detections(&det, grid, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.nfe, per * s);
                assert_eq!(a.per_step_counts.len(), s);
                assert!(a.detections.len() <= 8 * s);
                assert!(a.detections.iter().all(|d| d.bbox.is_finite() && (0.0..=1.0).contains(&d.score)));
            }
        }
    }

    #[test]
    fn wrong_solver_for_objective_is_a_config_error() {
        let (det, scenes) = tiny_detector(&[]);
        let r = sample_detections(&det, &scenes[0].raster, &sampler(4, 1, Solver::Ddim), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn single_step_ddim_returns_the_one_shot_prediction() {
        let (det, scenes) = tiny_detector(&["objective=ddpm", "solver.kind=ddim"]);
        let grid = &scenes[2].raster;
        let out = sample_detections(&det, grid, &sampler(10, 1, Solver::Ddim), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let z = det.schedule.noise(10, &mut ChaCha8Rng::seed_from_u64(3));
        let boxes: Vec<BoundingBox> = z.iter().map(|v| det.schedule.to_box(v)).collect();
        let tau = det.schedule.sub_schedule(1).unwrap()[0];
        let head = run_head(&det.decoder, &det.store, grid, &boxes, det.schedule.decoder_time(tau)).unwrap();
        let expect = detections_from(head.x1_hat(), head.final_logits());
        assert_eq!(out.nfe, 1);
        assert_eq!(out.detections, class_wise_nms(&expect, 1.0));
    }
}
