//! Staged, time-conditioned detection head.
//!
//! Each stage crops RoI features for its input boxes, mixes them with the
//! previous stage's object features through one attention layer and a
//! feed-forward block, modulates the result with FiLM on the time embedding,
//! and emits box offsets and class logits. Boxes are passed between stages
//! without gradient; object features carry gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_unit, clip_to_unit_backward, BoundingBox};
use crate::nnet::{
    affine_backward, affine_forward, attention_backward, attention_forward, film_backward, film_forward,
    init_normal, layernorm_backward, layernorm_forward, relu_backward, relu_forward, sinusoidal_embed, FilmParams,
    Grads, LayerNormCache, ParamId, ParamStore, Tensor,
};
use crate::scenes::{roi_align_into, FeatureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub n_stages: usize,
    pub pooled: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub time_dim: usize,
    /// Multiplier applied to `t` before the sinusoidal embedding.
    pub time_scale: f64,
    /// Initial foreground probability encoded in the class bias.
    pub prior_prob: f64,
    /// The RoI crop covers the box scaled by this factor about its centre.
    pub roi_context: f64,
    /// Side of a coarse whole-image crop appended to every box feature
    /// (0 disables it).
    pub global_pool: usize,
    /// Offsets are multiplied by the input box's width and height (floored
    /// at [`OFFSET_SCALE_MIN`]) instead of being absolute.
    pub relative_offsets: bool,
}

pub const OFFSET_SCALE_MIN: f64 = 0.05;

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_stages: 2,
            pooled: 7,
            hidden: 64,
            ffn: 128,
            n_classes: 3,
            in_channels: 3,
            time_dim: 32,
            time_scale: 1000.0,
            prior_prob: 0.01,
            roi_context: 1.0,
            global_pool: 0,
            relative_offsets: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_stages == 0 {
            errs.push("decoder.n_stages must be at least 1".to_string());
        }
        if self.n_classes == 0 {
            errs.push("decoder needs at least one class".to_string());
        }
        if self.pooled == 0 || self.hidden == 0 || self.ffn == 0 || self.in_channels == 0 {
            errs.push("decoder widths must be positive".to_string());
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            errs.push("decoder.time_dim must be even and positive".to_string());
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            errs.push("decoder.prior_prob must lie in (0, 1)".to_string());
        }
        if !(self.roi_context >= 1.0 && self.roi_context.is_finite()) {
            errs.push("model.roi_context must be at least 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn roi_len(&self) -> usize {
        self.in_channels * self.pooled * self.pooled
    }

    pub fn global_len(&self) -> usize {
        self.in_channels * self.global_pool * self.global_pool
    }

    /// Width of the per-box input: RoI crop, optional global crop and the
    /// four box coordinates.
    pub fn feature_dim(&self) -> usize {
        self.roi_len() + self.global_len() + 4
    }

    /// Per-coordinate multiplier turning the offset head's output into a
    /// box offset.
    pub fn offset_scale(&self, b: &BoundingBox) -> [f64; 4] {
        if self.relative_offsets {
            let (sw, sh) = (b.w.max(OFFSET_SCALE_MIN), b.h.max(OFFSET_SCALE_MIN));
            [sw, sh, sw, sh]
        } else {
            [1.0; 4]
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub film_wg: ParamId,
    pub film_bg: ParamId,
    pub film_wb: ParamId,
    pub film_bb: ParamId,
    pub reg1_w: ParamId,
    pub reg1_b: ParamId,
    pub reg2_w: ParamId,
    pub reg2_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

impl StageParams {
    pub fn ids(&self) -> [ParamId; 28] {
        [
            self.in_w, self.in_b, self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b, self.o_w, self.o_b,
            self.ln1_g, self.ln1_b, self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b, self.ln2_g, self.ln2_b,
            self.film_wg, self.film_bg, self.film_wb, self.film_bb, self.reg1_w, self.reg1_b, self.reg2_w,
            self.reg2_b, self.cls_w, self.cls_b,
        ]
    }
}

/// Parameter names and initial tensors for one stage, in registration order.
fn stage_layout<R: Rng>(cfg: &DecoderConfig, rng: &mut R) -> Vec<(&'static str, Tensor)> {
    let (d, f, e, k, t) = (cfg.hidden, cfg.feature_dim(), cfg.ffn, cfg.n_classes, cfg.time_dim);
    let relu_gain = 2f64.sqrt();
    let cls_bias = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    vec![
        ("in.w", init_normal(rng, vec![d, f], f, relu_gain)),
        ("in.b", Tensor::zeros(vec![d])),
        ("q.w", init_normal(rng, vec![d, d], d, 1.0)),
        ("q.b", Tensor::zeros(vec![d])),
        ("k.w", init_normal(rng, vec![d, d], d, 1.0)),
        ("k.b", Tensor::zeros(vec![d])),
        ("v.w", init_normal(rng, vec![d, d], d, 1.0)),
        ("v.b", Tensor::zeros(vec![d])),
        ("o.w", init_normal(rng, vec![d, d], d, 1.0)),
        ("o.b", Tensor::zeros(vec![d])),
        ("ln1.g", Tensor::filled(vec![d], 1.0)),
        ("ln1.b", Tensor::zeros(vec![d])),
        ("ff1.w", init_normal(rng, vec![e, d], d, relu_gain)),
        ("ff1.b", Tensor::zeros(vec![e])),
        ("ff2.w", init_normal(rng, vec![d, e], e, 1.0)),
        ("ff2.b", Tensor::zeros(vec![d])),
        ("ln2.g", Tensor::filled(vec![d], 1.0)),
        ("ln2.b", Tensor::zeros(vec![d])),
        ("film.wg", init_normal(rng, vec![d, t], t, 0.1)),
        ("film.bg", Tensor::filled(vec![d], 1.0)),
        ("film.wb", init_normal(rng, vec![d, t], t, 0.1)),
        ("film.bb", Tensor::zeros(vec![d])),
        ("reg1.w", init_normal(rng, vec![d, d], d, relu_gain)),
        ("reg1.b", Tensor::zeros(vec![d])),
        ("reg2.w", init_normal(rng, vec![4, d], d, 0.01)),
        ("reg2.b", Tensor::zeros(vec![4])),
        ("cls.w", init_normal(rng, vec![k, d], d, 0.01)),
        ("cls.b", Tensor::filled(vec![k], cls_bias)),
    ]
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub stages: Vec<StageParams>,
}

impl Decoder {
    /// Register freshly initialised parameters in `store`.
    pub fn new<R: Rng>(config: DecoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        for s in 0..config.n_stages {
            for (name, tensor) in stage_layout(&config, rng) {
                store.add(&format!("stage{s}.{name}"), tensor)?;
            }
        }
        Self::from_store(config, store)
    }

    /// Look up existing parameters by name and check their shapes.
    pub fn from_store(config: DecoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        // Only names and shapes are used here.
        let layout = stage_layout(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut stages = Vec::with_capacity(config.n_stages);
        for s in 0..config.n_stages {
            let mut ids = Vec::with_capacity(layout.len());
            for (name, tensor) in &layout {
                let full = format!("stage{s}.{name}");
                let id = store.id(&full).ok_or_else(|| Error::Shape(format!("missing parameter {full}")))?;
                if store.tensor(id).shape != tensor.shape {
                    return Err(Error::Shape(format!(
                        "parameter {full} has shape {:?}, expected {:?}",
                        store.tensor(id).shape,
                        tensor.shape
                    )));
                }
                ids.push(id);
            }
            let g = |i: usize| ids[i];
            stages.push(StageParams {
                in_w: g(0),
                in_b: g(1),
                q_w: g(2),
                q_b: g(3),
                k_w: g(4),
                k_b: g(5),
                v_w: g(6),
                v_b: g(7),
                o_w: g(8),
                o_b: g(9),
                ln1_g: g(10),
                ln1_b: g(11),
                ff1_w: g(12),
                ff1_b: g(13),
                ff2_w: g(14),
                ff2_b: g(15),
                ln2_g: g(16),
                ln2_b: g(17),
                film_wg: g(18),
                film_bg: g(19),
                film_wb: g(20),
                film_bb: g(21),
                reg1_w: g(22),
                reg1_b: g(23),
                reg2_w: g(24),
                reg2_b: g(25),
                cls_w: g(26),
                cls_b: g(27),
            });
        }
        Ok(Self { config, stages })
    }

    /// Every parameter owned by the decoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.ids()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub boxes: Vec<BoundingBox>,
    /// Row-major `[N, K]`.
    pub class_logits: Vec<f64>,
    /// Row-major `[N, D]`.
    pub object_features: Vec<f64>,
}

/// Intermediates kept for the backward pass of one stage.
#[derive(Debug, Clone)]
pub struct StageTape {
    n: usize,
    has_prev: bool,
    feat: Vec<f64>,
    a: Vec<f64>,
    h0: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>,
    probs: Vec<f64>,
    ln1: LayerNormCache,
    h1: Vec<f64>,
    f1: Vec<f64>,
    f1r: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    tau: Vec<f64>,
    gamma: Vec<f64>,
    h3: Vec<f64>,
    g1: Vec<f64>,
    g1r: Vec<f64>,
    pre_clip: Vec<BoundingBox>,
    scales: Vec<[f64; 4]>,
}

/// One decoder stage.
pub fn run_stage(
    decoder: &Decoder,
    store: &ParamStore,
    grid: &FeatureGrid,
    boxes_in: &[BoundingBox],
    h_prev: Option<&[f64]>,
    t: f64,
    stage_index: usize,
) -> Result<(StageOutput, StageTape)> {
    let cfg = &decoder.config;
    let p = decoder
        .stages
        .get(stage_index)
        .ok_or_else(|| Error::InvalidParameter(format!("stage {stage_index} of {}", cfg.n_stages)))?;
    if grid.channels != cfg.in_channels {
        return Err(Error::Shape(format!("grid has {} channels, decoder expects {}", grid.channels, cfg.in_channels)));
    }
    if boxes_in.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidBox("non-finite decoder input".into()));
    }
    let n = boxes_in.len();
    let (d, f, k) = (cfg.hidden, cfg.feature_dim(), cfg.n_classes);
    if n == 0 {
        return Err(Error::Shape("decoder needs at least one box".into()));
    }
    if let Some(hp) = h_prev {
        if hp.len() != n * d {
            return Err(Error::Shape(format!("previous features have {} values, expected {}", hp.len(), n * d)));
        }
    }
    let w = |id: ParamId| store.values(id);

    let (roi_len, glob_len) = (cfg.roi_len(), cfg.global_len());
    let mut global = vec![0.0; glob_len];
    if glob_len > 0 {
        roi_align_into(grid, &BoundingBox::new(0.5, 0.5, 1.0, 1.0), cfg.global_pool, &mut global);
    }
    let mut feat = vec![0.0; n * f];
    for (row, b) in feat.chunks_exact_mut(f).zip(boxes_in) {
        let crop = BoundingBox::new(b.cx, b.cy, b.w * cfg.roi_context, b.h * cfg.roi_context);
        roi_align_into(grid, &crop, cfg.pooled, &mut row[..roi_len]);
        row[roi_len..roi_len + glob_len].copy_from_slice(&global);
        row[roi_len + glob_len..].copy_from_slice(&b.to_array());
    }
    let a = affine_forward(&feat, n, w(p.in_w), w(p.in_b), d)?;
    let mut h0 = relu_forward(&a);
    if let Some(hp) = h_prev {
        h0.iter_mut().zip(hp).for_each(|(x, y)| *x += y);
    }
    let q = affine_forward(&h0, n, w(p.q_w), w(p.q_b), d)?;
    let kk = affine_forward(&h0, n, w(p.k_w), w(p.k_b), d)?;
    let v = affine_forward(&h0, n, w(p.v_w), w(p.v_b), d)?;
    let (att, probs) = attention_forward(&q, &kk, &v, d)?;
    let o = affine_forward(&att, n, w(p.o_w), w(p.o_b), d)?;
    let r1: Vec<f64> = h0.iter().zip(&o).map(|(x, y)| x + y).collect();
    let (h1, ln1) = layernorm_forward(&r1, w(p.ln1_g), w(p.ln1_b))?;
    let f1 = affine_forward(&h1, n, w(p.ff1_w), w(p.ff1_b), cfg.ffn)?;
    let f1r = relu_forward(&f1);
    let f2 = affine_forward(&f1r, n, w(p.ff2_w), w(p.ff2_b), d)?;
    let r2: Vec<f64> = h1.iter().zip(&f2).map(|(x, y)| x + y).collect();
    let (h2, ln2) = layernorm_forward(&r2, w(p.ln2_g), w(p.ln2_b))?;
    let tau = sinusoidal_embed(cfg.time_scale * t, cfg.time_dim)?;
    let film = FilmParams { w_gamma: w(p.film_wg), b_gamma: w(p.film_bg), w_beta: w(p.film_wb), b_beta: w(p.film_bb) };
    let (h3, gamma, _) = film_forward(&h2, &tau, &film)?;
    let g1 = affine_forward(&h3, n, w(p.reg1_w), w(p.reg1_b), d)?;
    let g1r = relu_forward(&g1);
    let delta = affine_forward(&g1r, n, w(p.reg2_w), w(p.reg2_b), 4)?;
    let class_logits = affine_forward(&h3, n, w(p.cls_w), w(p.cls_b), k)?;

    let pre_clip: Vec<BoundingBox> = boxes_in
        .iter()
        .zip(delta.chunks_exact(4))
        .map(|(b, dl)| {
            let s = cfg.offset_scale(b);
            BoundingBox::new(b.cx + dl[0] * s[0], b.cy + dl[1] * s[1], b.w + dl[2] * s[2], b.h + dl[3] * s[3])
        })
        .collect();
    let boxes: Vec<BoundingBox> = pre_clip.iter().map(clip_to_unit).collect();
    if boxes.iter().any(|b| !b.is_finite()) || class_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence(format!("stage {stage_index} produced non-finite output")));
    }
    let out = StageOutput { boxes, class_logits, object_features: h3.clone() };
    let tape = StageTape {
        n,
        has_prev: h_prev.is_some(),
        feat,
        a,
        h0,
        q,
        k: kk,
        v,
        att,
        probs,
        ln1,
        h1,
        f1,
        f1r,
        ln2,
        h2,
        tau,
        gamma,
        h3,
        g1,
        g1r,
        pre_clip,
        scales: boxes_in.iter().map(|b| cfg.offset_scale(b)).collect(),
    };
    Ok((out, tape))
}

/// Backward of [`run_stage`]. `d_boxes` and `d_logits` are gradients with
/// respect to the stage's outputs, `d_features` the gradient arriving from
/// the next stage through the object features. Returns the gradient with
/// respect to `h_prev` when the stage had one.
pub fn backward_stage(
    decoder: &Decoder,
    store: &ParamStore,
    tape: &StageTape,
    stage_index: usize,
    d_boxes: &[[f64; 4]],
    d_logits: &[f64],
    d_features: Option<&[f64]>,
    grads: &mut Grads,
) -> Option<Vec<f64>> {
    let cfg = &decoder.config;
    let p = &decoder.stages[stage_index];
    let n = tape.n;
    let d = cfg.hidden;
    let w = |id: ParamId| store.values(id);

    let mut d_delta = vec![0.0; n * 4];
    for (((dd, b), g), s) in d_delta.chunks_exact_mut(4).zip(&tape.pre_clip).zip(d_boxes).zip(&tape.scales) {
        let back = clip_to_unit_backward(b, *g);
        for c in 0..4 {
            dd[c] = back[c] * s[c];
        }
    }

    let mut dh3 = match d_features {
        Some(df) => df.to_vec(),
        None => vec![0.0; n * d],
    };
    let mut dg1r = vec![0.0; n * d];
    linear_back(grads, &tape.g1r, n, w(p.reg2_w), &d_delta, Some(&mut dg1r), p.reg2_w, p.reg2_b);
    let dg1 = relu_backward(&tape.g1, &dg1r);
    linear_back(grads, &tape.h3, n, w(p.reg1_w), &dg1, Some(&mut dh3), p.reg1_w, p.reg1_b);
    linear_back(grads, &tape.h3, n, w(p.cls_w), d_logits, Some(&mut dh3), p.cls_w, p.cls_b);

    let film = FilmParams { w_gamma: w(p.film_wg), b_gamma: w(p.film_bg), w_beta: w(p.film_wb), b_beta: w(p.film_bb) };
    let fg = film_backward(&tape.h2, &tape.tau, &tape.gamma, &film, &dh3);
    accumulate(grads, p.film_wg, &fg.dw_gamma);
    accumulate(grads, p.film_bg, &fg.db_gamma);
    accumulate(grads, p.film_wb, &fg.dw_beta);
    accumulate(grads, p.film_bb, &fg.db_beta);

    let (mut dg, mut dbt) = (vec![0.0; d], vec![0.0; d]);
    let dr2 = layernorm_backward(&tape.ln2, w(p.ln2_g), &fg.dh, &mut dg, &mut dbt);
    accumulate(grads, p.ln2_g, &dg);
    accumulate(grads, p.ln2_b, &dbt);
    let mut dh1 = dr2.clone();
    let mut df1r = vec![0.0; n * cfg.ffn];
    linear_back(grads, &tape.f1r, n, w(p.ff2_w), &dr2, Some(&mut df1r), p.ff2_w, p.ff2_b);
    let df1 = relu_backward(&tape.f1, &df1r);
    linear_back(grads, &tape.h1, n, w(p.ff1_w), &df1, Some(&mut dh1), p.ff1_w, p.ff1_b);

    let (mut dg, mut dbt) = (vec![0.0; d], vec![0.0; d]);
    let dr1 = layernorm_backward(&tape.ln1, w(p.ln1_g), &dh1, &mut dg, &mut dbt);
    accumulate(grads, p.ln1_g, &dg);
    accumulate(grads, p.ln1_b, &dbt);
    let mut dh0 = dr1.clone();
    let mut datt = vec![0.0; n * d];
    linear_back(grads, &tape.att, n, w(p.o_w), &dr1, Some(&mut datt), p.o_w, p.o_b);
    let (dq, dk, dv) = attention_backward(&tape.q, &tape.k, &tape.v, &tape.probs, &datt, d);
    linear_back(grads, &tape.h0, n, w(p.q_w), &dq, Some(&mut dh0), p.q_w, p.q_b);
    linear_back(grads, &tape.h0, n, w(p.k_w), &dk, Some(&mut dh0), p.k_w, p.k_b);
    linear_back(grads, &tape.h0, n, w(p.v_w), &dv, Some(&mut dh0), p.v_w, p.v_b);

    let da = relu_backward(&tape.a, &dh0);
    linear_back(grads, &tape.feat, n, w(p.in_w), &da, None, p.in_w, p.in_b);
    tape.has_prev.then_some(dh0)
}

#[allow(clippy::too_many_arguments)]
fn linear_back(
    grads: &mut Grads,
    x: &[f64],
    n: usize,
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut Vec<f64>>,
    w_id: ParamId,
    b_id: ParamId,
) {
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; dy.len() / n.max(1)];
    affine_backward(x, n, weight, dy, dx.map(|v| v.as_mut_slice()), &mut dw, &mut db).expect("shapes fixed by forward");
    accumulate(grads, w_id, &dw);
    accumulate(grads, b_id, &db);
}

fn accumulate(grads: &mut Grads, id: ParamId, src: &[f64]) {
    grads.buf(id).iter_mut().zip(src).for_each(|(g, s)| *g += s);
}

/// Outputs of every stage plus the tapes needed for backward.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub stages: Vec<StageOutput>,
    pub tapes: Vec<StageTape>,
}

impl HeadOutput {
    /// The endpoint prediction: the final stage's boxes.
    pub fn x1_hat(&self) -> &[BoundingBox] {
        &self.stages.last().expect("at least one stage").boxes
    }

    pub fn final_logits(&self) -> &[f64] {
        &self.stages.last().expect("at least one stage").class_logits
    }
}

/// Chain all stages, each refining the previous stage's boxes.
pub fn run_head(
    decoder: &Decoder,
    store: &ParamStore,
    grid: &FeatureGrid,
    boxes_t: &[BoundingBox],
    t: f64,
) -> Result<HeadOutput> {
    let mut stages: Vec<StageOutput> = Vec::with_capacity(decoder.config.n_stages);
    let mut tapes = Vec::with_capacity(decoder.config.n_stages);
    for s in 0..decoder.config.n_stages {
        let (boxes, h_prev) = match stages.last() {
            Some(prev) => (prev.boxes.as_slice(), Some(prev.object_features.as_slice())),
            None => (boxes_t, None),
        };
        let (out, tape) = run_stage(decoder, store, grid, boxes, h_prev, t, s)?;
        stages.push(out);
        tapes.push(tape);
    }
    Ok(HeadOutput { stages, tapes })
}

/// Backward through every stage given per-stage output gradients.
pub fn backward_head(
    decoder: &Decoder,
    store: &ParamStore,
    head: &HeadOutput,
    d_boxes: &[Vec<[f64; 4]>],
    d_logits: &[Vec<f64>],
    grads: &mut Grads,
) {
    let mut d_features: Option<Vec<f64>> = None;
    for s in (0..head.tapes.len()).rev() {
        d_features = backward_stage(
            decoder,
            store,
            &head.tapes[s],
            s,
            &d_boxes[s],
            &d_logits[s],
            d_features.as_deref(),
            grads,
        );
    }
}

pub const VELOCITY_EPS: f64 = 1e-3;

/// `(x1_hat - x_t) / max(1 - t, eps)` per box.
pub fn recover_velocity(x1_hat: &[BoundingBox], x_t: &[BoundingBox], t: f64, eps: f64) -> Vec<[f64; 4]> {
    let denom = (1.0 - t).max(eps);
    x1_hat
        .iter()
        .zip(x_t)
        .map(|(a, b)| {
            let (a, b) = (a.to_array(), b.to_array());
            [(a[0] - b[0]) / denom, (a[1] - b[1]) / denom, (a[2] - b[2]) / denom, (a[3] - b[3]) / denom]
        })
        .collect()
}
