//! Prior distributions over box space.
//!
//! All four families sample boxes coordinate by coordinate from truncated
//! normals through the inverse CDF. Extents are drawn first so that centre
//! bounds can keep every corner inside the unit square.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::nnet::{affine_backward, affine_forward, init_normal, sigmoid, Grads, ParamId, ParamStore, Tensor};

/// Floor applied wherever a standard deviation appears.
pub const SIGMA_MIN: f64 = 1e-3;

/// Smallest extent a prior sample may have; also bounds extents away from 1
/// so that the centre interval never collapses.
pub const MIN_EXTENT: f64 = 0.01;

/// The centred standard-normal prior lives at mean 0.5 with spread 0.25 in
/// unit image coordinates.
pub const GAUSS_MEAN: f64 = 0.5;
pub const GAUSS_STD: f64 = 0.25;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_icdf(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mu: f64,
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    pub fn new(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(sigma > 0.0 && lo < hi && mu.is_finite() && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "truncated normal needs sigma > 0 and lo < hi (mu={mu}, sigma={sigma}, lo={lo}, hi={hi})"
            )));
        }
        Ok(Self { mu, sigma, lo, hi })
    }

    /// Inverse CDF of the truncated distribution.
    ///
    /// Bounds lying entirely in the upper tail are handled through the
    /// survival function to avoid cancellation.
    pub fn icdf(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!("quantile {q} outside [0, 1]")));
        }
        if q == 0.0 {
            return Ok(self.lo);
        }
        if q == 1.0 {
            return Ok(self.hi);
        }
        let a = (self.lo - self.mu) / self.sigma;
        let b = (self.hi - self.mu) / self.sigma;
        let z = if a > 0.0 {
            let (sa, sb) = (normal_cdf(-a), normal_cdf(-b));
            if sa - sb <= 0.0 {
                return Ok(self.lo + q * (self.hi - self.lo));
            }
            -normal_icdf(sa - q * (sa - sb))
        } else {
            let (pa, pb) = (normal_cdf(a), normal_cdf(b));
            if pb - pa <= 0.0 {
                return Ok(self.lo + q * (self.hi - self.lo));
            }
            normal_icdf(pa + q * (pb - pa))
        };
        Ok((self.mu + self.sigma * z).clamp(self.lo, self.hi))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let q: f64 = rng.random();
        self.icdf(q).expect("uniform draw lies in [0, 1)")
    }
}

/// Per-coordinate Gaussian statistics in `(cx, cy, w, h)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: [f64; 4],
    pub sigma: [f64; 4],
}

impl GaussianStats {
    pub fn standard() -> Self {
        Self { mu: [GAUSS_MEAN; 4], sigma: [GAUSS_STD; 4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub weight: f64,
    pub stats: GaussianStats,
}

/// Predicted per-image statistics, both in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mu_hat: [f64; 4],
    pub sigma_hat: [f64; 4],
}

impl PriorStats {
    pub fn as_gaussian(&self) -> GaussianStats {
        GaussianStats { mu: self.mu_hat, sigma: self.sigma_hat }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PriorSpec {
    GaussN,
    Derived(GaussianStats),
    DerivedSizeBucketed { buckets: Vec<SizeBucket> },
    /// Statistics predicted per image by a small head whose weights live in
    /// the decoder's parameter store.
    Dependent { hidden: usize },
}

impl PriorSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            PriorSpec::GaussN => "gauss",
            PriorSpec::Derived(_) => "derived",
            PriorSpec::DerivedSizeBucketed { .. } => "bucketed",
            PriorSpec::Dependent { .. } => "dependent",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |s: &GaussianStats| -> Result<()> {
            if s.sigma.iter().any(|&v| !(v > 0.0)) || s.mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("prior sigma must be positive".into()));
            }
            Ok(())
        };
        match self {
            PriorSpec::GaussN | PriorSpec::Dependent { .. } => Ok(()),
            PriorSpec::Derived(s) => check(s),
            PriorSpec::DerivedSizeBucketed { buckets } => {
                if buckets.is_empty() {
                    return Err(Error::InvalidParameter("no size buckets".into()));
                }
                buckets.iter().try_for_each(|b| check(&b.stats))?;
                let total: f64 = buckets.iter().map(|b| b.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidParameter(format!("bucket weights sum to {total}")));
                }
                Ok(())
            }
        }
    }
}

fn population_stats<'a>(boxes: impl Iterator<Item = &'a BoundingBox> + Clone) -> GaussianStats {
    let n = boxes.clone().count() as f64;
    let mut mu = [0.0; 4];
    for b in boxes.clone() {
        for (m, v) in mu.iter_mut().zip(b.to_array()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 4];
    for b in boxes {
        for k in 0..4 {
            let d = b.to_array()[k] - mu[k];
            var[k] += d * d;
        }
    }
    let sigma = var.map(|v| (v / n).sqrt().max(SIGMA_MIN));
    GaussianStats { mu, sigma }
}

/// Componentwise population mean and standard deviation of all boxes.
pub fn fit_derived_stats(boxes: &[BoundingBox]) -> Result<GaussianStats> {
    if boxes.len() < 2 {
        return Err(Error::InsufficientData(format!("{} boxes, need at least 2", boxes.len())));
    }
    Ok(population_stats(boxes.iter()))
}

/// Area-quantile mixture. Boxes are ranked by area and split into
/// `n_buckets` equal-count groups; groups with fewer than two boxes are
/// merged into their lower neighbour (or the next one for the first group).
pub fn fit_size_buckets(boxes: &[BoundingBox], n_buckets: usize) -> Result<Vec<SizeBucket>> {
    if n_buckets == 0 {
        return Err(Error::InvalidParameter("n_buckets must be at least 1".into()));
    }
    if boxes.len() < 2 {
        return Err(Error::InsufficientData(format!("{} boxes, need at least 2", boxes.len())));
    }
    let n = boxes.len();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| boxes[a].area().total_cmp(&boxes[b].area()).then(a.cmp(&b)));

    let mut groups: Vec<Vec<usize>> = (0..n_buckets)
        .map(|g| ranked[g * n / n_buckets..(g + 1) * n / n_buckets].to_vec())
        .collect();
    let mut g = 0;
    while g < groups.len() {
        if groups[g].len() < 2 && groups.len() > 1 {
            let small = groups.remove(g);
            let target = if g == 0 { 0 } else { g - 1 };
            groups[target].extend(small);
            g = 0;
        } else {
            g += 1;
        }
    }

    let mut member = vec![usize::MAX; n];
    for (gi, grp) in groups.iter().enumerate() {
        for &i in grp {
            member[i] = gi;
        }
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(gi, grp)| {
            // Original order keeps the single-bucket case bit-identical to
            // `fit_derived_stats`.
            let member = &member;
            let members = boxes.iter().enumerate().filter(move |(i, _)| member[*i] == gi).map(|(_, b)| b);
            SizeBucket { weight: grp.len() as f64 / n as f64, stats: population_stats(members) }
        })
        .collect())
}

/// One box drawn from factorized truncated normals with the given
/// statistics: extents first, then centres bounded by the extents.
pub fn sample_box<R: Rng>(stats: &GaussianStats, rng: &mut R) -> BoundingBox {
    let extent = |k: usize, rng: &mut R| {
        TruncatedNormal::new(stats.mu[k], stats.sigma[k].max(SIGMA_MIN), MIN_EXTENT, 1.0 - MIN_EXTENT)
            .expect("bounds fixed")
            .sample(rng)
    };
    let w = extent(2, rng);
    let h = extent(3, rng);
    let centre = |k: usize, size: f64, rng: &mut R| {
        TruncatedNormal::new(stats.mu[k], stats.sigma[k].max(SIGMA_MIN), 0.5 * size, 1.0 - 0.5 * size)
            .expect("extent below 1")
            .sample(rng)
    };
    let cx = centre(0, w, rng);
    let cy = centre(1, h, rng);
    BoundingBox::new(cx, cy, w, h)
}

/// Draw `n` boxes. The dependent prior needs the statistics predicted for
/// the current image.
pub fn sample_prior<R: Rng>(
    spec: &PriorSpec,
    n: usize,
    rng: &mut R,
    context: Option<&PriorStats>,
) -> Result<Vec<BoundingBox>> {
    match spec {
        PriorSpec::GaussN => {
            let s = GaussianStats::standard();
            Ok((0..n).map(|_| sample_box(&s, rng)).collect())
        }
        PriorSpec::Derived(s) => Ok((0..n).map(|_| sample_box(s, rng)).collect()),
        PriorSpec::DerivedSizeBucketed { buckets } => Ok((0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = buckets.len() - 1;
                for (i, b) in buckets.iter().enumerate() {
                    acc += b.weight;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                sample_box(&buckets[pick].stats, rng)
            })
            .collect()),
        PriorSpec::Dependent { .. } => {
            let stats = context.ok_or(Error::MissingContext)?;
            let g = stats.as_gaussian();
            Ok((0..n).map(|_| sample_box(&g, rng)).collect())
        }
    }
}

/// Two-layer perceptron mapping pooled image features to prior statistics.
#[derive(Debug, Clone, Copy)]
pub struct StatsHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct StatsHeadCache {
    pooled: Vec<f64>,
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl StatsHead {
    pub const PREFIX: &'static str = "prior_head";

    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, in_dim: usize, hidden: usize) -> Result<Self> {
        let p = Self::PREFIX;
        let w1 = store.add(&format!("{p}.w1"), init_normal(rng, vec![hidden, in_dim], in_dim, 2f64.sqrt()))?;
        let b1 = store.add(&format!("{p}.b1"), Tensor::zeros(vec![hidden]))?;
        let w2 = store.add(&format!("{p}.w2"), init_normal(rng, vec![8, hidden], hidden, 0.1))?;
        let b2 = store.add(&format!("{p}.b2"), Tensor::zeros(vec![8]))?;
        Ok(Self { w1, b1, w2, b2, in_dim, hidden })
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        let p = Self::PREFIX;
        let w1 = store.id(&format!("{p}.w1"))?;
        let shape = &store.tensor(w1).shape;
        Some(Self {
            w1,
            b1: store.id(&format!("{p}.b1"))?,
            w2: store.id(&format!("{p}.w2"))?,
            b2: store.id(&format!("{p}.b2"))?,
            hidden: shape[0],
            in_dim: shape[1],
        })
    }
}

/// `(mu_hat, sigma_hat) = sigmoid(MLP(pooled))`, with `sigma_hat` floored at
/// [`SIGMA_MIN`].
pub fn predict_dependent_stats(store: &ParamStore, head: &StatsHead, pooled: &[f64]) -> Result<PriorStats> {
    Ok(stats_head_forward(store, head, pooled)?.0)
}

pub fn stats_head_forward(
    store: &ParamStore,
    head: &StatsHead,
    pooled: &[f64],
) -> Result<(PriorStats, StatsHeadCache)> {
    if pooled.len() != head.in_dim {
        return Err(Error::Shape(format!("pooled width {} != {}", pooled.len(), head.in_dim)));
    }
    let pre_hidden = affine_forward(pooled, 1, store.values(head.w1), store.values(head.b1), head.hidden)?;
    let hidden: Vec<f64> = pre_hidden.iter().map(|v| v.max(0.0)).collect();
    let logits = affine_forward(&hidden, 1, store.values(head.w2), store.values(head.b2), 8)?;
    let out: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let mut mu_hat = [0.0; 4];
    let mut sigma_hat = [0.0; 4];
    mu_hat.copy_from_slice(&out[..4]);
    for k in 0..4 {
        sigma_hat[k] = out[4 + k].max(SIGMA_MIN);
    }
    Ok((PriorStats { mu_hat, sigma_hat }, StatsHeadCache { pooled: pooled.to_vec(), pre_hidden, hidden, out }))
}

/// Accumulate head parameter gradients given `dL/dmu_hat`, `dL/dsigma_hat`.
pub fn stats_head_backward(
    store: &ParamStore,
    head: &StatsHead,
    cache: &StatsHeadCache,
    d_mu: &[f64; 4],
    d_sigma: &[f64; 4],
    grads: &mut Grads,
) {
    let mut d_logits = [0.0; 8];
    for k in 0..8 {
        let s = cache.out[k];
        let upstream = if k < 4 {
            d_mu[k]
        } else if s > SIGMA_MIN {
            d_sigma[k - 4]
        } else {
            0.0
        };
        d_logits[k] = upstream * s * (1.0 - s);
    }
    let mut d_hidden = vec![0.0; head.hidden];
    {
        let mut dw2 = vec![0.0; 8 * head.hidden];
        let mut db2 = vec![0.0; 8];
        affine_backward(&cache.hidden, 1, store.values(head.w2), &d_logits, Some(&mut d_hidden), &mut dw2, &mut db2)
            .expect("shapes fixed by forward");
        add_into(grads.buf(head.w2), &dw2);
        add_into(grads.buf(head.b2), &db2);
    }
    let d_pre: Vec<f64> = cache
        .pre_hidden
        .iter()
        .zip(&d_hidden)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    let mut dw1 = vec![0.0; head.hidden * head.in_dim];
    let mut db1 = vec![0.0; head.hidden];
    affine_backward(&cache.pooled, 1, store.values(head.w1), &d_pre, None, &mut dw1, &mut db1)
        .expect("shapes fixed by forward");
    add_into(grads.buf(head.w1), &dw1);
    add_into(grads.buf(head.b1), &db1);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorLoss {
    pub value: f64,
    pub d_mu: [f64; 4],
    pub d_sigma: [f64; 4],
    /// True when there was no target to regress against.
    pub skipped: bool,
}

/// Per-item regression target: the item's own box statistics when it has
/// two or more boxes, otherwise the batch-wide fallback.
pub fn prior_target(item_boxes: &[BoundingBox], batch_fallback: Option<&GaussianStats>) -> Option<GaussianStats> {
    if item_boxes.len() >= 2 {
        Some(population_stats(item_boxes.iter()))
    } else {
        batch_fallback.copied()
    }
}

/// `||mu_hat - mu||^2 + ||sigma_hat - sigma||^2` and its gradient.
pub fn prior_loss(stats: &PriorStats, target: Option<&GaussianStats>) -> PriorLoss {
    let Some(t) = target else {
        return PriorLoss { value: 0.0, d_mu: [0.0; 4], d_sigma: [0.0; 4], skipped: true };
    };
    let mut value = 0.0;
    let mut d_mu = [0.0; 4];
    let mut d_sigma = [0.0; 4];
    for k in 0..4 {
        let dm = stats.mu_hat[k] - t.mu[k];
        let ds = stats.sigma_hat[k] - t.sigma[k];
        value += dm * dm + ds * ds;
        d_mu[k] = 2.0 * dm;
        d_sigma[k] = 2.0 * ds;
    }
    PriorLoss { value, d_mu, d_sigma, skipped: false }
}
