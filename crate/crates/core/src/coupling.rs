//! Source-target coupling: ground-truth padding, pairing strategies and
//! linear interpolants.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, interp_iou, BoundingBox, DEFAULT_INTERP_POINTS};
use crate::priors::{sample_prior, PriorSpec, PriorStats};

/// Weights of the box terms in the `HungG` pairing cost.
pub const HUNG_G_L1: f64 = 5.0;
pub const HUNG_G_GIOU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatchStrategy {
    Rand,
    HungC,
    HungG,
    HungI,
}

impl MatchStrategy {
    pub const ALL: [MatchStrategy; 4] = [Self::Rand, Self::HungC, Self::HungG, Self::HungI];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rand => "rand",
            Self::HungC => "hung-c",
            Self::HungG => "hung-g",
            Self::HungI => "hung-i",
        }
    }
}

impl fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown match strategy {s:?}")))
    }
}

/// Targets after padding to `n_train` entries. `None` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTargets {
    pub x1: Vec<BoundingBox>,
    pub class_targets: Vec<Option<usize>>,
    pub is_padding: Vec<bool>,
}

/// Ground truth first, then prior samples flagged as padding.
pub fn pad_ground_truth<R: Rng>(
    gt_boxes: &[BoundingBox],
    gt_classes: &[usize],
    n_train: usize,
    prior: &PriorSpec,
    rng: &mut R,
    context: Option<&PriorStats>,
) -> Result<PaddedTargets> {
    if gt_boxes.len() != gt_classes.len() {
        return Err(Error::SizeMismatch { left: gt_boxes.len(), right: gt_classes.len() });
    }
    let n_gt = gt_boxes.len();
    if n_gt > n_train {
        return Err(Error::TooManyObjects { n_gt, n_train });
    }
    let mut x1 = gt_boxes.to_vec();
    x1.extend(sample_prior(prior, n_train - n_gt, rng, context)?);
    let mut class_targets: Vec<Option<usize>> = gt_classes.iter().map(|&c| Some(c)).collect();
    class_targets.resize(n_train, None);
    let mut is_padding = vec![false; n_gt];
    is_padding.resize(n_train, true);
    Ok(PaddedTargets { x1, class_targets, is_padding })
}

/// Minimum-cost perfect assignment of a square matrix. `result[i]` is the
/// column assigned to row `i`. Among optimal assignments the
/// lexicographically smallest one is returned.
pub fn hungarian_solve(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::InvalidCostMatrix(format!("row of length {} in {n}x{n} matrix", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCostMatrix("non-finite entry".into()));
        }
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // Shortest augmenting paths with potentials, 1-based with a dummy
    // column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut col_to_row = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
        col_to_row[j - 1] = p[j] - 1;
    }

    // Every perfect matching on zero-reduced-cost edges is optimal; walk rows
    // in order and move each to its smallest feasible tight column.
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight = |i: usize, j: usize| cost[i][j] - u[i + 1] - v[j + 1] <= tol;
    for i in 0..n {
        for j in 0..row_to_col[i] {
            let r = col_to_row[j];
            if r < i || !tight(i, j) {
                continue;
            }
            if let Some(path) = alternating_path(n, i, j, r, row_to_col[i], &row_to_col, &col_to_row, &tight) {
                // `path` lists (row, new column) pairs ending at the freed column.
                row_to_col[i] = j;
                col_to_row[j] = i;
                for (row, col) in path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                break;
            }
        }
    }
    Ok(row_to_col)
}

/// Breadth-first search for an alternating path that rehomes row `start`
/// (displaced from column `taken`) onto tight columns, ending at `target`.
/// Rows up to and including `fixed` keep their columns.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    fixed: usize,
    taken: usize,
    start: usize,
    target: usize,
    row_to_col: &[usize],
    col_to_row: &[usize],
    tight: &impl Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let mut parent_col: Vec<Option<usize>> = vec![None; n];
    let mut seen_col = vec![false; n];
    seen_col[taken] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    let mut via: Vec<Option<usize>> = vec![None; n];
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if seen_col[col] || col == row_to_col[row] || !tight(row, col) {
                continue;
            }
            let owner = col_to_row[col];
            if col != target && owner <= fixed {
                continue;
            }
            seen_col[col] = true;
            parent_col[col] = Some(row);
            if col == target {
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = parent_col[c].expect("visited column has a parent");
                    path.push((r, c));
                    match via[r] {
                        Some(prev) => c = prev,
                        None => break,
                    }
                }
                return Some(path);
            }
            via[owner] = Some(col);
            queue.push_back(owner);
        }
    }
    None
}

/// Pairwise cost between a source box `a` and a target box `b`.
pub fn match_cost(a: &BoundingBox, b: &BoundingBox, strategy: MatchStrategy) -> Result<f64> {
    match strategy {
        MatchStrategy::Rand => Err(Error::InvalidStrategy(strategy.name().into())),
        MatchStrategy::HungC => Ok((a.cx - b.cx).hypot(a.cy - b.cy)),
        MatchStrategy::HungG => {
            let l1: f64 = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum();
            Ok(HUNG_G_L1 * l1 + HUNG_G_GIOU * (1.0 - giou(&a.corners(), &b.corners())))
        }
        MatchStrategy::HungI => Ok(1.0 - interp_iou(&a.corners(), &b.corners(), DEFAULT_INTERP_POINTS)?),
    }
}

/// Reorder `x0` so that entry `i` of the result is paired with `x1[i]`.
pub fn pair_sources<R: Rng>(
    x0: &[BoundingBox],
    x1: &[BoundingBox],
    strategy: MatchStrategy,
    rng: &mut R,
) -> Result<Vec<BoundingBox>> {
    if x0.len() != x1.len() {
        return Err(Error::SizeMismatch { left: x0.len(), right: x1.len() });
    }
    if strategy == MatchStrategy::Rand {
        let mut out = x0.to_vec();
        out.shuffle(rng);
        return Ok(out);
    }
    let cost = x1
        .iter()
        .map(|b| x0.iter().map(|a| match_cost(a, b, strategy)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let assignment = hungarian_solve(&cost)?;
    Ok(assignment.into_iter().map(|j| x0[j]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledBatch {
    pub x0: Vec<BoundingBox>,
    pub x1: Vec<BoundingBox>,
    pub t: f64,
    pub xt: Vec<BoundingBox>,
    pub u_target: Vec<[f64; 4]>,
    pub class_targets: Vec<Option<usize>>,
    pub is_padding: Vec<bool>,
}

/// Interpolants at a fresh `t ~ U[0, 1)` shared by the whole item.
pub fn build_interpolants<R: Rng>(x0: Vec<BoundingBox>, targets: PaddedTargets, rng: &mut R) -> Result<CoupledBatch> {
    let t: f64 = rng.random();
    build_interpolants_at(x0, targets, t)
}

pub fn build_interpolants_at(x0: Vec<BoundingBox>, targets: PaddedTargets, t: f64) -> Result<CoupledBatch> {
    if x0.len() != targets.x1.len() {
        return Err(Error::SizeMismatch { left: x0.len(), right: targets.x1.len() });
    }
    let xt = x0.iter().zip(&targets.x1).map(|(a, b)| a.lerp(b, t)).collect();
    let u_target = x0
        .iter()
        .zip(&targets.x1)
        .map(|(a, b)| {
            let (a, b) = (a.to_array(), b.to_array());
            [b[0] - a[0], b[1] - a[1], b[2] - a[2], b[3] - a[3]]
        })
        .collect();
    Ok(CoupledBatch {
        x0,
        x1: targets.x1,
        t,
        xt,
        u_target,
        class_targets: targets.class_targets,
        is_padding: targets.is_padding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Corners;
    use crate::priors::GaussianStats;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
    }

    /// Every permutation in lexicographic order.
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::new();
        let mut used = vec![false; n];
        fn rec(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(n, cur, used, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        rec(n, &mut cur, &mut used, &mut out);
        out
    }

    /// First optimal permutation in lexicographic order.
    fn brute_force(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in permutations(cost.len()) {
            let t = total(cost, &p);
            if best.as_ref().is_none_or(|(_, b)| t < *b) {
                best = Some((p, t));
            }
        }
        best.unwrap()
    }

    #[test]
    fn small_reference_instances() {
        let c = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        assert_eq!(hungarian_solve(&c).unwrap(), vec![0, 1]);
        let n = 5;
        let id: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian_solve(&id).unwrap(), (0..n).collect::<Vec<_>>());
        assert!(hungarian_solve(&[]).unwrap().is_empty());
        assert!(matches!(hungarian_solve(&[vec![1.0, 2.0]]), Err(Error::InvalidCostMatrix(_))));
        assert!(matches!(hungarian_solve(&[vec![f64::NAN]]), Err(Error::InvalidCostMatrix(_))));
    }

    #[test]
    fn ties_resolve_to_lexicographically_smallest() {
        let zeros = vec![vec![0.0; 4]; 4];
        assert_eq!(hungarian_solve(&zeros).unwrap(), vec![0, 1, 2, 3]);
        let anti: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i + j == 3 { 0.0 } else { 1.0 }).collect()).collect();
        assert_eq!(hungarian_solve(&anti).unwrap(), vec![3, 2, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            // Integer costs on a tiny range produce many ties.
            let c: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            assert_eq!(hungarian_solve(&c).unwrap(), brute_force(&c).0);
        }
    }

    #[test]
    fn matches_brute_force_on_random_7x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let c: Vec<Vec<f64>> = (0..7).map(|_| (0..7).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let got = hungarian_solve(&c).unwrap();
            let (_, best) = brute_force(&c);
            assert!((total(&c, &got) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn match_cost_reference_values() {
        let a = BoundingBox::new(0.3, 0.4, 0.2, 0.1);
        for s in [MatchStrategy::HungC, MatchStrategy::HungG, MatchStrategy::HungI] {
            assert!(match_cost(&a, &a, s).unwrap().abs() < 1e-12);
        }
        let b = BoundingBox::new(0.3, 0.4, 0.5, 0.7);
        assert_eq!(match_cost(&a, &b, MatchStrategy::HungC).unwrap(), 0.0);
        assert!(matches!(match_cost(&a, &b, MatchStrategy::Rand), Err(Error::InvalidStrategy(_))));

        let p = Corners::new(0.0, 0.0, 2.0, 2.0).to_box();
        let q = Corners::new(1.0, 1.0, 3.0, 3.0).to_box();
        let expect = 5.0 * 2.0 + 2.0 * (1.0 + 5.0 / 63.0);
        assert!((match_cost(&p, &q, MatchStrategy::HungG).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn padding_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = [BoundingBox::new(0.3, 0.3, 0.2, 0.2), BoundingBox::new(0.6, 0.6, 0.2, 0.2)];
        let p = pad_ground_truth(&gt, &[1, 2], 5, &PriorSpec::GaussN, &mut rng, None).unwrap();
        assert_eq!(p.x1.len(), 5);
        assert_eq!(p.is_padding, vec![false, false, true, true, true]);
        assert_eq!(p.class_targets, vec![Some(1), Some(2), None, None, None]);
        assert_eq!(&p.x1[..2], &gt);
        let full = pad_ground_truth(&gt, &[1, 2], 2, &PriorSpec::GaussN, &mut rng, None).unwrap();
        assert!(full.is_padding.iter().all(|p| !p));
        let empty = pad_ground_truth(&[], &[], 3, &PriorSpec::GaussN, &mut rng, None).unwrap();
        assert!(empty.is_padding.iter().all(|&p| p));
        assert!(matches!(
            pad_ground_truth(&gt, &[1, 2], 1, &PriorSpec::GaussN, &mut rng, None),
            Err(Error::TooManyObjects { n_gt: 2, n_train: 1 })
        ));
    }

    #[test]
    fn hung_c_recovers_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = sample_prior(&PriorSpec::GaussN, 12, &mut rng, None).unwrap();
        let mut x0 = x1.clone();
        x0.shuffle(&mut rng);
        assert_eq!(pair_sources(&x0, &x1, MatchStrategy::HungC, &mut rng).unwrap(), x1);
        let one = &x1[..1];
        assert_eq!(pair_sources(one, one, MatchStrategy::Rand, &mut rng).unwrap(), one);
        assert!(matches!(pair_sources(&x0[..2], &x1, MatchStrategy::HungG, &mut rng), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn random_pairing_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = sample_prior(&PriorSpec::GaussN, 10, &mut rng, None).unwrap();
        let a = pair_sources(&x, &x, MatchStrategy::Rand, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = pair_sources(&x, &x, MatchStrategy::Rand, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolant_endpoints() {
        let x0 = vec![BoundingBox::new(0.0, 0.0, 0.0, 0.0)];
        let targets = |b: BoundingBox| PaddedTargets { x1: vec![b], class_targets: vec![Some(0)], is_padding: vec![false] };
        let one = BoundingBox::new(1.0, 1.0, 1.0, 1.0);
        let mid = build_interpolants_at(x0.clone(), targets(one), 0.5).unwrap();
        assert_eq!(mid.xt[0], BoundingBox::new(0.5, 0.5, 0.5, 0.5));
        assert_eq!(mid.u_target[0], [1.0; 4]);
        let b = build_interpolants(x0, targets(one), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((0.0..1.0).contains(&b.t));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.05..0.95f64, 0.05..0.95f64, 0.01..0.9f64, 0.01..0.9f64).prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn interpolants_are_bit_exact(
            pairs in prop::collection::vec((arb_box(), arb_box()), 1..8),
        ) {
            let x0: Vec<_> = pairs.iter().map(|p| p.0).collect();
            let x1: Vec<_> = pairs.iter().map(|p| p.1).collect();
            let n = x0.len();
            let targets = PaddedTargets { x1: x1.clone(), class_targets: vec![None; n], is_padding: vec![true; n] };
            let at0 = build_interpolants_at(x0.clone(), targets.clone(), 0.0).unwrap();
            let at1 = build_interpolants_at(x0.clone(), targets, 1.0).unwrap();
            prop_assert_eq!(&at0.xt, &x0);
            prop_assert_eq!(&at1.xt, &x1);
            for i in 0..n {
                let (a, b) = (x0[i].to_array(), x1[i].to_array());
                for k in 0..4 {
                    prop_assert_eq!(at0.u_target[i][k], b[k] - a[k]);
                }
            }
        }

        #[test]
        fn pairing_permutes_and_beats_random(seed in 0u64..500, n in 1usize..9, s in 1usize..4) {
            let strategy = MatchStrategy::ALL[s];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = GaussianStats::standard();
            let x0: Vec<_> = (0..n).map(|_| crate::priors::sample_box(&stats, &mut rng)).collect();
            let x1: Vec<_> = (0..n).map(|_| crate::priors::sample_box(&stats, &mut rng)).collect();
            let paired = pair_sources(&x0, &x1, strategy, &mut rng).unwrap();
            let shuffled = pair_sources(&x0, &x1, MatchStrategy::Rand, &mut rng).unwrap();
            let key = |v: &[BoundingBox]| {
                let mut k: Vec<[u64; 4]> = v.iter().map(|b| b.to_array().map(f64::to_bits)).collect();
                k.sort();
                k
            };
            prop_assert_eq!(key(&paired), key(&x0));
            let cost = |v: &[BoundingBox]| -> f64 {
                v.iter().zip(&x1).map(|(a, b)| match_cost(a, b, strategy).unwrap()).sum()
            };
            prop_assert!(cost(&paired) <= cost(&shuffled) + 1e-9);
        }
    }
}
