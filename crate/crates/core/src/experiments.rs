//! Prior, matcher and solver ablations at toy scale.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Objective, PriorKind, RunConfig, SolverKind};
use crate::coupling::MatchStrategy;
use crate::error::Result;
use crate::evaluation::evaluate;
use crate::model::Detector;
use crate::sampling::{SamplerConfig, Solver};
use crate::scenes::Scene;
use crate::trainer::{build_prior, train};

pub const ABLATION_STEPS: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub steps: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall: f64,
    pub nfe: f64,
    pub ms_per_scene: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTables {
    pub config_hash: String,
    pub priors: Vec<AblationRow>,
    pub matchers: Vec<AblationRow>,
    pub solvers: Vec<AblationRow>,
}

const HEADER: &str = "variant,steps,ap,ap50,ap75,recall,nfe,ms_per_scene";

fn csv_rows(rows: &[AblationRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.2},{:.3}",
            r.variant, r.steps, r.ap, r.ap50, r.ap75, r.recall, r.nfe, r.ms_per_scene
        );
    }
    s
}

fn md_table(title: &str, rows: &[AblationRow], timing: bool) -> String {
    let mut s = format!("### {title}\n\n");
    if timing {
        s.push_str("| variant | steps | AP | AP50 | AP75 | recall | NFE | ms/scene |\n|---|---|---|---|---|---|---|---|\n");
    } else {
        s.push_str("| variant | steps | AP | AP50 | AP75 | recall |\n|---|---|---|---|---|---|\n");
    }
    for r in rows {
        let _ = write!(s, "| {} | {} | {:.3} | {:.3} | {:.3} | {:.3} |", r.variant, r.steps, r.ap, r.ap50, r.ap75, r.recall);
        if timing {
            let _ = write!(s, " {:.1} | {:.2} |", r.nfe, r.ms_per_scene);
        }
        s.push('\n');
    }
    s.push('\n');
    s
}

/// Variants ordered by their best AP across steps, highest first.
pub fn ranking(rows: &[AblationRow]) -> Vec<(String, f64)> {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for r in rows {
        let e = best.entry(&r.variant).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.ap);
    }
    let mut v: Vec<(String, f64)> = best.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

impl AblationTables {
    pub fn csv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("priors", csv_rows(&self.priors)),
            ("matchers", csv_rows(&self.matchers)),
            ("solvers", csv_rows(&self.solvers)),
        ]
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("config hash `{}`\n\n", self.config_hash);
        for (title, rows, timing) in [
            ("Prior distribution", &self.priors, false),
            ("Pairing cost", &self.matchers, false),
            ("ODE solver", &self.solvers, true),
        ] {
            s.push_str(&md_table(title, rows, timing));
            let order: Vec<String> = ranking(rows).into_iter().map(|(v, ap)| format!("{v} ({ap:.3})")).collect();
            let _ = writeln!(s, "ranking by best AP: {}\n", order.join(" > "));
        }
        s
    }
}

fn eval_rows(
    det: &Detector,
    val: &[Scene],
    cfg: &RunConfig,
    variant: &str,
    solver: Solver,
) -> Result<Vec<AblationRow>> {
    ABLATION_STEPS
        .iter()
        .map(|&steps| {
            let sampler = SamplerConfig { steps, solver, ..SamplerConfig::from_run(cfg) };
            let (r, nfe, ms) = evaluate(det, val, &sampler, cfg.seed)?;
            Ok(AblationRow {
                variant: variant.to_string(),
                steps,
                ap: r.ap,
                ap50: r.ap50,
                ap75: r.ap75,
                recall: r.recall,
                nfe,
                ms_per_scene: ms,
            })
        })
        .collect()
}

fn fit(cfg: &RunConfig, train_set: &[Scene], log: &mut impl FnMut(String), label: &str) -> Result<Detector> {
    let start = Instant::now();
    let mut det = Detector::init(cfg, build_prior(cfg, train_set)?)?;
    train(&mut det, train_set, cfg, |_, _| Ok(()))?;
    log(format!("trained {label} in {:.1}s", start.elapsed().as_secs_f64()));
    Ok(det)
}

type Models = BTreeMap<(PriorKind, MatchStrategy), Detector>;

fn ensure(
    models: &mut Models,
    base: &RunConfig,
    prior: PriorKind,
    matcher: MatchStrategy,
    train_set: &[Scene],
    log: &mut impl FnMut(String),
) -> Result<RunConfig> {
    let cfg = base
        .clone()
        .with_overrides([format!("prior.kind={prior}").as_str(), format!("match.strategy={matcher}").as_str()])?;
    if let std::collections::btree_map::Entry::Vacant(e) = models.entry((prior, matcher)) {
        let det = fit(&cfg, train_set, log, &format!("prior={prior} match={matcher}"))?;
        e.insert(det);
    }
    Ok(cfg)
}

/// Train one model per prior and per matcher (sharing the model that uses
/// the base prior and base matcher), evaluate each at 1, 2 and 3 steps, run
/// every solver on the base model, and train a diffusion model for the DDIM
/// row.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &[Scene],
    val: &[Scene],
    mut log: impl FnMut(String),
) -> Result<AblationTables> {
    let base = base.clone().with_overrides(["objective=cfm", "solver.kind=euler"])?;
    let mut models: Models = BTreeMap::new();

    let mut priors = Vec::new();
    for &p in PriorKind::ALL {
        let cfg = ensure(&mut models, &base, p, base.match_strategy, train_set, &mut log)?;
        priors.extend(eval_rows(&models[&(p, base.match_strategy)], val, &cfg, p.name(), Solver::Euler)?);
    }
    let mut matchers = Vec::new();
    for m in MatchStrategy::ALL {
        let cfg = ensure(&mut models, &base, base.prior_kind, m, train_set, &mut log)?;
        matchers.extend(eval_rows(&models[&(base.prior_kind, m)], val, &cfg, m.name(), Solver::Euler)?);
    }

    let mut solvers = Vec::new();
    let cfg = ensure(&mut models, &base, base.prior_kind, base.match_strategy, train_set, &mut log)?;
    let det = &models[&(base.prior_kind, base.match_strategy)];
    for &kind in SolverKind::ALL {
        if kind == SolverKind::Ddim {
            continue;
        }
        let c = cfg.clone().with_overrides([format!("solver.kind={kind}").as_str()])?;
        solvers.extend(eval_rows(det, val, &c, kind.name(), SamplerConfig::from_run(&c).solver)?);
    }
    let ddpm_cfg = cfg.clone().with_overrides(["objective=ddpm", "solver.kind=ddim"])?;
    let ddpm = fit(&ddpm_cfg, train_set, &mut log, "diffusion baseline")?;
    debug_assert_eq!(ddpm.objective, Objective::Ddpm);
    solvers.extend(eval_rows(&ddpm, val, &ddpm_cfg, "ddim", Solver::Ddim)?);

    Ok(AblationTables { config_hash: base.hash(), priors, matchers, solvers })
}
