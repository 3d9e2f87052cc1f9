//! A trained (or trainable) detector: decoder weights, prior and objective.

use crate::config::{Objective, PriorKind, RunConfig};
use crate::diffusion::{make_cosine_schedule, DiffusionSchedule};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::nnet::ParamStore;
use crate::priors::{predict_dependent_stats, PriorSpec, PriorStats, StatsHead};
use crate::rng;
use crate::scenes::{global_average_pool, FeatureGrid};

pub const TAG_INIT: u64 = 1;

#[derive(Debug, Clone)]
pub struct Detector {
    pub decoder: Decoder,
    pub store: ParamStore,
    pub prior: PriorSpec,
    pub stats_head: Option<StatsHead>,
    pub objective: Objective,
    pub schedule: DiffusionSchedule,
}

impl Detector {
    /// Fresh weights drawn from the `(seed, init)` stream.
    pub fn init(cfg: &RunConfig, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        check_prior_kind(cfg, &prior)?;
        let mut r = rng::stream(cfg.seed, &[TAG_INIT]);
        let mut store = ParamStore::new();
        let decoder = Decoder::new(cfg.decoder_config(), &mut store, &mut r)?;
        let stats_head = match prior {
            PriorSpec::Dependent { hidden } => {
                Some(StatsHead::register(&mut store, &mut r, cfg.data_channels, hidden)?)
            }
            _ => None,
        };
        Ok(Self {
            decoder,
            store,
            prior,
            stats_head,
            objective: cfg.objective,
            schedule: make_cosine_schedule(cfg.ddpm_timesteps, cfg.ddpm_scale)?,
        })
    }

    /// Rebuild around an existing parameter store.
    pub fn from_parts(cfg: &RunConfig, store: ParamStore, prior: PriorSpec) -> Result<Self> {
        prior.validate()?;
        check_prior_kind(cfg, &prior)?;
        let decoder = Decoder::from_store(cfg.decoder_config(), &store)?;
        let stats_head = match prior {
            PriorSpec::Dependent { .. } => Some(
                StatsHead::from_store(&store)
                    .ok_or_else(|| Error::InvalidParameter("dependent prior without prior_head weights".into()))?,
            ),
            _ => None,
        };
        Ok(Self {
            decoder,
            store,
            prior,
            stats_head,
            objective: cfg.objective,
            schedule: make_cosine_schedule(cfg.ddpm_timesteps, cfg.ddpm_scale)?,
        })
    }

    /// Per-image prior statistics, present only for the dependent prior.
    pub fn context(&self, grid: &FeatureGrid) -> Result<Option<PriorStats>> {
        match &self.stats_head {
            Some(head) => Ok(Some(predict_dependent_stats(&self.store, head, &global_average_pool(grid))?)),
            None => Ok(None),
        }
    }
}

fn check_prior_kind(cfg: &RunConfig, prior: &PriorSpec) -> Result<()> {
    let kind = match prior {
        PriorSpec::GaussN => PriorKind::Gauss,
        PriorSpec::Derived(_) => PriorKind::Derived,
        PriorSpec::DerivedSizeBucketed { .. } => PriorKind::Bucketed,
        PriorSpec::Dependent { .. } => PriorKind::Dependent,
    };
    if kind != cfg.prior_kind {
        return Err(Error::Config(vec![format!(
            "prior.kind = {} but the prior supplied is {}",
            cfg.prior_kind,
            kind
        )]));
    }
    Ok(())
}
