//! Prune, then tune: general training, extraction of the informative
//! sub-network, and per-domain lottery sub-networks in the freed parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{DomainId, MaskRegistry};
use crate::model::{init_params, ModelConfig, Pair};
use crate::pruning::{gradual_prune, prune_count, prune_smallest, PruneEvent, PruneRun, PruneSchedule};
use crate::tensor::{BinaryMask, ParamStore};
use crate::train::{StepSpec, StepStats, TrainConfig, Trainer};

pub const GENERAL: &str = "general";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Fraction of each tensor's eligible elements given to the domain.
    pub budget: f64,
    pub warmup_steps: usize,
    pub tune_steps: usize,
    pub ancestors: Vec<String>,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(name: &str, budget: f64, warmup_steps: usize, tune_steps: usize, seed: u64) -> Self {
        DomainSpec {
            name: name.to_string(),
            budget,
            warmup_steps,
            tune_steps,
            ancestors: vec![GENERAL.to_string()],
            seed,
        }
    }

    fn ancestor_refs(&self) -> Vec<&str> {
        self.ancestors.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub id: DomainId,
    pub lottery_size: usize,
    pub tune_steps: usize,
    pub final_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineState {
    pub trainer: Trainer,
    pub registry: MaskRegistry,
    pub history: Vec<DomainRecord>,
}

impl PipelineState {
    pub fn params(&self) -> &ParamStore {
        &self.trainer.params
    }

    pub fn model(&self) -> &ModelConfig {
        &self.trainer.model
    }

    pub fn inference_mask(&self, domain: &str) -> Result<BinaryMask> {
        self.registry.inference_mask(domain)
    }
}

/// How the registry treats shared tensors after general training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryMode {
    pub multi_domain: bool,
    /// Freeze embeddings and layer norms; defaults to `multi_domain`.
    pub freeze_shared: Option<bool>,
}

impl RegistryMode {
    pub fn single() -> Self {
        RegistryMode {
            multi_domain: false,
            freeze_shared: None,
        }
    }

    pub fn multi() -> Self {
        RegistryMode {
            multi_domain: true,
            freeze_shared: None,
        }
    }

    pub fn build(&self, params: &ParamStore) -> Result<MaskRegistry> {
        MaskRegistry::with_freeze(params, self.multi_domain, self.freeze_shared.unwrap_or(self.multi_domain))
    }
}

/// Train a dense model on the general corpus and open a fresh registry.
pub fn train_general(
    model: ModelConfig,
    train: TrainConfig,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
    mode: RegistryMode,
    hook: impl FnMut(&Trainer, &StepStats) -> Result<()>,
) -> Result<PipelineState> {
    if corpus.is_empty() {
        return Err(Error::Data("general corpus is empty".into()));
    }
    let params = init_params(&model, seed)?;
    let mut trainer = Trainer::new(model, params, train)?;
    let all = BinaryMask::ones_like(&trainer.params);
    trainer.run(corpus, steps, seed.wrapping_add(1), &StepSpec::new(&all), hook)?;
    let registry = mode.build(&trainer.params)?;
    Ok(PipelineState {
        trainer,
        registry,
        history: Vec::new(),
    })
}

/// Gradually prune the general model to `schedule.final_sparsity` of its
/// eligible elements while recovering on `corpus`, then give the survivors
/// to the general domain. Pruned elements stay free and hold 0.0.
pub fn extract_general_subnet(
    state: &mut PipelineState,
    schedule: &PruneSchedule,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
) -> Result<Vec<PruneEvent>> {
    if state.registry.domain(GENERAL).is_ok() {
        return Err(Error::contract("the general sub-network is already extracted"));
    }
    let eligible = state.registry.eligible_mask();
    let run = PruneRun {
        corpus,
        steps,
        seed,
        eligible: &eligible,
        update: &eligible,
        forward: None,
    };
    let outcome = gradual_prune(&mut state.trainer, schedule, &run)?;
    state.registry.assign_domain(GENERAL, &outcome.keep, &[])?;
    Ok(outcome.events)
}

/// Elements per tensor a domain of `budget` receives, checked against the free pool.
pub fn lottery_quota(registry: &MaskRegistry, budget: f64) -> Result<Vec<(String, usize)>> {
    if !(budget > 0.0 && budget <= 1.0) {
        return Err(Error::contract(format!("domain budget {budget} must be in (0, 1]")));
    }
    let mut out = Vec::new();
    for (name, c) in registry.tensor_counts() {
        let needed = prune_count(budget, c.eligible());
        if needed > c.free {
            return Err(Error::Capacity {
                tensor: name,
                needed,
                available: c.free,
            });
        }
        out.push((name, needed));
    }
    Ok(out)
}

/// Warm up the free elements on the target corpus, then keep the
/// largest-magnitude `budget` share of each tensor's eligible elements among
/// them. Free elements outside the returned mask are reset to 0.0.
pub fn generate_lottery_subnet(state: &mut PipelineState, spec: &DomainSpec, corpus: &[Pair]) -> Result<BinaryMask> {
    let ancestors = spec.ancestor_refs();
    for a in &ancestors {
        state.registry.domain(a)?;
    }
    if state.registry.domain(&spec.name).is_ok() {
        return Err(Error::contract(format!("domain `{}` is already registered", spec.name)));
    }
    let quota = lottery_quota(&state.registry, spec.budget)?;
    let free = state.registry.free_mask();
    let forward = state.registry.warmup_mask(&ancestors)?;

    state.trainer.adam.reset_moments();
    let step = StepSpec::new(&free).with_forward(&forward);
    state
        .trainer
        .run(corpus, spec.warmup_steps, spec.seed, &step, |_, _| Ok(()))?;

    let mut lottery = BinaryMask::default();
    for ((name, t), (qname, keep)) in state.trainer.params.iter_mut().zip(&quota) {
        debug_assert_eq!(name, qname);
        let f = free.bits(name).expect("congruent");
        let available = f.iter().filter(|&&b| b).count();
        let drop = prune_smallest(t.data(), f, available - keep);
        let bits: Vec<bool> = f.iter().zip(&drop).map(|(&fr, &d)| fr && !d).collect();
        for (v, (&fr, &b)) in t.data_mut().iter_mut().zip(f.iter().zip(&bits)) {
            if fr && !b {
                *v = 0.0;
            }
        }
        lottery.insert(name, t.shape().to_vec(), bits)?;
    }
    Ok(lottery)
}

/// Register `spec` with the given lottery and tune only those elements,
/// with the domain's inference mask applied in the forward pass.
pub fn tune_domain(
    state: &mut PipelineState,
    spec: &DomainSpec,
    lottery: &BinaryMask,
    corpus: &[Pair],
    hook: impl FnMut(&Trainer, &StepStats) -> Result<()>,
) -> Result<DomainRecord> {
    let id = state.registry.assign_domain(&spec.name, lottery, &spec.ancestor_refs())?;
    let update = state.registry.trainable_mask(Some(&spec.name))?;
    let forward = state.registry.inference_mask(&spec.name)?;
    state.trainer.adam.reset_moments();
    let step = StepSpec::new(&update).with_forward(&forward);
    let stats = state
        .trainer
        .run(corpus, spec.tune_steps, spec.seed.wrapping_add(1), &step, hook)?;
    let record = DomainRecord {
        id,
        lottery_size: update.popcount(),
        tune_steps: spec.tune_steps,
        final_nll: stats.last().map(|s| s.nll),
    };
    state.history.push(record.clone());
    Ok(record)
}

/// Adapt to each domain in order. `on_done` runs after each domain finishes tuning.
pub fn sequential_adapt(
    state: &mut PipelineState,
    domains: &[(DomainSpec, &[Pair])],
    mut on_done: impl FnMut(&PipelineState, &DomainRecord) -> Result<()>,
) -> Result<Vec<DomainRecord>> {
    let total: f64 = domains.iter().map(|(s, _)| s.budget).sum();
    let c = state.registry.counts();
    let free_fraction = c.free as f64 / c.eligible().max(1) as f64;
    if total > free_fraction + 1e-12 {
        return Err(Error::Capacity {
            tensor: "<all>".into(),
            needed: prune_count(total.min(1.0), c.eligible()),
            available: c.free,
        });
    }
    let mut out = Vec::with_capacity(domains.len());
    for (spec, corpus) in domains {
        let lottery = generate_lottery_subnet(state, spec, corpus)?;
        let rec = tune_domain(state, spec, &lottery, corpus, |_, _| Ok(()))?;
        on_done(state, &rec)?;
        out.push(rec);
    }
    Ok(out)
}
