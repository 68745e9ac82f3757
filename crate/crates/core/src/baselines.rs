//! Comparison strategies built on the shared [`Trainer`].
//!
//! Every strategy draws the same batches for the same seed and resets Adam
//! moments at the start, so runs differ only in which elements train and
//! which extra loss terms apply.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attach_adapters, batch_graph, has_adapters, AdapterConfig, GraphOptions, ModelConfig, Pair, ParamGroup};
use crate::tensor::{BinaryMask, ParamStore, Tensor};
use crate::train::{softmax_rows, Batcher, StepSpec, StepStats, Trainer};

/// Diagonal EWC: `(lambda / 2) * sum F (theta - anchor)^2`.
#[derive(Debug, Clone)]
pub struct EwcState {
    pub anchor: ParamStore,
    pub fisher: ParamStore,
    pub lambda: f64,
}

impl EwcState {
    pub fn new(anchor: ParamStore, fisher: ParamStore, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::contract(format!("EWC strength must be a nonnegative number, got {lambda}")));
        }
        if anchor.len() != fisher.len() {
            return Err(Error::contract("Fisher and anchor cover different tensors"));
        }
        for ((an, at), (fname, ft)) in anchor.iter().zip(fisher.iter()) {
            if an != fname || at.shape() != ft.shape() {
                return Err(Error::shape(fname, "Fisher tensor does not match the anchor"));
            }
            if ft.data().iter().any(|&f| !(f >= 0.0)) {
                return Err(Error::contract(format!("negative importance in `{fname}`")));
            }
        }
        Ok(EwcState { anchor, fisher, lambda })
    }

    fn check(&self, params: &ParamStore) -> Result<()> {
        if params.len() != self.anchor.len() {
            return Err(Error::contract("EWC anchor does not match the parameter store"));
        }
        for ((pn, pt), (an, at)) in params.iter().zip(self.anchor.iter()) {
            if pn != an || pt.shape() != at.shape() {
                return Err(Error::shape(pn, "EWC anchor mismatch"));
            }
        }
        Ok(())
    }

    pub fn penalty(&self, params: &ParamStore) -> Result<f64> {
        self.check(params)?;
        let mut s = 0.0;
        for (((_, p), (_, a)), (_, f)) in params.iter().zip(self.anchor.iter()).zip(self.fisher.iter()) {
            for ((x, y), w) in p.data().iter().zip(a.data()).zip(f.data()) {
                let d = x - y;
                s += w * d * d;
            }
        }
        Ok(0.5 * self.lambda * s)
    }

    /// Adds `lambda * F * (theta - anchor)` to `grads`.
    pub fn add_gradient(&self, params: &ParamStore, grads: &mut ParamStore) -> Result<()> {
        self.check(params)?;
        for ((name, g), ((_, p), ((_, a), (_, f)))) in grads
            .iter_mut()
            .zip(params.iter().zip(self.anchor.iter().zip(self.fisher.iter())))
        {
            if g.len() != p.len() {
                return Err(Error::shape(name, "gradient does not match parameters"));
            }
            for (((gi, x), y), w) in g.data_mut().iter_mut().zip(p.data()).zip(a.data()).zip(f.data()) {
                *gi += self.lambda * w * (x - y);
            }
        }
        Ok(())
    }
}

/// Empirical diagonal Fisher: mean of squared batch gradients over `batches` batches.
pub fn estimate_fisher(
    model: &ModelConfig,
    params: &ParamStore,
    corpus: &[Pair],
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParamStore> {
    if batches == 0 {
        return Err(Error::contract("Fisher estimate needs at least one batch"));
    }
    let mut batcher = Batcher::new(corpus.len(), seed)?;
    let mut fisher = params.zeros_like();
    let opts = GraphOptions::for_params(params);
    for _ in 0..batches {
        let batch: Vec<Pair> = batcher.next_batch(batch_size).into_iter().map(|i| corpus[i].clone()).collect();
        let bg = batch_graph(model, &batch, opts)?;
        let (_, g) = bg.graph.forward_backward(params, &bg.inputs, bg.loss)?;
        for ((_, f), (_, gt)) in fisher.iter_mut().zip(g.iter()) {
            for (fi, gi) in f.data_mut().iter_mut().zip(gt.data()) {
                *fi += gi * gi;
            }
        }
    }
    let n = batches as f64;
    for (_, f) in fisher.iter_mut() {
        f.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok(fisher)
}

/// Distillation from a fixed teacher: `(1 - alpha) * CE + alpha * KL(teacher || student)`.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub teacher: ParamStore,
    pub alpha: f64,
}

impl DistillState {
    pub fn new(teacher: ParamStore, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("distillation weight must be in [0, 1], got {alpha}")));
        }
        Ok(DistillState { teacher, alpha })
    }

    /// Teacher token distributions for a batch, one row per target position.
    pub fn teacher_probs(&self, model: &ModelConfig, batch: &[Pair]) -> Result<Tensor> {
        let bg = batch_graph(model, batch, GraphOptions::for_params(&self.teacher))?;
        let logits = bg.graph.forward(&self.teacher, &bg.inputs)?.take(bg.logits);
        Ok(softmax_rows(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    Finetune,
    Ewc { lambda: f64 },
    Distill { alpha: f64 },
    LayerFreeze { top_layers: usize },
    Adapter { bottleneck_dim: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Ewc { .. } => "ewc",
            Strategy::Distill { .. } => "distill",
            Strategy::LayerFreeze { .. } => "layer-freeze",
            Strategy::Adapter { .. } => "adapter",
        }
    }
}

/// Elements trained by layer freezing: the top `top_layers` blocks of each
/// side, the final layer norms and the output bias. The embedding is tied to
/// the output projection and also feeds the bottom layer, so it stays frozen
/// unless every layer trains.
pub fn layer_freeze_mask(params: &ParamStore, model: &ModelConfig, top_layers: usize) -> Result<BinaryMask> {
    params.check_tagged()?;
    if top_layers == 0 {
        return Err(Error::contract("layer freezing needs at least one trainable layer"));
    }
    if top_layers >= model.num_layers {
        if model.num_layers == 1 {
            log::warn!("layer freezing with a single layer per side trains every parameter");
        }
        return Ok(BinaryMask::ones_like(params));
    }
    let first = model.num_layers - top_layers;
    Ok(BinaryMask::by_tensor(params, |_, tag| {
        let tag = tag.expect("checked");
        match (tag.group, tag.layer) {
            (ParamGroup::OutputProjection, _) => true,
            (ParamGroup::Embedding, _) => false,
            (ParamGroup::LayerNorm, None) => true,
            (_, Some(l)) => l >= first,
            (_, None) => false,
        }
    }))
}

pub fn adapter_mask(params: &ParamStore) -> Result<BinaryMask> {
    params.check_tagged()?;
    if !has_adapters(params) {
        return Err(Error::contract("adapter tuning needs adapters attached"));
    }
    Ok(BinaryMask::by_tensor(params, |_, tag| tag.expect("checked").group == ParamGroup::Adapter))
}

/// Attach adapters to a trainer's model and start tracking them in Adam.
pub fn prepare_adapters(trainer: &mut Trainer, config: &AdapterConfig, seed: u64) -> Result<()> {
    trainer.params = attach_adapters(&trainer.params, &trainer.model, config, seed)?;
    trainer.adam.bind_new(&trainer.params);
    Ok(())
}

/// Everything a strategy needs beyond the trainer.
#[derive(Debug, Clone, Default)]
pub struct StrategyContext {
    /// General-domain model: EWC anchor and distillation teacher.
    pub reference: Option<ParamStore>,
    pub fisher: Option<ParamStore>,
}

/// Run `strategy` for `steps` steps on `corpus`. Adapter tuning expects
/// adapters to be attached already (see [`prepare_adapters`]).
pub fn run_strategy(
    trainer: &mut Trainer,
    strategy: Strategy,
    ctx: &StrategyContext,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
    hook: impl FnMut(&Trainer, &StepStats) -> Result<()>,
) -> Result<Vec<StepStats>> {
    trainer.adam.reset_moments();
    let reference = || {
        ctx.reference
            .clone()
            .ok_or_else(|| Error::contract(format!("{} needs the general model", strategy.name())))
    };
    match strategy {
        Strategy::Finetune => {
            let mask = BinaryMask::ones_like(&trainer.params);
            trainer.run(corpus, steps, seed, &StepSpec::new(&mask), hook)
        }
        Strategy::LayerFreeze { top_layers } => {
            let mask = layer_freeze_mask(&trainer.params, &trainer.model, top_layers)?;
            trainer.run(corpus, steps, seed, &StepSpec::new(&mask), hook)
        }
        Strategy::Adapter { .. } => {
            let mask = adapter_mask(&trainer.params)?;
            trainer.run(corpus, steps, seed, &StepSpec::new(&mask), hook)
        }
        Strategy::Ewc { lambda } => {
            let fisher = ctx
                .fisher
                .clone()
                .ok_or_else(|| Error::contract("EWC needs a Fisher estimate"))?;
            let ewc = EwcState::new(reference()?, fisher, lambda)?;
            let mask = BinaryMask::ones_like(&trainer.params);
            trainer.run(corpus, steps, seed, &StepSpec::new(&mask).with_ewc(&ewc), hook)
        }
        Strategy::Distill { alpha } => {
            let d = DistillState::new(reference()?, alpha)?;
            let mask = BinaryMask::ones_like(&trainer.params);
            trainer.run(corpus, steps, seed, &StepSpec::new(&mask).with_distill(&d), hook)
        }
    }
}

fn no_hook(_: &Trainer, _: &StepStats) -> Result<()> {
    Ok(())
}

pub fn full_finetune(trainer: &mut Trainer, corpus: &[Pair], steps: usize, seed: u64) -> Result<Vec<StepStats>> {
    run_strategy(trainer, Strategy::Finetune, &StrategyContext::default(), corpus, steps, seed, no_hook)
}

pub fn layer_freeze_tune(
    trainer: &mut Trainer,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
    top_layers: usize,
) -> Result<Vec<StepStats>> {
    let s = Strategy::LayerFreeze { top_layers };
    run_strategy(trainer, s, &StrategyContext::default(), corpus, steps, seed, no_hook)
}

pub fn adapter_tune(
    trainer: &mut Trainer,
    config: &AdapterConfig,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
) -> Result<Vec<StepStats>> {
    let s = Strategy::Adapter {
        bottleneck_dim: config.bottleneck_dim,
    };
    run_strategy(trainer, s, &StrategyContext::default(), corpus, steps, seed, no_hook)
}

pub fn ewc_finetune(
    trainer: &mut Trainer,
    ewc: &EwcState,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
) -> Result<Vec<StepStats>> {
    let ctx = StrategyContext {
        reference: Some(ewc.anchor.clone()),
        fisher: Some(ewc.fisher.clone()),
    };
    run_strategy(trainer, Strategy::Ewc { lambda: ewc.lambda }, &ctx, corpus, steps, seed, no_hook)
}

pub fn distill_finetune(
    trainer: &mut Trainer,
    distill: &DistillState,
    corpus: &[Pair],
    steps: usize,
    seed: u64,
) -> Result<Vec<StepStats>> {
    let ctx = StrategyContext {
        reference: Some(distill.teacher.clone()),
        fisher: None,
    };
    let s = Strategy::Distill { alpha: distill.alpha };
    run_strategy(trainer, s, &ctx, corpus, steps, seed, no_hook)
}
