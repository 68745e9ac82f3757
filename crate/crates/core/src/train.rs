//! The masked training loop shared by the pipeline and every baseline.
//!
//! Each step takes an update mask (which elements Adam may touch) and an
//! optional forward mask (which elements the model sees). Optional EWC and
//! distillation terms are added only when their weight is nonzero, so a
//! disabled term leaves the trajectory bit-identical to plain training.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{DistillState, EwcState};
use crate::error::{Error, Result};
use crate::model::{batch_graph, load_model, save_model, GraphOptions, ModelConfig, Pair};
use crate::tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, BinaryMask, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    /// Global gradient-norm clip over updated elements; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            adam: AdamConfig::default(),
            label_smoothing: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::contract("label_smoothing must be in [0, 1)"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Epoch-shuffled batch indices from a seeded generator.
#[derive(Debug, Clone)]
pub struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(corpus_len: usize, seed: u64) -> Result<Self> {
        if corpus_len == 0 {
            return Err(Error::Data("empty training corpus".into()));
        }
        let mut b = Batcher {
            order: (0..corpus_len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        Ok(b)
    }

    /// Next `size` indices (capped at the corpus size), reshuffling at epoch ends.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// What one step may touch and which extra loss terms apply.
#[derive(Debug, Clone, Copy)]
pub struct StepSpec<'a> {
    pub update: &'a BinaryMask,
    pub forward: Option<&'a BinaryMask>,
    pub ewc: Option<&'a EwcState>,
    pub distill: Option<&'a DistillState>,
}

impl<'a> StepSpec<'a> {
    pub fn new(update: &'a BinaryMask) -> Self {
        StepSpec {
            update,
            forward: None,
            ewc: None,
            distill: None,
        }
    }

    pub fn with_forward(mut self, forward: &'a BinaryMask) -> Self {
        self.forward = Some(forward);
        self
    }

    pub fn with_ewc(mut self, ewc: &'a EwcState) -> Self {
        self.ewc = Some(ewc);
        self
    }

    pub fn with_distill(mut self, distill: &'a DistillState) -> Self {
        self.distill = Some(distill);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// Full objective, including any regularizer.
    pub loss: f64,
    /// Token-level cross-entropy alone.
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: ModelConfig, params: ParamStore, config: TrainConfig) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let adam = AdamState::new(&params, config.adam);
        Ok(Trainer {
            model,
            params,
            adam,
            config,
        })
    }

    /// Objective value, cross-entropy and gradient with respect to the
    /// (forward-masked) parameters on one batch.
    pub fn loss_and_grads(&self, batch: &[Pair], spec: &StepSpec) -> Result<(f64, f64, ParamStore)> {
        batch_objective(&self.model, &self.params, batch, spec, self.config.label_smoothing)
    }

    pub fn step(&mut self, batch: &[Pair], spec: &StepSpec) -> Result<StepStats> {
        let (loss, nll, mut grads) = self.loss_and_grads(batch, spec)?;
        if let Some(c) = self.config.clip_norm {
            clip_grad_norm(&mut grads, spec.update, c);
        }
        let lr = self.adam.next_lr();
        adam_step(&mut self.params, &grads, &mut self.adam, spec.update)?;
        Ok(StepStats {
            step: self.adam.step(),
            lr,
            loss,
            nll,
        })
    }

    /// Run `steps` steps over `corpus` with batches drawn by a fresh [`Batcher`]
    /// seeded with `seed`. `hook` sees the trainer after every step.
    pub fn run(
        &mut self,
        corpus: &[Pair],
        steps: usize,
        seed: u64,
        spec: &StepSpec,
        mut hook: impl FnMut(&Trainer, &StepStats) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let mut batcher = Batcher::new(corpus.len(), seed)?;
        let mut stats = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch: Vec<Pair> = batcher
                .next_batch(self.config.batch_size)
                .into_iter()
                .map(|i| corpus[i].clone())
                .collect();
            let s = self.step(&batch, spec)?;
            hook(self, &s)?;
            stats.push(s);
        }
        Ok(stats)
    }

    /// Mean token cross-entropy over `corpus` under an optional forward mask.
    pub fn mean_nll(&self, corpus: &[Pair], forward: Option<&BinaryMask>) -> Result<f64> {
        mean_nll(&self.model, &self.params, corpus, forward, self.config.batch_size)
    }

    /// Write the model checkpoint to `path` and the optimizer state to
    /// `<path>.optim.json`, so that [`Trainer::load`] resumes bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, &self.model, &self.params)?;
        let side = optim_path(path);
        let state = OptimFile {
            config: self.config,
            adam: self.adam.clone(),
        };
        std::fs::write(&side, serde_json::to_vec(&state)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (model, params) = load_model(path)?;
        let side = optim_path(path);
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let state: OptimFile = serde_json::from_slice(&bytes)?;
        let mut trainer = Trainer::new(model, params, state.config)?;
        state.adam.check_matches(&trainer.params)?;
        trainer.adam = state.adam;
        Ok(trainer)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimFile {
    config: TrainConfig,
    adam: AdamState,
}

fn optim_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".optim.json");
    PathBuf::from(s)
}

/// Objective, cross-entropy and gradient on one batch; the gradient is taken at the
/// forward-masked parameters.
pub fn batch_objective(
    model: &ModelConfig,
    params: &ParamStore,
    batch: &[Pair],
    spec: &StepSpec,
    label_smoothing: f64,
) -> Result<(f64, f64, ParamStore)> {
    let masked;
    let fwd = match spec.forward {
        Some(m) => {
            masked = params.masked(m)?;
            &masked
        }
        None => params,
    };
    let opts = GraphOptions {
        label_smoothing,
        ..GraphOptions::for_params(fwd)
    };
    let mut bg = batch_graph(model, batch, opts)?;
    let ce = bg.loss;
    let mut loss = ce;
    if let Some(d) = spec.distill.filter(|d| d.alpha > 0.0) {
        let teacher_probs = d.teacher_probs(model, batch)?;
        let q = bg.graph.input("teacher_probs", None);
        let kl = bg.graph.kl_divergence(bg.logits, q);
        let a = bg.graph.scale(ce, 1.0 - d.alpha);
        let b = bg.graph.scale(kl, d.alpha);
        loss = bg.graph.add(a, b);
        bg.inputs.insert("teacher_probs".into(), teacher_probs);
    }
    let (values, mut grads) = bg.graph.forward_backward(fwd, &bg.inputs, loss)?;
    let nll = values.get(ce).data()[0];
    let mut total = values.get(loss).data()[0];
    if let Some(e) = spec.ewc.filter(|e| e.lambda > 0.0) {
        total += e.penalty(params)?;
        e.add_gradient(params, &mut grads)?;
    }
    if !total.is_finite() {
        return Err(Error::NumericOverflow { node: "loss".into() });
    }
    Ok((total, nll, grads))
}

pub fn mean_nll(
    model: &ModelConfig,
    params: &ParamStore,
    corpus: &[Pair],
    forward: Option<&BinaryMask>,
    batch_size: usize,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::contract("mean_nll on an empty corpus"));
    }
    let masked;
    let params = match forward {
        Some(m) => {
            masked = params.masked(m)?;
            &masked
        }
        None => params,
    };
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in corpus.chunks(batch_size.max(1)) {
        let bg = batch_graph(model, chunk, GraphOptions::for_params(params))?;
        let v = bg.graph.forward(params, &bg.inputs)?;
        total += v.get(bg.loss).data()[0] * bg.targets.len() as f64;
        tokens += bg.targets.len();
    }
    Ok(total / tokens as f64)
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let vocab = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(vocab) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_visits_every_example_each_epoch() {
        let mut b = Batcher::new(10, 3).unwrap();
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batcher_is_deterministic() {
        let mut a = Batcher::new(7, 9).unwrap();
        let mut b = Batcher::new(7, 9).unwrap();
        for _ in 0..5 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
    }

    #[test]
    fn small_corpus_batches_are_capped() {
        let mut b = Batcher::new(3, 0).unwrap();
        let batch = b.next_batch(8);
        assert_eq!(batch.len(), 3);
    }

    #[test]
    fn empty_corpus_is_a_data_error() {
        assert!(matches!(Batcher::new(0, 0), Err(Error::Data(_))));
    }
}
