//! Experiment configuration and orchestration: data generation, general
//! training, extraction, and either Prune-Tune or a baseline per target
//! domain, ending in a [`MetricReport`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::corpus_io::{save_corpus, Vocab};
use super::eval::{evaluate, Scores};
use super::report::{write_csv, MetricReport, ReportRow};
use super::stages::StageStore;
use super::synthetic::{gen_synthetic_domain, DomainCorpus, SyntheticDomainSpec};
use crate::adaptation::{
    extract_general_subnet, generate_lottery_subnet, train_general, tune_domain, DomainSpec, PipelineState,
    RegistryMode, GENERAL,
};
use crate::baselines::{
    adapter_mask, estimate_fisher, layer_freeze_mask, prepare_adapters, run_strategy, Strategy, StrategyContext,
};
use crate::error::{Error, Result, StageContext};
use crate::model::{AdapterConfig, DecodeOptions, ModelConfig, Pair};
use crate::pruning::{write_prune_log, PruneSchedule};
use crate::tensor::BinaryMask;
use crate::train::{StepStats, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralStage {
    pub data: SyntheticDomainSpec,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionStage {
    pub schedule: PruneSchedule,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDomain {
    pub data: SyntheticDomainSpec,
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub tune_steps: usize,
}

fn default_budget() -> f64 {
    0.1
}

fn default_warmup() -> usize {
    100
}

fn default_true() -> bool {
    true
}

fn default_eval_every() -> usize {
    100
}

fn default_fisher_batches() -> usize {
    50
}

fn default_lambda() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.5
}

fn default_top_layers() -> usize {
    1
}

fn default_bottleneck() -> usize {
    8
}

/// Adaptation method applied to each target domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    #[default]
    PruneTune,
    Finetune,
    Ewc {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Distill {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    LayerFreeze {
        #[serde(default = "default_top_layers")]
        top_layers: usize,
    },
    Adapter {
        #[serde(default = "default_bottleneck")]
        bottleneck_dim: usize,
    },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self.baseline() {
            None => "prune-tune",
            Some(s) => s.name(),
        }
    }

    pub fn baseline(&self) -> Option<Strategy> {
        match *self {
            Method::PruneTune => None,
            Method::Finetune => Some(Strategy::Finetune),
            Method::Ewc { lambda } => Some(Strategy::Ewc { lambda }),
            Method::Distill { alpha } => Some(Strategy::Distill { alpha }),
            Method::LayerFreeze { top_layers } => Some(Strategy::LayerFreeze { top_layers }),
            Method::Adapter { bottleneck_dim } => Some(Strategy::Adapter { bottleneck_dim }),
        }
    }

    /// Method named `name` with default hyperparameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "prune-tune" => Method::PruneTune,
            "finetune" => Method::Finetune,
            "ewc" => Method::Ewc { lambda: default_lambda() },
            "distill" => Method::Distill { alpha: default_alpha() },
            "layer-freeze" => Method::LayerFreeze {
                top_layers: default_top_layers(),
            },
            "adapter" => Method::Adapter {
                bottleneck_dim: default_bottleneck(),
            },
            other => return Err(Error::contract(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub general: GeneralStage,
    pub extraction: ExtractionStage,
    pub domains: Vec<TargetDomain>,
    #[serde(default)]
    pub method: Method,
    /// Chain domains in order instead of adapting each from the general model.
    #[serde(default)]
    pub sequential: bool,
    #[serde(default = "default_true")]
    pub multi_domain: bool,
    /// Freeze embeddings and layer norms after general training.
    #[serde(default = "default_true")]
    pub freeze_shared: bool,
    /// Dev-set evaluation cadence during adaptation, in steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "DecodeOptions::greedy")]
    pub decode: DecodeOptions,
    #[serde(default = "default_fisher_batches")]
    pub fisher_batches: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// The desk-scale default: copy as the general task, a noisy cipher target.
    pub fn quick() -> Self {
        use super::synthetic::TaskKind;
        let data = |name: &str, task, sizes| SyntheticDomainSpec::new(name, task, 16, (3, 8), sizes);
        ExperimentConfig {
            seed: 0,
            model: ModelConfig {
                num_layers: 2,
                model_dim: 32,
                ffn_dim: 64,
                heads: 2,
                vocab_size: 18,
                max_len: 10,
            },
            train: TrainConfig {
                batch_size: 32,
                adam: crate::tensor::AdamConfig {
                    schedule: crate::tensor::LrSchedule::InverseSqrt { peak: 3e-3, warmup: 200 },
                    ..Default::default()
                },
                ..Default::default()
            },
            general: GeneralStage {
                data: data(GENERAL, TaskKind::Copy, (4000, 200, 200)),
                steps: 1500,
            },
            extraction: ExtractionStage {
                schedule: PruneSchedule::cubic(0.5, 0, 50, 8),
                steps: 600,
            },
            domains: vec![TargetDomain {
                data: data("novel", TaskKind::Cipher { key: 3 }, (100, 200, 200)).with_noise(0.2),
                budget: 0.1,
                warmup_steps: 100,
                tune_steps: 400,
            }],
            method: Method::PruneTune,
            sequential: false,
            multi_domain: true,
            freeze_shared: true,
            eval_every: default_eval_every(),
            decode: DecodeOptions::greedy(),
            fisher_batches: default_fisher_batches(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.extraction.schedule.validate()?;
        if self.eval_every == 0 {
            return Err(Error::contract("eval_every must be positive"));
        }
        if self.decode.beam_width == 0 {
            return Err(Error::contract("beam width must be at least 1"));
        }
        let mut names = vec![self.general.data.name.as_str()];
        if names[0] != GENERAL {
            return Err(Error::contract(format!("the general domain must be named `{GENERAL}`")));
        }
        for d in &self.domains {
            if names.contains(&d.data.name.as_str()) {
                return Err(Error::contract(format!("domain name `{}` is used twice", d.data.name)));
            }
            names.push(&d.data.name);
            if !(d.budget > 0.0 && d.budget <= 1.0) {
                return Err(Error::contract(format!("budget of `{}` must be in (0, 1]", d.data.name)));
            }
        }
        for spec in std::iter::once(&self.general.data).chain(self.domains.iter().map(|d| &d.data)) {
            spec.validate()?;
            if spec.vocab_size as usize + 2 != self.model.vocab_size {
                return Err(Error::contract(format!(
                    "`{}` uses {} content tokens but the model vocabulary is {} (content + 2 markers)",
                    spec.name, spec.vocab_size, self.model.vocab_size
                )));
            }
            if spec.max_len + 1 > self.model.max_len {
                return Err(Error::contract(format!(
                    "`{}` sentences up to {} tokens need max_len >= {}",
                    spec.name,
                    spec.max_len,
                    spec.max_len + 1
                )));
            }
        }
        if self.method == Method::PruneTune {
            let total: f64 = self.domains.iter().map(|d| d.budget).sum();
            let free = self.extraction.schedule.final_sparsity;
            if self.sequential && total > free + 1e-12 {
                return Err(Error::contract(format!(
                    "domain budgets sum to {total} but extraction frees only {free}"
                )));
            }
        }
        Ok(())
    }

    fn registry_mode(&self) -> RegistryMode {
        RegistryMode {
            multi_domain: self.multi_domain,
            freeze_shared: Some(self.freeze_shared),
        }
    }

    /// Corpus seed of target domain `index`; the general corpus uses `seed`.
    pub fn domain_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(1 + index as u64)
    }

    fn general_key(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "model": self.model,
            "train": self.train,
            "general": self.general,
            "mode": self.registry_mode(),
        })
    }

    fn extraction_key(&self) -> serde_json::Value {
        json!({ "general": self.general_key(), "extraction": self.extraction })
    }

    fn extraction_stage_name(&self) -> String {
        format!("extracted-s{:.4}", self.extraction.schedule.final_sparsity)
    }
}

/// Generated corpora for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub general: DomainCorpus,
    pub domains: Vec<DomainCorpus>,
}

impl Corpora {
    pub fn get(&self, name: &str) -> Option<&DomainCorpus> {
        std::iter::once(&self.general)
            .chain(&self.domains)
            .find(|d| d.name == name)
    }
}

/// Output layout below `--out-dir`.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["data", "stages", "reports", "curves", "logs", "models"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Workspace { root: root.to_path_buf() })
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn stages(&self) -> Result<StageStore> {
        StageStore::open(&self.root.join("stages"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("curves")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
}

/// Generate every corpus of `cfg` and write them with `vocab.txt` to `dir`.
pub fn prepare_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Corpora> {
    let general = gen_synthetic_domain(&cfg.general.data, cfg.seed).stage("generating general data")?;
    let domains = cfg
        .domains
        .iter()
        .enumerate()
        .map(|(i, d)| gen_synthetic_domain(&d.data, cfg.domain_seed(i)).stage(&format!("generating `{}`", d.data.name)))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocab::synthetic(cfg.general.data.vocab_size);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    for c in std::iter::once(&general).chain(&domains) {
        save_corpus(dir, c, &vocab)?;
    }
    Ok(Corpora { general, domains })
}

/// Dense general model, reused from `ws` when already trained with these settings.
pub fn general_stage(cfg: &ExperimentConfig, corpora: &Corpora, ws: &Workspace) -> Result<PipelineState> {
    ws.stages()?.load_or("general", &cfg.general_key(), || {
        train_general(
            cfg.model,
            cfg.train,
            &corpora.general.train,
            cfg.general.steps,
            cfg.seed,
            cfg.registry_mode(),
            |_, s| {
                if s.step % 500 == 0 {
                    log::info!("general step {} nll {:.4}", s.step, s.nll);
                }
                Ok(())
            },
        )
    })
}

/// General model pruned to the informative sub-network; the prune log goes to `logs/`.
pub fn extraction_stage(cfg: &ExperimentConfig, corpora: &Corpora, ws: &Workspace) -> Result<PipelineState> {
    let name = cfg.extraction_stage_name();
    let dense = general_stage(cfg, corpora, ws)?;
    ws.stages()?.load_or(&name, &cfg.extraction_key(), || {
        let mut state = dense;
        let events = extract_general_subnet(
            &mut state,
            &cfg.extraction.schedule,
            &corpora.general.train,
            cfg.extraction.steps,
            cfg.seed.wrapping_add(2),
        )?;
        write_prune_log(&ws.logs().join(format!("{name}.prune.jsonl")), &events)?;
        Ok(state)
    })
}

fn domain_spec(cfg: &ExperimentConfig, index: usize) -> DomainSpec {
    let d = &cfg.domains[index];
    DomainSpec::new(
        &d.data.name,
        d.budget,
        d.warmup_steps,
        d.tune_steps,
        cfg.seed.wrapping_add(100 + 10 * index as u64),
    )
}

/// Records dev accuracy every `every` steps of one tuning run.
struct Curve<'a> {
    start: u64,
    every: u64,
    dev: &'a [Pair],
    mask: Option<BinaryMask>,
    decode: DecodeOptions,
    points: Vec<(u64, f64)>,
}

impl<'a> Curve<'a> {
    fn new(cfg: &ExperimentConfig, start: u64, dev: &'a [Pair], mask: Option<BinaryMask>) -> Self {
        Curve {
            start,
            every: cfg.eval_every as u64,
            dev,
            mask,
            decode: cfg.decode,
            points: Vec::new(),
        }
    }

    fn observe(&mut self, t: &Trainer, s: &StepStats) -> Result<()> {
        let local = s.step - self.start;
        if local.is_multiple_of(self.every) && !self.dev.is_empty() {
            let acc = evaluate(&t.model, &t.params, self.mask.as_ref(), self.dev, &self.decode)?.accuracy;
            log::info!("step {local}: dev accuracy {acc:.4}");
            self.points.push((local, acc));
        }
        Ok(())
    }

    fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .points
            .iter()
            .map(|(s, a)| vec![s.to_string(), format!("{a}")])
            .collect();
        write_csv(path, &["step", "dev_accuracy"], &rows)
    }
}

fn scores(t: &Trainer, mask: Option<&BinaryMask>, corpus: &[Pair], cfg: &ExperimentConfig) -> Result<Scores> {
    evaluate(&t.model, &t.params, mask, corpus, &cfg.decode)
}

/// Adapt one domain with Prune-Tune, recording its dev curve.
fn prune_tune_domain(
    cfg: &ExperimentConfig,
    state: &mut PipelineState,
    index: usize,
    corpus: &DomainCorpus,
    ws: &Workspace,
    label: &str,
) -> Result<usize> {
    let spec = domain_spec(cfg, index);
    let lottery = generate_lottery_subnet(state, &spec, &corpus.train)?;
    let mut preview = state.registry.clone();
    preview.assign_domain(&spec.name, &lottery, &[GENERAL])?;
    let mut curve = Curve::new(cfg, state.trainer.adam.step(), &corpus.dev, Some(preview.inference_mask(&spec.name)?));
    let rec = tune_domain(state, &spec, &lottery, &corpus.train, |t, s| curve.observe(t, s))?;
    curve.save(&ws.curves().join(format!("{label}-{}.csv", spec.name)))?;
    Ok(rec.lottery_size)
}

/// Run `cfg` end to end, writing artifacts below `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let ws = Workspace::new(out_dir)?;
    let corpora = prepare_data(cfg, &ws.data())?;
    run_with_corpora(cfg, &corpora, &ws, "")
}

/// Run `cfg` on already generated corpora. `label` names the report and its artifacts.
pub fn run_with_corpora(cfg: &ExperimentConfig, corpora: &Corpora, ws: &Workspace, label: &str) -> Result<MetricReport> {
    cfg.validate()?;
    let dense = general_stage(cfg, corpora, ws)?;
    let mut rows = Vec::new();
    let mut dense_scores = Vec::new();
    for c in std::iter::once(&corpora.general).chain(&corpora.domains) {
        dense_scores.push(scores(&dense.trainer, None, &c.test, cfg).stage("scoring the general model")?);
    }
    let stem = if label.is_empty() {
        cfg.method.name().to_string()
    } else {
        format!("{}-{label}", cfg.method.name())
    };
    let stem = if cfg.sequential { format!("{stem}-sequential") } else { stem };

    match cfg.method.baseline() {
        None => {
            let extracted = extraction_stage(cfg, corpora, ws)?;
            let general_mask = extracted.inference_mask(GENERAL)?;
            let general_size = general_mask.popcount();
            let mut finals: Vec<(PipelineState, usize)> = Vec::new();
            if cfg.sequential {
                let mut state = extracted.clone();
                let mut sizes = Vec::new();
                for (i, c) in corpora.domains.iter().enumerate() {
                    sizes.push(prune_tune_domain(cfg, &mut state, i, c, ws, &stem).stage(&format!("adapting `{}`", c.name))?);
                }
                ws.stages()?.save(&format!("adapted-{stem}"), &json!({ "config": cfg }), &state)?;
                for s in sizes {
                    finals.push((state.clone(), s));
                }
            } else {
                for (i, c) in corpora.domains.iter().enumerate() {
                    let mut state = extracted.clone();
                    let size = prune_tune_domain(cfg, &mut state, i, c, ws, &stem).stage(&format!("adapting `{}`", c.name))?;
                    ws.stages()?
                        .save(&format!("adapted-{stem}-{}", c.name), &json!({ "config": cfg }), &state)?;
                    finals.push((state, size));
                }
            }
            let general_after = scores(&extracted.trainer, Some(&general_mask), &corpora.general.test, cfg)?;
            for (state, _) in &finals {
                let again = scores(&state.trainer, Some(&state.inference_mask(GENERAL)?), &corpora.general.test, cfg)?;
                if again != general_after {
                    return Err(Error::contract("general-domain output changed during adaptation"));
                }
            }
            rows.push(row(GENERAL, dense_scores[0], general_after, general_size));
            for (i, c) in corpora.domains.iter().enumerate() {
                let (state, size) = &finals[i];
                let mask = state.inference_mask(&c.name)?;
                let s = scores(&state.trainer, Some(&mask), &c.test, cfg)?;
                rows.push(row(&c.name, dense_scores[i + 1], s, *size));
            }
        }
        Some(strategy) => {
            let ctx = StrategyContext {
                reference: Some(dense.trainer.params.clone()),
                fisher: match strategy {
                    Strategy::Ewc { .. } => Some(
                        estimate_fisher(
                            &cfg.model,
                            &dense.trainer.params,
                            &corpora.general.train,
                            cfg.fisher_batches,
                            cfg.train.batch_size,
                            cfg.seed.wrapping_add(3),
                        )
                        .stage("estimating Fisher information")?,
                    ),
                    _ => None,
                },
            };
            let fresh = || -> Result<Trainer> {
                let mut t = dense.trainer.clone();
                if let Strategy::Adapter { bottleneck_dim } = strategy {
                    prepare_adapters(&mut t, &AdapterConfig { bottleneck_dim }, cfg.seed.wrapping_add(4))?;
                }
                Ok(t)
            };
            let tuned_count = |t: &Trainer| -> Result<usize> {
                Ok(match strategy {
                    Strategy::LayerFreeze { top_layers } => layer_freeze_mask(&t.params, &t.model, top_layers)?.popcount(),
                    Strategy::Adapter { .. } => adapter_mask(&t.params)?.popcount(),
                    _ => t.params.total_elements(),
                })
            };
            let mut models: Vec<Trainer> = Vec::new();
            let mut chain = if cfg.sequential { Some(fresh()?) } else { None };
            for (i, c) in corpora.domains.iter().enumerate() {
                let mut t = match chain.take() {
                    Some(t) => t,
                    None => fresh()?,
                };
                let spec = domain_spec(cfg, i);
                let mut curve = Curve::new(cfg, t.adam.step(), &c.dev, None);
                run_strategy(&mut t, strategy, &ctx, &c.train, spec.tune_steps, spec.seed, |tr, s| curve.observe(tr, s))
                    .stage(&format!("{} on `{}`", strategy.name(), c.name))?;
                curve.save(&ws.curves().join(format!("{stem}-{}.csv", c.name)))?;
                t.save(&ws.models().join(format!("{stem}-{}.ckpt", c.name)))?;
                if cfg.sequential {
                    chain = Some(t.clone());
                }
                models.push(t);
            }
            // Sequential runs score every domain with the final model.
            if cfg.sequential {
                if let Some(last) = models.last().cloned() {
                    models.iter_mut().for_each(|m| *m = last.clone());
                }
            }
            let general_after = if models.is_empty() {
                dense_scores[0]
            } else {
                let all: Vec<Scores> = models
                    .iter()
                    .map(|m| scores(m, None, &corpora.general.test, cfg))
                    .collect::<Result<_>>()?;
                Scores {
                    accuracy: all.iter().map(|s| s.accuracy).sum::<f64>() / all.len() as f64,
                    bleu: all.iter().map(|s| s.bleu).sum::<f64>() / all.len() as f64,
                }
            };
            let count = match models.first() {
                Some(m) => tuned_count(m)?,
                None => 0,
            };
            rows.push(row(GENERAL, dense_scores[0], general_after, 0));
            for (i, c) in corpora.domains.iter().enumerate() {
                let s = scores(&models[i], None, &c.test, cfg)?;
                rows.push(row(&c.name, dense_scores[i + 1], s, count));
            }
        }
    }
    let report = MetricReport {
        strategy: cfg.method.name().to_string(),
        seed: cfg.seed,
        label: label.to_string(),
        rows,
    };
    report.validate()?;
    report.save(&ws.reports().join(format!("{stem}.json")))?;
    let txt = ws.reports().join(format!("{stem}.txt"));
    std::fs::write(&txt, report.render()).map_err(|e| Error::io(txt, e))?;
    Ok(report)
}

fn row(domain: &str, general: Scores, adapted: Scores, tuned: usize) -> ReportRow {
    ReportRow {
        domain: domain.to_string(),
        general_score: general.accuracy,
        target_score: adapted.accuracy,
        general_bleu: general.bleu,
        target_bleu: adapted.bleu,
        tuned_param_count: tuned,
    }
}
