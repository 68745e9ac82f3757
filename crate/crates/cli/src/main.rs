use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prunetune::adaptation::{PipelineState, GENERAL};
use prunetune::harness::{
    evaluate, extraction_stage, general_stage, lowresource_sweep, order_sweep, prepare_data,
    run_experiment, sparsity_sweep, Corpora, ExperimentConfig, Method, MetricReport, StageStore, Workspace,
};
use prunetune::masks::load_masks;
use prunetune::model::{load_model, DecodeOptions};
use serde_json::json;

/// Domain adaptation of small seq2seq transformers by gradual pruning and
/// per-domain lottery sub-networks.
#[derive(Debug, Parser)]
#[command(name = "prunetune", version)]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the built-in desk-scale setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for data, checkpoints, masks, logs and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic corpora and vocabulary.
    GenData,
    /// Train the dense general model.
    TrainGeneral,
    /// Prune the general model to its informative sub-network.
    ExtractSubnet {
        /// Final sparsity, overriding the configuration.
        #[arg(long)]
        sparsity: Option<f64>,
    },
    /// Prune-Tune every target domain.
    Adapt {
        /// Adapt domains one after another in configuration order.
        #[arg(long)]
        sequential: bool,
    },
    /// Run a baseline adaptation strategy.
    Baseline(BaselineArgs),
    /// Score a saved model on one domain's test split.
    Evaluate {
        #[arg(long)]
        domain: String,
        /// Saved pipeline stage to load (see `inspect-masks --list`).
        #[arg(long, conflicts_with = "checkpoint")]
        stage: Option<String>,
        /// A model checkpoint evaluated without masks.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Beam width; 1 is greedy.
        #[arg(long)]
        beam: Option<usize>,
        /// Length-penalty exponent for beam search.
        #[arg(long)]
        length_penalty: Option<f64>,
    },
    /// Print the ownership table of a masks file or saved stage.
    InspectMasks {
        #[arg(long, conflicts_with = "stage")]
        masks: Option<PathBuf>,
        #[arg(long)]
        stage: Option<String>,
        /// List saved stages instead.
        #[arg(long)]
        list: bool,
    },
    /// Sweep one experimental factor.
    Sweep {
        kind: SweepKind,
        /// Comma-separated sparsities or fractions.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Print every saved report.
    Report,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepKind {
    Sparsity,
    Fraction,
    Order,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyName {
    Finetune,
    Ewc,
    Distill,
    LayerFreeze,
    Adapter,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    strategy: StrategyName,
    /// EWC strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Distillation weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Trainable top layers per side for layer freezing.
    #[arg(long)]
    top_layers: Option<usize>,
    /// Adapter bottleneck width.
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    sequential: bool,
}

impl BaselineArgs {
    fn method(&self) -> Result<Method> {
        let name = match self.strategy {
            StrategyName::Finetune => "finetune",
            StrategyName::Ewc => "ewc",
            StrategyName::Distill => "distill",
            StrategyName::LayerFreeze => "layer-freeze",
            StrategyName::Adapter => "adapter",
        };
        let mut m = Method::from_name(name)?;
        match &mut m {
            Method::Ewc { lambda } => *lambda = self.lambda.unwrap_or(*lambda),
            Method::Distill { alpha } => *alpha = self.alpha.unwrap_or(*alpha),
            Method::LayerFreeze { top_layers } => *top_layers = self.top_layers.unwrap_or(*top_layers),
            Method::Adapter { bottleneck_dim } => *bottleneck_dim = self.bottleneck.unwrap_or(*bottleneck_dim),
            _ => {}
        }
        let unused = [
            (self.lambda.is_some(), "--lambda", matches!(m, Method::Ewc { .. })),
            (self.alpha.is_some(), "--alpha", matches!(m, Method::Distill { .. })),
            (self.top_layers.is_some(), "--top-layers", matches!(m, Method::LayerFreeze { .. })),
            (self.bottleneck.is_some(), "--bottleneck", matches!(m, Method::Adapter { .. })),
        ];
        if let Some((_, flag, _)) = unused.iter().find(|(given, _, applies)| *given && !applies) {
            bail!("{flag} does not apply to {}", m.name());
        }
        Ok(m)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::quick(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Corpora are regenerated deterministically from the configuration and
/// rewritten to the data directory.
fn corpora(cfg: &ExperimentConfig, ws: &Workspace) -> Result<Corpora> {
    Ok(prepare_data(cfg, &ws.data())?)
}

fn state_summary(name: &str, state: &PipelineState) -> serde_json::Value {
    let c = state.registry.counts();
    json!({
        "stage": name,
        "step": state.trainer.adam.step(),
        "domains": state.registry.domains().map(|d| d.name.clone()).collect::<Vec<_>>(),
        "free": c.free,
        "frozen": c.frozen,
        "total": c.total,
    })
}

/// Most specific saved stage that has `domain` registered.
fn default_stage(store: &StageStore, cfg: &ExperimentConfig, domain: &str) -> Result<String> {
    let extracted = format!("extracted-s{:.4}", cfg.extraction.schedule.final_sparsity);
    let candidates = [
        format!("adapted-prune-tune-{domain}"),
        "adapted-prune-tune-sequential".to_string(),
        extracted,
        "general".to_string(),
    ];
    for c in candidates {
        if store.contains(&c)? && (c == "general" || domain == GENERAL || store.load(&c)?.registry.domain(domain).is_ok())
        {
            return Ok(c);
        }
    }
    bail!("no saved stage covers domain `{domain}`; run `adapt` first or pass --stage/--checkpoint")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(&cli.out_dir)?;
    match &cli.command {
        Command::Config => print_json(&serde_json::to_value(&cfg)?)?,
        Command::GenData => {
            let c = prepare_data(&cfg, &ws.data())?;
            let sizes: Vec<_> = std::iter::once(&c.general)
                .chain(&c.domains)
                .map(|d| json!({"domain": d.name, "train": d.train.len(), "dev": d.dev.len(), "test": d.test.len()}))
                .collect();
            print_json(&json!({ "data_dir": ws.data(), "domains": sizes }))?;
        }
        Command::TrainGeneral => {
            let c = corpora(&cfg, &ws)?;
            let state = general_stage(&cfg, &c, &ws)?;
            let s = evaluate(state.model(), state.params(), None, &c.general.test, &cfg.decode)?;
            let mut v = state_summary("general", &state);
            v["general_test"] = serde_json::to_value(s)?;
            print_json(&v)?;
        }
        Command::ExtractSubnet { sparsity } => {
            let mut cfg = cfg.clone();
            if let Some(s) = sparsity {
                cfg.extraction.schedule.final_sparsity = *s;
                cfg.extraction.schedule.initial_sparsity = cfg.extraction.schedule.initial_sparsity.min(*s);
                cfg.validate()?;
            }
            let c = corpora(&cfg, &ws)?;
            let state = extraction_stage(&cfg, &c, &ws)?;
            let mask = state.inference_mask(GENERAL)?;
            let s = evaluate(state.model(), state.params(), Some(&mask), &c.general.test, &cfg.decode)?;
            let name = format!("extracted-s{:.4}", cfg.extraction.schedule.final_sparsity);
            let mut v = state_summary(&name, &state);
            v["general_test"] = serde_json::to_value(s)?;
            print_json(&v)?;
        }
        Command::Adapt { sequential } => {
            let mut cfg = cfg.clone();
            cfg.method = Method::PruneTune;
            cfg.sequential |= *sequential;
            let report = run_experiment(&cfg, &cli.out_dir)?;
            print!("{}", report.render());
        }
        Command::Baseline(args) => {
            let mut cfg = cfg.clone();
            cfg.method = args.method()?;
            cfg.sequential |= args.sequential;
            let report = run_experiment(&cfg, &cli.out_dir)?;
            print!("{}", report.render());
        }
        Command::Evaluate {
            domain,
            stage,
            checkpoint,
            beam,
            length_penalty,
        } => {
            let c = corpora(&cfg, &ws)?;
            let corpus = c
                .domains
                .iter()
                .chain(std::iter::once(&c.general))
                .find(|d| &d.name == domain)
                .with_context(|| format!("domain `{domain}` is not in the configuration"))?;
            let mut decode = cfg.decode;
            if let Some(b) = beam {
                decode = DecodeOptions {
                    beam_width: *b,
                    ..decode
                };
            }
            if let Some(lp) = length_penalty {
                decode.length_penalty = *lp;
            }
            let (source, scores) = match checkpoint {
                Some(p) => {
                    let (model, params) = load_model(p)?;
                    (p.display().to_string(), evaluate(&model, &params, None, &corpus.test, &decode)?)
                }
                None => {
                    let store = ws.stages()?;
                    let name = match stage {
                        Some(s) => s.clone(),
                        None => default_stage(&store, &cfg, domain)?,
                    };
                    let state = store.load(&name)?;
                    let mask = match state.registry.domain(domain) {
                        Ok(_) => Some(state.inference_mask(domain)?),
                        Err(_) if name == "general" => None,
                        Err(e) => return Err(e.into()),
                    };
                    (name, evaluate(state.model(), state.params(), mask.as_ref(), &corpus.test, &decode)?)
                }
            };
            print_json(&json!({
                "domain": domain,
                "source": source,
                "accuracy": scores.accuracy,
                "bleu": scores.bleu,
                "beam_width": decode.beam_width,
            }))?;
        }
        Command::InspectMasks { masks, stage, list } => {
            let store = ws.stages()?;
            if *list {
                for (name, _) in store.manifest()? {
                    println!("{name}");
                }
                return Ok(());
            }
            let path = match (masks, stage) {
                (Some(p), _) => p.clone(),
                (None, Some(s)) => store.masks_path(s),
                (None, None) => latest_masks(store.dir())?,
            };
            let reg = load_masks(&path).with_context(|| format!("reading {}", path.display()))?;
            println!("{}", path.display());
            print!("{}", reg.render_table());
        }
        Command::Sweep { kind, values } => {
            let reports = match kind {
                SweepKind::Sparsity => {
                    let v = if values.is_empty() { vec![0.1, 0.3, 0.5, 0.7] } else { values.clone() };
                    sparsity_sweep(&cfg, &cli.out_dir, &v)?
                }
                SweepKind::Fraction => {
                    let v = if values.is_empty() {
                        vec![0.01, 0.03, 0.1, 0.3, 1.0]
                    } else {
                        values.clone()
                    };
                    lowresource_sweep(&cfg, &cli.out_dir, &v)?
                }
                SweepKind::Order => {
                    if !values.is_empty() {
                        bail!("the order sweep takes no --values");
                    }
                    order_sweep(&cfg, &cli.out_dir)?
                }
            };
            for r in reports {
                println!("{}", r.render());
            }
        }
        Command::Report => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(ws.reports())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no reports in {}", ws.reports().display());
            }
            for p in paths {
                let r = MetricReport::load(&p)?;
                println!("{}", r.render());
            }
        }
    }
    Ok(())
}

fn latest_masks(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "masks") {
            let t = std::fs::metadata(&p)?.modified()?;
            if best.as_ref().is_none_or(|(bt, _)| t > *bt) {
                best = Some((t, p));
            }
        }
    }
    best.map(|(_, p)| p)
        .with_context(|| format!("no masks saved under {}", dir.display()))
}

fn diagnostic(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<prunetune::Error>())
        .map_or("cli", |e| e.kind());
    json!({
        "error": kind,
        "message": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}
