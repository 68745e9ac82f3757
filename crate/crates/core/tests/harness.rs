use std::path::Path;

use prunetune::adaptation::GENERAL;
use prunetune::harness::{
    lowresource_sweep, order_sweep, prepare_data, run_experiment, sparsity_sweep, ExperimentConfig, ExtractionStage,
    GeneralStage, Method, MetricReport, StageStore, SyntheticDomainSpec, TargetDomain, TaskKind,
};
use prunetune::model::{init_params, DecodeOptions, ModelConfig};
use prunetune::pruning::PruneSchedule;
use prunetune::tensor::{AdamConfig, BinaryMask, LrSchedule};
use prunetune::train::{StepSpec, TrainConfig, Trainer};

fn spec(name: &str, task: TaskKind, sizes: (usize, usize, usize)) -> SyntheticDomainSpec {
    SyntheticDomainSpec::new(name, task, 10, (2, 5), sizes)
}

fn target(name: &str, task: TaskKind) -> TargetDomain {
    TargetDomain {
        data: spec(name, task, (60, 12, 12)),
        budget: 0.1,
        warmup_steps: 10,
        tune_steps: 30,
    }
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        model: ModelConfig {
            num_layers: 1,
            model_dim: 16,
            ffn_dim: 32,
            heads: 2,
            vocab_size: 12,
            max_len: 7,
        },
        train: TrainConfig {
            batch_size: 16,
            adam: AdamConfig {
                schedule: LrSchedule::InverseSqrt { peak: 3e-3, warmup: 40 },
                ..Default::default()
            },
            ..Default::default()
        },
        general: GeneralStage {
            data: spec(GENERAL, TaskKind::Copy, (300, 20, 20)),
            steps: 80,
        },
        extraction: ExtractionStage {
            schedule: PruneSchedule::cubic(0.5, 0, 10, 3),
            steps: 40,
        },
        domains: vec![target("rev", TaskKind::Reverse)],
        method: Method::PruneTune,
        sequential: false,
        multi_domain: true,
        freeze_shared: true,
        eval_every: 10,
        decode: DecodeOptions::greedy(),
        fisher_batches: 3,
    }
}

fn file_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn prune_tune_report_has_general_and_target_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(), dir.path()).unwrap();
    assert_eq!(report.strategy, "prune-tune");
    let domains: Vec<&str> = report.rows.iter().map(|r| r.domain.as_str()).collect();
    assert_eq!(domains, [GENERAL, "rev"]);
    assert!(report.row("rev").unwrap().tuned_param_count > 0);

    let saved = MetricReport::load(&dir.path().join("reports/prune-tune.json")).unwrap();
    assert_eq!(saved, report);
    assert!(dir.path().join("reports/prune-tune.txt").exists());
    assert!(dir.path().join("logs/extracted-s0.5000.prune.jsonl").exists());
    assert!(dir.path().join("data/vocab.txt").exists());
    assert!(dir.path().join("data/rev.train.src").exists());
    // 30 steps evaluated every 10 plus the header.
    assert_eq!(file_lines(&dir.path().join("curves/prune-tune-rev.csv")), 4);

    let stages = StageStore::open(&dir.path().join("stages")).unwrap();
    let adapted = stages.load("adapted-prune-tune-rev").unwrap();
    assert_eq!(adapted.history.len(), 1);
    assert!(adapted.registry.domain("rev").is_ok());
}

#[test]
fn reports_reproduce_fresh_and_resumed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run_experiment(&tiny(), a.path()).unwrap();
    let fresh = run_experiment(&tiny(), b.path()).unwrap();
    let resumed = run_experiment(&tiny(), a.path()).unwrap();
    assert_eq!(first, fresh);
    assert_eq!(first, resumed);
    for f in ["data/general.train.src", "data/rev.test.tgt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn changed_settings_invalidate_saved_stages() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny(), dir.path()).unwrap();
    let mut cfg = tiny();
    cfg.general.steps = 60;
    let changed = run_experiment(&cfg, dir.path()).unwrap();
    let other = tempfile::tempdir().unwrap();
    assert_eq!(changed, run_experiment(&cfg, other.path()).unwrap());
}

#[test]
fn sequential_prune_tune_keeps_general_and_reports_every_domain() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.sequential = true;
    cfg.domains = vec![
        target("rev", TaskKind::Reverse),
        target("cip", TaskKind::Cipher { key: 2 }),
        target("shf", TaskKind::Shift { k: 3 }),
    ];
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.rows.len(), 4);
    let stages = StageStore::open(&dir.path().join("stages")).unwrap();
    let state = stages.load("adapted-prune-tune-sequential").unwrap();
    assert_eq!(state.registry.domains().count(), 4);
}

#[test]
fn baselines_run_through_the_harness() {
    for method in [
        Method::Finetune,
        Method::Ewc { lambda: 1.0 },
        Method::Distill { alpha: 0.5 },
        Method::LayerFreeze { top_layers: 1 },
        Method::Adapter { bottleneck_dim: 4 },
    ] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.method = method;
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(report.strategy, method.name());
        assert_eq!(report.rows.len(), 2);
        let ckpt = dir.path().join(format!("models/{}-rev.ckpt", method.name()));
        assert!(Trainer::load(&ckpt).is_ok(), "{}", method.name());
    }
}

#[test]
fn lowresource_sweep_writes_two_rows_per_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let reports = lowresource_sweep(&tiny(), dir.path(), &[0.5, 1.0]).unwrap();
    assert_eq!(reports.len(), 4);
    assert_eq!(file_lines(&dir.path().join("reports/lowresource.csv")), 5);

    let full = tempfile::tempdir().unwrap();
    let direct = run_experiment(&tiny(), full.path()).unwrap();
    let at_one = reports.iter().find(|r| r.label == "fraction1" && r.strategy == "prune-tune").unwrap();
    assert_eq!(at_one.rows, direct.rows);

    assert!(lowresource_sweep(&tiny(), dir.path(), &[0.0]).is_err());
    assert!(lowresource_sweep(&tiny(), dir.path(), &[0.001]).is_err());
}

#[test]
fn sparsity_and_order_sweeps_produce_one_report_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let reports = sparsity_sweep(&tiny(), dir.path(), &[0.3, 0.5]).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports[0].row(GENERAL).unwrap().tuned_param_count > reports[1].row(GENERAL).unwrap().tuned_param_count);

    let mut cfg = tiny();
    cfg.domains = vec![target("rev", TaskKind::Reverse), target("shf", TaskKind::Shift { k: 1 })];
    let orders = order_sweep(&cfg, dir.path()).unwrap();
    assert_eq!(orders.len(), 2);
    assert_eq!(file_lines(&dir.path().join("reports/sweep-order.csv")), 1 + 2 * 3);
}

#[test]
fn configs_round_trip_and_reject_inconsistencies() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let cfg = ExperimentConfig::quick();
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    let mut bad = tiny();
    bad.model.vocab_size = 20;
    assert!(bad.validate().is_err());
    let mut bad = tiny();
    bad.domains.push(target("rev", TaskKind::Sort));
    assert!(bad.validate().is_err());
    let mut bad = tiny();
    bad.sequential = true;
    bad.domains = (0..6).map(|i| target(&format!("d{i}"), TaskKind::Reverse)).collect();
    assert!(bad.validate().is_err());
    assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seed": 1, "unknown": 2}"#).is_err());
    assert_eq!(Method::from_name("ewc").unwrap(), Method::Ewc { lambda: 1.0 });
    assert!(Method::from_name("nope").is_err());

    let corpora = prepare_data(&tiny(), &dir.path().join("data")).unwrap();
    assert_eq!(corpora.domains.len(), 1);
}

#[test]
fn trainer_snapshots_resume_bit_exactly() {
    let cfg = tiny();
    let corpora = prepare_data(&cfg, &tempfile::tempdir().unwrap().path().join("d")).unwrap();
    let mut t = Trainer::new(cfg.model, init_params(&cfg.model, 1).unwrap(), cfg.train).unwrap();
    let all = BinaryMask::ones_like(&t.params);
    t.run(&corpora.general.train, 10, 0, &StepSpec::new(&all), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    t.save(&path).unwrap();
    let mut loaded = Trainer::load(&path).unwrap();
    assert!(loaded.params.bit_eq(&t.params));
    assert_eq!(loaded.adam, t.adam);
    t.run(&corpora.general.train, 5, 1, &StepSpec::new(&all), |_, _| Ok(())).unwrap();
    loaded.run(&corpora.general.train, 5, 1, &StepSpec::new(&all), |_, _| Ok(())).unwrap();
    assert!(loaded.params.bit_eq(&t.params));
}
