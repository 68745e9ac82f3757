use prunetune::adaptation::{
    extract_general_subnet, generate_lottery_subnet, lottery_quota, sequential_adapt, train_general, tune_domain,
    DomainSpec, PipelineState, RegistryMode, GENERAL,
};
use prunetune::baselines::{
    adapter_tune, estimate_fisher, ewc_finetune, full_finetune, layer_freeze_mask, layer_freeze_tune, prepare_adapters,
    run_strategy, DistillState, EwcState, Strategy, StrategyContext,
};
use prunetune::harness::{gen_synthetic_domain, DomainCorpus, SyntheticDomainSpec, TaskKind};
use prunetune::model::{init_params, AdapterConfig, ModelConfig, ParamGroup};
use prunetune::pruning::{gradual_prune, prune_count, read_prune_log, write_prune_log, PruneRun, PruneSchedule};
use prunetune::tensor::{AdamConfig, BinaryMask, LrSchedule, ParamStore};
use prunetune::train::{batch_objective, StepSpec, TrainConfig, Trainer};
use prunetune::Error;

fn model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        ffn_dim: 32,
        heads: 2,
        vocab_size: 14,
        max_len: 8,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        adam: AdamConfig {
            schedule: LrSchedule::InverseSqrt { peak: 3e-3, warmup: 50 },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn corpus(task: TaskKind, seed: u64) -> DomainCorpus {
    let spec = SyntheticDomainSpec::new("d", task, 12, (2, 6), (120, 10, 10));
    gen_synthetic_domain(&spec, seed).unwrap()
}

fn trainer(seed: u64) -> Trainer {
    Trainer::new(model(), init_params(&model(), seed).unwrap(), train_config()).unwrap()
}

fn extracted(sparsity: f64) -> (PipelineState, DomainCorpus) {
    let general = corpus(TaskKind::Copy, 1);
    let mut state =
        train_general(model(), train_config(), &general.train, 60, 0, RegistryMode::multi(), |_, _| Ok(())).unwrap();
    extract_general_subnet(&mut state, &PruneSchedule::cubic(sparsity, 0, 10, 3), &general.train, 40, 2).unwrap();
    (state, general)
}

fn values_under(params: &ParamStore, mask: &BinaryMask) -> Vec<f64> {
    params
        .iter()
        .flat_map(|(n, t)| {
            let bits = mask.bits(n).unwrap();
            t.data().iter().zip(bits).filter(|(_, &b)| b).map(|(&v, _)| v).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn gradual_prune_reaches_target_monotonically() {
    let data = corpus(TaskKind::Copy, 3);
    let mut tr = trainer(0);
    let eligible = BinaryMask::ones_like(&tr.params);
    let schedule = PruneSchedule::cubic(0.7, 0, 5, 4);
    let run = PruneRun {
        corpus: &data.train,
        steps: 30,
        seed: 1,
        eligible: &eligible,
        update: &eligible,
        forward: None,
    };
    let out = gradual_prune(&mut tr, &schedule, &run).unwrap();
    assert_eq!(out.events.len(), 5);
    let overall: Vec<f64> = out.events.iter().map(|e| e.overall_sparsity()).collect();
    assert!(overall.windows(2).all(|w| w[0] <= w[1]), "{overall:?}");
    for (name, t) in tr.params.iter() {
        let kept = out.keep.bits(name).unwrap();
        let pruned = kept.iter().filter(|&&k| !k).count();
        assert_eq!(pruned, prune_count(0.7, t.len()), "{name}");
        assert!(t.data().iter().zip(kept).all(|(&v, &k)| k || v == 0.0), "{name} has a nonzero pruned value");
    }
}

#[test]
fn zero_final_sparsity_is_plain_training() {
    let data = corpus(TaskKind::Reverse, 4);
    let all = BinaryMask::ones_like(&trainer(0).params);
    let mut pruned = trainer(0);
    let schedule = PruneSchedule {
        initial_sparsity: 0.0,
        ..PruneSchedule::cubic(0.0, 0, 5, 2)
    };
    let run = PruneRun {
        corpus: &data.train,
        steps: 15,
        seed: 7,
        eligible: &all,
        update: &all,
        forward: None,
    };
    let out = gradual_prune(&mut pruned, &schedule, &run).unwrap();
    assert!(out.events.is_empty());
    let mut plain = trainer(0);
    plain.run(&data.train, 15, 7, &StepSpec::new(&all), |_, _| Ok(())).unwrap();
    assert!(plain.params.bit_eq(&pruned.params));
}

#[test]
fn one_shot_prunes_once_at_start() {
    let data = corpus(TaskKind::Copy, 5);
    let mut tr = trainer(1);
    let all = BinaryMask::ones_like(&tr.params);
    let run = PruneRun {
        corpus: &data.train,
        steps: 10,
        seed: 0,
        eligible: &all,
        update: &all,
        forward: None,
    };
    let out = gradual_prune(&mut tr, &PruneSchedule::one_shot(0.5), &run).unwrap();
    assert_eq!(out.events.len(), 1);
    assert_eq!(out.events[0].local_step, 0);
    assert_eq!(out.keep.popcount(), all.popcount() - tr.params.iter().map(|(_, t)| prune_count(0.5, t.len())).sum::<usize>());
}

#[test]
fn short_run_forces_final_prune_and_log_round_trips() {
    let data = corpus(TaskKind::Copy, 6);
    let mut tr = trainer(2);
    let all = BinaryMask::ones_like(&tr.params);
    let run = PruneRun {
        corpus: &data.train,
        steps: 12,
        seed: 0,
        eligible: &all,
        update: &all,
        forward: None,
    };
    let out = gradual_prune(&mut tr, &PruneSchedule::cubic(0.6, 0, 10, 5), &run).unwrap();
    let last = out.events.last().unwrap();
    assert_eq!(last.local_step, 12);
    assert_eq!(last.target_sparsity, 0.6);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prune.jsonl");
    write_prune_log(&path, &out.events).unwrap();
    assert_eq!(read_prune_log(&path).unwrap(), out.events);
}

#[test]
fn ineligible_elements_are_never_pruned() {
    let data = corpus(TaskKind::Copy, 8);
    let mut tr = trainer(3);
    let all = BinaryMask::ones_like(&tr.params);
    let eligible = BinaryMask::by_tensor(&tr.params, |_, tag| tag.unwrap().group != ParamGroup::LayerNorm);
    let run = PruneRun {
        corpus: &data.train,
        steps: 10,
        seed: 0,
        eligible: &eligible,
        update: &all,
        forward: None,
    };
    let out = gradual_prune(&mut tr, &PruneSchedule::cubic(0.9, 0, 3, 3), &run).unwrap();
    for (name, bits) in eligible.iter() {
        if !bits[0] {
            assert!(out.keep.bits(name).unwrap().iter().all(|&k| !k));
            assert!(tr.params.get(name).unwrap().data().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn lottery_lives_in_free_space_and_zeroes_the_rest() {
    let (mut state, _) = extracted(0.5);
    let target = corpus(TaskKind::Shift { k: 2 }, 9);
    let free = state.registry.free_mask();
    let general = state.inference_mask(GENERAL).unwrap();
    let before = values_under(state.params(), &general);
    let spec = DomainSpec::new("shift", 0.2, 10, 10, 3);
    let lottery = generate_lottery_subnet(&mut state, &spec, &target.train).unwrap();
    assert!(lottery.is_subset_of(&free).unwrap());
    for (name, q) in lottery_quota(&state.registry, 0.2).unwrap() {
        assert_eq!(lottery.popcount_of(&name), q, "{name}");
    }
    let unused = free.and_not(&lottery).unwrap();
    assert!(values_under(state.params(), &unused).iter().all(|&v| v == 0.0));
    assert_eq!(values_under(state.params(), &general), before);

    let rec = tune_domain(&mut state, &spec, &lottery, &target.train, |_, _| Ok(())).unwrap();
    assert_eq!(rec.lottery_size, lottery.popcount());
    assert_eq!(values_under(state.params(), &general), before);
    assert!(values_under(state.params(), &unused).iter().all(|&v| v == 0.0));
}

#[test]
fn over_budget_and_bad_ancestry_are_rejected() {
    let (mut state, _) = extracted(0.5);
    let target = corpus(TaskKind::Reverse, 10);
    let spec = DomainSpec::new("too-big", 0.6, 1, 1, 0);
    assert!(matches!(generate_lottery_subnet(&mut state, &spec, &target.train), Err(Error::Capacity { .. })));

    let specs = [
        (DomainSpec::new("a", 0.3, 1, 1, 0), target.train.as_slice()),
        (DomainSpec::new("b", 0.3, 1, 1, 0), target.train.as_slice()),
    ];
    assert!(matches!(sequential_adapt(&mut state, &specs, |_, _| Ok(())), Err(Error::Capacity { .. })));
    assert!(state.history.is_empty());

    let mut orphan = DomainSpec::new("orphan", 0.1, 1, 1, 0);
    orphan.ancestors = vec!["missing".into()];
    assert!(matches!(generate_lottery_subnet(&mut state, &orphan, &target.train), Err(Error::UnknownDomain(_))));

    let ok = DomainSpec::new("one", 0.1, 2, 2, 0);
    let lottery = generate_lottery_subnet(&mut state, &ok, &target.train).unwrap();
    tune_domain(&mut state, &ok, &lottery, &target.train, |_, _| Ok(())).unwrap();
    assert!(generate_lottery_subnet(&mut state, &ok, &target.train).is_err());
}

#[test]
fn layer_freeze_leaves_lower_blocks_untouched() {
    let data = corpus(TaskKind::Reverse, 11);
    let mut tr = trainer(4);
    let mask = layer_freeze_mask(&tr.params, &tr.model, 1).unwrap();
    let before = tr.params.checksums();
    layer_freeze_tune(&mut tr, &data.train, 10, 0, 1).unwrap();
    let after = tr.params.checksums();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        let trained = mask.bits(name).unwrap()[0];
        assert_eq!(a != b, trained, "{name}");
    }
    assert_eq!(mask.popcount_of("embedding"), 0);
}

#[test]
fn strong_ewc_pins_parameters() {
    let general = corpus(TaskKind::Copy, 12);
    let target = corpus(TaskKind::Shift { k: 4 }, 13);
    let mut base = trainer(5);
    full_finetune(&mut base, &general.train, 20, 0).unwrap();
    let fisher = estimate_fisher(&base.model, &base.params, &general.train, 4, 8, 1).unwrap();
    assert!(fisher.iter().all(|(_, t)| t.data().iter().all(|&v| v >= 0.0)));
    let distance = |p: &ParamStore| -> f64 {
        let ewc = EwcState::new(base.params.clone(), fisher.clone(), 1.0).unwrap();
        ewc.penalty(p).unwrap()
    };
    let mut plain = base.clone();
    full_finetune(&mut plain, &target.train, 20, 3).unwrap();
    let mut pinned = base.clone();
    let ewc = EwcState::new(base.params.clone(), fisher.clone(), 1e6).unwrap();
    ewc_finetune(&mut pinned, &ewc, &target.train, 20, 3).unwrap();
    assert!(distance(&pinned.params) < 0.1 * distance(&plain.params));
    assert!(EwcState::new(base.params.clone(), fisher, -1.0).is_err());
}

#[test]
fn pure_distillation_from_itself_is_stationary() {
    let data = corpus(TaskKind::Copy, 14);
    let tr = trainer(6);
    let d = DistillState::new(tr.params.clone(), 1.0).unwrap();
    let all = BinaryMask::ones_like(&tr.params);
    let (loss, _, grads) =
        batch_objective(&tr.model, &tr.params, &data.train[..8], &StepSpec::new(&all).with_distill(&d), 0.0).unwrap();
    assert!(loss.abs() < 1e-12, "{loss}");
    let worst = grads.iter().flat_map(|(_, t)| t.data().to_vec()).fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(worst < 1e-12, "{worst}");
    assert!(DistillState::new(tr.params.clone(), 1.5).is_err());
}

#[test]
fn adapter_tuning_needs_adapters_and_only_moves_them() {
    let data = corpus(TaskKind::Reverse, 15);
    let mut tr = trainer(7);
    let err = run_strategy(
        &mut tr,
        Strategy::Adapter { bottleneck_dim: 4 },
        &StrategyContext::default(),
        &data.train,
        1,
        0,
        |_, _| Ok(()),
    );
    assert!(err.is_err());

    let cfg = AdapterConfig { bottleneck_dim: 4 };
    prepare_adapters(&mut tr, &cfg, 1).unwrap();
    let before = tr.params.clone();
    adapter_tune(&mut tr, &cfg, &data.train, 5, 0).unwrap();
    for ((name, a, tag), (_, b)) in before.iter_tagged().zip(tr.params.iter()) {
        let moved = a.data() != b.data();
        assert_eq!(moved, tag.unwrap().group == ParamGroup::Adapter, "{name}");
    }
}

#[test]
fn strategies_that_need_a_reference_say_so() {
    let data = corpus(TaskKind::Copy, 16);
    let mut tr = trainer(8);
    for s in [Strategy::Ewc { lambda: 1.0 }, Strategy::Distill { alpha: 0.5 }] {
        assert!(run_strategy(&mut tr, s, &StrategyContext::default(), &data.train, 1, 0, |_, _| Ok(())).is_err());
    }
}

