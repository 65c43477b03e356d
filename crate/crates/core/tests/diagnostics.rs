use omninft_core::diagnostics::{
    ablate_kv, blocking_invariance, diagnose_conflict, gradcheck_composite, kv_path_params,
    perturbed_policy, profile_gradients, run_gradcheck, surgery_probe, ConflictReport, ConflictRow,
    LossCase,
};
use omninft_core::model::{Direction, ParamPath, Stream};
use omninft_core::objective::NftConfig;
use omninft_core::ModeRegistry;
use omninft_core::{ModelConfig, RunConfig};

fn small() -> ModelConfig {
    ModelConfig {
        blocks_audio: 2,
        blocks_video: 2,
        d_model: 8,
        heads: 2,
        n_audio_tokens: 3,
        n_video_tokens: 4,
        shallow_boundary: 1,
        detach_ratio: 0.3,
        prompt_vocab: 2,
    }
}

#[test]
fn composite_gradients_match_finite_differences() {
    let nft = NftConfig::default();
    let case = LossCase::random(&small(), 11, nft.lambda).unwrap();
    assert!(case.weights.weights.iter().any(|&w| w > 1.0));
    for surgery in [false, true] {
        let report = gradcheck_composite(&case, &nft, surgery).unwrap();
        assert_eq!(report.coordinates, case.policy.param_count());
        assert!(
            report.max_rel_error <= 1e-4,
            "surgery {surgery}: {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}

#[test]
fn surgery_scales_the_isolated_kv_path() {
    let mut cfg = small();
    cfg.blocks_audio = 3;
    cfg.blocks_video = 3;
    cfg.shallow_boundary = 2;
    let policy = perturbed_policy(&cfg, 3, 0.3).unwrap();
    for alpha in [0.1, 0.5, 0.9] {
        let p = surgery_probe(&policy, alpha, 5).unwrap();
        assert!(p.kv_norm_off > 1e-6);
        assert!(
            p.max_deviation <= 1e-10,
            "alpha {alpha}: {}",
            p.max_deviation
        );
        assert_eq!(p.forward_max_abs_diff, 0.0);
        assert!(((p.kv_norm_on / p.kv_norm_off) - (1.0 - alpha)).abs() < 1e-10);
    }
    let p = surgery_probe(&policy, 1.0, 5).unwrap();
    assert_eq!(p.kv_norm_on, 0.0);
    assert!(p.kv_norm_off > 0.0);
}

#[test]
fn surgery_probe_needs_a_shallow_block() {
    let mut cfg = small();
    cfg.shallow_boundary = 0;
    let policy = perturbed_policy(&cfg, 3, 0.3).unwrap();
    assert!(surgery_probe(&policy, 0.5, 0).is_err());
}

#[test]
fn kv_path_excludes_video_self_path() {
    let policy = perturbed_policy(&small(), 0, 0.1).unwrap();
    let names: Vec<_> = kv_path_params(&policy)
        .into_iter()
        .map(|i| policy.layout().params()[i].name.clone())
        .collect();
    assert!(names.contains(&"video.blocks.0.cross.k".to_string()));
    assert!(!names.contains(&"video.blocks.1.cross.k".to_string()));
    assert!(!names
        .iter()
        .any(|n| n.starts_with("video.") && n.contains("self")));
    assert!(names.contains(&"audio.in.weight".to_string()));
}

#[test]
fn full_mask_isolates_the_receiver() {
    let policy = perturbed_policy(&small(), 1, 0.3).unwrap();
    for dir in [Direction::A2V, Direction::V2A] {
        assert!(blocking_invariance(&policy, dir, 9).unwrap(), "{dir:?}");
    }
}

#[test]
fn empty_ablation_range_is_the_baseline() {
    let config = RunConfig {
        model: small(),
        ..RunConfig::default()
    };
    let mut config = config;
    config.rewards.num_prompts = 2;
    let specs = config.prompt_specs().unwrap();
    let policy = perturbed_policy(&config.model, 2, 0.3).unwrap();
    let report = ablate_kv(
        &policy,
        &specs,
        &config.sampler,
        3,
        Direction::V2A,
        &[vec![], vec![1], vec![0, 1]],
    )
    .unwrap();
    assert_eq!(report.rows[0].delta, 0.0);
    assert_eq!(report.rows[0].invariance, None);
    assert_eq!(report.rows[2].invariance, Some(true));
    assert!(report.rows.iter().all(|r| r.mean_sync.is_finite()));
    assert!(ablate_kv(
        &policy,
        &specs,
        &config.sampler,
        3,
        Direction::V2A,
        &[vec![5]]
    )
    .is_err());
}

#[test]
fn conflict_rate_counts_opposite_signs() {
    let row = |a_v, a_a| ConflictRow {
        group: 0,
        prompt: 0,
        rollout: 0,
        a_v,
        a_a,
    };
    let r = ConflictReport::from_rows(vec![
        row(1.0, -1.0),
        row(1.0, 1.0),
        row(-0.5, 0.2),
        row(-1.0, -2.0),
    ])
    .unwrap();
    assert_eq!(r.rate, 0.5);
    assert!(ConflictReport::from_rows(vec![]).is_err());
}

#[test]
fn injection_raises_the_conflict_rate() {
    let mut config = RunConfig {
        model: small(),
        ..RunConfig::default()
    };
    config.train.group_size = 8;
    config.rewards.num_prompts = 2;
    let specs = config.prompt_specs().unwrap();
    let policy = perturbed_policy(&config.model, 4, 0.3).unwrap();
    let low = diagnose_conflict(&policy, &specs, &config, 20, 0.0).unwrap();
    let high = diagnose_conflict(&policy, &specs, &config, 20, 1e3).unwrap();
    assert_eq!(low.rows.len(), 160);
    assert!(high.rate > 0.95, "{}", high.rate);
    assert!(low.rate < high.rate);
}

#[test]
fn anchored_surrogate_agrees_at_the_anchor() {
    let nft = NftConfig::default();
    let case = LossCase::random(&small(), 12, nft.lambda).unwrap();
    let anchor = case.kv_anchor().unwrap();
    assert_eq!(anchor.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
    let plain = case.loss(&case.policy, &nft, true, None).unwrap();
    let anchored = case.loss(&case.policy, &nft, true, Some(&anchor)).unwrap();
    assert!((plain - anchored).abs() <= 1e-12 * plain.abs().max(1.0));
    let on = case.gradients(&nft, true).unwrap();
    let off = case.gradients(&nft, false).unwrap();
    assert!(on.iter().zip(&off).any(|(a, b)| !a.bit_eq(b)));
}

#[test]
fn gradcheck_summary_passes_on_defaults() {
    let summary = run_gradcheck(&RunConfig::default(), 0).unwrap();
    assert_eq!(summary.model.d_model, 8);
    assert_eq!(summary.finite_difference.len(), 2);
    assert_eq!(summary.beta_zero_max_grad, 0.0);
    assert_eq!(summary.probe_full_detach.kv_norm_on, 0.0);
    assert!(summary.passed(), "{summary:?}");
}

#[test]
fn profile_shrinks_the_shallow_kv_path() {
    let mut config = RunConfig {
        model: ModelConfig {
            blocks_audio: 3,
            blocks_video: 3,
            d_model: 8,
            n_audio_tokens: 4,
            n_video_tokens: 6,
            shallow_boundary: 2,
            detach_ratio: 0.25,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    config.train.group_size = 4;
    let registry = ModeRegistry::builtin();
    let policy = perturbed_policy(&config.model, 1, 0.2).unwrap();
    let p = profile_gradients(&config, registry.get("omninft").unwrap(), &policy).unwrap();
    assert_eq!(p.shallow_kv_ratio.len(), 2);
    for (l, ratio) in &p.shallow_kv_ratio {
        assert!((ratio - 0.75).abs() < 1e-9, "block {l}: {ratio}");
    }
    for table in [&p.surgery_off, &p.surgery_on] {
        let sum: f64 = table.entries.iter().map(|e| e.norm * e.norm).sum();
        assert!((sum - table.total * table.total).abs() <= 1e-9 * table.total.powi(2).max(1.0));
    }
    let deep = |t: &omninft_core::model::GradNormTable| {
        t.get(Stream::Video, Some(2), ParamPath::CrossKv).unwrap()
    };
    assert_eq!(deep(&p.surgery_off), deep(&p.surgery_on));
}
