//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test fails
//! if any criterion does.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use omninft_autodiff::Graph;
use omninft_core::diagnostics::{
    blocking_invariance, perturbed_policy, run_gradcheck, surgery_probe, LossCase,
};
use omninft_core::model::{BlockMask, Direction, ForwardOptions, SurgeryConfig};
use omninft_core::objective::{
    group_advantages, implicit_policies, optimality_probability, route_advantages, NftConfig,
    RegionWeights,
};
use omninft_core::sampling::LatentPair;
use omninft_core::seed::{gaussian, rng};
use omninft_core::trainer::{iteration_prompts, sampling_stage, train, IterationMetrics};
use omninft_core::{ModeRegistry, ModelConfig, RunConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Iterations averaged at each end of a run when comparing rewards.
const WINDOW: usize = 20;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Injection strength for the routing-under-conflict comparison.
const CONFLICT_EPSILON: f64 = 0.05;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

fn toy_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::load(&toy_config_path()).expect("toy config");
    c.train.seed = seed;
    c.sampler.seed = seed;
    c
}

fn miniature() -> ModelConfig {
    ModelConfig {
        blocks_audio: 2,
        blocks_video: 2,
        d_model: 8,
        heads: 2,
        n_audio_tokens: 3,
        n_video_tokens: 4,
        shallow_boundary: 1,
        detach_ratio: 0.1,
        prompt_vocab: 2,
    }
}

fn window_means(m: &[IterationMetrics], range: std::ops::Range<usize>) -> [f64; 3] {
    let n = range.len() as f64;
    let mut out = [0.0; 3];
    for r in &m[range] {
        out[0] += r.reward_video.mean / n;
        out[1] += r.reward_audio.mean / n;
        out[2] += r.reward_sync.mean / n;
    }
    out
}

fn run(config: &RunConfig, mode: &str) -> Vec<IterationMetrics> {
    let registry = ModeRegistry::builtin();
    train(config, registry.get(mode).unwrap(), |_| Ok(()))
        .unwrap()
        .metrics
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = RunConfig {
        model: miniature(),
        ..RunConfig::default()
    };
    let s = run_gradcheck(&config, 0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let m = &s.model;
    ensure(
        (
            m.blocks_audio,
            m.blocks_video,
            m.d_model,
            m.n_video_tokens,
            m.n_audio_tokens,
        ) == (2, 2, 8, 4, 3),
        format!("unexpected check model {m:?}"),
    )?;
    let mut errs = Vec::new();
    for r in &s.finite_difference {
        ensure(
            r.max_rel_error <= 1e-4,
            format!("surgery {}: rel err {:.3e}", r.surgery, r.max_rel_error),
        )?;
        errs.push(format!(
            "{}={:.2e}",
            if r.surgery { "on" } else { "off" },
            r.max_rel_error
        ));
    }
    ensure(
        s.finite_difference.len() == 2,
        "expected surgery off and on",
    )?;
    ensure(
        elapsed < Duration::from_secs(60),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "max rel err {} in {:.1}s",
        errs.join(" "),
        elapsed.as_secs_f64()
    ))
}

fn surgery_contract() -> Outcome {
    let mut cfg = miniature();
    cfg.blocks_audio = 3;
    cfg.blocks_video = 3;
    cfg.shallow_boundary = 2;
    let policy = perturbed_policy(&cfg, 5, 0.3).map_err(|e| e.to_string())?;
    let x = LatentPair::prior(&cfg, 8, 9);
    let off = ForwardOptions::default();
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.25, 0.5, 0.9] {
        let on = ForwardOptions {
            surgery: SurgeryConfig {
                enabled: true,
                shallow_boundary: cfg.shallow_boundary,
                alpha_s: alpha,
            },
            ..ForwardOptions::default()
        };
        let (a0, v0, _) = policy.velocity(&x.audio, &x.video, 0.4, 1, &off).unwrap();
        let (a1, v1, _) = policy.velocity(&x.audio, &x.video, 0.4, 1, &on).unwrap();
        ensure(
            a0.bit_eq(&a1) && v0.bit_eq(&v1),
            format!("forward differs at alpha {alpha}"),
        )?;
        let p = surgery_probe(&policy, alpha, 3).map_err(|e| e.to_string())?;
        ensure(p.kv_norm_off > 0.0, "probe KV path has no gradient")?;
        ensure(
            p.max_deviation <= 1e-10,
            format!("alpha {alpha}: deviation {:.3e}", p.max_deviation),
        )?;
        worst = worst.max(p.max_deviation);
    }
    let full = surgery_probe(&policy, 1.0, 3).map_err(|e| e.to_string())?;
    ensure(
        full.kv_norm_on == 0.0,
        format!("alpha 1 KV gradient {:e}", full.kv_norm_on),
    )?;
    Ok(format!(
        "forward bit-identical; scaling deviation {worst:.1e}; alpha=1 gives 0"
    ))
}

fn objective_identities() -> Outcome {
    let mut g = Graph::new();
    let mut r = rng(1);
    let old = gaussian(&[5, 4], &mut r);
    let cur = gaussian(&[5, 4], &mut r);
    for beta in [0.0, 0.1, 0.5, 1.7] {
        let o = g.constant(old.clone());
        let t = g.param(cur.clone());
        let (p, n) = implicit_policies(&mut g, o, t, beta).map_err(|e| e.to_string())?;
        for ((a, b), v) in g
            .value(p)
            .data()
            .iter()
            .zip(g.value(n).data())
            .zip(old.data())
        {
            ensure(
                (a + b - 2.0 * v).abs() <= 1e-12 * (1.0 + v.abs()),
                format!("v+ + v- != 2 v_old at beta {beta}"),
            )?;
        }
    }
    let nft = NftConfig {
        beta: 0.0,
        ..NftConfig::default()
    };
    let case = LossCase::random(&miniature(), 4, nft.lambda).map_err(|e| e.to_string())?;
    for surgery in [false, true] {
        let grads = case.gradients(&nft, surgery).map_err(|e| e.to_string())?;
        ensure(
            grads.iter().all(|g| g.data().iter().all(|&x| x == 0.0)),
            "beta = 0 left a nonzero gradient",
        )?;
    }
    ensure(optimality_probability(0.0, 1.0) == 0.5, "r(0) != 0.5")?;
    ensure(
        optimality_probability(1.0, 1.0) == 1.0 && optimality_probability(-1.0, 1.0) == 0.0,
        "r(+-1)",
    )?;
    let a = group_advantages(&[1.0, 2.0, 3.0, 4.0], 1e-8);
    let expected = [-1.3416, -0.4472, 0.4472, 1.3416];
    ensure(
        a.iter().zip(expected).all(|(x, y)| (x - y).abs() <= 1e-4),
        format!("group advantages {a:?}"),
    )?;
    Ok("v+ + v- = 2 v_old; beta=0 zero grad; r endpoints; advantages {1,2,3,4}".into())
}

fn routing() -> Outcome {
    let mut r = rng(2);
    let draw = |r: &mut _| gaussian(&[16], r).data().to_vec();
    let (av, aa, aav) = (draw(&mut r), draw(&mut r), draw(&mut r));
    let (v, a) = route_advantages(&av, &aa, &aav).map_err(|e| e.to_string())?;
    for k in 0..16 {
        ensure(
            v[k] == av[k] + aav[k] && a[k] == aa[k] + aav[k],
            "routed sums are not exact",
        )?;
    }
    let (v, a) = route_advantages(&[-0.4], &[0.3], &[0.0]).map_err(|e| e.to_string())?;
    ensure(
        (v[0], a[0]) == (-0.4, 0.3),
        format!("separate example gave ({}, {})", v[0], a[0]),
    )?;
    let mut config = toy_config(0);
    config.rewards.conflict_epsilon = 0.1;
    config.train.prompts_per_iteration = 2;
    config.rewards.num_prompts = 2;
    let specs = config.prompt_specs().map_err(|e| e.to_string())?;
    let policy = perturbed_policy(&config.model, 1, 0.2).map_err(|e| e.to_string())?;
    let registry = ModeRegistry::builtin();
    let prompts = iteration_prompts(&specs, 2, 0);
    let shared = sampling_stage(
        &policy,
        &prompts,
        &config,
        registry.get("shared-advantage").unwrap(),
        0,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        shared.buffer.iter().all(|e| e.r_v == e.r_a),
        "shared mode r_v != r_a",
    )?;
    Ok(format!(
        "exact sums; (-0.4, 0.3); shared r_v == r_a on {} entries",
        shared.buffer.len()
    ))
}

fn region_weights() -> Outcome {
    let mut r = rng(3);
    for lambda in [0.5, 1.5, 3.0] {
        let scores = gaussian(&[12], &mut r).data().to_vec();
        let w = RegionWeights::from_scores(&scores, lambda).weights;
        ensure(
            w.iter().all(|&x| (1.0..=1.0 + lambda).contains(&x)),
            "weight out of bounds",
        )?;
        ensure(w.contains(&1.0), "lower bound not attained")?;
        ensure(
            w.iter().any(|&x| (x - (1.0 + lambda)).abs() < 1e-12),
            "upper bound not attained",
        )?;
    }
    ensure(
        RegionWeights::from_scores(&[0.1, 0.7, 0.3], 0.0).weights == vec![1.0; 3],
        "lambda 0",
    )?;
    ensure(
        RegionWeights::from_scores(&[0.4; 5], 1.5).weights == vec![1.0; 5],
        "degenerate spread",
    )?;
    let w = RegionWeights::from_scores(&[0.0, 0.5, 1.0], 1.5).weights;
    ensure(w == vec![1.0, 1.75, 2.5], format!("example gave {w:?}"))?;
    ensure(NftConfig::default().lambda == 1.5, "default lambda")?;
    Ok("bounds attained; lambda=0 and flat scores give 1; (1, 1.75, 2.5)".into())
}

fn blocking_invariant() -> Outcome {
    let cfg = miniature();
    let policy = perturbed_policy(&cfg, 6, 0.3).map_err(|e| e.to_string())?;
    let x = LatentPair::prior(&cfg, 1, 2);
    let y = LatentPair::prior(&cfg, 3, 4);
    let v2a = ForwardOptions {
        mask: BlockMask::all(Direction::V2A, &cfg),
        ..ForwardOptions::default()
    };
    let (a0, _, _) = policy.velocity(&x.audio, &x.video, 0.5, 0, &v2a).unwrap();
    let (a1, _, _) = policy.velocity(&x.audio, &y.video, 0.5, 0, &v2a).unwrap();
    ensure(
        a0.bit_eq(&a1),
        "audio output moved with video input under full V2A mask",
    )?;
    let a2v = ForwardOptions {
        mask: BlockMask::all(Direction::A2V, &cfg),
        ..ForwardOptions::default()
    };
    let (_, v0, _) = policy.velocity(&x.audio, &x.video, 0.5, 0, &a2v).unwrap();
    let (_, v1, _) = policy.velocity(&y.audio, &x.video, 0.5, 0, &a2v).unwrap();
    ensure(
        v0.bit_eq(&v1),
        "video output moved with audio input under full A2V mask",
    )?;
    for dir in [Direction::V2A, Direction::A2V] {
        ensure(
            blocking_invariance(&policy, dir, 11).unwrap(),
            format!("{dir:?} invariance probe"),
        )?;
    }
    Ok("bitwise invariant in both directions".into())
}

fn directional_training() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let m = run(&toy_config(seed), "omninft");
        let first = window_means(&m, 0..WINDOW);
        let last = window_means(&m, m.len() - WINDOW..m.len());
        let improved = (0..3).all(|i| last[i] > first[i]);
        wins += improved as usize;
        detail.push(if improved { "+" } else { "-" });
    }
    let elapsed = start.elapsed();
    ensure(
        wins >= 4,
        format!("improved on {wins}/5 seeds [{}]", detail.join("")),
    )?;
    ensure(
        elapsed < Duration::from_secs(600),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "R_v, R_a, R_av improved on {wins}/5 seeds in {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn routing_benefit() -> Outcome {
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in SEEDS {
        let mut config = toy_config(seed);
        config.rewards.conflict_epsilon = CONFLICT_EPSILON;
        let score = |mode: &str| {
            let m = run(&config, mode);
            let last = window_means(&m, m.len() - WINDOW..m.len());
            last[0].min(last[1])
        };
        let margin = score("omninft") - score("shared-advantage");
        wins += (margin > 0.0) as usize;
        margins.push(format!("{margin:+.3}"));
    }
    ensure(
        wins >= 4,
        format!("omninft won {wins}/5 [{}]", margins.join(" ")),
    )?;
    Ok(format!(
        "omninft beat shared-advantage on {wins}/5 seeds [{}]",
        margins.join(" ")
    ))
}

fn strip_wall_time(metrics: &str) -> Vec<serde_json::Value> {
    metrics
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = toy_config(3);
    config.train.iterations = 30;
    config.train.grad_norm_interval = 10;
    let path = dir.path().join("config.toml");
    std::fs::write(&path, config.to_toml()).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_omninft"))
            .args(["train", "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "error")
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), format!("train exited with {status}"))?;
        outputs.push(out);
    }
    for file in ["policy.ckpt", "old_policy.ckpt"] {
        let a = std::fs::read(outputs[0].join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(outputs[1].join(file)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{file} differs"))?;
    }
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.jsonl")).unwrap();
    let (a, b) = (read(&outputs[0]), read(&outputs[1]));
    let (a, b) = (strip_wall_time(&a), strip_wall_time(&b));
    ensure(a.len() == 30, format!("{} records", a.len()))?;
    ensure(a == b, "metrics payloads differ")?;
    Ok("checkpoints and 30 metrics records identical across two CLI runs".into())
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 9] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 surgery contract", surgery_contract),
        ("3 objective identities", objective_identities),
        ("4 advantage routing", routing),
        ("5 region weights", region_weights),
        ("6 blocking invariant", blocking_invariant),
        ("7 directional training", directional_training),
        ("8 routing under conflict", routing_benefit),
        ("9 determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                println!("FAIL criterion {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
