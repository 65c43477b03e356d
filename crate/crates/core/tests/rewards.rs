use omninft_autodiff::Tensor;
use omninft_core::objective::{AdvantageSet, NftConfig};
use omninft_core::rewards::{
    conflict_rate, evaluate_rewards, inject_conflict, pearson, prompt_spec, reward_audio,
    reward_sync, reward_video, PromptCorpus, PromptEntry, PromptSpec, RewardVector,
};
use omninft_core::sampling::LatentPair;
use omninft_core::seed::{derive_seed, gaussian, rng};
use omninft_core::ModelConfig;

fn spec(nv: usize, na: usize, d: usize, pairs: Vec<(usize, usize)>) -> PromptSpec {
    PromptSpec {
        id: 0,
        video_target: Tensor::zeros(&[nv, d]),
        audio_target: Tensor::zeros(&[na, d]),
        sync_pairing: pairs,
    }
}

/// Tokens whose L2 energies are `energies` (all mass on one feature, with mixed signs).
fn with_energies(energies: &[f64], d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[energies.len(), d]);
    for (i, &e) in energies.iter().enumerate() {
        t.data_mut()[i * d + i % d] = if i % 2 == 0 { e } else { -e };
    }
    t
}

#[test]
fn matching_the_target_scores_one() {
    let s = spec(4, 3, 2, vec![(0, 0), (1, 1)]);
    assert_eq!(reward_video(&Tensor::zeros(&[4, 2]), &s).unwrap(), 1.0);
    assert_eq!(reward_audio(&Tensor::zeros(&[3, 2]), &s).unwrap(), 1.0);
    assert!(reward_video(&Tensor::zeros(&[3, 2]), &s).is_err());
}

#[test]
fn quality_rewards_decrease_with_distance() {
    let s = spec(4, 3, 2, vec![(0, 0), (1, 1)]);
    let mut last = 1.0;
    for k in 1..6 {
        let r = reward_video(&Tensor::filled(&[4, 2], 0.3 * k as f64), &s).unwrap();
        assert!(r < last);
        last = r;
    }
}

#[test]
fn quality_reward_is_exp_of_negative_mean_square() {
    let mut g = rng(3);
    let x = gaussian(&[4, 2], &mut g);
    let s = spec(4, 3, 2, vec![(0, 0), (1, 1)]);
    let direct = (-(x.data().iter().map(|v| v * v).sum::<f64>() / 8.0)).exp();
    assert!((reward_video(&x, &s).unwrap() - direct).abs() < 1e-15);
    let a = gaussian(&[3, 2], &mut g);
    let direct = (-(a.data().iter().map(|v| v * v).sum::<f64>() / 6.0)).exp();
    assert!((reward_audio(&a, &s).unwrap() - direct).abs() < 1e-15);
}

#[test]
fn sync_reward_fixed_example() {
    let s = spec(4, 4, 3, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    let (ev, ea) = ([1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.5]);
    // Pearson by hand: deviations (−1.5, −0.5, 0.5, 1.5) and (−3.125, −1.125, 0.875, 3.375).
    let sxy = 1.5 * 3.125 + 0.5 * 1.125 + 0.5 * 0.875 + 1.5 * 3.375;
    let sxx = 2.0 * (1.5f64 * 1.5 + 0.5 * 0.5);
    let syy = 3.125f64.powi(2) + 1.125f64.powi(2) + 0.875f64.powi(2) + 3.375f64.powi(2);
    let expected = sxy / (sxx * syy).sqrt();
    let got = reward_sync(&with_energies(&ea, 3), &with_energies(&ev, 3), &s).unwrap();
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 0.998381).abs() < 1e-6);
}

#[test]
fn sync_reward_invariances() {
    let s = spec(4, 4, 2, vec![(0, 3), (1, 2), (2, 1), (3, 0)]);
    let ev = [0.5, 1.0, 2.5, 1.5];
    // Audio energies an increasing affine map of the paired video energies.
    let ea: Vec<f64> = (0..4).map(|j| 0.2 + 3.0 * ev[3 - j]).collect();
    let r = reward_sync(&with_energies(&ea, 2), &with_energies(&ev, 2), &s).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let ea: Vec<f64> = (0..4).map(|j| 10.0 - 3.0 * ev[3 - j]).collect();
    let r = reward_sync(&with_energies(&ea, 2), &with_energies(&ev, 2), &s).unwrap();
    assert!((r + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]), 0.0);
    let one = spec(4, 4, 2, vec![(0, 0)]);
    assert!(reward_sync(&with_energies(&ea, 2), &with_energies(&ev, 2), &one).is_err());
}

#[test]
fn injection_preserves_the_modality_sum() {
    let clean = RewardVector {
        video: 0.3,
        audio: 0.6,
        sync: 0.1,
    };
    assert_eq!(inject_conflict(clean, 0.0, 9).unwrap(), clean);
    for s in 0..50 {
        let r = inject_conflict(clean, 0.25, s).unwrap();
        assert!((r.video + r.audio - 0.9).abs() < 1e-15);
        assert!(((r.video - 0.3).abs() - 0.25).abs() < 1e-15);
        assert_eq!(r.sync, 0.1);
    }
    assert!(inject_conflict(clean, -1.0, 0).is_err());
}

#[test]
fn strong_injection_drives_conflict_toward_one() {
    let nft = NftConfig::default();
    let mut pairs = Vec::new();
    let mut g = rng(11);
    for group in 0..1000u64 {
        let noise = gaussian(&[8, 3], &mut g);
        let rewards: Vec<_> = (0..8)
            .map(|j| {
                let row = noise.row(j);
                let clean = RewardVector {
                    video: 0.5 + 0.01 * row[0],
                    audio: 0.5 + 0.01 * row[1],
                    sync: 0.01 * row[2],
                };
                inject_conflict(clean, 10.0, derive_seed(&[group, j as u64])).unwrap()
            })
            .collect();
        let adv = AdvantageSet::routed(&rewards, &nft).unwrap();
        pairs.extend(adv.rollouts.iter().map(|a| (a.a_v, a.a_a)));
    }
    let rate = conflict_rate(&pairs).unwrap();
    assert!(rate > 0.98, "{rate}");
    assert_eq!(conflict_rate(&[(1.0, 1.0), (-1.0, -1.0)]).unwrap(), 0.0);
    assert_eq!(conflict_rate(&[(1.0, -1.0), (-1.0, 1.0)]).unwrap(), 1.0);
    assert!(conflict_rate(&[]).is_err());
}

#[test]
fn generated_targets_are_synchronized() {
    let cfg = ModelConfig::default();
    let corpus = PromptCorpus::generate(4, 7, &cfg);
    let specs = corpus.specs(&cfg, 0.5).unwrap();
    assert_eq!(specs.len(), 4);
    for s in &specs {
        assert_eq!(s.sync_pairing.len(), cfg.n_audio_tokens);
        let target = LatentPair::new(s.audio_target.clone(), s.video_target.clone());
        let r = evaluate_rewards(&target, s).unwrap();
        assert_eq!((r.video, r.audio), (1.0, 1.0));
        assert!((r.sync - 1.0).abs() < 1e-9, "{}", r.sync);
    }
    assert_eq!(PromptCorpus::generate(4, 7, &cfg), corpus);
    assert_ne!(PromptCorpus::generate(4, 8, &cfg), corpus);
}

#[test]
fn corpus_files_round_trip_and_validate() {
    let cfg = ModelConfig::default();
    let corpus = PromptCorpus::generate(3, 1, &cfg);
    let back = PromptCorpus::parse(&corpus.to_toml()).unwrap();
    assert_eq!(back, corpus);
    let text = "[[prompt]]\nid = 0\nseed = 5\npairs = [[0, 0], [1, 1]]\n";
    let c = PromptCorpus::parse(text).unwrap();
    assert_eq!(c.prompts.len(), 1);
    assert!(PromptCorpus::parse("[[prompt]]\nid = 0\nseed = 5\npairs = []\ncolor = 1\n").is_err());
    let bad = PromptEntry {
        id: 0,
        seed: 0,
        pairs: vec![(99, 0), (1, 1)],
    };
    assert!(prompt_spec(&bad, &cfg, 0.5).is_err());
    let out_of_vocab = PromptEntry {
        id: 99,
        seed: 0,
        pairs: vec![(0, 0), (1, 1)],
    };
    assert!(prompt_spec(&out_of_vocab, &cfg, 0.5).is_err());
    let dup = PromptCorpus {
        prompts: vec![back.prompts[0].clone(), back.prompts[0].clone()],
    };
    assert!(dup.specs(&cfg, 0.5).is_err());
}
