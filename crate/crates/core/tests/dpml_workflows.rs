use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sharebft::dpml::{
    gradient, run, run_traced, Dataset, DpmlError, EncryptionKind, InferenceTime, Mode, TrainingConfig,
};
use sharebft::field::{FixedPointCodec, GroupParams};
use sharebft::netsim::TraceLevel;
use sharebft::vss;

fn cfg(mode: Mode, seed: u64, rounds: usize) -> TrainingConfig {
    TrainingConfig {
        mode,
        seed,
        rounds,
        attackers: [3].into(),
        ..TrainingConfig::default()
    }
}

/// Averaging one local step per participant over equal-sized datasets is
/// plain gradient descent on the pooled data.
fn pooled_descent(c: &TrainingConfig) -> Vec<Vec<f64>> {
    let mut pooled = Dataset {
        features: Vec::new(),
        labels: Vec::new(),
    };
    for i in 0..c.n as u32 {
        let d = c.data.participant(c.seed, i);
        pooled.features.extend(d.features);
        pooled.labels.extend(d.labels);
    }
    let mut w = c.data.initial_model(c.seed);
    (0..c.rounds)
        .map(|_| {
            let g = gradient(&w, &pooled);
            w = w.iter().zip(&g).map(|(x, gi)| x - c.learning_rate * gi).collect();
            w.clone()
        })
        .collect()
}

#[test]
fn fedavg_plain_is_pooled_gradient_descent() {
    let c = cfg(Mode::FedavgPlain, 3, 15);
    let r = run(&c).unwrap();
    let oracle = pooled_descent(&c);
    for (m, w) in r.rounds.iter().zip(&oracle) {
        for (a, b) in m.params.iter().zip(w) {
            assert!((a - b).abs() < 1e-12, "round {}: {a} vs {b}", m.round);
        }
        assert_eq!(m.z, 4);
    }
}

#[test]
fn secure_workflows_match_plain_averaging() {
    let tol = 2f64.powi(-16) * 4.0;
    for mode in [Mode::Ebyftves, Mode::BaselineVss] {
        let c = TrainingConfig {
            attackers: Default::default(),
            ..cfg(mode, 1, 25)
        };
        let plain = run(&TrainingConfig {
            mode: Mode::FedavgPlain,
            ..c.clone()
        })
        .unwrap();
        let secure = run(&c).unwrap();
        assert_eq!(secure.rounds.len(), plain.rounds.len());
        for (s, p) in secure.rounds.iter().zip(&plain.rounds) {
            assert!(s.consistent);
            assert_eq!(s.z, 4, "{mode} round {}", s.round);
            for (a, b) in s.params.iter().zip(&p.params) {
                assert!((a - b).abs() <= tol, "{mode} round {}: {a} vs {b}", s.round);
            }
        }
    }
}

#[test]
fn tiny_average_through_shares() {
    // Two dealers sharing 1.0 and 3.0 with th = 2: the summed shares
    // reconstruct to 4.0, so the average is 2.0.
    let group = GroupParams::generate(128, 64, 7).unwrap();
    let codec = FixedPointCodec::with_default_precision(group.scalars());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = vss::share(&[1.0], 1, 2, 4, &group, &codec, &mut rng).unwrap();
    let b = vss::share(&[3.0], 2, 2, 4, &group, &codec, &mut rng).unwrap();
    let summed: Vec<_> = (0..4)
        .map(|j| vss::sum_shares(&[a.bundles[j].clone(), b.bundles[j].clone()], codec.field()).unwrap())
        .collect();
    let total = vss::reconstruct(&summed[1..3], 2, &codec).unwrap();
    assert_eq!(total[0] / 2.0, 2.0);
}

#[test]
fn defended_attacker_never_reconstructs_and_is_excluded() {
    let c = cfg(Mode::EbyftvesAcumpa, 2, 10);
    let (r, trace) = run_traced(&c, TraceLevel::Full).unwrap();
    assert_eq!(r.attacks.len(), 10);
    for a in &r.attacks {
        assert!(!a.adaptive && a.fallback, "{a:?}");
        assert!(!a.included);
    }
    for m in &r.rounds {
        assert!(m.consistent);
        assert_eq!(m.dealers, vec![0, 1, 2]);
    }
    assert!(trace.kinds("acumpa").all(|e| e.summary.contains("adaptive=false")));
    assert_eq!(trace.kinds("acumpa").count(), 10);
}

#[test]
fn without_confidentiality_the_attacker_can_read_shares() {
    let c = TrainingConfig {
        encryption: EncryptionKind::Identity,
        ..cfg(Mode::EbyftvesAcumpa, 2, 6)
    };
    let r = run(&c).unwrap();
    assert!(r.attacks.iter().any(|a| a.adaptive));
    assert!(r.rounds.iter().all(|m| m.consistent));
}

#[test]
fn baseline_attacker_crafts_every_round() {
    let c = cfg(Mode::BaselineVssAcumpa, 4, 12);
    let r = run(&c).unwrap();
    assert_eq!(r.attacks.len(), 12);
    for a in &r.attacks {
        assert!(a.adaptive && a.included, "{a:?}");
        if a.hit_threshold == Some(true) {
            assert!(a.cos_to_honest.unwrap() <= c.asdp.theta_cos + 1e-9);
        }
    }
    assert!(r.attacks.iter().any(|a| a.hit_threshold == Some(true)));
    // The crafted vector passes the cosine filter against the previous
    // aggregate.
    assert!(r.rounds.iter().all(|m| m.dealers.contains(&3)));
}

#[test]
fn attack_hurts_and_defense_recovers() {
    let plain = run(&cfg(Mode::FedavgPlain, 0, 60)).unwrap();
    let attacked = run(&cfg(Mode::BaselineVssAcumpa, 0, 60)).unwrap();
    let defended = run(&cfg(Mode::EbyftvesAcumpa, 0, 60)).unwrap();
    assert!(attacked.summary.final_accuracy < plain.summary.final_accuracy);
    assert!(attacked.summary.inference_time > plain.summary.inference_time);
    assert!((defended.summary.final_accuracy - plain.summary.final_accuracy).abs() < 0.01);
    assert_ne!(defended.summary.inference_time, InferenceTime::NEVER);
}

#[test]
fn gated_training_survives_asynchrony_before_gst() {
    let c = TrainingConfig {
        gst: 60,
        delta: 3,
        ..cfg(Mode::EbyftvesAcumpa, 5, 5)
    };
    let r = run(&c).unwrap();
    assert!(r.rounds.iter().all(|m| m.consistent && m.z == 3));
}

#[test]
fn results_are_deterministic() {
    for mode in [Mode::BaselineVssAcumpa, Mode::EbyftvesAcumpa] {
        let c = cfg(mode, 8, 5);
        let a = serde_json::to_string(&run(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn early_stop_truncates_rounds() {
    let c = TrainingConfig {
        error_threshold: 0.6,
        ..cfg(Mode::FedavgPlain, 0, 60)
    };
    let r = run(&c).unwrap();
    let stop = r.summary.converged_at.unwrap();
    assert_eq!(r.rounds.len(), stop);
    assert!(r.rounds[stop - 1].train_error <= 0.6);
    assert!(r.rounds[..stop - 1].iter().all(|m| m.train_error > 0.6));
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad = [
        TrainingConfig {
            f: 2,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            n: 5,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            th: 4,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            attackers: [1, 2].into(),
            ..TrainingConfig::default()
        },
        TrainingConfig {
            attackers: [9].into(),
            ..TrainingConfig::default()
        },
        TrainingConfig {
            rounds: 0,
            ..TrainingConfig::default()
        },
        TrainingConfig {
            batch_size: Some(5),
            ..TrainingConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(run(&c), Err(DpmlError::Config(_))), "{c:?}");
    }
    assert!("ebyftves+acumpa".parse::<Mode>().is_ok());
    assert!("bogus".parse::<Mode>().is_err());
}
