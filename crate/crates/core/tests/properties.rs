//! Invariants over randomised inputs.

use antitune::attack::{adaptive_select, project, AttackConfig, Perturbation, ProfileOracle, TimestepPool};
use antitune::config::ExperimentConfig;
use antitune::rng::seeded;
use antitune::Tensor;
use proptest::prelude::*;

fn eta_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![
        (1u32..=64).prop_map(|k| f64::from(k) / 255.0),
        1e-6f64..0.5,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_keeps_both_bounds(base in 0.0f64..=1.0, d in -2.0f64..2.0, eta in eta_strategy()) {
        let p = project(base, d, eta);
        prop_assert!(p.abs() <= eta);
        prop_assert!((0.0..=1.0).contains(&(base + p)));
    }

    #[test]
    fn projection_is_idempotent(base in 0.0f64..=1.0, d in -2.0f64..2.0, eta in eta_strategy()) {
        let p = project(base, d, eta);
        prop_assert_eq!(project(base, p, eta), p);
    }

    #[test]
    fn pgd_steps_stay_in_budget(
        pixels in proptest::collection::vec(0.0f64..=1.0, 16),
        grads in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 16), 1..12),
        eta in eta_strategy(),
        alpha in 1e-4f64..0.2,
    ) {
        let image = Tensor::new(vec![1, 4, 4], pixels).unwrap();
        let mut pert = Perturbation::new(vec![image], eta).unwrap();
        for g in grads {
            let g = Tensor::new(vec![1, 4, 4], g).unwrap();
            pert.pgd_step(&[g], alpha).unwrap();
            prop_assert!(pert.satisfies_budget());
            prop_assert!(pert.max_abs_delta() <= eta);
        }
    }

    #[test]
    fn pool_removal_shrinks_monotonically(cuts in proptest::collection::vec((0usize..1000, 1usize..40), 0..60)) {
        let mut pool = TimestepPool::full(1000);
        for (lo, width) in cuts {
            let hi = (lo + width).min(1000);
            let next = pool.without(lo, hi);
            prop_assert!(next.is_subset_of(&pool));
            prop_assert!(pool.len() - next.len() <= hi - lo);
            prop_assert!((lo..hi).all(|t| !next.contains(t)));
            prop_assert_eq!(next.len(), next.iter().count());
            pool = next;
        }
    }

    #[test]
    fn search_never_empties_and_only_shrinks(
        levels in proptest::collection::vec(0.0f64..1.0, 10),
        rounds in 0usize..80,
        seed in any::<u64>(),
    ) {
        // Piecewise-constant profile over ten blocks of 100 timesteps.
        let g = |t: usize| levels[t / 100];
        let mut oracle = ProfileOracle { profile: g, steps: 1000 };
        let sel = adaptive_select(&mut oracle, &Tensor::zeros(vec![1]), rounds, 0.005, &mut seeded(seed)).unwrap();
        prop_assert!(!sel.pool.is_empty());
        prop_assert!(sel.rounds.len() <= rounds);
        let mut prev = 1000;
        for r in &sel.rounds {
            prop_assert!(r.pool_len < prev);
            prop_assert!(prev - r.pool_len <= 39);
            prop_assert!(r.probes.iter().all(|&(t, _)| g(r.weakest) <= g(t)));
            prev = r.pool_len;
        }
        prop_assert_eq!(sel.pool.len(), prev);
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        eta in eta_strategy(),
        lambda in 0.0f64..4.0,
        epochs in 0usize..200,
        search in 0usize..100,
        selection in any::<bool>(),
        taps in proptest::sample::subsequence(vec![0usize, 1, 2, 3, 4, 5], 1..=6),
        lr in 1e-6f64..1e-1,
        subjects in 2usize..32,
    ) {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.attack.eta = eta;
        cfg.attack.lambda = lambda;
        cfg.attack.epochs = epochs;
        cfg.attack.search_steps = search;
        cfg.attack.selection_enabled = selection;
        cfg.attack.tap_layers = taps;
        cfg.train.lr = lr;
        cfg.data.subjects = subjects;
        cfg.data.base_subjects = subjects.min(cfg.data.base_subjects);
        cfg.data.protect_subject = subjects - 1;
        let text = cfg.dump();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.dump(), text.clone());
        let unknown = format!("{text}mystery_key = 1\n");
        prop_assert!(ExperimentConfig::parse(&unknown).is_err());
        let unseeded: String = text.lines().filter(|l| !l.starts_with("seed ")).map(|l| format!("{l}\n")).collect();
        prop_assert!(ExperimentConfig::parse(&unseeded).is_err());

        let attack = AttackConfig::parse(&cfg.attack.to_text()).unwrap();
        prop_assert_eq!(attack, cfg.attack);
    }
}

#[test]
fn rational_values_parse_exactly() {
    let cfg = ExperimentConfig::parse("seed = 1\neta = 16/255\nablate_etas = 4/255, 8/255\n").unwrap();
    assert_eq!(cfg.attack.eta, 16.0 / 255.0);
    assert_eq!(cfg.ablation.etas, vec![4.0 / 255.0, 8.0 / 255.0]);
    assert!(ExperimentConfig::parse("seed = 1\neta = 16/0\n").is_err());
}
