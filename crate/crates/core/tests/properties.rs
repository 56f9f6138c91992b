use proptest::prelude::*;
use rwdre::oracle::{
    build_generator, evolve, relative_entropy, stationarity_residual, DistributionVector,
};
use rwdre::stats::run_ensemble;
use rwdre::theory::z_variance;
use rwdre::{
    accumulate, asymptotic_speed, simulate, warmup_rates, Configuration, ExchangeRate,
    LimitVariance, LocalFunction, SimulationParams,
};

fn config_strategy() -> impl Strategy<Value = Configuration> {
    prop::collection::vec(any::<bool>(), 1..200)
        .prop_map(|bits| Configuration::from_bits(bits).unwrap())
}

/// Reversible speed-change rates with support at `-1` or `2`.
fn exchange_strategy() -> impl Strategy<Value = ExchangeRate> {
    (prop_oneof![Just(-1i64), Just(2i64)], 0.5f64..2.0, 0.5f64..2.0).prop_map(|(k, a, b)| {
        ExchangeRate::new(LocalFunction::new(vec![k], vec![a, b]).unwrap(), 0.5)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swap_preserves_particles_and_is_an_involution(eta in config_strategy(), x in -500i64..500) {
        let swapped = eta.swap(x);
        prop_assert_eq!(swapped.particle_count(), eta.particle_count());
        prop_assert_eq!(swapped.recount(), eta.particle_count());
        prop_assert_eq!(swapped.swap(x), eta);
    }

    #[test]
    fn shifts_compose(eta in config_strategy(), a in -300i64..300, b in -300i64..300) {
        prop_assert_eq!(eta.rotate(a).rotate(b), eta.rotate(a + b));
        prop_assert_eq!(eta.rotate(a).particle_count(), eta.particle_count());
        prop_assert_eq!(eta.rotate(eta.len() as i64), eta.clone());
    }

    #[test]
    fn local_functions_commute_with_shifts(
        eta in config_strategy(),
        k in -50i64..50,
        x in -50i64..50,
        table in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let f = LocalFunction::new(vec![-1, 2], table).unwrap();
        prop_assert_eq!(f.evaluate(&eta.rotate(k), x), f.evaluate(&eta, x + k));
    }

    #[test]
    fn run_length_encoding_round_trips(eta in config_strategy()) {
        prop_assert_eq!(Configuration::from_rle(&eta.to_rle()).unwrap(), eta);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generator_rows_sum_to_exit_rates_and_conserve_mass(
        size in 4usize..=8,
        n in 1u32..4,
        rho in 0.1f64..0.9,
        alpha in 0.0f64..3.0,
        beta in 0.1f64..3.0,
        exchange in exchange_strategy(),
        seed in any::<u64>(),
    ) {
        let (_, walk) = warmup_rates(alpha, beta);
        let mut params = SimulationParams::new(n, rho, 1.0, exchange, walk);
        params.lattice_size = Some(size.max(6));
        let g = build_generator(&params).unwrap();
        for state in 0..g.states() {
            let sum: f64 = g.row(state).map(|(_, r)| r).sum();
            prop_assert!((sum - g.exit_rate(state)).abs() <= 1e-12 * (1.0 + sum));
            prop_assert!(g.row(state).all(|(_, r)| r >= 0.0));
        }
        let states = (0..50u64).map(|i| (seed.wrapping_add(i.wrapping_mul(0x9e37_79b9)) as usize) % g.states());
        let start = DistributionVector::empirical(g.size(), states).unwrap();
        let later = evolve(&start, &g, 0.3).unwrap();
        prop_assert!((later.total() - 1.0).abs() < 1e-10);
        prop_assert!(later.probs().iter().all(|&p| p >= 0.0));
        prop_assert!(relative_entropy(&later, rho) >= -1e-12);
    }

    #[test]
    fn product_measure_is_stationary_for_the_environment(
        size in 6usize..=8,
        rho in 0.05f64..0.95,
        exchange in exchange_strategy(),
    ) {
        let (_, walk) = warmup_rates(2.0, 1.0);
        let mut params = SimulationParams::new(2, rho, 1.0, exchange, walk);
        params.lattice_size = Some(size);
        params.simulate_walker = false;
        let g = build_generator(&params).unwrap();
        let nu = DistributionVector::product(size, rho).unwrap();
        prop_assert!(stationarity_residual(&nu, &g) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn decomposition_identity_holds_on_every_sample(
        n in 2u32..10,
        rho in 0.05f64..0.95,
        alpha in 0.0f64..3.0,
        beta in 0.1f64..3.0,
        exchange in exchange_strategy(),
        seed in any::<u64>(),
    ) {
        let (_, walk) = warmup_rates(alpha, beta);
        let params = SimulationParams::new(n, rho, 1.0, exchange, walk.clone())
            .with_seed(seed)
            .with_uniform_samples(16);
        let traj = simulate(&params).unwrap();
        let record = accumulate(&traj, &walk, asymptotic_speed(&walk, rho)).unwrap();
        prop_assert!(record.max_relative_defect() <= 1e-9);
        for row in &record.rows {
            let net: i64 = traj.jumps.iter().zip(&row.counts).map(|(z, &c)| z * c as i64).sum();
            prop_assert_eq!(net, row.position);
        }
    }

    #[test]
    fn merge_is_order_insensitive(mask in prop::collection::vec(any::<bool>(), 8), seed in any::<u64>()) {
        let (c, r) = warmup_rates(2.0, 1.0);
        let params = SimulationParams::new(4, 0.6, 0.5, c, r)
            .with_seed(seed)
            .with_uniform_samples(4);
        let full = run_ensemble(&params, 8).unwrap();
        let mut left = full.clone();
        let mut right = full.clone();
        left.runs.retain(|k, _| mask[*k as usize]);
        right.runs.retain(|k, _| !mask[*k as usize]);
        let lr = left.clone().merge(right.clone()).unwrap();
        let rl = right.merge(left.clone()).unwrap();
        prop_assert_eq!(&lr, &full);
        prop_assert_eq!(&rl, &full);
        prop_assert_eq!(left.clone().merge(left.clone()).unwrap(), left);
    }

    #[test]
    fn limit_variance_scales_with_exponent_three_halves(t in 0.01f64..20.0, c in 1.1f64..8.0) {
        let lv = LimitVariance::new(1.0, 0.5, 0.0).unwrap();
        let a = z_variance(t, &lv).unwrap();
        let b = z_variance(c * t, &lv).unwrap();
        prop_assert!((b / a - c.powf(1.5)).abs() < 1e-8 * c.powf(1.5));
        let drifted = LimitVariance::new(1.0, 0.5, 0.4).unwrap();
        prop_assert!(z_variance(c * t, &drifted).unwrap() > z_variance(t, &drifted).unwrap());
    }
}
