use mtgan::env::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plants() -> Vec<PlantSpec> {
    [PlantKind::Smsm, PlantKind::Tlmdcp, PlantKind::Pac]
        .into_iter()
        .map(PlantSpec::nominal)
        .collect()
}

#[test]
fn every_token_round_trips() {
    for spec in plants() {
        for tok in 0..spec.vocab() {
            let a = spec.detokenize(tok).unwrap();
            assert_eq!(spec.tokenize(&a).unwrap(), tok, "{} token {tok}", spec.kind);
            let idx = spec.grid.indices(tok).unwrap();
            assert_eq!(spec.grid.token_of_indices(&idx).unwrap(), tok);
        }
    }
}

proptest! {
    #[test]
    fn tokenize_picks_nearest_level(u in -30.0f64..30.0) {
        let spec = PlantSpec::nominal(PlantKind::Tlmdcp);
        let tok = spec.tokenize(&[u]).unwrap();
        let chosen = spec.detokenize(tok).unwrap()[0];
        for t in 0..spec.vocab() {
            let other = spec.detokenize(t).unwrap()[0];
            prop_assert!((chosen - u).abs() <= (other - u).abs() + 1e-12);
        }
    }

    #[test]
    fn smsm_work_energy_identity(v in -3.0f64..3.0, x in -3.0f64..3.0, tok in 0usize..5) {
        // semi-implicit Euler: ΔKE = u·Δx − dt²u²/(2m) exactly
        let spec = PlantSpec::nominal(PlantKind::Smsm);
        let m = match spec.params { PhysicalParams::Smsm { mass } => mass, _ => unreachable!() };
        let u = spec.detokenize(tok).unwrap()[0];
        let next = advance(&spec, &[x, v], &[u]).unwrap();
        let dke = 0.5 * m * (next[1].powi(2) - v.powi(2));
        let work = u * (next[0] - x);
        prop_assert!((dke - (work - spec.dt.powi(2) * u * u / (2.0 * m))).abs() < 1e-12);
        prop_assert!((dke - u * v * spec.dt).abs() <= u.abs() * v.abs() * spec.dt + 1e-6 + spec.dt.powi(2) * u * u / m);
    }

    #[test]
    fn angles_stay_wrapped(seed in 0u64..1000) {
        let spec = PlantSpec::nominal(PlantKind::Tlmdcp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = spec.sample_initial_state(&mut rng);
        let tokens: Vec<usize> = (0..30).map(|t| (t * 5 + seed as usize) % spec.vocab()).collect();
        if let Ok(traj) = rollout_tokens(&spec, &x0, &tokens) {
            let mask = spec.kind.angle_mask();
            for s in &traj.states[1..] {
                for (v, &is_angle) in s.iter().zip(&mask) {
                    if is_angle {
                        prop_assert!(*v > -std::f64::consts::PI && *v <= std::f64::consts::PI);
                    }
                }
            }
        }
    }
}

#[test]
fn smsm_jacobian_matches_hand_derivation() {
    let spec = PlantSpec::nominal(PlantKind::Smsm);
    let dt = spec.dt;
    let (a, b) = linearize(&spec, &[0.3, -0.2]).unwrap();
    let expect_a = [[1.0, dt], [0.0, 1.0]];
    let expect_b = [dt * dt, dt];
    for i in 0..2 {
        for j in 0..2 {
            assert!((a.get(i, j) - expect_a[i][j]).abs() < 1e-6);
        }
        assert!((b.get(i, 0) - expect_b[i]).abs() < 1e-6);
    }
}

#[test]
fn jacobian_is_step_size_robust() {
    for spec in plants() {
        let x = spec.goal.clone();
        let (a1, b1) = linearize_with_step(&spec, &x, 1e-6).unwrap();
        let (a2, b2) = linearize_with_step(&spec, &x, 2e-6).unwrap();
        for (p, q) in a1.data().iter().zip(a2.data()).chain(b1.data().iter().zip(b2.data())) {
            assert!((p - q).abs() < 1e-5, "{}: {p} vs {q}", spec.kind);
        }
    }
}

#[test]
fn tlmdcp_upright_is_unstable_fixed_point() {
    let spec = PlantSpec::nominal(PlantKind::Tlmdcp);
    let next = advance(&spec, &spec.goal, &spec.rest_action).unwrap();
    assert_eq!(next, spec.goal);
    let (a, _) = linearize(&spec, &spec.goal).unwrap();
    assert!(spectral_radius(&a) > 1.0);
}

#[test]
fn smsm_one_step_by_hand() {
    let spec = PlantSpec::nominal(PlantKind::Smsm);
    let next = advance(&spec, &[0.0, 0.0], &[1.0]).unwrap();
    assert!((next[0] - 0.0004).abs() < 1e-12);
    assert!((next[1] - 0.02).abs() < 1e-12);
}

#[test]
fn expert_rollouts_are_deterministic() {
    for spec in plants() {
        let ctrl = expert_controller(&spec).unwrap();
        let a = expert_rollout(&spec, &ctrl, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = expert_rollout(&spec, &ctrl, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn experts_beat_idling_on_average() {
    for spec in plants() {
        let ctrl = expert_controller(&spec).unwrap();
        let (mut expert, mut idle) = (0.0, 0.0);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = spec.sample_initial_state(&mut rng);
            let tokens = expert_rollout_from(&spec, &ctrl, &x0, 150)
                .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", spec.kind));
            expert += rollout_tokens(&spec, &x0, tokens.tokens())
                .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", spec.kind))
                .total_reward();
            let rest = vec![spec.rest_token(); 150];
            idle += rollout_tokens(&spec, &x0, &rest).map(|t| t.total_reward()).unwrap_or(-1e9);
        }
        assert!(expert > idle, "{}: expert {expert} idle {idle}", spec.kind);
    }
}
