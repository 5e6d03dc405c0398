use mtgan::memory::*;
use mtgan::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> LifelongConfig {
    LifelongConfig::default()
}

fn random_basis(rng: &mut ChaCha8Rng, d: usize, k: usize) -> SharedBasis {
    SharedBasis::from_matrix(Matrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0)))
}

fn random_stats(rng: &mut ChaCha8Rng, id: usize, d: usize) -> TaskStats {
    let theta = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let z = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
    TaskStats::new(id, theta, z, 1).unwrap()
}

fn code_objective(l: &SharedBasis, st: &TaskStats, s: &[f64], mu: f64) -> f64 {
    let code = TaskCode { task_id: 0, s: s.to_vec(), degenerate: false };
    let r = reconstruct_policy(l, &code).unwrap();
    let fit: f64 = st.theta.iter().zip(&r).zip(&st.z).map(|((t, r), z)| z * (t - r).powi(2)).sum();
    fit + mu * s.iter().map(|v| v.abs()).sum::<f64>()
}

/// Proximal gradient descent, independent of the coordinate solver.
fn ista(l: &SharedBasis, st: &TaskStats, mu: f64) -> Vec<f64> {
    let k = l.k_latent();
    let mut lip = 0.0;
    for i in 0..l.d_core() {
        for a in 0..k {
            lip += st.z[i] * l.l.get(i, a).powi(2);
        }
    }
    let step = 1.0 / (2.0 * lip);
    let mut s = vec![0.0; k];
    for _ in 0..200_000 {
        let g = code_residual_gradient(l, st, &s);
        let mut change = 0.0_f64;
        for a in 0..k {
            let v = s[a] - step * g[a];
            let next = v.signum() * (v.abs() - step * mu).max(0.0);
            change = change.max((next - s[a]).abs());
            s[a] = next;
        }
        if change < 1e-15 {
            break;
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn code_satisfies_subgradient_conditions(seed in 0u64..10_000, mu in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_basis(&mut rng, 6, 3);
        let st = random_stats(&mut rng, 0, 6);
        let code = solve_task_code(&l, &st, mu, &cfg()).unwrap();
        let g = code_residual_gradient(&l, &st, &code.s);
        for (gj, sj) in g.iter().zip(&code.s) {
            if *sj != 0.0 {
                prop_assert!((gj + mu * sj.signum()).abs() < 1e-6, "g={gj} s={sj}");
            } else {
                prop_assert!(gj.abs() <= mu + 1e-6);
            }
        }
    }

    #[test]
    fn sparsity_grows_with_mu(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = SharedBasis::from_matrix(Matrix::identity(5));
        let st = random_stats(&mut rng, 0, 5);
        let mut last = -1.0;
        for mu in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0] {
            let sp = solve_task_code(&l, &st, mu, &cfg()).unwrap().sparsity();
            prop_assert!(sp >= last);
            last = sp;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn code_matches_proximal_oracle(seed in 0u64..10_000, mu in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_basis(&mut rng, 5, 2);
        let st = random_stats(&mut rng, 0, 5);
        let code = solve_task_code(&l, &st, mu, &cfg()).unwrap();
        let oracle = ista(&l, &st, mu);
        let (fc, fo) = (code_objective(&l, &st, &code.s, mu), code_objective(&l, &st, &oracle, mu));
        prop_assert!(fc <= fo + 1e-9, "{fc} vs {fo}");
        for (a, b) in code.s.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn basis_solves_normal_equations(seed in 0u64..10_000, lambda in 0.001f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<_> = (0..4)
            .map(|t| {
                let st = random_stats(&mut rng, t, 6);
                let s = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                (st, TaskCode { task_id: t, s, degenerate: false })
            })
            .collect();
        let l = update_basis(&tasks, lambda).unwrap();
        prop_assert!(basis_normal_residual(&l, &tasks, lambda) < 1e-8);
        // any perturbation of the minimizer raises the objective
        let base = lifelong_objective(&tasks, &l, 0.0, lambda).unwrap();
        let mut moved = l.clone();
        let v = moved.l.get(2, 1);
        moved.l.set(2, 1, v + 1e-3);
        prop_assert!(lifelong_objective(&tasks, &moved, 0.0, lambda).unwrap() > base);
    }
}

#[test]
fn basis_matches_gradient_descent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lambda = 0.05;
    let (d, k) = (4, 2);
    let tasks: Vec<_> = (0..3)
        .map(|t| {
            let st = random_stats(&mut rng, t, d);
            let s = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            (st, TaskCode { task_id: t, s, degenerate: false })
        })
        .collect();
    let exact = update_basis(&tasks, lambda).unwrap();
    let n = tasks.len() as f64;
    let mut l = Matrix::zeros(d, k);
    for _ in 0..200_000 {
        let mut g = Matrix::zeros(d, k);
        for (st, code) in &tasks {
            for i in 0..d {
                let r: f64 = (0..k).map(|a| l.get(i, a) * code.s[a]).sum::<f64>() - st.theta[i];
                for a in 0..k {
                    let v = g.get(i, a) + 2.0 * st.z[i] * r * code.s[a] / n;
                    g.set(i, a, v);
                }
            }
        }
        for i in 0..d {
            for a in 0..k {
                let v = l.get(i, a) - 0.05 * (g.get(i, a) + 2.0 * lambda * l.get(i, a));
                l.set(i, a, v);
            }
        }
    }
    for (a, b) in exact.l.data().iter().zip(l.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn alternating_sweeps_never_increase_objective() {
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let mut mem = SharedMemory::new(6, LifelongConfig { k_latent: 2, ..cfg() }).unwrap();
        for t in 0..5 {
            let trace = mem.absorb(random_stats(&mut rng, t, 6)).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "instance {inst} task {t}: {trace:?}");
            }
        }
    }
}

#[test]
fn exact_reconstruction_without_regularization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tasks: Vec<_> = (0..3).map(|t| random_stats(&mut rng, t, 5)).collect();

    // direct: columns are the task parameters, codes solved with mu = 0
    let cols: Vec<f64> = (0..5).flat_map(|i| tasks.iter().map(move |t| t.theta[i])).collect();
    let l = SharedBasis::from_matrix(Matrix::from_vec(5, 3, cols).unwrap());
    for st in &tasks {
        let code = solve_task_code(&l, st, 0.0, &cfg()).unwrap();
        let r = reconstruct_policy(&l, &code).unwrap();
        for (a, b) in r.iter().zip(&st.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    // through absorb; unused columns need a vanishing ridge to stay solvable
    let config = LifelongConfig { k_latent: 3, mu_sparse: 0.0, lambda_ridge: 1e-12, ..cfg() };
    let mut mem = SharedMemory::new(5, config).unwrap();
    for st in &tasks {
        mem.absorb(st.clone()).unwrap();
    }
    for ((st, code), orig) in mem.tasks.iter().zip(&tasks) {
        let r = reconstruct_policy(&mem.basis, code).unwrap();
        for (a, b) in r.iter().zip(&orig.theta) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(st, orig);
    }
}
