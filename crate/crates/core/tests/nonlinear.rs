use nalgebra::{DMatrix, DVector};
use physs_core::infer::{
    eks_solve, ell_gradients, expect_term, minibatch_ell, natgrad_step, predict, Curvature, Hyperparameters, Mode,
    ModelSpec, Posterior, PredictOptions, Problem, Query, Rules,
};
use physs_core::oracle::{dense_posterior, mc_expectation, random_conjugate_instance, DenseQuery};
use physs_core::physics::{residual_pendulum, Likelihood};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pendulum_moments() -> (DVector<f64>, DMatrix<f64>) {
    let mean = DVector::from_vec(vec![1.2, -0.3, 0.5]);
    let a = DMatrix::from_row_slice(3, 3, &[0.4, 0.0, 0.0, 0.1, 0.3, 0.0, -0.2, 0.1, 0.5]);
    (mean, &a * a.transpose())
}

#[test]
fn quadrature_expectations_match_monte_carlo() {
    let lik = Likelihood::Residual {
        residual: residual_pendulum(0.2),
        noise: 0,
    };
    let noise = [0.05];
    let (mean, cov) = pendulum_moments();
    let mut rules = Rules::new(20);
    let exact = expect_term(&lik, &mean, &cov, &cov, &noise, Curvature::Exact, &mut rules).unwrap();
    let mc = mc_expectation(&lik, &noise, &mean, &cov, 1_000_000, 3).unwrap();
    assert!((exact.ell - mc.ell).abs() < 3.0 * mc.ell_se, "{} vs {} ± {}", exact.ell, mc.ell, mc.ell_se);
    for i in 0..3 {
        assert!((exact.g_mean[i] - mc.g_mean[i]).abs() < 3.0 * mc.g_mean_se[i] + 1e-12);
        for j in 0..3 {
            let (a, b) = (exact.g_cov[(i, j)], mc.g_cov[(i, j)]);
            assert!((a - b).abs() < 3.0 * mc.g_cov_se[(i, j)] + 1e-9 * b.abs(), "({i},{j}): {a} vs {b}");
        }
    }
}

#[test]
fn gauss_newton_curvature_is_negative_semidefinite() {
    let lik = Likelihood::Residual {
        residual: residual_pendulum(0.2),
        noise: 0,
    };
    let (mean, cov) = pendulum_moments();
    let mut rules = Rules::new(20);
    for shift in [-3.0, -1.0, 0.0, 2.0, 3.1] {
        let mut m = mean.clone();
        m[0] = shift;
        let e = expect_term(&lik, &m, &cov, &cov, &[0.01], Curvature::GaussNewton, &mut rules).unwrap();
        let eig = e.g_cov.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|v| *v <= 1e-10), "{eig}");
    }
}

#[test]
fn extended_kalman_pass_is_exact_for_linear_models() {
    for seed in 0..8 {
        let inst = random_conjugate_instance(100 + seed).unwrap();
        let spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), Mode::Eks);
        let problem = Problem::new(spec, inst.terms.clone(), &[]).unwrap();
        let state = problem.initial_state(0).unwrap();
        let sm = eks_solve(&problem, &state.hyper).unwrap();
        let queries: Vec<Query> = inst.locations.iter().map(|(t, x)| Query::at(*t, x.clone())).collect();
        let pred = predict(&problem, &state, &queries, &[0, 1], PredictOptions::default()).unwrap();
        let dq: Vec<DenseQuery> = inst
            .locations
            .iter()
            .map(|(t, x)| DenseQuery {
                time: *t,
                point: x.clone(),
                components: vec![0, 1],
            })
            .collect();
        let dense = dense_posterior(&inst.latents, &inst.spec, &inst.spec.noise.as_table(), &inst.terms, &dq).unwrap();
        assert!((sm.log_marginal - dense.log_marginal).abs() < 1e-6 * dense.log_marginal.abs().max(1.0));
        for (p, d) in pred.iter().zip(&dense.means) {
            assert!((&p.mean - d).norm() < 1e-6 * d.norm().max(1.0));
        }
    }
}

#[test]
fn sparse_mode_with_all_nodes_matches_full_mode() {
    let inst = random_conjugate_instance(7).unwrap();
    let run = |mode: Mode, nodes: Option<Vec<Vec<f64>>>| {
        let mut spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), mode);
        spec.nodes = nodes;
        let problem = Problem::new(spec, inst.terms.clone(), &[]).unwrap();
        let mut state = problem.initial_state(0).unwrap();
        let mut post = Posterior::new(&problem, &state).unwrap();
        natgrad_step(&problem, &mut state, &mut post, 1.0, None).unwrap();
        let queries: Vec<Query> = inst.locations.iter().map(|(t, x)| Query::at(*t, x.clone())).collect();
        (
            post.elbo(&problem).unwrap().total,
            predict(&problem, &state, &queries, &[0], PredictOptions::default()).unwrap(),
        )
    };
    let full_problem_nodes = {
        let spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), Mode::Full);
        Problem::new(spec, inst.terms.clone(), &[]).unwrap().nodes
    };
    let (e_full, p_full) = run(Mode::Full, None);
    let (e_sparse, p_sparse) = run(Mode::Sparse, Some(full_problem_nodes));
    assert!((e_full - e_sparse).abs() < 1e-8 * e_full.abs().max(1.0));
    for (a, b) in p_full.iter().zip(&p_sparse) {
        assert!((&a.mean - &b.mean).norm() < 1e-8);
        assert!((&a.cov - &b.cov).norm() < 1e-8);
    }
}

#[test]
fn sparse_queries_off_nodes_refused_when_exact_only() {
    let inst = random_conjugate_instance(3).unwrap();
    let mut spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), Mode::Sparse);
    spec.nodes = Some(vec![vec![0.0], vec![1.0]]);
    let problem = Problem::new(spec, inst.terms.clone(), &[]).unwrap();
    let state = problem.initial_state(0).unwrap();
    let q = [Query::at(inst.locations[0].0, vec![0.5])];
    let err = predict(&problem, &state, &q, &[0], PredictOptions { exact_only: true }).unwrap_err();
    assert!(matches!(err, physs_core::Error::QueryOutsideSpatialModel(_)));
    assert!(predict(&problem, &state, &q, &[0], PredictOptions::default()).is_ok());
}

#[test]
fn minibatch_estimate_is_unbiased() {
    let inst = random_conjugate_instance(11).unwrap();
    let spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), Mode::Full);
    let problem = Problem::new(spec, inst.terms.clone(), &[]).unwrap();
    let state = problem.initial_state(0).unwrap();
    let post = Posterior::new(&problem, &state).unwrap();
    let full: f64 = ell_gradients(&problem, &post.compiled, &post.smoothed, false)
        .unwrap()
        .iter()
        .map(|b| b.ell)
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<f64> = (0..2000)
        .map(|_| {
            minibatch_ell(&problem, &post.compiled, &post.smoothed, 1, &mut rng, false)
                .unwrap()
                .iter()
                .map(|b| b.ell)
                .sum()
        })
        .collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - full).abs() < 3.0 * (var / n).sqrt() + 1e-9, "{mean} vs {full}");
}

#[test]
fn hyperparameters_round_trip_and_floor() {
    let inst = random_conjugate_instance(1).unwrap();
    let spec = ModelSpec::new(inst.latents.clone(), inst.spec.clone(), Mode::Full);
    let mut h = Hyperparameters::from_spec(&spec);
    let v = h.get("latent0.temporal.lengthscale").unwrap();
    assert!((v - inst.latents[0].temporal.lengthscale).abs() < 1e-12);
    h.set("noise.collocation", 1e-12).unwrap();
    assert!((h.get("noise.collocation").unwrap() - 1e-6).abs() < 1e-18);
    assert!(h.set("noise.collocation", -1.0).is_err());
    assert!(h.set("nope", 1.0).is_err());
}
