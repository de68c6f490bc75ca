mod common;

use common::*;
use hmf::losses::{self, SPARSE_COVERAGE_THRESHOLD};
use hmf::solver::{self, closed_form_v, correct_client, init_state, server_average, FitConfig};
use hmf::{
    fit, generate_instance, DenseMatrix, Execution, HmfError, HyperParams, LocalFactors, LossKind, ObservationMask,
    ObservationSet, SourceObservation, StepsizePolicy, SynthConfig,
};
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    source: SourceObservation,
    blocks: [DenseMatrix; 4],
}

fn instance(seed: u64, coverage: f64) -> Instance {
    let mut g = rng(seed);
    let n1 = g.random_range(4..10);
    let n2 = g.random_range(3..10);
    let r1 = g.random_range(1..4);
    let r2 = g.random_range(1..4);
    let m = gaussian(&mut g, n1, n2);
    let mask = random_mask(&mut g, n1, n2, coverage);
    Instance {
        source: SourceObservation::masked(m, mask).unwrap(),
        blocks: [
            gaussian(&mut g, n1, r1),
            gaussian(&mut g, n2, r1),
            gaussian(&mut g, n1, r2),
            gaussian(&mut g, n2, r2),
        ],
    }
}

/// `ℓ′ V` and `ℓ′ᵀ U` built cell by cell from the observed residual.
fn naive_gradients(inst: &Instance, kind: LossKind, beta: f64) -> [DenseMatrix; 4] {
    let [u_g, v_g, u_l, v_l] = &inst.blocks;
    let m = &inst.source.matrix;
    let m_hat = reconstruct(u_g, v_g, u_l, v_l);
    let mut lp = DenseMatrix::zeros(m.rows(), m.cols());
    let observed = inst.source.mask.as_ref().unwrap().to_dense();
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if kind == LossKind::Se || observed[r * m.cols() + c] {
                lp[(r, c)] = m_hat[(r, c)] - m[(r, c)];
            }
        }
    }
    let times = |a: &DenseMatrix, b: &DenseMatrix| {
        DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
    };
    let reg = |u: &DenseMatrix| {
        let k = u.cols();
        let mut gm = DenseMatrix::from_fn(k, k, |i, j| (0..u.rows()).map(|t| u[(t, i)] * u[(t, j)]).sum());
        for i in 0..k {
            gm[(i, i)] -= 1.0;
        }
        times(u, &gm).scale(2.0 * beta)
    };
    let lpt = lp.transpose();
    [
        times(&lp, v_g).add(&reg(u_g)).unwrap(),
        times(&lpt, u_g),
        times(&lp, v_l).add(&reg(u_l)).unwrap(),
        times(&lpt, u_l),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_match_cellwise_formula(seed in any::<u64>(), pse in any::<bool>(), sparse in any::<bool>(), beta in 0.0f64..1.0) {
        let inst = instance(seed, if sparse { 0.1 } else { 0.7 });
        let kind = if pse { LossKind::Pse } else { LossKind::Se };
        let [u_g, v_g, u_l, v_l] = &inst.blocks;
        let ours = losses::gradients(&inst.source, u_g, v_g, u_l, v_l, kind, beta).unwrap();
        let expected = naive_gradients(&inst, kind, beta);
        for (x, y) in [&ours.u_g, &ours.v_g, &ours.u_l, &ours.v_l].into_iter().zip(&expected) {
            prop_assert!(x.max_abs_diff(y) < 1e-11 * (1.0 + y.max_abs()));
        }
    }

    #[test]
    fn objective_matches_definition(seed in any::<u64>(), pse in any::<bool>(), beta in 0.0f64..1.0) {
        let inst = instance(seed, 0.5);
        let kind = if pse { LossKind::Pse } else { LossKind::Se };
        let [u_g, v_g, u_l, v_l] = inst.blocks.clone();
        let expected = naive_source_objective(kind, &inst.source.matrix, inst.source.mask.as_ref(), &u_g, &v_g, &u_l, &v_l, beta);
        let obs = ObservationSet::new(vec![inst.source.clone()]).unwrap();
        let state = hmf::FactorState { u_g, locals: vec![LocalFactors { v_g, u_l, v_l }] };
        let ours = losses::objective(&obs, &state, kind, beta).unwrap();
        prop_assert!((ours - expected).abs() < 1e-11 * (1.0 + expected));
    }

    #[test]
    fn correction_makes_factors_orthogonal_and_keeps_the_fit(seed in any::<u64>()) {
        let inst = instance(seed, 1.0);
        let [u_g, v_g, u_l, v_l] = &inst.blocks;
        prop_assume!(u_g.rows() > u_g.cols());
        let out = correct_client(u_g, u_l, v_g, v_l).unwrap();
        let cross = u_g.matmul_tn(&out.u_l).unwrap().frobenius_norm();
        prop_assert!(cross < 1e-10 * (1.0 + u_g.frobenius_norm()) * (1.0 + u_l.frobenius_norm()));
        let before = reconstruct(u_g, v_g, u_l, v_l);
        let after = reconstruct(u_g, &out.v_g, &out.u_l, v_l);
        prop_assert!(rel_diff(&after, &before) < 1e-10);
        // A second correction changes nothing measurable.
        let again = correct_client(u_g, &out.u_l, &out.v_g, v_l).unwrap();
        prop_assert!(again.u_l.max_abs_diff(&out.u_l) < 1e-10 * (1.0 + out.u_l.max_abs()));
    }

    #[test]
    fn closed_form_v_satisfies_normal_equations(seed in any::<u64>()) {
        let mut g = rng(seed);
        let n = g.random_range(4..10);
        let k = g.random_range(1..4);
        let cols = g.random_range(1..8);
        let m = gaussian(&mut g, n, cols);
        let u = gaussian(&mut g, n, k);
        let v = closed_form_v(&m, &u).unwrap();
        let resid = m.sub(&naive_matmul_nt(&u, &v)).unwrap();
        let kkt = u.matmul_tn(&resid).unwrap();
        prop_assert!(kkt.max_abs() < 1e-9 * (1.0 + m.max_abs()) * (1.0 + u.max_abs()));
    }
}

#[test]
fn sparse_threshold_splits_paths_without_changing_results() {
    const { assert!(SPARSE_COVERAGE_THRESHOLD > 0.0 && SPARSE_COVERAGE_THRESHOLD < 1.0) };
    // The same observed cells evaluated on both sides of the threshold: pad the
    // matrix with unobserved columns to push coverage below it.
    let inst = instance(11, 0.6);
    let [u_g, v_g, u_l, v_l] = &inst.blocks;
    let dense = losses::gradients(&inst.source, u_g, v_g, u_l, v_l, LossKind::Pse, 0.1).unwrap();
    let (n1, n2) = inst.source.matrix.shape();
    let wide = 20 * n2;
    let m = DenseMatrix::from_fn(n1, wide, |r, c| if c < n2 { inst.source.matrix[(r, c)] } else { 0.0 });
    let mask = ObservationMask::new(n1, wide, inst.source.mask.as_ref().unwrap().entries.clone()).unwrap();
    assert!(mask.coverage() < SPARSE_COVERAGE_THRESHOLD);
    let source = SourceObservation::masked(m, mask).unwrap();
    let pad = |v: &DenseMatrix| DenseMatrix::from_fn(wide, v.cols(), |r, c| if r < n2 { v[(r, c)] } else { 0.0 });
    let sparse = losses::gradients(&source, u_g, &pad(v_g), u_l, &pad(v_l), LossKind::Pse, 0.1).unwrap();
    assert!(sparse.u_g.max_abs_diff(&dense.u_g) < 1e-12);
    assert!(sparse.u_l.max_abs_diff(&dense.u_l) < 1e-12);
    for (wide_v, narrow_v) in [(&sparse.v_g, &dense.v_g), (&sparse.v_l, &dense.v_l)] {
        for r in 0..n2 {
            for c in 0..narrow_v.cols() {
                assert!((wide_v[(r, c)] - narrow_v[(r, c)]).abs() < 1e-12);
            }
        }
    }
}

fn small_problem(seed: u64) -> (ObservationSet, hmf::GroundTruth) {
    let mut cfg = SynthConfig::uniform(12, 15, 4, 2, 2, seed).with_unit_spectrum();
    cfg.noise_scale = 1e-3;
    generate_instance(&cfg).unwrap()
}

#[test]
fn zero_iterations_yield_one_record() {
    let (obs, _) = small_problem(0);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.max_iters = 0;
    let (state, trace) = fit(&obs, &FitConfig::new(params)).unwrap();
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.iterations_run, 0);
    assert!(state.is_finite());
}

#[test]
fn fits_are_deterministic() {
    let (obs, truth) = small_problem(1);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.max_iters = 50;
    params.seed = 9;
    let mut cfg = FitConfig::new(params);
    cfg.reference = Some(truth);
    let a = fit(&obs, &cfg).unwrap();
    let b = fit(&obs, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn parallel_clients_reproduce_sequential_bits() {
    let (obs, truth) = small_problem(2);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.max_iters = 40;
    let mut cfg = FitConfig::new(params);
    cfg.reference = Some(truth);
    let seq = fit(&obs, &cfg).unwrap();
    for workers in [1, 2, 3, 8] {
        cfg.execution = Execution::ParallelClients(workers);
        assert_eq!(fit(&obs, &cfg).unwrap(), seq);
    }
}

#[test]
fn huge_fixed_stepsize_diverges_with_partial_trace() {
    let (obs, _) = small_problem(3);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.stepsize = StepsizePolicy::Fixed(1e3);
    params.max_iters = 200;
    match fit(&obs, &FitConfig::new(params)) {
        Err(HmfError::Divergence { iteration, trace, .. }) => {
            assert!(!trace.records.is_empty());
            assert_eq!(trace.records.last().unwrap().iter, iteration);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn gradient_tolerance_stops_early() {
    let (obs, _) = small_problem(4);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.max_iters = 5000;
    params.grad_tol = 1e-6;
    let (_, trace) = fit(&obs, &FitConfig::new(params)).unwrap();
    assert!(trace.converged);
    assert!(trace.iterations_run < 5000);
    assert!(trace.last().unwrap().grad_norm_sq < 1e-6);
}

#[test]
fn trace_every_thins_records_but_keeps_the_last() {
    let (obs, _) = small_problem(5);
    let mut params = HyperParams::uniform(2, 2, 4);
    params.max_iters = 25;
    let mut cfg = FitConfig::new(params);
    cfg.trace_every = 10;
    let (_, trace) = fit(&obs, &cfg).unwrap();
    let iters: Vec<usize> = trace.records.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![0, 10, 20, 25]);
}

#[test]
fn invalid_inputs_are_reported_together() {
    let (obs, _) = small_problem(6);
    let mut params = HyperParams::uniform(0, 2, 3);
    params.beta = -1.0;
    match fit(&obs, &FitConfig::new(params)) {
        Err(HmfError::Invalid(problems)) => assert!(problems.len() >= 2, "{problems:?}"),
        other => panic!("expected invalid input, got {other:?}"),
    }
    let params = HyperParams::uniform(2, 2, 4);
    let mut cfg = FitConfig::new(params);
    cfg.execution = Execution::ParallelClients(0);
    assert!(matches!(fit(&obs, &cfg), Err(HmfError::Invalid(_))));
}

#[test]
fn init_streams_do_not_depend_on_source_count() {
    let (obs, _) = small_problem(7);
    let short = ObservationSet::new(obs.sources[..2].to_vec()).unwrap();
    let mut params = HyperParams::uniform(2, 2, 4);
    params.seed = 5;
    let full = init_state(&obs, &params).unwrap();
    params.r2.truncate(2);
    let part = init_state(&short, &params).unwrap();
    assert_eq!(full.u_g, part.u_g);
    assert_eq!(full.locals[..2], part.locals[..]);
}

#[test]
fn auto_stepsize_uses_largest_spectral_norm() {
    let a = SourceObservation::dense(DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]));
    let b = SourceObservation::dense(DenseMatrix::from_rows(&[[4.0, 0.0], [0.0, 0.5]]));
    let obs = ObservationSet::new(vec![a, b]).unwrap();
    let eta = solver::resolve_stepsize(&obs, StepsizePolicy::Auto(0.25)).unwrap();
    assert!((eta - 0.25 / 16.0).abs() < 1e-12);
    assert!(solver::resolve_stepsize(&obs, StepsizePolicy::Fixed(-1.0)).is_err());
    assert!(solver::resolve_stepsize(&obs, StepsizePolicy::Auto(2.0)).is_err());
}

#[test]
fn server_average_is_order_fixed() {
    let mut g = rng(8);
    let parts: Vec<DenseMatrix> = (0..7).map(|_| gaussian(&mut g, 3, 2)).collect();
    let avg = server_average(&parts).unwrap();
    let mut expected = DenseMatrix::zeros(3, 2);
    for p in &parts {
        expected = expected.add(p).unwrap();
    }
    assert_eq!(avg, expected.map(|x| x / 7.0));
}
