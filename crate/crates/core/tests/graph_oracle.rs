use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wpgrec::gradcheck::check_gradients;
use wpgrec::graph::{
    build_bipartite, init_cheby_params, propagate, propagate_on_tape, scaled_laplacian, theta_name, BipartiteGraph,
    ChebyLayerParams,
};
use wpgrec::optim::ParameterStore;
use wpgrec::tape::Tape;
use wpgrec::Tensor;

/// Random bipartite graph with at most `max_nodes` nodes in total.
fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> BipartiteGraph {
    let users = rng.random_range(1..max_nodes);
    let items = rng.random_range(1..=max_nodes - users);
    let n_edges = rng.random_range(0..=users * items + 2);
    let edges: Vec<(usize, usize)> = (0..n_edges)
        .map(|_| (rng.random_range(0..users), rng.random_range(0..items)))
        .collect();
    build_bipartite(&edges, users, items).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, layers: usize, k: usize, d: usize) -> ChebyLayerParams {
    ChebyLayerParams::new((0..layers).map(|_| (0..=k).map(|_| random_tensor(rng, d, d)).collect()).collect()).unwrap()
}

/// Materializes every `T_k(L̃)` densely and evaluates the polynomial layer by layer.
fn dense_oracle(l: &Tensor, h0: &Tensor, params: &ChebyLayerParams) -> Tensor {
    let n = l.rows();
    let mut polys = vec![Tensor::identity(n), l.clone()];
    for k in 2..=params.order() {
        let next = l.matmul(&polys[k - 1]).unwrap().scale(2.0).sub(&polys[k - 2]).unwrap();
        polys.push(next);
    }
    let mut h = h0.clone();
    for layer in &params.thetas {
        let mut acc = Tensor::zeros(h.shape());
        for (k, theta) in layer.iter().enumerate() {
            acc = acc.add(&polys[k].matmul(&h).unwrap().matmul(theta).unwrap()).unwrap();
        }
        h = acc;
    }
    h
}

/// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
fn symmetric_eigenvalues(m: &Tensor) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

#[test]
fn recurrence_matches_dense_polynomials_on_200_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let g = random_graph(&mut rng, 10);
        let lap = scaled_laplacian(&g);
        let k = rng.random_range(0..=3);
        let layers = rng.random_range(0..=2);
        let d = rng.random_range(1..=4);
        let params = random_params(&mut rng, layers, k, d);
        let h0 = random_tensor(&mut rng, g.num_nodes(), d);
        let fast = propagate(&lap, &h0, &params, false).unwrap();
        let oracle = dense_oracle(&lap.matrix.to_dense(), &h0, &params);
        assert!(fast.max_abs_diff(&oracle) <= 1e-10, "diff {}", fast.max_abs_diff(&oracle));
    }
}

#[test]
fn toy_graph_two_layers_order_two() {
    let g = build_bipartite(&[(0, 0), (0, 1), (1, 1)], 2, 2).unwrap();
    let lap = scaled_laplacian(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_params(&mut rng, 2, 2, 3);
    let h0 = random_tensor(&mut rng, 4, 3);
    let fast = propagate(&lap, &h0, &params, false).unwrap();
    assert!(fast.max_abs_diff(&dense_oracle(&lap.matrix.to_dense(), &h0, &params)) <= 1e-10);
}

#[test]
fn laplacian_spectrum_lies_in_unit_interval() {
    // Path graph user0 - item0 - user1.
    let path = build_bipartite(&[(0, 0), (1, 0)], 2, 1).unwrap();
    let eig = symmetric_eigenvalues(&scaled_laplacian(&path).matrix.to_dense());
    assert!(eig.iter().all(|&e| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&e)), "{eig:?}");
    let mut sorted = eig.clone();
    sorted.sort_by(f64::total_cmp);
    assert!((sorted[0] + 1.0).abs() < 1e-10 && sorted[1].abs() < 1e-10 && (sorted[2] - 1.0).abs() < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let g = random_graph(&mut rng, 10);
        let lap = scaled_laplacian(&g);
        assert!(lap.matrix.is_symmetric());
        let eig = symmetric_eigenvalues(&lap.matrix.to_dense());
        assert!(eig.iter().all(|&e| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&e)), "{eig:?}");
    }
}

#[test]
fn empty_edge_set_alternates_theta0_terms() {
    let g = build_bipartite(&[], 2, 3).unwrap();
    let lap = scaled_laplacian(&g);
    assert_eq!(lap.matrix.nnz(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = random_params(&mut rng, 2, 3, 2);
    let h0 = random_tensor(&mut rng, 5, 2);
    // With L̃ = 0: T_0 H = H, T_1 H = 0, T_2 H = −H, T_3 H = 0.
    let mut expected = h0.clone();
    for layer in &params.thetas {
        expected = expected.matmul(&layer[0]).unwrap().sub(&expected.matmul(&layer[2]).unwrap()).unwrap();
    }
    assert!(propagate(&lap, &h0, &params, false).unwrap().max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn theta_gradient_matches_finite_differences() {
    let g = build_bipartite(&[(0, 0), (0, 2), (1, 1), (2, 2), (2, 0)], 3, 3).unwrap();
    let lap = scaled_laplacian(&g);
    let mut store = ParameterStore::new(11);
    init_cheby_params(&mut store, "cheby", 2, 2, 3).unwrap();
    store.init_normal("h0", &[6, 3], 1.0).unwrap();
    let readout = Tensor::matrix(6, 3, (0..18).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    let build = |t: &mut Tape, s: &ParameterStore| {
        let h0 = t.param("h0", s.require("h0")?);
        let layers = (1..=2)
            .map(|l| (0..=2).map(|k| {
                let name = theta_name("cheby", l, k);
                s.require(&name).map(|v| t.param(&name, v))
            }).collect())
            .collect::<wpgrec::Result<Vec<Vec<_>>>>()?;
        let h = propagate_on_tape(t, &lap.matrix, h0, &layers, false)?;
        let r = t.constant(readout.clone());
        let p = t.mul(h, r)?;
        Ok(t.sum(p))
    };
    let mut tape = Tape::new();
    let l = build(&mut tape, &store).unwrap();
    let grads = tape.backward(l).unwrap();
    let checks = check_gradients(&store, &grads, |s| {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        t.value(l).item()
    }, |_| true)
    .unwrap();
    assert!(checks.iter().any(|c| c.name == "cheby.l1.k1"));
    for c in checks {
        assert!(c.rel_error < 1e-4, "{} {:.3e}", c.name, c.rel_error);
    }
}

#[test]
fn beauty_scale_graph_builds() {
    let (users, items) = (22_363, 12_101);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let edges: Vec<(usize, usize)> = (0..200_000).map(|_| (rng.random_range(0..users), rng.random_range(0..items))).collect();
    let g = build_bipartite(&edges, users, items).unwrap();
    assert_eq!(g.num_nodes(), 34_464);
    assert_eq!(g.adjacency.nnz(), 2 * g.num_edges());
    let lap = scaled_laplacian(&g);
    assert!(lap.matrix.values().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    let h = Tensor::full(&[g.num_nodes(), 2], 1.0);
    let out = lap.matrix.spmm(&h).unwrap();
    assert!(out.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagation_is_linear_in_features(seed in 0u64..10_000, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 10);
        let lap = scaled_laplacian(&g);
        let params = random_params(&mut rng, 2, 2, 3);
        let h = random_tensor(&mut rng, g.num_nodes(), 3);
        let lhs = propagate(&lap, &h.scale(a), &params, false).unwrap();
        let rhs = propagate(&lap, &h, &params, false).unwrap().scale(a);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn adjacency_is_symmetric_without_self_loops(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 12);
        prop_assert!(g.adjacency.is_symmetric());
        prop_assert!((0..g.num_nodes()).all(|v| g.adjacency.get(v, v) == 0.0));
        prop_assert_eq!(g.adjacency.nnz(), 2 * g.num_edges());
    }
}
