use nalgebra::DMatrix;
use proptest::prelude::*;

use epinet::chain::{self, ChainState, StateSpace};
use epinet::graph;
use epinet::meanfield::{self, MeanFieldPoint};
use epinet::montecarlo::{self, InitialCondition};
use epinet::{Graph, ModelSpec, Variant};

fn graph_strategy(max_n: usize) -> impl Strategy<Value = Graph> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
            let pairs = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)));
            let edges: Vec<_> = pairs.zip(bits).filter(|&(_, b)| b).map(|(e, _)| e).collect();
            Graph::from_edges(n, edges).unwrap()
        })
    })
}

fn rate() -> impl Strategy<Value = f64> {
    0.01f64..0.99
}

fn model_for(variant: usize, r: [f64; 4], n: usize) -> ModelSpec {
    let [b, d, g, th] = r;
    match variant % 6 {
        0 => ModelSpec::sis_nia(b, d).unwrap(),
        1 => ModelSpec::sis_ia(b, d).unwrap(),
        2 => ModelSpec::general(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - d } else { b * ((i + j) % 3) as f64 / 2.0 }))
            .unwrap(),
        3 => ModelSpec::sirs(b, d, g).unwrap(),
        4 => ModelSpec::siv(Variant::SivId, b, d, g, th).unwrap(),
        _ => ModelSpec::siv(Variant::SivVd, b, d, g, th).unwrap(),
    }
}

fn point_strategy(n: usize, three_state: bool) -> impl Strategy<Value = MeanFieldPoint> {
    proptest::collection::vec((0.02f64..0.98, 0.02f64..0.98), n).prop_map(move |v| {
        let p_i: Vec<f64> = v.iter().map(|&(a, _)| a).collect();
        let p_r = three_state.then(|| v.iter().map(|&(a, b)| 0.98 * b * (1.0 - a)).collect());
        MeanFieldPoint::new(p_i, p_r)
    })
}

fn instance(max_n: usize) -> impl Strategy<Value = (Graph, ModelSpec)> {
    (graph_strategy(max_n), 0usize..6, [rate(), rate(), rate(), rate()]).prop_map(|(g, v, r)| {
        let m = model_for(v, r, g.n());
        (g, m)
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_are_stochastic((g, m) in instance(4)) {
        let s = chain::build_transition_matrix(&m, &g).unwrap();
        for x in 0..s.size() {
            let row = s.row(x);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0 + 1e-15).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_commutes_with_relabelling(
        (g, m, perm) in instance(4).prop_filter("unweighted contact", |(_, m)| m.variant() != Variant::SisGeneral)
            .prop_flat_map(|(g, m)| { let n = g.n(); (Just(g), Just(m), permutation(n)) })
    ) {
        let s = chain::build_transition_matrix(&m, &g).unwrap();
        let sp = chain::build_transition_matrix(&m, &g.permuted(&perm).unwrap()).unwrap();
        let space = StateSpace::for_model(&m, g.n()).unwrap();
        let relabel = |x: usize| {
            let d = space.decode(ChainState(x));
            let mut out = vec![0u8; d.len()];
            for (i, &v) in d.iter().enumerate() {
                out[perm[i]] = v;
            }
            space.encode(&out).unwrap().0
        };
        for x in 0..s.size() {
            for y in 0..s.size() {
                prop_assert!((s.get(x, y) - sp.get(relabel(x), relabel(y))).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn mean_field_commutes_with_relabelling(
        (g, m, perm, x) in instance(8).prop_filter("unweighted contact", |(_, m)| m.variant() != Variant::SisGeneral)
            .prop_flat_map(|(g, m)| {
                let n = g.n();
                let three = m.states_per_node() == 3;
                (Just(g), Just(m), permutation(n), point_strategy(n, three))
            })
    ) {
        let image = meanfield::mf_step(&m, &g, &x).unwrap();
        let n = g.n();
        let mut px = vec![0.0; n];
        let mut pr = x.p_r.as_ref().map(|_| vec![0.0; n]);
        for i in 0..n {
            px[perm[i]] = x.p_i[i];
            if let Some(r) = pr.as_mut() {
                r[perm[i]] = x.p_r_or_zero(i);
            }
        }
        let moved = meanfield::mf_step(&m, &g.permuted(&perm).unwrap(), &MeanFieldPoint::new(px, pr)).unwrap();
        for i in 0..n {
            prop_assert!((moved.p_i[perm[i]] - image.p_i[i]).abs() <= 1e-14);
            prop_assert!((moved.p_r_or_zero(perm[i]) - image.p_r_or_zero(i)).abs() <= 1e-14);
        }
    }

    #[test]
    fn jacobian_matches_central_differences(
        (g, m, x) in instance(6).prop_flat_map(|(g, m)| {
            let n = g.n();
            let three = m.states_per_node() == 3;
            (Just(g), Just(m), point_strategy(n, three))
        })
    ) {
        let jac = meanfield::mf_jacobian(&m, &g, &x).unwrap();
        let flat = x.flatten();
        let h = 1e-6;
        for c in 0..flat.len() {
            let (mut up, mut down) = (flat.clone(), flat.clone());
            up[c] += h;
            down[c] -= h;
            let fu = meanfield::mf_step(&m, &g, &MeanFieldPoint::from_flat(&m, &up)).unwrap().flatten();
            let fd = meanfield::mf_step(&m, &g, &MeanFieldPoint::from_flat(&m, &down)).unwrap().flatten();
            for r in 0..flat.len() {
                let fd_entry = (fu[r] - fd[r]) / (2.0 * h);
                prop_assert!((jac[(r, c)] - fd_entry).abs() <= 1e-6, "entry ({r},{c}): {} vs {fd_entry}", jac[(r, c)]);
            }
        }
    }

    #[test]
    fn vaccination_free_siv_reduces_to_sirs(
        (g, x) in graph_strategy(8).prop_flat_map(|g| { let n = g.n(); (Just(g), point_strategy(n, true)) }),
        b in rate(), d in rate(), gam in rate(),
    ) {
        let sirs = meanfield::mf_step(&ModelSpec::sirs(b, d, gam).unwrap(), &g, &x).unwrap();
        for v in [Variant::SivId, Variant::SivVd] {
            let siv = meanfield::mf_step(&ModelSpec::siv(v, b, d, gam, 0.0).unwrap(), &g, &x).unwrap();
            prop_assert!(siv.sup_distance(&sirs) <= 1e-15);
        }
    }

    #[test]
    fn non_immune_map_is_monotone(
        (g, pair) in graph_strategy(10)
            .prop_flat_map(|g| { let n = g.n(); (Just(g), proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), n)) }),
        b in rate(), d in rate(),
    ) {
        let m = ModelSpec::sis_nia(b, d).unwrap();
        let lo: Vec<f64> = pair.iter().map(|&(a, t)| a * t).collect();
        let hi: Vec<f64> = pair.iter().map(|&(a, _)| a).collect();
        let flo = meanfield::mf_step(&m, &g, &MeanFieldPoint::new(lo, None)).unwrap();
        let fhi = meanfield::mf_step(&m, &g, &MeanFieldPoint::new(hi, None)).unwrap();
        prop_assert!(flo.p_i.iter().zip(&fhi.p_i).all(|(a, b)| *a <= *b + 1e-15));
    }

    #[test]
    fn iteration_from_the_top_corner_decreases(g in graph_strategy(10), b in rate(), d in rate()) {
        let m = ModelSpec::sis_nia(b, d).unwrap();
        let path = meanfield::mf_iterate(&m, &g, &MeanFieldPoint::upper_corner(&m, g.n()), 40).unwrap();
        for w in path.windows(2) {
            prop_assert!(w[1].p_i.iter().zip(&w[0].p_i).all(|(a, b)| *a <= *b + 1e-15));
        }
    }

    #[test]
    fn linear_map_dominates_the_mean_field(
        seed in any::<u64>(), n in 2usize..50, p in 0.02f64..0.5, b in rate(), d in rate(),
        raw in proptest::collection::vec(0.0f64..1.0, 50),
    ) {
        let g = graph::generate(graph::GraphKind::Er { n, p }, seed).unwrap();
        let m = ModelSpec::sis_nia(b, d).unwrap();
        let x = MeanFieldPoint::new(raw[..n].to_vec(), None);
        prop_assert!(meanfield::linear_bound_check(&m, &g, &x).unwrap() >= -1e-12);
    }

    #[test]
    fn simulation_is_reproducible_and_conserves_nodes(
        (g, m) in instance(12), seed in any::<u64>(), rep in 0u64..4,
    ) {
        let init = InitialCondition::Fraction(0.5);
        let a = montecarlo::mc_run(&m, &g, &init, 30, seed, rep).unwrap();
        let b = montecarlo::mc_run(&m, &g, &init, 30, seed, rep).unwrap();
        prop_assert_eq!(&a, &b);
        for row in &a.rows {
            prop_assert_eq!(row.s + row.i + row.r, g.n());
        }
        if let Some(t) = a.absorbed_at {
            prop_assert_eq!(a.rows.last().unwrap().t, t);
            prop_assert!(m.variant() != Variant::SivId && m.variant() != Variant::SivVd);
        }
        let ens = montecarlo::mc_ensemble(&m, &g, &init, 30, rep as usize + 1, seed, &[]).unwrap();
        let last = a.rows.last().unwrap();
        let replicate_i = |t: usize| a.rows.get(t).unwrap_or(last).i as f64;
        if rep == 0 {
            for t in 0..=30 {
                prop_assert_eq!(ens.mean_i[t], replicate_i(t));
            }
        }
    }

    #[test]
    fn edge_list_round_trip(g in graph_strategy(12)) {
        let back = graph::parse_edge_list(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back.n(), g.n());
        prop_assert_eq!(back.edges(), g.edges());
    }

    #[test]
    fn state_codes_round_trip(n in 1usize..=8, k in 2usize..=3, code in any::<usize>()) {
        let space = StateSpace::new(n, k).unwrap();
        let x = ChainState(code % space.size());
        prop_assert_eq!(space.encode(&space.decode(x)).unwrap(), x);
    }
}
