use mfchain::bsde::{solve_bsde, verify_comparison, PolicyDriver};
use mfchain::chain::forward::solve_forward;
use mfchain::chain::measure::{relative_entropy, tv_distance, MeasureFlow, ProbVector, TimeGrid};
use mfchain::chain::paths::simulate_paths;
use mfchain::chain::space::{validate_generator, RateMatrix, StateSpace};
use mfchain::girsanov::TiltContext;
use mfchain::model::{ControlSchedule, GeneratorModel, QuadraticCost, TabulatedModel};
use proptest::prelude::*;

fn law(n: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter("positive mass", |v| v.iter().sum::<f64>() > 1e-3).prop_map(|v| {
        let total: f64 = v.iter().sum();
        ProbVector::new(v.iter().map(|x| x / total).collect()).unwrap()
    })
}

fn rates(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.05f64..3.0, n), n).prop_map(|mut r| {
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        r
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_a_metric_with_range_two(p in law(4), q in law(4), r in law(4)) {
        let d = |a: &ProbVector, b: &ProbVector| tv_distance(a, b).unwrap();
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert_eq!(d(&p, &q), d(&q, &p));
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-15);
        prop_assert!(d(&p, &q) <= 2.0 + 1e-15);
    }

    #[test]
    fn scalar_pinsker_holds(p in law(5), q in law(5)) {
        let kl = relative_entropy(&p, &q).unwrap();
        let tv = tv_distance(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!(tv * tv <= 2.0 * kl + 1e-12, "tv {} kl {}", tv, kl);
    }

    #[test]
    fn forward_flow_conserves_mass(raw in rates(4), xi in law(4), cells in 1usize..12) {
        let grid = TimeGrid::uniform(1.5, cells).unwrap();
        let q = vec![RateMatrix::from_rows(&raw).unwrap(); cells];
        let flow = solve_forward(&q, &xi, &grid).unwrap();
        for mu in flow.nodes() {
            prop_assert!((mu.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(mu.mass().iter().all(|m| *m >= 0.0));
        }
    }

    #[test]
    fn untilted_paths_have_unit_density(raw in rates(3), seed in 0u64..1000) {
        let gen = validate_generator(&raw).unwrap();
        let model = GeneratorModel::new(StateSpace::new(3).unwrap(), gen.clone()).unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let xi = ProbVector::uniform(3);
        let flow = MeasureFlow::constant(grid, xi.clone());
        let sched = ControlSchedule::none(4, 3);
        let tilt = TiltContext::new(&model, &gen, &flow, &sched).unwrap();
        let ens = simulate_paths(&gen, &xi, 1.0, 20, seed, 1).unwrap();
        for p in &ens.paths {
            prop_assert!(tilt.log_density(p).unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn path_sampling_ignores_worker_count(raw in rates(3), seed in 0u64..1000) {
        let gen = validate_generator(&raw).unwrap();
        let xi = ProbVector::uniform(3);
        let a = simulate_paths(&gen, &xi, 1.0, 50, seed, 1).unwrap();
        let b = simulate_paths(&gen, &xi, 1.0, 50, seed, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn comparison_holds_for_ordered_data(
        raw in rates(3),
        f2 in prop::collection::vec(-1.0f64..1.0, 3),
        df in prop::collection::vec(0.0f64..1.0, 3),
        h2 in prop::collection::vec(-1.0f64..1.0, 3),
        dh in prop::collection::vec(0.0f64..1.0, 3),
    ) {
        let s = StateSpace::new(3).unwrap();
        let model = TabulatedModel::new(s.clone(), &raw, 0.05).unwrap();
        let grid = TimeGrid::uniform(1.0, 6).unwrap();
        let flow = MeasureFlow::constant(grid, ProbVector::uniform(3));
        let sched = ControlSchedule::none(6, 3);
        let mut c2 = QuadraticCost::zero(s);
        c2.state = f2.clone();
        c2.terminal = h2.clone();
        let mut c1 = c2.clone();
        c1.state = f2.iter().zip(&df).map(|(a, b)| a + b).collect();
        c1.terminal = h2.iter().zip(&dh).map(|(a, b)| a + b).collect();
        let d1 = PolicyDriver { model: &model, cost: &c1, flow: &flow, schedule: &sched };
        let d2 = PolicyDriver { model: &model, cost: &c2, flow: &flow, schedule: &sched };
        let rep = verify_comparison(&solve_bsde(&d1).unwrap(), &solve_bsde(&d2).unwrap(), &d1, &d2).unwrap();
        prop_assert!(rep.holds, "margin {}", rep.min_margin);
    }
}
