use mfchain::bsde::ValueField;
use mfchain::chain::measure::{ProbVector, TimeGrid};
use mfchain::chain::space::{validate_generator, Generator, StateSpace};
use mfchain::control::{
    brute_force_oracle, certify_near_optimal, ekeland_distance, evaluate_cost, minimize_hamiltonian, policy_value,
    reference_flow, solve_control, ControlGrid, ControlProblem, CostMethod, FeedbackPolicy, Players, SolveOptions,
};
use mfchain::mean_field::PicardOptions;
use mfchain::model::{FnCost, QuadraticCost, TabulatedModel};
use mfchain::Error;
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    model: TabulatedModel,
    cost: QuadraticCost,
    gen: Generator,
    xi: ProbVector,
    grid: TimeGrid,
}

impl Instance {
    fn problem(&self) -> ControlProblem<'_> {
        ControlProblem {
            model: &self.model,
            cost: &self.cost,
            gen: &self.gen,
            xi: self.xi.clone(),
            grid: self.grid.clone(),
            picard: PicardOptions { entropy: false, ..PicardOptions::default() },
        }
    }
}

/// Two states, mean field through `||mu||_1` in the up rate, and a dominant
/// action `u = 1` in both states.
fn dominance(cells: usize) -> Instance {
    let s = StateSpace::new(2).unwrap();
    let model = TabulatedModel::new(s.clone(), &[vec![0.0, 1.0], vec![0.5, 0.0]], 0.5)
        .unwrap()
        .with_mean_coeffs(&[vec![0.0, 0.3], vec![0.0, 0.0]])
        .unwrap()
        .with_u_coeffs(&[vec![0.0, -0.5], vec![0.5, 0.0]])
        .unwrap();
    let mut cost = QuadraticCost::zero(s);
    cost.state = vec![0.0, 1.0];
    cost.u_quad = 0.2;
    cost.u_lin = -0.5;
    cost.terminal = vec![0.0, 0.5];
    let gen = model.base_generator().unwrap();
    Instance { model, cost, gen, xi: ProbVector::dirac(2, 0), grid: TimeGrid::uniform(1.0, cells).unwrap() }
}

/// State-swap invariant instance without mean-field coupling.
fn symmetric(cells: usize) -> Instance {
    let s = StateSpace::new(2).unwrap();
    let model = TabulatedModel::new(s.clone(), &[vec![0.0, 1.0], vec![1.0, 0.0]], 0.5)
        .unwrap()
        .with_u_coeffs(&[vec![0.0, 0.5], vec![0.5, 0.0]])
        .unwrap();
    let mut cost = QuadraticCost::zero(s);
    cost.u_quad = 0.2;
    cost.u_lin = -0.5;
    let gen = model.base_generator().unwrap();
    Instance { model, cost, gen, xi: ProbVector::uniform(2), grid: TimeGrid::uniform(1.0, cells).unwrap() }
}

fn actions() -> ControlGrid {
    ControlGrid::new(vec![0.0, 0.5, 1.0]).unwrap()
}

#[test]
fn dominance_instance_matches_oracle() {
    let inst = dominance(2);
    let p = inst.problem();
    let g = actions();
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    assert!((0..3).all(|k| (0..2).all(|i| sol.u_policy.at(k, i) == 2)));
    let oracle = brute_force_oracle(&p, &g, 2, 2).unwrap();
    assert_eq!(oracle.table.len(), 81);
    assert!(sol.cost <= oracle.best_cost + 1e-8, "{} vs {}", sol.cost, oracle.best_cost);
    let rep = certify_near_optimal(sol.cost, 1e-6, &oracle).unwrap();
    assert!(rep.passed && rep.slack <= 1e-8);
}

#[test]
fn optimal_field_is_below_every_policy_field() {
    let inst = dominance(2);
    let p = inst.problem();
    let g = actions();
    let players = Players { u: &g, v: None };
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    let mut r = mfchain::rng::stream(17, 0);
    for _ in 0..20 {
        let enc: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
        let u = FeedbackPolicy::from_coarse(&p.grid, 2, 2, &enc);
        let (_, vf) = policy_value(&p, players, &u, None).unwrap();
        for k in 0..p.grid.nodes() {
            for i in 0..2 {
                assert!(sol.value.y(k, i) <= vf.y(k, i) + 1e-10);
                assert!(sol.hamiltonian_field.y(k, i) <= vf.y(k, i) + 1e-10);
            }
        }
    }
}

#[test]
fn selection_is_pointwise_minimal() {
    let inst = dominance(10);
    let p = inst.problem();
    let g = actions();
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    let f: &ValueField = &sol.hamiltonian_field;
    for k in 0..p.grid.nodes() {
        for i in 0..2 {
            let z = f.z_row(k, i);
            let mu = sol.flow.at_node(k);
            let (a, _) = minimize_hamiltonian(p.model, p.cost, p.gen, p.grid.t(k), i, mu, &z, &g).unwrap();
            assert_eq!(a, sol.u_policy.at(k, i));
        }
    }
}

#[test]
fn field_and_monte_carlo_costs_agree() {
    let inst = dominance(10);
    let p = inst.problem();
    let g = actions();
    let players = Players { u: &g, v: None };
    let u = FeedbackPolicy::constant(11, 2, 1);
    let field = evaluate_cost(&p, players, &u, None, CostMethod::Field).unwrap();
    let mc =
        evaluate_cost(&p, players, &u, None, CostMethod::MonteCarlo { n_paths: 10_000, seed: 3, workers: 2 }).unwrap();
    let se = mc.se.unwrap();
    assert!((field.value - mc.value).abs() <= 3.0 * se, "{} vs {} ({se})", field.value, mc.value);
}

#[test]
fn unit_running_cost_gives_horizon() {
    let inst = dominance(8);
    let cost = FnCost::new(|_, _, _, _| 1.0, |_, _| 0.0);
    let p = ControlProblem { cost: &cost, ..inst.problem() };
    let g = actions();
    let players = Players { u: &g, v: None };
    let u = FeedbackPolicy::constant(9, 2, 0);
    let field = evaluate_cost(&p, players, &u, None, CostMethod::Field).unwrap();
    assert!((field.value - 1.0).abs() < 1e-12);
    let mc =
        evaluate_cost(&p, players, &u, None, CostMethod::MonteCarlo { n_paths: 2000, seed: 1, workers: 1 }).unwrap();
    assert!((mc.value - 1.0).abs() <= 3.0 * mc.se.unwrap() + 1e-12);

    let zero = QuadraticCost::zero(StateSpace::new(2).unwrap());
    let p = ControlProblem { cost: &zero, ..inst.problem() };
    assert_eq!(evaluate_cost(&p, players, &u, None, CostMethod::Field).unwrap().value, 0.0);
}

#[test]
fn singleton_grid_reduces_to_policy_evaluation() {
    let inst = dominance(6);
    let p = inst.problem();
    let g = ControlGrid::singleton(0.5);
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    let players = Players { u: &g, v: None };
    let direct = evaluate_cost(&p, players, &FeedbackPolicy::constant(7, 2, 0), None, CostMethod::Field).unwrap();
    assert!((sol.cost - direct.value).abs() < 1e-12);
    let oracle = brute_force_oracle(&p, &g, 3, 1).unwrap();
    assert_eq!(oracle.table.len(), 1);
}

#[test]
fn separable_instance_picks_free_action() {
    let s = StateSpace::new(2).unwrap();
    let model = TabulatedModel::new(s.clone(), &[vec![0.0, 1.0], vec![1.0, 0.0]], 0.5).unwrap();
    let mut cost = QuadraticCost::zero(s);
    cost.u_quad = 1.0;
    let gen = validate_generator(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let p = ControlProblem {
        model: &model,
        cost: &cost,
        gen: &gen,
        xi: ProbVector::uniform(2),
        grid: TimeGrid::uniform(1.0, 4).unwrap(),
        picard: PicardOptions::default(),
    };
    let g = ControlGrid::new(vec![1.0, 0.0, 0.5]).unwrap();
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    assert_eq!(sol.u_policy, FeedbackPolicy::constant(5, 2, 1));
    assert_eq!(sol.cost, 0.0);
}

#[test]
fn symmetric_instance_has_symmetric_optimum() {
    let inst = symmetric(2);
    let p = inst.problem();
    let g = actions();
    let oracle = brute_force_oracle(&p, &g, 2, 4).unwrap();
    assert_eq!(oracle.table.len(), 81);
    for e in &oracle.table {
        let swapped = [e.encoded[1], e.encoded[0], e.encoded[3], e.encoded[2]];
        let twin = oracle.table.iter().find(|o| o.encoded == swapped).unwrap();
        assert!((twin.cost - e.cost).abs() < 1e-12);
    }
    let best = &oracle.table[oracle.best];
    assert_eq!((best.encoded[0], best.encoded[2]), (best.encoded[1], best.encoded[3]));
    let sol = solve_control(&p, &g, &SolveOptions::default()).unwrap();
    certify_near_optimal(sol.cost, 1e-6, &oracle).unwrap();
}

#[test]
fn bad_policy_fails_certification() {
    let inst = dominance(2);
    let p = inst.problem();
    let g = actions();
    let oracle = brute_force_oracle(&p, &g, 2, 1).unwrap();
    let players = Players { u: &g, v: None };
    let bad = evaluate_cost(&p, players, &FeedbackPolicy::constant(3, 2, 0), None, CostMethod::Field).unwrap();
    let err = certify_near_optimal(bad.value, 1e-6, &oracle).unwrap_err();
    assert!(matches!(err, Error::CertificationFailed { .. }));
    let own = certify_near_optimal(oracle.best_cost, 1e-300, &oracle).unwrap();
    assert_eq!(own.slack, 0.0);
}

#[test]
fn oracle_guard_refuses_large_enumeration() {
    let inst = dominance(20);
    let p = inst.problem();
    let err = brute_force_oracle(&p, &actions(), 20, 1).unwrap_err();
    assert!(matches!(err, Error::TooLarge { .. }));
}

#[test]
fn ekeland_examples() {
    let gen = validate_generator(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let grid = TimeGrid::uniform(2.0, 8).unwrap();
    let flow = reference_flow(&gen, &ProbVector::uniform(2), &grid).unwrap();
    let u = FeedbackPolicy::constant(9, 2, 0);
    let v = FeedbackPolicy::constant(9, 2, 1);
    let w = FeedbackPolicy::from_fn(9, 2, |_, i| if i == 0 { 1 } else { 0 });
    assert_eq!(ekeland_distance(&u, &u, &flow).unwrap(), 0.0);
    assert!((ekeland_distance(&u, &v, &flow).unwrap() - 2.0).abs() < 1e-12);
    assert!((ekeland_distance(&u, &w, &flow).unwrap() - 1.0).abs() < 1e-12);
}

fn policy_strategy() -> impl Strategy<Value = FeedbackPolicy> {
    proptest::collection::vec(0usize..3, 7 * 3).prop_map(|v| FeedbackPolicy::from_fn(7, 3, |k, i| v[k * 3 + i]))
}

proptest! {
    #[test]
    fn ekeland_is_a_pseudometric(u in policy_strategy(), v in policy_strategy(), w in policy_strategy()) {
        let gen = validate_generator(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let grid = TimeGrid::uniform(1.5, 6).unwrap();
        let flow = reference_flow(&gen, &ProbVector::dirac(3, 0), &grid).unwrap();
        let d = |a: &FeedbackPolicy, b: &FeedbackPolicy| ekeland_distance(a, b, &flow).unwrap();
        prop_assert_eq!(d(&u, &u), 0.0);
        prop_assert_eq!(d(&u, &v), d(&v, &u));
        prop_assert!(d(&u, &w) <= d(&u, &v) + d(&v, &w) + 1e-12);
        prop_assert!(d(&u, &v) >= 0.0 && d(&u, &v) <= 1.5 + 1e-12);
    }
}
