use proptest::prelude::*;

use maven_core::analysis::{
    branch_crossing, closed_form_delta_limit, closed_form_projection, coefficients, delta_bound_eps,
    delta_bound_uniform, is_nonmonotonic, numerical_projection_oracle, ordering_set, projection_kkt,
    visitation_probability_bound, Branch, EpsBoundForm, Visitation, KKT_TOLERANCE,
};
use maven_core::game::{template_payoff, JointAction, PayoffTensor};

/// All permutations of `0..k`.
fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Orders (best first) consistent with the payoffs `q`.
fn consistent_orders(q: &[f64]) -> Vec<Vec<usize>> {
    permutations(q.len())
        .into_iter()
        .filter(|p| p.windows(2).all(|w| q[w[0]] >= q[w[1]]))
        .collect()
}

/// Nonmonotonicity by brute force over every agent, context pair and order.
fn brute_nonmonotonic(payoff: &PayoffTensor) -> bool {
    let (n, k) = (payoff.n_agents(), payoff.n_actions());
    let contexts: Vec<Vec<usize>> = (0..k.pow(n as u32 - 1))
        .map(|i| JointAction::from_flat_index(i, n - 1, k).0)
        .collect();
    (0..n).any(|agent| {
        let sets: Vec<Vec<Vec<usize>>> = contexts
            .iter()
            .map(|ctx| {
                let q: Vec<f64> = (0..k)
                    .map(|u| {
                        let mut a = ctx.clone();
                        a.insert(agent, u);
                        payoff.get(&JointAction::new(a))
                    })
                    .collect();
                consistent_orders(&q)
            })
            .collect();
        sets.iter()
            .enumerate()
            .any(|(i, s1)| sets[i + 1..].iter().any(|s2| s1.iter().all(|o| !s2.contains(o))))
    })
}

/// Class sizes by counting joint actions on their action sum.
fn counted_coefficients(n: usize, k: usize) -> (u64, u64) {
    let (mut a, mut b) = (0, 0);
    for i in 0..k.pow(n as u32) {
        let s: usize = JointAction::from_flat_index(i, n, k).0.iter().sum();
        if s == 0 {
            continue;
        }
        if s <= k - 2 {
            b += 1;
        } else {
            a += 1;
        }
    }
    (a, b)
}

#[test]
fn coefficients_match_counting() {
    for n in 1..=4 {
        for k in 3..=5 {
            assert_eq!(coefficients(n, k).unwrap(), counted_coefficients(n, k), "n={n} k={k}");
        }
    }
}

#[test]
fn uniform_bound_examples() {
    assert!((delta_bound_uniform(2, 3, 10.0).unwrap() - 5.0).abs() < 1e-12);
    assert!((delta_bound_uniform(2, 4, 10.0).unwrap() - 10.0).abs() < 1e-12);
}

fn small_tensor() -> impl Strategy<Value = PayoffTensor> {
    (2usize..=3, 2usize..=3).prop_flat_map(|(n, k)| {
        proptest::collection::vec(0u8..4, k.pow(n as u32))
            .prop_map(move |v| PayoffTensor::new(n, k, v.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nonmonotonicity_matches_brute_force(payoff in small_tensor()) {
        let (flag, witness) = is_nonmonotonic(&payoff).unwrap();
        prop_assert_eq!(flag, brute_nonmonotonic(&payoff));
        prop_assert_eq!(flag, witness.is_some());
        if let Some(w) = witness {
            let s1 = ordering_set(&payoff, w.agent, &w.context_1).unwrap();
            let s2 = ordering_set(&payoff, w.agent, &w.context_2).unwrap();
            prop_assert!(!s1.intersects(&s2));
        }
    }

    #[test]
    fn templates_with_a_peak_are_nonmonotonic(
        n in 2usize..=3, k in 3usize..=4, reward in 0.1f64..10.0, frac in 0.001f64..1.0,
    ) {
        let payoff = template_payoff(n, k, reward, frac * reward).unwrap();
        prop_assert!(is_nonmonotonic(&payoff).unwrap().0);
    }

    #[test]
    fn closed_form_matches_oracle(
        n in 1usize..=3, k in 3usize..=4, reward in 0.1f64..10.0, frac in 0.0f64..1.0,
        upsilon in proptest::option::of(0.01f64..0.99),
    ) {
        let vis = upsilon.map_or(Visitation::Uniform, |u| Visitation::Eps { upsilon: u });
        let delta = frac * closed_form_delta_limit(n, k, reward, vis).unwrap();
        let cf = closed_form_projection(n, k, reward, delta, vis).unwrap();
        let payoff = template_payoff(n, k, reward, delta).unwrap();
        let num = numerical_projection_oracle(&payoff, &vis.entry_weights(n, k).unwrap()).unwrap();
        for (c, o) in [(cf.m1, num.m1), (cf.m2, num.m2)] {
            for (x, y) in c.x.iter().zip(o.x) {
                prop_assert!((x - y).abs() <= 1e-6 * reward.max(1.0), "{:?} vs {:?}", c, o);
            }
            prop_assert!((c.opt - o.opt).abs() <= 1e-6 * (1.0 + c.opt.abs()));
        }
        let (r1, r2) = projection_kkt(n, k, reward, delta, vis, &cf).unwrap();
        prop_assert!(r1.max() <= KKT_TOLERANCE * 100.0 * reward.max(1.0));
        prop_assert!(r2.max() <= KKT_TOLERANCE * 100.0 * reward.max(1.0));
    }

    #[test]
    fn chosen_branch_follows_the_crossing(
        n in 1usize..=3, k in 3usize..=4, reward in 0.1f64..10.0, frac in 0.0f64..1.0,
        upsilon in proptest::option::of(0.01f64..0.99),
    ) {
        let vis = upsilon.map_or(Visitation::Uniform, |u| Visitation::Eps { upsilon: u });
        let delta = frac * closed_form_delta_limit(n, k, reward, vis).unwrap();
        let crossing = branch_crossing(n, k, reward, vis).unwrap();
        prop_assume!((delta - crossing).abs() > 1e-9 * reward);
        let sol = closed_form_projection(n, k, reward, delta, vis).unwrap();
        let expected = if delta < crossing { Branch::M1 } else { Branch::M2 };
        prop_assert_eq!(sol.chosen, expected);
        prop_assert_eq!(sol.chosen == Branch::M1, sol.opt_m1() <= sol.opt_m2());
    }

    #[test]
    fn uniform_crossing_is_the_uniform_bound(n in 1usize..=4, k in 3usize..=5, reward in 0.1f64..10.0) {
        let bound = delta_bound_uniform(n, k, reward).unwrap();
        let crossing = branch_crossing(n, k, reward, Visitation::Uniform).unwrap();
        prop_assert!((bound - crossing).abs() <= 1e-9 * reward);
    }

    #[test]
    fn eps_bound_grows_with_exploration(
        n in 2usize..=3, k in 3usize..=4, reward in 0.1f64..10.0,
        u1 in 0.01f64..0.99, u2 in 0.01f64..0.99, horizon in 1.0f64..1000.0,
    ) {
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        for form in [EpsBoundForm::Final, EpsBoundForm::Intermediate] {
            let a = delta_bound_eps(n, k, reward, lo, horizon, form).unwrap().delta_max;
            let b = delta_bound_eps(n, k, reward, hi, horizon, form).unwrap().delta_max;
            prop_assert!(a <= b + 1e-12);
        }
        let fin = delta_bound_eps(n, k, reward, hi, horizon, EpsBoundForm::Final).unwrap().delta_max;
        let mid = delta_bound_eps(n, k, reward, hi, horizon, EpsBoundForm::Intermediate).unwrap().delta_max;
        prop_assert!(fin <= mid + 1e-12);
    }

    #[test]
    fn visitation_probability_grows_with_horizon(
        n in 2usize..=3, k in 3usize..=4, upsilon in 0.01f64..1.0, t1 in 0.0f64..5000.0, t2 in 0.0f64..5000.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let p_lo = visitation_probability_bound(n, k, upsilon, lo).unwrap();
        let p_hi = visitation_probability_bound(n, k, upsilon, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&p_lo));
        prop_assert!(p_lo <= p_hi + 1e-15);
    }
}
