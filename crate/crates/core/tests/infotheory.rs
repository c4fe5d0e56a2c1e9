use proptest::prelude::*;
use xmodal_core::infotheory::{random_joint, random_map, verify_theorem1, verify_theorem2, DeterministicMap, DiscreteJoint, XI, XP, Y};

/// Entropy of a marginal summed straight from the function, independent of the table code.
fn h(p: &[Vec<Vec<f64>>], keep: [bool; 3]) -> f64 {
    let mut m = std::collections::BTreeMap::new();
    for (a, pa) in p.iter().enumerate() {
        for (b, pb) in pa.iter().enumerate() {
            for (c, &v) in pb.iter().enumerate() {
                let key = (if keep[0] { a } else { 0 }, if keep[1] { b } else { 0 }, if keep[2] { c } else { 0 });
                *m.entry(key).or_insert(0.0) += v;
            }
        }
    }
    -m.values().filter(|&&v| v > 0.0).map(|&v: &f64| v * v.ln()).sum::<f64>()
}

fn dense(j: &DiscreteJoint) -> Vec<Vec<Vec<f64>>> {
    let [a, b, c] = j.sizes();
    (0..a).map(|x| (0..b).map(|y| (0..c).map(|z| j.table.probs[(x * b + y) * c + z]).collect()).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutual_information_matches_entropy_sums(seed in any::<u64>(), a in 2usize..5, b in 2usize..5, c in 2usize..5) {
        let j = random_joint([a, b, c], seed).unwrap();
        let p = dense(&j);
        let i_p_y = h(&p, [true, false, false]) + h(&p, [false, false, true]) - h(&p, [true, false, true]);
        prop_assert!((j.table.mutual_info(&[XP], &[Y]).unwrap() - i_p_y).abs() < 1e-12);
        let i_p_y_given_i = h(&p, [true, true, false]) + h(&p, [false, true, true]) - h(&p, [true, true, true]) - h(&p, [false, true, false]);
        prop_assert!((j.table.conditional_mi(&[XP], &[Y], &[XI]).unwrap() - i_p_y_given_i).abs() < 1e-12);
    }

    #[test]
    fn theorem_reports_hold_on_random_joints(seed in any::<u64>(), a in 2usize..5, b in 2usize..5, c in 2usize..5, f in 1usize..5) {
        let j = random_joint([a, b, c], seed).unwrap();
        let t1 = verify_theorem1(&j).unwrap();
        prop_assert!(t1.chain_rule_residual <= 1e-10 && t1.co_information_residual <= 1e-10);
        prop_assert!((t1.i_xp_y - t1.q - t1.eps_u).abs() < 1e-10);
        if t1.eps_u > 1e-6 {
            prop_assert!(t1.strict_inequality);
        }
        let t2 = verify_theorem2(&j, &random_map(a, f, seed)).unwrap();
        prop_assert!(t2.fano_step_holds && t2.bound_holds);
        prop_assert!(t2.decomposition_residual <= 1e-10);
        prop_assert!((0.0..=1.0).contains(&t2.bayes_error));
    }
}

#[test]
fn independent_variables_share_no_information() {
    let j = DiscreteJoint::from_fn([3, 2, 4], |a, b, c| (a + 1) as f64 * (b + 2) as f64 * (c + 1) as f64).unwrap();
    assert!(j.table.mutual_info(&[XP], &[Y]).unwrap().abs() < 1e-12);
    assert!(j.table.mutual_info(&[XP, XI], &[Y]).unwrap().abs() < 1e-12);
}

#[test]
fn copy_channel_carries_full_entropy() {
    // Y = X^P uniform on 4 symbols, X^I independent noise.
    let j = DiscreteJoint::from_fn([4, 2, 4], |a, _, c| if a == c { 1.0 } else { 0.0 }).unwrap();
    assert!((j.table.mutual_info(&[XP], &[Y]).unwrap() - 4f64.ln()).abs() < 1e-12);
    let identity = DeterministicMap { table: vec![0, 1, 2, 3], n_values: 4 };
    let t2 = verify_theorem2(&j, &identity).unwrap();
    assert!(t2.bayes_error.abs() < 1e-12);
}

// Only the point-specific term decides strictness: with X^P constant and
// X^I = Y, the image-specific term is large yet Q equals I(X^P;Y) = 0.
#[test]
fn strictness_needs_point_specific_information() {
    let j = DiscreteJoint::from_fn([2, 3, 3], |a, b, c| if a == 0 && b == c { 1.0 } else { 0.0 }).unwrap();
    let t = verify_theorem1(&j).unwrap();
    assert!(t.eps_i > 1.0 && t.eps_u.abs() < 1e-12);
    assert!(!t.strict_inequality);
}
