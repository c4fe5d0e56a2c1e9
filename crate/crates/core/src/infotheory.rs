//! Exact information quantities on small discrete joints, and the checks of
//! the two representation theorems.
//!
//! Everything is in nats. Mutual informations are computed by direct
//! summation over the table rather than from entropy differences, so the
//! identity checks compare genuinely different computations.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;

/// Largest alphabet per variable.
pub const MAX_ALPHABET: usize = 8;

/// Variable indices in a [`DiscreteJoint`].
pub const XP: usize = 0;
pub const XI: usize = 1;
pub const Y: usize = 2;
/// Index of the representation variable after [`DiscreteJoint::with_representation`].
pub const F: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("empty variable subset")]
    EmptySubset,
    #[error("variable subsets overlap at variable {0}")]
    Overlap(usize),
    #[error("variable {0} out of range")]
    UnknownVariable(usize),
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

/// Probability table over several finite variables, row-major in variable order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub sizes: Vec<usize>,
    pub probs: Vec<f64>,
}

impl JointTable {
    pub fn new(sizes: Vec<usize>, probs: Vec<f64>) -> Result<Self, InfoError> {
        let cells: usize = sizes.iter().product();
        if sizes.is_empty() || sizes.contains(&0) || cells != probs.len() {
            return Err(InfoError::InvalidTable(format!("sizes {sizes:?} with {} cells", probs.len())));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(InfoError::InvalidTable("negative or non-finite probability".into()));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > 1e-12 {
            return Err(InfoError::InvalidTable(format!("total mass {mass}")));
        }
        Ok(Self { sizes, probs })
    }

    pub fn n_vars(&self) -> usize {
        self.sizes.len()
    }

    /// Per-cell values of every variable.
    fn cells(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        let n = self.sizes.len();
        self.probs.iter().enumerate().map(move |(mut flat, &p)| {
            let mut v = vec![0; n];
            for k in (0..n).rev() {
                v[k] = flat % self.sizes[k];
                flat /= self.sizes[k];
            }
            (v, p)
        })
    }

    fn check(&self, vars: &[usize]) -> Result<(), InfoError> {
        for (i, &v) in vars.iter().enumerate() {
            if v >= self.n_vars() {
                return Err(InfoError::UnknownVariable(v));
            }
            if vars[..i].contains(&v) {
                return Err(InfoError::Overlap(v));
            }
        }
        Ok(())
    }

    fn key(&self, values: &[usize], vars: &[usize]) -> usize {
        vars.iter().fold(0, |acc, &v| acc * self.sizes[v] + values[v])
    }

    /// Marginal over `vars`, flattened in the order given.
    pub fn marginal(&self, vars: &[usize]) -> Result<Vec<f64>, InfoError> {
        self.check(vars)?;
        let len: usize = vars.iter().map(|&v| self.sizes[v]).product();
        let mut out = vec![0.0; len];
        for (values, p) in self.cells() {
            out[self.key(&values, vars)] += p;
        }
        Ok(out)
    }

    pub fn entropy(&self, vars: &[usize]) -> Result<f64, InfoError> {
        if vars.is_empty() {
            return Err(InfoError::EmptySubset);
        }
        Ok(self.marginal(vars)?.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum())
    }

    /// `H(A | B)`.
    pub fn conditional_entropy(&self, a: &[usize], b: &[usize]) -> Result<f64, InfoError> {
        if b.is_empty() {
            return self.entropy(a);
        }
        let ab: Vec<usize> = a.iter().chain(b).copied().collect();
        Ok(self.entropy(&ab)? - self.entropy(b)?)
    }

    pub fn mutual_info(&self, a: &[usize], b: &[usize]) -> Result<f64, InfoError> {
        self.conditional_mi(a, b, &[])
    }

    /// `I(A; B | Z) = Σ p(a,b,z) ln[p(z) p(a,b,z) / (p(a,z) p(b,z))]`, clamped at 0.
    pub fn conditional_mi(&self, a: &[usize], b: &[usize], z: &[usize]) -> Result<f64, InfoError> {
        if a.is_empty() || b.is_empty() {
            return Err(InfoError::EmptySubset);
        }
        let az: Vec<usize> = a.iter().chain(z).copied().collect();
        let bz: Vec<usize> = b.iter().chain(z).copied().collect();
        let abz: Vec<usize> = a.iter().chain(b).chain(z).copied().collect();
        self.check(&abz)?;
        let (p_az, p_bz, p_abz) = (self.marginal(&az)?, self.marginal(&bz)?, self.marginal(&abz)?);
        let p_z = if z.is_empty() { vec![1.0] } else { self.marginal(z)? };
        // Walk the abz marginal once, reconstructing each cell's values.
        let mut total = 0.0;
        let mut values = vec![0usize; self.n_vars()];
        for (flat, &p) in p_abz.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let mut rest = flat;
            for &v in abz.iter().rev() {
                values[v] = rest % self.sizes[v];
                rest /= self.sizes[v];
            }
            let pz = p_z[self.key(&values, z)];
            total += p * (pz * p / (p_az[self.key(&values, &az)] * p_bz[self.key(&values, &bz)])).ln();
        }
        Ok(total.max(0.0))
    }

    /// `1 − Σ_f max_y p(f, y)` for predicting `target` from `predictors`.
    pub fn bayes_error(&self, predictors: &[usize], target: &[usize]) -> Result<f64, InfoError> {
        if target.is_empty() {
            return Err(InfoError::EmptySubset);
        }
        let all: Vec<usize> = predictors.iter().chain(target).copied().collect();
        let joint = self.marginal(&all)?;
        let ny: usize = target.iter().map(|&v| self.sizes[v]).product();
        let hit: f64 = joint.chunks(ny).map(|row| row.iter().copied().fold(0.0, f64::max)).sum();
        Ok((1.0 - hit).max(0.0))
    }
}

/// Joint of `(X^P, X^I, Y)`, each alphabet at most [`MAX_ALPHABET`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    pub table: JointTable,
}

/// A representation `F = g(X^P)` as a lookup table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicMap {
    pub table: Vec<usize>,
    pub n_values: usize,
}

impl DiscreteJoint {
    pub fn new(sizes: [usize; 3], probs: Vec<f64>) -> Result<Self, InfoError> {
        if sizes.iter().any(|&s| s > MAX_ALPHABET) {
            return Err(InfoError::InvalidTable(format!("alphabet sizes {sizes:?} exceed {MAX_ALPHABET}")));
        }
        Ok(Self { table: JointTable::new(sizes.to_vec(), probs)? })
    }

    /// Builds a table from a function of `(x^P, x^I, y)`; the values are normalised.
    pub fn from_fn(sizes: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Result<Self, InfoError> {
        let mut probs = Vec::with_capacity(sizes.iter().product());
        for a in 0..sizes[0] {
            for b in 0..sizes[1] {
                for c in 0..sizes[2] {
                    probs.push(f(a, b, c));
                }
            }
        }
        let mass: f64 = probs.iter().sum();
        Self::new(sizes, probs.into_iter().map(|p| p / mass).collect())
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.table.sizes[0], self.table.sizes[1], self.table.sizes[2]]
    }

    /// Four-variable table `(X^P, X^I, Y, F)` with `F = g(X^P)`.
    pub fn with_representation(&self, map: &DeterministicMap) -> Result<JointTable, InfoError> {
        let [np, ni, ny] = self.sizes();
        if map.table.len() != np || map.n_values == 0 || map.table.iter().any(|&f| f >= map.n_values) {
            return Err(InfoError::InvalidTable(format!("map {:?} does not fit |X^P| = {np}", map.table)));
        }
        let nf = map.n_values;
        let mut probs = vec![0.0; np * ni * ny * nf];
        for (i, &p) in self.table.probs.iter().enumerate() {
            let xp = i / (ni * ny);
            probs[i * nf + map.table[xp]] = p;
        }
        JointTable::new(vec![np, ni, ny, nf], probs)
    }
}

/// Flat-simplex random joint: exponential draws, normalised.
pub fn random_joint(sizes: [usize; 3], seed: u64) -> Result<DiscreteJoint, InfoError> {
    let mut rng = rng_for(seed, "joint", 0);
    let n: usize = sizes.iter().product();
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let mass: f64 = raw.iter().sum();
    DiscreteJoint::new(sizes, raw.into_iter().map(|x: f64| x / mass).collect())
}

pub fn random_map(domain: usize, n_values: usize, seed: u64) -> DeterministicMap {
    let mut rng = rng_for(seed, "map", 0);
    DeterministicMap { table: (0..domain).map(|_| rng.random_range(0..n_values)).collect(), n_values }
}

/// Tolerance on the strict inequality of the first theorem.
pub const STRICT_MARGIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// `|I(X^P,X^I;Y) − I(X^P;Y) − I(X^I;Y|X^P)|`.
    pub chain_rule_residual: f64,
    /// `|[I(X^P;Y) − I(X^P;Y|X^I)] − [I(X^P;X^I) − I(X^P;X^I|Y)]|`.
    pub co_information_residual: f64,
    /// `I(X^P,X^I;Y) − I(X^P;Y|X^I) − I(X^I;Y|X^P)`.
    pub q: f64,
    pub i_xp_y: f64,
    /// `I(X^P;Y|X^I)`, information about `Y` only the point modality has.
    pub eps_u: f64,
    /// `I(X^I;Y|X^P)`.
    pub eps_i: f64,
    /// `q < I(X^P;Y) − 1e-12`.
    pub strict_inequality: bool,
}

pub fn verify_theorem1(joint: &DiscreteJoint) -> Result<Theorem1Report, InfoError> {
    let t = &joint.table;
    let i_joint = t.mutual_info(&[XP, XI], &[Y])?;
    let i_p = t.mutual_info(&[XP], &[Y])?;
    let eps_i = t.conditional_mi(&[XI], &[Y], &[XP])?;
    let eps_u = t.conditional_mi(&[XP], &[Y], &[XI])?;
    let i_pi = t.mutual_info(&[XP], &[XI])?;
    let i_pi_y = t.conditional_mi(&[XP], &[XI], &[Y])?;
    let q = i_joint - eps_u - eps_i;
    Ok(Theorem1Report {
        chain_rule_residual: (i_joint - i_p - eps_i).abs(),
        co_information_residual: ((i_p - eps_u) - (i_pi - i_pi_y)).abs(),
        q,
        i_xp_y: i_p,
        eps_u,
        eps_i,
        strict_inequality: q < i_p - STRICT_MARGIN,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub bayes_error: f64,
    pub h_y: f64,
    pub h_y_given_f: f64,
    /// `−ln(1 − P_e)`; `None` when `P_e = 1`.
    pub neg_log_success: Option<f64>,
    /// `−ln(1 − P_e) ≤ H(Y|F) + 1e-12`.
    pub fano_step_holds: bool,
    /// `|I(F;Y) − [I(F;X^I) + I(F;X^P|X^I) − I(F;X^P|Y)]|`.
    pub decomposition_residual: f64,
    /// `I(F;Y|X^P)` and `I(F;X^I|X^P)`, both zero for a deterministic map.
    pub vanishing_terms: [f64; 2],
    /// `1 − exp(−H(Y) + I(F;X^I) + I(F;X^P|X^I) − I(F;X^P|Y))`.
    pub bound: f64,
    pub bound_holds: bool,
    /// Set when `P_e = 1` and the bound is not evaluated.
    pub vacuous: bool,
}

pub fn verify_theorem2(joint: &DiscreteJoint, map: &DeterministicMap) -> Result<Theorem2Report, InfoError> {
    let t = joint.with_representation(map)?;
    let pe = t.bayes_error(&[F], &[Y])?;
    let h_y = t.entropy(&[Y])?;
    let h_y_f = t.conditional_entropy(&[Y], &[F])?;
    let i_fy = t.mutual_info(&[F], &[Y])?;
    let i_fi = t.mutual_info(&[F], &[XI])?;
    let i_fp_i = t.conditional_mi(&[F], &[XP], &[XI])?;
    let i_fp_y = t.conditional_mi(&[F], &[XP], &[Y])?;
    let vanishing = [t.conditional_mi(&[F], &[Y], &[XP])?, t.conditional_mi(&[F], &[XI], &[XP])?];
    let bound = 1.0 - (-h_y + i_fi + i_fp_i - i_fp_y).exp();
    let vacuous = pe >= 1.0;
    let neg_log_success = (!vacuous).then(|| -(1.0 - pe).ln());
    Ok(Theorem2Report {
        bayes_error: pe,
        h_y,
        h_y_given_f: h_y_f,
        neg_log_success,
        fano_step_holds: neg_log_success.is_none_or(|v| v <= h_y_f + 1e-12),
        decomposition_residual: (i_fy - (i_fi + i_fp_i - i_fp_y)).abs(),
        vanishing_terms: vanishing,
        bound,
        bound_holds: vacuous || pe <= bound + 1e-12,
        vacuous,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCase {
    pub seed: u64,
    pub sizes: [usize; 3],
    pub map: Vec<usize>,
    pub theorem1: Theorem1Report,
    pub theorem2: Theorem2Report,
}

/// Aggregate of [`verify_all`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub root_seed: u64,
    pub n_cases: usize,
    pub max_alphabet: usize,
    pub max_chain_rule_residual: f64,
    pub max_co_information_residual: f64,
    pub max_decomposition_residual: f64,
    /// Cases with `ε_u > 1e-6`, where the strict inequality must hold.
    pub strict_cases: usize,
    pub strict_failures: Vec<u64>,
    pub fano_failures: Vec<u64>,
    pub bound_failures: Vec<u64>,
    pub identity_tolerance: f64,
    pub passed: bool,
    pub cases: Vec<TheoryCase>,
}

/// Threshold on `ε_u` above which the strict inequality is asserted.
pub const EPS_THRESHOLD: f64 = 1e-6;

/// Residual tolerance on the exact identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

/// Runs both theorem checks on `n` seeded random (joint, map) pairs with
/// alphabets drawn from `2..=max_alphabet`.
pub fn verify_all(n: usize, max_alphabet: usize, root_seed: u64) -> Result<TheoryReport, InfoError> {
    if !(2..=MAX_ALPHABET).contains(&max_alphabet) {
        return Err(InfoError::InvalidTable(format!("max alphabet {max_alphabet} outside 2..={MAX_ALPHABET}")));
    }
    let mut cases = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let seed = crate::seed::derive_seed(root_seed, "theory-case", i);
        let mut rng = rng_for(seed, "theory-sizes", 0);
        let sizes = [0; 3].map(|_| rng.random_range(2..=max_alphabet));
        let n_values = rng.random_range(1..=max_alphabet);
        let joint = random_joint(sizes, seed)?;
        let map = random_map(sizes[0], n_values, seed);
        cases.push(TheoryCase { seed, sizes, theorem1: verify_theorem1(&joint)?, theorem2: verify_theorem2(&joint, &map)?, map: map.table });
    }
    let max = |f: &dyn Fn(&TheoryCase) -> f64| cases.iter().map(f).fold(0.0, f64::max);
    let max_chain = max(&|c| c.theorem1.chain_rule_residual);
    let max_co = max(&|c| c.theorem1.co_information_residual);
    let max_dec = max(&|c| c.theorem2.decomposition_residual);
    let strict: Vec<&TheoryCase> = cases.iter().filter(|c| c.theorem1.eps_u > EPS_THRESHOLD).collect();
    let strict_failures: Vec<u64> = strict.iter().filter(|c| !c.theorem1.strict_inequality).map(|c| c.seed).collect();
    let fano_failures: Vec<u64> = cases.iter().filter(|c| !c.theorem2.fano_step_holds).map(|c| c.seed).collect();
    let bound_failures: Vec<u64> = cases.iter().filter(|c| !c.theorem2.bound_holds).map(|c| c.seed).collect();
    let passed = max_chain <= IDENTITY_TOLERANCE
        && max_co <= IDENTITY_TOLERANCE
        && max_dec <= IDENTITY_TOLERANCE
        && strict_failures.is_empty()
        && fano_failures.is_empty()
        && bound_failures.is_empty();
    Ok(TheoryReport {
        root_seed,
        n_cases: n,
        max_alphabet,
        max_chain_rule_residual: max_chain,
        max_co_information_residual: max_co,
        max_decomposition_residual: max_dec,
        strict_cases: strict.len(),
        strict_failures,
        fano_failures,
        bound_failures,
        identity_tolerance: IDENTITY_TOLERANCE,
        passed,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    /// `(X^P, X^I, Y)` with independent uniform bits `a, b` and `Y = f(a, b)`.
    fn bits(f: impl Fn(usize, usize) -> usize, ny: usize) -> DiscreteJoint {
        DiscreteJoint::from_fn([2, 2, ny], |a, b, y| if f(a, b) == y { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn entropies() {
        let j = bits(|a, _| a, 2);
        assert!(close(j.table.entropy(&[Y]).unwrap(), LN_2));
        let j = DiscreteJoint::from_fn([2, 2, 2], |a, _, _| if a == 0 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(j.table.entropy(&[XP]).unwrap(), 0.0);
        let j = DiscreteJoint::from_fn([2, 1, 1], |a, _, _| if a == 0 { 0.9 } else { 0.1 }).unwrap();
        assert!((j.table.entropy(&[XP]).unwrap() - 0.325_082_973_391_448_2).abs() < 1e-12);
        assert_eq!(j.table.entropy(&[]), Err(InfoError::EmptySubset));
    }

    #[test]
    fn mutual_information_cases() {
        let indep = DiscreteJoint::from_fn([2, 3, 2], |_, _, _| 1.0).unwrap();
        assert!(indep.table.mutual_info(&[XP], &[XI]).unwrap() < 1e-15);
        let copy = bits(|a, _| a, 2);
        assert!(close(copy.table.mutual_info(&[XP], &[Y]).unwrap(), LN_2));
        let xor = bits(|a, b| a ^ b, 2);
        assert!(xor.table.mutual_info(&[XP], &[Y]).unwrap() < 1e-15);
        assert!(close(xor.table.conditional_mi(&[XP], &[Y], &[XI]).unwrap(), LN_2));
        assert_eq!(xor.table.mutual_info(&[XP], &[XP]), Err(InfoError::Overlap(XP)));
    }

    #[test]
    fn bayes_error_cases() {
        let det = bits(|a, _| a, 2);
        assert_eq!(det.table.bayes_error(&[XP], &[Y]).unwrap(), 0.0);
        assert!(close(det.table.bayes_error(&[XI], &[Y]).unwrap(), 0.5));
        let bsc = DiscreteJoint::from_fn([2, 1, 2], |a, _, y| if a == y { 0.45 } else { 0.05 }).unwrap();
        assert!(close(bsc.table.bayes_error(&[XP], &[Y]).unwrap(), 0.1));
    }

    #[test]
    fn theorem1_examples() {
        // Y = (a, b) encoded as 2a + b.
        let r = verify_theorem1(&bits(|a, b| 2 * a + b, 4)).unwrap();
        assert!(r.q.abs() < 1e-12 && close(r.i_xp_y, LN_2) && close(r.eps_u, LN_2));
        assert!(r.strict_inequality);
        let same = DiscreteJoint::from_fn([2, 2, 2], |a, b, y| if a == b && b == y { 1.0 } else { 0.0 }).unwrap();
        let r = verify_theorem1(&same).unwrap();
        assert!(r.eps_u < 1e-15 && !r.strict_inequality);
    }

    #[test]
    fn strict_inequality_needs_point_specific_information() {
        // X^P constant and X^I = Y: only the image modality has specific
        // information, and Q equals I(X^P;Y) = 0.
        let j = DiscreteJoint::from_fn([1, 2, 2], |_, b, y| if b == y { 1.0 } else { 0.0 }).unwrap();
        let r = verify_theorem1(&j).unwrap();
        assert!(r.eps_i > 0.5 && r.eps_u == 0.0);
        assert!(!r.strict_inequality);
    }

    #[test]
    fn theorem2_examples() {
        let j = bits(|a, _| a, 2);
        let id = DeterministicMap { table: vec![0, 1], n_values: 2 };
        let r = verify_theorem2(&j, &id).unwrap();
        assert_eq!(r.bayes_error, 0.0);
        assert!(r.bound.abs() < 1e-12 && r.bound_holds && r.fano_step_holds);
        let constant = DeterministicMap { table: vec![0, 0], n_values: 1 };
        let r = verify_theorem2(&j, &constant).unwrap();
        assert!(close(r.h_y_given_f, r.h_y));
        assert!(close(r.neg_log_success.unwrap(), LN_2));
        assert!(r.fano_step_holds);
    }

    #[test]
    fn random_tables() {
        let j = random_joint([3, 4, 2], 5).unwrap();
        assert!((j.table.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(j, random_joint([3, 4, 2], 5).unwrap());
        for v in 0..3 {
            assert!(j.table.entropy(&[v]).unwrap() >= 0.0);
        }
        assert!(DiscreteJoint::new([9, 1, 1], vec![1.0 / 9.0; 9]).is_err());
    }

    #[test]
    fn hundred_cases_pass() {
        let r = verify_all(100, 4, 0).unwrap();
        assert!(r.passed, "{:?}", (r.max_chain_rule_residual, &r.strict_failures, &r.fano_failures, &r.bound_failures));
        assert!(r.strict_cases > 90);
    }
}
