//! Exact finite-probability engine over the four-variable chain
//! `C -> Y -> X <- Z`. All probability arithmetic uses arbitrary-precision
//! rationals; every equality check below is exact, with no floating point
//! anywhere in the math.
//!
//! The concrete generative story: `C` picks a base image `Y` through a
//! deterministic map, `Z` picks a mask family, a mask is drawn conditionally
//! on `Z`, and `X` is the masked image, `X = f(Y, mask)`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use num_bigint::BigInt;
use num_rational::BigRational;

pub type Prob = BigRational;

pub fn prob(num: i64, den: i64) -> Prob {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn zero() -> Prob {
    BigRational::from_integer(BigInt::from(0))
}

fn one() -> Prob {
    BigRational::from_integer(BigInt::from(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    C,
    Z,
    Y,
    X,
}

/// Finite joint distribution over `(C, Z, Y, X)` given as conditional tables
/// `P(C)`, `P(Z)`, `P(Y|C)`, `P(X|Y,Z)` with exact rational probabilities.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    pub c_vals: Vec<u32>,
    pub z_vals: Vec<u32>,
    pub y_vals: Vec<u32>,
    pub x_vals: Vec<u32>,
    pub p_c: Vec<Prob>,
    pub p_z: Vec<Prob>,
    /// `[ci][yi]`
    pub p_y_given_c: Vec<Vec<Prob>>,
    /// `[yi][zi][xi]`
    pub p_x_given_yz: Vec<Vec<Vec<Prob>>>,
}

/// Full table over `(C, Z, Y, X)`, flat row-major in that order.
#[derive(Debug, Clone)]
pub struct JointTable {
    pub c_vals: Vec<u32>,
    pub z_vals: Vec<u32>,
    pub y_vals: Vec<u32>,
    pub x_vals: Vec<u32>,
    probs: Vec<Prob>,
}

impl DiscreteJoint {
    pub fn validate(&self) -> Result<()> {
        let check_simplex = |name: &str, row: &[Prob]| -> Result<()> {
            if row.iter().any(|p| p < &zero() || p > &one()) {
                return Err(Error::domain(format!("{name}: probability outside [0, 1]")));
            }
            let total: Prob = row.iter().cloned().sum();
            if total != one() {
                return Err(Error::domain(format!("{name}: row sums to {total}, not 1")));
            }
            Ok(())
        };
        if self.p_c.len() != self.c_vals.len() || self.p_z.len() != self.z_vals.len() {
            return Err(Error::domain("prior length mismatch".to_string()));
        }
        check_simplex("P(C)", &self.p_c)?;
        check_simplex("P(Z)", &self.p_z)?;
        if self.p_y_given_c.len() != self.c_vals.len() {
            return Err(Error::domain("P(Y|C) row count mismatch".to_string()));
        }
        for (ci, row) in self.p_y_given_c.iter().enumerate() {
            if row.len() != self.y_vals.len() {
                return Err(Error::domain("P(Y|C) row length mismatch".to_string()));
            }
            check_simplex(&format!("P(Y|C={})", self.c_vals[ci]), row)?;
        }
        if self.p_x_given_yz.len() != self.y_vals.len() {
            return Err(Error::domain("P(X|Y,Z) row count mismatch".to_string()));
        }
        for (yi, per_z) in self.p_x_given_yz.iter().enumerate() {
            if per_z.len() != self.z_vals.len() {
                return Err(Error::domain("P(X|Y,Z) z count mismatch".to_string()));
            }
            for (zi, row) in per_z.iter().enumerate() {
                if row.len() != self.x_vals.len() {
                    return Err(Error::domain("P(X|Y,Z) row length mismatch".to_string()));
                }
                check_simplex(
                    &format!("P(X|Y={},Z={})", self.y_vals[yi], self.z_vals[zi]),
                    row,
                )?;
            }
        }
        Ok(())
    }

    /// Exact product enumeration of `P(C, Z, Y, X)`; total mass is exactly 1.
    pub fn joint(&self) -> Result<JointTable> {
        self.validate()?;
        let (nc, nz, ny, nx) = (
            self.c_vals.len(),
            self.z_vals.len(),
            self.y_vals.len(),
            self.x_vals.len(),
        );
        let mut probs = Vec::with_capacity(nc * nz * ny * nx);
        for ci in 0..nc {
            for zi in 0..nz {
                for yi in 0..ny {
                    for xi in 0..nx {
                        probs.push(
                            &self.p_c[ci]
                                * &self.p_z[zi]
                                * &self.p_y_given_c[ci][yi]
                                * &self.p_x_given_yz[yi][zi][xi],
                        );
                    }
                }
            }
        }
        Ok(JointTable {
            c_vals: self.c_vals.clone(),
            z_vals: self.z_vals.clone(),
            y_vals: self.y_vals.clone(),
            x_vals: self.x_vals.clone(),
            probs,
        })
    }

    /// Exact Bayes conditioning on `evidence`; errors if the evidence has
    /// probability zero.
    pub fn condition(&self, evidence: &[(Var, u32)]) -> Result<JointTable> {
        self.joint()?.condition(evidence)
    }

    /// Exact conditional independence: `P(A, B | given) = P(A|given) P(B|given)`
    /// for every value pair.
    pub fn check_ci(&self, a: Var, b: Var, given: &[(Var, u32)]) -> Result<bool> {
        if a == b {
            return Err(Error::contract("check_ci: variables must differ".to_string()));
        }
        let cond = self.condition(given)?;
        let pab = cond.marginal2(a, b);
        let pa = cond.marginal1(a);
        let pb = cond.marginal1(b);
        for (i, row) in pab.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                if *p != &pa[i] * &pb[j] {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

impl JointTable {
    fn sizes(&self) -> [usize; 4] {
        [
            self.c_vals.len(),
            self.z_vals.len(),
            self.y_vals.len(),
            self.x_vals.len(),
        ]
    }

    fn vals(&self, var: Var) -> &[u32] {
        match var {
            Var::C => &self.c_vals,
            Var::Z => &self.z_vals,
            Var::Y => &self.y_vals,
            Var::X => &self.x_vals,
        }
    }

    fn axis(var: Var) -> usize {
        match var {
            Var::C => 0,
            Var::Z => 1,
            Var::Y => 2,
            Var::X => 3,
        }
    }

    fn index_of(&self, var: Var, label: u32) -> Result<usize> {
        self.vals(var)
            .iter()
            .position(|&v| v == label)
            .ok_or_else(|| Error::domain(format!("{var:?}={label} not in support")))
    }

    pub fn prob(&self, c: usize, z: usize, y: usize, x: usize) -> &Prob {
        let [_, nz, ny, nx] = self.sizes();
        &self.probs[((c * nz + z) * ny + y) * nx + x]
    }

    pub fn total_mass(&self) -> Prob {
        self.probs.iter().cloned().sum()
    }

    pub fn condition(&self, evidence: &[(Var, u32)]) -> Result<JointTable> {
        let mut fixed: [Option<usize>; 4] = [None; 4];
        for (var, label) in evidence {
            let ax = Self::axis(*var);
            if fixed[ax].is_some() {
                return Err(Error::contract(format!("{var:?} fixed twice in evidence")));
            }
            fixed[ax] = Some(self.index_of(*var, *label)?);
        }
        let [nc, nz, ny, nx] = self.sizes();
        let mut kept = vec![zero(); self.probs.len()];
        let mut mass = zero();
        for c in 0..nc {
            if fixed[0].is_some_and(|v| v != c) {
                continue;
            }
            for z in 0..nz {
                if fixed[1].is_some_and(|v| v != z) {
                    continue;
                }
                for y in 0..ny {
                    if fixed[2].is_some_and(|v| v != y) {
                        continue;
                    }
                    for x in 0..nx {
                        if fixed[3].is_some_and(|v| v != x) {
                            continue;
                        }
                        let idx = ((c * nz + z) * ny + y) * nx + x;
                        mass += &self.probs[idx];
                        kept[idx] = self.probs[idx].clone();
                    }
                }
            }
        }
        if mass == zero() {
            return Err(Error::domain("conditioning on zero-probability evidence".to_string()));
        }
        for p in &mut kept {
            *p /= mass.clone();
        }
        Ok(JointTable { probs: kept, ..self.clone() })
    }

    /// Marginal over one variable, indexed by its support order.
    pub fn marginal1(&self, var: Var) -> Vec<Prob> {
        let ax = Self::axis(var);
        let [nc, nz, ny, nx] = self.sizes();
        let mut out = vec![zero(); self.sizes()[ax]];
        for c in 0..nc {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let idx = [c, z, y, x][ax];
                        out[idx] += self.prob(c, z, y, x);
                    }
                }
            }
        }
        out
    }

    /// Marginal over an ordered pair of variables.
    pub fn marginal2(&self, a: Var, b: Var) -> Vec<Vec<Prob>> {
        let (ax_a, ax_b) = (Self::axis(a), Self::axis(b));
        let [nc, nz, ny, nx] = self.sizes();
        let (na, nb) = (self.sizes()[ax_a], self.sizes()[ax_b]);
        let mut out = vec![vec![zero(); nb]; na];
        for c in 0..nc {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let idx = [c, z, y, x];
                        out[idx[ax_a]][idx[ax_b]] += self.prob(c, z, y, x);
                    }
                }
            }
        }
        out
    }

    /// `(label_a, label_b, probability)` rows of a two-variable marginal.
    pub fn marginal2_rows(&self, a: Var, b: Var) -> Vec<(u32, u32, Prob)> {
        let table = self.marginal2(a, b);
        let mut rows = Vec::new();
        for (i, &la) in self.vals(a).iter().enumerate() {
            for (j, &lb) in self.vals(b).iter().enumerate() {
                rows.push((la, lb, table[i][j].clone()));
            }
        }
        rows
    }

    pub fn marginal1_rows(&self, a: Var) -> Vec<(u32, Prob)> {
        let table = self.marginal1(a);
        self.vals(a)
            .iter()
            .zip(table)
            .map(|(&l, p)| (l, p))
            .collect()
    }
}

/// Builds a `DiscreteJoint` from the masked-image generative story:
/// `Y = y_of_c[c]` deterministically, a mask is drawn from `mask_probs[z]`
/// (one distribution per `z` over global mask ids), and `X = apply[y][mask]`.
pub fn from_masks(
    c_vals: Vec<u32>,
    p_c: Vec<Prob>,
    z_vals: Vec<u32>,
    p_z: Vec<Prob>,
    y_of_c: &[usize],
    y_vals: Vec<u32>,
    mask_probs: &[Vec<Prob>],
    apply: &[Vec<usize>],
    x_vals: Vec<u32>,
) -> Result<DiscreteJoint> {
    let ny = y_vals.len();
    let nx = x_vals.len();
    let n_masks = mask_probs.first().map_or(0, |m| m.len());
    if y_of_c.len() != c_vals.len() || apply.len() != ny {
        return Err(Error::contract("from_masks: table sizes disagree".to_string()));
    }
    let p_y_given_c: Vec<Vec<Prob>> = y_of_c
        .iter()
        .map(|&yi| {
            let mut row = vec![zero(); ny];
            row[yi] = one();
            row
        })
        .collect();
    let mut p_x_given_yz = vec![vec![vec![zero(); nx]; z_vals.len()]; ny];
    for (yi, apply_row) in apply.iter().enumerate() {
        if apply_row.len() != n_masks {
            return Err(Error::contract("from_masks: apply row length".to_string()));
        }
        for (zi, masks) in mask_probs.iter().enumerate() {
            for (mi, mp) in masks.iter().enumerate() {
                p_x_given_yz[yi][zi][apply_row[mi]] += mp;
            }
        }
    }
    let dj = DiscreteJoint {
        c_vals,
        z_vals,
        y_vals,
        x_vals,
        p_c,
        p_z,
        p_y_given_c,
        p_x_given_yz,
    };
    dj.validate()?;
    Ok(dj)
}

/// The concrete instance behind the worked d-separation example: three base
/// images indexed by `C` (uniform), `Z ~ Bernoulli(1/2)`, four masks per `z`
/// value, with the mask-to-image mapping arranged so that
/// `P(X=4|Y=1,Z=1) : P(X=4|Y=2,Z=0) : P(X=4|Y=2,Z=1) = 3 : 2 : 3`.
pub fn appendix_instance() -> DiscreteJoint {
    let third = prob(1, 3);
    let half = prob(1, 2);
    let quarter = prob(1, 4);
    // masks 0..3 belong to z=0, masks 4..7 to z=1
    let mut m0 = vec![zero(); 8];
    let mut m1 = vec![zero(); 8];
    for i in 0..4 {
        m0[i] = quarter.clone();
        m1[4 + i] = quarter.clone();
    }
    // X labels 1..=12; apply[y][mask] is an index into that support
    let x_vals: Vec<u32> = (1..=12).collect();
    let xi = |label: u32| (label - 1) as usize;
    let apply = vec![
        // y = 1: z0 masks reveal singles 1, 2, 3, 10; z1 masks mostly make 4
        vec![xi(1), xi(2), xi(3), xi(10), xi(4), xi(4), xi(4), xi(5)],
        // y = 2: two z0 masks make 4, three z1 masks make 4
        vec![xi(4), xi(4), xi(9), xi(9), xi(4), xi(4), xi(4), xi(6)],
        // y = 3: never makes 4
        vec![xi(11), xi(11), xi(12), xi(12), xi(7), xi(7), xi(8), xi(8)],
    ];
    from_masks(
        vec![1, 2, 3],
        vec![third.clone(), third.clone(), third],
        vec![0, 1],
        vec![half.clone(), half],
        &[0, 1, 2],
        vec![1, 2, 3],
        &[m0, m1],
        &apply,
        x_vals,
    )
    .expect("appendix instance is well-formed")
}

/// Random small instance with the same structure: `C -> Y` deterministic,
/// `Z` exogenous, `X = f(Y, mask(Z))`. Used to exercise the d-separation
/// theorem by enumeration.
pub fn random_instance(rng: &mut Rng) -> DiscreteJoint {
    let nc = 2 + rng.uniform_usize(3); // 2..=4
    let nz = 2 + rng.uniform_usize(2); // 2..=3
    let ny = 1 + rng.uniform_usize(nc); // 1..=nc
    let n_masks = 2 + rng.uniform_usize(4); // 2..=5
    let nx = 2 + rng.uniform_usize(2 * n_masks); // up to 2*masks+1

    let rational_simplex = |rng: &mut Rng, n: usize| -> Vec<Prob> {
        let mut counts: Vec<i64> = (0..n).map(|_| 1 + rng.uniform_usize(6) as i64).collect();
        // one extra unit somewhere so denominators vary
        counts[rng.uniform_usize(n)] += rng.uniform_usize(3) as i64;
        let total: i64 = counts.iter().sum();
        counts.into_iter().map(|c| prob(c, total)).collect()
    };

    let p_c = rational_simplex(rng, nc);
    let p_z = rational_simplex(rng, nz);
    let y_of_c: Vec<usize> = (0..nc)
        .map(|i| if i < ny { i } else { rng.uniform_usize(ny) })
        .collect();
    let mask_probs: Vec<Vec<Prob>> = (0..nz).map(|_| rational_simplex(rng, n_masks)).collect();
    let apply: Vec<Vec<usize>> = (0..ny)
        .map(|_| (0..n_masks).map(|_| rng.uniform_usize(nx)).collect())
        .collect();

    from_masks(
        (1..=nc as u32).collect(),
        p_c,
        (0..nz as u32).collect(),
        p_z,
        &y_of_c,
        (1..=ny as u32).collect(),
        &mask_probs,
        &apply,
        (0..nx as u32).collect(),
    )
    .expect("random instance is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_mass_is_exactly_one() {
        let dj = appendix_instance();
        assert_eq!(dj.joint().unwrap().total_mass(), one());
    }

    #[test]
    fn cpt_rows_sum_to_one() {
        let dj = appendix_instance();
        dj.validate().unwrap();
    }

    #[test]
    fn marginal_c_is_uniform_third() {
        let dj = appendix_instance();
        let pc = dj.joint().unwrap().marginal1(Var::C);
        for p in pc {
            assert_eq!(p, prob(1, 3));
        }
    }

    #[test]
    fn degenerate_point_mass() {
        let dj = from_masks(
            vec![1],
            vec![one()],
            vec![0],
            vec![one()],
            &[0],
            vec![1],
            &[vec![one()]],
            &[vec![0]],
            vec![7],
        )
        .unwrap();
        let j = dj.joint().unwrap();
        assert_eq!(j.prob(0, 0, 0, 0), &one());
    }

    #[test]
    fn conditional_tables_match_worked_example() {
        let dj = appendix_instance();
        let cond_x4 = dj.condition(&[(Var::X, 4)]).unwrap();

        // P(C, Z | X=4) = {(1,1): 3/8, (2,0): 1/4, (2,1): 3/8}, rest 0
        let cz = cond_x4.marginal2(Var::C, Var::Z);
        assert_eq!(cz[0][0], zero());
        assert_eq!(cz[0][1], prob(3, 8));
        assert_eq!(cz[1][0], prob(1, 4));
        assert_eq!(cz[1][1], prob(3, 8));
        assert_eq!(cz[2][0], zero());
        assert_eq!(cz[2][1], zero());

        // P(C | X=4) = {3/8, 5/8, 0}
        let pc = cond_x4.marginal1(Var::C);
        assert_eq!(pc, vec![prob(3, 8), prob(5, 8), zero()]);

        // P(Z | X=4) = {1/4, 3/4}
        let pz = cond_x4.marginal1(Var::Z);
        assert_eq!(pz, vec![prob(1, 4), prob(3, 4)]);

        // P(C, Z | X=4, Y=1) is a point mass on (1, 1)
        let cond_xy = dj.condition(&[(Var::X, 4), (Var::Y, 1)]).unwrap();
        let cz = cond_xy.marginal2(Var::C, Var::Z);
        assert_eq!(cz[0][1], one());
        let total: Prob = cz.iter().flatten().cloned().sum();
        assert_eq!(total, one());
    }

    #[test]
    fn ci_claims_from_worked_example() {
        let dj = appendix_instance();
        assert!(!dj.check_ci(Var::C, Var::Z, &[(Var::X, 4)]).unwrap());
        assert!(dj
            .check_ci(Var::C, Var::Z, &[(Var::X, 4), (Var::Y, 1)])
            .unwrap());
        // unconditionally independent by construction
        assert!(dj.check_ci(Var::C, Var::Z, &[]).unwrap());
    }

    #[test]
    fn zero_probability_evidence_is_domain_error() {
        let dj = appendix_instance();
        // X=7 only arises from Y=3, so (X=7, Y=1) has zero mass
        let r = dj.condition(&[(Var::X, 7), (Var::Y, 1)]);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn dsep_theorem_on_random_instances() {
        let mut rng = Rng::seed_from_u64(99);
        for _ in 0..25 {
            let dj = random_instance(&mut rng);
            let joint = dj.joint().unwrap();
            let pxy = joint.marginal2(Var::X, Var::Y);
            for (xi, &x) in joint.x_vals.clone().iter().enumerate() {
                for (yi, &y) in joint.y_vals.clone().iter().enumerate() {
                    if pxy[xi][yi] == zero() {
                        continue;
                    }
                    assert!(
                        dj.check_ci(Var::C, Var::Z, &[(Var::X, x), (Var::Y, y)]).unwrap(),
                        "C and Z dependent given X={x}, Y={y}"
                    );
                }
            }
        }
    }
}
