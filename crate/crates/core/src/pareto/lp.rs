//! Bounded-variable primal simplex for
//!
//! ```text
//! maximize    c^T x
//! subject to  A x >= b,   0 <= x <= u
//! ```
//!
//! Dense tableau, two phases, Bland's rule. Generic over the scalar so the
//! same code runs in `f64` and in exact rationals.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, Zero};

pub trait LpScalar: Clone + Debug + PartialOrd + Signed + FromPrimitive {
    /// Magnitudes at or below this are treated as zero.
    fn tolerance() -> Self;
}

impl LpScalar for f64 {
    fn tolerance() -> Self {
        1e-9
    }
}

impl LpScalar for BigRational {
    fn tolerance() -> Self {
        BigRational::zero()
    }
}

/// Exact rational from an `f64` (every finite double is a dyadic rational).
pub fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value")
}

pub fn rational_int(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem<S> {
    /// Constraint rows, each of length `n`.
    pub a: Vec<Vec<S>>,
    pub b: Vec<S>,
    pub c: Vec<S>,
    /// Upper bounds of the variables; lower bounds are zero.
    pub upper: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Solution<S> {
    Optimal { x: Vec<S>, objective: S },
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SimplexError {
    #[error("malformed problem: {0}")]
    Shape(String),
    #[error("simplex hit the iteration limit ({0})")]
    IterationLimit(usize),
    #[error("objective is unbounded")]
    Unbounded,
}

struct Tableau<S> {
    rows: Vec<Vec<S>>,
    /// Values of the basic variables.
    beta: Vec<S>,
    basis: Vec<usize>,
    upper: Vec<Option<S>>,
    at_upper: Vec<bool>,
    /// Reduced costs `c_j - c_B^T B^{-1} A_j`.
    reduced: Vec<S>,
}

impl<S: LpScalar> Tableau<S> {
    fn set_objective(&mut self, cost: &[S]) {
        let mut d = cost.to_vec();
        for (row, &bv) in self.rows.iter().zip(&self.basis) {
            if cost[bv].is_zero() {
                continue;
            }
            for (dj, t) in d.iter_mut().zip(row) {
                *dj = dj.clone() - cost[bv].clone() * t.clone();
            }
        }
        self.reduced = d;
    }

    fn value(&self, j: usize) -> S {
        if let Some(r) = self.basis.iter().position(|&b| b == j) {
            return self.beta[r].clone();
        }
        if self.at_upper[j] {
            self.upper[j].clone().expect("at_upper implies a finite bound")
        } else {
            S::zero()
        }
    }

    /// Runs simplex iterations until optimal for the current reduced costs.
    fn optimize(&mut self, max_iterations: usize) -> Result<(), SimplexError> {
        let eps = S::tolerance();
        let ncols = self.reduced.len();
        for _ in 0..max_iterations {
            let mut is_basic = vec![false; ncols];
            for &b in &self.basis {
                is_basic[b] = true;
            }
            // Bland: lowest-index improving column
            let entering = (0..ncols).find(|&j| {
                !is_basic[j]
                    && if self.at_upper[j] {
                        self.reduced[j] < -eps.clone()
                    } else {
                        self.reduced[j] > eps && self.upper[j].as_ref().is_none_or(|u| u.is_positive())
                    }
            });
            let Some(j) = entering else {
                return Ok(());
            };
            let increasing = !self.at_upper[j];

            // ratio test: the step t >= 0 applied to x_j in its improving direction
            let mut best: Option<(S, Option<usize>)> = self.upper[j].clone().map(|u| (u, None));
            for (r, row) in self.rows.iter().enumerate() {
                let coef = row[j].clone();
                if coef.abs() <= eps {
                    continue;
                }
                // basic r moves by -coef * t when x_j increases
                let rate = if increasing { -coef } else { coef };
                let limit = if rate.is_negative() {
                    self.beta[r].clone() / (-rate)
                } else {
                    match &self.upper[self.basis[r]] {
                        Some(u) => (u.clone() - self.beta[r].clone()) / rate,
                        None => continue,
                    }
                };
                let limit = if limit.is_negative() { S::zero() } else { limit };
                let better = match &best {
                    None => true,
                    Some((t, leave)) => {
                        limit < *t
                            || (limit == *t
                                && leave.is_some_and(|l| self.basis[r] < self.basis[l]))
                    }
                };
                if better {
                    best = Some((limit, Some(r)));
                }
            }
            let Some((step, leave)) = best else {
                return Err(SimplexError::Unbounded);
            };

            let signed = if increasing { step.clone() } else { -step.clone() };
            for (beta, row) in self.beta.iter_mut().zip(&self.rows) {
                *beta = beta.clone() - signed.clone() * row[j].clone();
            }
            match leave {
                None => {
                    self.at_upper[j] = !self.at_upper[j];
                }
                Some(r) => {
                    let start = if self.at_upper[j] {
                        self.upper[j].clone().expect("finite")
                    } else {
                        S::zero()
                    };
                    let leaving = self.basis[r];
                    // the leaving variable stops at whichever bound it hit
                    let hit_upper = match &self.upper[leaving] {
                        Some(u) => {
                            let lo = self.beta[r].clone().abs();
                            let hi = (u.clone() - self.beta[r].clone()).abs();
                            hi < lo
                        }
                        None => false,
                    };
                    self.at_upper[leaving] = hit_upper;
                    self.at_upper[j] = false;
                    self.beta[r] = start + signed;
                    self.basis[r] = j;
                    self.pivot(r, j);
                }
            }
        }
        Err(SimplexError::IterationLimit(max_iterations))
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let p = self.rows[r][j].clone();
        for v in self.rows[r].iter_mut() {
            *v = v.clone() / p.clone();
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r || row[j].is_zero() {
                continue;
            }
            let f = row[j].clone();
            for (v, pv) in row.iter_mut().zip(&pivot_row) {
                *v = v.clone() - f.clone() * pv.clone();
            }
        }
        let f = self.reduced[j].clone();
        if !f.is_zero() {
            for (v, pv) in self.reduced.iter_mut().zip(&pivot_row) {
                *v = v.clone() - f.clone() * pv.clone();
            }
        }
    }
}

/// Solves the problem. Infeasibility is a result, not an error.
pub fn solve<S: LpScalar>(problem: &Problem<S>) -> Result<Solution<S>, SimplexError> {
    let m = problem.a.len();
    let n = problem.c.len();
    if problem.b.len() != m || problem.upper.len() != n || problem.a.iter().any(|r| r.len() != n) {
        return Err(SimplexError::Shape("inconsistent dimensions".into()));
    }
    if problem.upper.iter().any(|u| u.is_negative()) {
        return Err(SimplexError::Shape("negative upper bound".into()));
    }
    let eps = S::tolerance();
    // columns: x (n), surplus (m), artificial (one per row needing it)
    let needs_art: Vec<bool> = problem.b.iter().map(|b| *b > eps).collect();
    let n_art = needs_art.iter().filter(|&&x| x).count();
    let ncols = n + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art = n + m;
    for r in 0..m {
        let mut row = vec![S::zero(); ncols];
        if needs_art[r] {
            // A x - s + a = b
            row[..n].clone_from_slice(&problem.a[r]);
            row[n + r] = -S::one();
            row[art] = S::one();
            basis.push(art);
            beta.push(problem.b[r].clone());
            art += 1;
        } else {
            // -A x + s = -b
            for (v, a) in row[..n].iter_mut().zip(&problem.a[r]) {
                *v = -a.clone();
            }
            row[n + r] = S::one();
            basis.push(n + r);
            let rhs = -problem.b[r].clone();
            beta.push(if rhs.is_negative() { S::zero() } else { rhs });
        }
        rows.push(row);
    }
    let mut upper: Vec<Option<S>> = problem.upper.iter().cloned().map(Some).collect();
    upper.extend(std::iter::repeat_n(None, m + n_art));
    let mut t = Tableau {
        rows,
        beta,
        basis,
        upper,
        at_upper: vec![false; ncols],
        reduced: Vec::new(),
    };
    let max_iterations = 50 * (ncols + m) + 1000;

    if n_art > 0 {
        let mut cost = vec![S::zero(); ncols];
        for c in cost.iter_mut().skip(n + m) {
            *c = -S::one();
        }
        t.set_objective(&cost);
        t.optimize(max_iterations)?;
        let infeasibility = (n + m..ncols).fold(S::zero(), |acc, j| acc + t.value(j));
        let scale = problem.b.iter().fold(S::one(), |acc, b| acc + b.abs());
        if infeasibility > eps.clone() * scale {
            return Ok(Solution::Infeasible);
        }
        for j in n + m..ncols {
            t.upper[j] = Some(S::zero());
        }
    }

    let mut cost = vec![S::zero(); ncols];
    cost[..n].clone_from_slice(&problem.c);
    t.set_objective(&cost);
    t.optimize(max_iterations)?;

    let x: Vec<S> = (0..n)
        .map(|j| {
            let v = t.value(j);
            // clamp round-off into the box
            if v.is_negative() {
                S::zero()
            } else if v > problem.upper[j] {
                problem.upper[j].clone()
            } else {
                v
            }
        })
        .collect();
    let objective = x
        .iter()
        .zip(&problem.c)
        .fold(S::zero(), |acc, (xi, ci)| acc + xi.clone() * ci.clone());
    Ok(Solution::Optimal { x, objective })
}
