//! Brute-force reference solver for small weight LPs.

use num_rational::BigRational;
use num_traits::{One, Zero};

use rand::Rng;

use super::lp::{rational, rational_int};
use super::TargetSet;

/// Exhaustive optimum of [`super::reweight_lp`] over the vertices of the
/// box cut by the class constraints: choose which constraints are tight and
/// which free variables stay interior, put every other free variable at a
/// bound and solve the square system. `None` when infeasible.
///
/// Exponential in the number of samples; meant for n around a dozen.
pub fn vertex_optimum(
    rows: &[Vec<BigRational>],
    targets: &TargetSet,
    alpha: &[BigRational],
    lo: &BigRational,
    hi: &BigRational,
) -> Option<BigRational> {
    let k = targets.num_classes();
    let coef: Vec<BigRational> = rows
        .iter()
        .map(|r| targets.classes().iter().fold(BigRational::zero(), |a, &t| a + &r[t]))
        .collect();
    let free: Vec<usize> = (0..rows.len()).filter(|&i| !coef[i].is_zero()).collect();
    let totals: Vec<BigRational> = (0..k)
        .map(|c| rows.iter().fold(BigRational::zero(), |a, r| a + &r[c]))
        .collect();
    let nf = free.len();
    let feasible = |w: &[BigRational]| {
        w.iter().all(|v| v >= lo && v <= hi)
            && (0..k).all(|c| {
                let lhs = w.iter().zip(rows).fold(BigRational::zero(), |a, (wi, r)| a + wi * &r[c]);
                lhs >= &alpha[c] * &totals[c]
            })
    };
    let mut best: Option<BigRational> = None;
    for m in 0..=k.min(nf) {
        for tight in subsets(k, m) {
            for interior in subsets(nf, m) {
                for mask in 0..(1u32 << (nf - m)) {
                    let mut w = vec![BigRational::one(); rows.len()];
                    let mut bit = 0;
                    for (j, &i) in free.iter().enumerate() {
                        if !interior.contains(&j) {
                            w[i] = if mask >> bit & 1 == 1 { hi.clone() } else { lo.clone() };
                            bit += 1;
                        }
                    }
                    // square system over the interior variables
                    let mut mat: Vec<Vec<BigRational>> = Vec::new();
                    for &c in &tight {
                        let mut rhs = &alpha[c] * &totals[c];
                        for (i, r) in rows.iter().enumerate() {
                            if !interior.iter().any(|&j| free[j] == i) {
                                rhs -= &w[i] * &r[c];
                            }
                        }
                        let mut row: Vec<BigRational> = interior.iter().map(|&j| rows[free[j]][c].clone()).collect();
                        row.push(rhs);
                        mat.push(row);
                    }
                    let Some(sol) = gauss(mat) else { continue };
                    for (&j, v) in interior.iter().zip(sol) {
                        w[free[j]] = v;
                    }
                    if feasible(&w) {
                        let obj = w.iter().zip(&coef).fold(BigRational::zero(), |a, (wi, ci)| a + wi * ci);
                        if best.as_ref().is_none_or(|b| obj > *b) {
                            best = Some(obj);
                        }
                    }
                }
            }
        }
    }
    best
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    rec(0, n, m, &mut cur, &mut out);
    out
}

/// Solves a square augmented system; `None` when singular.
fn gauss(mut a: Vec<Vec<BigRational>>) -> Option<Vec<BigRational>> {
    let n = a.len();
    for col in 0..n {
        let p = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, p);
        let pivot = a[col][col].clone();
        for v in a[col].iter_mut() {
            *v /= &pivot;
        }
        let prow = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col && !row[col].is_zero() {
                let f = row[col].clone();
                for (v, pv) in row.iter_mut().zip(&prow) {
                    *v -= &f * pv;
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n].clone()).collect())
}

/// Random instance with 2 or 3 classes, up to 12 samples, small integer
/// influence entries and thresholds on a quarter grid.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Vec<BigRational>>, TargetSet, Vec<BigRational>) {
    let k = rng.random_range(2..=3);
    let n = rng.random_range(1..=12);
    let rows: Vec<Vec<BigRational>> = (0..n)
        .map(|_| (0..k).map(|_| rational_int(rng.random_range(-4..=4))).collect())
        .collect();
    let t = rng.random_range(1..k);
    let mut classes: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    let targets = TargetSet::new(classes[..t].to_vec(), k).expect("1 <= t < k targets");
    // quarters keep every threshold dyadic
    let alpha = (0..k).map(|_| rational(rng.random_range(0..=4) as f64 / 4.0)).collect();
    (rows, targets, alpha)
}
