//! LFD over KL balls on a common finite alphabet (the binned baseline).
//!
//! `min KL(p2 || p1)` subject to `KL(p1 || mu0) <= r1`, `KL(p2 || nu0) <= r2`
//! and both `p` on the simplex. Solved by a dense log-barrier method; the
//! dual function is evaluated bin by bin with one-dimensional root finding.

use nalgebra::{DMatrix, DVector};

use super::barrier::{golden_max, log_sum_exp};
use super::{kl_divergence, DualVariables, SolverCertificate, SolverOptions};
use crate::error::{Error, Result};
use crate::space::WEIGHT_SUM_TOL;

const T_MAX: f64 = 1e15;

/// Least favorable pair over KL balls.
#[derive(Clone, Debug, PartialEq)]
pub struct KlLfdSolution {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub objective: f64,
    /// `u1`/`u2` of the dual hold the single simplex multiplier of each side.
    pub certificate: SolverCertificate,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Both,
    FixedPre,
    FixedPost,
}

struct Program<'a> {
    mode: Mode,
    mu0: &'a [f64],
    nu0: &'a [f64],
    r1: f64,
    r2: f64,
    l: usize,
}

pub fn solve_lfd_kl(
    mu0: &[f64],
    nu0: &[f64],
    r1: f64,
    r2: f64,
    options: &SolverOptions,
) -> Result<KlLfdSolution> {
    if mu0.is_empty() || mu0.len() != nu0.len() {
        return Err(Error::invalid("KL LFD needs two nonempty vectors of equal length"));
    }
    for (name, v) in [("mu0", mu0), ("nu0", nu0)] {
        let sum: f64 = v.iter().sum();
        if v.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || (sum - 1.0).abs() > WEIGHT_SUM_TOL * v.len() as f64 {
            return Err(Error::invalid(format!("{name} is not a probability vector")));
        }
    }
    for (name, r) in [("r1", r1), ("r2", r2)] {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::invalid(format!("{name} must be finite and >= 0, got {r}")));
        }
    }
    let mode = match (r1 > 0.0, r2 > 0.0) {
        (false, false) => {
            let objective = kl_divergence(nu0, mu0);
            if objective.is_infinite() {
                return Err(Error::Infeasible {
                    constraint: "zero radii and nu0 is not absolutely continuous w.r.t. mu0".into(),
                });
            }
            return Ok(KlLfdSolution {
                p1: mu0.to_vec(),
                p2: nu0.to_vec(),
                objective,
                certificate: SolverCertificate::new(objective, objective, 0.0, 0, DualVariables::default()),
            });
        }
        (false, true) => Mode::FixedPre,
        (true, false) => Mode::FixedPost,
        (true, true) => Mode::Both,
    };
    if mu0.iter().chain(nu0).any(|&w| w <= 0.0) {
        return Err(Error::invalid(
            "KL balls need strictly positive nominals; floor empty bins first",
        ));
    }
    let prog = Program {
        mode,
        mu0,
        nu0,
        r1,
        r2,
        l: mu0.len(),
    };
    prog.run(options)
}

impl Program<'_> {
    fn dim(&self) -> usize {
        match self.mode {
            Mode::Both => 2 * self.l,
            _ => self.l,
        }
    }

    fn split<'z>(&'z self, z: &'z [f64]) -> (&'z [f64], &'z [f64]) {
        match self.mode {
            Mode::Both => z.split_at(self.l),
            Mode::FixedPre => (self.mu0, z),
            Mode::FixedPost => (z, self.nu0),
        }
    }

    /// `(variable offset, nominal, radius)` of each free side.
    fn sides(&self) -> Vec<(usize, &[f64], f64)> {
        match self.mode {
            Mode::Both => vec![(0, self.mu0, self.r1), (self.l, self.nu0, self.r2)],
            Mode::FixedPre => vec![(0, self.nu0, self.r2)],
            Mode::FixedPost => vec![(0, self.mu0, self.r1)],
        }
    }

    fn slacks(&self, z: &[f64]) -> Vec<f64> {
        self.sides()
            .iter()
            .map(|&(off, q, r)| r - kl_divergence(&z[off..off + self.l], q))
            .collect()
    }

    fn barrier(&self, z: &[f64], t: f64) -> f64 {
        let (p1, p2) = self.split(z);
        let slack = self.slacks(z);
        if z.iter().any(|&v| v <= 0.0) || slack.iter().any(|&s| s <= 0.0) {
            return f64::INFINITY;
        }
        t * kl_divergence(p2, p1) - z.iter().map(|v| v.ln()).sum::<f64>() - slack.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn run(&self, options: &SolverOptions) -> Result<KlLfdSolution> {
        let d = self.dim();
        let l = self.l;
        let sides = self.sides();
        let ne = sides.len();
        let mut z: Vec<f64> = match self.mode {
            Mode::Both => self.mu0.iter().chain(self.nu0).copied().collect(),
            Mode::FixedPre => self.nu0.to_vec(),
            Mode::FixedPost => self.mu0.to_vec(),
        };
        let mut t = 1.0;
        let t_min = 1e8 * (d + ne) as f64;
        let mut iterations = 0;
        let mut best: Option<(f64, DualVariables)> = None;
        let mut exhausted = false;
        'outer: loop {
            let mut last = None;
            for _ in 0..200 {
                if iterations >= options.max_iterations {
                    exhausted = true;
                    break 'outer;
                }
                iterations += 1;
                let (p1, p2) = self.split(&z);
                let slack = self.slacks(&z);
                let mut grad = vec![0.0; d];
                let mut hess = DMatrix::<f64>::zeros(d + ne, d + ne);
                for i in 0..l {
                    let (a, b) = (p1[i], p2[i]);
                    match self.mode {
                        Mode::Both => {
                            grad[i] = -t * b / a;
                            grad[l + i] = t * ((b / a).ln() + 1.0);
                            hess[(i, i)] += t * b / (a * a);
                            hess[(i, l + i)] -= t / a;
                            hess[(l + i, i)] -= t / a;
                            hess[(l + i, l + i)] += t / b;
                        }
                        Mode::FixedPre => {
                            grad[i] = t * ((b / a).ln() + 1.0);
                            hess[(i, i)] += t / b;
                        }
                        Mode::FixedPost => {
                            grad[i] = -t * b / a;
                            hess[(i, i)] += t * b / (a * a);
                        }
                    }
                }
                for (k, &(off, q, _)) in sides.iter().enumerate() {
                    let s = slack[k];
                    let gh: Vec<f64> = (0..l).map(|i| (z[off + i] / q[i]).ln() + 1.0).collect();
                    for i in 0..l {
                        grad[off + i] += gh[i] / s;
                        hess[(off + i, off + i)] += 1.0 / (s * z[off + i]);
                        for j in 0..l {
                            hess[(off + i, off + j)] += gh[i] * gh[j] / (s * s);
                        }
                    }
                }
                let mut rhs = DVector::<f64>::zeros(d + ne);
                for i in 0..d {
                    grad[i] -= 1.0 / z[i];
                    hess[(i, i)] += 1.0 / (z[i] * z[i]);
                    rhs[i] = -grad[i];
                }
                for (k, &(off, _, _)) in sides.iter().enumerate() {
                    for i in 0..l {
                        hess[(d + k, off + i)] = 1.0;
                        hess[(off + i, d + k)] = 1.0;
                    }
                    rhs[d + k] = 1.0 - z[off..off + l].iter().sum::<f64>();
                }
                let h_only = hess.view((0, 0), (d, d)).into_owned();
                let sol = hess
                    .lu()
                    .solve(&rhs)
                    .ok_or_else(|| Error::numerical("singular KKT system in the KL barrier"))?;
                let dz: Vec<f64> = sol.rows(0, d).iter().copied().collect();
                let y: Vec<f64> = sol.rows(d, ne).iter().copied().collect();
                let dzv = DVector::from_column_slice(&dz);
                let dec = dzv.dot(&(&h_only * &dzv));
                let slope: f64 = grad.iter().zip(&dz).map(|(g, v)| g * v).sum();
                let mut alpha: f64 = 1.0;
                for (v, dv) in z.iter().zip(&dz) {
                    if *dv < 0.0 {
                        alpha = alpha.min(-0.99 * v / dv);
                    }
                }
                let phi0 = self.barrier(&z, t);
                let mut accepted = false;
                for _ in 0..80 {
                    let trial: Vec<f64> = z.iter().zip(&dz).map(|(v, dv)| v + alpha * dv).collect();
                    let phi = self.barrier(&trial, t);
                    let ok = if dec < 0.04 {
                        phi.is_finite()
                    } else {
                        phi <= phi0 + 0.25 * alpha * slope.min(0.0)
                    };
                    if ok {
                        z = trial;
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                last = Some((y, self.slacks(&z)));
                if !accepted || dec <= 1e-12 {
                    break;
                }
            }
            if let Some((y, slack)) = last {
                let mut dual = DualVariables::default();
                for (k, &(off, _, _)) in sides.iter().enumerate() {
                    let lambda = 1.0 / (t * slack[k]);
                    let alpha = -y[k] / t;
                    let pre = self.mode == Mode::FixedPost || (self.mode == Mode::Both && off == 0);
                    if pre {
                        dual.lambda1 = lambda;
                        dual.u1 = vec![alpha];
                    } else {
                        dual.lambda2 = lambda;
                        dual.u2 = vec![alpha];
                    }
                }
                let bound = self.dual_bound(&mut dual);
                if best.as_ref().is_none_or(|(b, _)| bound > *b) {
                    best = Some((bound, dual));
                }
            }
            let (p1, p2) = self.split(&z);
            let objective = kl_divergence(p2, p1);
            let bound = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            let gap = (objective - bound) / objective.abs().max(1.0);
            if (t >= t_min && gap <= 1e-2 * options.gap_tol) || t >= T_MAX {
                break;
            }
            t *= 10.0;
        }

        let (p1, p2) = self.split(&z);
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|w| w / s).collect::<Vec<f64>>()
        };
        let (p1, p2) = (norm(p1), norm(p2));
        let objective = kl_divergence(&p2, &p1);
        let residual = [
            kl_divergence(&p1, self.mu0) - self.r1,
            kl_divergence(&p2, self.nu0) - self.r2,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        let (bound, dual) = best.unwrap_or((f64::NEG_INFINITY, DualVariables::default()));
        let certificate = SolverCertificate::new(objective, bound, residual, iterations, dual);
        if exhausted || residual > options.feas_tol || certificate.relative_gap > options.gap_tol {
            return Err(Error::Numerical {
                message: format!(
                    "KL LFD solve ended with residual {residual:e} and relative gap {:e}",
                    certificate.relative_gap
                ),
                certificate: Some(Box::new(certificate)),
            });
        }
        Ok(KlLfdSolution {
            p1,
            p2,
            objective,
            certificate,
        })
    }

    fn dual_bound(&self, dual: &mut DualVariables) -> f64 {
        match self.mode {
            Mode::Both => {
                let (l1, l2) = (dual.lambda1, dual.lambda2);
                let (a1, a2) = (dual.u1[0], dual.u2[0]);
                if !(l1 > 0.0) || !(l2 >= 0.0) {
                    return f64::NEG_INFINITY;
                }
                let a = 1.0 + l2;
                let beta = 1.0 / a;
                let mut g = -l1 * self.r1 - l2 * self.r2 + a1 + a2;
                for i in 0..self.l {
                    let (mu, nu) = (self.mu0[i], self.nu0[i]);
                    let kc = a * (-1.0 + (l2 * nu.ln() + a2) / a).exp();
                    let deriv = |w: f64| l1 * (w - mu.ln() + 1.0) - a1 - kc * beta * ((beta - 1.0) * w).exp();
                    let w = increasing_root(deriv);
                    let p = w.exp();
                    g += (l1 * p * (w - mu.ln()) - a1 * p - kc * (beta * w).exp()).min(0.0);
                }
                g
            }
            Mode::FixedPre => {
                // The simplex multiplier has a closed-form optimum, after which
                // the bound is concave in λ2 alone and is maximized directly.
                let value = |l2: f64| {
                    let a = 1.0 + l2;
                    let terms: Vec<f64> = (0..self.l)
                        .map(|i| (self.mu0[i].ln() + l2 * self.nu0[i].ln()) / a)
                        .collect();
                    -l2 * self.r2 - a * log_sum_exp(&terms)
                };
                let mut hi = (2.0 * dual.lambda2).max(1.0);
                while value(2.0 * hi) > value(hi) && hi < 1e12 {
                    hi *= 2.0;
                }
                let l2 = golden_max(value, 0.0, 2.0 * hi);
                let l2 = if value(l2) >= value(dual.lambda2) { l2 } else { dual.lambda2 };
                dual.lambda2 = l2;
                let a = 1.0 + l2;
                let terms: Vec<f64> = (0..self.l)
                    .map(|i| (self.mu0[i].ln() + l2 * self.nu0[i].ln()) / a)
                    .collect();
                dual.u2 = vec![a * (1.0 - log_sum_exp(&terms))];
                value(l2)
            }
            Mode::FixedPost => {
                let (l1, a1) = (dual.lambda1, dual.u1[0]);
                if !(l1 > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let mut g = -l1 * self.r1 + a1;
                for i in 0..self.l {
                    let (mu, nu) = (self.mu0[i], self.nu0[i]);
                    let deriv = |w: f64| -nu * (-w).exp() + l1 * (w - mu.ln() + 1.0) - a1;
                    let w = increasing_root(deriv);
                    let p = w.exp();
                    g += nu * (nu.ln() - w) + l1 * p * (w - mu.ln()) - a1 * p;
                }
                g
            }
        }
    }
}

/// Root of a continuous increasing function on the real line, by bracketing
/// and bisection.
fn increasing_root(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) > 0.0 && lo > -1e6 {
        lo *= 2.0;
    }
    while f(hi) < 0.0 && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_two_bin_instance() {
        let s = solve_lfd_kl(&[0.8, 0.2], &[0.2, 0.8], 0.05, 0.05, &SolverOptions::default()).unwrap();
        assert!((s.objective - 0.225_815_169_679_569_83).abs() < 1e-7, "{}", s.objective);
        assert!((s.p1[0] - 0.664_841_643_986_342_8).abs() < 1e-6);
        assert!((s.p2[0] - (1.0 - s.p1[0])).abs() < 1e-6);
        assert!(s.certificate.relative_gap <= 1e-6);
        assert!(s.certificate.dual_bound <= s.objective + 1e-12);
    }

    #[test]
    fn one_sided_radii_bound_the_objective() {
        let opts = SolverOptions::default();
        for (r1, r2) in [(0.0, 0.05), (0.05, 0.0)] {
            let s = solve_lfd_kl(&[0.5, 0.3, 0.2], &[0.2, 0.3, 0.5], r1, r2, &opts).unwrap();
            assert!(s.certificate.relative_gap <= 1e-6);
            assert!(s.objective < kl_divergence(&[0.2, 0.3, 0.5], &[0.5, 0.3, 0.2]));
        }
    }

    #[test]
    fn zero_radii_and_errors() {
        let s = solve_lfd_kl(&[0.5, 0.5], &[0.25, 0.75], 0.0, 0.0, &SolverOptions::default()).unwrap();
        assert!((s.objective - kl_divergence(&[0.25, 0.75], &[0.5, 0.5])).abs() < 1e-15);
        assert!(matches!(
            solve_lfd_kl(&[1.0, 0.0], &[0.5, 0.5], 0.0, 0.0, &SolverOptions::default()),
            Err(Error::Infeasible { .. })
        ));
        assert!(solve_lfd_kl(&[1.0, 0.0], &[0.5, 0.5], 0.1, 0.1, &SolverOptions::default()).is_err());
        assert!(solve_lfd_kl(&[0.5, 0.5], &[0.5], 0.1, 0.1, &SolverOptions::default()).is_err());
    }
}
