//! Least favorable distributions over Wasserstein balls.
//!
//! Given pre- and post-change training samples, the nominal distributions are
//! their empirical measures and the ambiguity sets are Wasserstein balls of
//! radii `r1`, `r2` around them. The least favorable pair minimizes
//! `KL(ν̃ || μ̃)` over the two balls. An optimizer exists on the joint sample
//! set `Z`, so the search runs over probability vectors on `Z` coupled to the
//! nominals by transport plans:
//!
//! ```text
//! min  Σ_l p2_l log(p2_l / p1_l)
//! s.t. Γ_k ≥ 0,  Γ_k 1 = a_k,  Γ_kᵀ 1 = p_k,  <Γ_k, C> ≤ r_k   (k = 1, 2)
//! ```
//!
//! [`solve_lfd`] returns the pair together with a duality certificate.
//! [`solve_lfd_kl`] solves the analogous program for KL balls on binned data.

mod barrier;
mod kl;

use serde::{Deserialize, Serialize};

pub use kl::{solve_lfd_kl, KlLfdSolution};
pub(crate) use barrier::log_sum_exp;

use crate::error::{Error, Result};
use crate::space::{cost_matrix, CostMatrix, DiscreteDistribution, GroundMetric, Point};
use crate::transport::{worst_case_expectation, TransportPlan};

/// Log-likelihood ratios are clamped to `[-LLR_CLAMP, LLR_CLAMP]`.
pub const LLR_CLAMP: f64 = 30.0;

/// Condition (weak stochastic boundedness) is accepted up to this slack.
pub const WEAK_BOUNDEDNESS_TOL: f64 = 1e-6;

/// Tolerances and budget for the convex solvers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// Budget of Newton iterations across the whole solve.
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feas_tol: 1e-8,
            gap_tol: 1e-6,
            max_iterations: 100_000,
        }
    }
}

/// Input of the Wasserstein LFD program.
#[derive(Clone, Debug)]
pub struct LfdProblem {
    pub pre_samples: Vec<Point>,
    pub post_samples: Vec<Point>,
    pub r1: f64,
    pub r2: f64,
    pub metric: GroundMetric,
}

impl LfdProblem {
    pub fn new(
        pre_samples: Vec<Point>,
        post_samples: Vec<Point>,
        r1: f64,
        r2: f64,
        metric: GroundMetric,
    ) -> Result<Self> {
        let p = LfdProblem {
            pre_samples,
            post_samples,
            r1,
            r2,
            metric,
        };
        p.validate()?;
        Ok(p)
    }

    /// One-dimensional convenience constructor.
    pub fn scalar(pre: &[f64], post: &[f64], r1: f64, r2: f64, metric: GroundMetric) -> Result<Self> {
        let pts = |xs: &[f64]| xs.iter().map(|&x| Point::new(vec![x])).collect::<Result<Vec<_>>>();
        LfdProblem::new(pts(pre)?, pts(post)?, r1, r2, metric)
    }

    fn validate(&self) -> Result<()> {
        if self.pre_samples.is_empty() || self.post_samples.is_empty() {
            return Err(Error::invalid("both sample sets must be nonempty"));
        }
        for (name, r) in [("r1", self.r1), ("r2", self.r2)] {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {r}")));
            }
        }
        let dim = self.pre_samples[0].dim();
        if self
            .pre_samples
            .iter()
            .chain(&self.post_samples)
            .any(|p| p.dim() != dim)
        {
            return Err(Error::invalid("samples of mixed dimension"));
        }
        Ok(())
    }
}

/// The joint support `Z` with both nominals expressed as vectors on it.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSupport {
    pub points: Vec<Point>,
    pub mu0: Vec<f64>,
    pub nu0: Vec<f64>,
}

/// Pre-change samples followed by post-change samples, duplicates merged.
pub fn build_joint_support(problem: &LfdProblem) -> Result<JointSupport> {
    problem.validate()?;
    let mut all = problem.pre_samples.clone();
    all.extend(problem.post_samples.iter().cloned());
    let merged = crate::space::empirical_from_samples(&all)?;
    let points = merged.support().to_vec();
    let index = |p: &Point| points.iter().position(|q| q == p || (q.coords() == p.coords()));
    let mut lookup = std::collections::HashMap::new();
    for (i, p) in points.iter().enumerate() {
        lookup.insert(key(p), i);
    }
    let mut mu0 = vec![0.0; points.len()];
    let mut nu0 = vec![0.0; points.len()];
    let (n1, n2) = (problem.pre_samples.len() as f64, problem.post_samples.len() as f64);
    for p in &problem.pre_samples {
        let i = lookup.get(&key(p)).copied().or_else(|| index(p)).expect("merged support");
        mu0[i] += 1.0 / n1;
    }
    for p in &problem.post_samples {
        let i = lookup.get(&key(p)).copied().or_else(|| index(p)).expect("merged support");
        nu0[i] += 1.0 / n2;
    }
    Ok(JointSupport { points, mu0, nu0 })
}

fn key(p: &Point) -> Vec<u64> {
    p.coords()
        .iter()
        .map(|&c| if c == 0.0 { 0 } else { c.to_bits() })
        .collect()
}

/// Multipliers of the LFD program, as recovered from the solver.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DualVariables {
    /// Multipliers of the two transport-budget constraints.
    pub lambda1: f64,
    pub lambda2: f64,
    /// Multipliers of the nominal-marginal constraints, indexed over `Z`
    /// (zero where the nominal has no mass).
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
}

/// Evidence that a returned point is optimal: a feasible dual value bounds
/// the optimum from below.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SolverCertificate {
    pub primal_residual: f64,
    pub dual_bound: f64,
    pub relative_gap: f64,
    pub iterations: usize,
    pub dual_variables: DualVariables,
}

impl SolverCertificate {
    pub(crate) fn new(objective: f64, dual_bound: f64, primal_residual: f64, iterations: usize, dual: DualVariables) -> Self {
        SolverCertificate {
            primal_residual,
            dual_bound,
            relative_gap: (objective - dual_bound) / objective.abs().max(1.0),
            iterations,
            dual_variables: dual,
        }
    }
}

/// Least favorable pair on the joint support.
#[derive(Clone, Debug, PartialEq)]
pub struct LfdSolution {
    pub support: Vec<Point>,
    /// Pre-change LFD `μ̃`.
    pub p1: Vec<f64>,
    /// Post-change LFD `ν̃`.
    pub p2: Vec<f64>,
    pub mu0: Vec<f64>,
    pub nu0: Vec<f64>,
    /// Coupling of `mu0` (rows) with `p1` (columns).
    pub plan1: TransportPlan,
    /// Coupling of `nu0` (rows) with `p2` (columns).
    pub plan2: TransportPlan,
    pub objective: f64,
    pub certificate: SolverCertificate,
    pub r1: f64,
    pub r2: f64,
    pub metric: GroundMetric,
}

/// `Σ_{p2>0} p2 log(p2/p1)`, infinite when `p2` is not absolutely continuous
/// with respect to `p1`.
pub fn kl_divergence(p2: &[f64], p1: &[f64]) -> f64 {
    p2.iter()
        .zip(p1)
        .map(|(&b, &a)| {
            if b <= 0.0 {
                0.0
            } else if a <= 0.0 {
                f64::INFINITY
            } else {
                b * (b / a).ln()
            }
        })
        .sum()
}

impl LfdSolution {
    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    pub fn cost_matrix(&self) -> Result<CostMatrix> {
        cost_matrix(self.metric, &self.support, &self.support)
    }

    /// `μ̃` as a distribution (zero-mass atoms kept).
    pub fn pre_lfd(&self) -> DiscreteDistribution {
        DiscreteDistribution::new(self.support.clone(), self.p1.clone()).expect("validated LFD")
    }

    pub fn post_lfd(&self) -> DiscreteDistribution {
        DiscreteDistribution::new(self.support.clone(), self.p2.clone()).expect("validated LFD")
    }

    /// Checks every structural invariant of a solution against `feas_tol`.
    pub fn validate(&self, feas_tol: f64) -> Result<()> {
        let n = self.support.len();
        if n == 0 {
            return Err(Error::invalid("empty LFD support"));
        }
        for (name, v) in [("p1", &self.p1), ("p2", &self.p2), ("mu0", &self.mu0), ("nu0", &self.nu0)] {
            if v.len() != n {
                return Err(Error::invalid(format!("{name} has {} entries, support has {n}", v.len())));
            }
            crate::space::normalize_probability(v.clone())
                .map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        }
        DiscreteDistribution::new(self.support.clone(), self.mu0.clone())?;
        if let Some(l) = (0..n).find(|&l| self.p2[l] > 0.0 && self.p1[l] <= 0.0) {
            return Err(Error::invalid(format!(
                "p2 is not absolutely continuous w.r.t. p1 at atom {l}"
            )));
        }
        let cost = self.cost_matrix()?;
        for (k, plan, nominal, lfd, r) in [
            (1, &self.plan1, &self.mu0, &self.p1, self.r1),
            (2, &self.plan2, &self.nu0, &self.p2, self.r2),
        ] {
            plan.validate(&cost)
                .map_err(|e| Error::invalid(format!("plan{k}: {e}")))?;
            let marg = plan
                .row_marginal
                .iter()
                .zip(nominal)
                .chain(plan.col_marginal.iter().zip(lfd))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if marg > feas_tol {
                return Err(Error::invalid(format!("plan{k} marginals off by {marg:e}")));
            }
            if plan.cost > r + feas_tol {
                return Err(Error::invalid(format!(
                    "plan{k} cost {} exceeds radius {r}",
                    plan.cost
                )));
            }
        }
        let kl = kl_divergence(&self.p2, &self.p1);
        if (kl - self.objective).abs() > 1e-8 {
            return Err(Error::invalid(format!(
                "objective {} does not match KL {kl}",
                self.objective
            )));
        }
        if self.certificate.relative_gap < -1e-9 {
            return Err(Error::invalid("certificate dual bound exceeds the objective"));
        }
        Ok(())
    }

    pub fn to_document(&self) -> LfdDocument {
        LfdDocument {
            support: self.support.iter().map(|p| p.coords().to_vec()).collect(),
            p1: self.p1.clone(),
            p2: self.p2.clone(),
            objective: self.objective,
            gap: self.certificate.relative_gap,
            r1: self.r1,
            r2: self.r2,
            metric: self.metric,
            mu0: self.mu0.clone(),
            nu0: self.nu0.clone(),
            plan1: self.plan1.clone(),
            plan2: self.plan2.clone(),
            certificate: self.certificate.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("LFD serializes")
    }

    /// Parses and re-validates a document written by [`LfdSolution::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LfdDocument =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("LFD JSON: {e}")))?;
        let sol = doc.into_solution()?;
        sol.validate(SolverOptions::default().feas_tol)?;
        Ok(sol)
    }
}

/// On-disk form of an [`LfdSolution`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LfdDocument {
    pub support: Vec<Vec<f64>>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub objective: f64,
    pub gap: f64,
    pub r1: f64,
    pub r2: f64,
    pub metric: GroundMetric,
    pub mu0: Vec<f64>,
    pub nu0: Vec<f64>,
    pub plan1: TransportPlan,
    pub plan2: TransportPlan,
    pub certificate: SolverCertificate,
}

impl LfdDocument {
    pub fn into_solution(self) -> Result<LfdSolution> {
        let support = self
            .support
            .into_iter()
            .map(Point::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(LfdSolution {
            support,
            p1: self.p1,
            p2: self.p2,
            mu0: self.mu0,
            nu0: self.nu0,
            plan1: self.plan1,
            plan2: self.plan2,
            objective: self.objective,
            certificate: self.certificate,
            r1: self.r1,
            r2: self.r2,
            metric: self.metric,
        })
    }
}

/// Solves the Wasserstein LFD program with a log-barrier interior-point
/// method and certifies the result with an explicit dual bound.
pub fn solve_lfd(problem: &LfdProblem, options: &SolverOptions) -> Result<LfdSolution> {
    let joint = build_joint_support(problem)?;
    let cost = cost_matrix(problem.metric, &joint.points, &joint.points)?;
    let out = barrier::solve(&cost, &joint.mu0, &joint.nu0, problem.r1, problem.r2, options)?;
    let exhausted = out.budget_exhausted;
    let n = joint.points.len();
    let plan1 = TransportPlan::from_flow(n, n, &out.plan1, &cost);
    let plan2 = TransportPlan::from_flow(n, n, &out.plan2, &cost);
    let p1 = plan1.col_marginal.clone();
    let p2 = plan2.col_marginal.clone();
    let objective = kl_divergence(&p2, &p1);
    let residual = [
        plan1
            .row_marginal
            .iter()
            .zip(&joint.mu0)
            .chain(plan2.row_marginal.iter().zip(&joint.nu0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        (plan1.cost - problem.r1).max(0.0),
        (plan2.cost - problem.r2).max(0.0),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let certificate = SolverCertificate::new(objective, out.dual_bound, residual, out.iterations, out.dual);
    if exhausted || residual > options.feas_tol || certificate.relative_gap > options.gap_tol {
        return Err(Error::Numerical {
            message: format!(
                "LFD solve ended with residual {residual:e} and relative gap {:e}",
                certificate.relative_gap
            ),
            certificate: Some(Box::new(certificate)),
        });
    }
    Ok(LfdSolution {
        support: joint.points,
        p1,
        p2,
        mu0: joint.mu0,
        nu0: joint.nu0,
        plan1,
        plan2,
        objective,
        certificate,
        r1: problem.r1,
        r2: problem.r2,
        metric: problem.metric,
    })
}

/// Outcome of checking `sup_{μ ∈ ball(μ0, r1)} E_μ[dν̃/dμ̃] ≤ 1` on `Z`.
#[derive(Clone, Debug)]
pub struct WeakBoundednessReport {
    pub worst_case_mean_lr: f64,
    pub satisfied: bool,
    pub witness: DiscreteDistribution,
}

/// Evaluates the worst-case mean likelihood ratio over the pre-change ball,
/// restricted to distributions on the joint support.
pub fn verify_weak_boundedness(solution: &LfdSolution) -> Result<WeakBoundednessReport> {
    let ratio: Vec<f64> = solution
        .p1
        .iter()
        .zip(&solution.p2)
        .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
            (true, _) => b / a,
            (false, false) => 0.0,
            (false, true) => f64::INFINITY,
        })
        .collect();
    if ratio.iter().any(|r| r.is_infinite()) {
        return Err(Error::invalid("p2 is not absolutely continuous w.r.t. p1"));
    }
    let cost = solution.cost_matrix()?;
    let wc = worst_case_expectation(&ratio, &solution.mu0, solution.r1, &cost)?;
    let witness = DiscreteDistribution::new(solution.support.clone(), wc.witness)?;
    Ok(WeakBoundednessReport {
        worst_case_mean_lr: wc.value,
        satisfied: wc.value <= 1.0 + WEAK_BOUNDEDNESS_TOL,
        witness,
    })
}

/// Log-likelihood ratio `log(ν̃/μ̃)` per support atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LlrTable {
    pub support: Vec<Point>,
    pub log_ratio: Vec<f64>,
}

/// Clamped log ratio of two masses with the table conventions:
/// `0` when both vanish, `-LLR_CLAMP` when only the numerator does.
pub fn clamped_log_ratio(num: f64, den: f64) -> Result<f64> {
    match (num > 0.0, den > 0.0) {
        (true, true) => Ok((num / den).ln().clamp(-LLR_CLAMP, LLR_CLAMP)),
        (false, true) => Ok(-LLR_CLAMP),
        (false, false) => Ok(0.0),
        (true, false) => Err(Error::invalid(
            "positive post-change mass on an atom without pre-change mass",
        )),
    }
}

pub fn llr_table(solution: &LfdSolution) -> Result<LlrTable> {
    let log_ratio = solution
        .p2
        .iter()
        .zip(&solution.p1)
        .map(|(&b, &a)| clamped_log_ratio(b, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(LlrTable {
        support: solution.support.clone(),
        log_ratio,
    })
}
