//! Exact discrete optimal transport.
//!
//! [`wasserstein_distance`] solves the transportation linear program with the
//! transportation simplex (MODI / u-v method): the basis is a spanning tree of
//! the bipartite supply/demand graph, potentials come from the tree and the
//! entering cell closes a unique cycle. Degenerate stalls switch the pivot
//! rule to Bland's, which cannot cycle.
//!
//! [`worst_case_expectation`] maximizes a linear functional over a Wasserstein
//! ball restricted to a finite support. With a single budget constraint that
//! LP is the relaxation of a multiple-choice knapsack: each nominal atom picks
//! where to send its mass, and the optimum is found exactly by walking the
//! upper concave hulls of the per-atom (cost, gain) menus in order of slope.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{cost_matrix, CostMatrix, DiscreteDistribution, GroundMetric};

/// Tolerance on plan marginals and plan cost.
pub const PLAN_TOL: f64 = 1e-9;

/// A coupling between two discrete distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransportPlan {
    pub matrix: Vec<Vec<f64>>,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    /// Builds a plan from a dense row-major flow, taking marginals from it.
    pub fn from_flow(rows: usize, cols: usize, flow: &[f64], cost: &CostMatrix) -> Self {
        let matrix: Vec<Vec<f64>> = flow.chunks(cols).map(<[f64]>::to_vec).collect();
        debug_assert_eq!(matrix.len(), rows);
        let row_marginal = matrix.iter().map(|r| r.iter().sum()).collect();
        let mut col_marginal = vec![0.0; cols];
        let mut total = 0.0;
        for (l, row) in matrix.iter().enumerate() {
            for (m, &g) in row.iter().enumerate() {
                col_marginal[m] += g;
                total += g * cost.get(l, m);
            }
        }
        TransportPlan {
            matrix,
            row_marginal,
            col_marginal,
            cost: total,
        }
    }

    /// Largest violation of the plan invariants against `cost`.
    pub fn residual(&self, cost: &CostMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        let mut cols = vec![0.0; self.col_marginal.len()];
        let mut total = 0.0;
        for (l, row) in self.matrix.iter().enumerate() {
            let s: f64 = row.iter().sum();
            worst = worst.max((s - self.row_marginal[l]).abs());
            for (m, &g) in row.iter().enumerate() {
                worst = worst.max(-g);
                cols[m] += g;
                total += g * cost.get(l, m);
            }
        }
        for (c, want) in cols.iter().zip(&self.col_marginal) {
            worst = worst.max((c - want).abs());
        }
        worst.max((total - self.cost).abs())
    }

    pub fn validate(&self, cost: &CostMatrix) -> Result<()> {
        if self.matrix.len() != cost.rows()
            || self.matrix.iter().any(|r| r.len() != cost.cols())
            || self.row_marginal.len() != cost.rows()
            || self.col_marginal.len() != cost.cols()
        {
            return Err(Error::invalid("transport plan shape does not match cost matrix"));
        }
        let r = self.residual(cost);
        if r > PLAN_TOL {
            return Err(Error::invalid(format!("transport plan residual {r:e} exceeds {PLAN_TOL:e}")));
        }
        Ok(())
    }
}

/// Optimal value of a transportation problem with its plan and dual potentials.
#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub value: f64,
    pub plan: TransportPlan,
    /// Row potentials `u` and column potentials `v` with `u_i + v_j <= c_ij`.
    pub row_potential: Vec<f64>,
    pub col_potential: Vec<f64>,
    pub iterations: usize,
}

/// `W1(P, Q)` under `metric`, with an optimal coupling.
pub fn wasserstein_distance(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    metric: GroundMetric,
) -> Result<TransportSolution> {
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let cost = cost_matrix(metric, p.support(), q.support())?;
    solve_transport(p.weights(), q.weights(), &cost)
}

/// Solves `min <Γ, C>` over couplings of `supply` and `demand`.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &CostMatrix) -> Result<TransportSolution> {
    let (k, m) = (supply.len(), demand.len());
    if k == 0 || m == 0 || cost.rows() != k || cost.cols() != m {
        return Err(Error::invalid("transport problem shape mismatch"));
    }
    let (sa, sb): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (sa - sb).abs() > 1e-9 {
        return Err(Error::invalid(format!("unbalanced marginals: {sa} vs {sb}")));
    }
    let mut simplex = TransportSimplex::northwest_corner(supply, demand, cost);
    simplex.optimize()?;
    let plan = TransportPlan::from_flow(k, m, &simplex.flow, cost);
    let (u, v) = simplex.potentials()?;
    Ok(TransportSolution {
        value: plan.cost,
        plan,
        row_potential: u,
        col_potential: v,
        iterations: simplex.iterations,
    })
}

struct TransportSimplex<'a> {
    rows: usize,
    cols: usize,
    cost: &'a CostMatrix,
    flow: Vec<f64>,
    basic: Vec<bool>,
    basis: Vec<(usize, usize)>,
    iterations: usize,
}

impl<'a> TransportSimplex<'a> {
    fn northwest_corner(supply: &[f64], demand: &[f64], cost: &'a CostMatrix) -> Self {
        let (rows, cols) = (supply.len(), demand.len());
        let mut flow = vec![0.0; rows * cols];
        let mut basic = vec![false; rows * cols];
        let mut basis = Vec::with_capacity(rows + cols - 1);
        let (mut a, mut b) = (supply[0], demand[0]);
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a.min(b).max(0.0);
            flow[i * cols + j] = x;
            basic[i * cols + j] = true;
            basis.push((i, j));
            if i == rows - 1 && j == cols - 1 {
                break;
            }
            a -= x;
            b -= x;
            // Leave the row when it is used up (or the columns are); ties keep
            // a degenerate zero cell so the basis stays a spanning tree.
            if (a <= b && i < rows - 1) || j == cols - 1 {
                i += 1;
                a = supply[i];
            } else {
                j += 1;
                b = demand[j];
            }
        }
        // Absorb rounding of the marginals into the final cell.
        let last = rows * cols - 1;
        flow[last] = flow[last].max(0.0);
        TransportSimplex {
            rows,
            cols,
            cost,
            flow,
            basic,
            basis,
            iterations: 0,
        }
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.rows + self.cols];
        for (e, &(i, j)) in self.basis.iter().enumerate() {
            adj[i].push(e);
            adj[self.rows + j].push(e);
        }
        adj
    }

    fn potentials(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let adj = self.adjacency();
        let n = self.rows + self.cols;
        let mut pot = vec![f64::NAN; n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        let mut seen = 1;
        while let Some(node) = queue.pop_front() {
            for &e in &adj[node] {
                let (i, j) = self.basis[e];
                let other = if node < self.rows { self.rows + j } else { i };
                if pot[other].is_nan() {
                    pot[other] = self.cost.get(i, j) - pot[node];
                    seen += 1;
                    queue.push_back(other);
                }
            }
        }
        if seen != n {
            return Err(Error::numerical("transport basis is not a spanning tree"));
        }
        let v = pot.split_off(self.rows);
        Ok((pot, v))
    }

    /// Basis edges on the tree path from column `j` to row `i`, in order.
    fn tree_path(&self, i: usize, j: usize) -> Result<Vec<usize>> {
        let adj = self.adjacency();
        let start = self.rows + j;
        let mut parent_edge = vec![usize::MAX; self.rows + self.cols];
        let mut visited = vec![false; self.rows + self.cols];
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            if node == i {
                break;
            }
            for &e in &adj[node] {
                let (bi, bj) = self.basis[e];
                let other = if node < self.rows { self.rows + bj } else { bi };
                if !visited[other] {
                    visited[other] = true;
                    parent_edge[other] = e;
                    queue.push_back(other);
                }
            }
        }
        if !visited[i] {
            return Err(Error::numerical("transport basis is disconnected"));
        }
        let mut path = Vec::new();
        let mut node = i;
        while node != start {
            let e = parent_edge[node];
            path.push(e);
            let (bi, bj) = self.basis[e];
            node = if node < self.rows { self.rows + bj } else { bi };
        }
        path.reverse();
        Ok(path)
    }

    fn optimize(&mut self) -> Result<()> {
        let scale = 1.0 + (0..self.rows).flat_map(|i| self.cost.row(i).iter()).fold(0.0f64, |a, &c| a.max(c.abs()));
        let tol = 1e-12 * scale;
        let max_iter = 50 * self.rows * self.cols + 1000;
        let mut bland = false;
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= max_iter {
                return Err(Error::numerical(format!(
                    "transport simplex exceeded {max_iter} iterations"
                )));
            }
            let (u, v) = self.potentials()?;
            let mut entering = None;
            let mut best = -tol;
            'scan: for i in 0..self.rows {
                for j in 0..self.cols {
                    if self.basic[i * self.cols + j] {
                        continue;
                    }
                    let d = self.cost.get(i, j) - u[i] - v[j];
                    if d < best {
                        best = d;
                        entering = Some((i, j));
                        if bland {
                            break 'scan;
                        }
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(());
            };
            self.iterations += 1;

            // Path edges alternate -, +, -, ... starting next to column ej.
            let path = self.tree_path(ei, ej)?;
            let mut theta = f64::INFINITY;
            let mut leave = usize::MAX;
            for (pos, &e) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    let (i, j) = self.basis[e];
                    let x = self.flow[i * self.cols + j];
                    let better = x < theta
                        || (x == theta && {
                            let (li, lj) = self.basis[leave];
                            if bland {
                                i * self.cols + j < li * self.cols + lj
                            } else {
                                false
                            }
                        });
                    if better {
                        theta = x;
                        leave = e;
                    }
                }
            }
            let theta = theta.max(0.0);
            for (pos, &e) in path.iter().enumerate() {
                let (i, j) = self.basis[e];
                let cell = &mut self.flow[i * self.cols + j];
                if pos % 2 == 0 {
                    *cell = (*cell - theta).max(0.0);
                } else {
                    *cell += theta;
                }
            }
            let (li, lj) = self.basis[leave];
            self.flow[li * self.cols + lj] = 0.0;
            self.basic[li * self.cols + lj] = false;
            self.flow[ei * self.cols + ej] = theta;
            self.basic[ei * self.cols + ej] = true;
            self.basis[leave] = (ei, ej);

            if theta == 0.0 {
                degenerate_run += 1;
                if degenerate_run > 20 * (self.rows + self.cols) {
                    bland = true;
                }
            } else {
                degenerate_run = 0;
            }
        }
    }
}

/// Result of maximizing `Σ μ_l f_l` over a Wasserstein ball on a fixed support.
#[derive(Clone, Debug)]
pub struct WorstCaseExpectation {
    pub value: f64,
    /// Maximizing distribution, as weights over the support.
    pub witness: Vec<f64>,
    /// Transport cost spent reaching the witness from the nominal.
    pub transport_cost: f64,
}

#[derive(Clone, Copy)]
struct HullStep {
    source: usize,
    order: usize,
    from: usize,
    to: usize,
    slope: f64,
    dcost: f64,
    dgain: f64,
}

/// Maximizes `Σ μ_l f_l` over distributions `μ` on the support of `cost` with
/// `W(μ, nominal) <= radius`, where `nominal` is a probability vector on the
/// rows of `cost` (the same support).
pub fn worst_case_expectation(
    f: &[f64],
    nominal: &[f64],
    radius: f64,
    cost: &CostMatrix,
) -> Result<WorstCaseExpectation> {
    let n = f.len();
    if cost.rows() != n || cost.cols() != n || nominal.len() != n {
        return Err(Error::invalid("worst-case expectation: size mismatch"));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("worst-case expectation needs finite f"));
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!("negative radius {radius}")));
    }

    let mut position = vec![usize::MAX; n];
    let mut steps = Vec::new();
    for l in 0..n {
        if nominal[l] <= 0.0 {
            continue;
        }
        let row = cost.row(l);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .unwrap()
                .then(f[b].partial_cmp(&f[a]).unwrap())
        });
        let base = order[0];
        position[l] = base;
        let mut hull = vec![base];
        for &m in &order[1..] {
            let top = *hull.last().unwrap();
            if f[m] <= f[top] {
                continue;
            }
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                // Drop b when it lies on or below the chord a -> m.
                let lhs = (f[b] - f[a]) * (row[m] - row[a]);
                let rhs = (f[m] - f[a]) * (row[b] - row[a]);
                if lhs <= rhs {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(m);
        }
        for (order, w) in hull.windows(2).enumerate() {
            let dcost = row[w[1]] - row[w[0]];
            let dgain = f[w[1]] - f[w[0]];
            steps.push(HullStep {
                source: l,
                order,
                from: w[0],
                to: w[1],
                slope: dgain / dcost,
                dcost,
                dgain,
            });
        }
    }
    steps.sort_by(|a, b| {
        b.slope
            .partial_cmp(&a.slope)
            .unwrap()
            .then(a.source.cmp(&b.source))
            .then(a.order.cmp(&b.order))
    });

    let mut value: f64 = (0..n)
        .filter(|&l| nominal[l] > 0.0)
        .map(|l| nominal[l] * f[position[l]])
        .sum();
    let mut spent: f64 = (0..n)
        .filter(|&l| nominal[l] > 0.0)
        .map(|l| nominal[l] * cost.get(l, position[l]))
        .sum();
    let mut budget = radius - spent;
    let mut split: Option<(usize, usize, f64)> = None;
    if budget >= 0.0 {
        for s in &steps {
            let mass = nominal[s.source];
            let full = mass * s.dcost;
            if full <= budget {
                budget -= full;
                spent += full;
                value += mass * s.dgain;
                position[s.source] = s.to;
            } else {
                let frac = budget / full;
                value += frac * mass * s.dgain;
                spent += budget;
                split = Some((s.source, s.to, frac));
                debug_assert_eq!(position[s.source], s.from);
                break;
            }
        }
    }

    let mut witness = vec![0.0; n];
    for l in 0..n {
        if nominal[l] <= 0.0 {
            continue;
        }
        match split {
            Some((src, to, frac)) if src == l => {
                witness[position[l]] += (1.0 - frac) * nominal[l];
                witness[to] += frac * nominal[l];
            }
            _ => witness[position[l]] += nominal[l],
        }
    }
    Ok(WorstCaseExpectation {
        value,
        witness,
        transport_cost: spent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::Point;

    fn dist(xs: &[f64], ws: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::new(xs.iter().copied().map(Point::scalar).collect(), ws.to_vec()).unwrap()
    }

    fn line_cost(xs: &[f64]) -> CostMatrix {
        let pts: Vec<Point> = xs.iter().copied().map(Point::scalar).collect();
        cost_matrix(GroundMetric::L1, &pts, &pts).unwrap()
    }

    #[test]
    fn distance_to_self_is_zero() {
        let p = dist(&[0.0, 1.0, 4.0], &[0.2, 0.3, 0.5]);
        let sol = wasserstein_distance(&p, &p, GroundMetric::L1).unwrap();
        assert!(sol.value.abs() < 1e-12);
        sol.plan.validate(&line_cost(&[0.0, 1.0, 4.0])).unwrap();
    }

    #[test]
    fn dirac_to_dirac() {
        let sol = wasserstein_distance(&dist(&[0.0], &[1.0]), &dist(&[1.0], &[1.0]), GroundMetric::L1).unwrap();
        assert_eq!(sol.value, 1.0);
    }

    #[test]
    fn uniform_pairs_on_the_line() {
        let p = dist(&[0.0, 2.0], &[0.5, 0.5]);
        let q = dist(&[1.0, 3.0], &[0.5, 0.5]);
        let sol = wasserstein_distance(&p, &q, GroundMetric::L1).unwrap();
        assert!((sol.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn potentials_certify_optimality() {
        let p = dist(&[0.0, 0.5, 2.0, 3.5], &[0.1, 0.4, 0.3, 0.2]);
        let q = dist(&[0.2, 1.0, 2.5], &[0.5, 0.25, 0.25]);
        let sol = wasserstein_distance(&p, &q, GroundMetric::L1).unwrap();
        let c = cost_matrix(GroundMetric::L1, p.support(), q.support()).unwrap();
        let mut dual = 0.0;
        for i in 0..4 {
            dual += p.weights()[i] * sol.row_potential[i];
            for j in 0..3 {
                assert!(sol.row_potential[i] + sol.col_potential[j] <= c.get(i, j) + 1e-12);
            }
        }
        dual += q.weights().iter().zip(&sol.col_potential).map(|(w, v)| w * v).sum::<f64>();
        assert!((dual - sol.value).abs() < 1e-12);
        sol.plan.validate(&c).unwrap();
    }

    #[test]
    fn worst_case_radius_zero_is_nominal_mean() {
        let c = line_cost(&[0.0, 1.0, 2.0]);
        let nominal = [0.2, 0.5, 0.3];
        let f = [3.0, -1.0, 2.0];
        let wc = worst_case_expectation(&f, &nominal, 0.0, &c).unwrap();
        let mean: f64 = nominal.iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((wc.value - mean).abs() < 1e-15);
    }

    #[test]
    fn worst_case_of_constant() {
        let c = line_cost(&[0.0, 1.0, 2.0]);
        for r in [0.0, 0.3, 10.0] {
            let wc = worst_case_expectation(&[1.5; 3], &[0.2, 0.5, 0.3], r, &c).unwrap();
            assert!((wc.value - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn worst_case_two_point_by_hand() {
        let c = line_cost(&[0.0, 1.0]);
        let wc = worst_case_expectation(&[0.0, 1.0], &[1.0, 0.0], 0.3, &c).unwrap();
        assert!((wc.value - 0.3).abs() < 1e-12);
        assert!((wc.witness[0] - 0.7).abs() < 1e-12);
        assert!((wc.witness[1] - 0.3).abs() < 1e-12);
        assert!((wc.transport_cost - 0.3).abs() < 1e-12);
    }

    #[test]
    fn worst_case_saturates_at_max() {
        let xs = [0.0, 1.0, 2.5, 4.0];
        let c = line_cost(&xs);
        let f = [0.0, 2.0, 1.0, 3.0];
        let nominal = [0.25, 0.25, 0.25, 0.25];
        // Enough budget to move every atom onto the argmax point.
        let need: f64 = (0..4).map(|l| nominal[l] * c.get(l, 3)).sum();
        let wc = worst_case_expectation(&f, &nominal, need, &c).unwrap();
        assert!((wc.value - 3.0).abs() < 1e-12);
        let wc = worst_case_expectation(&f, &nominal, need * 5.0, &c).unwrap();
        assert!((wc.value - 3.0).abs() < 1e-12);
    }
}
