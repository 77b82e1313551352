//! Log-barrier method for the Wasserstein LFD program.
//!
//! Unknowns are the entries of the free transport plans, one slack per
//! budget constraint and the free marginals `p`. Each Newton system is
//! reduced twice: first over the (diagonal) plan and slack block, which
//! leaves a dense system `G` in the constraint multipliers, then over those
//! multipliers, which leaves a dense system in `p`. Both are symmetric
//! positive definite and are factored after Jacobi scaling.

use nalgebra::{DMatrix, DVector};

use super::{DualVariables, SolverOptions};
use crate::error::{Error, Result};
use crate::space::CostMatrix;

/// Projection onto the pre-change support counts as unique when the runner-up
/// is farther by more than this.
const TIE_TOL: f64 = 1e-12;
/// Budget slack below which a one-sided ball is treated as touching.
const BOUNDARY_TOL: f64 = 1e-12;
const T_INIT: f64 = 1.0;
const T_FACTOR: f64 = 10.0;
const T_MAX: f64 = 1e16;
const CENTER_TOL: f64 = 1e-10;
const MAX_CENTER_STEPS: usize = 80;
const MIN_T_FACTOR: f64 = 1.2;
const SETTLED_DECREMENT: f64 = 1e-4;
const SETTLED_STEPS: usize = 3;

pub(super) struct Outcome {
    /// Dense row-major `n × n` plans.
    pub plan1: Vec<f64>,
    pub plan2: Vec<f64>,
    pub dual_bound: f64,
    pub dual: DualVariables,
    pub iterations: usize,
    pub budget_exhausted: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Mode {
    /// Both balls have positive radius.
    Both,
    /// `r1 = 0`: `p1` is pinned to `mu0`.
    FixedPre,
    /// `r2 = 0`: `p2` is pinned to `nu0`.
    FixedPost,
}

struct Block {
    sources: Vec<usize>,
    mass: Vec<f64>,
    cols: Vec<usize>,
    radius: f64,
    xoff: usize,
    poff: usize,
    /// Offset of this block's reduced marginal coordinates (all but the last
    /// column, whose mass follows from the others).
    qoff: usize,
    roff: usize,
}

impl Block {
    fn entry(&self, i: usize, ci: usize) -> usize {
        self.xoff + i * self.cols.len() + ci
    }
}

struct Program<'a> {
    cost: &'a CostMatrix,
    mode: Mode,
    n: usize,
    blocks: Vec<Block>,
    mu0: &'a [f64],
    nu0: &'a [f64],
    idx1: Vec<Option<usize>>,
    idx2: Vec<Option<usize>>,
    nx: usize,
    np: usize,
    nq: usize,
    nr: usize,
}

#[derive(Clone)]
struct State {
    x: Vec<f64>,
    s: Vec<f64>,
    p: Vec<f64>,
    /// Current multiplier estimate, in barrier scaling.
    y: DVector<f64>,
}

struct Step {
    dx: Vec<f64>,
    ds: Vec<f64>,
    dp: Vec<f64>,
    y: DVector<f64>,
    decrement2: f64,
    slope: f64,
}

/// Per-column derivatives of the objective with respect to `(p1_m, p2_m)`.
#[derive(Clone, Copy, Default)]
struct Local {
    g1: f64,
    g2: f64,
    h11: f64,
    h12: f64,
    h22: f64,
}

fn kl_term(p2: f64, p1: f64) -> f64 {
    if p2 <= 0.0 {
        0.0
    } else {
        p2 * (p2 / p1).ln()
    }
}

pub(super) fn solve(
    cost: &CostMatrix,
    mu0: &[f64],
    nu0: &[f64],
    r1: f64,
    r2: f64,
    options: &SolverOptions,
) -> Result<Outcome> {
    let n = mu0.len();
    let pre: Vec<usize> = (0..n).filter(|&l| mu0[l] > 0.0).collect();
    let post: Vec<usize> = (0..n).filter(|&l| nu0[l] > 0.0).collect();
    let diag = |w: &[f64]| {
        let mut d = vec![0.0; n * n];
        for l in 0..n {
            d[l * n + l] = w[l];
        }
        d
    };

    let mode = match (r1 > 0.0, r2 > 0.0) {
        (false, false) => {
            if let Some(&l) = post.iter().find(|&&l| mu0[l] <= 0.0) {
                return Err(Error::Infeasible {
                    constraint: format!(
                        "zero radii and post-change atom {l} lies outside the pre-change support"
                    ),
                });
            }
            return Ok(Outcome {
                plan1: diag(mu0),
                plan2: diag(nu0),
                dual_bound: super::kl_divergence(nu0, mu0),
                dual: DualVariables::default(),
                iterations: 0,
                budget_exhausted: false,
            });
        }
        (false, true) => {
            let reach: f64 = post
                .iter()
                .map(|&j| nu0[j] * pre.iter().map(|&m| cost.get(j, m)).fold(f64::INFINITY, f64::min))
                .sum();
            if reach > r2 + BOUNDARY_TOL {
                return Err(Error::Infeasible {
                    constraint: format!(
                        "r1 = 0 and moving the post-change nominal onto the pre-change support costs {reach}, above r2 = {r2}"
                    ),
                });
            }
            if reach >= r2 - BOUNDARY_TOL {
                return projected(cost, mu0, nu0, &pre, &post);
            }
            Mode::FixedPre
        }
        (true, false) => Mode::FixedPost,
        (true, true) => Mode::Both,
    };

    let all: Vec<usize> = (0..n).collect();
    let mut blocks = Vec::new();
    let (mut nx, mut np, mut nr) = (0, 0, 0);
    let mut push = |sources: &[usize], mass: &[f64], cols: &[usize], radius: f64| {
        let b = Block {
            sources: sources.to_vec(),
            mass: sources.iter().map(|&l| mass[l]).collect(),
            cols: cols.to_vec(),
            radius,
            xoff: nx,
            poff: np,
            qoff: np - blocks.len(),
            roff: nr,
        };
        nx += b.sources.len() * b.cols.len();
        np += b.cols.len();
        nr += b.sources.len();
        blocks.push(b);
    };
    let mut idx1 = vec![None; n];
    let mut idx2 = vec![None; n];
    match mode {
        Mode::Both => {
            push(&pre, mu0, &all, r1);
            push(&post, nu0, &all, r2);
            for m in 0..n {
                idx1[m] = Some(m);
                idx2[m] = Some(n + m);
            }
        }
        Mode::FixedPre => {
            push(&post, nu0, &pre, r2);
            for (ci, &m) in pre.iter().enumerate() {
                idx2[m] = Some(ci);
            }
        }
        Mode::FixedPost => {
            push(&pre, mu0, &all, r1);
            for m in 0..n {
                idx1[m] = Some(m);
            }
        }
    }
    let nb = blocks.len();
    let prog = Program {
        cost,
        mode,
        n,
        blocks,
        mu0,
        nu0,
        idx1,
        idx2,
        nx,
        np,
        nq: np - nb,
        nr,
    };
    prog.run(options)
}

/// `r1 = 0` with the post-change ball exactly touching the pre-change support:
/// the only feasible move sends each post atom to its nearest pre atom.
fn projected(cost: &CostMatrix, mu0: &[f64], nu0: &[f64], pre: &[usize], post: &[usize]) -> Result<Outcome> {
    let n = mu0.len();
    let mut plan2 = vec![0.0; n * n];
    for &j in post {
        let best = pre.iter().map(|&m| cost.get(j, m)).fold(f64::INFINITY, f64::min);
        let near: Vec<usize> = pre
            .iter()
            .copied()
            .filter(|&m| cost.get(j, m) <= best + TIE_TOL)
            .collect();
        if near.len() > 1 {
            return Err(Error::numerical(format!(
                "post-change ball touches the pre-change support and atom {j} has {} nearest points",
                near.len()
            )));
        }
        plan2[j * n + near[0]] = nu0[j];
    }
    let mut p2 = vec![0.0; n];
    for l in 0..n {
        for m in 0..n {
            p2[m] += plan2[l * n + m];
        }
    }
    let mut plan1 = vec![0.0; n * n];
    for l in 0..n {
        plan1[l * n + l] = mu0[l];
    }
    Ok(Outcome {
        plan1,
        plan2,
        dual_bound: super::kl_divergence(&p2, mu0),
        dual: DualVariables::default(),
        iterations: 0,
        budget_exhausted: false,
    })
}

impl Program<'_> {
    fn nb(&self) -> usize {
        self.blocks.len()
    }

    fn p1(&self, m: usize, p: &[f64]) -> f64 {
        self.idx1[m].map_or(self.mu0[m], |i| p[i])
    }

    fn p2(&self, m: usize, p: &[f64]) -> f64 {
        match self.idx2[m] {
            Some(i) => p[i],
            None if self.mode == Mode::FixedPre => 0.0,
            None => self.nu0[m],
        }
    }

    fn objective(&self, p: &[f64]) -> f64 {
        (0..self.n).map(|m| kl_term(self.p2(m, p), self.p1(m, p))).sum()
    }

    fn local(&self, m: usize, p: &[f64]) -> Local {
        let (a, b) = (self.p1(m, p), self.p2(m, p));
        match self.mode {
            Mode::Both => Local {
                g1: -b / a,
                g2: (b / a).ln() + 1.0,
                h11: b / (a * a),
                h12: -1.0 / a,
                h22: 1.0 / b,
            },
            Mode::FixedPre if self.idx2[m].is_some() => Local {
                g2: (b / a).ln() + 1.0,
                h22: 1.0 / b,
                ..Local::default()
            },
            Mode::FixedPost => Local {
                g1: -b / a,
                h11: b / (a * a),
                ..Local::default()
            },
            Mode::FixedPre => Local::default(),
        }
    }

    fn initial_point(&self) -> State {
        let mut x = vec![0.0; self.nx];
        let mut s = vec![0.0; self.nb()];
        for (b, blk) in self.blocks.iter().enumerate() {
            let k = blk.cols.len() as f64;
            let mut near_cost = 0.0;
            let mut spread_cost = 0.0;
            let mut near = Vec::with_capacity(blk.sources.len());
            for (i, &l) in blk.sources.iter().enumerate() {
                let mut best = 0;
                for ci in 1..blk.cols.len() {
                    if self.cost.get(l, blk.cols[ci]) < self.cost.get(l, blk.cols[best]) {
                        best = ci;
                    }
                }
                near.push(best);
                near_cost += blk.mass[i] * self.cost.get(l, blk.cols[best]);
                spread_cost += blk.mass[i] * blk.cols.iter().map(|&m| self.cost.get(l, m)).sum::<f64>() / k;
            }
            let theta = if spread_cost > near_cost {
                (0.5 * (blk.radius - near_cost) / (spread_cost - near_cost)).min(0.5)
            } else {
                0.5
            };
            let mut total = 0.0;
            for (i, &l) in blk.sources.iter().enumerate() {
                for (ci, &m) in blk.cols.iter().enumerate() {
                    let mut v = theta * blk.mass[i] / k;
                    if ci == near[i] {
                        v += (1.0 - theta) * blk.mass[i];
                    }
                    x[blk.entry(i, ci)] = v;
                    total += v * self.cost.get(l, m);
                }
            }
            s[b] = blk.radius - total;
        }
        let p = self.column_sums(&x);
        let y = DVector::zeros(self.nr + self.nq + self.nb());
        State { x, s, p, y }
    }

    fn column_sums(&self, x: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.np];
        for blk in &self.blocks {
            for i in 0..blk.sources.len() {
                for ci in 0..blk.cols.len() {
                    p[blk.poff + ci] += x[blk.entry(i, ci)];
                }
            }
        }
        p
    }

    /// Row of the column-sum constraint for column `ci` of `blk`, if kept.
    fn erow(&self, blk: &Block, ci: usize) -> Option<usize> {
        (ci + 1 < blk.cols.len()).then(|| self.nr + blk.qoff + ci)
    }

    fn crow(&self, b: usize) -> usize {
        self.nr + self.nq + b
    }

    /// One Newton step on the barrier problem at parameter `t`.
    ///
    /// The system is written for the multiplier correction `Δy = y - st.y`,
    /// so its right-hand side is the dual residual at the current estimate
    /// rather than the O(t) gradient itself.
    fn newton(&self, st: &State, t: f64) -> Result<Step> {
        let (nr, np, nq, nb) = (self.nr, self.np, self.nq, self.nb());
        let d1 = nr + nq;
        let dim = d1 + nb;
        let yh = &st.y;
        // Transportation rows (row sums, reduced column sums) form G11; the
        // budget rows are kept apart because a cost row can lie in their span.
        let mut g11 = DMatrix::<f64>::zeros(d1, d1);
        let mut g1c = DMatrix::<f64>::zeros(d1, nb);
        let mut by = DVector::<f64>::zeros(dim);
        let mut rprim = DVector::<f64>::zeros(dim);
        // X² times the dual residual of each plan entry.
        let mut xgx = vec![0.0; self.nx];
        let mut gs = vec![0.0; nb];
        let mut colsum = vec![0.0; np];
        let mut colxg = vec![0.0; np];
        for (b, blk) in self.blocks.iter().enumerate() {
            let rc = self.crow(b);
            let mut cx = 0.0;
            let mut cxg = 0.0;
            for (i, &l) in blk.sources.iter().enumerate() {
                let ra = blk.roff + i;
                let mut rowsum = 0.0;
                let mut rowxg = 0.0;
                for (ci, &m) in blk.cols.iter().enumerate() {
                    let e = blk.entry(i, ci);
                    let xe = st.x[e];
                    let d = xe * xe;
                    let c = self.cost.get(l, m);
                    let re = self.erow(blk, ci);
                    let ye = re.map_or(0.0, |r| yh[r]);
                    let gx = -1.0 / xe + yh[ra] + ye + c * yh[rc];
                    xgx[e] = d * gx;
                    g11[(ra, ra)] += d;
                    g1c[(ra, b)] += d * c;
                    if let Some(re) = re {
                        g11[(re, re)] += d;
                        g11[(re, ra)] += d;
                        g1c[(re, b)] += d * c;
                    }
                    rowsum += xe;
                    rowxg += xgx[e];
                    colsum[blk.poff + ci] += xe;
                    colxg[blk.poff + ci] += xgx[e];
                    cx += xe * c;
                    cxg += xgx[e] * c;
                }
                rprim[ra] = blk.mass[i] - rowsum;
                by[ra] = rprim[ra] + rowxg;
            }
            gs[b] = -1.0 / st.s[b] + yh[rc];
            rprim[rc] = blk.radius - cx - st.s[b];
            by[rc] = rprim[rc] + cxg + st.s[b] * st.s[b] * gs[b];
            for ci in 0..blk.cols.len() {
                if let Some(re) = self.erow(blk, ci) {
                    let j = blk.poff + ci;
                    rprim[re] = st.p[j] - colsum[j];
                    by[re] = rprim[re] + colxg[j];
                }
            }
        }
        g11.fill_upper_triangle_with_lower_triangle();
        let gf = ScaledCholesky::new(g11, "transportation system")?;
        let b1 = by.rows(0, d1).into_owned();
        let w1 = gf.solve(&b1);
        let mut unit = DMatrix::<f64>::zeros(d1, nq);
        for k in 0..nq {
            unit[(nr + k, k)] = 1.0;
        }
        let zj = gf.solve_matrix(unit);
        let zc = gf.solve_matrix(g1c);

        // Objective Hessian and gradient in full marginal coordinates, pulled
        // back to the reduced ones through p = B q.
        let mut hp = DMatrix::<f64>::zeros(np, np);
        let mut gp = DVector::<f64>::zeros(np);
        let locals: Vec<Local> = (0..self.n).map(|m| self.local(m, &st.p)).collect();
        for (m, loc) in locals.iter().enumerate() {
            if let Some(i) = self.idx1[m] {
                hp[(i, i)] += t * loc.h11;
                gp[i] = t * loc.g1;
            }
            if let Some(j) = self.idx2[m] {
                hp[(j, j)] += t * loc.h22;
                gp[j] = t * loc.g2;
            }
            if let (Some(i), Some(j)) = (self.idx1[m], self.idx2[m]) {
                hp[(i, j)] += t * loc.h12;
                hp[(j, i)] += t * loc.h12;
            }
        }
        let mut basis = DMatrix::<f64>::zeros(np, nq);
        for blk in &self.blocks {
            let last = blk.poff + blk.cols.len() - 1;
            for ci in 0..blk.cols.len() - 1 {
                basis[(blk.poff + ci, blk.qoff + ci)] = 1.0;
                basis[(last, blk.qoff + ci)] = -1.0;
            }
        }
        let gq = basis.transpose() * &gp - yh.rows(nr, nq);

        // The budget Schur complement and its right-hand side are formed from
        // the residual r = c - M1ᵀ v of projecting the cost row onto the
        // transportation rows; subtracting G1cᵀ Zc directly loses everything
        // when the cost row is (nearly) in their span.
        let mut s_block = DVector::<f64>::zeros(nb);
        let mut rhs_c = DVector::<f64>::zeros(nb);
        // X² r: the plan direction that moves the cost alone.
        let mut xxr = vec![0.0; self.nx];
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut acc = st.s[b] * st.s[b];
            let mut rxg = 0.0;
            for (i, &l) in blk.sources.iter().enumerate() {
                let va = zc[(blk.roff + i, b)];
                for (ci, &m) in blk.cols.iter().enumerate() {
                    let ve = self.erow(blk, ci).map_or(0.0, |r| zc[(r, b)]);
                    let e = blk.entry(i, ci);
                    let xe = st.x[e];
                    let r = self.cost.get(l, m) - va - ve;
                    xxr[e] = xe * xe * r;
                    acc += xe * xe * r * r;
                    rxg += r * xgx[e];
                }
            }
            s_block[b] = acc;
            let vr: f64 = (0..d1).map(|k| zc[(k, b)] * rprim[k]).sum();
            rhs_c[b] = rprim[d1 + b] + st.s[b] * st.s[b] * gs[b] - vr + rxg;
        }

        // Quasi-definite system in (dq, Δy_c):
        //   [ B'HB + Zjj   Zjc ] [dq  ]   [ -gq - w1_E ]
        //   [ Zjcᵀ        -Sc  ] [Δy_c] = [ rhs_c      ]
        let mut kkt = DMatrix::<f64>::zeros(nq + nb, nq + nb);
        let p_block = basis.transpose() * &hp * &basis + zj.rows(nr, nq);
        let q_block = zc.rows(nr, nq).into_owned();
        kkt.view_mut((0, 0), (nq, nq)).copy_from(&((&p_block + p_block.transpose()) * 0.5));
        kkt.view_mut((0, nq), (nq, nb)).copy_from(&q_block);
        kkt.view_mut((nq, 0), (nb, nq)).copy_from(&q_block.transpose());
        for b in 0..nb {
            kkt[(nq + b, nq + b)] = -s_block[b];
        }
        let mut rhs = DVector::<f64>::zeros(nq + nb);
        rhs.rows_mut(0, nq).copy_from(&(-&gq - w1.rows(nr, nq)));
        rhs.rows_mut(nq, nb).copy_from(&rhs_c);
        let sol = solve_scaled_lu(kkt, &rhs)?;
        let dq = sol.rows(0, nq).into_owned();
        let dyc = sol.rows(nq, nb).into_owned();
        let dy1 = -(&zj * &dq) - &zc * &dyc - w1;
        let mut dy = DVector::<f64>::zeros(dim);
        dy.rows_mut(0, d1).copy_from(&dy1);
        dy.rows_mut(d1, nb).copy_from(&dyc);
        let dp: Vec<f64> = (&basis * &dq).iter().copied().collect();

        let mut dx = vec![0.0; self.nx];
        let mut ds = vec![0.0; nb];
        for (b, blk) in self.blocks.iter().enumerate() {
            let yc = dy[self.crow(b)];
            for (i, &l) in blk.sources.iter().enumerate() {
                let ya = dy[blk.roff + i];
                for (ci, &m) in blk.cols.iter().enumerate() {
                    let e = blk.entry(i, ci);
                    let xe = st.x[e];
                    let ye = self.erow(blk, ci).map_or(0.0, |r| dy[r]);
                    dx[e] = -xgx[e] - xe * xe * (ya + ye + yc * self.cost.get(l, m));
                }
            }
        }
        // Rounding leaves the plan step slightly off the linearized
        // constraints. Project it back in the barrier metric, then take the
        // slack step from the budget rows.
        for _ in 0..2 {
            let resid = &rprim - self.constraint_product(&dx, &ds, &dp);
            let w = gf.solve(&resid.rows(0, d1).into_owned());
            self.add_transport_correction(st, &w, &mut dx);
        }
        // Slack steps come from their own Newton equation. What is left on a
        // budget row is spread over the slack and the cost direction, which
        // leaves the transportation rows untouched.
        let prod = self.constraint_product(&dx, &vec![0.0; nb], &dp);
        for (b, blk) in self.blocks.iter().enumerate() {
            let sb = st.s[b];
            ds[b] = sb - sb * sb * (yh[d1 + b] + dyc[b]);
            let theta = (rprim[d1 + b] - prod[d1 + b] - ds[b]) / s_block[b];
            ds[b] += theta * sb * sb;
            for e in blk.xoff..blk.xoff + blk.sources.len() * blk.cols.len() {
                dx[e] += theta * xxr[e];
            }
        }
        let mut dec = 0.0;
        let mut slope = 0.0;
        for (d, v) in dx.iter().zip(&st.x).chain(ds.iter().zip(&st.s)) {
            let r = d / v;
            dec += r * r;
            slope -= r;
        }
        for (m, loc) in locals.iter().enumerate() {
            let d1 = self.idx1[m].map_or(0.0, |i| dp[i]);
            let d2 = self.idx2[m].map_or(0.0, |j| dp[j]);
            dec += t * (loc.h11 * d1 * d1 + 2.0 * loc.h12 * d1 * d2 + loc.h22 * d2 * d2);
            slope += t * (loc.g1 * d1 + loc.g2 * d2);
        }
        Ok(Step {
            dx,
            ds,
            dp,
            y: yh + dy,
            decrement2: dec,
            slope,
        })
    }

    /// `M (dx, ds, dp)` for the stacked row-sum, column-sum and budget rows.
    fn constraint_product(&self, dx: &[f64], ds: &[f64], dp: &[f64]) -> DVector<f64> {
        let mut out = DVector::<f64>::zeros(self.nr + self.nq + self.nb());
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut cd = ds[b];
            let mut cols = vec![0.0; blk.cols.len()];
            for (i, &l) in blk.sources.iter().enumerate() {
                let mut rs = 0.0;
                for (ci, &m) in blk.cols.iter().enumerate() {
                    let d = dx[blk.entry(i, ci)];
                    rs += d;
                    cols[ci] += d;
                    cd += d * self.cost.get(l, m);
                }
                out[blk.roff + i] = rs;
            }
            for (ci, c) in cols.iter().enumerate() {
                if let Some(re) = self.erow(blk, ci) {
                    out[re] = c - dp[blk.poff + ci];
                }
            }
            out[self.crow(b)] = cd;
        }
        out
    }

    /// `dx += X² M1ᵀ w` over the row-sum and reduced column-sum rows.
    fn add_transport_correction(&self, st: &State, w: &DVector<f64>, dx: &mut [f64]) {
        for blk in &self.blocks {
            for i in 0..blk.sources.len() {
                let wa = w[blk.roff + i];
                for ci in 0..blk.cols.len() {
                    let e = blk.entry(i, ci);
                    let xe = st.x[e];
                    let we = self.erow(blk, ci).map_or(0.0, |r| w[r]);
                    dx[e] += xe * xe * (wa + we);
                }
            }
        }
    }

    fn max_step(&self, st: &State, step: &Step) -> f64 {
        let mut alpha = f64::INFINITY;
        let pairs = st
            .x
            .iter()
            .zip(&step.dx)
            .chain(st.s.iter().zip(&step.ds))
            .chain(st.p.iter().zip(&step.dp));
        for (&v, &d) in pairs {
            if d < 0.0 {
                alpha = alpha.min(-v / d);
            }
        }
        alpha
    }

    /// Change of the barrier function along the step, computed term by term.
    fn merit_change(&self, st: &State, step: &Step, alpha: f64, t: f64) -> f64 {
        let trial: Vec<f64> = st.p.iter().zip(&step.dp).map(|(p, d)| p + alpha * d).collect();
        let df: f64 = (0..self.n)
            .map(|m| kl_term(self.p2(m, &trial), self.p1(m, &trial)) - kl_term(self.p2(m, &st.p), self.p1(m, &st.p)))
            .sum();
        let barrier: f64 = st
            .x
            .iter()
            .zip(&step.dx)
            .chain(st.s.iter().zip(&step.ds))
            .map(|(v, d)| (alpha * d / v).ln_1p())
            .sum();
        t * df - barrier
    }

    /// Takes the step, then puts the iterate back on the transportation
    /// constraints: rows are rescaled to their mass and marginals recomputed.
    fn apply(&self, st: &mut State, step: &Step, alpha: f64) {
        for (v, d) in st.x.iter_mut().zip(&step.dx) {
            *v += alpha * d;
        }
        for (v, d) in st.s.iter_mut().zip(&step.ds) {
            *v += alpha * d;
        }
        for blk in &self.blocks {
            for i in 0..blk.sources.len() {
                let row = blk.entry(i, 0)..blk.entry(i, 0) + blk.cols.len();
                let scale = blk.mass[i] / st.x[row.clone()].iter().sum::<f64>();
                st.x[row].iter_mut().for_each(|v| *v *= scale);
            }
        }
        st.p = self.column_sums(&st.x);
    }

    fn duals(&self, y: &DVector<f64>, t: f64) -> DualVariables {
        let mut dual = DualVariables {
            u1: vec![0.0; self.n],
            u2: vec![0.0; self.n],
            ..DualVariables::default()
        };
        for (b, blk) in self.blocks.iter().enumerate() {
            let lambda = (y[self.crow(b)] / t).max(0.0);
            let pre = self.blocks.len() == 2 && b == 0 || self.mode == Mode::FixedPost;
            let u = if pre { &mut dual.u1 } else { &mut dual.u2 };
            for (i, &l) in blk.sources.iter().enumerate() {
                u[l] = -y[blk.roff + i] / t;
            }
            if pre {
                dual.lambda1 = lambda;
            } else {
                dual.lambda2 = lambda;
            }
        }
        dual
    }

    /// `v_m = min_l (λ C_lm - u_l)` over the sources of a nominal.
    fn reduced(&self, lambda: f64, u: &[f64], nominal: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|m| {
                (0..self.n)
                    .filter(|&l| nominal[l] > 0.0)
                    .map(|l| lambda * self.cost.get(l, m) - u[l])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    /// Lower bound on the optimum from the dual function at `dual`, after the
    /// potentials are shifted by constants to make the point dual feasible.
    /// The shifts are optimal for the given `λ` and the shape of `u`.
    fn dual_bound(&self, dual: &mut DualVariables) -> f64 {
        let (r1, r2) = (self.blocks_radius(true), self.blocks_radius(false));
        match self.mode {
            Mode::Both => {
                let v1 = self.reduced(dual.lambda1, &dual.u1, self.mu0);
                let v2 = self.reduced(dual.lambda2, &dual.u2, self.nu0);
                let base = dot(self.mu0, &dual.u1) + dot(self.nu0, &dual.u2) - dual.lambda1 * r1 - dual.lambda2 * r2;
                let log_a: Vec<f64> = v2.iter().map(|v| -1.0 - v).collect();
                let shift = |gamma: f64| {
                    log_a
                        .iter()
                        .zip(&v1)
                        .map(|(la, v)| (la - gamma).exp() - v)
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                let value = |gamma: f64| -gamma - shift(gamma);
                let lo = log_a.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
                let hi = log_a.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
                let mut gamma = golden_max(value, lo, hi);
                for &c in &log_a {
                    if value(c) > value(gamma) {
                        gamma = c;
                    }
                }
                let delta = shift(gamma);
                for l in 0..self.n {
                    if self.mu0[l] > 0.0 {
                        dual.u1[l] -= delta;
                    }
                    if self.nu0[l] > 0.0 {
                        dual.u2[l] -= gamma;
                    }
                }
                base - gamma - delta
            }
            Mode::FixedPre => {
                let v2 = self.reduced(dual.lambda2, &dual.u2, self.nu0);
                let base = dot(self.nu0, &dual.u2) - dual.lambda2 * r2;
                let terms: Vec<f64> = (0..self.n)
                    .filter(|&m| self.mu0[m] > 0.0)
                    .map(|m| self.mu0[m].ln() - 1.0 - v2[m])
                    .collect();
                let log_q = log_sum_exp(&terms);
                for l in 0..self.n {
                    if self.nu0[l] > 0.0 {
                        dual.u2[l] -= log_q;
                    }
                }
                base - 1.0 - log_q
            }
            Mode::FixedPost => {
                let v1 = self.reduced(dual.lambda1, &dual.u1, self.mu0);
                let base = dot(self.mu0, &dual.u1) - dual.lambda1 * r1;
                let q = self.nu0;
                let value = |delta: f64| {
                    let mut acc = -delta;
                    for m in 0..self.n {
                        let v = v1[m] + delta;
                        if q[m] > 0.0 {
                            if v <= 0.0 {
                                return f64::NEG_INFINITY;
                            }
                            acc += q[m] * (1.0 + v.ln());
                        } else if v < 0.0 {
                            return f64::NEG_INFINITY;
                        }
                    }
                    acc
                };
                let deriv = |delta: f64| -1.0 + (0..self.n).filter(|&m| q[m] > 0.0).map(|m| q[m] / (v1[m] + delta)).sum::<f64>();
                let lo = -v1.iter().copied().fold(f64::INFINITY, f64::min);
                let min_pos = (0..self.n).filter(|&m| q[m] > 0.0).map(|m| v1[m]).fold(f64::INFINITY, f64::min);
                let delta = if lo + min_pos > 0.0 && deriv(lo) <= 0.0 {
                    lo
                } else {
                    let mut a = lo.max(-min_pos);
                    let mut b = a.max(-min_pos) + 1.0 + a.abs() * 1e-12;
                    while deriv(b) > 0.0 {
                        b += (b - a).max(1.0);
                    }
                    for _ in 0..200 {
                        let mid = 0.5 * (a + b);
                        if mid <= a || mid >= b {
                            break;
                        }
                        if deriv(mid) > 0.0 {
                            a = mid;
                        } else {
                            b = mid;
                        }
                    }
                    b
                };
                for l in 0..self.n {
                    if self.mu0[l] > 0.0 {
                        dual.u1[l] -= delta;
                    }
                }
                base + value(delta)
            }
        }
    }

    fn blocks_radius(&self, pre: bool) -> f64 {
        match (self.mode, pre) {
            (Mode::Both, true) | (Mode::FixedPost, true) => self.blocks[0].radius,
            (Mode::Both, false) => self.blocks[1].radius,
            (Mode::FixedPre, false) => self.blocks[0].radius,
            _ => 0.0,
        }
    }

    /// Plans rescaled to the exact nominal row sums, as dense `n × n` arrays.
    fn finalize(&self, st: &State) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut plans = [vec![0.0; n * n], vec![0.0; n * n]];
        for (b, blk) in self.blocks.iter().enumerate() {
            let which = match self.mode {
                Mode::Both => b,
                Mode::FixedPre => 1,
                Mode::FixedPost => 0,
            };
            for (i, &l) in blk.sources.iter().enumerate() {
                let row: Vec<f64> = (0..blk.cols.len()).map(|ci| st.x[blk.entry(i, ci)]).collect();
                let scale = blk.mass[i] / row.iter().sum::<f64>();
                for (ci, &m) in blk.cols.iter().enumerate() {
                    plans[which][l * n + m] = row[ci] * scale;
                }
            }
        }
        match self.mode {
            Mode::FixedPre => {
                for l in 0..n {
                    plans[0][l * n + l] = self.mu0[l];
                }
            }
            Mode::FixedPost => {
                for l in 0..n {
                    plans[1][l * n + l] = self.nu0[l];
                }
            }
            Mode::Both => {}
        }
        let [a, b] = plans;
        (a, b)
    }

    fn run(&self, options: &SolverOptions) -> Result<Outcome> {
        let mut st = self.initial_point();
        let mut t = T_INIT;
        let mut factor = T_FACTOR;
        let t_min = (1e8 * (self.nx + self.nb()) as f64).min(1e14);
        let mut iterations = 0;
        let mut best: Option<(f64, DualVariables)> = None;
        let mut exhausted = false;
        // Last iterate known to be centered, with its parameter.
        let mut anchor: Option<(State, f64)> = None;
        'outer: loop {
            let mut last_y = None;
            let mut settled = 0;
            let mut centered = false;
            for _ in 0..MAX_CENTER_STEPS {
                if iterations >= options.max_iterations {
                    exhausted = true;
                    break 'outer;
                }
                iterations += 1;
                let step = self.newton(&st, t)?;
                let amax = self.max_step(&st, &step);
                let mut alpha = (0.99 * amax).min(1.0);
                // Rounding puts a floor under the decrement at large t; a few
                // steps inside the quadratic region are as good as it gets.
                if step.decrement2 < SETTLED_DECREMENT {
                    settled += 1;
                }
                let done = step.decrement2 <= CENTER_TOL || settled >= SETTLED_STEPS;
                if step.decrement2 > 0.04 {
                    let mut accepted = false;
                    for _ in 0..60 {
                        let change = self.merit_change(&st, &step, alpha, t);
                        if change <= 0.25 * alpha * step.slope.min(0.0) || change <= 0.0 && step.slope >= 0.0 {
                            accepted = true;
                            break;
                        }
                        alpha *= 0.5;
                    }
                    if !accepted {
                        last_y = Some(step.y);
                        break;
                    }
                }
                self.apply(&mut st, &step, alpha);
                st.y = step.y.clone();
                last_y = Some(step.y);
                if done {
                    centered = true;
                    break;
                }
            }
            if let Some(y) = last_y {
                let mut dual = self.duals(&y, t);
                let bound = self.dual_bound(&mut dual);
                if best.as_ref().is_none_or(|(b, _)| bound > *b) {
                    best = Some((bound, dual));
                }
            }
            if !centered {
                // Go back to the last centered point and approach with a
                // shorter step in t, until the steps get too short to matter.
                let Some((prev, t_prev)) = anchor.clone() else {
                    break;
                };
                st = prev;
                t = t_prev;
                if factor <= MIN_T_FACTOR {
                    break;
                }
                factor = factor.sqrt();
                t *= factor;
                st.y *= factor;
                continue;
            }
            anchor = Some((st.clone(), t));
            let objective = self.objective(&self.column_sums(&st.x));
            let bound = best.as_ref().map_or(f64::NEG_INFINITY, |b| b.0);
            let gap = (objective - bound) / objective.abs().max(1.0);
            if (t >= t_min && gap <= 1e-2 * options.gap_tol) || t >= T_MAX {
                break;
            }
            t *= factor;
            st.y *= factor;
        }
        let (plan1, plan2) = self.finalize(&st);
        let (dual_bound, dual) = best.unwrap_or((f64::NEG_INFINITY, DualVariables::default()));
        Ok(Outcome {
            plan1,
            plan2,
            dual_bound,
            dual,
            iterations,
            budget_exhausted: exhausted,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Golden-section search for the maximum of a concave function on `[lo, hi]`.
pub(super) fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if hi - lo <= 1e-15 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if fa < fb {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        } else {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        }
    }
    if fa >= fb {
        a
    } else {
        b
    }
}

/// LU solve of `S K S (S⁻¹ x) = S b` with `S = |diag(K)|^{-1/2}`.
fn solve_scaled_lu(mut k: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = k.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let d = k[(i, i)].abs();
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        }),
    );
    for j in 0..n {
        for i in 0..n {
            k[(i, j)] *= scale[i] * scale[j];
        }
    }
    let b = rhs.component_mul(&scale);
    let x = k
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numerical("singular reduced Newton system"))?;
    Ok(x.component_mul(&scale))
}

/// Cholesky factorization of `S G S` with `S = diag(G)^{-1/2}`.
struct ScaledCholesky {
    scale: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ScaledCholesky {
    fn new(mut g: DMatrix<f64>, what: &str) -> Result<Self> {
        let n = g.nrows();
        let scale = DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let d = g[(i, i)];
                if d > 0.0 && d.is_finite() {
                    1.0 / d.sqrt()
                } else {
                    1.0
                }
            }),
        );
        for j in 0..n {
            for i in 0..n {
                g[(i, j)] *= scale[i] * scale[j];
            }
        }
        let mut reg = 0.0;
        loop {
            let mut trial = g.clone();
            if reg > 0.0 {
                for i in 0..n {
                    trial[(i, i)] += reg;
                }
            }
            if let Some(chol) = trial.cholesky() {
                return Ok(ScaledCholesky { scale, chol });
            }
            reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 };
            if reg > 1e-6 {
                return Err(Error::numerical(format!("{what} is not positive definite")));
            }
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs.component_mul(&self.scale);
        self.chol.solve(&scaled).component_mul(&self.scale)
    }

    fn solve_matrix(&self, mut rhs: DMatrix<f64>) -> DMatrix<f64> {
        for j in 0..rhs.ncols() {
            for i in 0..rhs.nrows() {
                rhs[(i, j)] *= self.scale[i];
            }
        }
        let mut out = self.chol.solve(&rhs);
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out[(i, j)] *= self.scale[i];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_finds_concave_maximum() {
        let x = golden_max(|x| -(x - 1.3).powi(2), -10.0, 10.0);
        assert!((x - 1.3).abs() < 1e-7);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
