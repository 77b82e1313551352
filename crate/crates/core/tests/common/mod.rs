//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the transport or LFD solvers.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// `Σ p2 log(p2/p1)` with `0 log 0 = 0`.
pub fn kl(p2: &[f64], p1: &[f64]) -> f64 {
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

/// `W1` between equal-size empirical measures on the line: mean absolute
/// difference of the sorted samples.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `W1` between weighted measures on the line: `∫ |F − G|`.
pub fn w1_cdf(xs: &[f64], p: &[f64], ys: &[f64], q: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = xs.iter().zip(p).map(|(&x, &w)| (x, w)).collect();
    events.extend(ys.iter().zip(q).map(|(&y, &w)| (y, -w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        diff += pair[0].1;
        total += diff.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Uniform weights over the samples, merged onto the sorted distinct values.
pub fn empirical_1d(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mut xs: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for x in s {
        if xs.last() == Some(&x) {
            *ws.last_mut().unwrap() += 1.0 / samples.len() as f64;
        } else {
            xs.push(x);
            ws.push(1.0 / samples.len() as f64);
        }
    }
    (xs, ws)
}

pub fn ground(metric: &str, a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match metric {
        "l1" => d.sum(),
        "l2" => d.map(|v| v * v).sum::<f64>().sqrt(),
        "linf" => d.fold(0.0, f64::max),
        _ => unreachable!(),
    }
}

/// Minimizes `KL(p2 ‖ p1)` over `W1(p1, mu0) ≤ r1`, `W1(p2, nu0) ≤ r2` on a
/// sorted grid `z` of at most four atoms.
///
/// On the line `W1(mu0 + t(q − mu0), mu0) = t·W1(q, mu0)`, so pulling any
/// probability vector `q` towards the nominal until the budget is met lands
/// on a feasible point, and every feasible point is reached this way. The
/// search runs over pairs `(q1, q2)`: a coarse simplex grid, then a local
/// lattice of ±4 steps around the incumbent with the step halved until it
/// falls below 1e-7.
pub fn lfd_grid_search(z: &[f64], mu0: &[f64], nu0: &[f64], r1: f64, r2: f64) -> f64 {
    let n = z.len();
    assert!(n <= 4);
    let pull = |q: &[f64], nominal: &[f64], r: f64| -> Vec<f64> {
        let w = w1_cdf(z, q, z, nominal);
        let t = if w <= r { 1.0 } else { r / w };
        nominal.iter().zip(q).map(|(a, b)| a + t * (b - a)).collect()
    };
    let m = 24usize;
    let mut grid = Vec::new();
    let mut current = vec![0usize; n];
    simplex_points(n, m, 0, m, &mut current, &mut grid);
    let images1: Vec<Vec<f64>> = grid.iter().map(|q| pull(q, mu0, r1)).collect();
    let images2: Vec<Vec<f64>> = grid.iter().map(|q| pull(q, nu0, r2)).collect();
    let mut best = (kl(nu0, mu0), mu0.to_vec(), nu0.to_vec());
    for (q1, p1) in grid.iter().zip(&images1) {
        for (q2, p2) in grid.iter().zip(&images2) {
            let v = kl(p2, p1);
            if v < best.0 {
                best = (v, q1.clone(), q2.clone());
            }
        }
    }
    let (mut value, mut q1, mut q2) = best;
    let mut step = 0.5 / m as f64;
    let mut moves = 0;
    while step > 1e-7 {
        let c1: Vec<(Vec<f64>, Vec<f64>)> = lattice(&q1, step).into_iter().map(|q| (pull(&q, mu0, r1), q)).collect();
        let c2: Vec<(Vec<f64>, Vec<f64>)> = lattice(&q2, step).into_iter().map(|q| (pull(&q, nu0, r2), q)).collect();
        let mut improved = false;
        for (a, qa) in &c1 {
            for (b, qb) in &c2 {
                let v = kl(b, a);
                if v < value - 1e-15 {
                    value = v;
                    q1 = qa.clone();
                    q2 = qb.clone();
                    improved = true;
                }
            }
        }
        moves += 1;
        if !improved || moves == 40 {
            step /= 2.0;
            moves = 0;
        }
    }
    value
}

/// Probability vectors `center + step·k` with `k ∈ [−4, 4]` in every free
/// coordinate, the last coordinate absorbing the difference.
fn lattice(center: &[f64], step: f64) -> Vec<Vec<f64>> {
    let n = center.len();
    let free = n - 1;
    let mut out = Vec::new();
    let count = 9usize.pow(free as u32);
    for code in 0..count {
        let mut c = code;
        let mut p = center.to_vec();
        for coord in p.iter_mut().take(free) {
            *coord += step * ((c % 9) as f64 - 4.0);
            c /= 9;
        }
        let rest: f64 = p[..free].iter().sum();
        p[free] = 1.0 - rest;
        if p.iter().all(|&x| x >= 0.0) {
            out.push(p);
        }
    }
    out
}

fn simplex_points(n: usize, m: usize, i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
    if i == n - 1 {
        cur[i] = left;
        out.push(cur.iter().map(|&c| c as f64 / m as f64).collect());
        return;
    }
    for c in 0..=left {
        cur[i] = c;
        simplex_points(n, m, i + 1, left - c, cur, out);
    }
}
