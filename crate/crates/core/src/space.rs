//! Sample points, ground metrics and finitely supported distributions.
//!
//! Everything here is immutable after construction and validated once, so the
//! downstream transport and LFD code can assume finite coordinates, a common
//! dimension, distinct support atoms and weights that sum to one.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a probability vector.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Mass errors up to this size are renormalized away; larger ones are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// A point of the sample space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("a point needs at least one coordinate"));
        }
        if let Some(bad) = coords.iter().find(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite coordinate {bad}")));
        }
        Ok(Point(coords))
    }

    /// One-dimensional point. Panics on a non-finite value.
    pub fn scalar(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite coordinate {x}");
        Point(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Bit-level key used to merge duplicates; `-0.0` and `0.0` collide.
    fn key(&self) -> Vec<u64> {
        self.0
            .iter()
            .map(|&c| if c == 0.0 { 0 } else { c.to_bits() })
            .collect()
    }
}

impl From<f64> for Point {
    fn from(x: f64) -> Self {
        Point::scalar(x)
    }
}

/// Order of the norm inducing the transport cost `c(x, y) = ||x - y||`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundMetric {
    L1,
    L2,
    Linf,
}

impl fmt::Display for GroundMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroundMetric::L1 => "l1",
            GroundMetric::L2 => "l2",
            GroundMetric::Linf => "linf",
        })
    }
}

impl std::str::FromStr for GroundMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(GroundMetric::L1),
            "l2" => Ok(GroundMetric::L2),
            "linf" | "l-inf" | "inf" => Ok(GroundMetric::Linf),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (expected l1, l2 or linf)"
            ))),
        }
    }
}

/// Transport cost between two points of equal dimension.
pub fn ground_cost(metric: GroundMetric, x: &Point, y: &Point) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(cost_unchecked(metric, x.coords(), y.coords()))
}

fn cost_unchecked(metric: GroundMetric, x: &[f64], y: &[f64]) -> f64 {
    let diffs = x.iter().zip(y).map(|(a, b)| (a - b).abs());
    match metric {
        GroundMetric::L1 => diffs.sum(),
        GroundMetric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        GroundMetric::Linf => diffs.fold(0.0, f64::max),
    }
}

/// Dense row-major matrix of pairwise ground costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }
}

/// Pairwise costs between two point lists: entry `(l, m)` is `c(a[l], b[m])`.
pub fn cost_matrix(metric: GroundMetric, a: &[Point], b: &[Point]) -> Result<CostMatrix> {
    let dim = a.first().or(b.first()).map(Point::dim).unwrap_or(0);
    if let Some(p) = a.iter().chain(b).find(|p| p.dim() != dim) {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            dim
        )));
    }
    let mut data = Vec::with_capacity(a.len() * b.len());
    for x in a {
        data.extend(b.iter().map(|y| cost_unchecked(metric, x.coords(), y.coords())));
    }
    Ok(CostMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    })
}

/// A probability distribution on finitely many distinct points.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Validates and, when the mass is off by at most [`RENORMALIZE_TOL`],
    /// renormalizes the weights.
    pub fn new(support: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("empty support"));
        }
        if support.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} support points but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let dim = support[0].dim();
        if support.iter().any(|p| p.dim() != dim) {
            return Err(Error::invalid("support points of mixed dimension"));
        }
        let weights = normalize_probability(weights)?;
        let mut seen = HashMap::with_capacity(support.len());
        for (i, p) in support.iter().enumerate() {
            if let Some(j) = seen.insert(p.key(), i) {
                return Err(Error::invalid(format!(
                    "support points {j} and {i} coincide"
                )));
            }
        }
        Ok(DiscreteDistribution { support, weights })
    }

    pub fn dirac(p: Point) -> Self {
        DiscreteDistribution {
            support: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].dim()
    }

    /// `Σ w_l f(z_l)`.
    pub fn expectation(&self, f: impl Fn(&Point) -> f64) -> f64 {
        self.support
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(p))
            .sum()
    }
}

/// Checks a probability vector, renormalizing small mass errors.
pub fn normalize_probability(mut weights: Vec<f64>) -> Result<Vec<f64>> {
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::invalid(format!("invalid probability weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    let err = (total - 1.0).abs();
    if err > RENORMALIZE_TOL {
        return Err(Error::invalid(format!("weights sum to {total}, not 1")));
    }
    if err > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    Ok(weights)
}

/// Empirical distribution of a sample; repeated points are merged into one
/// atom carrying their combined mass. Atoms keep first-occurrence order.
pub fn empirical_from_samples(samples: &[Point]) -> Result<DiscreteDistribution> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot build an empirical distribution from no samples"));
    }
    let dim = samples[0].dim();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(samples.len());
    let mut support = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for p in samples {
        if p.dim() != dim {
            return Err(Error::invalid(format!(
                "dimension mismatch: {} vs {}",
                p.dim(),
                dim
            )));
        }
        match index.get(&p.key()) {
            Some(&i) => counts[i] += 1,
            None => {
                index.insert(p.key(), support.len());
                support.push(p.clone());
                counts.push(1);
            }
        }
    }
    let n = samples.len() as f64;
    let weights = counts.into_iter().map(|c| c as f64 / n).collect();
    DiscreteDistribution::new(support, weights)
}

/// A Wasserstein ball `{μ : W(μ, nominal) ≤ radius}`.
#[derive(Clone, Debug)]
pub struct AmbiguitySpec {
    pub nominal: DiscreteDistribution,
    pub radius: f64,
    pub metric: GroundMetric,
}

impl AmbiguitySpec {
    pub fn new(nominal: DiscreteDistribution, radius: f64, metric: GroundMetric) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::invalid(format!("radius must be finite and >= 0, got {radius}")));
        }
        Ok(AmbiguitySpec {
            nominal,
            radius,
            metric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().copied().map(Point::scalar).collect()
    }

    #[test]
    fn empirical_single_point() {
        let d = empirical_from_samples(&pts(&[0.0])).unwrap();
        assert_eq!(d.support(), &pts(&[0.0])[..]);
        assert_eq!(d.weights(), &[1.0]);
    }

    #[test]
    fn empirical_merges_duplicates() {
        let d = empirical_from_samples(&pts(&[0.0, 1.0, 1.0])).unwrap();
        assert_eq!(d.support(), &pts(&[0.0, 1.0])[..]);
        assert!((d.weights()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((d.weights()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_rejects_empty_and_mixed_dims() {
        assert!(matches!(empirical_from_samples(&[]), Err(Error::InvalidInput(_))));
        let mixed = vec![Point::scalar(0.0), Point::new(vec![0.0, 1.0]).unwrap()];
        assert!(empirical_from_samples(&mixed).is_err());
    }

    #[test]
    fn negative_zero_merges_with_zero() {
        let d = empirical_from_samples(&pts(&[0.0, -0.0])).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn ground_cost_examples() {
        let o = Point::new(vec![0.0, 0.0]).unwrap();
        let a = Point::new(vec![1.0, 2.0]).unwrap();
        let b = Point::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(ground_cost(GroundMetric::L1, &o, &o).unwrap(), 0.0);
        assert_eq!(ground_cost(GroundMetric::L1, &o, &a).unwrap(), 3.0);
        assert_eq!(ground_cost(GroundMetric::L2, &o, &b).unwrap(), 5.0);
        assert_eq!(ground_cost(GroundMetric::Linf, &o, &b).unwrap(), 4.0);
        assert!(ground_cost(GroundMetric::L1, &o, &Point::scalar(1.0)).is_err());
    }

    #[test]
    fn cost_matrix_examples() {
        let c = cost_matrix(GroundMetric::L1, &pts(&[0.0, 1.0]), &pts(&[0.0, 1.0])).unwrap();
        assert_eq!(c.to_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let c = cost_matrix(GroundMetric::L1, &pts(&[0.0]), &pts(&[2.0, 5.0])).unwrap();
        assert_eq!(c.to_rows(), vec![vec![2.0, 5.0]]);
    }

    #[test]
    fn cost_matrix_of_joint_points_is_symmetric() {
        let z: Vec<Point> = (0..100)
            .map(|i| Point::new(vec![(i as f64 * 0.37).sin() * 3.0]).unwrap())
            .collect();
        let c = cost_matrix(GroundMetric::L2, &z, &z).unwrap();
        for l in 0..100 {
            assert_eq!(c.get(l, l), 0.0);
            for m in 0..100 {
                assert_eq!(c.get(l, m), c.get(m, l));
                let direct = ground_cost(GroundMetric::L2, &z[l], &z[m]).unwrap();
                assert_eq!(c.get(l, m), direct);
            }
        }
    }

    #[test]
    fn distribution_weight_rules() {
        let s = pts(&[0.0, 1.0]);
        let d = DiscreteDistribution::new(s.clone(), vec![0.5, 0.5 + 5e-10]).unwrap();
        assert!((d.weights().iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL);
        assert!(DiscreteDistribution::new(s.clone(), vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(s.clone(), vec![-0.1, 1.1]).is_err());
        assert!(DiscreteDistribution::new(pts(&[1.0, 1.0]), vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("L1".parse::<GroundMetric>().unwrap(), GroundMetric::L1);
        assert_eq!("linf".parse::<GroundMetric>().unwrap(), GroundMetric::Linf);
        assert!("l3".parse::<GroundMetric>().is_err());
    }

    fn point3() -> impl Strategy<Value = Point> {
        prop::collection::vec(-10.0f64..10.0, 3).prop_map(|v| Point::new(v).unwrap())
    }

    fn metric() -> impl Strategy<Value = GroundMetric> {
        prop_oneof![
            Just(GroundMetric::L1),
            Just(GroundMetric::L2),
            Just(GroundMetric::Linf)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn ground_cost_is_a_metric(m in metric(), x in point3(), y in point3(), z in point3()) {
            let dxy = ground_cost(m, &x, &y).unwrap();
            let dyx = ground_cost(m, &y, &x).unwrap();
            let dxz = ground_cost(m, &x, &z).unwrap();
            let dyz = ground_cost(m, &y, &z).unwrap();
            prop_assert!(dxy >= 0.0);
            prop_assert_eq!(dxy, dyx);
            prop_assert_eq!(ground_cost(m, &x, &x).unwrap(), 0.0);
            prop_assert!(dxz <= dxy + dyz + 1e-12);
            if x != y {
                prop_assert!(dxy > 0.0);
            }
        }

        #[test]
        fn empirical_output_is_valid(xs in prop::collection::vec(-3i32..3, 1..40)) {
            let samples: Vec<Point> = xs.iter().map(|&v| Point::scalar(v as f64)).collect();
            let d = empirical_from_samples(&samples).unwrap();
            let total: f64 = d.weights().iter().sum();
            prop_assert!((total - 1.0).abs() <= WEIGHT_SUM_TOL);
            prop_assert!(d.weights().iter().all(|&w| w > 0.0));
            prop_assert!(DiscreteDistribution::new(d.support().to_vec(), d.weights().to_vec()).is_ok());
        }
    }
}
